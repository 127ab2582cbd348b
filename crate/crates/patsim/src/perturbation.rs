//! Controlled error injection: replaces profile concepts with semantically
//! similar but clinically distinct alternatives.
//!
//! Candidates come from nearest-neighbor retrieval over display-name
//! embeddings; the ontology filter then rejects hierarchical ancestors and
//! descendants and enforces a minimum hierarchical distance. When nothing
//! survives, a relaxation policy widens the pool and then lowers the
//! distance floor stepwise.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ontology::{ConceptCode, Ontology, OntologyError};
use crate::ports::Embedder;
use crate::profilegen::{FactIndex, MedicalProfile};

pub const DEFAULT_CANDIDATE_POOL_SIZE: usize = 20;
pub const DEFAULT_MIN_DISTANCE: u32 = 3;
/// Default fraction of eligible facts to perturb, calibrated to the
/// roughly one-in-six perturbed-concept share used for judge validation.
pub const DEFAULT_TARGET_FRACTION: f64 = 0.16;

#[derive(Debug, thiserror::Error)]
pub enum PerturbError {
    #[error("no admissible replacement for {code} after exhausting relaxation")]
    NoReplacement { code: ConceptCode },
    #[error("invalid perturbation plan: {0}")]
    InvalidPlan(String),
    #[error(
        "could not reach the perturbation target: {achieved} of {target} facts replaceable"
    )]
    TargetUnreachable { achieved: usize, target: usize },
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

/// One relaxation step applied when no candidate survives the filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxationStep {
    /// Multiply the candidate pool size.
    ExpandPool { factor: usize },
    /// Lower the minimum hierarchical distance by one (floor 2).
    LowerMinDistance,
}

/// Parameters for one perturbation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    /// Fraction of eligible (non-demographic) facts to replace, in (0, 1].
    pub target_fraction: f64,
    pub candidate_pool_size: usize,
    pub min_distance: u32,
    pub seed: u64,
    /// Fallback steps applied in order when the filter rejects the whole
    /// pool. The default doubles the pool once, then lowers the distance
    /// floor one step at a time down to 2.
    pub relaxation_policy: Vec<RelaxationStep>,
}

impl PerturbationPlan {
    pub fn new(target_fraction: f64, seed: u64) -> Self {
        PerturbationPlan {
            target_fraction,
            candidate_pool_size: DEFAULT_CANDIDATE_POOL_SIZE,
            min_distance: DEFAULT_MIN_DISTANCE,
            seed,
            relaxation_policy: default_relaxation_policy(DEFAULT_MIN_DISTANCE),
        }
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return Err(PerturbError::InvalidPlan(format!(
                "target_fraction must lie in (0, 1], got {}",
                self.target_fraction
            )));
        }
        if self.candidate_pool_size == 0 {
            return Err(PerturbError::InvalidPlan(
                "candidate_pool_size must be at least 1".to_string(),
            ));
        }
        if self.min_distance == 0 {
            return Err(PerturbError::InvalidPlan(
                "min_distance must be at least 1".to_string(),
            ));
        }
        Ok(())
    }

    /// Effective `(pool_size, min_distance)` after the first `level`
    /// relaxation steps.
    pub fn effective_at(&self, level: usize) -> (usize, u32) {
        let mut pool = self.candidate_pool_size;
        let mut min_distance = self.min_distance;
        for step in self.relaxation_policy.iter().take(level) {
            match step {
                RelaxationStep::ExpandPool { factor } => pool *= factor.max(&1),
                RelaxationStep::LowerMinDistance => {
                    min_distance = min_distance.saturating_sub(1).max(2.min(self.min_distance))
                }
            }
        }
        (pool, min_distance)
    }
}

/// Pool ×2 once, then distance −1 per step down to 2.
pub fn default_relaxation_policy(min_distance: u32) -> Vec<RelaxationStep> {
    let mut policy = vec![RelaxationStep::ExpandPool { factor: 2 }];
    let mut d = min_distance;
    while d > 2 {
        policy.push(RelaxationStep::LowerMinDistance);
        d -= 1;
    }
    policy
}

/// Ground truth for one replacement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub original: ConceptCode,
    pub replacement: ConceptCode,
    /// 1-based rank of the replacement in the similarity retrieval order.
    pub similarity_rank: usize,
    /// Hierarchical distance between original and replacement; `None`
    /// means the two are in disconnected components (infinite distance).
    pub distance: Option<u32>,
    /// How many relaxation steps were needed (0 = none).
    pub relaxation_level: usize,
}

/// A perturbed fact inside a specific profile; rows of the ground-truth
/// answer key consumed by the agreement module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfilePerturbation {
    pub profile_id: String,
    pub index: FactIndex,
    #[serde(flatten)]
    pub record: PerturbationRecord,
}

/// Precomputed similarity retrieval over one vocabulary's display names.
pub struct ConceptEmbeddingIndex {
    entries: Vec<(ConceptCode, Vec<f64>)>,
}

impl ConceptEmbeddingIndex {
    /// Embeds every concept sharing `vocabulary` (code order, so ranking
    /// ties break deterministically).
    pub fn build(
        ontology: &Ontology,
        embedder: &dyn Embedder,
        vocabulary: crate::ontology::Vocabulary,
    ) -> Self {
        let entries = ontology
            .nodes()
            .filter(|n| n.code.vocabulary == vocabulary)
            .map(|n| (n.code.clone(), embedder.embed(&n.display_name)))
            .collect();
        ConceptEmbeddingIndex { entries }
    }

    /// Concepts nearest to `query` by cosine similarity, descending,
    /// excluding `exclude`; ties break by code ascending.
    pub fn nearest(&self, query: &[f64], exclude: &ConceptCode, limit: usize) -> Vec<ConceptCode> {
        let mut scored: Vec<(f64, &ConceptCode)> = self
            .entries
            .iter()
            .filter(|(code, _)| code != exclude)
            .map(|(code, vec)| (cosine(query, vec), code))
            .collect();
        scored.sort_by(|(sa, ca), (sb, cb)| {
            sb.partial_cmp(sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| ca.cmp(cb))
        });
        scored
            .into_iter()
            .take(limit)
            .map(|(_, code)| code.clone())
            .collect()
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Selects a replacement for `code`: retrieve the nearest candidates,
/// shuffle them under the plan seed, and take the first that is neither a
/// hierarchical ancestor/descendant of the original nor closer than the
/// effective minimum distance. Escalates through the relaxation policy
/// when the whole pool is rejected.
pub fn select_perturbation(
    ontology: &Ontology,
    embedder: &dyn Embedder,
    code: &ConceptCode,
    plan: &PerturbationPlan,
) -> Result<PerturbationRecord, PerturbError> {
    let index = ConceptEmbeddingIndex::build(ontology, embedder, code.vocabulary);
    select_perturbation_with_index(ontology, &index, embedder, code, plan)
}

/// [`select_perturbation`] against a prebuilt embedding index.
pub fn select_perturbation_with_index(
    ontology: &Ontology,
    index: &ConceptEmbeddingIndex,
    embedder: &dyn Embedder,
    code: &ConceptCode,
    plan: &PerturbationPlan,
) -> Result<PerturbationRecord, PerturbError> {
    plan.validate()?;
    let query = embedder.embed(ontology.display_name(code)?);
    for level in 0..=plan.relaxation_policy.len() {
        let (pool_size, min_distance) = plan.effective_at(level);
        let ranked = index.nearest(&query, code, pool_size);
        let mut order: Vec<usize> = (0..ranked.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        order.shuffle(&mut rng);
        for i in order {
            let candidate = &ranked[i];
            if ontology.is_ancestor_or_descendant(code, candidate)? {
                continue;
            }
            let distance = ontology.hierarchical_distance(code, candidate)?;
            if let Some(d) = distance {
                if d < min_distance {
                    continue;
                }
            }
            return Ok(PerturbationRecord {
                original: code.clone(),
                replacement: candidate.clone(),
                similarity_rank: i + 1,
                distance,
                relaxation_level: level,
            });
        }
    }
    Err(PerturbError::NoReplacement { code: code.clone() })
}

/// Replaces `⌈target_fraction · eligible⌉` non-demographic facts, chosen
/// uniformly under the plan seed. Demographic facts are never perturbed
/// and indices are preserved. When a chosen fact has no admissible
/// replacement, a different fact is drawn in its place; the pass fails
/// only when the target count is unreachable.
pub fn perturb_profile(
    profile: &MedicalProfile,
    ontology: &Ontology,
    embedder: &dyn Embedder,
    plan: &PerturbationPlan,
) -> Result<(MedicalProfile, Vec<ProfilePerturbation>), PerturbError> {
    plan.validate()?;
    let eligible: Vec<FactIndex> = profile.clinical_facts().map(|f| f.index).collect();
    let target = (plan.target_fraction * eligible.len() as f64).ceil() as usize;
    if target == 0 {
        return Ok((profile.clone(), Vec::new()));
    }

    let mut order = eligible.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    order.shuffle(&mut rng);

    // One embedding index per vocabulary actually present.
    let mut indices: std::collections::BTreeMap<
        crate::ontology::Vocabulary,
        ConceptEmbeddingIndex,
    > = std::collections::BTreeMap::new();

    let mut perturbed = profile.clone();
    let mut records = Vec::new();
    for (attempt, fact_index) in order.iter().enumerate() {
        if records.len() >= target {
            break;
        }
        let fact = profile
            .fact_by_index(*fact_index)
            .expect("eligible index exists")
            .clone();
        let vocab_index = indices
            .entry(fact.code.vocabulary)
            .or_insert_with(|| ConceptEmbeddingIndex::build(ontology, embedder, fact.code.vocabulary));
        let fact_plan = PerturbationPlan {
            seed: plan.seed.wrapping_add(attempt as u64 + 1),
            ..plan.clone()
        };
        match select_perturbation_with_index(ontology, vocab_index, embedder, &fact.code, &fact_plan)
        {
            Ok(record) => {
                let display = ontology.display_name(&record.replacement)?.to_string();
                for section in [
                    &mut perturbed.diagnoses,
                    &mut perturbed.medications,
                    &mut perturbed.procedures,
                ] {
                    if let Some(slot) = section.iter_mut().find(|f| f.index == *fact_index) {
                        slot.code = record.replacement.clone();
                        slot.display = display.clone();
                    }
                }
                records.push(ProfilePerturbation {
                    profile_id: profile.id.clone(),
                    index: *fact_index,
                    record,
                });
            }
            Err(PerturbError::NoReplacement { .. }) => continue,
            Err(other) => return Err(other),
        }
    }
    if records.len() < target {
        return Err(PerturbError::TargetUnreachable {
            achieved: records.len(),
            target,
        });
    }
    records.sort_by_key(|r| r.index);
    Ok((perturbed, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{ConceptNode, Ontology, Vocabulary};
    use crate::ports::HashEmbedder;
    use crate::profilegen::{FactIndex, ProfileFact};

    fn dx(id: &str) -> ConceptCode {
        ConceptCode::new(Vocabulary::Diagnosis, id)
    }

    fn node(id: &str, name: &str, parents: &[&str]) -> ConceptNode {
        ConceptNode {
            code: dx(id),
            display_name: name.to_string(),
            parents: parents.iter().map(|p| dx(p)).collect(),
        }
    }

    #[test]
    fn only_descendants_available_yields_no_replacement() {
        let ontology = Ontology::from_nodes(vec![
            node("h", "hypertension", &[]),
            node("h1", "essential hypertension", &["h"]),
            node("h2", "secondary hypertension", &["h"]),
        ])
        .unwrap();
        let plan = PerturbationPlan {
            relaxation_policy: vec![],
            ..PerturbationPlan::new(0.5, 1)
        };
        let err = select_perturbation(&ontology, &HashEmbedder::default(), &dx("h"), &plan)
            .unwrap_err();
        assert!(matches!(err, PerturbError::NoReplacement { .. }));
    }

    #[test]
    fn sibling_is_chosen_when_distance_allows() {
        // prehypertension sits two undirected steps from hypertension via
        // their shared parent and is not an ancestor or descendant.
        let ontology = Ontology::from_nodes(vec![
            node("root", "vascular disorder", &[]),
            node("h", "hypertension", &["root"]),
            node("pre", "prehypertension", &["root"]),
            node("h1", "essential hypertension", &["h"]),
        ])
        .unwrap();
        let plan = PerturbationPlan {
            min_distance: 2,
            relaxation_policy: vec![],
            ..PerturbationPlan::new(0.5, 42)
        };
        let record =
            select_perturbation(&ontology, &HashEmbedder::default(), &dx("h"), &plan).unwrap();
        assert_eq!(record.replacement, dx("pre"));
        assert_eq!(record.distance, Some(2));
        assert_eq!(record.relaxation_level, 0);
    }

    #[test]
    fn relaxation_lowers_the_distance_floor() {
        // With the default min_distance of 3 the sibling (distance 2) is
        // rejected until a LowerMinDistance step fires.
        let ontology = Ontology::from_nodes(vec![
            node("root", "vascular disorder", &[]),
            node("h", "hypertension", &["root"]),
            node("pre", "prehypertension", &["root"]),
        ])
        .unwrap();
        let plan = PerturbationPlan::new(0.5, 7);
        assert_eq!(plan.min_distance, 3);
        let record =
            select_perturbation(&ontology, &HashEmbedder::default(), &dx("h"), &plan).unwrap();
        assert_eq!(record.replacement, dx("pre"));
        // Level 1 is the pool expansion; level 2 lowers the floor to 2.
        assert_eq!(record.relaxation_level, 2);
        assert_eq!(plan.effective_at(2), (40, 2));
    }

    fn chain_ontology(n: usize) -> Ontology {
        // Several disconnected mini-trees so distances vary.
        let mut nodes = Vec::new();
        for family in 0..(n / 4) {
            let root = format!("f{family}");
            nodes.push(node(&root, &format!("family {family} disorder"), &[]));
            for child in 0..3 {
                let id = format!("f{family}c{child}");
                nodes.push(node(
                    &id,
                    &format!("family {family} condition {child}"),
                    &[&root],
                ));
            }
        }
        Ontology::from_nodes(nodes).unwrap()
    }

    #[test]
    fn selection_matches_exhaustive_filter_oracle() {
        let ontology = chain_ontology(40);
        let embedder = HashEmbedder::default();
        let plan = PerturbationPlan {
            min_distance: 3,
            ..PerturbationPlan::new(0.5, 99)
        };
        let target = dx("f0c1");
        let record = select_perturbation(&ontology, &embedder, &target, &plan).unwrap();

        // Oracle: recompute the ranked pool, replay the same shuffle, and
        // filter by brute force.
        let query = embedder.embed(ontology.display_name(&target).unwrap());
        let index = ConceptEmbeddingIndex::build(&ontology, &embedder, Vocabulary::Diagnosis);
        let (pool_size, min_distance) = plan.effective_at(record.relaxation_level);
        let ranked = index.nearest(&query, &target, pool_size);
        let mut order: Vec<usize> = (0..ranked.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        order.shuffle(&mut rng);
        let oracle = order
            .into_iter()
            .map(|i| &ranked[i])
            .find(|c| {
                !ontology.is_ancestor_or_descendant(&target, c).unwrap()
                    && ontology
                        .hierarchical_distance(&target, c)
                        .unwrap()
                        .map_or(true, |d| d >= min_distance)
            })
            .unwrap();
        assert_eq!(&record.replacement, oracle);
        // Filter properties hold.
        assert_ne!(record.replacement, target);
        assert!(!ontology
            .is_ancestor_or_descendant(&target, &record.replacement)
            .unwrap());
    }

    fn profile_with_diagnoses(ids: &[&str], ontology: &Ontology) -> MedicalProfile {
        MedicalProfile {
            id: "p-test".to_string(),
            outcome: ConceptCode::new(Vocabulary::Outcome, "resp"),
            demographics: vec![ProfileFact {
                index: FactIndex {
                    section: 1,
                    position: 1,
                },
                code: dx("unused-demo"),
                display: "Age: 34".to_string(),
            }],
            diagnoses: ids
                .iter()
                .enumerate()
                .map(|(i, id)| ProfileFact {
                    index: FactIndex {
                        section: 2,
                        position: i as u32 + 1,
                    },
                    code: dx(id),
                    display: ontology.display_name(&dx(id)).unwrap().to_string(),
                })
                .collect(),
            medications: vec![],
            procedures: vec![],
            predicted_response: 0.5,
            provenance: vec![],
        }
    }

    #[test]
    fn perturb_profile_hits_the_exact_count_and_spares_demographics() {
        let ontology = chain_ontology(40);
        let profile = profile_with_diagnoses(
            &["f0c0", "f1c0", "f2c0", "f3c0", "f4c0", "f5c0", "f6c0", "f7c0", "f8c0", "f9c0"],
            &ontology,
        );
        let plan = PerturbationPlan {
            target_fraction: 0.1,
            min_distance: 2,
            ..PerturbationPlan::new(0.1, 5)
        };
        let (perturbed, records) =
            perturb_profile(&profile, &ontology, &HashEmbedder::default(), &plan).unwrap();
        assert_eq!(records.len(), 1); // ceil(0.1 · 10)
        assert_eq!(perturbed.demographics, profile.demographics);
        for record in &records {
            let fact = perturbed.fact_by_index(record.index).unwrap();
            assert_eq!(fact.code, record.record.replacement);
            assert_ne!(record.record.replacement, record.record.original);
        }
    }

    #[test]
    fn perturb_profile_is_deterministic() {
        let ontology = chain_ontology(40);
        let profile = profile_with_diagnoses(&["f0c0", "f1c0", "f2c0", "f3c0"], &ontology);
        let plan = PerturbationPlan {
            target_fraction: 0.5,
            min_distance: 2,
            ..PerturbationPlan::new(0.5, 11)
        };
        let embedder = HashEmbedder::default();
        let (a, ra) = perturb_profile(&profile, &ontology, &embedder, &plan).unwrap();
        let (b, rb) = perturb_profile(&profile, &ontology, &embedder, &plan).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(ra, rb);
    }

    #[test]
    fn no_replacement_anywhere_fails_the_target() {
        // A single isolated family: every alternative to f0c0 is its
        // sibling at distance 2, below the floor of 3, and no relaxation
        // is allowed.
        let ontology = chain_ontology(4);
        let profile = profile_with_diagnoses(&["f0c0"], &ontology);
        let plan = PerturbationPlan {
            target_fraction: 1.0,
            min_distance: 3,
            relaxation_policy: vec![],
            ..PerturbationPlan::new(1.0, 3)
        };
        let err = perturb_profile(&profile, &ontology, &HashEmbedder::default(), &plan)
            .unwrap_err();
        assert!(matches!(err, PerturbError::TargetUnreachable { .. }));
    }
}
