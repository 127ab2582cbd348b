//! Patient-level cohort ingestion and the statistical queries behind
//! profile generation: conditional response probabilities, risk ratios,
//! predictor ranking, and demographic distributions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::ontology::{ConceptCode, Ontology, OntologyError, Vocabulary};

/// Joint-support floor below which a conditional cell is treated as
/// undefined: risk ratios on tiny cells are noise, and the generation
/// gates must not act on noise.
pub const DEFAULT_MIN_JOINT_SUPPORT: u32 = 5;

/// Reserved demographic root ids. Gender and age-bin value concepts must
/// descend from these so the toolkit can tell the two kinds apart.
pub const GENDER_ROOT_ID: &str = "gender";
pub const AGE_BIN_ROOT_ID: &str = "age_bin";

/// One cohort participant: their concept set plus per-drug response flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub concepts: BTreeSet<ConceptCode>,
    pub outcomes: BTreeMap<ConceptCode, bool>,
}

#[derive(Debug, thiserror::Error)]
pub enum CohortError {
    #[error("row {row}: concept {id:?} does not resolve: {source}")]
    UnresolvedConcept {
        row: usize,
        id: String,
        source: OntologyError,
    },
    #[error("row {row}: duplicate patient id {id:?}")]
    DuplicatePatient { row: usize, id: String },
    #[error("row {row}: patient {id:?} has no concepts")]
    NoConcepts { row: usize, id: String },
    #[error("row {row}: outcome key {code} is not an OUTCOME concept")]
    NonOutcomeKey { row: usize, code: ConceptCode },
    #[error("row {row}: malformed record: {message}")]
    BadRecord { row: usize, message: String },
    #[error("cohort file contains no records")]
    EmptyCohort,
    #[error("patient {id:?} carries {found} {kind:?} concepts (expected exactly one)")]
    MissingDemographic {
        id: String,
        kind: DemographicKind,
        found: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
struct RawPatient {
    patient_id: String,
    concepts: Vec<String>,
    #[serde(default)]
    outcomes: BTreeMap<String, bool>,
}

/// Reads the line-delimited patient-record file and derives [`CohortStats`].
///
/// Every concept id must resolve in the ontology (bare ids are accepted
/// when unambiguous). Counts in the returned stats equal brute-force
/// tallies over the returned records.
pub fn ingest_cohort<R: Read>(
    reader: R,
    ontology: &Ontology,
) -> Result<(Vec<PatientRecord>, CohortStats), CohortError> {
    let buf = BufReader::new(reader);
    let mut records = Vec::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    for (i, line) in buf.lines().enumerate() {
        let row = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPatient =
            serde_json::from_str(&line).map_err(|e| CohortError::BadRecord {
                row,
                message: e.to_string(),
            })?;
        if !seen_ids.insert(raw.patient_id.clone()) {
            return Err(CohortError::DuplicatePatient {
                row,
                id: raw.patient_id,
            });
        }
        if raw.concepts.is_empty() {
            return Err(CohortError::NoConcepts {
                row,
                id: raw.patient_id,
            });
        }
        let mut concepts = BTreeSet::new();
        for id in &raw.concepts {
            let code = ontology
                .resolve_id(id)
                .map_err(|source| CohortError::UnresolvedConcept {
                    row,
                    id: id.clone(),
                    source,
                })?;
            concepts.insert(code);
        }
        let mut outcomes = BTreeMap::new();
        for (key, responded) in &raw.outcomes {
            let code = ontology
                .resolve_id(key)
                .map_err(|source| CohortError::UnresolvedConcept {
                    row,
                    id: key.clone(),
                    source,
                })?;
            if code.vocabulary != Vocabulary::Outcome {
                return Err(CohortError::NonOutcomeKey { row, code });
            }
            outcomes.insert(code, *responded);
        }
        records.push(PatientRecord {
            patient_id: raw.patient_id,
            concepts,
            outcomes,
        });
    }
    if records.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let stats = CohortStats::from_records(&records);
    Ok((records, stats))
}

/// Convenience wrapper over [`ingest_cohort`] for a file path.
pub fn load_cohort(
    path: impl AsRef<Path>,
    ontology: &Ontology,
) -> Result<(Vec<PatientRecord>, CohortStats), CohortError> {
    let file = std::fs::File::open(path)?;
    ingest_cohort(file, ontology)
}

/// Derived cohort counts. Immutable after ingest apart from the memoized
/// query caches, which sit behind a mutex so readers on multiple threads
/// stay consistent.
#[derive(Debug)]
pub struct CohortStats {
    n_total: usize,
    catalog: Vec<ConceptCode>,
    index_of: HashMap<ConceptCode, u32>,
    postings: Vec<Vec<u32>>,
    outcome_flags: HashMap<u32, HashMap<u32, bool>>,
    pair_cache: Mutex<HashMap<(u32, u32), u32>>,
    response_cache: Mutex<HashMap<(Vec<u32>, u32), (u32, u32)>>,
    min_joint_support: u32,
}

impl CohortStats {
    /// Tallies the cohort into posting lists and outcome flags.
    pub fn from_records(records: &[PatientRecord]) -> Self {
        let mut catalog: Vec<ConceptCode> = Vec::new();
        let mut index_of: HashMap<ConceptCode, u32> = HashMap::new();
        let intern = |code: &ConceptCode,
                          catalog: &mut Vec<ConceptCode>,
                          index_of: &mut HashMap<ConceptCode, u32>| {
            if let Some(&idx) = index_of.get(code) {
                idx
            } else {
                let idx = catalog.len() as u32;
                catalog.push(code.clone());
                index_of.insert(code.clone(), idx);
                idx
            }
        };
        // Intern in sorted order so internal ids do not depend on record order.
        let mut all_codes: BTreeSet<&ConceptCode> = BTreeSet::new();
        for record in records {
            all_codes.extend(record.concepts.iter());
            all_codes.extend(record.outcomes.keys());
        }
        for code in all_codes {
            intern(code, &mut catalog, &mut index_of);
        }
        let mut postings: Vec<Vec<u32>> = vec![Vec::new(); catalog.len()];
        let mut outcome_flags: HashMap<u32, HashMap<u32, bool>> = HashMap::new();
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| records[a].patient_id.cmp(&records[b].patient_id));
        for (patient_idx, &rec_idx) in order.iter().enumerate() {
            let record = &records[rec_idx];
            let pid = patient_idx as u32;
            for code in &record.concepts {
                postings[index_of[code] as usize].push(pid);
            }
            for (code, &responded) in &record.outcomes {
                outcome_flags
                    .entry(index_of[code])
                    .or_default()
                    .insert(pid, responded);
            }
        }
        CohortStats {
            n_total: records.len(),
            catalog,
            index_of,
            postings,
            outcome_flags,
            pair_cache: Mutex::new(HashMap::new()),
            response_cache: Mutex::new(HashMap::new()),
            min_joint_support: DEFAULT_MIN_JOINT_SUPPORT,
        }
    }

    /// Overrides the joint-support floor (default
    /// [`DEFAULT_MIN_JOINT_SUPPORT`]).
    pub fn with_min_joint_support(mut self, floor: u32) -> Self {
        self.min_joint_support = floor;
        self
    }

    pub fn min_joint_support(&self) -> u32 {
        self.min_joint_support
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    /// Number of patients carrying the concept.
    pub fn support(&self, code: &ConceptCode) -> u32 {
        self.index_of
            .get(code)
            .map(|&i| self.postings[i as usize].len() as u32)
            .unwrap_or(0)
    }

    /// Number of patients carrying both concepts; memoized on demand
    /// because the concept space is far too large to materialize.
    pub fn pair_support(&self, a: &ConceptCode, b: &ConceptCode) -> u32 {
        let (Some(&ia), Some(&ib)) = (self.index_of.get(a), self.index_of.get(b)) else {
            return 0;
        };
        let key = (ia.min(ib), ia.max(ib));
        if let Some(&hit) = self.pair_cache.lock().unwrap().get(&key) {
            return hit;
        }
        let count = intersect_len(&self.postings[ia as usize], &self.postings[ib as usize]);
        self.pair_cache.lock().unwrap().insert(key, count);
        count
    }

    /// Concepts observed in the cohort, in code order.
    pub fn concepts(&self) -> impl Iterator<Item = &ConceptCode> {
        self.catalog.iter()
    }

    /// Clinical feature codes (diagnoses, medications, procedures) observed
    /// in the cohort; demographics and outcomes are never features.
    pub fn feature_codes(&self) -> Vec<ConceptCode> {
        let mut features: Vec<ConceptCode> = self
            .catalog
            .iter()
            .filter(|c| {
                matches!(
                    c.vocabulary,
                    Vocabulary::Diagnosis | Vocabulary::Medication | Vocabulary::Procedure
                )
            })
            .cloned()
            .collect();
        features.sort();
        features
    }

    /// `(trials, responders)` among patients that carry every concept in
    /// `condition` and have a recorded outcome for `outcome`. The empty
    /// condition gives the whole-cohort base counts.
    pub fn response_counts(&self, condition: &[ConceptCode], outcome: &ConceptCode) -> (u32, u32) {
        let Some(&outcome_idx) = self.index_of.get(outcome) else {
            return (0, 0);
        };
        let mut cond_idx: Vec<u32> = Vec::with_capacity(condition.len());
        for code in condition {
            match self.index_of.get(code) {
                Some(&i) => cond_idx.push(i),
                None => return (0, 0),
            }
        }
        cond_idx.sort_unstable();
        cond_idx.dedup();
        let key = (cond_idx.clone(), outcome_idx);
        if let Some(&hit) = self.response_cache.lock().unwrap().get(&key) {
            return hit;
        }
        let flags = &self.outcome_flags[&outcome_idx];
        let counts = if cond_idx.is_empty() {
            let trials = flags.len() as u32;
            let responders = flags.values().filter(|&&r| r).count() as u32;
            (trials, responders)
        } else {
            let pool = intersect_all(&cond_idx, &self.postings);
            let mut trials = 0u32;
            let mut responders = 0u32;
            for pid in pool {
                if let Some(&responded) = flags.get(&pid) {
                    trials += 1;
                    if responded {
                        responders += 1;
                    }
                }
            }
            (trials, responders)
        };
        self.response_cache.lock().unwrap().insert(key, counts);
        counts
    }

    /// Raw conditional response probability, `None` when no trials.
    pub fn p_response(&self, condition: &[ConceptCode], outcome: &ConceptCode) -> Option<f64> {
        let (trials, responders) = self.response_counts(condition, outcome);
        (trials > 0).then(|| responders as f64 / trials as f64)
    }

    /// Whole-cohort response rate for the outcome.
    pub fn base_rate(&self, outcome: &ConceptCode) -> Option<f64> {
        self.p_response(&[], outcome)
    }

    /// The pairwise risk ratio `P(response | s ∩ v) / P(response | s)`.
    ///
    /// Probabilities are raw tallies. The result is undefined (`None`)
    /// when `s` has no outcome trials, when the `s ∩ v` cell is below the
    /// joint-support floor, or when the denominator probability is zero.
    pub fn risk_ratio(
        &self,
        s: &ConceptCode,
        v: &ConceptCode,
        outcome: &ConceptCode,
    ) -> Option<f64> {
        let (s_trials, s_resp) = self.response_counts(std::slice::from_ref(s), outcome);
        if s_trials == 0 || s_resp == 0 {
            return None;
        }
        let (sv_trials, sv_resp) =
            self.response_counts(&[s.clone(), v.clone()], outcome);
        if sv_trials < self.min_joint_support {
            return None;
        }
        let p_s = s_resp as f64 / s_trials as f64;
        let p_sv = sv_resp as f64 / sv_trials as f64;
        Some(p_sv / p_s)
    }

    /// Smoothed feature→outcome risk ratio
    /// `P(resp | f) / P(resp | ¬f)` with add-one smoothing on both cells,
    /// used by the relevance ranking and the baseline response predictor.
    pub fn feature_outcome_rr(&self, feature: &ConceptCode, outcome: &ConceptCode) -> f64 {
        let (f_trials, f_resp) = self.response_counts(std::slice::from_ref(feature), outcome);
        let (all_trials, all_resp) = self.response_counts(&[], outcome);
        let rest_trials = all_trials.saturating_sub(f_trials);
        let rest_resp = all_resp.saturating_sub(f_resp);
        let p_with = (f_resp as f64 + 1.0) / (f_trials as f64 + 2.0);
        let p_without = (rest_resp as f64 + 1.0) / (rest_trials as f64 + 2.0);
        p_with / p_without
    }

    /// Ranks clinical features by `|ln RR(feature → outcome)|`, descending,
    /// ties broken by code ascending. Features whose outcome cell is below
    /// the joint-support floor are excluded. Returns at most `k` codes; a
    /// longer `k` extends the list without reordering the prefix.
    pub fn rank_top_k_predictors(&self, outcome: &ConceptCode, k: usize) -> Vec<ConceptCode> {
        let mut scored: Vec<(f64, &ConceptCode)> = Vec::new();
        for code in &self.catalog {
            if !matches!(
                code.vocabulary,
                Vocabulary::Diagnosis | Vocabulary::Medication | Vocabulary::Procedure
            ) {
                continue;
            }
            let (trials, _) = self.response_counts(std::slice::from_ref(code), outcome);
            if trials < self.min_joint_support {
                continue;
            }
            let score = self.feature_outcome_rr(code, outcome).ln().abs();
            scored.push((score, code));
        }
        scored.sort_by(|(sa, ca), (sb, cb)| {
            sb.partial_cmp(sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| ca.cmp(cb))
        });
        scored
            .into_iter()
            .take(k)
            .map(|(_, code)| code.clone())
            .collect()
    }
}

fn intersect_len(a: &[u32], b: &[u32]) -> u32 {
    let mut i = 0;
    let mut j = 0;
    let mut count = 0;
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
        }
    }
    count
}

fn intersect_all(cond_idx: &[u32], postings: &[Vec<u32>]) -> Vec<u32> {
    let mut lists: Vec<&Vec<u32>> = cond_idx.iter().map(|&i| &postings[i as usize]).collect();
    lists.sort_by_key(|l| l.len());
    let mut current: Vec<u32> = lists[0].clone();
    for list in &lists[1..] {
        let mut next = Vec::with_capacity(current.len().min(list.len()));
        let (mut i, mut j) = (0, 0);
        while i < current.len() && j < list.len() {
            match current[i].cmp(&list[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    next.push(current[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        current = next;
        if current.is_empty() {
            break;
        }
    }
    current
}

/// Which demographic axis a distribution describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DemographicKind {
    Gender,
    AgeBin,
}

impl DemographicKind {
    fn root_id(&self) -> &'static str {
        match self {
            DemographicKind::Gender => GENDER_ROOT_ID,
            DemographicKind::AgeBin => AGE_BIN_ROOT_ID,
        }
    }
}

/// Classifies a demographic value concept by walking up to the reserved
/// `gender` / `age_bin` roots. Returns `None` for non-demographic codes
/// and for the roots themselves.
pub fn demographic_kind(
    ontology: &Ontology,
    code: &ConceptCode,
) -> Result<Option<DemographicKind>, OntologyError> {
    if code.vocabulary != Vocabulary::Demographic {
        return Ok(None);
    }
    let ancestors = ontology.ancestors(code)?;
    for kind in [DemographicKind::Gender, DemographicKind::AgeBin] {
        let root = ConceptCode::new(Vocabulary::Demographic, kind.root_id());
        if ancestors.contains(&root) {
            return Ok(Some(kind));
        }
    }
    Ok(None)
}

/// A categorical distribution over demographic value concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicDistribution {
    pub kind: DemographicKind,
    /// `(concept, probability)` pairs; probabilities sum to 1.
    pub categories: Vec<(ConceptCode, f64)>,
}

impl DemographicDistribution {
    /// Weighted draw. Categories are scanned in stored (code) order so the
    /// draw is deterministic given the RNG stream.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> &ConceptCode {
        let roll: f64 = rng.gen::<f64>();
        let mut acc = 0.0;
        for (code, p) in &self.categories {
            acc += p;
            if roll < acc {
                return code;
            }
        }
        &self
            .categories
            .last()
            .expect("distribution has at least one category")
            .0
    }
}

/// Empirical distribution of one demographic kind over the cohort.
///
/// Every record must carry exactly one concept of the requested kind.
pub fn demographic_distribution(
    records: &[PatientRecord],
    kind: DemographicKind,
    ontology: &Ontology,
) -> Result<DemographicDistribution, CohortError> {
    let mut counts: BTreeMap<ConceptCode, u64> = BTreeMap::new();
    for record in records {
        let mut found: Vec<&ConceptCode> = Vec::new();
        for code in &record.concepts {
            if let Ok(Some(k)) = demographic_kind(ontology, code) {
                if k == kind {
                    found.push(code);
                }
            }
        }
        if found.len() != 1 {
            return Err(CohortError::MissingDemographic {
                id: record.patient_id.clone(),
                kind,
                found: found.len(),
            });
        }
        *counts.entry(found[0].clone()).or_insert(0) += 1;
    }
    let total = records.len() as f64;
    let categories = counts
        .into_iter()
        .map(|(code, n)| (code, n as f64 / total))
        .collect();
    Ok(DemographicDistribution { kind, categories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{ConceptNode, Ontology};

    fn test_ontology() -> Ontology {
        let mut nodes = Vec::new();
        let mut push = |vocab: Vocabulary, id: &str, name: &str, parents: Vec<ConceptCode>| {
            nodes.push(ConceptNode {
                code: ConceptCode::new(vocab, id),
                display_name: name.to_string(),
                parents: parents.into_iter().collect(),
            });
        };
        push(Vocabulary::Demographic, "gender", "Gender", vec![]);
        push(Vocabulary::Demographic, "age_bin", "Age bin", vec![]);
        push(
            Vocabulary::Demographic,
            "male",
            "Male",
            vec![ConceptCode::new(Vocabulary::Demographic, "gender")],
        );
        push(
            Vocabulary::Demographic,
            "female",
            "Female",
            vec![ConceptCode::new(Vocabulary::Demographic, "gender")],
        );
        push(
            Vocabulary::Demographic,
            "age_30_39",
            "Age 30-39",
            vec![ConceptCode::new(Vocabulary::Demographic, "age_bin")],
        );
        for id in ["s", "v", "f", "g"] {
            push(Vocabulary::Diagnosis, id, &format!("diagnosis {id}"), vec![]);
        }
        push(Vocabulary::Outcome, "resp", "drug response", vec![]);
        Ontology::from_nodes(nodes).unwrap()
    }

    fn dx(id: &str) -> ConceptCode {
        ConceptCode::new(Vocabulary::Diagnosis, id)
    }

    fn outcome() -> ConceptCode {
        ConceptCode::new(Vocabulary::Outcome, "resp")
    }

    /// 10 patients with {s}, of which 4 respond; 10 with {s,v}, of which
    /// 8 respond.
    fn rr_fixture_lines() -> String {
        let mut lines = String::new();
        for i in 0..10 {
            let responded = i < 4;
            lines.push_str(&format!(
                "{{\"patient_id\":\"s{i}\",\"concepts\":[\"DIAGNOSIS:s\"],\"outcomes\":{{\"OUTCOME:resp\":{responded}}}}}\n"
            ));
        }
        for i in 0..10 {
            let responded = i < 8;
            lines.push_str(&format!(
                "{{\"patient_id\":\"sv{i}\",\"concepts\":[\"DIAGNOSIS:s\",\"DIAGNOSIS:v\"],\"outcomes\":{{\"OUTCOME:resp\":{responded}}}}}\n"
            ));
        }
        lines
    }

    #[test]
    fn support_counts_shared_concepts() {
        let ontology = test_ontology();
        let lines = "{\"patient_id\":\"a\",\"concepts\":[\"DIAGNOSIS:s\"],\"outcomes\":{}}\n\
                     {\"patient_id\":\"b\",\"concepts\":[\"DIAGNOSIS:s\"],\"outcomes\":{}}\n";
        let (_, stats) = ingest_cohort(lines.as_bytes(), &ontology).unwrap();
        assert_eq!(stats.support(&dx("s")), 2);
        assert_eq!(stats.support(&dx("v")), 0);
    }

    #[test]
    fn empty_cohort_is_rejected() {
        let ontology = test_ontology();
        let err = ingest_cohort("".as_bytes(), &ontology).unwrap_err();
        assert!(matches!(err, CohortError::EmptyCohort));
    }

    #[test]
    fn unresolved_concept_reports_row() {
        let ontology = test_ontology();
        let lines = "{\"patient_id\":\"a\",\"concepts\":[\"DIAGNOSIS:s\"],\"outcomes\":{}}\n\
                     {\"patient_id\":\"b\",\"concepts\":[\"DIAGNOSIS:nope\"],\"outcomes\":{}}\n";
        let err = ingest_cohort(lines.as_bytes(), &ontology).unwrap_err();
        match err {
            CohortError::UnresolvedConcept { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_patient_is_rejected() {
        let ontology = test_ontology();
        let lines = "{\"patient_id\":\"a\",\"concepts\":[\"DIAGNOSIS:s\"],\"outcomes\":{}}\n\
                     {\"patient_id\":\"a\",\"concepts\":[\"DIAGNOSIS:v\"],\"outcomes\":{}}\n";
        let err = ingest_cohort(lines.as_bytes(), &ontology).unwrap_err();
        assert!(matches!(err, CohortError::DuplicatePatient { .. }));
    }

    #[test]
    fn risk_ratio_matches_hand_tally() {
        let ontology = test_ontology();
        let (_, stats) = ingest_cohort(rr_fixture_lines().as_bytes(), &ontology).unwrap();
        // P(resp | s) over all 20 patients with s: (4 + 8) / 20 = 0.6
        // P(resp | s ∩ v): 8 / 10 = 0.8
        let rr = stats.risk_ratio(&dx("s"), &dx("v"), &outcome()).unwrap();
        assert!((rr - 0.8 / 0.6).abs() < 1e-12);
        // Restricting the denominator population: v-only patients respond
        // at 0.8, v∩s at 0.8 → RR(v, s) = 1.
        let rr_vs = stats.risk_ratio(&dx("v"), &dx("s"), &outcome()).unwrap();
        assert!((rr_vs - 1.0).abs() < 1e-12);
    }

    #[test]
    fn risk_ratio_two_to_one_on_hand_tallied_fixture() {
        // Hand tally: 10 s-only patients, none respond; 10 patients with
        // {s, v}, 8 respond. So P(resp|s) = 8/20 = 0.4 and
        // P(resp|s∩v) = 8/10 = 0.8, giving RR = 2.0.
        let ontology = test_ontology();
        let mut lines = String::new();
        for i in 0..10 {
            lines.push_str(&format!(
                "{{\"patient_id\":\"a{i}\",\"concepts\":[\"DIAGNOSIS:s\"],\"outcomes\":{{\"OUTCOME:resp\":false}}}}\n"
            ));
        }
        for i in 0..10 {
            let responded = i < 8;
            lines.push_str(&format!(
                "{{\"patient_id\":\"b{i}\",\"concepts\":[\"DIAGNOSIS:s\",\"DIAGNOSIS:v\"],\"outcomes\":{{\"OUTCOME:resp\":{responded}}}}}\n"
            ));
        }
        let (_, stats) = ingest_cohort(lines.as_bytes(), &ontology).unwrap();
        let rr = stats.risk_ratio(&dx("s"), &dx("v"), &outcome()).unwrap();
        assert!((rr - 2.0).abs() < 1e-12);
        // Identity: RR · P(resp|s) = P(resp|s∩v).
        let p_s = stats.p_response(&[dx("s")], &outcome()).unwrap();
        let p_sv = stats.p_response(&[dx("s"), dx("v")], &outcome()).unwrap();
        assert!((rr * p_s - p_sv).abs() < 1e-12);
    }

    #[test]
    fn tiny_joint_cell_is_undefined() {
        let ontology = test_ontology();
        let mut lines = String::new();
        for i in 0..10 {
            lines.push_str(&format!(
                "{{\"patient_id\":\"p{i}\",\"concepts\":[\"DIAGNOSIS:s\"],\"outcomes\":{{\"OUTCOME:resp\":true}}}}\n"
            ));
        }
        // Only 2 joint patients: below the floor of 5.
        lines.push_str(
            "{\"patient_id\":\"j1\",\"concepts\":[\"DIAGNOSIS:s\",\"DIAGNOSIS:v\"],\"outcomes\":{\"OUTCOME:resp\":true}}\n",
        );
        lines.push_str(
            "{\"patient_id\":\"j2\",\"concepts\":[\"DIAGNOSIS:s\",\"DIAGNOSIS:v\"],\"outcomes\":{\"OUTCOME:resp\":true}}\n",
        );
        let (_, stats) = ingest_cohort(lines.as_bytes(), &ontology).unwrap();
        assert_eq!(stats.risk_ratio(&dx("s"), &dx("v"), &outcome()), None);
        // Zero support for s' → undefined, not a crash.
        assert_eq!(stats.risk_ratio(&dx("g"), &dx("v"), &outcome()), None);
    }

    #[test]
    fn ranking_prefers_the_informative_feature_and_breaks_ties_by_code() {
        let ontology = test_ontology();
        let mut lines = String::new();
        // f strongly raises the response rate; g is carried by everyone.
        for i in 0..20 {
            let has_f = i < 10;
            let responded = if has_f { i % 10 < 9 } else { i % 10 < 2 };
            let concepts = if has_f {
                "[\"DIAGNOSIS:f\",\"DIAGNOSIS:g\"]"
            } else {
                "[\"DIAGNOSIS:g\"]"
            };
            lines.push_str(&format!(
                "{{\"patient_id\":\"p{i}\",\"concepts\":{concepts},\"outcomes\":{{\"OUTCOME:resp\":{responded}}}}}\n"
            ));
        }
        let (_, stats) = ingest_cohort(lines.as_bytes(), &ontology).unwrap();
        let top = stats.rank_top_k_predictors(&outcome(), 1);
        assert_eq!(top, vec![dx("f")]);
        // Prefix property.
        let top2 = stats.rank_top_k_predictors(&outcome(), 2);
        assert_eq!(top2[0], dx("f"));
    }

    #[test]
    fn stats_are_order_independent() {
        let ontology = test_ontology();
        let fixture = rr_fixture_lines();
        let mut lines: Vec<&str> = fixture.lines().collect();
        let (_, stats_a) = ingest_cohort(fixture.as_bytes(), &ontology).unwrap();
        lines.reverse();
        let reversed = lines.join("\n");
        let (_, stats_b) = ingest_cohort(reversed.as_bytes(), &ontology).unwrap();
        assert_eq!(stats_a.n_total(), stats_b.n_total());
        for code in [dx("s"), dx("v")] {
            assert_eq!(stats_a.support(&code), stats_b.support(&code));
        }
        assert_eq!(
            stats_a.risk_ratio(&dx("s"), &dx("v"), &outcome()),
            stats_b.risk_ratio(&dx("s"), &dx("v"), &outcome())
        );
        assert_eq!(
            stats_a.response_counts(&[dx("s")], &outcome()),
            stats_b.response_counts(&[dx("s")], &outcome())
        );
    }

    #[test]
    fn demographic_distribution_normalizes_counts() {
        let ontology = test_ontology();
        let mut lines = String::new();
        for i in 0..4 {
            let gender = if i < 3 { "male" } else { "female" };
            lines.push_str(&format!(
                "{{\"patient_id\":\"p{i}\",\"concepts\":[\"DEMOGRAPHIC:{gender}\",\"DEMOGRAPHIC:age_30_39\",\"DIAGNOSIS:s\"],\"outcomes\":{{}}}}\n"
            ));
        }
        let (records, _) = ingest_cohort(lines.as_bytes(), &ontology).unwrap();
        let dist = demographic_distribution(&records, DemographicKind::Gender, &ontology).unwrap();
        let by_id: BTreeMap<&str, f64> = dist
            .categories
            .iter()
            .map(|(c, p)| (c.id.as_str(), *p))
            .collect();
        assert!((by_id["male"] - 0.75).abs() < 1e-12);
        assert!((by_id["female"] - 0.25).abs() < 1e-12);
        let total: f64 = dist.categories.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-9);

        let age = demographic_distribution(&records, DemographicKind::AgeBin, &ontology).unwrap();
        assert_eq!(age.categories.len(), 1);
        assert!((age.categories[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_demographic_names_the_patient() {
        let ontology = test_ontology();
        let lines = "{\"patient_id\":\"odd\",\"concepts\":[\"DIAGNOSIS:s\"],\"outcomes\":{}}\n";
        let (records, _) = ingest_cohort(lines.as_bytes(), &ontology).unwrap();
        let err =
            demographic_distribution(&records, DemographicKind::Gender, &ontology).unwrap_err();
        match err {
            CohortError::MissingDemographic { id, .. } => assert_eq!(id, "odd"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
