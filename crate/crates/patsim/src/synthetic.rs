//! Deterministic synthetic fixtures: a look-alike concept vocabulary and a
//! cohort with planted feature–outcome and feature–feature associations.
//!
//! Real clinical vocabularies are license-encumbered, so tests, demos, and
//! the bundled fixture files all run on this generator. Everything is a
//! pure function of the seed.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cohort::{PatientRecord, AGE_BIN_ROOT_ID, GENDER_ROOT_ID};
use crate::ontology::{ConceptCode, ConceptNode, Ontology, Vocabulary};

/// Size knobs for the synthetic world.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_diagnoses: usize,
    pub n_medications: usize,
    pub n_procedures: usize,
    pub n_drugs: usize,
    pub n_patients: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_diagnoses: 60,
            n_medications: 24,
            n_procedures: 20,
            n_drugs: 4,
            n_patients: 240,
            seed: 0xC0FFEE,
        }
    }
}

const ADJECTIVES: [&str; 10] = [
    "chronic",
    "acute",
    "recurrent",
    "persistent",
    "episodic",
    "generalized",
    "moderate",
    "severe",
    "mild",
    "refractory",
];

const CONDITIONS: [&str; 12] = [
    "mood disorder",
    "anxiety disorder",
    "sleep disturbance",
    "fatigue syndrome",
    "panic disorder",
    "pain syndrome",
    "stress reaction",
    "appetite disturbance",
    "attention deficit",
    "adjustment disorder",
    "somatic disorder",
    "tension headache",
];

const DRUG_STEMS: [&str; 8] = [
    "fluvo", "sertra", "trazo", "dulo", "amitri", "bupro", "cita", "venla",
];
const DRUG_SUFFIXES: [&str; 6] = ["xetine", "done", "pram", "faxine", "pine", "zone"];

const PROCEDURES: [&str; 10] = [
    "psychiatric diagnostic interview",
    "individual psychotherapy",
    "group psychotherapy session",
    "medication management visit",
    "cognitive behavioral therapy",
    "sleep study assessment",
    "crisis intervention session",
    "family therapy session",
    "electroconvulsive therapy",
    "telehealth counseling visit",
];

fn dx(id: impl Into<String>) -> ConceptCode {
    ConceptCode::new(Vocabulary::Diagnosis, id.into())
}

/// Builds the synthetic vocabulary: demographic roots with gender and
/// age-bin values, a multi-parent diagnosis DAG, medication classes,
/// procedures, and one response-outcome concept per drug.
pub fn synthetic_ontology(spec: &SyntheticSpec) -> Ontology {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut nodes = Vec::new();
    let mut used_names: BTreeSet<String> = BTreeSet::new();

    // Demographics.
    nodes.push(ConceptNode {
        code: ConceptCode::new(Vocabulary::Demographic, GENDER_ROOT_ID),
        display_name: "Gender".to_string(),
        parents: BTreeSet::new(),
    });
    nodes.push(ConceptNode {
        code: ConceptCode::new(Vocabulary::Demographic, AGE_BIN_ROOT_ID),
        display_name: "Age bin".to_string(),
        parents: BTreeSet::new(),
    });
    for (id, name) in [("male", "Male"), ("female", "Female")] {
        nodes.push(ConceptNode {
            code: ConceptCode::new(Vocabulary::Demographic, id),
            display_name: name.to_string(),
            parents: [ConceptCode::new(Vocabulary::Demographic, GENDER_ROOT_ID)]
                .into_iter()
                .collect(),
        });
    }
    for (lo, hi) in [(18, 29), (30, 39), (40, 49), (50, 59), (60, 69), (70, 79)] {
        nodes.push(ConceptNode {
            code: ConceptCode::new(Vocabulary::Demographic, format!("age_{lo}_{hi}")),
            display_name: format!("Age {lo}-{hi}"),
            parents: [ConceptCode::new(Vocabulary::Demographic, AGE_BIN_ROOT_ID)]
                .into_iter()
                .collect(),
        });
    }

    // Diagnoses: a handful of roots, then children with 1–2 parents drawn
    // from earlier nodes, which keeps the graph acyclic.
    let n_roots = (spec.n_diagnoses / 10).clamp(2, 8);
    let mut diagnosis_ids: Vec<String> = Vec::new();
    for i in 0..spec.n_diagnoses {
        let id = format!("d{i:03}");
        let mut name = format!(
            "{} {}",
            ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())],
            CONDITIONS[rng.gen_range(0..CONDITIONS.len())]
        );
        if !used_names.insert(name.clone()) {
            name = format!("{name} type {i}");
            used_names.insert(name.clone());
        }
        let parents: BTreeSet<ConceptCode> = if i < n_roots {
            BTreeSet::new()
        } else {
            let n_parents = if rng.gen_bool(0.2) { 2 } else { 1 };
            (0..n_parents)
                .map(|_| dx(diagnosis_ids[rng.gen_range(0..i)].clone()))
                .collect()
        };
        nodes.push(ConceptNode {
            code: dx(id.clone()),
            display_name: name,
            parents,
        });
        diagnosis_ids.push(id);
    }

    // Medications: class roots plus generated drug names.
    let n_classes = (spec.n_medications / 8).clamp(1, 4);
    for class in 0..n_classes {
        nodes.push(ConceptNode {
            code: ConceptCode::new(Vocabulary::Medication, format!("class{class}")),
            display_name: format!("antidepressant class {class}"),
            parents: BTreeSet::new(),
        });
    }
    for i in 0..spec.n_medications {
        let mut name = format!(
            "{}{}",
            DRUG_STEMS[rng.gen_range(0..DRUG_STEMS.len())],
            DRUG_SUFFIXES[rng.gen_range(0..DRUG_SUFFIXES.len())]
        );
        if !used_names.insert(name.clone()) {
            name = format!("{name} {i}");
            used_names.insert(name.clone());
        }
        let class = i % n_classes;
        nodes.push(ConceptNode {
            code: ConceptCode::new(Vocabulary::Medication, format!("m{i:03}")),
            display_name: name,
            parents: [ConceptCode::new(Vocabulary::Medication, format!("class{class}"))]
                .into_iter()
                .collect(),
        });
    }

    // Procedures: flat list with a single root.
    nodes.push(ConceptNode {
        code: ConceptCode::new(Vocabulary::Procedure, "proc_root"),
        display_name: "clinical procedure".to_string(),
        parents: BTreeSet::new(),
    });
    for i in 0..spec.n_procedures {
        let base = PROCEDURES[i % PROCEDURES.len()];
        let name = if i < PROCEDURES.len() {
            base.to_string()
        } else {
            format!("{base} {}", i / PROCEDURES.len() + 1)
        };
        nodes.push(ConceptNode {
            code: ConceptCode::new(Vocabulary::Procedure, format!("pr{i:03}")),
            display_name: name,
            parents: [ConceptCode::new(Vocabulary::Procedure, "proc_root")]
                .into_iter()
                .collect(),
        });
    }

    // Outcomes: one response concept per evaluated drug.
    for drug in 0..spec.n_drugs {
        nodes.push(ConceptNode {
            code: ConceptCode::new(Vocabulary::Outcome, format!("resp_m{drug:03}")),
            display_name: format!("response to drug m{drug:03}"),
            parents: BTreeSet::new(),
        });
    }

    Ontology::from_nodes(nodes).expect("synthetic vocabulary is a valid DAG")
}

/// Outcome concept for drug `k` of the synthetic world.
pub fn synthetic_outcome(drug: usize) -> ConceptCode {
    ConceptCode::new(Vocabulary::Outcome, format!("resp_m{drug:03}"))
}

/// Generates the cohort. Concepts are drawn from correlated clusters so
/// risk-ratio gates and diversity expansion see real signal, and each
/// drug's response probability depends on a sparse set of planted
/// predictor features.
pub fn synthetic_cohort(ontology: &Ontology, spec: &SyntheticSpec) -> Vec<PatientRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E3779B97F4A7C15));
    let features: Vec<ConceptCode> = ontology
        .nodes()
        .filter(|n| {
            matches!(
                n.code.vocabulary,
                Vocabulary::Diagnosis | Vocabulary::Medication | Vocabulary::Procedure
            )
        })
        .map(|n| n.code.clone())
        .collect();

    // Cluster features into overlapping groups of ~6.
    let mut shuffled = features.clone();
    shuffled.shuffle(&mut rng);
    let clusters: Vec<Vec<ConceptCode>> = shuffled.chunks(6).map(|c| c.to_vec()).collect();

    // Planted predictor weights per drug: a handful of features shift the
    // response log-odds, everything else is neutral.
    let mut weights: Vec<BTreeMap<ConceptCode, f64>> = Vec::new();
    for _ in 0..spec.n_drugs {
        let mut w = BTreeMap::new();
        for code in &features {
            if rng.gen_bool(0.2) {
                w.insert(code.clone(), rng.gen_range(-1.2..1.2));
            }
        }
        weights.push(w);
    }

    let genders = ["male", "female"];
    let age_bins = [
        "age_18_29",
        "age_30_39",
        "age_40_49",
        "age_50_59",
        "age_60_69",
        "age_70_79",
    ];

    let mut records = Vec::with_capacity(spec.n_patients);
    for i in 0..spec.n_patients {
        let mut concepts: BTreeSet<ConceptCode> = BTreeSet::new();
        let gender = genders[if rng.gen_bool(0.55) { 0 } else { 1 }];
        concepts.insert(ConceptCode::new(Vocabulary::Demographic, gender));
        let age = age_bins[rng.gen_range(0..age_bins.len())];
        concepts.insert(ConceptCode::new(Vocabulary::Demographic, age));

        // Two clusters sampled densely, plus sparse background features.
        for _ in 0..2 {
            let cluster = &clusters[rng.gen_range(0..clusters.len())];
            for code in cluster {
                if rng.gen_bool(0.6) {
                    concepts.insert(code.clone());
                }
            }
        }
        for code in &features {
            if rng.gen_bool(0.03) {
                concepts.insert(code.clone());
            }
        }

        let mut outcomes = BTreeMap::new();
        for drug in 0..spec.n_drugs {
            // Most patients have a trial recorded for most drugs.
            if !rng.gen_bool(0.85) {
                continue;
            }
            let mut logit = -0.4f64;
            for (code, w) in &weights[drug] {
                if concepts.contains(code) {
                    logit += w;
                }
            }
            let p = 1.0 / (1.0 + (-logit).exp());
            outcomes.insert(synthetic_outcome(drug), rng.gen_bool(p.clamp(0.02, 0.98)));
        }
        records.push(PatientRecord {
            patient_id: format!("aou{i:05}"),
            concepts,
            outcomes,
        });
    }
    records
}

/// Serializes records to the line-delimited cohort file format.
pub fn cohort_to_jsonl(records: &[PatientRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Serializes the ontology to the documented concept-table CSV.
pub fn ontology_to_csv(ontology: &Ontology) -> String {
    let mut out = String::from("id,vocabulary,display_name,parent_ids\n");
    for node in ontology.nodes() {
        let parents = node
            .parents
            .iter()
            .map(|p| {
                if p.vocabulary == node.code.vocabulary {
                    p.id.clone()
                } else {
                    p.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("|");
        let display = if node.display_name.contains(',') {
            format!("\"{}\"", node.display_name)
        } else {
            node.display_name.clone()
        };
        out.push_str(&format!(
            "{},{},{},{}\n",
            node.code.id, node.code.vocabulary, display, parents
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{demographic_distribution, CohortStats, DemographicKind};
    use crate::ontology::read_ontology;

    #[test]
    fn synthetic_world_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = ontology_to_csv(&synthetic_ontology(&spec));
        let b = ontology_to_csv(&synthetic_ontology(&spec));
        assert_eq!(a, b);
        let ontology = synthetic_ontology(&spec);
        let ca = cohort_to_jsonl(&synthetic_cohort(&ontology, &spec));
        let cb = cohort_to_jsonl(&synthetic_cohort(&ontology, &spec));
        assert_eq!(ca, cb);
    }

    #[test]
    fn serialized_fixtures_round_trip_through_the_loaders() {
        let spec = SyntheticSpec {
            n_diagnoses: 20,
            n_medications: 8,
            n_procedures: 6,
            n_drugs: 2,
            n_patients: 40,
            seed: 7,
        };
        let ontology = synthetic_ontology(&spec);
        let csv = ontology_to_csv(&ontology);
        let reloaded = read_ontology(csv.as_bytes()).unwrap();
        assert_eq!(reloaded.len(), ontology.len());

        let records = synthetic_cohort(&ontology, &spec);
        let jsonl = cohort_to_jsonl(&records);
        let (loaded, stats) =
            crate::cohort::ingest_cohort(jsonl.as_bytes(), &reloaded).unwrap();
        assert_eq!(loaded.len(), records.len());
        assert_eq!(stats.n_total(), records.len());

        // Demographics are complete: the distributions build cleanly.
        let gender = demographic_distribution(&loaded, DemographicKind::Gender, &reloaded).unwrap();
        assert!(!gender.categories.is_empty());
        let age = demographic_distribution(&loaded, DemographicKind::AgeBin, &reloaded).unwrap();
        assert!(!age.categories.is_empty());

        // Stats agree with a brute-force tally for a sample concept.
        let probe = loaded[0].concepts.iter().next().unwrap().clone();
        let brute = loaded
            .iter()
            .filter(|r| r.concepts.contains(&probe))
            .count() as u32;
        assert_eq!(CohortStats::from_records(&loaded).support(&probe), brute);
    }

    #[test]
    fn planted_predictors_are_discoverable() {
        let spec = SyntheticSpec::default();
        let ontology = synthetic_ontology(&spec);
        let records = synthetic_cohort(&ontology, &spec);
        let stats = CohortStats::from_records(&records);
        let top = stats.rank_top_k_predictors(&synthetic_outcome(0), 10);
        assert!(!top.is_empty());
    }
}
