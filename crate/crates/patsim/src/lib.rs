//! Risk-aware patient simulation and evaluation toolkit.
//!
//! The crate generates synthetic patient profiles from cohort statistics,
//! drives profile-conditioned simulator conversations against a decision
//! aid under test, injects controlled clinical errors, and measures system
//! risk through retrieval, linguistic, behavioral, and inter-annotator
//! agreement metrics. Everything runs offline against deterministic stub
//! ports; live model backends plug in through the traits in [`ports`].
//!
//! The guide in `book/` walks through each subsystem with runnable
//! examples; its snippets double as doctests for this crate.

pub mod cohort;
pub mod ontology;
pub mod persona;
pub mod perturbation;
pub mod ports;
pub mod profilegen;
pub mod synthetic;
pub mod text;

pub use cohort::{CohortStats, DemographicDistribution, DemographicKind, PatientRecord};
pub use ontology::{ConceptCode, Lexicon, Ontology, Vocabulary};
pub use persona::{BehavioralProfile, LinguisticProfile, PersonaPromptSpec};
pub use perturbation::{PerturbationPlan, PerturbationRecord};
pub use profilegen::{GenConfig, MedicalProfile, SigmaBandPlan};
