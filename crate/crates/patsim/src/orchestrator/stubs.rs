//! Deterministic stub backends: a scripted six-stage decision aid and a
//! rule-based patient simulator. They exist so the entire pipeline — and
//! every downstream metric — runs offline with reproducible bytes.
//!
//! The stub aid's question wording is toolkit-authored; run manifests
//! record the mode so stub conversations are never mistaken for live ones.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cohort::CohortStats;
use crate::ontology::{ConceptCode, Lexicon};
use crate::persona::{BehavioralProfileName, LinguisticProfileName, PersonaPromptSpec};
use crate::ports::{ChatMessage, ChatPort, PortError};
use crate::profilegen::{MedicalProfile, ProfileFact, Section};
use crate::text::normalize_term;

use super::schema::SimulatorTurn;
use super::{IntakeStage, Recommendation, SutPort, TurnRecord};

/// Drug → associated feature set, the stub aid's recommendation basis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugFeatureTable {
    pub entries: BTreeMap<ConceptCode, BTreeSet<ConceptCode>>,
}

impl DrugFeatureTable {
    pub fn new(entries: BTreeMap<ConceptCode, BTreeSet<ConceptCode>>) -> Self {
        DrugFeatureTable { entries }
    }

    /// Builds the table from cohort statistics: each drug's features are
    /// the top-`k` predictors of its response outcome.
    pub fn from_stats(
        stats: &CohortStats,
        drugs: &[(ConceptCode, ConceptCode)],
        k: usize,
    ) -> Self {
        let entries = drugs
            .iter()
            .map(|(drug, outcome)| {
                let features: BTreeSet<ConceptCode> =
                    stats.rank_top_k_predictors(outcome, k).into_iter().collect();
                (drug.clone(), features)
            })
            .collect();
        DrugFeatureTable { entries }
    }

    /// Majority concept overlap; ties break by drug code ascending. No
    /// overlap at all means no recommendation.
    pub fn recommend(&self, extracted: &BTreeSet<ConceptCode>) -> Recommendation {
        let mut best: Option<(usize, &ConceptCode)> = None;
        for (drug, features) in &self.entries {
            let overlap = features.intersection(extracted).count();
            if overlap == 0 {
                continue;
            }
            best = match best {
                None => Some((overlap, drug)),
                Some((b, d)) if overlap > b || (overlap == b && drug < d) => {
                    Some((overlap, drug))
                }
                keep => keep,
            };
        }
        match best {
            Some((_, drug)) => Recommendation::Drug(drug.clone()),
            None => Recommendation::NoRecommendation,
        }
    }
}

/// Scripted six-stage decision aid: one composite question per stage,
/// lexicon-based concept extraction over the patient's visible responses,
/// majority-overlap recommendation.
pub struct StubDecisionAid {
    lexicon: Lexicon,
    table: DrugFeatureTable,
    cursor: usize,
}

const STAGE_QUESTIONS: [(IntakeStage, &str); 6] = [
    (
        IntakeStage::Rapport,
        "Hello, I'm here to help with your antidepressant options. To start, could you tell me a bit about yourself?",
    ),
    (
        IntakeStage::IllnessHistory,
        "Thank you. What conditions or illnesses have you been diagnosed with over the years?",
    ),
    (
        IntakeStage::AntidepressantHistory,
        "Which antidepressants have you tried in the past, and how did they go?",
    ),
    (
        IntakeStage::CurrentMedications,
        "What medications are you currently taking, including anything over the counter?",
    ),
    (
        IntakeStage::Procedures,
        "Have you had any procedures, therapies, or treatments related to your health?",
    ),
    (
        IntakeStage::Recommendation,
        "Thanks for sharing all of that. Is there anything else I should know before I make a recommendation?",
    ),
];

impl StubDecisionAid {
    pub fn new(lexicon: Lexicon, table: DrugFeatureTable) -> Self {
        StubDecisionAid {
            lexicon,
            table,
            cursor: 0,
        }
    }

    fn extract(&self, history: &[TurnRecord]) -> BTreeSet<ConceptCode> {
        let mut extracted = BTreeSet::new();
        for turn in history {
            if let Some(parsed) = turn.outcome.parsed() {
                for hit in self.lexicon.match_medical_terms(&parsed.response) {
                    extracted.insert(hit.code);
                }
            }
        }
        extracted
    }
}

impl SutPort for StubDecisionAid {
    fn next_question(&mut self, _history: &[TurnRecord]) -> Option<(IntakeStage, String)> {
        let (stage, question) = STAGE_QUESTIONS.get(self.cursor)?;
        self.cursor += 1;
        Some((*stage, question.to_string()))
    }

    fn recommend(&mut self, history: &[TurnRecord]) -> Recommendation {
        self.table.recommend(&self.extract(history))
    }

    fn extracted_concepts(&self) -> Vec<ConceptCode> {
        Vec::new()
    }
}

/// A decision aid wrapper that also reports its extraction after the run.
/// Kept separate so the extraction snapshot is taken against the full
/// history at recommendation time.
pub struct ReportingStubAid {
    inner: StubDecisionAid,
    snapshot: Vec<ConceptCode>,
}

impl ReportingStubAid {
    pub fn new(lexicon: Lexicon, table: DrugFeatureTable) -> Self {
        ReportingStubAid {
            inner: StubDecisionAid::new(lexicon, table),
            snapshot: Vec::new(),
        }
    }
}

impl SutPort for ReportingStubAid {
    fn next_question(&mut self, history: &[TurnRecord]) -> Option<(IntakeStage, String)> {
        self.inner.next_question(history)
    }

    fn recommend(&mut self, history: &[TurnRecord]) -> Recommendation {
        self.snapshot = self.inner.extract(history).into_iter().collect();
        self.inner.recommend(history)
    }

    fn extracted_concepts(&self) -> Vec<ConceptCode> {
        self.snapshot.clone()
    }
}

/// Rule-based patient simulator. It selects the profile facts the current
/// question asks about (stage keywords plus display-name matches), applies
/// a fixed per-profile paraphrase rule, and emits schema-valid turns.
pub struct StubPatientChat {
    profile: MedicalProfile,
    linguistic: LinguisticProfileName,
    behavioral: BehavioralProfileName,
}

impl StubPatientChat {
    pub fn new(spec: &PersonaPromptSpec) -> Self {
        StubPatientChat {
            profile: spec.medical.clone(),
            linguistic: spec.linguistic.name,
            behavioral: spec.behavioral.name,
        }
    }

    fn facts_for_question(&self, question: &str) -> Vec<&ProfileFact> {
        let q = normalize_term(question);
        let mut picked: Vec<&ProfileFact> = Vec::new();
        let mut push_section = |section: Section, picked: &mut Vec<&ProfileFact>| {
            for fact in self.profile.section(section) {
                picked.push(fact);
            }
        };
        if q.contains("about yourself") || q.contains("feeling today") {
            push_section(Section::Demographics, &mut picked);
        }
        if q.contains("conditions") || q.contains("illness") || q.contains("diagnosed") {
            push_section(Section::Diagnoses, &mut picked);
        }
        if q.contains("antidepressants") || q.contains("medications") || q.contains("taking") {
            push_section(Section::Medications, &mut picked);
        }
        if q.contains("procedures") || q.contains("therapies") || q.contains("treatments") {
            push_section(Section::Procedures, &mut picked);
        }
        // Lexicon-share rule: any fact whose display name appears verbatim
        // in the question is always relevant.
        for fact in self.profile.facts() {
            let name = normalize_term(&fact.display);
            if !name.is_empty() && q.contains(&name) && !picked.iter().any(|f| f.index == fact.index)
            {
                picked.push(fact);
            }
        }
        picked.sort_by_key(|f| f.index);
        picked.dedup_by_key(|f| f.index);
        picked
    }

    fn styled_phrase(&self, fact: &ProfileFact) -> String {
        match self.linguistic {
            LinguisticProfileName::ProficientHl => fact.display.clone(),
            _ => fact.display.to_lowercase(),
        }
    }

    /// One sentence embedding a tagged span, written in the linguistic
    /// profile's register. Word length and syllable density rise across
    /// the health-literacy gradient so readability metrics separate the
    /// profiles.
    fn fact_sentence(&self, styled: &str, index: &str) -> String {
        match self.linguistic {
            LinguisticProfileName::LimitedHl => {
                format!("uh, i got <\\s>{styled}</\\s> [{index}]. it was rough.")
            }
            LinguisticProfileName::FunctionalHl => {
                format!("I have <\\s>{styled}</\\s> [{index}] and it has been steady for a while now.")
            }
            LinguisticProfileName::ProficientHl => {
                format!(
                    "Specifically, my documentation indicates <\\s>{styled}</\\s> [{index}], which my physician continues monitoring during quarterly consultations."
                )
            }
            LinguisticProfileName::Depression => {
                format!("had <\\s>{styled}</\\s> [{index}]. it wears me down. so tired.")
            }
            LinguisticProfileName::IllnessAnxiety => {
                format!(
                    "there is <\\s>{styled}</\\s> [{index}]... what if it gets worse and worse, what if they missed something serious?"
                )
            }
        }
    }

    fn small_talk(&self) -> &'static str {
        match self.linguistic {
            LinguisticProfileName::LimitedHl => "um, that is it, i think.",
            LinguisticProfileName::FunctionalHl => "That covers it, I believe.",
            LinguisticProfileName::ProficientHl => {
                "Nothing additional; my documentation is comprehensive."
            }
            LinguisticProfileName::Depression => "nothing else. so tired of this.",
            LinguisticProfileName::IllnessAnxiety => {
                "nothing else... unless there is something serious you are not telling me?"
            }
        }
    }

    fn decorate(&self, core: String) -> String {
        match self.behavioral {
            BehavioralProfileName::StructuredCooperative => core,
            BehavioralProfileName::DistractedUnfocused => format!(
                "{core} oh wait, sorry — my dog would not eat this morning and the neighbor kept calling about the fence, where was i?"
            ),
            BehavioralProfileName::AdversarialCombative => format!(
                "what kind of dumb question is that? this whole system feels useless. {core}"
            ),
            BehavioralProfileName::InquisitiveOpenEnded => {
                format!("{core} also, what else should i be asking you about here?")
            }
            BehavioralProfileName::ReservedMinimalist => core,
        }
    }
}

impl ChatPort for StubPatientChat {
    fn request(&self, _system: &str, messages: &[ChatMessage]) -> Result<String, PortError> {
        let question = messages
            .iter()
            .rev()
            .find(|m| matches!(m.role, crate::ports::ChatRole::User))
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let facts = self.facts_for_question(question);
        let mut relevant = Vec::new();
        let mut styled_entries = Vec::new();
        let mut sentences = Vec::new();
        for fact in &facts {
            let styled = self.styled_phrase(fact);
            relevant.push(format!("[{}] {}", fact.index, fact.display));
            styled_entries.push(format!("[{}] {}", fact.index, styled));
            sentences.push(self.fact_sentence(&styled, &fact.index.to_string()));
        }
        let core = if sentences.is_empty() {
            self.small_talk().to_string()
        } else {
            sentences.join(" ")
        };
        let turn = SimulatorTurn {
            relevant_medical_history: relevant,
            style_transferred_medical_history: styled_entries,
            response: self.decorate(core),
        };
        Ok(turn.canonical_json())
    }
}
