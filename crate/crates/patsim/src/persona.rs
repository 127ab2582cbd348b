//! Linguistic and behavioral persona profiles plus system-prompt assembly.
//!
//! The profile attribute texts ship as versioned data files under
//! `data/`, embedded at build time; wording updates never require code
//! changes. The prompt renderer is a pure function of the spec.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::profilegen::{MedicalProfile, Section};

#[derive(Debug, thiserror::Error)]
pub enum PersonaError {
    #[error("profile data: missing key {0:?}")]
    MissingKey(&'static str),
    #[error("profile data: malformed line {0:?}")]
    MalformedLine(String),
    #[error("unknown linguistic profile {0:?}")]
    UnknownLinguistic(String),
    #[error("unknown behavioral profile {0:?}")]
    UnknownBehavioral(String),
    #[error("medical profile carries duplicate fact index {0}")]
    DuplicateIndex(String),
}

/// The five linguistic profiles: a three-level health-literacy gradient
/// plus two condition-specific communication patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinguisticProfileName {
    LimitedHl,
    FunctionalHl,
    ProficientHl,
    Depression,
    IllnessAnxiety,
}

impl LinguisticProfileName {
    pub const ALL: [LinguisticProfileName; 5] = [
        LinguisticProfileName::LimitedHl,
        LinguisticProfileName::FunctionalHl,
        LinguisticProfileName::ProficientHl,
        LinguisticProfileName::Depression,
        LinguisticProfileName::IllnessAnxiety,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            LinguisticProfileName::LimitedHl => "limited_hl",
            LinguisticProfileName::FunctionalHl => "functional_hl",
            LinguisticProfileName::ProficientHl => "proficient_hl",
            LinguisticProfileName::Depression => "depression",
            LinguisticProfileName::IllnessAnxiety => "illness_anxiety",
        }
    }
}

impl fmt::Display for LinguisticProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for LinguisticProfileName {
    type Err = PersonaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LinguisticProfileName::ALL
            .iter()
            .find(|n| n.id() == s)
            .copied()
            .ok_or_else(|| PersonaError::UnknownLinguistic(s.to_string()))
    }
}

/// Structured attribute set for one linguistic profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinguisticProfile {
    pub name: LinguisticProfileName,
    pub label: String,
    pub style: String,
    pub tone: String,
    pub vocab: String,
    pub structure: String,
    pub patterns: String,
    pub example: String,
}

impl LinguisticProfile {
    /// Loads the bundled data file for `name`.
    pub fn bundled(name: LinguisticProfileName) -> Self {
        let raw = match name {
            LinguisticProfileName::LimitedHl => {
                include_str!("../data/linguistic/limited_hl.profile")
            }
            LinguisticProfileName::FunctionalHl => {
                include_str!("../data/linguistic/functional_hl.profile")
            }
            LinguisticProfileName::ProficientHl => {
                include_str!("../data/linguistic/proficient_hl.profile")
            }
            LinguisticProfileName::Depression => {
                include_str!("../data/linguistic/depression.profile")
            }
            LinguisticProfileName::IllnessAnxiety => {
                include_str!("../data/linguistic/illness_anxiety.profile")
            }
        };
        Self::from_kv_str(raw).expect("bundled profile data is well-formed")
    }

    /// Parses the documented key-value profile format.
    pub fn from_kv_str(raw: &str) -> Result<Self, PersonaError> {
        let kv = parse_kv(raw)?;
        let get = |key: &'static str| {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or(PersonaError::MissingKey(key))
        };
        Ok(LinguisticProfile {
            name: get("name")?.parse()?,
            label: get("label")?,
            style: get("style")?,
            tone: get("tone")?,
            vocab: get("vocab")?,
            structure: get("structure")?,
            patterns: get("patterns")?,
            example: get("example")?,
        })
    }
}

/// The behavioral profile roster. Three are operationalized with full
/// dimension specifications; two carry an `experimental` flag because the
/// source behavior mapping names them without operational dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehavioralProfileName {
    StructuredCooperative,
    DistractedUnfocused,
    AdversarialCombative,
    InquisitiveOpenEnded,
    ReservedMinimalist,
}

impl BehavioralProfileName {
    /// The three operational profiles used in experiments.
    pub const OPERATIONAL: [BehavioralProfileName; 3] = [
        BehavioralProfileName::StructuredCooperative,
        BehavioralProfileName::DistractedUnfocused,
        BehavioralProfileName::AdversarialCombative,
    ];

    pub const ALL: [BehavioralProfileName; 5] = [
        BehavioralProfileName::StructuredCooperative,
        BehavioralProfileName::DistractedUnfocused,
        BehavioralProfileName::AdversarialCombative,
        BehavioralProfileName::InquisitiveOpenEnded,
        BehavioralProfileName::ReservedMinimalist,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            BehavioralProfileName::StructuredCooperative => "structured_cooperative",
            BehavioralProfileName::DistractedUnfocused => "distracted_unfocused",
            BehavioralProfileName::AdversarialCombative => "adversarial_combative",
            BehavioralProfileName::InquisitiveOpenEnded => "inquisitive_open_ended",
            BehavioralProfileName::ReservedMinimalist => "reserved_minimalist",
        }
    }
}

impl fmt::Display for BehavioralProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for BehavioralProfileName {
    type Err = PersonaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BehavioralProfileName::ALL
            .iter()
            .find(|n| n.id() == s)
            .copied()
            .ok_or_else(|| PersonaError::UnknownBehavioral(s.to_string()))
    }
}

/// Structured dimension set for one behavioral profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehavioralProfile {
    pub name: BehavioralProfileName,
    pub label: String,
    pub experimental: bool,
    pub adherence: String,
    pub engagement: String,
    pub topical_focus: String,
    pub adversarial_behavior: String,
    /// Associated patient situations from the source behavior mapping.
    pub situations: Vec<String>,
    pub example: String,
}

impl BehavioralProfile {
    pub fn bundled(name: BehavioralProfileName) -> Self {
        let raw = match name {
            BehavioralProfileName::StructuredCooperative => {
                include_str!("../data/behavioral/structured_cooperative.profile")
            }
            BehavioralProfileName::DistractedUnfocused => {
                include_str!("../data/behavioral/distracted_unfocused.profile")
            }
            BehavioralProfileName::AdversarialCombative => {
                include_str!("../data/behavioral/adversarial_combative.profile")
            }
            BehavioralProfileName::InquisitiveOpenEnded => {
                include_str!("../data/behavioral/inquisitive_open_ended.profile")
            }
            BehavioralProfileName::ReservedMinimalist => {
                include_str!("../data/behavioral/reserved_minimalist.profile")
            }
        };
        Self::from_kv_str(raw).expect("bundled profile data is well-formed")
    }

    pub fn from_kv_str(raw: &str) -> Result<Self, PersonaError> {
        let kv = parse_kv(raw)?;
        let get = |key: &'static str| {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or(PersonaError::MissingKey(key))
        };
        let situations = get("situations")?
            .split('|')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        Ok(BehavioralProfile {
            name: get("name")?.parse()?,
            label: get("label")?,
            experimental: get("experimental")? == "true",
            adherence: get("adherence")?,
            engagement: get("engagement")?,
            topical_focus: get("topical_focus")?,
            adversarial_behavior: get("adversarial_behavior")?,
            situations,
            example: get("example")?,
        })
    }
}

fn parse_kv(raw: &str) -> Result<Vec<(String, String)>, PersonaError> {
    let mut pairs = Vec::new();
    for line in raw.lines() {
        let trimmed = line.trim_end();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once(':')
            .ok_or_else(|| PersonaError::MalformedLine(trimmed.to_string()))?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// The three-step reasoning instructions and the strict output schema
/// block appended to every simulator prompt. The `<\s>` markers are
/// emitted literally, backslash included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaRules {
    pub steps: String,
    pub response_format: String,
}

impl Default for SchemaRules {
    fn default() -> Self {
        SchemaRules {
            steps: "For each of the questions:\n\
                 \x20 Step 1: Identify relevant medical facts using their assigned index (e.g., [3.2] Individual Psychotherapy).\n\
                 \x20 Step 2: For each identified fact, apply style transfer according to the linguistic profile.\n\
                 \x20 Step 3: Construct a natural language response that embeds the style-transferred facts reflecting the linguistic and behavioral profile. Each style-transferred phrase must be wrapped in <\\s> ... </\\s> and must include the [X.Y] reference right after it.\n"
                .to_string(),
            response_format: "Response format (strict JSON, all three fields required):\n\
                 {\n\
                 \x20 \"relevant_medical_history\": [\"[1.2] Gender: Male\", \"[3.2] Individual Psychotherapy\"],\n\
                 \x20 \"style_transferred_medical_history\": [\"[1.2] male\", \"[3.2] talked to someone\"],\n\
                 \x20 \"response\": \"Final response using the style-transferred facts with inline <\\s> ... </\\s> tags and [X.Y] references.\"\n\
                 }\n"
                .to_string(),
        }
    }
}

/// Everything needed to render one patient-simulator system prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaPromptSpec {
    pub medical: MedicalProfile,
    pub linguistic: LinguisticProfile,
    pub behavioral: BehavioralProfile,
    pub schema_rules: SchemaRules,
}

impl PersonaPromptSpec {
    pub fn new(
        medical: MedicalProfile,
        linguistic: LinguisticProfileName,
        behavioral: BehavioralProfileName,
    ) -> Self {
        PersonaPromptSpec {
            medical,
            linguistic: LinguisticProfile::bundled(linguistic),
            behavioral: BehavioralProfile::bundled(behavioral),
            schema_rules: SchemaRules::default(),
        }
    }
}

/// Renders the full system prompt: indexed medical facts grouped by
/// section, the five linguistic attribute lines, the four behavioral
/// dimension lines, and the schema rules — in that order. Empty sections
/// omit their header. Pure: equal specs render to equal bytes.
pub fn assemble_persona_prompt(spec: &PersonaPromptSpec) -> Result<String, PersonaError> {
    let mut seen = BTreeSet::new();
    for fact in spec.medical.facts() {
        if !seen.insert(fact.index) {
            return Err(PersonaError::DuplicateIndex(fact.index.to_string()));
        }
    }

    let mut out = String::new();
    out.push_str(
        "You are simulating a psychologically realistic patient based on three profiles: Medical, Behavioral, and Linguistic.\n\n",
    );
    out.push_str("1. Medical Profile:\n");
    for section in Section::ALL {
        let facts = spec.medical.section(section);
        if facts.is_empty() {
            continue;
        }
        out.push_str(&format!("  {}:\n", section.title()));
        for fact in facts {
            out.push_str(&format!("    {}: {}\n", fact.index, fact.display));
        }
    }
    out.push_str("2. Linguistic Profile:\n");
    out.push_str(&format!("  Style: {}\n", spec.linguistic.style));
    out.push_str(&format!("  Tone: {}\n", spec.linguistic.tone));
    out.push_str(&format!("  Vocab: {}\n", spec.linguistic.vocab));
    out.push_str(&format!("  Structure: {}\n", spec.linguistic.structure));
    out.push_str(&format!("  Patterns: {}\n", spec.linguistic.patterns));
    out.push_str("3. Behavioral Profile:\n");
    out.push_str(&format!(
        "  Conversational Adherence: {}\n",
        spec.behavioral.adherence
    ));
    out.push_str(&format!("  Engagement: {}\n", spec.behavioral.engagement));
    out.push_str(&format!(
        "  Topical Focus: {}\n",
        spec.behavioral.topical_focus
    ));
    out.push_str(&format!(
        "  Adversarial/Toxic Behavior: {}\n",
        spec.behavioral.adversarial_behavior
    ));
    out.push('\n');
    out.push_str(&spec.schema_rules.steps);
    out.push('\n');
    out.push_str(&spec.schema_rules.response_format);
    Ok(out)
}
