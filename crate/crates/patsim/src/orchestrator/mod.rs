//! Conversation orchestration: drives the persona-conditioned patient
//! simulator against a decision aid under test, parses the strict turn
//! schema, and executes multi-cell experiment designs.

pub mod experiment;
pub mod schema;
pub mod stubs;

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::ontology::ConceptCode;
use crate::persona::{assemble_persona_prompt, PersonaError, PersonaPromptSpec};
use crate::ports::{ChatMessage, ChatPort};

pub use experiment::{run_experiment, ExperimentDesign, ExperimentManifest, PortFactory};
pub use schema::{parse_simulator_turn, SimulatorTurn, TurnParseError};

/// The six sequential intake stages of the decision aid.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum IntakeStage {
    Rapport,
    IllnessHistory,
    AntidepressantHistory,
    CurrentMedications,
    Procedures,
    Recommendation,
}

impl IntakeStage {
    pub const ALL: [IntakeStage; 6] = [
        IntakeStage::Rapport,
        IntakeStage::IllnessHistory,
        IntakeStage::AntidepressantHistory,
        IntakeStage::CurrentMedications,
        IntakeStage::Procedures,
        IntakeStage::Recommendation,
    ];

    pub fn order(&self) -> u8 {
        Self::ALL.iter().position(|s| s == self).unwrap() as u8
    }
}

impl fmt::Display for IntakeStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            IntakeStage::Rapport => "rapport",
            IntakeStage::IllnessHistory => "illness_history",
            IntakeStage::AntidepressantHistory => "antidepressant_history",
            IntakeStage::CurrentMedications => "current_medications",
            IntakeStage::Procedures => "procedures",
            IntakeStage::Recommendation => "recommendation",
        };
        f.write_str(name)
    }
}

/// Outcome of one simulator reply after retries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnOutcome {
    Parsed(SimulatorTurn),
    /// The reply never validated; the raw text and classified error are
    /// preserved rather than silently repaired.
    ParseFailed {
        attempts: usize,
        error: String,
        raw: String,
    },
}

impl TurnOutcome {
    pub fn parsed(&self) -> Option<&SimulatorTurn> {
        match self {
            TurnOutcome::Parsed(turn) => Some(turn),
            TurnOutcome::ParseFailed { .. } => None,
        }
    }
}

/// One aid question plus the simulator's reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub stage: IntakeStage,
    pub aid_utterance: String,
    pub outcome: TurnOutcome,
}

/// Final verdict of the decision aid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recommendation {
    Drug(ConceptCode),
    NoRecommendation,
}

/// Identifies the persona a conversation ran under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaRef {
    pub profile_id: String,
    pub linguistic: String,
    pub behavioral: String,
}

/// A full conversation log. Self-contained: the profile snapshot and all
/// turns are embedded so metrics replay from the log alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub persona: PersonaRef,
    pub profile_snapshot: crate::profilegen::MedicalProfile,
    pub seed: u64,
    pub turns: Vec<TurnRecord>,
    /// `None` when the conversation ended before the aid could recommend
    /// (turn cap, wall-clock cap, or abort).
    pub final_recommendation: Option<Recommendation>,
    /// Transport-failure reason when the conversation aborted.
    pub aborted: Option<String>,
    /// Concepts the system under test reports having extracted.
    pub sut_extracted: Vec<ConceptCode>,
}

impl Conversation {
    /// Simulator response texts in turn order (parsed turns only).
    pub fn patient_responses(&self) -> Vec<&str> {
        self.turns
            .iter()
            .filter_map(|t| t.outcome.parsed().map(|p| p.response.as_str()))
            .collect()
    }

    pub fn parse_failures(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| t.outcome.parsed().is_none())
            .count()
    }
}

/// Caps on one conversation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConversationLimits {
    pub max_turns: usize,
    pub max_wall_time_secs: u64,
    /// Extra attempts after a malformed reply before the turn is recorded
    /// as failed.
    pub parse_retries: usize,
}

impl Default for ConversationLimits {
    fn default() -> Self {
        ConversationLimits {
            max_turns: 30,
            max_wall_time_secs: 600,
            parse_retries: 2,
        }
    }
}

/// The decision aid under test. Implementations must label each question
/// with its intake stage; stages may repeat but never regress.
pub trait SutPort {
    /// Next intake question, or `None` when the aid is ready to recommend.
    fn next_question(&mut self, history: &[TurnRecord]) -> Option<(IntakeStage, String)>;

    fn recommend(&mut self, history: &[TurnRecord]) -> Recommendation;

    /// Concepts the aid extracted during intake, when it can report them.
    fn extracted_concepts(&self) -> Vec<ConceptCode> {
        Vec::new()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Persona(#[from] PersonaError),
    #[error("aid regressed from stage {from} to {to}")]
    StageRegression { from: IntakeStage, to: IntakeStage },
    #[error("log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("log line {line}: {message}")]
    BadLog { line: usize, message: String },
}

/// Runs one conversation to completion: alternate aid questions and
/// simulator replies until the aid recommends or a cap is hit. Invalid
/// replies are retried up to the configured budget and then recorded as
/// failed turns. A chat transport failure marks the conversation aborted
/// and preserves the partial log.
pub fn run_conversation(
    id: impl Into<String>,
    persona: &PersonaPromptSpec,
    chat: &dyn ChatPort,
    sut: &mut dyn SutPort,
    limits: &ConversationLimits,
    seed: u64,
) -> Result<Conversation, OrchestratorError> {
    let system_prompt = assemble_persona_prompt(persona)?;
    let mut conversation = Conversation {
        id: id.into(),
        persona: PersonaRef {
            profile_id: persona.medical.id.clone(),
            linguistic: persona.linguistic.name.to_string(),
            behavioral: persona.behavioral.name.to_string(),
        },
        profile_snapshot: persona.medical.clone(),
        seed,
        turns: Vec::new(),
        final_recommendation: None,
        aborted: None,
        sut_extracted: Vec::new(),
    };
    let started = Instant::now();
    let wall_cap = Duration::from_secs(limits.max_wall_time_secs);
    let mut last_stage: Option<IntakeStage> = None;

    loop {
        if conversation.turns.len() >= limits.max_turns || started.elapsed() > wall_cap {
            break;
        }
        let Some((stage, question)) = sut.next_question(&conversation.turns) else {
            conversation.final_recommendation = Some(sut.recommend(&conversation.turns));
            break;
        };
        if let Some(prev) = last_stage {
            if stage.order() < prev.order() {
                return Err(OrchestratorError::StageRegression {
                    from: prev,
                    to: stage,
                });
            }
        }
        last_stage = Some(stage);

        let mut messages: Vec<ChatMessage> = Vec::new();
        for turn in &conversation.turns {
            messages.push(ChatMessage::user(turn.aid_utterance.clone()));
            let reply = match &turn.outcome {
                TurnOutcome::Parsed(t) => t.canonical_json(),
                TurnOutcome::ParseFailed { raw, .. } => raw.clone(),
            };
            messages.push(ChatMessage::assistant(reply));
        }
        messages.push(ChatMessage::user(question.clone()));

        let mut outcome = None;
        let mut attempts = 0usize;
        while attempts <= limits.parse_retries {
            attempts += 1;
            let raw = match chat.request(&system_prompt, &messages) {
                Ok(raw) => raw,
                Err(err) => {
                    conversation.aborted = Some(err.to_string());
                    return Ok(conversation);
                }
            };
            match parse_simulator_turn(&raw) {
                Ok(turn) => {
                    outcome = Some(TurnOutcome::Parsed(turn));
                    break;
                }
                Err(parse_err) => {
                    if attempts > limits.parse_retries {
                        outcome = Some(TurnOutcome::ParseFailed {
                            attempts,
                            error: parse_err.to_string(),
                            raw,
                        });
                    }
                }
            }
        }
        conversation.turns.push(TurnRecord {
            stage,
            aid_utterance: question,
            outcome: outcome.expect("loop always produces an outcome"),
        });
    }
    conversation.sut_extracted = sut.extracted_concepts();
    Ok(conversation)
}

/// One line of a conversation log file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogRecord {
    Header {
        conversation_id: String,
        persona: PersonaRef,
        profile: crate::profilegen::MedicalProfile,
        seed: u64,
    },
    Turn(TurnRecord),
    Footer {
        final_recommendation: Option<Recommendation>,
        aborted: Option<String>,
        sut_extracted: Vec<ConceptCode>,
    },
}

/// Writes the line-delimited log: one header, one line per turn, one
/// footer.
pub fn write_conversation_log<W: Write>(
    conversation: &Conversation,
    mut writer: W,
) -> Result<(), OrchestratorError> {
    let mut emit = |record: &LogRecord| -> Result<(), OrchestratorError> {
        serde_json::to_writer(&mut writer, record)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
        writer.write_all(b"\n")?;
        Ok(())
    };
    emit(&LogRecord::Header {
        conversation_id: conversation.id.clone(),
        persona: conversation.persona.clone(),
        profile: conversation.profile_snapshot.clone(),
        seed: conversation.seed,
    })?;
    for turn in &conversation.turns {
        emit(&LogRecord::Turn(turn.clone()))?;
    }
    emit(&LogRecord::Footer {
        final_recommendation: conversation.final_recommendation.clone(),
        aborted: conversation.aborted.clone(),
        sut_extracted: conversation.sut_extracted.clone(),
    })?;
    Ok(())
}

/// Reads a conversation back from its log; logs are self-contained so the
/// result replays to identical metric inputs.
pub fn read_conversation_log<R: Read>(reader: R) -> Result<Conversation, OrchestratorError> {
    let buf = BufReader::new(reader);
    let mut conversation: Option<Conversation> = None;
    for (i, line) in buf.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LogRecord =
            serde_json::from_str(&line).map_err(|e| OrchestratorError::BadLog {
                line: i + 1,
                message: e.to_string(),
            })?;
        match record {
            LogRecord::Header {
                conversation_id,
                persona,
                profile,
                seed,
            } => {
                conversation = Some(Conversation {
                    id: conversation_id,
                    persona,
                    profile_snapshot: profile,
                    seed,
                    turns: Vec::new(),
                    final_recommendation: None,
                    aborted: None,
                    sut_extracted: Vec::new(),
                });
            }
            LogRecord::Turn(turn) => {
                conversation
                    .as_mut()
                    .ok_or(OrchestratorError::BadLog {
                        line: i + 1,
                        message: "turn before header".to_string(),
                    })?
                    .turns
                    .push(turn);
            }
            LogRecord::Footer {
                final_recommendation,
                aborted,
                sut_extracted,
            } => {
                let c = conversation.as_mut().ok_or(OrchestratorError::BadLog {
                    line: i + 1,
                    message: "footer before header".to_string(),
                })?;
                c.final_recommendation = final_recommendation;
                c.aborted = aborted;
                c.sut_extracted = sut_extracted;
            }
        }
    }
    conversation.ok_or(OrchestratorError::BadLog {
        line: 0,
        message: "log has no header".to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ports::PortError;

    struct FixedChat(String);

    impl ChatPort for FixedChat {
        fn request(&self, _system: &str, _messages: &[ChatMessage]) -> Result<String, PortError> {
            Ok(self.0.clone())
        }
    }

    struct FailingChat;

    impl ChatPort for FailingChat {
        fn request(&self, _system: &str, _messages: &[ChatMessage]) -> Result<String, PortError> {
            Err(PortError::new("chat", "connection refused"))
        }
    }

    struct ScriptedAid {
        asked: usize,
        questions: Vec<(IntakeStage, &'static str)>,
    }

    impl ScriptedAid {
        fn six_stage() -> Self {
            ScriptedAid {
                asked: 0,
                questions: vec![
                    (IntakeStage::Rapport, "How are you today?"),
                    (IntakeStage::IllnessHistory, "Any conditions?"),
                    (IntakeStage::AntidepressantHistory, "Tried antidepressants?"),
                    (IntakeStage::CurrentMedications, "Current medications?"),
                    (IntakeStage::Procedures, "Any procedures?"),
                    (IntakeStage::Recommendation, "Anything else before I recommend?"),
                ],
            }
        }
    }

    impl SutPort for ScriptedAid {
        fn next_question(&mut self, _history: &[TurnRecord]) -> Option<(IntakeStage, String)> {
            let q = self.questions.get(self.asked)?;
            self.asked += 1;
            Some((q.0, q.1.to_string()))
        }

        fn recommend(&mut self, _history: &[TurnRecord]) -> Recommendation {
            Recommendation::NoRecommendation
        }
    }

    fn persona() -> PersonaPromptSpec {
        use crate::persona::{BehavioralProfileName, LinguisticProfileName};
        use crate::profilegen::{FactIndex, MedicalProfile, ProfileFact};
        let profile = MedicalProfile {
            id: "p-unit".to_string(),
            outcome: ConceptCode::new(crate::ontology::Vocabulary::Outcome, "resp"),
            demographics: vec![ProfileFact {
                index: FactIndex { section: 1, position: 1 },
                code: ConceptCode::new(crate::ontology::Vocabulary::Demographic, "age_30_39"),
                display: "Age: 34".to_string(),
            }],
            diagnoses: vec![],
            medications: vec![],
            procedures: vec![],
            predicted_response: 0.4,
            provenance: vec![],
        };
        PersonaPromptSpec::new(
            profile,
            LinguisticProfileName::FunctionalHl,
            BehavioralProfileName::StructuredCooperative,
        )
    }

    fn valid_reply() -> String {
        r#"{"relevant_medical_history":[],"style_transferred_medical_history":[],"response":"okay."}"#
            .to_string()
    }

    #[test]
    fn six_stage_script_reaches_a_recommendation() {
        let chat = FixedChat(valid_reply());
        let mut aid = ScriptedAid::six_stage();
        let convo = run_conversation(
            "c1",
            &persona(),
            &chat,
            &mut aid,
            &ConversationLimits::default(),
            0,
        )
        .unwrap();
        assert_eq!(convo.turns.len(), 6);
        let stages: Vec<IntakeStage> = convo.turns.iter().map(|t| t.stage).collect();
        assert_eq!(stages, IntakeStage::ALL.to_vec());
        assert_eq!(convo.final_recommendation, Some(Recommendation::NoRecommendation));
        assert_eq!(convo.parse_failures(), 0);
    }

    #[test]
    fn turn_cap_stops_without_recommendation() {
        let chat = FixedChat(valid_reply());
        let mut aid = ScriptedAid::six_stage();
        let limits = ConversationLimits {
            max_turns: 2,
            ..Default::default()
        };
        let convo = run_conversation("c2", &persona(), &chat, &mut aid, &limits, 0).unwrap();
        assert_eq!(convo.turns.len(), 2);
        assert_eq!(convo.final_recommendation, None);
    }

    #[test]
    fn malformed_replies_are_recorded_after_retries() {
        let chat = FixedChat("not json".to_string());
        let mut aid = ScriptedAid::six_stage();
        let convo = run_conversation(
            "c3",
            &persona(),
            &chat,
            &mut aid,
            &ConversationLimits::default(),
            0,
        )
        .unwrap();
        assert_eq!(convo.parse_failures(), 6);
        match &convo.turns[0].outcome {
            TurnOutcome::ParseFailed { attempts, raw, .. } => {
                assert_eq!(*attempts, 3); // 1 try + 2 retries
                assert_eq!(raw, "not json");
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn transport_failure_aborts_with_partial_log() {
        let chat = FailingChat;
        let mut aid = ScriptedAid::six_stage();
        let convo = run_conversation(
            "c4",
            &persona(),
            &chat,
            &mut aid,
            &ConversationLimits::default(),
            0,
        )
        .unwrap();
        assert!(convo.aborted.is_some());
        assert!(convo.turns.is_empty());
        assert_eq!(convo.final_recommendation, None);
    }

    #[test]
    fn log_round_trip_preserves_the_conversation() {
        let chat = FixedChat(valid_reply());
        let mut aid = ScriptedAid::six_stage();
        let convo = run_conversation(
            "c5",
            &persona(),
            &chat,
            &mut aid,
            &ConversationLimits::default(),
            7,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_conversation_log(&convo, &mut buf).unwrap();
        let back = read_conversation_log(buf.as_slice()).unwrap();
        assert_eq!(convo, back);
    }

    #[test]
    fn stage_regression_is_rejected() {
        struct RegressingAid(usize);
        impl SutPort for RegressingAid {
            fn next_question(&mut self, _h: &[TurnRecord]) -> Option<(IntakeStage, String)> {
                self.0 += 1;
                match self.0 {
                    1 => Some((IntakeStage::Procedures, "q1".to_string())),
                    2 => Some((IntakeStage::Rapport, "q2".to_string())),
                    _ => None,
                }
            }
            fn recommend(&mut self, _h: &[TurnRecord]) -> Recommendation {
                Recommendation::NoRecommendation
            }
        }
        let chat = FixedChat(valid_reply());
        let mut aid = RegressingAid(0);
        let err = run_conversation(
            "c6",
            &persona(),
            &chat,
            &mut aid,
            &ConversationLimits::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, OrchestratorError::StageRegression { .. }));
    }
}
