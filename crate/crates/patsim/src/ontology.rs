//! Medical concept vocabulary: codes, the is-a DAG, and lexicon matching.
//!
//! The ontology is loaded once from a concept table and is immutable
//! afterwards, so it can be shared freely across worker threads.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::text::{normalize_term, tokenize};

/// Which vocabulary a concept code belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Vocabulary {
    Diagnosis,
    Medication,
    Procedure,
    Demographic,
    Outcome,
}

impl Vocabulary {
    pub const ALL: [Vocabulary; 5] = [
        Vocabulary::Diagnosis,
        Vocabulary::Medication,
        Vocabulary::Procedure,
        Vocabulary::Demographic,
        Vocabulary::Outcome,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Vocabulary::Diagnosis => "DIAGNOSIS",
            Vocabulary::Medication => "MEDICATION",
            Vocabulary::Procedure => "PROCEDURE",
            Vocabulary::Demographic => "DEMOGRAPHIC",
            Vocabulary::Outcome => "OUTCOME",
        }
    }
}

impl FromStr for Vocabulary {
    type Err = OntologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "DIAGNOSIS" => Ok(Vocabulary::Diagnosis),
            "MEDICATION" => Ok(Vocabulary::Medication),
            "PROCEDURE" => Ok(Vocabulary::Procedure),
            "DEMOGRAPHIC" => Ok(Vocabulary::Demographic),
            "OUTCOME" => Ok(Vocabulary::Outcome),
            other => Err(OntologyError::UnknownVocabulary(other.to_string())),
        }
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A concept identifier, unique within one ontology as the pair
/// `(vocabulary, id)`. Serialized everywhere as `"VOCABULARY:id"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConceptCode {
    pub vocabulary: Vocabulary,
    pub id: String,
}

impl ConceptCode {
    pub fn new(vocabulary: Vocabulary, id: impl Into<String>) -> Self {
        ConceptCode {
            vocabulary,
            id: id.into(),
        }
    }
}

impl fmt::Display for ConceptCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.vocabulary, self.id)
    }
}

impl FromStr for ConceptCode {
    type Err = OntologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (vocab, id) = s
            .split_once(':')
            .ok_or_else(|| OntologyError::BadCodeSyntax(s.to_string()))?;
        if id.is_empty() {
            return Err(OntologyError::BadCodeSyntax(s.to_string()));
        }
        Ok(ConceptCode::new(vocab.parse()?, id))
    }
}

impl Serialize for ConceptCode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConceptCode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One vocabulary entry: display name plus is-a parents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub code: ConceptCode,
    pub display_name: String,
    pub parents: BTreeSet<ConceptCode>,
}

/// Errors from loading or querying the ontology.
#[derive(Debug, thiserror::Error)]
pub enum OntologyError {
    #[error("unknown vocabulary {0:?}")]
    UnknownVocabulary(String),
    #[error("malformed concept code {0:?} (expected VOCABULARY:id)")]
    BadCodeSyntax(String),
    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error("duplicate concept {0}")]
    DuplicateConcept(ConceptCode),
    #[error("concept {child} references unknown parent {parent}")]
    DanglingParent { child: ConceptCode, parent: ConceptCode },
    #[error("concept {0} lists itself as a parent")]
    SelfParent(ConceptCode),
    #[error("parent graph contains a cycle through {0}")]
    Cycle(ConceptCode),
    #[error("unknown concept {0}")]
    UnknownConcept(ConceptCode),
    #[error("concept table is empty")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The concept vocabulary with its is-a hierarchy.
///
/// The parent graph is a validated DAG; multi-parent nodes are allowed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ontology {
    nodes: BTreeMap<ConceptCode, ConceptNode>,
    roots: BTreeSet<ConceptCode>,
    #[serde(skip)]
    children: BTreeMap<ConceptCode, BTreeSet<ConceptCode>>,
}

impl Ontology {
    /// Builds an ontology from nodes, validating parent resolution, the
    /// no-self-parent rule, and acyclicity.
    pub fn from_nodes(nodes: Vec<ConceptNode>) -> Result<Self, OntologyError> {
        if nodes.is_empty() {
            return Err(OntologyError::Empty);
        }
        let mut map: BTreeMap<ConceptCode, ConceptNode> = BTreeMap::new();
        for node in nodes {
            if node.parents.contains(&node.code) {
                return Err(OntologyError::SelfParent(node.code));
            }
            if map.insert(node.code.clone(), node.clone()).is_some() {
                return Err(OntologyError::DuplicateConcept(node.code));
            }
        }
        let mut children: BTreeMap<ConceptCode, BTreeSet<ConceptCode>> = BTreeMap::new();
        for node in map.values() {
            for parent in &node.parents {
                if !map.contains_key(parent) {
                    return Err(OntologyError::DanglingParent {
                        child: node.code.clone(),
                        parent: parent.clone(),
                    });
                }
                children
                    .entry(parent.clone())
                    .or_default()
                    .insert(node.code.clone());
            }
        }
        let roots: BTreeSet<ConceptCode> = map
            .values()
            .filter(|n| n.parents.is_empty())
            .map(|n| n.code.clone())
            .collect();

        let ontology = Ontology {
            nodes: map,
            roots,
            children,
        };
        ontology.check_acyclic()?;
        Ok(ontology)
    }

    /// Kahn's algorithm over child→parent edges; reports the smallest code
    /// left on a cycle when one exists.
    fn check_acyclic(&self) -> Result<(), OntologyError> {
        let mut remaining_parents: BTreeMap<&ConceptCode, usize> = self
            .nodes
            .values()
            .map(|n| (&n.code, n.parents.len()))
            .collect();
        let mut queue: VecDeque<&ConceptCode> = remaining_parents
            .iter()
            .filter(|(_, &deg)| deg == 0)
            .map(|(&code, _)| code)
            .collect();
        let mut visited = 0usize;
        while let Some(code) = queue.pop_front() {
            visited += 1;
            if let Some(kids) = self.children.get(code) {
                for kid in kids {
                    let deg = remaining_parents.get_mut(kid).expect("known child");
                    *deg -= 1;
                    if *deg == 0 {
                        queue.push_back(kid);
                    }
                }
            }
        }
        if visited < self.nodes.len() {
            let offender = remaining_parents
                .iter()
                .filter(|(_, &deg)| deg > 0)
                .map(|(&code, _)| code.clone())
                .next()
                .expect("cycle member exists");
            return Err(OntologyError::Cycle(offender));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, code: &ConceptCode) -> bool {
        self.nodes.contains_key(code)
    }

    pub fn node(&self, code: &ConceptCode) -> Result<&ConceptNode, OntologyError> {
        self.nodes
            .get(code)
            .ok_or_else(|| OntologyError::UnknownConcept(code.clone()))
    }

    pub fn display_name(&self, code: &ConceptCode) -> Result<&str, OntologyError> {
        Ok(self.node(code)?.display_name.as_str())
    }

    pub fn roots(&self) -> &BTreeSet<ConceptCode> {
        &self.roots
    }

    /// Iterates nodes in code order (deterministic).
    pub fn nodes(&self) -> impl Iterator<Item = &ConceptNode> {
        self.nodes.values()
    }

    /// Resolves a bare id that may omit its vocabulary. Qualified
    /// `"VOCAB:id"` strings resolve directly; bare ids resolve only when
    /// exactly one vocabulary contains them.
    pub fn resolve_id(&self, raw: &str) -> Result<ConceptCode, OntologyError> {
        if raw.contains(':') {
            let code: ConceptCode = raw.parse()?;
            self.node(&code)?;
            return Ok(code);
        }
        let mut hits: Vec<ConceptCode> = Vocabulary::ALL
            .iter()
            .map(|&v| ConceptCode::new(v, raw))
            .filter(|c| self.nodes.contains_key(c))
            .collect();
        match hits.len() {
            1 => Ok(hits.pop().expect("one hit")),
            0 => Err(OntologyError::UnknownConcept(ConceptCode::new(
                Vocabulary::Diagnosis,
                raw,
            ))),
            _ => Err(OntologyError::BadCodeSyntax(format!(
                "{raw} is ambiguous across vocabularies; qualify as VOCABULARY:id"
            ))),
        }
    }

    /// All ancestors of `code` (codes reachable via parent links), not
    /// including `code` itself.
    pub fn ancestors(&self, code: &ConceptCode) -> Result<BTreeSet<ConceptCode>, OntologyError> {
        let start = self.node(code)?;
        let mut seen: BTreeSet<ConceptCode> = BTreeSet::new();
        let mut queue: VecDeque<&ConceptCode> = start.parents.iter().collect();
        while let Some(next) = queue.pop_front() {
            if seen.insert(next.clone()) {
                queue.extend(self.nodes[next].parents.iter());
            }
        }
        Ok(seen)
    }

    /// True iff one code is reachable from the other along parent links,
    /// in either direction. Reflexive: `(a, a)` is true.
    pub fn is_ancestor_or_descendant(
        &self,
        a: &ConceptCode,
        b: &ConceptCode,
    ) -> Result<bool, OntologyError> {
        self.node(a)?;
        self.node(b)?;
        if a == b {
            return Ok(true);
        }
        Ok(self.ancestors(a)?.contains(b) || self.ancestors(b)?.contains(a))
    }

    /// Shortest undirected path length in the parent graph, or `None`
    /// when the two codes live in disconnected components.
    pub fn hierarchical_distance(
        &self,
        a: &ConceptCode,
        b: &ConceptCode,
    ) -> Result<Option<u32>, OntologyError> {
        self.node(a)?;
        self.node(b)?;
        if a == b {
            return Ok(Some(0));
        }
        let mut dist: HashMap<&ConceptCode, u32> = HashMap::new();
        let mut queue: VecDeque<&ConceptCode> = VecDeque::new();
        let a_key = self.nodes.get_key_value(a).expect("checked").0;
        dist.insert(a_key, 0);
        queue.push_back(a_key);
        while let Some(code) = queue.pop_front() {
            let d = dist[code];
            let node = &self.nodes[code];
            let kids = self.children.get(code);
            let neighbors = node
                .parents
                .iter()
                .chain(kids.into_iter().flatten());
            for next in neighbors {
                if next == b {
                    return Ok(Some(d + 1));
                }
                let next_key = self.nodes.get_key_value(next).expect("resolved").0;
                if !dist.contains_key(next_key) {
                    dist.insert(next_key, d + 1);
                    queue.push_back(next_key);
                }
            }
        }
        Ok(None)
    }
}

/// Loads the concept table from a CSV file with the documented header
/// `id,vocabulary,display_name,parent_ids` (parents `|`-separated; bare
/// parent ids mean "same vocabulary as the child").
pub fn load_ontology(path: impl AsRef<Path>) -> Result<Ontology, OntologyError> {
    let file = std::fs::File::open(path)?;
    read_ontology(file)
}

/// Same as [`load_ontology`] but from any reader.
pub fn read_ontology<R: Read>(reader: R) -> Result<Ontology, OntologyError> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut nodes = Vec::new();
    for (i, record) in csv_reader.deserialize::<ConceptRow>().enumerate() {
        let row_no = i + 2; // header is row 1
        let row = record.map_err(|e| OntologyError::BadRow {
            row: row_no,
            message: e.to_string(),
        })?;
        let vocabulary: Vocabulary = row.vocabulary.parse().map_err(|e| OntologyError::BadRow {
            row: row_no,
            message: format!("{e}"),
        })?;
        if row.id.is_empty() {
            return Err(OntologyError::BadRow {
                row: row_no,
                message: "empty id".to_string(),
            });
        }
        let code = ConceptCode::new(vocabulary, row.id);
        let mut parents = BTreeSet::new();
        for raw in row.parent_ids.split('|').filter(|s| !s.trim().is_empty()) {
            let parent = if raw.contains(':') {
                raw.trim().parse()?
            } else {
                ConceptCode::new(vocabulary, raw.trim())
            };
            parents.insert(parent);
        }
        nodes.push(ConceptNode {
            code,
            display_name: row.display_name,
            parents,
        });
    }
    Ontology::from_nodes(nodes)
}

#[derive(Debug, Deserialize)]
struct ConceptRow {
    id: String,
    vocabulary: String,
    display_name: String,
    #[serde(default)]
    parent_ids: String,
}

/// One lexicon hit: which tokens matched and the concept they map to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermMatch {
    /// Index of the first matched token.
    pub token_start: usize,
    /// Number of tokens in the match.
    pub token_len: usize,
    /// Byte span in the original text.
    pub span: (usize, usize),
    pub code: ConceptCode,
}

/// Normalized-term → concept map built from display names, used for
/// greedy longest-first n-gram matching (n ≤ 6).
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: HashMap<String, ConceptCode>,
    max_tokens: usize,
}

/// Longest n-gram the matcher will consider.
pub const MAX_NGRAM: usize = 6;

impl Lexicon {
    /// Builds the lexicon from the clinical vocabularies (diagnoses,
    /// medications, procedures). Display names longer than [`MAX_NGRAM`]
    /// tokens are unmatchable and skipped. When two concepts normalize to
    /// the same term the smaller code wins, deterministically.
    pub fn from_ontology(ontology: &Ontology) -> Self {
        Self::from_ontology_filtered(ontology, &[
            Vocabulary::Diagnosis,
            Vocabulary::Medication,
            Vocabulary::Procedure,
        ])
    }

    /// Builds a lexicon restricted to the given vocabularies.
    pub fn from_ontology_filtered(ontology: &Ontology, vocabularies: &[Vocabulary]) -> Self {
        let mut entries: HashMap<String, ConceptCode> = HashMap::new();
        let mut max_tokens = 1;
        for node in ontology.nodes() {
            if !vocabularies.contains(&node.code.vocabulary) {
                continue;
            }
            let term = normalize_term(&node.display_name);
            if term.is_empty() {
                continue;
            }
            let n_tokens = term.split(' ').count();
            if n_tokens > MAX_NGRAM {
                continue;
            }
            // Ontology iteration is code-ordered, so first insert wins the
            // collision with the smallest code.
            entries.entry(term).or_insert_with(|| node.code.clone());
            max_tokens = max_tokens.max(n_tokens);
        }
        Lexicon {
            entries,
            max_tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, normalized_term: &str) -> Option<&ConceptCode> {
        self.entries.get(normalized_term)
    }

    /// Greedy left-to-right matching: at each token position the longest
    /// matching n-gram (n ≤ 6) wins and the scan resumes after it, so
    /// matches never overlap.
    pub fn match_medical_terms(&self, text: &str) -> Vec<TermMatch> {
        let tokens = tokenize(text);
        let mut matches = Vec::new();
        let mut i = 0usize;
        while i < tokens.len() {
            let longest = self.max_tokens.min(MAX_NGRAM).min(tokens.len() - i);
            let mut advanced = false;
            for n in (1..=longest).rev() {
                let candidate = tokens[i..i + n]
                    .iter()
                    .map(|t| t.text.as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                if let Some(code) = self.entries.get(&candidate) {
                    matches.push(TermMatch {
                        token_start: i,
                        token_len: n,
                        span: (tokens[i].start, tokens[i + n - 1].end),
                        code: code.clone(),
                    });
                    i += n;
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                i += 1;
            }
        }
        matches
    }
}
