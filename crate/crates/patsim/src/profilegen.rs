//! Two-phase medical profile generation.
//!
//! Phase 1 builds each profile through four stages: top-K relevance
//! filtering, demographic seeding, independence-screened selection under a
//! symmetric risk-ratio band, and controlled diversity expansion from the
//! residual pool. Phase 2 selects a cohort whose predicted response
//! probabilities match the sigma-band allocation of a binomial
//! distribution.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortStats, DemographicDistribution};
use crate::ontology::{ConceptCode, Ontology, Vocabulary};
use crate::ports::{PortError, ResponsePredictor};

/// Default acceptance band and candidate-pool parameters.
pub const DEFAULT_TOP_K: usize = 500;
pub const DEFAULT_RR_HIGH: f64 = 7.0;
pub const DEFAULT_RR_LOW: f64 = 1.0 / 1.5;
pub const DEFAULT_DIVERSITY_THRESHOLD: f64 = 1.5;
pub const DEFAULT_MAX_RESIDUAL_ADDITIONS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum ProfileGenError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("binomial probability must lie strictly between 0 and 1 (got {0})")]
    DegenerateProbability(f64),
    #[error("binomial size must be at least 1")]
    ZeroTrials,
    #[error("demographic distribution for {0:?} is empty")]
    EmptyDistribution(&'static str),
    #[error("response predictor failed: {source}")]
    PredictorFailure {
        source: PortError,
        /// Provenance gathered before the failure, kept for audit.
        partial_provenance: Vec<GateRecord>,
    },
    #[error("cannot select {requested} profiles from a pool of {available}")]
    SelectionTooLarge { requested: usize, available: usize },
}

/// Configuration for Phase-1 generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Concept code of the target antidepressant response outcome.
    pub outcome: ConceptCode,
    /// Number of profiles to generate.
    pub n_patients: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_rr_high")]
    pub rr_high: f64,
    #[serde(default = "default_rr_low")]
    pub rr_low: f64,
    #[serde(default = "default_diversity_threshold")]
    pub diversity_threshold: f64,
    #[serde(default = "default_max_residual")]
    pub max_residual_additions: usize,
    #[serde(default)]
    pub rng_seed: u64,
    /// When set, every defined pairwise RR must lie inside the band
    /// instead of the aggregated MAX.
    #[serde(default)]
    pub strict_per_pair: bool,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}
fn default_rr_high() -> f64 {
    DEFAULT_RR_HIGH
}
fn default_rr_low() -> f64 {
    DEFAULT_RR_LOW
}
fn default_diversity_threshold() -> f64 {
    DEFAULT_DIVERSITY_THRESHOLD
}
fn default_max_residual() -> usize {
    DEFAULT_MAX_RESIDUAL_ADDITIONS
}

impl GenConfig {
    pub fn new(outcome: ConceptCode, n_patients: usize) -> Self {
        GenConfig {
            outcome,
            n_patients,
            top_k: DEFAULT_TOP_K,
            rr_high: DEFAULT_RR_HIGH,
            rr_low: DEFAULT_RR_LOW,
            diversity_threshold: DEFAULT_DIVERSITY_THRESHOLD,
            max_residual_additions: DEFAULT_MAX_RESIDUAL_ADDITIONS,
            rng_seed: 0,
            strict_per_pair: false,
        }
    }

    pub fn validate(&self) -> Result<(), ProfileGenError> {
        if !(self.rr_low < 1.0 && 1.0 < self.rr_high) {
            return Err(ProfileGenError::InvalidConfig(format!(
                "need rr_low < 1 < rr_high, got low={} high={}",
                self.rr_low, self.rr_high
            )));
        }
        if self.diversity_threshold <= 1.0 {
            return Err(ProfileGenError::InvalidConfig(format!(
                "diversity_threshold must exceed 1, got {}",
                self.diversity_threshold
            )));
        }
        if self.top_k == 0 {
            return Err(ProfileGenError::InvalidConfig(
                "top_k must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Profile sections carry fixed section numbers regardless of which
/// sections are populated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Demographics,
    Diagnoses,
    Medications,
    Procedures,
}

impl Section {
    pub const ALL: [Section; 4] = [
        Section::Demographics,
        Section::Diagnoses,
        Section::Medications,
        Section::Procedures,
    ];

    pub fn number(&self) -> u32 {
        match self {
            Section::Demographics => 1,
            Section::Diagnoses => 2,
            Section::Medications => 3,
            Section::Procedures => 4,
        }
    }

    pub fn title(&self) -> &'static str {
        match self {
            Section::Demographics => "Demographics",
            Section::Diagnoses => "Diagnosis History",
            Section::Medications => "Medication History",
            Section::Procedures => "Procedures",
        }
    }

    pub fn for_vocabulary(vocabulary: Vocabulary) -> Option<Section> {
        match vocabulary {
            Vocabulary::Demographic => Some(Section::Demographics),
            Vocabulary::Diagnosis => Some(Section::Diagnoses),
            Vocabulary::Medication => Some(Section::Medications),
            Vocabulary::Procedure => Some(Section::Procedures),
            Vocabulary::Outcome => None,
        }
    }
}

/// Hierarchical fact index `X.Y`, serialized as the literal string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FactIndex {
    pub section: u32,
    pub position: u32,
}

impl fmt::Display for FactIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.section, self.position)
    }
}

impl FromStr for FactIndex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (x, y) = s
            .split_once('.')
            .ok_or_else(|| format!("bad fact index {s:?}"))?;
        Ok(FactIndex {
            section: x.parse().map_err(|_| format!("bad fact index {s:?}"))?,
            position: y.parse().map_err(|_| format!("bad fact index {s:?}"))?,
        })
    }
}

impl Serialize for FactIndex {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FactIndex {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// One indexed profile fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileFact {
    pub index: FactIndex,
    pub code: ConceptCode,
    pub display: String,
}

/// Which stage admitted a fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionStage {
    DemographicSeed,
    IndependenceScreen,
    DiversityExpansion,
}

/// Per-fact admission record: the selected set at admission time and every
/// pairwise RR evaluated against it, enough to re-audit the gate decision
/// independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub code: ConceptCode,
    pub stage: AdmissionStage,
    pub selected_before: Vec<ConceptCode>,
    /// `(member of selected_before, RR(member, code))`; `None` marks an
    /// undefined pairwise RR.
    pub pair_rrs: Vec<(ConceptCode, Option<f64>)>,
    /// MAX over the defined pairwise RRs (stage 3 gate input).
    pub aggregate_rr: Option<f64>,
    /// Stage-4 witness: the first selected feature whose RR exceeds the
    /// diversity threshold.
    pub witness: Option<(ConceptCode, f64)>,
}

/// A generated patient profile: indexed facts grouped by section, the
/// predicted response probability, and full admission provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicalProfile {
    pub id: String,
    pub outcome: ConceptCode,
    pub demographics: Vec<ProfileFact>,
    pub diagnoses: Vec<ProfileFact>,
    pub medications: Vec<ProfileFact>,
    pub procedures: Vec<ProfileFact>,
    pub predicted_response: f64,
    pub provenance: Vec<GateRecord>,
}

impl MedicalProfile {
    pub fn section(&self, section: Section) -> &[ProfileFact] {
        match section {
            Section::Demographics => &self.demographics,
            Section::Diagnoses => &self.diagnoses,
            Section::Medications => &self.medications,
            Section::Procedures => &self.procedures,
        }
    }

    fn section_mut(&mut self, section: Section) -> &mut Vec<ProfileFact> {
        match section {
            Section::Demographics => &mut self.demographics,
            Section::Diagnoses => &mut self.diagnoses,
            Section::Medications => &mut self.medications,
            Section::Procedures => &mut self.procedures,
        }
    }

    /// All facts in section order.
    pub fn facts(&self) -> impl Iterator<Item = &ProfileFact> {
        Section::ALL.iter().flat_map(|&s| self.section(s).iter())
    }

    pub fn fact_by_index(&self, index: FactIndex) -> Option<&ProfileFact> {
        self.facts().find(|f| f.index == index)
    }

    pub fn n_facts(&self) -> usize {
        self.facts().count()
    }

    /// Clinical (non-demographic) facts.
    pub fn clinical_facts(&self) -> impl Iterator<Item = &ProfileFact> {
        self.diagnoses
            .iter()
            .chain(self.medications.iter())
            .chain(self.procedures.iter())
    }

    pub fn concept_codes(&self) -> BTreeSet<ConceptCode> {
        self.facts().map(|f| f.code.clone()).collect()
    }

    /// Appends a fact to its section, assigning the next dense index.
    fn push_fact(&mut self, section: Section, code: ConceptCode, display: String) {
        let list = self.section_mut(section);
        let index = FactIndex {
            section: section.number(),
            position: list.len() as u32 + 1,
        };
        list.push(ProfileFact {
            index,
            code,
            display,
        });
    }
}

/// The two demographic distributions Stage 2 draws from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemographicDists {
    pub gender: DemographicDistribution,
    pub age: DemographicDistribution,
}

/// Outcome of one gate evaluation, kept for provenance.
#[derive(Debug, Clone)]
pub struct GateEvaluation {
    pub pair_rrs: Vec<(ConceptCode, Option<f64>)>,
    pub aggregate_rr: Option<f64>,
    pub passed: bool,
}

/// Source of pairwise risk ratios; [`CohortStats`] is the production
/// implementation, tests may substitute tables.
pub trait RiskRatioSource {
    fn pairwise_rr(
        &self,
        s: &ConceptCode,
        v: &ConceptCode,
        outcome: &ConceptCode,
    ) -> Option<f64>;
}

impl RiskRatioSource for CohortStats {
    fn pairwise_rr(
        &self,
        s: &ConceptCode,
        v: &ConceptCode,
        outcome: &ConceptCode,
    ) -> Option<f64> {
        self.risk_ratio(s, v, outcome)
    }
}

/// Evaluates the symmetric independence gate for `candidate` against the
/// selected set, returning every pairwise RR for provenance.
///
/// Undefined pairwise RRs are skipped in the aggregate; when every pair is
/// undefined the candidate is rejected. In default (aggregate) mode the
/// MAX over defined pairs must satisfy `rr_low < MAX ≤ rr_high`; in
/// strict-per-pair mode every defined pair must lie in the band.
pub fn evaluate_rr_gate<R: RiskRatioSource + ?Sized>(
    stats: &R,
    selected: &[ConceptCode],
    candidate: &ConceptCode,
    cfg: &GenConfig,
) -> GateEvaluation {
    let pair_rrs: Vec<(ConceptCode, Option<f64>)> = selected
        .iter()
        .map(|s| (s.clone(), stats.pairwise_rr(s, candidate, &cfg.outcome)))
        .collect();
    let defined: Vec<f64> = pair_rrs.iter().filter_map(|(_, rr)| *rr).collect();
    let aggregate_rr = defined.iter().cloned().fold(None, |acc: Option<f64>, rr| {
        Some(acc.map_or(rr, |m| m.max(rr)))
    });
    let passed = if defined.is_empty() {
        false
    } else if cfg.strict_per_pair {
        defined
            .iter()
            .all(|&rr| cfg.rr_low < rr && rr <= cfg.rr_high)
    } else {
        let max = aggregate_rr.expect("non-empty defined set");
        cfg.rr_low < max && max <= cfg.rr_high
    };
    GateEvaluation {
        pair_rrs,
        aggregate_rr,
        passed,
    }
}

/// Boolean form of [`evaluate_rr_gate`].
pub fn passes_rr_gate<R: RiskRatioSource + ?Sized>(
    stats: &R,
    selected: &[ConceptCode],
    candidate: &ConceptCode,
    cfg: &GenConfig,
) -> bool {
    evaluate_rr_gate(stats, selected, candidate, cfg).passed
}

/// Finds the first selected feature whose RR against `candidate` exceeds
/// `threshold`; undefined pairs never qualify.
pub fn find_rr_witness<R: RiskRatioSource + ?Sized>(
    stats: &R,
    selected: &[ConceptCode],
    candidate: &ConceptCode,
    outcome: &ConceptCode,
    threshold: f64,
) -> Option<(ConceptCode, f64)> {
    for s in selected {
        if let Some(rr) = stats.pairwise_rr(s, candidate, outcome) {
            if rr > threshold {
                return Some((s.clone(), rr));
            }
        }
    }
    None
}

/// Boolean form of [`find_rr_witness`].
pub fn any_rr_exceeds<R: RiskRatioSource + ?Sized>(
    stats: &R,
    selected: &[ConceptCode],
    candidate: &ConceptCode,
    outcome: &ConceptCode,
    threshold: f64,
) -> bool {
    find_rr_witness(stats, selected, candidate, outcome, threshold).is_some()
}

/// Renders the display text for a demographic fact. Age-bin concepts with
/// a `lo-hi` range in their display name render as the integer midpoint
/// (`"Age 30-39"` → `"Age: 34"`); anything unparseable falls back to the
/// raw display name.
pub fn render_demographic(ontology: &Ontology, code: &ConceptCode, is_age: bool) -> String {
    let display = ontology
        .display_name(code)
        .unwrap_or(code.id.as_str())
        .to_string();
    if is_age {
        if let Some((lo, hi)) = parse_age_range(&display) {
            return format!("Age: {}", (lo + hi) / 2);
        }
        return format!("Age: {display}");
    }
    format!("Gender: {display}")
}

fn parse_age_range(display: &str) -> Option<(u32, u32)> {
    let mut numbers = Vec::new();
    let mut current = String::new();
    for ch in display.chars() {
        if ch.is_ascii_digit() {
            current.push(ch);
        } else if !current.is_empty() {
            numbers.push(current.parse::<u32>().ok()?);
            current.clear();
        }
    }
    if !current.is_empty() {
        numbers.push(current.parse::<u32>().ok()?);
    }
    match numbers.as_slice() {
        [lo, hi] if lo <= hi => Some((*lo, *hi)),
        _ => None,
    }
}

/// Generates one profile. The RNG stream is seeded with
/// `cfg.rng_seed + patient_index`, so profiles are independent of each
/// other and reproducible in isolation.
pub fn generate_profile(
    stats: &CohortStats,
    ontology: &Ontology,
    dists: &DemographicDists,
    cfg: &GenConfig,
    predictor: &dyn ResponsePredictor,
    patient_index: usize,
) -> Result<MedicalProfile, ProfileGenError> {
    cfg.validate()?;
    if dists.gender.categories.is_empty() {
        return Err(ProfileGenError::EmptyDistribution("gender"));
    }
    if dists.age.categories.is_empty() {
        return Err(ProfileGenError::EmptyDistribution("age"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(patient_index as u64));

    let mut profile = MedicalProfile {
        id: format!("p{patient_index:05}"),
        outcome: cfg.outcome.clone(),
        demographics: Vec::new(),
        diagnoses: Vec::new(),
        medications: Vec::new(),
        procedures: Vec::new(),
        predicted_response: 0.0,
        provenance: Vec::new(),
    };

    // Stage 2: demographic seeding (gender draw, then age draw).
    let gender = dists.gender.sample(&mut rng).clone();
    let age = dists.age.sample(&mut rng).clone();
    let mut selected: Vec<ConceptCode> = vec![gender.clone(), age.clone()];
    for code in [&gender, &age] {
        profile.provenance.push(GateRecord {
            code: (*code).clone(),
            stage: AdmissionStage::DemographicSeed,
            selected_before: Vec::new(),
            pair_rrs: Vec::new(),
            aggregate_rr: None,
            witness: None,
        });
    }

    // Stage 1 happened outside the loop conceptually: the candidate pool.
    let candidates = stats.rank_top_k_predictors(&cfg.outcome, cfg.top_k);
    let mut pool = candidates.clone();
    pool.shuffle(&mut rng);

    // Stage 3: independence-screened selection.
    for candidate in &pool {
        let eval = evaluate_rr_gate(stats, &selected, candidate, cfg);
        if eval.passed {
            profile.provenance.push(GateRecord {
                code: candidate.clone(),
                stage: AdmissionStage::IndependenceScreen,
                selected_before: selected.clone(),
                pair_rrs: eval.pair_rrs,
                aggregate_rr: eval.aggregate_rr,
                witness: None,
            });
            selected.push(candidate.clone());
        }
    }
    let s_intermediate = selected.clone();

    // Stage 4: controlled diversity expansion over the residual pool.
    let candidate_set: BTreeSet<&ConceptCode> = candidates.iter().collect();
    let mut residual: Vec<ConceptCode> = stats
        .feature_codes()
        .into_iter()
        .filter(|c| !candidate_set.contains(c))
        .collect();
    residual.shuffle(&mut rng);
    let mut admitted_residuals = 0usize;
    for candidate in &residual {
        if admitted_residuals >= cfg.max_residual_additions {
            break;
        }
        if selected.contains(candidate) {
            continue;
        }
        let pair_rrs: Vec<(ConceptCode, Option<f64>)> = s_intermediate
            .iter()
            .map(|s| (s.clone(), stats.pairwise_rr(s, candidate, &cfg.outcome)))
            .collect();
        let witness = pair_rrs
            .iter()
            .filter_map(|(s, rr)| rr.map(|v| (s.clone(), v)))
            .find(|(_, rr)| *rr > cfg.diversity_threshold);
        if let Some(witness) = witness {
            let aggregate_rr = pair_rrs
                .iter()
                .filter_map(|(_, rr)| *rr)
                .fold(None, |acc: Option<f64>, rr| {
                    Some(acc.map_or(rr, |m| m.max(rr)))
                });
            profile.provenance.push(GateRecord {
                code: candidate.clone(),
                stage: AdmissionStage::DiversityExpansion,
                selected_before: s_intermediate.clone(),
                pair_rrs,
                aggregate_rr,
                witness: Some(witness),
            });
            selected.push(candidate.clone());
            admitted_residuals += 1;
        }
    }

    // Assemble sections: age first so Fig-style prompts read "1.1: Age: …".
    profile.push_fact(
        Section::Demographics,
        age.clone(),
        render_demographic(ontology, &age, true),
    );
    profile.push_fact(
        Section::Demographics,
        gender.clone(),
        render_demographic(ontology, &gender, false),
    );
    for code in selected.iter().skip(2) {
        let Some(section) = Section::for_vocabulary(code.vocabulary) else {
            continue;
        };
        let display = ontology
            .display_name(code)
            .unwrap_or(code.id.as_str())
            .to_string();
        profile.push_fact(section, code.clone(), display);
    }

    profile.predicted_response = predictor
        .predict(&selected, &cfg.outcome)
        .map_err(|source| ProfileGenError::PredictorFailure {
            source,
            partial_provenance: profile.provenance.clone(),
        })?;
    Ok(profile)
}

/// Generates `cfg.n_patients` profiles with per-patient seed streams.
pub fn generate_profiles(
    stats: &CohortStats,
    ontology: &Ontology,
    dists: &DemographicDists,
    cfg: &GenConfig,
    predictor: &dyn ResponsePredictor,
) -> Result<Vec<MedicalProfile>, ProfileGenError> {
    (0..cfg.n_patients)
        .map(|i| generate_profile(stats, ontology, dists, cfg, predictor, i))
        .collect()
}

/// Baseline response predictor: starts from the smoothed cohort base rate
/// and accumulates `ln RR(feature → outcome)` per profile feature on the
/// log-odds scale, clipping the result into `[0.01, 0.99]`.
pub struct RrLogOddsPredictor<'a> {
    stats: &'a CohortStats,
}

impl<'a> RrLogOddsPredictor<'a> {
    pub fn new(stats: &'a CohortStats) -> Self {
        RrLogOddsPredictor { stats }
    }
}

impl ResponsePredictor for RrLogOddsPredictor<'_> {
    fn predict(
        &self,
        concepts: &[ConceptCode],
        outcome: &ConceptCode,
    ) -> Result<f64, PortError> {
        let (trials, responders) = self.stats.response_counts(&[], outcome);
        if trials == 0 {
            return Err(PortError::new(
                "predictor",
                format!("outcome {outcome} has no recorded trials"),
            ));
        }
        let base = (responders as f64 + 1.0) / (trials as f64 + 2.0);
        let mut logit = (base / (1.0 - base)).ln();
        for code in concepts {
            if code == outcome {
                continue;
            }
            logit += self.stats.feature_outcome_rr(code, outcome).ln();
        }
        let p = 1.0 / (1.0 + (-logit).exp());
        Ok(p.clamp(0.01, 0.99))
    }
}

/// One sigma band: an inclusive success-count range (possibly empty) and
/// its exact binomial probability mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaBand {
    /// `Some((k_lo, k_hi))` inclusive; `None` when the band is empty for
    /// this `(n, p)`.
    pub range: Option<(u64, u64)>,
    pub target_mass: f64,
}

/// The seven-band allocation for `B(n, p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaBandPlan {
    pub n: u64,
    pub p: f64,
    pub mu: f64,
    pub sigma: f64,
    pub bands: Vec<SigmaBand>,
}

impl SigmaBandPlan {
    /// Index of the band containing success count `k`.
    pub fn band_of(&self, k: u64) -> usize {
        for (i, band) in self.bands.iter().enumerate() {
            if let Some((lo, hi)) = band.range {
                if (lo..=hi).contains(&k) {
                    return i;
                }
            }
        }
        // Non-empty bands tile 0..=n, so this is unreachable for valid k.
        panic!("success count {k} outside 0..={}", self.n);
    }

    /// Band index for a predicted response probability, mapping
    /// `p̂ → round(p̂·n)` clamped to the achievable counts.
    pub fn band_of_probability(&self, p_hat: f64) -> usize {
        let k = (p_hat * self.n as f64).round().clamp(0.0, self.n as f64) as u64;
        self.band_of(k)
    }
}

/// Natural logs of `k!` for `k = 0..=n`.
fn ln_factorials(n: u64) -> Vec<f64> {
    let mut table = Vec::with_capacity(n as usize + 1);
    table.push(0.0);
    let mut acc = 0.0f64;
    for k in 1..=n {
        acc += (k as f64).ln();
        table.push(acc);
    }
    table
}

/// Exact binomial PMF via log-factorials; stable for any `n` the toolkit
/// handles.
pub fn binomial_pmf(n: u64, p: f64, ln_fact: &[f64], k: u64) -> f64 {
    let ln_choose = ln_fact[n as usize] - ln_fact[k as usize] - ln_fact[(n - k) as usize];
    (ln_choose + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
}

/// Builds the seven-band plan: `μ = np`, `σ = √(np(1−p))`, floor-based cut
/// points at `μ ± 1σ, 2σ, 3σ`, and masses from exact PMF summation.
pub fn sigma_band_plan(n: u64, p: f64) -> Result<SigmaBandPlan, ProfileGenError> {
    if n == 0 {
        return Err(ProfileGenError::ZeroTrials);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(ProfileGenError::DegenerateProbability(p));
    }
    let mu = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    let cuts: Vec<i64> = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]
        .iter()
        .map(|t| (mu + t * sigma).floor() as i64)
        .collect();
    let ln_fact = ln_factorials(n);
    let mass_of = |lo: u64, hi: u64| -> f64 {
        (lo..=hi).map(|k| binomial_pmf(n, p, &ln_fact, k)).sum()
    };
    let mut bands = Vec::with_capacity(7);
    let mut prev: i64 = -1;
    for i in 0..7 {
        let hi_raw = if i < 6 { cuts[i] } else { n as i64 };
        let hi = hi_raw.min(n as i64);
        let lo = prev + 1;
        if hi >= lo && lo <= n as i64 && hi >= 0 {
            let lo_u = lo.max(0) as u64;
            let hi_u = hi as u64;
            bands.push(SigmaBand {
                range: Some((lo_u, hi_u)),
                target_mass: mass_of(lo_u, hi_u),
            });
            prev = hi;
        } else {
            bands.push(SigmaBand {
                range: None,
                target_mass: 0.0,
            });
            prev = prev.max(hi);
        }
    }
    Ok(SigmaBandPlan {
        n,
        p,
        mu,
        sigma,
        bands,
    })
}

/// Largest-remainder apportionment of `total` across `weights`.
///
/// Ties in the fractional remainders break by lower index. The result
/// always sums to `total`.
pub fn largest_remainder_quotas(weights: &[f64], total: usize) -> Vec<usize> {
    let weight_sum: f64 = weights.iter().sum();
    if weight_sum <= 0.0 {
        let mut quotas = vec![0; weights.len()];
        if let Some(first) = quotas.first_mut() {
            *first = total;
        }
        return quotas;
    }
    let exact: Vec<f64> = weights
        .iter()
        .map(|w| total as f64 * w / weight_sum)
        .collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        quotas[i] += 1;
    }
    quotas
}

/// Phase-2 cohort selection: assigns each profile to its sigma band via
/// `round(p̂·n)`, computes largest-remainder quotas from band masses, and
/// samples uniformly without replacement within each band. Underfilled
/// bands contribute everything they have and the shortfall is
/// redistributed proportionally to the remaining band masses.
pub fn select_cohort(
    profiles: &[MedicalProfile],
    plan: &SigmaBandPlan,
    m: usize,
    seed: u64,
) -> Result<Vec<MedicalProfile>, ProfileGenError> {
    if m > profiles.len() {
        return Err(ProfileGenError::SelectionTooLarge {
            requested: m,
            available: profiles.len(),
        });
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); plan.bands.len()];
    for (i, profile) in profiles.iter().enumerate() {
        members[plan.band_of_probability(profile.predicted_response)].push(i);
    }
    let masses: Vec<f64> = plan.bands.iter().map(|b| b.target_mass).collect();
    let mut quotas = largest_remainder_quotas(&masses, m);

    // Cap quotas at band population, then redistribute the shortfall over
    // bands with spare members, weighted by their masses.
    for (q, band) in quotas.iter_mut().zip(members.iter()) {
        *q = (*q).min(band.len());
    }
    let mut remaining = m - quotas.iter().sum::<usize>();
    while remaining > 0 {
        let spare: Vec<f64> = quotas
            .iter()
            .zip(members.iter())
            .enumerate()
            .map(|(i, (q, band))| {
                if band.len() > *q {
                    masses[i].max(f64::MIN_POSITIVE)
                } else {
                    0.0
                }
            })
            .collect();
        let extra = largest_remainder_quotas(&spare, remaining);
        let mut distributed = 0usize;
        for (i, add) in extra.iter().enumerate() {
            let capacity = members[i].len() - quotas[i];
            let add = (*add).min(capacity);
            quotas[i] += add;
            distributed += add;
        }
        if distributed == 0 {
            // Mass-blind fallback: fill any remaining capacity in band order.
            for i in 0..quotas.len() {
                while remaining > 0 && members[i].len() > quotas[i] {
                    quotas[i] += 1;
                    remaining -= 1;
                }
            }
            break;
        }
        remaining -= distributed;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(m);
    for (band_members, &quota) in members.iter().zip(quotas.iter()) {
        let chosen = rand::seq::index::sample(&mut rng, band_members.len(), quota);
        let mut indices: Vec<usize> = chosen.iter().map(|j| band_members[j]).collect();
        indices.sort_unstable();
        picked.extend(indices.into_iter().map(|i| profiles[i].clone()));
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn dx(id: &str) -> ConceptCode {
        ConceptCode::new(Vocabulary::Diagnosis, id)
    }

    fn outcome() -> ConceptCode {
        ConceptCode::new(Vocabulary::Outcome, "resp")
    }

    struct RrTable(HashMap<(ConceptCode, ConceptCode), f64>);

    impl RrTable {
        fn new(entries: &[(&str, &str, f64)]) -> Self {
            RrTable(
                entries
                    .iter()
                    .map(|(s, v, rr)| ((dx(s), dx(v)), *rr))
                    .collect(),
            )
        }
    }

    impl RiskRatioSource for RrTable {
        fn pairwise_rr(
            &self,
            s: &ConceptCode,
            v: &ConceptCode,
            _outcome: &ConceptCode,
        ) -> Option<f64> {
            self.0.get(&(s.clone(), v.clone())).copied()
        }
    }

    fn cfg() -> GenConfig {
        GenConfig::new(outcome(), 1)
    }

    #[test]
    fn unity_rr_is_inside_the_band() {
        let table = RrTable::new(&[("a", "c", 1.0), ("b", "c", 1.0)]);
        assert!(passes_rr_gate(&table, &[dx("a"), dx("b")], &dx("c"), &cfg()));
    }

    #[test]
    fn rr_above_high_cap_fails() {
        let table = RrTable::new(&[("a", "c", 8.0), ("b", "c", 1.0)]);
        assert!(!passes_rr_gate(&table, &[dx("a"), dx("b")], &dx("c"), &cfg()));
    }

    #[test]
    fn max_aggregation_masks_a_low_pair() {
        // Pairs {1.2, 0.5}: MAX = 1.2 lies in (1/1.5, 7] even though 0.5
        // alone would fail.
        let table = RrTable::new(&[("a", "c", 1.2), ("b", "c", 0.5)]);
        assert!(passes_rr_gate(&table, &[dx("a"), dx("b")], &dx("c"), &cfg()));
        let mut strict = cfg();
        strict.strict_per_pair = true;
        assert!(!passes_rr_gate(&table, &[dx("a"), dx("b")], &dx("c"), &strict));
    }

    #[test]
    fn all_undefined_pairs_reject() {
        let table = RrTable::new(&[]);
        assert!(!passes_rr_gate(&table, &[dx("a"), dx("b")], &dx("c"), &cfg()));
        assert!(!any_rr_exceeds(
            &table,
            &[dx("a"), dx("b")],
            &dx("c"),
            &outcome(),
            1.5
        ));
    }

    #[test]
    fn witness_requires_strict_excess() {
        let table = RrTable::new(&[("a", "c", 1.0), ("b", "c", 1.6)]);
        assert!(!any_rr_exceeds(&table, &[dx("a")], &dx("c"), &outcome(), 1.5));
        let witness = find_rr_witness(&table, &[dx("a"), dx("b")], &dx("c"), &outcome(), 1.5);
        assert_eq!(witness, Some((dx("b"), 1.6)));
        // Exactly at the threshold does not qualify.
        let at = RrTable::new(&[("a", "c", 1.5)]);
        assert!(!any_rr_exceeds(&at, &[dx("a")], &dx("c"), &outcome(), 1.5));
    }

    #[test]
    fn sigma_plan_matches_paper_example() {
        let plan = sigma_band_plan(100, 0.4).unwrap();
        assert!((plan.mu - 40.0).abs() < 1e-12);
        assert!((plan.sigma - 4.898979485566356).abs() < 1e-9);
        // Central band (μ−1σ, μ+1σ] → counts 36..=44.
        assert_eq!(plan.bands[3].range, Some((36, 44)));
        assert!(
            plan.bands[3].target_mass > 0.63 && plan.bands[3].target_mass < 0.65,
            "central mass = {}",
            plan.bands[3].target_mass
        );
        let total: f64 = plan.bands.iter().map(|b| b.target_mass).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sigma_plan_masses_match_exact_pmf_for_half() {
        // For p = 1/2 the PMF is exactly C(20,k)/2^20, computable in u64.
        let plan = sigma_band_plan(20, 0.5).unwrap();
        let choose = |n: u64, k: u64| -> u64 {
            let mut c = 1u64;
            for i in 0..k {
                c = c * (n - i) / (i + 1);
            }
            c
        };
        for band in &plan.bands {
            let Some((lo, hi)) = band.range else {
                assert_eq!(band.target_mass, 0.0);
                continue;
            };
            let exact: f64 = (lo..=hi)
                .map(|k| choose(20, k) as f64 / (1u64 << 20) as f64)
                .sum();
            assert!(
                (band.target_mass - exact).abs() < 1e-12,
                "band {lo}..={hi}: {} vs {exact}",
                band.target_mass
            );
        }
    }

    #[test]
    fn sigma_plan_bands_tile_the_count_range() {
        for (n, p) in [(1u64, 0.5), (3, 0.1), (10, 0.9), (50, 0.02), (200, 0.5)] {
            let plan = sigma_band_plan(n, p).unwrap();
            let mut expected = 0u64;
            for band in &plan.bands {
                if let Some((lo, hi)) = band.range {
                    assert_eq!(lo, expected, "gap at n={n} p={p}");
                    assert!(hi >= lo);
                    expected = hi + 1;
                }
            }
            assert_eq!(expected, n + 1, "bands must end at n for n={n} p={p}");
            let total: f64 = plan.bands.iter().map(|b| b.target_mass).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_probability_is_an_error() {
        assert!(matches!(
            sigma_band_plan(10, 0.0),
            Err(ProfileGenError::DegenerateProbability(_))
        ));
        assert!(matches!(
            sigma_band_plan(10, 1.0),
            Err(ProfileGenError::DegenerateProbability(_))
        ));
        assert!(matches!(sigma_band_plan(0, 0.5), Err(ProfileGenError::ZeroTrials)));
    }

    #[test]
    fn largest_remainder_sums_to_total_and_breaks_ties_low_index() {
        let quotas = largest_remainder_quotas(&[1.0, 1.0, 1.0], 4);
        assert_eq!(quotas.iter().sum::<usize>(), 4);
        assert_eq!(quotas, vec![2, 1, 1]);
        let q2 = largest_remainder_quotas(&[0.5, 0.3, 0.2], 10);
        assert_eq!(q2, vec![5, 3, 2]);
    }

    fn profile_with_p(id: usize, p: f64) -> MedicalProfile {
        MedicalProfile {
            id: format!("p{id:05}"),
            outcome: outcome(),
            demographics: Vec::new(),
            diagnoses: Vec::new(),
            medications: Vec::new(),
            procedures: Vec::new(),
            predicted_response: p,
            provenance: Vec::new(),
        }
    }

    #[test]
    fn identical_probabilities_collapse_to_one_band() {
        let plan = sigma_band_plan(100, 0.4).unwrap();
        let profiles: Vec<MedicalProfile> = (0..50).map(|i| profile_with_p(i, 0.4)).collect();
        let picked = select_cohort(&profiles, &plan, 10, 7).unwrap();
        assert_eq!(picked.len(), 10);
        let band = plan.band_of_probability(0.4);
        for p in &picked {
            assert_eq!(plan.band_of_probability(p.predicted_response), band);
        }
    }

    #[test]
    fn selecting_everything_is_identity() {
        let plan = sigma_band_plan(100, 0.4).unwrap();
        let profiles: Vec<MedicalProfile> =
            (0..20).map(|i| profile_with_p(i, 0.02 + 0.045 * i as f64)).collect();
        let picked = select_cohort(&profiles, &plan, 20, 3).unwrap();
        assert_eq!(picked.len(), 20);
        let mut got: Vec<&str> = picked.iter().map(|p| p.id.as_str()).collect();
        got.sort_unstable();
        let mut want: Vec<String> = profiles.iter().map(|p| p.id.clone()).collect();
        want.sort_unstable();
        assert_eq!(got, want.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_selection_is_an_error() {
        let plan = sigma_band_plan(10, 0.5).unwrap();
        let profiles = vec![profile_with_p(0, 0.5)];
        assert!(matches!(
            select_cohort(&profiles, &plan, 2, 0),
            Err(ProfileGenError::SelectionTooLarge { .. })
        ));
    }

    #[test]
    fn selection_is_deterministic_under_seed() {
        let plan = sigma_band_plan(100, 0.4).unwrap();
        let profiles: Vec<MedicalProfile> =
            (0..200).map(|i| profile_with_p(i, (i as f64 + 0.5) / 200.0)).collect();
        let a = select_cohort(&profiles, &plan, 40, 99).unwrap();
        let b = select_cohort(&profiles, &plan, 40, 99).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn fact_index_parses_and_displays() {
        let idx: FactIndex = "3.2".parse().unwrap();
        assert_eq!(idx, FactIndex { section: 3, position: 2 });
        assert_eq!(idx.to_string(), "3.2");
        assert!("x.y".parse::<FactIndex>().is_err());
    }

    #[test]
    fn age_bins_render_as_midpoints() {
        assert_eq!(parse_age_range("Age 30-39"), Some((30, 39)));
        assert_eq!(parse_age_range("Age 18-29"), Some((18, 29)));
        assert_eq!(parse_age_range("no digits"), None);
    }

    #[test]
    fn config_validation_catches_bad_bands() {
        let mut c = cfg();
        c.rr_low = 1.2;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.diversity_threshold = 1.0;
        assert!(c.validate().is_err());
    }
}
