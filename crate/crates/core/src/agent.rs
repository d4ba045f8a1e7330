//! The request pipeline: authenticate, check known patterns, classify,
//! record.
//!
//! Every handled request appends exactly one ledger block. Requests that
//! fail authentication never reach the classifier. Attacks found by the
//! classifier are stored as learned patterns so an identical resubmission
//! is stopped at the pattern check.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilstm::{argmax, BiLstmModel};
use crate::canonical::{decode_features, encode_features};
use crate::data::{Dataset, FeatureMask, Normalizer};
use crate::error::{Error, Result};
use crate::ledger::{
    sign_request, verify_request, ChainStatus, Clock, DeviceRegistry, Ledger, LogicalClock, NonceSet, RequestVerdict,
    SignedRequest, VerdictCode,
};
use crate::metrics::{confusion, detection_rate, false_alarm_rate, ConfusionCounts};
use crate::patterns::{MatchResult, PatternStore, SeverityRule, UniformHigh, DEFAULT_K, DEFAULT_THETA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub theta: f64,
    pub k: usize,
    /// Accept recognized benign patterns without running the classifier.
    pub fast_path_enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry_path: Option<PathBuf>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            theta: DEFAULT_THETA,
            k: DEFAULT_K,
            fast_path_enabled: true,
            model_path: None,
            mask_path: None,
            registry_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Phase1Auth,
    Phase2Pattern,
    Phase3Classifier,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Phase1Auth => "phase1_auth",
            Stage::Phase2Pattern => "phase2_pattern",
            Stage::Phase3Classifier => "phase3_classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub request_id: u64,
    pub outcome: Outcome,
    pub stage: Stage,
    pub verdict: VerdictCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_pattern: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    pub block_index: u64,
}

impl Decision {
    pub fn reason(&self) -> &'static str {
        self.verdict.reason()
    }
}

pub struct Agent {
    config: AgentConfig,
    registry: DeviceRegistry,
    seen: NonceSet,
    store: PatternStore,
    model: BiLstmModel,
    mask: FeatureMask,
    ledger: Ledger,
    clock: Box<dyn Clock + Send>,
    severity: Box<dyn SeverityRule + Send + Sync>,
    next_request: u64,
    classifier_calls: u64,
}

impl Agent {
    /// The pattern store's dimension must equal the mask length and the
    /// model must take exactly the masked features.
    pub fn new(
        config: AgentConfig,
        registry: DeviceRegistry,
        model: BiLstmModel,
        mask: FeatureMask,
        store: PatternStore,
        ledger: Ledger,
        clock: Box<dyn Clock + Send>,
    ) -> Result<Self> {
        if !(config.theta > 0.0) || config.k == 0 {
            return Err(Error::Config(format!(
                "agent needs θ > 0 and k ≥ 1, got θ={}, k={}",
                config.theta, config.k
            )));
        }
        if store.dimension() != mask.len() {
            return Err(Error::Shape(format!(
                "pattern store has dimension {}, mask covers {} features",
                store.dimension(),
                mask.len()
            )));
        }
        if model.layout.input_width != mask.count() {
            return Err(Error::Shape(format!(
                "model expects {} features, mask selects {}",
                model.layout.input_width,
                mask.count()
            )));
        }
        if store.benign_class() >= model.num_classes {
            return Err(Error::Shape(format!(
                "benign class {} out of range for a {}-class model",
                store.benign_class(),
                model.num_classes
            )));
        }
        if !ledger.verify_chain().is_ok() {
            return Err(Error::ChainInvalid("ledger does not verify at startup".into()));
        }
        Ok(Agent {
            config,
            registry,
            seen: NonceSet::new(),
            store,
            model,
            mask,
            ledger,
            clock,
            severity: Box::new(UniformHigh),
            next_request: 0,
            classifier_calls: 0,
        })
    }

    pub fn with_severity_rule(mut self, rule: Box<dyn SeverityRule + Send + Sync>) -> Self {
        self.severity = rule;
        self
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn store(&self) -> &PatternStore {
        &self.store
    }

    pub fn registry(&self) -> &DeviceRegistry {
        &self.registry
    }

    pub fn benign_class(&self) -> usize {
        self.store.benign_class()
    }

    /// Number of classifier forward passes so far.
    pub fn classifier_calls(&self) -> u64 {
        self.classifier_calls
    }

    /// Runs one request through the pipeline. Errors only when the ledger
    /// refuses the append; the agent state is then unchanged.
    pub fn handle_request(&mut self, req: &SignedRequest) -> Result<Decision> {
        let request_id = self.next_request;
        let mut decision = Decision {
            request_id,
            outcome: Outcome::Rejected,
            stage: Stage::Phase1Auth,
            verdict: VerdictCode::MALFORMED,
            matched_pattern: None,
            predicted_label: None,
            probabilities: None,
            block_index: 0,
        };

        let auth = verify_request(&self.registry, req, &self.seen);
        if auth != RequestVerdict::Valid {
            decision.verdict = auth.into();
            return self.commit(req, decision, None);
        }
        let nonce = (req.device_id.clone(), req.nonce);
        let Some(features) = self.decode_payload(&req.payload) else {
            return self.commit(req, decision, Some(nonce));
        };

        let benign = self.store.benign_class();
        match self.store.match_query(&features, self.config.theta, self.config.k)? {
            MatchResult::Recognized { pattern_id, label, .. } if label != benign => {
                decision.stage = Stage::Phase2Pattern;
                decision.verdict = VerdictCode::KNOWN_ATTACK;
                decision.matched_pattern = Some(pattern_id);
                return self.commit(req, decision, Some(nonce));
            }
            MatchResult::Recognized { pattern_id, .. } => {
                decision.matched_pattern = Some(pattern_id);
                if self.config.fast_path_enabled {
                    decision.outcome = Outcome::Accepted;
                    decision.stage = Stage::Phase2Pattern;
                    decision.verdict = VerdictCode::ACCEPTED_PATTERN;
                    return self.commit(req, decision, Some(nonce));
                }
            }
            MatchResult::Unrecognized { .. } => {}
        }

        self.classifier_calls += 1;
        let probs = self.model.probabilities(&self.mask.project(&features))?;
        let predicted = argmax(&probs);
        decision.stage = Stage::Phase3Classifier;
        decision.predicted_label = Some(predicted);
        decision.probabilities = Some(probs);
        if predicted == benign {
            decision.outcome = Outcome::Accepted;
            decision.verdict = VerdictCode::ACCEPTED_CLASSIFIER;
            return self.commit(req, decision, Some(nonce));
        }
        decision.verdict = VerdictCode::CLASSIFIED_ATTACK;
        let decision = self.commit(req, decision, Some(nonce))?;
        self.store.record_attack(&features, predicted, self.severity.as_ref())?;
        Ok(decision)
    }

    /// Feature vector of the right width with finite entries, clamped into
    /// `[0, 1]`.
    fn decode_payload(&self, payload: &[u8]) -> Option<Vec<f64>> {
        let features = decode_features(payload).ok()?;
        if features.len() != self.store.dimension() || features.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(features.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    fn commit(&mut self, req: &SignedRequest, mut decision: Decision, nonce: Option<(String, [u8; 16])>) -> Result<Decision> {
        let block = self.ledger.append_block(req, decision.verdict, self.clock.as_mut())?;
        decision.block_index = block.index;
        if let Some(n) = nonce {
            self.seen.insert(n);
        }
        self.next_request += 1;
        Ok(decision)
    }
}

// ---------------------------------------------------------------------------
// Streams
// ---------------------------------------------------------------------------

/// A signed request together with the class it really belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRequest {
    pub request: SignedRequest,
    pub label: usize,
}

/// Draws `round(n·ap)` attack rows and the rest benign rows from `pool`
/// (without replacement while the pool lasts), shuffles them, scales each
/// with `normalizer` and signs it from a device chosen round-robin.
pub fn generate_stream(
    pool: &Dataset,
    normalizer: &Normalizer,
    benign_class: usize,
    registry: &DeviceRegistry,
    n: usize,
    attack_percentage: f64,
    seed: u64,
) -> Result<Vec<LabeledRequest>> {
    check_attack_percentage(attack_percentage)?;
    let devices: Vec<&str> = registry.devices().collect();
    if devices.is_empty() {
        return Err(Error::Config("no enrolled devices to send requests".into()));
    }
    let (attacks, benign): (Vec<usize>, Vec<usize>) = (0..pool.len()).partition(|&i| pool.rows[i].label != benign_class);
    let n_attack = (n as f64 * attack_percentage).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = draw(&attacks, n_attack, &mut rng, "attack")?;
    picks.extend(draw(&benign, n - n_attack, &mut rng, "benign")?);
    picks.shuffle(&mut rng);

    let mut clock = LogicalClock::default();
    picks
        .iter()
        .enumerate()
        .map(|(i, &row)| {
            let r = &pool.rows[row];
            let payload = encode_features(&normalizer.scale_clamped(&r.features));
            let request = sign_request(registry, devices[i % devices.len()], &payload, &mut rng, &mut clock)?;
            Ok(LabeledRequest { request, label: r.label })
        })
        .collect()
}

fn draw<R: Rng>(from: &[usize], count: usize, rng: &mut R, what: &str) -> Result<Vec<usize>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if from.is_empty() {
        return Err(Error::Dataset(format!("stream needs {what} rows but the pool has none")));
    }
    if count <= from.len() {
        return Ok(from.choose_multiple(rng, count).copied().collect());
    }
    Ok((0..count).map(|_| from[rng.gen_range(0..from.len())]).collect())
}

fn check_attack_percentage(ap: f64) -> Result<()> {
    if !(ap > 0.0 && ap < 1.0) {
        return Err(Error::Config(format!("attack percentage must lie in (0, 1), got {ap}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub accepted: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub attack_percentage: f64,
    pub n_requests: u64,
    /// Attack = positive; a rejection counts as an attack prediction.
    pub counts: ConfusionCounts,
    pub dr: f64,
    pub far: f64,
    pub per_stage_counts: BTreeMap<String, OutcomeCounts>,
    pub ledger_blocks: u64,
    pub chain: ChainStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger_path: Option<PathBuf>,
}

/// One decision with the ground truth it was scored against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub label: usize,
    pub device_id: String,
    pub decision: Decision,
}

/// Rejected ⇒ predicted attack (1), accepted ⇒ benign (0).
pub fn binary_outcomes(records: &[DecisionRecord], benign_class: usize) -> (Vec<usize>, Vec<usize>) {
    records
        .iter()
        .map(|r| {
            (
                usize::from(r.label != benign_class),
                usize::from(r.decision.outcome == Outcome::Rejected),
            )
        })
        .unzip()
}

/// Handles every request in order and scores detection against the labels.
pub fn replay_stream(agent: &mut Agent, stream: &[LabeledRequest], attack_percentage: f64) -> Result<(StreamReport, Vec<DecisionRecord>)> {
    check_attack_percentage(attack_percentage)?;
    if stream.is_empty() {
        return Err(Error::Dataset("empty request stream".into()));
    }
    let mut records = Vec::with_capacity(stream.len());
    let mut per_stage: BTreeMap<String, OutcomeCounts> = BTreeMap::new();
    for lr in stream {
        let decision = agent.handle_request(&lr.request)?;
        let entry = per_stage.entry(decision.stage.name().to_string()).or_default();
        match decision.outcome {
            Outcome::Accepted => entry.accepted += 1,
            Outcome::Rejected => entry.rejected += 1,
        }
        records.push(DecisionRecord {
            label: lr.label,
            device_id: lr.request.device_id.clone(),
            decision,
        });
    }
    let (y_true, y_pred) = binary_outcomes(&records, agent.benign_class());
    let counts = confusion(&y_true, &y_pred, 1)?;
    let report = StreamReport {
        attack_percentage,
        n_requests: records.len() as u64,
        counts,
        dr: detection_rate(&counts).value,
        far: false_alarm_rate(&counts).value,
        per_stage_counts: per_stage,
        ledger_blocks: agent.ledger().len() as u64,
        chain: agent.ledger().verify_chain(),
        ledger_path: None,
    };
    Ok((report, records))
}

pub const DECISION_CSV_HEADER: [&str; 10] = [
    "request_id",
    "device_id",
    "label",
    "outcome",
    "stage",
    "reason",
    "verdict_code",
    "predicted_label",
    "probabilities",
    "block_index",
];

/// One row per decision; probabilities are `;`-separated.
pub fn write_decisions_csv<W: Write>(records: &[DecisionRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DECISION_CSV_HEADER)?;
    for r in records {
        let d = &r.decision;
        let outcome = match d.outcome {
            Outcome::Accepted => "accepted",
            Outcome::Rejected => "rejected",
        };
        let probs = d
            .probabilities
            .as_ref()
            .map(|p| p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"))
            .unwrap_or_default();
        w.write_record([
            d.request_id.to_string(),
            r.device_id.clone(),
            r.label.to_string(),
            outcome.to_string(),
            d.stage.name().to_string(),
            d.reason().to_string(),
            d.verdict.0.to_string(),
            d.predicted_label.map(|l| l.to_string()).unwrap_or_default(),
            probs,
            d.block_index.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<decisions>", e))?;
    Ok(())
}
