//! Store of known traffic patterns used for the fast recognition check.
//!
//! Patterns are normalized feature vectors in `[0, 1]^C`. Distance is the
//! Euclidean norm divided by `√C`, so it also lies in `[0, 1]`. A query is
//! recognized when its nearest pattern is within `θ`; otherwise the `k`
//! nearest are returned. Equal distances are ordered by pattern id.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THETA: f64 = 0.05;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityLevel {
    Safe,
    Low,
    Medium,
    High,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternSource {
    Seeded,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
    pub security_level: SecurityLevel,
    pub source: PatternSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub pattern_id: u64,
    pub label: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MatchResult {
    Recognized {
        pattern_id: u64,
        label: usize,
        security_level: SecurityLevel,
        distance: f64,
    },
    Unrecognized {
        nearest: Vec<Neighbor>,
    },
}

/// Security level assigned to a newly learned attack pattern.
pub trait SeverityRule {
    fn level(&self, label: usize) -> SecurityLevel;
}

/// Every attack class maps to [`SecurityLevel::High`].
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformHigh;

impl SeverityRule for UniformHigh {
    fn level(&self, _label: usize) -> SecurityLevel {
        SecurityLevel::High
    }
}

/// Dimension-normalized Euclidean distance.
pub fn normalized_distance(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / a.len() as f64).sqrt()
}

fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.pattern_id.cmp(&b.pattern_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternStore {
    dimension: usize,
    benign_class: usize,
    patterns: Vec<Pattern>,
    next_id: u64,
    /// Serialized classifier this store was built alongside. Not executed.
    pub model_path: Option<PathBuf>,
}

impl PatternStore {
    pub fn new(dimension: usize, benign_class: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Pattern("pattern dimension must be positive".into()));
        }
        Ok(PatternStore {
            dimension,
            benign_class,
            patterns: Vec::new(),
            next_id: 0,
            model_path: None,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn benign_class(&self) -> usize {
        self.benign_class
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    fn check_vector(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.dimension {
            return Err(Error::Shape(format!(
                "pattern has {} features, store expects {}",
                features.len(),
                self.dimension
            )));
        }
        if let Some((index, &value)) = features.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::FeatureOutOfRange { index, value });
        }
        Ok(())
    }

    /// Adds a pattern under the next free id. Benign patterns are always
    /// stored as [`SecurityLevel::Safe`] and attacks never are.
    pub fn insert(&mut self, features: Vec<f64>, label: usize, security_level: SecurityLevel, source: PatternSource) -> Result<u64> {
        self.check_vector(&features)?;
        if (label == self.benign_class) != (security_level == SecurityLevel::Safe) {
            return Err(Error::Pattern(format!(
                "security level {security_level:?} inconsistent with label {label}"
            )));
        }
        let id = self.next_id;
        self.patterns.push(Pattern {
            id,
            features,
            label,
            security_level,
            source,
        });
        self.next_id += 1;
        Ok(id)
    }

    /// Stores a classifier-detected attack as a learned pattern.
    pub fn record_attack(&mut self, features: &[f64], predicted_label: usize, rule: &dyn SeverityRule) -> Result<&Pattern> {
        if predicted_label == self.benign_class {
            return Err(Error::Pattern("cannot record a benign prediction as an attack".into()));
        }
        let level = rule.level(predicted_label);
        if level == SecurityLevel::Safe {
            return Err(Error::Pattern("severity rule mapped an attack to safe".into()));
        }
        self.insert(features.to_vec(), predicted_label, level, PatternSource::Learned)?;
        Ok(self.patterns.last().expect("just inserted"))
    }

    /// Linear scan. Recognized iff the nearest distance is at most `theta`.
    pub fn match_query(&self, query: &[f64], theta: f64, k: usize) -> Result<MatchResult> {
        if query.len() != self.dimension {
            return Err(Error::Shape(format!(
                "query has {} features, store expects {}",
                query.len(),
                self.dimension
            )));
        }
        if !(theta > 0.0) || k == 0 {
            return Err(Error::Config(format!("match needs θ > 0 and k ≥ 1, got θ={theta}, k={k}")));
        }
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        for p in &self.patterns {
            let cand = Neighbor {
                pattern_id: p.id,
                label: p.label,
                distance: normalized_distance(query, &p.features),
            };
            if best.len() == k && neighbor_order(&cand, &best[k - 1]) != Ordering::Less {
                continue;
            }
            let pos = best.partition_point(|n| neighbor_order(n, &cand) == Ordering::Less);
            best.insert(pos, cand);
            best.truncate(k);
        }
        match best.first() {
            Some(n) if n.distance <= theta => {
                let p = self
                    .patterns
                    .iter()
                    .find(|p| p.id == n.pattern_id)
                    .expect("neighbor comes from the store");
                Ok(MatchResult::Recognized {
                    pattern_id: p.id,
                    label: p.label,
                    security_level: p.security_level,
                    distance: n.distance,
                })
            }
            _ => Ok(MatchResult::Unrecognized { nearest: best }),
        }
    }

    /// One JSON line of store metadata followed by one line per pattern.
    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        let header = StoreHeader {
            dimension: self.dimension,
            benign_class: self.benign_class,
            model_path: self.model_path.clone(),
        };
        serde_json::to_writer(&mut writer, &header)?;
        writer.write_all(b"\n").map_err(|e| Error::io("<patterns>", e))?;
        for p in &self.patterns {
            serde_json::to_writer(&mut writer, p)?;
            writer.write_all(b"\n").map_err(|e| Error::io("<patterns>", e))?;
        }
        Ok(())
    }

    /// Rebuilds a store, keeping stored ids. Ids must be strictly increasing.
    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines().enumerate().filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
        let (_, first) = lines.next().ok_or_else(|| Error::Decode("empty pattern file".into()))?;
        let first = first.map_err(|e| Error::io("<patterns>", e))?;
        let header: StoreHeader = serde_json::from_str(&first).map_err(|e| Error::Decode(format!("pattern header: {e}")))?;
        let mut store = PatternStore::new(header.dimension, header.benign_class)?;
        store.model_path = header.model_path;
        for (n, line) in lines {
            let line = line.map_err(|e| Error::io("<patterns>", e))?;
            let p: Pattern = serde_json::from_str(&line).map_err(|e| Error::Decode(format!("pattern line {}: {e}", n + 1)))?;
            if p.id < store.next_id {
                return Err(Error::Decode(format!("pattern line {}: id {} out of order", n + 1, p.id)));
            }
            store.next_id = p.id;
            store.insert(p.features, p.label, p.security_level, p.source)?;
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(file)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    dimension: usize,
    benign_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_path: Option<PathBuf>,
}
