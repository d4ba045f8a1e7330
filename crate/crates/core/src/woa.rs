//! Whale Optimization Algorithm and its binary feature-selection variant.
//!
//! The continuous optimizer follows the classic loop: for every whale draw
//! `A = 2a·r1 − a`, `C = 2·r2` and `p`; with `p < 0.5` the whale either
//! encircles the best whale (`|A| < 1`) or moves relative to a random whale
//! (`|A| ≥ 1`); otherwise it follows a logarithmic spiral around the best
//! whale. `a` decays linearly from 2 to 0. All updates are clamped to the
//! search box.
//!
//! The binary variant maps each continuous coordinate through `|tanh x|`
//! and draws a 0/1 mask, scoring masks with a k-nearest-neighbour wrapper.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureMask, Record};
use crate::error::{Error, Result};

/// Iterations without an improvement of at least `convergence_eps` before
/// the search stops early.
pub const STAGNATION_WINDOW: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WoaConfig {
    pub population: usize,
    pub max_iters: usize,
    pub dimension: usize,
    /// Per-dimension `(low, high)`.
    pub bounds: Vec<(f64, f64)>,
    pub convergence_eps: f64,
    pub seed: u64,
    /// Shape constant of the logarithmic spiral.
    pub spiral_b: f64,
}

impl WoaConfig {
    /// Defaults: 50 whales, 200 iterations, `eps = 1e-6`, `b = 1`.
    pub fn new(dimension: usize, low: f64, high: f64) -> Self {
        WoaConfig {
            population: 50,
            max_iters: 200,
            dimension,
            bounds: vec![(low, high); dimension],
            convergence_eps: 1e-6,
            seed: 0,
            spiral_b: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config("WOA population must be at least 2".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::Config("WOA needs at least one iteration".into()));
        }
        if self.dimension == 0 || self.bounds.len() != self.dimension {
            return Err(Error::Config(format!(
                "WOA dimension {} does not match {} bounds",
                self.dimension,
                self.bounds.len()
            )));
        }
        if let Some((lo, hi)) = self.bounds.iter().find(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config(format!("empty search interval [{lo}, {hi}]")));
        }
        if !(self.convergence_eps > 0.0) {
            return Err(Error::Config("convergence_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Whale {
    pub position: Vec<f64>,
    pub fitness: f64,
}

/// Linear decay of the control parameter: `2 − t·(2/T)`.
pub fn a_schedule(t: usize, total: usize) -> f64 {
    2.0 - t as f64 * (2.0 / total as f64)
}

/// Per-whale coefficients `A` and `C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub a: f64,
    pub c: f64,
}

impl Coefficients {
    /// `A = 2a·r1 − a`, `C = 2·r2`.
    pub fn from_uniforms(a: f64, r1: f64, r2: f64) -> Self {
        Coefficients {
            a: 2.0 * a * r1 - a,
            c: 2.0 * r2,
        }
    }

    pub fn draw<R: Rng + ?Sized>(a: f64, rng: &mut R) -> Self {
        let r1 = rng.gen::<f64>();
        let r2 = rng.gen::<f64>();
        Self::from_uniforms(a, r1, r2)
    }
}

fn clamp_into(position: &mut [f64], bounds: &[(f64, f64)]) {
    for (x, &(lo, hi)) in position.iter_mut().zip(bounds) {
        *x = x.clamp(lo, hi);
    }
}

/// `target − A·|C·target − current|`, componentwise, clamped.
fn move_towards(current: &[f64], target: &[f64], coef: Coefficients, bounds: &[(f64, f64)]) -> Vec<f64> {
    let mut next: Vec<f64> = current
        .iter()
        .zip(target)
        .map(|(&x, &t)| t - coef.a * (coef.c * t - x).abs())
        .collect();
    clamp_into(&mut next, bounds);
    next
}

/// Shrinking-encirclement move towards the best whale (`|A| < 1`).
pub fn encircle_update(current: &[f64], best: &[f64], coef: Coefficients, bounds: &[(f64, f64)]) -> Vec<f64> {
    move_towards(current, best, coef, bounds)
}

/// Exploration move relative to a randomly chosen whale (`|A| ≥ 1`).
pub fn explore_update(current: &[f64], random: &[f64], coef: Coefficients, bounds: &[(f64, f64)]) -> Vec<f64> {
    move_towards(current, random, coef, bounds)
}

/// `|best − current|·e^{b·l}·cos(2πl) + best`, clamped.
pub fn spiral_update(current: &[f64], best: &[f64], b: f64, l: f64, bounds: &[(f64, f64)]) -> Vec<f64> {
    let factor = (b * l).exp() * (2.0 * PI * l).cos();
    let mut next: Vec<f64> = current
        .iter()
        .zip(best)
        .map(|(&x, &p)| (p - x).abs() * factor + p)
        .collect();
    clamp_into(&mut next, bounds);
    next
}

#[derive(Debug, Clone, PartialEq)]
pub struct WoaOutcome {
    pub best_position: Vec<f64>,
    pub best_fitness: f64,
    /// Best-so-far fitness after initialization and after every iteration.
    pub history: Vec<f64>,
}

fn check_finite(fitness: &[f64], positions: &[Vec<f64>]) -> Result<()> {
    for (f, p) in fitness.iter().zip(positions) {
        if !f.is_finite() {
            return Err(Error::NonFiniteFitness {
                value: *f,
                position: p.clone(),
            });
        }
    }
    Ok(())
}

/// Runs the WOA loop with a caller-supplied population evaluator.
///
/// `evaluate` receives every whale position of one generation and returns
/// their fitness values in the same order. Positions are updated serially
/// in agent order; all randomness comes from `cfg.seed`.
pub fn optimize_with<E>(cfg: &WoaConfig, mut evaluate: E) -> Result<WoaOutcome>
where
    E: FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut positions: Vec<Vec<f64>> = (0..cfg.population)
        .map(|_| cfg.bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect())
        .collect();

    let mut fitness = evaluate(&positions)?;
    check_finite(&fitness, &positions)?;
    let (mut best_idx, _) = argmin(&fitness);
    let mut best = Whale {
        position: positions[best_idx].clone(),
        fitness: fitness[best_idx],
    };
    let mut history = vec![best.fitness];
    let mut stagnant = 0;

    for t in 1..=cfg.max_iters {
        let a = a_schedule(t, cfg.max_iters);
        for i in 0..cfg.population {
            let coef = Coefficients::draw(a, &mut rng);
            let p = rng.gen::<f64>();
            let next = if p < 0.5 {
                if coef.a.abs() < 1.0 {
                    encircle_update(&positions[i], &best.position, coef, &cfg.bounds)
                } else {
                    let r = rng.gen_range(0..cfg.population);
                    explore_update(&positions[i], &positions[r], coef, &cfg.bounds)
                }
            } else {
                let l = rng.gen_range(-1.0..=1.0);
                spiral_update(&positions[i], &best.position, cfg.spiral_b, l, &cfg.bounds)
            };
            positions[i] = next;
        }

        fitness = evaluate(&positions)?;
        check_finite(&fitness, &positions)?;
        let previous = best.fitness;
        let (idx, value) = argmin(&fitness);
        if value < best.fitness {
            best_idx = idx;
            best = Whale {
                position: positions[best_idx].clone(),
                fitness: value,
            };
        }
        history.push(best.fitness);

        if previous - best.fitness < cfg.convergence_eps {
            stagnant += 1;
            if stagnant >= STAGNATION_WINDOW {
                break;
            }
        } else {
            stagnant = 0;
        }
    }

    Ok(WoaOutcome {
        best_position: best.position,
        best_fitness: best.fitness,
        history,
    })
}

/// Minimizes `f` over the box in `cfg`. Population fitness values are
/// computed in parallel; results do not depend on thread count.
pub fn optimize<F>(f: F, cfg: &WoaConfig) -> Result<WoaOutcome>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    optimize_with(cfg, |positions| Ok(positions.par_iter().map(|p| f(p)).collect()))
}

/// First index of the minimum.
fn argmin(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc })
}

// ---------------------------------------------------------------------------
// Binary variant
// ---------------------------------------------------------------------------

/// V-shaped transfer `|tanh x|`, in `[0, 1)`.
pub fn transfer_tanh(x: f64) -> f64 {
    x.tanh().abs()
}

/// Bit is 0 when `rand < |tanh x|`, 1 otherwise. An all-zero draw gets one
/// random bit set.
pub fn binarize<R: Rng + ?Sized>(position: &[f64], rng: &mut R) -> Result<FeatureMask> {
    let bits = position
        .iter()
        .map(|&x| rng.gen::<f64>() >= transfer_tanh(x))
        .collect();
    FeatureMask::new(bits, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryWoaConfig {
    pub woa: WoaConfig,
    /// Weight on the wrapper error rate.
    pub lambda_weight: f64,
    /// Weight on the selected fraction `|R|/|C|`.
    pub beta_weight: f64,
    pub surrogate_k: usize,
    pub validation_fraction: f64,
}

/// Half-width of the continuous box the binary variant searches in.
pub const BINARY_POSITION_LIMIT: f64 = 4.0;

impl BinaryWoaConfig {
    /// `λ = 0.99`, `β = 0.01`, 5-NN on a 20% validation split, positions in `[−4, 4]^C`.
    pub fn new(num_features: usize, seed: u64) -> Self {
        let mut woa = WoaConfig::new(num_features, -BINARY_POSITION_LIMIT, BINARY_POSITION_LIMIT);
        woa.seed = seed;
        BinaryWoaConfig {
            woa,
            lambda_weight: 0.99,
            beta_weight: 0.01,
            surrogate_k: 5,
            validation_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.woa.validate()?;
        if self.lambda_weight < 0.0 || self.beta_weight < 0.0 {
            return Err(Error::Config("fitness weights must be non-negative".into()));
        }
        if (self.lambda_weight + self.beta_weight - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "fitness weights must sum to 1, got {} + {}",
                self.lambda_weight, self.beta_weight
            )));
        }
        if self.surrogate_k == 0 {
            return Err(Error::Config("surrogate_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// `λ·error + β·selected/total`.
pub fn weighted_fitness(error_rate: f64, selected: usize, total: usize, lambda: f64, beta: f64) -> f64 {
    lambda * error_rate + beta * selected as f64 / total as f64
}

/// Majority vote of the `k` nearest rows; vote ties go to the class whose
/// member appears first in distance order.
pub(crate) fn knn_predict(train: &[Record], query: &[f64], columns: &[usize], k: usize, n_classes: usize) -> usize {
    let mut dist: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let d: f64 = columns
                .iter()
                .map(|&c| {
                    let diff = r.features[c] - query[c];
                    diff * diff
                })
                .sum();
            (d, i)
        })
        .collect();
    let k = k.min(dist.len());
    let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, by_distance);
        dist.truncate(k);
    }
    dist.sort_unstable_by(by_distance);
    let mut votes = vec![0usize; n_classes];
    for &(_, i) in &dist {
        votes[train[i].label] += 1;
    }
    let top = votes.iter().copied().max().unwrap_or(0);
    dist.iter()
        .map(|&(_, i)| train[i].label)
        .find(|&c| votes[c] == top)
        .unwrap_or(0)
}

/// Wrapper fitness over a fixed train/validation split.
#[derive(Debug, Clone)]
pub struct SubsetEvaluator {
    train: Vec<Record>,
    validation: Vec<Record>,
    n_features: usize,
    n_classes: usize,
    k: usize,
    lambda: f64,
    beta: f64,
}

impl SubsetEvaluator {
    pub fn new(d: &Dataset, cfg: &BinaryWoaConfig, split_seed: u64) -> Result<Self> {
        let (train_idx, val_idx) = d.stratified_split_indices(cfg.validation_fraction, split_seed)?;
        if val_idx.is_empty() || train_idx.is_empty() {
            return Err(Error::Dataset("validation split is empty".into()));
        }
        Ok(SubsetEvaluator {
            train: train_idx.iter().map(|&i| d.rows[i].clone()).collect(),
            validation: val_idx.iter().map(|&i| d.rows[i].clone()).collect(),
            n_features: d.num_features(),
            n_classes: d.schema.num_classes(),
            k: cfg.surrogate_k,
            lambda: cfg.lambda_weight,
            beta: cfg.beta_weight,
        })
    }

    /// Misclassification rate of the k-NN surrogate on the validation rows.
    pub fn error_rate(&self, mask: &FeatureMask) -> f64 {
        let columns = mask.selected();
        let wrong = self
            .validation
            .iter()
            .filter(|r| knn_predict(&self.train, &r.features, &columns, self.k, self.n_classes) != r.label)
            .count();
        wrong as f64 / self.validation.len() as f64
    }

    pub fn fitness(&self, mask: &FeatureMask) -> Result<f64> {
        if mask.len() != self.n_features {
            return Err(Error::Shape(format!(
                "mask length {} does not match feature count {}",
                mask.len(),
                self.n_features
            )));
        }
        Ok(weighted_fitness(
            self.error_rate(mask),
            mask.count(),
            self.n_features,
            self.lambda,
            self.beta,
        ))
    }
}

/// Scores one mask: draws a validation split from `rng`, then
/// `λ·E_R + β·|R|/C` with `E_R` the k-NN validation error.
pub fn subset_fitness<R: Rng + ?Sized>(d: &Dataset, mask: &FeatureMask, cfg: &BinaryWoaConfig, rng: &mut R) -> Result<f64> {
    cfg.validate()?;
    SubsetEvaluator::new(d, cfg, rng.gen())?.fitness(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub mask: FeatureMask,
    pub fitness: f64,
    pub history: Vec<f64>,
}

/// Binary WOA feature selection over a normalized dataset.
///
/// Each generation, every continuous whale is binarized into a mask and the
/// masks are scored by a [`SubsetEvaluator`] built once from the seed.
/// Identical masks are scored once.
pub fn select_features(d: &Dataset, cfg: &BinaryWoaConfig) -> Result<FeatureSelection> {
    let c = d.num_features();
    let mut cfg = cfg.clone();
    if cfg.woa.dimension != c {
        cfg.woa.dimension = c;
        cfg.woa.bounds = vec![(-BINARY_POSITION_LIMIT, BINARY_POSITION_LIMIT); c];
    }
    cfg.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.woa.seed ^ 0x9e37_79b9_7f4a_7c15);
    let evaluator = SubsetEvaluator::new(d, &cfg, rng.gen())?;
    let mut cache: HashMap<FeatureMask, f64> = HashMap::new();
    let mut best: Option<(FeatureMask, f64)> = None;

    let outcome = optimize_with(&cfg.woa, |positions| {
        let masks = positions
            .iter()
            .map(|p| binarize(p, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut pending: Vec<&FeatureMask> = masks.iter().filter(|m| !cache.contains_key(*m)).collect();
        pending.sort_by(|a, b| a.bits().cmp(b.bits()));
        pending.dedup();
        let scored = pending
            .par_iter()
            .map(|m| evaluator.fitness(m).map(|f| ((*m).clone(), f)))
            .collect::<Result<Vec<_>>>()?;
        cache.extend(scored);
        let fitness: Vec<f64> = masks.iter().map(|m| cache[m]).collect();
        for (m, &f) in masks.iter().zip(&fitness) {
            if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
                best = Some((m.clone(), f));
            }
        }
        Ok(fitness)
    })?;

    let (mask, fitness) = best.expect("at least one generation is evaluated");
    debug_assert_eq!(fitness, outcome.best_fitness);
    Ok(FeatureSelection {
        mask,
        fitness,
        history: outcome.history,
    })
}
