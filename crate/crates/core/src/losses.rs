//! Instance-discrimination cross-entropy against the memory bank and the
//! consistency penalties between the K augmented views of an instance.
//!
//! Each loss exists twice: a plain evaluation over slices (used for
//! diagnostics and as an independent reference) and a recording on the tape
//! (used for training).

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::membank::{GroupTable, MemoryBank};
use crate::numkernel::{Graph, KernelError, NodeId, Tensor};
use crate::real::{dot, norm, Real};

const PROB_CLAMP: f64 = 1e-12;
const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("feature row {row} has norm {norm}, expected 1")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("expected {expected} feature rows of dimension {dim}, got {got} values")]
    FeatureShape { expected: usize, dim: usize, got: usize },
    #[error("instance {0} out of range")]
    Instance(usize),
    #[error("unknown consistency mode `{0}`")]
    UnknownMode(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyMode {
    None,
    Kl,
    L2,
}

impl FromStr for ConsistencyMode {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "kl" => Ok(Self::Kl),
            "l2" => Ok(Self::L2),
            other => Err(LossError::UnknownMode(other.to_string())),
        }
    }
}

/// How the per-instance consistency sum is scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyReduction {
    /// Plain sum over pairs and elements.
    #[default]
    Sum,
    /// Sum over pairs, mean over elements: divides KL by the bank size
    /// and ℓ2 by the feature dimension.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub beta: f64,
    pub mode: ConsistencyMode,
    pub reduction: ConsistencyReduction,
}

impl LossConfig {
    pub fn new(temperature: f64, beta: f64, mode: ConsistencyMode) -> Self {
        Self {
            temperature,
            beta,
            mode,
            reduction: ConsistencyReduction::Sum,
        }
    }

    /// Factor applied to a per-instance consistency sum.
    pub fn element_scale(&self, bank_len: usize, dim: usize) -> f64 {
        match (self.reduction, self.mode) {
            (ConsistencyReduction::Sum, _) | (_, ConsistencyMode::None) => 1.0,
            (ConsistencyReduction::Mean, ConsistencyMode::Kl) => 1.0 / bank_len as f64,
            (ConsistencyReduction::Mean, ConsistencyMode::L2) => 1.0 / dim as f64,
        }
    }
}

/// Softmax over all bank slots of `f̂_jᵀ f / τ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbRow(pub Vec<f64>);

impl ProbRow {
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub ce: f64,
    pub cons: f64,
    pub beta: f64,
    pub total: f64,
    /// Mean of `f̂_rootᵀ f / τ` over all augmented rows.
    pub mean_positive_logit: f64,
    /// Mean entropy (nats) of the per-row slot distributions.
    pub mean_entropy: f64,
}

fn check_temperature(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::Temperature(tau))
    }
}

/// `P(j | f)` for every slot `j`, max-subtracted.
pub fn instance_probs<T: Real>(f: &[T], bank: &MemoryBank<T>, tau: f64) -> Result<ProbRow, LossError> {
    check_temperature(tau)?;
    if f.len() != bank.dim() {
        return Err(LossError::FeatureShape {
            expected: 1,
            dim: bank.dim(),
            got: f.len(),
        });
    }
    let len = norm(f).as_f64();
    if (len - 1.0).abs() > UNIT_TOLERANCE {
        return Err(LossError::NotUnitNorm { row: 0, norm: len });
    }
    let logits: Vec<f64> = (0..bank.n()).map(|j| dot(bank.row(j), f).as_f64() / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbRow(exps.into_iter().map(|e| e / total).collect()))
}

fn check_batch<T: Real>(feats: &[T], instances: &[usize], k: usize, bank: &MemoryBank<T>) -> Result<(), LossError> {
    if instances.is_empty() || k == 0 {
        return Err(LossError::EmptyBatch);
    }
    let expected = instances.len() * k;
    if feats.len() != expected * bank.dim() {
        return Err(LossError::FeatureShape {
            expected,
            dim: bank.dim(),
            got: feats.len(),
        });
    }
    if let Some(&bad) = instances.iter().find(|&&i| i >= bank.n()) {
        return Err(LossError::Instance(bad));
    }
    Ok(())
}

/// Mean over the `|B|·K` rows of `−log P(root(i) | x_i^(k))`.
///
/// `feats` is instance-major: row `b·K + k` is view `k` of `instances[b]`.
pub fn batch_ce<T: Real>(
    feats: &[T],
    instances: &[usize],
    k: usize,
    groups: &GroupTable,
    bank: &MemoryBank<T>,
    tau: f64,
) -> Result<f64, LossError> {
    check_temperature(tau)?;
    check_batch(feats, instances, k, bank)?;
    let dim = bank.dim();
    let mut total = 0.0;
    for (row, f) in feats.chunks(dim).enumerate() {
        let target = groups.root(instances[row / k]);
        let probs = instance_probs(f, bank, tau).map_err(|e| match e {
            LossError::NotUnitNorm { norm, .. } => LossError::NotUnitNorm { row, norm },
            other => other,
        })?;
        total -= probs.0[target].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / (instances.len() * k) as f64)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_CLAMP).ln() - qi.max(PROB_CLAMP).ln()))
        .sum()
}

/// `Σ_k Σ_{j≠k} KL(P⁽ᵏ⁾ ‖ P⁽ʲ⁾)` over the views of one instance.
pub fn kl_consistency(rows: &[ProbRow]) -> f64 {
    let mut total = 0.0;
    for (a, p) in rows.iter().enumerate() {
        for (b, q) in rows.iter().enumerate() {
            if a != b {
                total += kl(&p.0, &q.0);
            }
        }
    }
    total
}

/// `Σ_{k<j} ‖f⁽ᵏ⁾ − f⁽ʲ⁾‖²` over `K` concatenated rows of length `dim`.
pub fn l2_consistency<T: Real>(feats: &[T], dim: usize) -> f64 {
    let rows: Vec<&[T]> = feats.chunks(dim).collect();
    let mut total = 0.0;
    for a in 0..rows.len() {
        for b in (a + 1)..rows.len() {
            total += rows[a]
                .iter()
                .zip(rows[b])
                .map(|(&x, &y)| (x - y).as_f64().powi(2))
                .sum::<f64>();
        }
    }
    total
}

/// Nodes recorded by [`record_total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub ce: NodeId,
    pub cons: Option<NodeId>,
    pub log_probs: NodeId,
}

/// Records `ce + β·cons` on `g` for instance-major features `[|B|·K, d]`.
///
/// The bank enters as a constant, so gradients flow only into `feats`.
pub fn record_total_loss<T: Real>(
    g: &mut Graph<T>,
    feats: NodeId,
    instances: &[usize],
    k: usize,
    groups: &GroupTable,
    bank: &MemoryBank<T>,
    cfg: &LossConfig,
) -> Result<LossNodes, LossError> {
    check_temperature(cfg.temperature)?;
    check_batch(g.value(feats).data(), instances, k, bank)?;
    let targets: Vec<usize> = instances
        .iter()
        .flat_map(|&i| std::iter::repeat_n(groups.root(i), k))
        .collect();
    let bank_node = g.constant(bank.to_tensor());
    let sims = g.matmul_nt(feats, bank_node)?;
    let logits = g.scale(sims, T::of_f64(1.0 / cfg.temperature))?;
    let log_probs = g.log_softmax(logits)?;
    let ce = g.nll_mean(log_probs, targets)?;

    let per_instance =
        T::of_f64(cfg.element_scale(bank.n(), bank.dim()) / instances.len() as f64);
    let cons = match cfg.mode {
        ConsistencyMode::None => None,
        _ if k < 2 => Some(g.constant(Tensor::scalar(T::zero()))),
        ConsistencyMode::Kl => {
            let (left, right) = ordered_pairs(instances.len(), k);
            let probs = g.exp(log_probs)?;
            let p = g.select_rows(probs, left)?;
            let q = g.select_rows(probs, right)?;
            let terms = g.kl_rows(p, q)?;
            let sum = g.sum(terms)?;
            Some(g.scale(sum, per_instance)?)
        }
        ConsistencyMode::L2 => {
            let (left, right) = unordered_pairs(instances.len(), k);
            let a = g.select_rows(feats, left)?;
            let b = g.select_rows(feats, right)?;
            let diff = g.sub(a, b)?;
            let sq = g.square(diff)?;
            let sum = g.sum(sq)?;
            Some(g.scale(sum, per_instance)?)
        }
    };
    let total = match cons {
        Some(c) => {
            let weighted = g.scale(c, T::of_f64(cfg.beta))?;
            g.add(ce, weighted)?
        }
        None => ce,
    };
    Ok(LossNodes {
        total,
        ce,
        cons,
        log_probs,
    })
}

fn ordered_pairs(instances: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for b in 0..instances {
        for a in 0..k {
            for c in 0..k {
                if a != c {
                    left.push(b * k + a);
                    right.push(b * k + c);
                }
            }
        }
    }
    (left, right)
}

fn unordered_pairs(instances: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for b in 0..instances {
        for a in 0..k {
            for c in (a + 1)..k {
                left.push(b * k + a);
                right.push(b * k + c);
            }
        }
    }
    (left, right)
}

/// Reads loss values and diagnostics off a recorded tape.
pub fn loss_report<T: Real>(
    g: &Graph<T>,
    nodes: &LossNodes,
    feats: NodeId,
    instances: &[usize],
    k: usize,
    groups: &GroupTable,
    bank: &MemoryBank<T>,
    cfg: &LossConfig,
) -> LossReport {
    let dim = bank.dim();
    let f = g.value(feats).data();
    let mut positive = 0.0;
    for (row, fr) in f.chunks(dim).enumerate() {
        let target = groups.root(instances[row / k]);
        positive += dot(bank.row(target), fr).as_f64() / cfg.temperature;
    }
    let lp = g.value(nodes.log_probs);
    let (rows, cols) = lp.rows_cols();
    let mut entropy = 0.0;
    for r in 0..rows {
        entropy -= lp.data()[r * cols..(r + 1) * cols]
            .iter()
            .map(|&l| l.exp().as_f64() * l.as_f64())
            .sum::<f64>();
    }
    LossReport {
        ce: g.value(nodes.ce).item().as_f64(),
        cons: nodes.cons.map_or(0.0, |c| g.value(c).item().as_f64()),
        beta: cfg.beta,
        total: g.value(nodes.total).item().as_f64(),
        mean_positive_logit: positive / rows as f64,
        mean_entropy: entropy / rows as f64,
    }
}

/// Records the loss and returns it together with its report.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    feats: NodeId,
    instances: &[usize],
    k: usize,
    groups: &GroupTable,
    bank: &MemoryBank<T>,
    cfg: &LossConfig,
) -> Result<(NodeId, LossReport), LossError> {
    let nodes = record_total_loss(g, feats, instances, k, groups, bank, cfg)?;
    let report = loss_report(g, &nodes, feats, instances, k, groups, bank, cfg);
    Ok((nodes.total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(dim: usize, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    }

    #[test]
    fn identical_bank_rows_give_uniform_probs() {
        let row = e(3, 1);
        let bank = MemoryBank::from_rows(4, 3, 0.5, row.repeat(4)).unwrap();
        let p = instance_probs(&e(3, 0), &bank, 0.1).unwrap();
        for v in p.0 {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_slot_probabilities() {
        let bank = MemoryBank::from_rows(2, 2, 0.5, [e(2, 0), e(2, 1)].concat()).unwrap();
        let p = instance_probs(&e(2, 0), &bank, 1.0).unwrap();
        let (a, b) = (1f64.exp() / (1f64.exp() + 1.0), 1.0 / (1f64.exp() + 1.0));
        assert!((p.0[0] - a).abs() < 1e-15 && (p.0[1] - b).abs() < 1e-15);
        assert!((p.0[0] - 0.7311).abs() < 1e-4);
        let ce = batch_ce(&e(2, 0), &[0], 1, &GroupTable::identity(2), &bank, 1.0).unwrap();
        assert!((ce - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn lower_temperature_concentrates_argmax() {
        let bank = MemoryBank::<f64>::random(20, 8, 0.5, 5).unwrap();
        let f = bank.row(3).to_vec();
        let warm = instance_probs(&f, &bank, 1.0).unwrap();
        let cold = instance_probs(&f, &bank, 0.01).unwrap();
        let arg = (0..20).max_by(|&a, &b| warm.0[a].total_cmp(&warm.0[b])).unwrap();
        assert!(cold.0[arg] >= warm.0[arg]);
    }

    #[test]
    fn rejects_bad_temperature_and_empty_batch() {
        let bank = MemoryBank::<f64>::random(3, 2, 0.5, 1).unwrap();
        assert_eq!(instance_probs(&e(2, 0), &bank, 0.0).unwrap_err(), LossError::Temperature(0.0));
        assert_eq!(
            batch_ce::<f64>(&[], &[], 1, &GroupTable::identity(3), &bank, 0.1).unwrap_err(),
            LossError::EmptyBatch
        );
    }

    #[test]
    fn kl_consistency_values() {
        let p1 = ProbRow(vec![0.75, 0.25]);
        let p2 = ProbRow(vec![0.5, 0.5]);
        assert_eq!(kl_consistency(std::slice::from_ref(&p1)), 0.0);
        assert_eq!(kl_consistency(&[p1.clone(), p1.clone(), p1.clone()]), 0.0);
        let kl12 = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        let kl21 = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        let both = kl_consistency(&[p1, p2]);
        assert!((both - (kl12 + kl21)).abs() < 1e-15);
        assert!((kl12 - 0.1308).abs() < 1e-4 && (kl21 - 0.1438).abs() < 1e-4);
        assert!((both - 0.2746).abs() < 1e-4);
    }

    #[test]
    fn l2_consistency_values() {
        assert_eq!(l2_consistency(&[0.6, 0.8, 0.6, 0.8], 2), 0.0);
        assert_eq!(l2_consistency(&[1.0, 0.0, 0.0, 1.0], 2), 2.0);
        let three = [1.0, 0.0, 0.0, 1.0, -1.0, 0.0];
        let pairwise = l2_consistency(&three[..4], 2)
            + l2_consistency(&[three[0], three[1], three[4], three[5]], 2)
            + l2_consistency(&three[2..], 2);
        assert_eq!(l2_consistency(&three, 2), pairwise);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("kl".parse::<ConsistencyMode>().unwrap(), ConsistencyMode::Kl);
        assert_eq!(
            "cosine".parse::<ConsistencyMode>().unwrap_err(),
            LossError::UnknownMode("cosine".into())
        );
    }
}
