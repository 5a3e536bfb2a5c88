//! Offline hard-negative merging.
//!
//! Bank rows whose cosine distance is within `σ` are joined into one group;
//! groups are the connected components of that threshold graph, computed
//! over the current group roots with union-find. Merged groups share one
//! memory slot holding the renormalized mean of their member rows.

mod stages;

pub use stages::{run_stages, StageMetrics, StagesOutcome};
pub use crate::train::StageMode;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::membank::{GroupTable, MemoryBank};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    /// Cosine-distance threshold; `None` means calibrate against `target_fraction`.
    pub sigma: Option<f64>,
    pub target_fraction: (f64, f64),
    pub neighbors: usize,
    pub stages: usize,
    /// A stage that would group more than this fraction is aborted.
    pub safety_cap: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            sigma: None,
            target_fraction: (0.05, 0.10),
            neighbors: 10,
            stages: 2,
            safety_cap: 0.5,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), MiningError> {
        let (lo, hi) = self.target_fraction;
        let sigma_ok = self.sigma.is_none_or(|s| s >= 0.0 && s.is_finite());
        if !sigma_ok || !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) || self.neighbors == 0 {
            return Err(MiningError::InvalidConfig(format!("{self:?}")));
        }
        if !(0.0..=1.0).contains(&self.safety_cap) {
            return Err(MiningError::InvalidConfig(format!("safety cap {}", self.safety_cap)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    /// Groups with at least two members.
    pub groups: usize,
    pub grouped_fraction: f64,
    pub largest_group: usize,
    pub sigma: f64,
    /// Unions applied by this stage.
    pub new_unions: usize,
}

impl MergeReport {
    pub fn of(groups: &GroupTable, sigma: f64, new_unions: usize) -> Self {
        let n = groups.len().max(1);
        Self {
            groups: groups.roots().filter(|&r| groups.members(r).len() >= 2).count(),
            grouped_fraction: groups.grouped_count() as f64 / n as f64,
            largest_group: groups.largest_group(),
            sigma,
            new_unions,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MiningError {
    #[error("merge would group {:.3} of the instances (cap {cap}); stage aborted", report.grouped_fraction)]
    SafetyCap { report: MergeReport, cap: f64 },
    #[error("bank has {bank} rows but the group table covers {groups}")]
    SizeMismatch { bank: usize, groups: usize },
    #[error("invalid merge config: {0}")]
    InvalidConfig(String),
}

/// Cosine distance between unit rows, computed as `½‖a − b‖²` so equal rows
/// are exactly zero apart.
pub fn cosine_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).as_f64().powi(2))
        .sum::<f64>()
}

/// Exact nearest-neighbour lists between the current group roots.
///
/// Each list is kept sorted by distance and truncated; a list is extended on
/// demand whenever a query radius reaches past its last stored entry, so
/// thresholding is always exact.
pub struct NeighborIndex<'a, T: Real> {
    bank: &'a MemoryBank<T>,
    roots: Vec<usize>,
    lists: Vec<Vec<(f64, u32)>>,
    complete: Vec<bool>,
}

impl<'a, T: Real> NeighborIndex<'a, T> {
    pub fn build(bank: &'a MemoryBank<T>, groups: &GroupTable, keep: usize) -> Self {
        let roots: Vec<usize> = groups.roots().collect();
        let mut index = Self {
            bank,
            lists: vec![Vec::new(); roots.len()],
            complete: vec![false; roots.len()],
            roots,
        };
        for pos in 0..index.roots.len() {
            index.fill(pos, keep);
        }
        index
    }

    fn fill(&mut self, pos: usize, keep: usize) {
        let me = self.bank.row(self.roots[pos]);
        let mut all: Vec<(f64, u32)> = self
            .roots
            .iter()
            .enumerate()
            .filter(|&(other, _)| other != pos)
            .map(|(other, &slot)| (cosine_distance(me, self.bank.row(slot)), other as u32))
            .collect();
        let keep = keep.max(1);
        if all.len() > keep {
            all.select_nth_unstable_by(keep - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.truncate(keep);
            self.complete[pos] = false;
        } else {
            self.complete[pos] = true;
        }
        all.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        self.lists[pos] = all;
    }

    /// Neighbours of root position `pos` within `sigma`: the top `neighbors`
    /// candidates, extended while the candidate list is saturated.
    fn within(&mut self, pos: usize, sigma: f64, neighbors: usize) -> Vec<usize> {
        loop {
            let list = &self.lists[pos];
            let saturated = list.last().is_some_and(|&(d, _)| d <= sigma);
            if !saturated || self.complete[pos] {
                break;
            }
            let grow = (list.len() * 2).max(neighbors);
            self.fill(pos, grow);
        }
        let list = &self.lists[pos];
        let kth_inside = list.get(neighbors.saturating_sub(1)).is_some_and(|&(d, _)| d <= sigma);
        let limit = if kth_inside { list.len() } else { neighbors.min(list.len()) };
        list[..limit]
            .iter()
            .take_while(|&&(d, _)| d <= sigma)
            .map(|&(_, other)| other as usize)
            .collect()
    }

    /// Groups after joining every pair of roots within `sigma`; also returns
    /// the number of unions applied. Does not touch the bank.
    pub fn components(&mut self, groups: &GroupTable, sigma: f64, neighbors: usize) -> (GroupTable, usize) {
        let mut out = groups.clone();
        let mut unions = 0;
        for pos in 0..self.roots.len() {
            for other in self.within(pos, sigma, neighbors) {
                if out.union(self.roots[pos], self.roots[other]) {
                    unions += 1;
                }
            }
        }
        out.flatten();
        (out, unions)
    }
}

fn check_sizes<T: Real>(bank: &MemoryBank<T>, groups: &GroupTable) -> Result<(), MiningError> {
    if bank.n() != groups.len() {
        return Err(MiningError::SizeMismatch {
            bank: bank.n(),
            groups: groups.len(),
        });
    }
    Ok(())
}

/// Grouping that `sigma` would produce, without mutating anything.
pub fn dry_run<T: Real>(
    bank: &MemoryBank<T>,
    groups: &GroupTable,
    sigma: f64,
    neighbors: usize,
) -> Result<(GroupTable, MergeReport), MiningError> {
    check_sizes(bank, groups)?;
    let mut index = NeighborIndex::build(bank, groups, neighbors);
    let (merged, unions) = index.components(groups, sigma, neighbors);
    let report = MergeReport::of(&merged, sigma, unions);
    Ok((merged, report))
}

/// Replaces each group's root row by the renormalized mean of its member
/// rows and aliases every member to it.
pub fn merge_rows<T: Real>(bank: &mut MemoryBank<T>, groups: &GroupTable) {
    let dim = bank.dim();
    let roots: Vec<usize> = groups.roots().filter(|&r| groups.members(r).len() >= 2).collect();
    for root in roots {
        let mut mean = vec![0f64; dim];
        for &m in groups.members(root) {
            for (acc, &v) in mean.iter_mut().zip(bank.row(m)) {
                *acc += v.as_f64();
            }
        }
        let len = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len > 1e-12 {
            for (dst, v) in bank.row_mut(root).iter_mut().zip(&mean) {
                *dst = T::of_f64(v / len);
            }
        }
        bank.sync_group(groups, root);
    }
}

/// One merge stage at the configured (or calibrated) `σ`.
pub fn merge_stage<T: Real>(
    bank: &mut MemoryBank<T>,
    groups: &GroupTable,
    cfg: &MergeConfig,
) -> Result<(GroupTable, MergeReport), MiningError> {
    cfg.validate()?;
    check_sizes(bank, groups)?;
    let sigma = match cfg.sigma {
        Some(s) => s,
        None => calibrate_sigma(bank, groups, cfg.target_fraction, cfg.neighbors)?.sigma,
    };
    let (merged, report) = dry_run(bank, groups, sigma, cfg.neighbors)?;
    if report.grouped_fraction > cfg.safety_cap {
        return Err(MiningError::SafetyCap {
            report,
            cap: cfg.safety_cap,
        });
    }
    merge_rows(bank, &merged);
    Ok((merged, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub sigma: f64,
    pub grouped_fraction: f64,
    /// False when no probed `σ` landed inside the target interval.
    pub reached: bool,
    pub probes: usize,
}

const CALIBRATION_PROBES: usize = 80;

/// Searches `σ ∈ [0, 2]` for a grouped fraction inside `target`.
///
/// Dry runs only. If even `σ = 0` overshoots the interval, returns `σ = 0`
/// with `reached = false`.
pub fn calibrate_sigma<T: Real>(
    bank: &MemoryBank<T>,
    groups: &GroupTable,
    target: (f64, f64),
    neighbors: usize,
) -> Result<Calibration, MiningError> {
    check_sizes(bank, groups)?;
    let (lo, hi) = target;
    if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
        return Err(MiningError::InvalidConfig(format!("target interval {target:?}")));
    }
    let n = groups.len() as f64;
    let mut index = NeighborIndex::build(bank, groups, neighbors.max(32));
    let mut probe = |sigma: f64| index.components(groups, sigma, neighbors).0.grouped_count() as f64 / n;

    let at_zero = probe(0.0);
    let mut probes = 1;
    if at_zero >= lo {
        return Ok(Calibration {
            sigma: 0.0,
            grouped_fraction: at_zero,
            reached: at_zero <= hi,
            probes,
        });
    }
    // Grow the radius geometrically first so neighbour lists only expand as
    // far as needed, then bisect. Invariant: fraction(low) < lo, fraction(high) > hi.
    let (mut low, mut high) = (0.0, 2.0);
    let mut best = (0.0, at_zero);
    let mut radius = 1e-6;
    while radius < 2.0 && probes < CALIBRATION_PROBES {
        let frac = probe(radius);
        probes += 1;
        if frac < lo {
            low = radius;
            best = (radius, frac);
            radius *= 2.0;
        } else if frac > hi {
            high = radius;
            break;
        } else {
            return Ok(Calibration {
                sigma: radius,
                grouped_fraction: frac,
                reached: true,
                probes,
            });
        }
    }
    while probes < CALIBRATION_PROBES {
        let mid = 0.5 * (low + high);
        let frac = probe(mid);
        probes += 1;
        if frac < lo {
            low = mid;
            best = (mid, frac);
        } else if frac > hi {
            high = mid;
        } else {
            return Ok(Calibration {
                sigma: mid,
                grouped_fraction: frac,
                reached: true,
                probes,
            });
        }
    }
    Ok(Calibration {
        sigma: best.0,
        grouped_fraction: best.1,
        reached: false,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_components<T: Real>(bank: &MemoryBank<T>, sigma: f64) -> Vec<usize> {
        let n = bank.n();
        let mut label: Vec<usize> = (0..n).collect();
        // Repeated relaxation until the minimum label is propagated everywhere.
        loop {
            let mut changed = false;
            for a in 0..n {
                for b in 0..n {
                    if a != b && cosine_distance(bank.row(a), bank.row(b)) <= sigma {
                        let m = label[a].min(label[b]);
                        if label[a] != m || label[b] != m {
                            label[a] = m;
                            label[b] = m;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                return label;
            }
        }
    }

    #[test]
    fn sigma_zero_leaves_random_bank_alone() {
        let mut bank = MemoryBank::<f64>::random(100, 16, 0.5, 1).unwrap();
        let before = bank.clone();
        let cfg = MergeConfig {
            sigma: Some(0.0),
            ..MergeConfig::default()
        };
        let (groups, report) = merge_stage(&mut bank, &GroupTable::identity(100), &cfg).unwrap();
        assert_eq!(groups, GroupTable::identity(100));
        assert_eq!(report.groups, 0);
        assert_eq!(bank, before);
    }

    #[test]
    fn identical_rows_form_one_group() {
        let row = [0.6, 0.8];
        let mut bank = MemoryBank::from_rows(5, 2, 0.5, row.repeat(5)).unwrap();
        let cfg = MergeConfig {
            sigma: Some(0.0),
            safety_cap: 1.0,
            neighbors: 2,
            ..MergeConfig::default()
        };
        let (groups, report) = merge_stage(&mut bank, &GroupTable::identity(5), &cfg).unwrap();
        assert_eq!(groups.group_count(), 1);
        assert_eq!(report.largest_group, 5);
        assert_eq!(report.grouped_fraction, 1.0);
    }

    #[test]
    fn safety_cap_aborts_without_mutation() {
        let mut bank = MemoryBank::<f64>::random(40, 4, 0.5, 2).unwrap();
        let before = bank.clone();
        let cfg = MergeConfig {
            sigma: Some(2.0),
            ..MergeConfig::default()
        };
        let err = merge_stage(&mut bank, &GroupTable::identity(40), &cfg).unwrap_err();
        assert!(matches!(err, MiningError::SafetyCap { .. }));
        assert_eq!(bank, before);
    }

    #[test]
    fn components_match_brute_force() {
        for seed in 0..5 {
            let bank = MemoryBank::<f64>::random(120, 3, 0.5, seed).unwrap();
            for sigma in [0.0, 0.002, 0.01, 0.03] {
                let (groups, _) = dry_run(&bank, &GroupTable::identity(120), sigma, 3).unwrap();
                let oracle = brute_force_components(&bank, sigma);
                let ours: Vec<usize> = (0..120).map(|i| groups.root(i)).collect();
                assert_eq!(ours, oracle, "seed {seed} sigma {sigma}");
            }
        }
    }

    #[test]
    fn grouped_fraction_is_monotone_in_sigma() {
        let bank = MemoryBank::<f64>::random(150, 4, 0.5, 9).unwrap();
        let groups = GroupTable::identity(150);
        let mut last = 0.0;
        for step in 0..20 {
            let sigma = step as f64 * 0.01;
            let (_, report) = dry_run(&bank, &groups, sigma, 5).unwrap();
            assert!(report.grouped_fraction >= last);
            last = report.grouped_fraction;
        }
    }

    #[test]
    fn vacuous_target_returns_zero() {
        let bank = MemoryBank::<f64>::random(30, 4, 0.5, 9).unwrap();
        let cal = calibrate_sigma(&bank, &GroupTable::identity(30), (0.0, 1.0), 5).unwrap();
        assert_eq!(cal.sigma, 0.0);
        assert!(cal.reached);
    }
}
