//! Memory bank of per-instance representations and the group table that
//! aliases merged instances onto a shared slot.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::numkernel::Tensor;
use crate::real::{norm, Real};

/// Blends whose norm falls below this are rejected as cancelling.
const MIN_BLEND_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum BankError {
    #[error("slot {slot} out of range for a bank of {n} rows")]
    OutOfRange { slot: usize, n: usize },
    #[error("bank shape mismatch: {expected:?} vs {got:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("feature rows have dimension {got}, bank expects {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("no features supplied for the update")]
    NoFeatures,
    #[error("momentum {0} outside [0, 1]")]
    Momentum(f64),
}

/// `n × d` table of unit-norm rows updated by a momentum blend.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T: Real> {
    n: usize,
    dim: usize,
    momentum: f64,
    rows: Vec<T>,
    version: u64,
    cancelled_updates: u64,
}

/// Read-only copy of a bank at one point in time.
#[derive(Clone, Debug, PartialEq)]
pub struct BankSnapshot<T: Real> {
    n: usize,
    dim: usize,
    rows: Vec<T>,
    version: u64,
}

impl<T: Real> BankSnapshot<T> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn row(&self, slot: usize) -> &[T] {
        &self.rows[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn rows(&self) -> &[T] {
        &self.rows
    }
}

impl<T: Real> MemoryBank<T> {
    /// Rows drawn as i.i.d. random directions (normalized Gaussians).
    pub fn random(n: usize, dim: usize, momentum: f64, seed: u64) -> Result<Self, BankError> {
        assert!(n > 0 && dim > 0, "bank dimensions must be positive");
        if !(0.0..=1.0).contains(&momentum) {
            return Err(BankError::Momentum(momentum));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(n * dim);
        let mut buf = vec![0f64; dim];
        for _ in 0..n {
            loop {
                for v in buf.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let len = norm(&buf);
                if len > 1e-6 {
                    rows.extend(buf.iter().map(|v| T::of_f64(v / len)));
                    break;
                }
            }
        }
        Ok(Self {
            n,
            dim,
            momentum,
            rows,
            version: 0,
            cancelled_updates: 0,
        })
    }

    /// Bank from explicit rows; each row is normalized.
    pub fn from_rows(n: usize, dim: usize, momentum: f64, mut rows: Vec<T>) -> Result<Self, BankError> {
        if rows.len() != n * dim || n == 0 || dim == 0 {
            return Err(BankError::ShapeMismatch {
                expected: (n, dim),
                got: (rows.len() / dim.max(1), dim),
            });
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(BankError::Momentum(momentum));
        }
        for row in rows.chunks_mut(dim) {
            let len = norm(row);
            if len.as_f64() > MIN_BLEND_NORM {
                row.iter_mut().for_each(|v| *v /= len);
            }
        }
        Ok(Self {
            n,
            dim,
            momentum,
            rows,
            version: 0,
            cancelled_updates: 0,
        })
    }

    /// Rebuilds a bank from checkpointed fields without renormalizing.
    pub(crate) fn from_parts(
        n: usize,
        dim: usize,
        momentum: f64,
        rows: Vec<T>,
        version: u64,
        cancelled_updates: u64,
    ) -> Result<Self, BankError> {
        if rows.len() != n * dim {
            return Err(BankError::ShapeMismatch {
                expected: (n, dim),
                got: (rows.len() / dim.max(1), dim),
            });
        }
        Ok(Self {
            n,
            dim,
            momentum,
            rows,
            version,
            cancelled_updates,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn set_momentum(&mut self, momentum: f64) -> Result<(), BankError> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(BankError::Momentum(momentum));
        }
        self.momentum = momentum;
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Updates skipped because the blended row had (near) zero norm.
    pub fn cancelled_updates(&self) -> u64 {
        self.cancelled_updates
    }

    pub fn rows(&self) -> &[T] {
        &self.rows
    }

    /// The bank as an `[n, d]` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.n, self.dim], self.rows.clone()).expect("bank shape")
    }

    pub fn lookup(&self, slot: usize) -> Result<&[T], BankError> {
        if slot >= self.n {
            return Err(BankError::OutOfRange { slot, n: self.n });
        }
        Ok(self.row(slot))
    }

    /// Row `slot`; panics when out of range (see [`Self::lookup`]).
    pub fn row(&self, slot: usize) -> &[T] {
        &self.rows[slot * self.dim..(slot + 1) * self.dim]
    }

    pub(crate) fn row_mut(&mut self, slot: usize) -> &mut [T] {
        &mut self.rows[slot * self.dim..(slot + 1) * self.dim]
    }

    /// `row ← normalize(m·row + (1−m)·mean(feats))`.
    ///
    /// `feats` holds `K` rows of length `d`, concatenated. Returns `false`
    /// (and leaves the row untouched) when the blend cancels to zero.
    pub fn update(&mut self, slot: usize, feats: &[T]) -> Result<bool, BankError> {
        if slot >= self.n {
            return Err(BankError::OutOfRange { slot, n: self.n });
        }
        if feats.is_empty() {
            return Err(BankError::NoFeatures);
        }
        if feats.len() % self.dim != 0 {
            return Err(BankError::FeatureDim {
                expected: self.dim,
                got: feats.len(),
            });
        }
        if self.momentum == 1.0 {
            // The blend is the row itself; skip renormalizing so it stays bit-identical.
            self.version += 1;
            return Ok(true);
        }
        let k = feats.len() / self.dim;
        let m = T::of_f64(self.momentum);
        let fresh = (T::one() - m) / T::of_f64(k as f64);
        let dim = self.dim;
        let mut blended: Vec<T> = self.row(slot).iter().map(|&v| m * v).collect();
        for feat in feats.chunks(dim) {
            for (b, &f) in blended.iter_mut().zip(feat) {
                *b += fresh * f;
            }
        }
        let len = norm(&blended);
        if !(len.as_f64() > MIN_BLEND_NORM) {
            self.cancelled_updates += 1;
            return Ok(false);
        }
        for (dst, b) in self.row_mut(slot).iter_mut().zip(blended) {
            *dst = b / len;
        }
        self.version += 1;
        Ok(true)
    }

    /// Update from one designated feature only.
    pub fn update_single(&mut self, slot: usize, feat: &[T]) -> Result<bool, BankError> {
        if feat.len() != self.dim {
            return Err(BankError::FeatureDim {
                expected: self.dim,
                got: feat.len(),
            });
        }
        self.update(slot, feat)
    }

    /// Updates the group root of `instance` and copies the result to every
    /// member so all members keep reading the shared representation.
    pub fn update_group(&mut self, groups: &GroupTable, instance: usize, feats: &[T]) -> Result<bool, BankError> {
        let root = groups.root(instance);
        let changed = self.update(root, feats)?;
        if changed {
            self.sync_group(groups, root);
        }
        Ok(changed)
    }

    /// Copies the root row onto the other members of its group.
    pub(crate) fn sync_group(&mut self, groups: &GroupTable, root: usize) {
        let members = groups.members(root);
        if members.len() < 2 {
            return;
        }
        let src: Vec<T> = self.row(root).to_vec();
        for &member in members {
            if member != root {
                self.row_mut(member).copy_from_slice(&src);
            }
        }
    }

    /// Re-aliases every group onto its root row.
    pub fn sync_all(&mut self, groups: &GroupTable) {
        for root in groups.roots() {
            self.sync_group(groups, root);
        }
    }

    pub fn snapshot(&self) -> BankSnapshot<T> {
        BankSnapshot {
            n: self.n,
            dim: self.dim,
            rows: self.rows.clone(),
            version: self.version,
        }
    }

    pub fn restore(&mut self, snapshot: &BankSnapshot<T>) -> Result<(), BankError> {
        if (snapshot.n, snapshot.dim) != (self.n, self.dim) {
            return Err(BankError::ShapeMismatch {
                expected: (self.n, self.dim),
                got: (snapshot.n, snapshot.dim),
            });
        }
        self.rows.copy_from_slice(&snapshot.rows);
        self.version = snapshot.version;
        Ok(())
    }

    pub fn max_norm_deviation(&self) -> f64 {
        self.rows
            .chunks(self.dim)
            .map(|r| (norm(r).as_f64() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Mean cosine distance `(1/n) Σ (1 − prev_i · cur_i)` between two banks.
pub fn bank_drift<T: Real>(prev: &BankSnapshot<T>, cur: &MemoryBank<T>) -> Result<f64, BankError> {
    if (prev.n, prev.dim) != (cur.n, cur.dim) {
        return Err(BankError::ShapeMismatch {
            expected: (prev.n, prev.dim),
            got: (cur.n, cur.dim),
        });
    }
    // ½‖a − b‖² equals 1 − a·b for unit rows and is exactly zero for equal rows.
    let total: f64 = (0..cur.n)
        .map(|i| {
            prev.row(i)
                .iter()
                .zip(cur.row(i))
                .map(|(&a, &b)| (a - b).as_f64().powi(2))
                .sum::<f64>()
                * 0.5
        })
        .sum();
    Ok(total / cur.n as f64)
}

/// Union-find over instances. Roots are always the smallest member index,
/// which makes merge results independent of the order unions are applied.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupTable {
    parent: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl GroupTable {
    pub fn identity(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            members: (0..n).map(|i| vec![i]).collect(),
        }
    }

    /// Table from a parent array; rejects arrays that do not describe a forest.
    pub fn from_parents(parent: Vec<usize>) -> Option<Self> {
        let n = parent.len();
        if parent.iter().any(|&p| p >= n) {
            return None;
        }
        let mut table = Self {
            parent,
            members: Vec::new(),
        };
        for i in 0..n {
            let mut cur = i;
            for _ in 0..=n {
                if table.parent[cur] == cur {
                    break;
                }
                cur = table.parent[cur];
            }
            if table.parent[cur] != cur {
                return None;
            }
        }
        table.normalize();
        Some(table)
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    pub fn root(&self, i: usize) -> usize {
        let mut cur = i;
        while self.parent[cur] != cur {
            cur = self.parent[cur];
        }
        cur
    }

    /// Members of the group rooted at `root` (ascending). Empty for non-roots.
    pub fn members(&self, root: usize) -> &[usize] {
        &self.members[root]
    }

    pub fn group_of(&self, i: usize) -> &[usize] {
        self.members(self.root(i))
    }

    pub fn roots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.parent.len()).filter(|&i| self.parent[i] == i)
    }

    pub fn group_count(&self) -> usize {
        self.roots().count()
    }

    /// Instances that share their slot with at least one other instance.
    pub fn grouped_count(&self) -> usize {
        self.members.iter().filter(|m| m.len() >= 2).map(Vec::len).sum()
    }

    pub fn largest_group(&self) -> usize {
        self.members.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn find_compress(&mut self, i: usize) -> usize {
        let root = self.root(i);
        let mut cur = i;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    /// Joins the groups of `a` and `b`. The smaller root index wins.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find_compress(a), self.find_compress(b));
        if ra == rb {
            return false;
        }
        let (keep, drop) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[drop] = keep;
        let moved = std::mem::take(&mut self.members[drop]);
        let target = &mut self.members[keep];
        target.extend(moved);
        target.sort_unstable();
        true
    }

    /// Points every instance directly at its root and rebuilds member lists.
    fn normalize(&mut self) {
        let n = self.parent.len();
        let roots: Vec<usize> = (0..n).map(|i| self.root(i)).collect();
        self.parent = roots;
        self.members = vec![Vec::new(); n];
        for i in 0..n {
            let r = self.parent[i];
            self.members[r].push(i);
        }
    }

    pub(crate) fn flatten(&mut self) {
        self.normalize();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::real::dot;

    fn unit(dim: usize, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    }

    #[test]
    fn random_rows_are_unit_and_seeded() {
        let a = MemoryBank::<f64>::random(50, 16, 0.5, 3).unwrap();
        let b = MemoryBank::<f64>::random(50, 16, 0.5, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.max_norm_deviation() < 1e-6);
    }

    #[test]
    fn random_rows_are_nearly_orthogonal_on_average() {
        let bank = MemoryBank::<f64>::random(1000, 64, 0.5, 11).unwrap();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..1000 {
            for j in (i + 1)..1000 {
                total += dot(bank.row(i), bank.row(j));
                pairs += 1;
            }
        }
        assert!((total / pairs as f64).abs() < 0.05);
    }

    #[test]
    fn momentum_one_is_identity() {
        let mut bank = MemoryBank::<f64>::random(4, 3, 1.0, 1).unwrap();
        let before = bank.row(2).to_vec();
        bank.update(2, &unit(3, 0)).unwrap();
        assert_eq!(bank.row(2), before.as_slice());
    }

    #[test]
    fn momentum_zero_single_feature_replaces_row() {
        let mut bank = MemoryBank::<f64>::random(4, 3, 0.0, 1).unwrap();
        bank.update(1, &unit(3, 2)).unwrap();
        assert_eq!(bank.row(1), unit(3, 2).as_slice());
        assert_eq!(bank.version(), 1);
    }

    #[test]
    fn half_momentum_blend_closed_form() {
        let mut bank = MemoryBank::from_rows(1, 2, 0.5, unit(2, 0)).unwrap();
        bank.update(0, &unit(2, 1)).unwrap();
        let expected = 1.0 / 2f64.sqrt();
        assert!((bank.row(0)[0] - expected).abs() < 1e-15);
        assert!((bank.row(0)[1] - expected).abs() < 1e-15);
    }

    #[test]
    fn feats_equal_to_row_is_fixed_point() {
        let mut bank = MemoryBank::<f64>::random(3, 5, 0.5, 8).unwrap();
        let row = bank.row(0).to_vec();
        let feats: Vec<f64> = row.iter().chain(row.iter()).copied().collect();
        bank.update(0, &feats).unwrap();
        for (a, b) in bank.row(0).iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cancelling_update_is_rejected() {
        let mut bank = MemoryBank::from_rows(1, 2, 0.0, unit(2, 0)).unwrap();
        let feats = [1.0, 0.0, -1.0, 0.0];
        assert!(!bank.update(0, &feats).unwrap());
        assert_eq!(bank.row(0), unit(2, 0).as_slice());
        assert_eq!(bank.cancelled_updates(), 1);
    }

    #[test]
    fn single_update_equals_one_row_update() {
        let mut a = MemoryBank::<f64>::random(3, 4, 0.5, 2).unwrap();
        let mut b = a.clone();
        let feat = [0.5, 0.5, 0.5, 0.5];
        a.update_single(1, &feat).unwrap();
        b.update(1, &feat).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lookup_out_of_range() {
        let bank = MemoryBank::<f64>::random(3, 4, 0.5, 2).unwrap();
        assert_eq!(bank.lookup(3).unwrap_err(), BankError::OutOfRange { slot: 3, n: 3 });
    }

    #[test]
    fn drift_extremes() {
        let bank = MemoryBank::<f64>::random(10, 4, 0.5, 2).unwrap();
        let snap = bank.snapshot();
        assert_eq!(bank_drift(&snap, &bank).unwrap(), 0.0);
        let flipped: Vec<f64> = bank.rows().iter().map(|v| -v).collect();
        let neg = MemoryBank::from_rows(10, 4, 0.5, flipped).unwrap();
        assert!((bank_drift(&snap, &neg).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn snapshot_is_detached_and_restorable() {
        let mut bank = MemoryBank::<f64>::random(5, 3, 0.5, 4).unwrap();
        let snap = bank.snapshot();
        bank.update(0, &unit(3, 1)).unwrap();
        assert_ne!(snap.row(0), bank.row(0));
        bank.restore(&snap).unwrap();
        assert_eq!(bank.snapshot(), snap);
        let other = MemoryBank::<f64>::random(4, 3, 0.5, 4).unwrap().snapshot();
        assert!(bank.restore(&other).is_err());
    }

    #[test]
    fn union_find_keeps_smallest_root() {
        let mut g = GroupTable::identity(6);
        g.union(4, 2);
        g.union(5, 4);
        assert_eq!(g.root(5), 2);
        assert_eq!(g.members(2), &[2, 4, 5]);
        assert_eq!(g.grouped_count(), 3);
        assert_eq!(g.group_count(), 4);
        for i in 0..6 {
            assert_eq!(g.root(g.root(i)), g.root(i));
        }
    }

    #[test]
    fn group_update_is_shared() {
        let mut groups = GroupTable::identity(4);
        groups.union(1, 3);
        let mut bank = MemoryBank::<f64>::random(4, 3, 0.5, 9).unwrap();
        bank.sync_all(&groups);
        bank.update_group(&groups, 3, &unit(3, 0)).unwrap();
        assert_eq!(bank.lookup(1).unwrap(), bank.lookup(3).unwrap());
    }

    #[test]
    fn from_parents_rejects_cycles() {
        assert!(GroupTable::from_parents(vec![1, 0]).is_none());
        let g = GroupTable::from_parents(vec![0, 0, 1]).unwrap();
        assert_eq!(g.parents(), &[0, 0, 0]);
    }
}
