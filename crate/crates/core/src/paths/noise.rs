use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SplitMix64 finaliser.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for one replica and one substream.
pub fn derive_seed(master_seed: u64, replica: u64, tag: u64) -> u64 {
    mix64(mix64(mix64(master_seed) ^ replica) ^ mix64(tag))
}

/// Substream families. The sign of the step index selects a further
/// independent substream, so every branch is two-sided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    /// Fast-variable Wiener increments.
    Fast,
    /// Auxiliary Wiener processes (reduced-model noise and the like).
    Auxiliary(u32),
    /// Independent draws used for initial states.
    Initial(u32),
}

impl Branch {
    fn tag(self) -> u64 {
        match self {
            Branch::Fast => 0x0001,
            Branch::Initial(k) => 0x0100_0000 | k as u64,
            Branch::Auxiliary(k) => 0x0200_0000 | k as u64,
        }
    }
}

const NEGATIVE_FLAG: u64 = 0x8000_0000_0000_0000;

struct SplitMix(u64);

impl RngCore for SplitMix {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

/// Reproducible two-sided Gaussian increments. The vector at a signed index is
/// a pure function of `(master_seed, replica, branch, index)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseStream {
    master_seed: u64,
    replica: u64,
    branch: Branch,
    dim: usize,
    base_dt: f64,
    factor: u64,
    offset: i64,
    seed_pos: u64,
    seed_neg: u64,
}

impl NoiseStream {
    pub fn new(master_seed: u64, replica: u64, dim: usize, dt: f64) -> Self {
        Self::with_parts(master_seed, replica, Branch::Fast, dim, dt)
    }

    fn with_parts(master_seed: u64, replica: u64, branch: Branch, dim: usize, dt: f64) -> Self {
        let tag = branch.tag();
        NoiseStream {
            master_seed,
            replica,
            branch,
            dim,
            base_dt: dt,
            factor: 1,
            offset: 0,
            seed_pos: derive_seed(master_seed, replica, tag),
            seed_neg: derive_seed(master_seed, replica, tag | NEGATIVE_FLAG),
        }
    }

    /// Same replica, different substream family; keeps step and shift.
    pub fn with_branch(&self, branch: Branch, dim: usize) -> Self {
        let mut s = Self::with_parts(self.master_seed, self.replica, branch, dim, self.base_dt);
        s.factor = self.factor;
        s.offset = self.offset;
        s
    }

    /// Same normal draws, reinterpreted with step `dt`.
    pub fn with_dt(&self, dt: f64) -> Self {
        let mut s = self.clone();
        s.base_dt = dt / self.factor as f64;
        s
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn replica(&self) -> u64 {
        self.replica
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.base_dt * self.factor as f64
    }

    /// Index shift relative to the unshifted stream, in steps of `dt()`.
    pub fn offset_steps(&self) -> i64 {
        self.offset / self.factor as i64
    }

    fn base_normals(&self, j: i64, out: &mut [f64]) {
        let seed = if j >= 0 { self.seed_pos } else { self.seed_neg };
        let key = (j as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
        let mut rng = SplitMix(mix64(seed ^ key));
        for v in out.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
    }

    /// Standard normal vector behind the increment at step `k`.
    pub fn standard_normal(&self, k: i64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let start = self.offset + k * self.factor as i64;
        if self.factor == 1 {
            self.base_normals(start, out);
            return;
        }
        let mut tmp = vec![0.0; self.dim];
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.factor as i64 {
            self.base_normals(start + i, &mut tmp);
            out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
        }
        let s = 1.0 / (self.factor as f64).sqrt();
        out.iter_mut().for_each(|v| *v *= s);
    }

    /// Wiener increment `W((k+1)dt) - W(k dt)`.
    pub fn increment(&self, k: i64, out: &mut [f64]) {
        self.standard_normal(k, out);
        let s = self.dt().sqrt();
        out.iter_mut().for_each(|v| *v *= s);
    }

    /// `theta_t`: increment `k` of the result is increment `k + t/dt` of `self`.
    pub fn shift(&self, t_shift: f64) -> Result<Self> {
        let r = t_shift / self.dt();
        let k = r.round();
        if (r - k).abs() > 1e-9 {
            return Err(Error::NonGridShift {
                shift: t_shift,
                dt: self.dt(),
            });
        }
        Ok(self.shift_steps(k as i64))
    }

    pub fn shift_steps(&self, k: i64) -> Self {
        let mut s = self.clone();
        s.offset += k * self.factor as i64;
        s
    }

    /// Aggregates `factor` consecutive increments into one.
    pub fn coarsen(&self, factor: u64) -> Self {
        assert!(factor >= 1);
        let mut s = self.clone();
        s.factor *= factor;
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        let s = NoiseStream::new(7, 3, 2, 0.01);
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        for k in [-5i64, 0, 1, 1000] {
            s.increment(k, &mut a);
            s.clone().increment(k, &mut b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shift_laws() {
        let s = NoiseStream::new(1, 0, 1, 0.5);
        let (mut a, mut b) = ([0.0], [0.0]);
        s.shift(0.0).unwrap().increment(4, &mut a);
        s.increment(4, &mut b);
        assert_eq!(a, b);
        s.shift(0.5).unwrap().increment(0, &mut a);
        s.increment(1, &mut b);
        assert_eq!(a, b);
        let ab = s.shift(1.5).unwrap().shift(-2.5).unwrap();
        ab.increment(3, &mut a);
        s.shift(-1.0).unwrap().increment(3, &mut b);
        assert_eq!(a, b);
        assert!(matches!(s.shift(0.3), Err(Error::NonGridShift { .. })));
    }

    #[test]
    fn coarsening_sums_increments() {
        let s = NoiseStream::new(9, 2, 1, 0.1);
        let c = s.coarsen(4);
        assert!((c.dt() - 0.4).abs() < 1e-15);
        let (mut tot, mut one) = (0.0, [0.0]);
        for k in 8..12 {
            s.increment(k, &mut one);
            tot += one[0];
        }
        c.increment(2, &mut one);
        assert!((tot - one[0]).abs() < 1e-13);
    }

    #[test]
    fn branches_and_signs_differ() {
        let s = NoiseStream::new(1, 0, 1, 1.0);
        let aux = s.with_branch(Branch::Auxiliary(0), 1);
        let (mut a, mut b, mut c) = ([0.0], [0.0], [0.0]);
        s.increment(0, &mut a);
        aux.increment(0, &mut b);
        s.increment(-1, &mut c);
        assert!(a != b && a != c && b != c);
    }
}
