use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// States on a uniform grid `t0 + i dt`. Stored flat, state-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePath {
    pub t0: f64,
    pub dt: f64,
    pub n: usize,
    pub m: usize,
    pub slow: Vec<f64>,
    pub fast: Vec<f64>,
}

impl SamplePath {
    pub fn new(t0: f64, dt: f64, n: usize, m: usize) -> Self {
        SamplePath {
            t0,
            dt,
            n,
            m,
            slow: Vec::new(),
            fast: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], y: &[f64]) {
        self.slow.extend_from_slice(x);
        self.fast.extend_from_slice(y);
    }

    pub fn len(&self) -> usize {
        if self.n == 0 {
            0
        } else {
            self.slow.len() / self.n
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.len().saturating_sub(1))
    }

    pub fn slow_at(&self, i: usize) -> &[f64] {
        &self.slow[i * self.n..(i + 1) * self.n]
    }

    pub fn fast_at(&self, i: usize) -> &[f64] {
        &self.fast[i * self.m..(i + 1) * self.m]
    }

    pub fn last_slow(&self) -> &[f64] {
        self.slow_at(self.len() - 1)
    }

    pub fn is_finite(&self) -> bool {
        self.slow.iter().chain(&self.fast).all(|v| v.is_finite())
    }

    /// Linear interpolation of `(slow, fast)` at time `t`.
    pub fn interpolate(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (start, end) = (self.t0, self.t_end());
        let slack = 1e-12 * self.dt.abs().max(1.0);
        if self.is_empty() || t < start - slack || t > end + slack {
            return Err(Error::OutOfRange { t, start, end });
        }
        let u = ((t - start) / self.dt).max(0.0);
        let i = (u.floor() as usize).min(self.len().saturating_sub(2));
        if self.len() == 1 {
            return Ok((self.slow_at(0).to_vec(), self.fast_at(0).to_vec()));
        }
        let w = (u - i as f64).clamp(0.0, 1.0);
        let lerp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p + w * (q - p)).collect();
        Ok((
            lerp(self.slow_at(i), self.slow_at(i + 1)),
            lerp(self.fast_at(i), self.fast_at(i + 1)),
        ))
    }

    /// CSV with columns `t, x_1.., y_1..` at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for i in 1..=self.n {
            let _ = write!(s, ",x_{i}");
        }
        for i in 1..=self.m {
            let _ = write!(s, ",y_{i}");
        }
        s.push('\n');
        for k in 0..self.len() {
            let _ = write!(s, "{:.16e}", self.time(k));
            for v in self.slow_at(k) {
                let _ = write!(s, ",{v:.16e}");
            }
            if self.m > 0 {
                for v in self.fast_at(k) {
                    let _ = write!(s, ",{v:.16e}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
