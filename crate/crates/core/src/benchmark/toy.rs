use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::systems::{SlowFastSystem, VectorField};

static DEFAULT_LIPSCHITZ: OnceLock<(f64, f64)> = OnceLock::new();

/// Smooth radial cutoff: quintic smoothstep in `r^2` between the inner and
/// outer squared radii, 1 inside and 0 outside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blend {
    pub inner_r2: f64,
    pub outer_r2: f64,
}

impl Default for Blend {
    fn default() -> Self {
        Blend {
            inner_r2: 1.0 / 16.0,
            outer_r2: 1.0 / 8.0,
        }
    }
}

impl Blend {
    #[inline]
    pub fn weight(&self, r2: f64) -> f64 {
        if r2 <= self.inner_r2 {
            1.0
        } else if r2 >= self.outer_r2 {
            0.0
        } else {
            let s = (r2 - self.inner_r2) / (self.outer_r2 - self.inner_r2);
            1.0 - s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
        }
    }

    /// `dw/d(r^2)`.
    #[inline]
    pub fn derivative(&self, r2: f64) -> f64 {
        if r2 <= self.inner_r2 || r2 >= self.outer_r2 {
            0.0
        } else {
            let width = self.outer_r2 - self.inner_r2;
            let s = (r2 - self.inner_r2) / width;
            -30.0 * s * s * (1.0 - s) * (1.0 - s) / width
        }
    }
}

/// The scalar toy model: `f = -x y w`, `g = (x^2 - 2 y^2) w`, `A = 0`, `B = -1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub sigma: f64,
    pub eps: f64,
    pub blend: Blend,
}

impl Default for ToyModel {
    fn default() -> Self {
        ToyModel {
            sigma: 0.1,
            eps: 0.01,
            blend: Blend::default(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ToySlow(pub Blend);

#[derive(Clone, Copy, Debug)]
pub struct ToyFast(pub Blend);

impl VectorField for ToySlow {
    #[inline]
    fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let (a, b) = (x[0], y[0]);
        let w = self.0.weight(a * a + b * b);
        out[0] = -a * b * w;
    }
}

impl VectorField for ToyFast {
    #[inline]
    fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let (a, b) = (x[0], y[0]);
        let w = self.0.weight(a * a + b * b);
        out[0] = (a * a - 2.0 * b * b) * w;
    }
}

impl ToyModel {
    pub fn new(sigma: f64, eps: f64) -> Self {
        ToyModel {
            sigma,
            eps,
            blend: Blend::default(),
        }
    }

    pub fn slow_field(&self) -> ToySlow {
        ToySlow(self.blend)
    }

    pub fn fast_field(&self) -> ToyFast {
        ToyFast(self.blend)
    }

    pub fn f(&self, x: f64, y: f64) -> f64 {
        let mut o = [0.0];
        self.slow_field().eval(&[x], &[y], &mut o);
        o[0]
    }

    pub fn g(&self, x: f64, y: f64) -> f64 {
        let mut o = [0.0];
        self.fast_field().eval(&[x], &[y], &mut o);
        o[0]
    }

    /// Global Lipschitz constants `(L_f, L_g)`: the supremum of the gradient
    /// norms over the support disk, on a polar grid.
    pub fn lipschitz_constants(&self) -> (f64, f64) {
        let r_max = self.blend.outer_r2.sqrt();
        let (nr, nt) = (1200, 720);
        let (mut lf, mut lg) = (0.0f64, 0.0f64);
        for i in 0..=nr {
            let r = r_max * i as f64 / nr as f64;
            let r2 = r * r;
            let (w, dw) = (self.blend.weight(r2), self.blend.derivative(r2));
            for j in 0..nt {
                let th = std::f64::consts::TAU * j as f64 / nt as f64;
                let (x, y) = (r * th.cos(), r * th.sin());
                let fx = -y * w - x * y * dw * 2.0 * x;
                let fy = -x * w - x * y * dw * 2.0 * y;
                let q = x * x - 2.0 * y * y;
                let gx = 2.0 * x * w + q * dw * 2.0 * x;
                let gy = -4.0 * y * w + q * dw * 2.0 * y;
                lf = lf.max(fx.hypot(fy));
                lg = lg.max(gx.hypot(gy));
            }
        }
        (lf, lg)
    }

    pub fn system(&self) -> Result<SlowFastSystem> {
        let (lf, lg) = if self.blend == Blend::default() {
            *DEFAULT_LIPSCHITZ.get_or_init(|| self.lipschitz_constants())
        } else {
            self.lipschitz_constants()
        };
        Ok(SlowFastSystem::new(
            "toy",
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, -1.0),
            Arc::new(self.slow_field()),
            Arc::new(self.fast_field()),
            self.sigma,
            self.eps,
        )?
        .with_lipschitz(lf, lg))
    }
}

pub fn toy_system(sigma: f64, eps: f64) -> Result<SlowFastSystem> {
    ToyModel::new(sigma, eps).system()
}
