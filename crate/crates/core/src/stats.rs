//! Small statistics helpers shared by the estimators.

use crate::parallel::pairwise_sum;

/// Mean and standard error of the mean.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(v) / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Batch-means estimate of the mean of a correlated series and its SE.
pub fn batch_means(series: &[f64], n_batches: usize) -> (f64, f64) {
    let nb = n_batches.max(2);
    let len = series.len() / nb;
    if len == 0 {
        return mean_se(series);
    }
    let means: Vec<f64> = (0..nb)
        .map(|b| pairwise_sum(&series[b * len..(b + 1) * len]) / len as f64)
        .collect();
    mean_se(&means)
}

/// Sums of a fixed-size set of accumulators, merged in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub count: f64,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl Moments {
    pub fn new(k: usize) -> Self {
        Moments {
            count: 0.0,
            sum: vec![0.0; k],
            sum_sq: vec![0.0; k],
        }
    }

    pub fn add(&mut self, v: &[f64]) {
        self.count += 1.0;
        for (i, x) in v.iter().enumerate() {
            self.sum[i] += x;
            self.sum_sq[i] += x * x;
        }
    }

    pub fn merge(&mut self, o: &Moments) {
        self.count += o.count;
        for i in 0..self.sum.len() {
            self.sum[i] += o.sum[i];
            self.sum_sq[i] += o.sum_sq[i];
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.sum[i] / self.count
    }

    pub fn se(&self, i: usize) -> f64 {
        let m = self.mean(i);
        let var = (self.sum_sq[i] / self.count - m * m).max(0.0) * self.count / (self.count - 1.0);
        (var / self.count).sqrt()
    }
}

/// Least-squares slope of `log(y)` against `t`.
pub fn log_slope(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len() as f64;
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let tm = t.iter().sum::<f64>() / n;
    let ym = ly.iter().sum::<f64>() / n;
    let sxy: f64 = t.iter().zip(&ly).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let sxx: f64 = t.iter().map(|a| (a - tm) * (a - tm)).sum();
    sxy / sxx
}
