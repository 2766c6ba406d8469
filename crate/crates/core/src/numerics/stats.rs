use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentStats {
    pub n: usize,
    pub mean: f64,
    /// Unbiased (n - 1) sample variance.
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

pub fn moments(x: &Tensor) -> Result<MomentStats> {
    moments_of(x.data().iter().map(|&v| f64::from(v)), x.len())
}

fn moments_of(values: impl Iterator<Item = f64> + Clone, n: usize) -> Result<MomentStats> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "moments need at least 2 elements, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = values.clone().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (pm2, pm3, pm4) = (m2 / nf, m3 / nf, m4 / nf);
    let (skewness, excess_kurtosis) = if pm2 > 0.0 {
        (pm3 / pm2.powf(1.5), pm4 / (pm2 * pm2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    Ok(MomentStats {
        n,
        mean,
        variance: m2 / (nf - 1.0),
        skewness,
        excess_kurtosis,
    })
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Kolmogorov-Smirnov statistic `sup |F_n - Phi|` against N(0, 1).
pub fn ks_standard_normal(x: &Tensor) -> Result<f64> {
    let n = x.len();
    if n < 8 {
        return Err(Error::invalid(format!(
            "KS statistic needs at least 8 elements, got {n}"
        )));
    }
    let mut sorted = x.to_f64();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let cdf = normal_cdf(v);
            let above = (i + 1) as f64 / nf - cdf;
            let below = cdf - i as f64 / nf;
            above.max(below)
        })
        .fold(0.0, f64::max);
    Ok(d)
}

/// Statistical consistency with N(0, I) at the 4-sigma / alpha = 0.01 level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalityCheck {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub ks: f64,
    pub mean_bound: f64,
    pub variance_bound: f64,
    pub ks_bound: f64,
    pub passes: bool,
}

/// KS critical value coefficient at alpha = 0.01.
pub const KS_CRITICAL_001: f64 = 1.63;

pub fn normality(x: &Tensor) -> Result<NormalityCheck> {
    let m = moments(x)?;
    let ks = ks_standard_normal(x)?;
    let nf = m.n as f64;
    let mean_bound = 4.0 / nf.sqrt();
    let variance_bound = 4.0 * (2.0 / nf).sqrt();
    let ks_bound = KS_CRITICAL_001 / nf.sqrt();
    Ok(NormalityCheck {
        n: m.n,
        mean: m.mean,
        variance: m.variance,
        ks,
        mean_bound,
        variance_bound,
        ks_bound,
        passes: m.mean.abs() <= mean_bound
            && (m.variance - 1.0).abs() <= variance_bound
            && ks <= ks_bound,
    })
}

/// Pearson correlation of two equally sized tensors, flattened.
pub fn pearson(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.len() as f64;
    let (ma, mb) = (
        a.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n,
        b.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n,
    );
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (f64::from(x) - ma, f64::from(y) - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        // Constant inputs: identical ones are perfectly correlated.
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    Ok(sab / (saa * sbb).sqrt())
}
