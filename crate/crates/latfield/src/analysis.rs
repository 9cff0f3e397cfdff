//! Log-log slope fits over radial shells.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    /// Half-width of the 95% confidence interval on the slope.
    pub ci95: f64,
    pub r_squared: f64,
}

fn t_quantile_975(dof: usize) -> f64 {
    const T: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131,
        2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
    ];
    if dof == 0 {
        f64::INFINITY
    } else if dof <= 30 {
        T[dof - 1]
    } else {
        1.96
    }
}

/// Ordinary least squares y = a + b x.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let dof = x.len().saturating_sub(2);
    let stderr = if dof > 0 { (sse / dof as f64 / sxx).sqrt() } else { f64::INFINITY };
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    LinearFit { slope, intercept, stderr, ci95: t_quantile_975(dof) * stderr, r_squared }
}

#[derive(Debug, Clone, Serialize)]
pub struct ShellFit {
    pub slope: f64,
    pub ci95: f64,
    pub r_squared: f64,
    /// Power of log r divided out before fitting.
    pub log_power: f64,
    /// (radius of the maximising site, maximum) per shell.
    pub shells: Vec<(f64, f64)>,
}

pub const MIN_SHELLS: usize = 4;
pub const MIN_SITES_PER_SHELL: usize = 8;

/// Shell-max log-log slope of `(radius, value)` samples on [r_min, r_max],
/// with shells growing geometrically by 2^{1/4}. Values are divided by
/// (log r)^q before fitting.
pub fn shell_fit(samples: &[(f64, f64)], r_min: f64, r_max: f64, q: f64) -> Result<ShellFit> {
    let ratio = 2f64.powf(0.25);
    let nsh = ((r_max / r_min).ln() / ratio.ln()).ceil().max(1.0) as usize;
    let mut best = vec![(0.0f64, f64::NEG_INFINITY); nsh];
    let mut count = vec![0usize; nsh];
    for &(r, v) in samples {
        if r < r_min || r > r_max * (1.0 + 1e-12) {
            continue;
        }
        let k = (((r / r_min).ln() / ratio.ln()).floor() as usize).min(nsh - 1);
        count[k] += 1;
        if v > best[k].1 {
            best[k] = (r, v);
        }
    }
    let shells: Vec<(f64, f64)> = best
        .iter()
        .zip(&count)
        .filter(|(b, &c)| c >= MIN_SITES_PER_SHELL && b.1 > 0.0 && b.1.is_finite())
        .map(|(b, _)| *b)
        .collect();
    if shells.len() < MIN_SHELLS {
        return Err(Error::WindowTooSmall(format!(
            "{} usable shells in [{r_min}, {r_max}], need {MIN_SHELLS}",
            shells.len()
        )));
    }
    let x: Vec<f64> = shells.iter().map(|s| s.0.ln()).collect();
    let y: Vec<f64> = shells.iter().map(|s| s.1.ln() - q * s.0.ln().ln()).collect();
    let f = linear_fit(&x, &y);
    Ok(ShellFit { slope: f.slope, ci95: f.ci95, r_squared: f.r_squared, log_power: q, shells })
}

/// Power-law fit of `values` against `radii`, optionally dividing by (log r)^q.
pub fn power_fit(radii: &[f64], values: &[f64], q: f64) -> LinearFit {
    let x: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let y: Vec<f64> = radii
        .iter()
        .zip(values)
        .map(|(r, v)| if q == 0.0 { v.ln() } else { v.ln() - q * r.ln().ln() })
        .collect();
    linear_fit(&x, &y)
}

#[derive(Debug, Clone, Serialize)]
pub struct LogGrowth {
    /// Coefficient A in v ≈ A log r + c.
    pub coefficient: f64,
    pub r_squared: f64,
    pub detected: bool,
    /// Slope of the power-law fit of exp(v): equals A for exact log growth.
    pub exp_slope: f64,
}

/// Detects logarithmic growth of shell means of signed samples.
pub fn log_growth(samples: &[(f64, f64)], r_min: f64, r_max: f64) -> Result<LogGrowth> {
    let sel: Vec<&(f64, f64)> = samples.iter().filter(|(r, _)| *r >= r_min && *r <= r_max).collect();
    if sel.len() < MIN_SHELLS * MIN_SITES_PER_SHELL {
        return Err(Error::WindowTooSmall("too few samples for log fit".into()));
    }
    let x: Vec<f64> = sel.iter().map(|s| s.0.ln()).collect();
    let y: Vec<f64> = sel.iter().map(|s| s.1).collect();
    let f = linear_fit(&x, &y);
    Ok(LogGrowth { coefficient: f.slope, r_squared: f.r_squared, detected: f.r_squared > 0.99, exp_slope: f.slope })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let mut s = Vec::new();
        for i in 0..2000 {
            let r = 4.0 + i as f64 * 0.05;
            for _ in 0..3 {
                s.push((r, 3.0 * r.powf(-2.5)));
            }
        }
        let f = shell_fit(&s, 4.0, 100.0, 0.0).unwrap();
        assert!((f.slope + 2.5).abs() < 1e-10);
        let s2: Vec<(f64, f64)> = s.iter().map(|&(r, v)| (r, v * r.ln())).collect();
        let f = shell_fit(&s2, 4.0, 100.0, 1.0).unwrap();
        assert!((f.slope + 2.5).abs() < 1e-10);
        assert!(shell_fit(&s, 4.0, 5.0, 0.0).is_err());
    }
}
