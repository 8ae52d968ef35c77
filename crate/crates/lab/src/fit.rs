//! Log-log scaling fits and the two-segment knee fit.

use crate::error::{LabError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// Which episodes of a trace enter a slope fit: `n ≥ max(start,
/// ceil(burn_in_fraction·N) + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub burn_in_fraction: f64,
    pub start: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            burn_in_fraction: 0.1,
            start: 1,
        }
    }
}

impl FitSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(LabError::Config("fit.burn_in_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn first_episode(&self, n_total: usize) -> usize {
        let burn = (self.burn_in_fraction * n_total as f64).ceil() as usize;
        self.start.max(burn + 1)
    }
}

/// Ordinary least squares of `y` on `x`; `None` with fewer than two
/// distinct `x`.
pub fn ols(xs: &[f64], ys: &[f64]) -> Option<FitReport> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) } else { 1.0 };
    Some(FitReport {
        slope,
        intercept,
        r_squared,
        n_points: n,
    })
}

/// OLS of `ln y` on `ln x` over the points where both are positive and
/// finite.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Option<FitReport> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .unzip();
    ols(&lx, &ly)
}

/// Log-log fit of a per-episode metric over the episodes selected by
/// `settings`.
pub fn trace_fit(episodes: &[usize], values: &[f64], n_total: usize, settings: &FitSettings) -> Option<FitReport> {
    let lo = settings.first_episode(n_total);
    let (xs, ys): (Vec<f64>, Vec<f64>) = episodes
        .iter()
        .zip(values)
        .filter(|(n, _)| **n >= lo)
        .map(|(n, v)| (*n as f64, *v))
        .unzip();
    loglog_fit(&xs, &ys)
}

/// Continuous two-segment linear fit with the break at one of the
/// interior points (each segment keeps at least two points).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KneeFit {
    /// `x` of the break point.
    pub knee_x: f64,
    pub left_slope: f64,
    pub right_slope: f64,
    pub sse: f64,
}

pub fn knee_fit(xs: &[f64], ys: &[f64]) -> Option<KneeFit> {
    let n = xs.len();
    if n < 3 || n != ys.len() {
        return None;
    }
    let mut best: Option<KneeFit> = None;
    for k in 1..n - 1 {
        // hinge basis: y ≈ a + b·(x − x_k)⁻ + c·(x − x_k)⁺
        let xk = xs[k];
        let rows: Vec<[f64; 3]> = xs.iter().map(|&x| [1.0, (x - xk).min(0.0), (x - xk).max(0.0)]).collect();
        let Some(coef) = least_squares3(&rows, ys) else {
            continue;
        };
        let sse: f64 = rows
            .iter()
            .zip(ys)
            .map(|(r, y)| {
                let f = coef[0] + coef[1] * r[1] + coef[2] * r[2];
                (y - f) * (y - f)
            })
            .sum();
        if best.is_none_or(|b| sse < b.sse - 1e-15) {
            best = Some(KneeFit {
                knee_x: xk,
                left_slope: coef[1],
                right_slope: coef[2],
                sse,
            });
        }
    }
    best
}

fn least_squares3(rows: &[[f64; 3]], ys: &[f64]) -> Option<[f64; 3]> {
    let mut a = nalgebra::Matrix3::<f64>::zeros();
    let mut b = nalgebra::Vector3::<f64>::zeros();
    for (r, y) in rows.iter().zip(ys) {
        let v = nalgebra::Vector3::from(*r);
        a += v * v.transpose();
        b += v * *y;
    }
    let sol = a.lu().solve(&b)?;
    Some([sol[0], sol[1], sol[2]])
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Standard error of the sample median from the scaled median absolute
/// deviation: `1.2533·1.4826·MAD/sqrt(n)`.
pub fn median_standard_error(values: &[f64]) -> Option<f64> {
    let m = median(values)?;
    let dev: Vec<f64> = values.iter().filter(|x| !x.is_nan()).map(|x| (x - m).abs()).collect();
    let mad = median(&dev)?;
    Some(1.2533 * 1.4826 * mad / (dev.len() as f64).sqrt())
}
