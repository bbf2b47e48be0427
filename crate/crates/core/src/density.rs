//! Gaussian kernel density estimation and Monte Carlo entropy.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_BANDWIDTH: f64 = 0.5;
pub const DEFAULT_KDE_SAMPLES: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    Silverman,
}

/// Isotropic product-Gaussian KDE with a shared scalar bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    points: Vec<Vec<f64>>,
    h: f64,
    dim: usize,
}

/// `1.06 · σ̄ · n^{-1/5}` with σ̄ the mean per-dimension sample std.
/// `None` when every dimension has zero spread.
pub fn silverman_bandwidth(points: &[Vec<f64>]) -> Option<f64> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let dim = points[0].len();
    let mut total = 0.0;
    for j in 0..dim {
        let mean = points.iter().map(|p| p[j]).sum::<f64>() / n as f64;
        let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        total += var.sqrt();
    }
    let sigma = total / dim as f64;
    (sigma > 0.0).then(|| 1.06 * sigma * (n as f64).powf(-0.2))
}

pub fn fit_kde(points: &[Vec<f64>], bandwidth: Bandwidth) -> Result<KdeModel> {
    let Some(first) = points.first() else {
        return Err(Error::InvalidArgument("KDE needs at least one point".into()));
    };
    let dim = first.len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("KDE points must share a positive dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("KDE points must be finite".into()));
    }
    let h = match bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Silverman => silverman_bandwidth(points).unwrap_or_else(|| {
            log::warn!("zero variance under Silverman's rule; using bandwidth {DEFAULT_BANDWIDTH}");
            DEFAULT_BANDWIDTH
        }),
    };
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth {h} must be positive")));
    }
    Ok(KdeModel {
        points: points.to_vec(),
        h,
        dim,
    })
}

impl KdeModel {
    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Same bandwidth with `x` added as one more mixture component.
    pub fn with_point(&self, x: &[f64]) -> KdeModel {
        assert_eq!(x.len(), self.dim, "KDE point dimension mismatch");
        let mut points = self.points.clone();
        points.push(x.to_vec());
        KdeModel {
            points,
            h: self.h,
            dim: self.dim,
        }
    }

    fn log_norm(&self) -> f64 {
        -(self.points.len() as f64).ln() - 0.5 * self.dim as f64 * (2.0 * PI * self.h * self.h).ln()
    }

    fn exponents(&self, x: &[f64]) -> Vec<f64> {
        let inv = 1.0 / (2.0 * self.h * self.h);
        self.points
            .iter()
            .map(|p| -inv * p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "KDE query dimension mismatch");
        let e = self.exponents(x);
        let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = e.iter().map(|v| (v - max).exp()).sum();
        max + s.ln() + self.log_norm()
    }

    /// `log p̂(x)` and `∇_x log p̂(x) = Σ_i w_i (x_i − x) / h²` with softmax weights `w`.
    pub fn log_pdf_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(x.len(), self.dim, "KDE query dimension mismatch");
        let e = self.exponents(x);
        let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = e.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = w.iter().sum();
        let mut grad = vec![0.0; self.dim];
        let inv_h2 = 1.0 / (self.h * self.h);
        for (p, wi) in self.points.iter().zip(&w) {
            let c = wi / s * inv_h2;
            for (g, (pj, xj)) in grad.iter_mut().zip(p.iter().zip(x)) {
                *g += c * (pj - xj);
            }
        }
        (max + s.ln() + self.log_norm(), grad)
    }
}

/// Each draw is a uniformly chosen support point plus `h · N(0, I)`.
pub fn sample_kde(kde: &KdeModel, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(seed);
    (0..count)
        .map(|_| {
            let i = r.random_range(0..kde.points.len());
            kde.points[i]
                .iter()
                .map(|c| {
                    let e: f64 = StandardNormal.sample(&mut r);
                    c + kde.h * e
                })
                .collect()
        })
        .collect()
}

/// `−(1/ς) Σ_j log p̂(x_j)` over `ς` draws from the KDE itself.
pub fn entropy_mc(kde: &KdeModel, count: usize, seed: u64) -> f64 {
    assert!(count >= 1, "entropy estimate needs at least one sample");
    let xs = sample_kde(kde, count, seed);
    -xs.iter().map(|x| kde.log_pdf(x)).sum::<f64>() / count as f64
}

/// [`entropy_mc`] and its gradient with respect to the last support point,
/// holding the draws' component choices and noise fixed.
pub fn entropy_mc_last_grad(kde: &KdeModel, count: usize, seed: u64) -> (f64, Vec<f64>) {
    assert!(count >= 1, "entropy estimate needs at least one sample");
    let last = kde.points.len() - 1;
    let c = &kde.points[last];
    let inv_h2 = 1.0 / (kde.h * kde.h);
    let mut r = rng::seeded(seed);
    let mut h = 0.0;
    let mut grad = vec![0.0; kde.dim];
    for _ in 0..count {
        let i = r.random_range(0..kde.points.len());
        let y: Vec<f64> = kde.points[i]
            .iter()
            .map(|v| {
                let e: f64 = StandardNormal.sample(&mut r);
                v + kde.h * e
            })
            .collect();
        let (lp, gy) = kde.log_pdf_grad(&y);
        h -= lp;
        let e = kde.exponents(&y);
        let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = e.iter().map(|v| (v - max).exp()).sum();
        let w_last = (e[last] - max).exp() / z;
        for j in 0..kde.dim {
            let mut d = w_last * (y[j] - c[j]) * inv_h2;
            if i == last {
                d += gy[j];
            }
            grad[j] -= d;
        }
    }
    let n = count as f64;
    (h / n, grad.into_iter().map(|g| g / n).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::*;

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect()
    }

    fn naive_log_pdf(points: &[Vec<f64>], h: f64, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let mut total = 0.0;
        for p in points {
            let mut k = 1.0;
            for (a, b) in p.iter().zip(x) {
                let u = (a - b) / h;
                k *= (-0.5 * u * u).exp() / (2.0 * PI).sqrt();
            }
            total += k;
        }
        (total / (points.len() as f64 * h.powf(d))).ln()
    }

    #[test]
    fn entropy_gradient_in_the_added_point_matches_finite_differences() {
        let base = fit_kde(&random_points(12, 2, 4), Bandwidth::Fixed(0.5)).unwrap();
        let x = [0.3, -0.7];
        let (h, g) = entropy_mc_last_grad(&base.with_point(&x), 300, 8);
        assert!((h - entropy_mc(&base.with_point(&x), 300, 8)).abs() < 1e-12);
        for j in 0..2 {
            let mut a = x;
            let mut b = x;
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let fd = (entropy_mc(&base.with_point(&a), 300, 8) - entropy_mc(&base.with_point(&b), 300, 8)) / 2e-6;
            assert!((fd - g[j]).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} vs {}", g[j]);
        }
    }

    #[test]
    fn single_kernel_at_origin() {
        let kde = fit_kde(&[vec![0.0]], Bandwidth::Fixed(1.0)).unwrap();
        assert!((kde.log_pdf(&[0.0]) - (-0.5 * (2.0 * PI).ln())).abs() < 1e-15);
        assert!((kde.log_pdf(&[0.0]).exp() - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn silverman_formula() {
        // Symmetric ±1 design: sample std exactly 1 per axis.
        let pts: Vec<Vec<f64>> = (0..100)
            .map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 } * (99.0f64 / 100.0).sqrt()])
            .collect();
        let kde = fit_kde(&pts, Bandwidth::Silverman).unwrap();
        assert!((kde.bandwidth() - 1.06 * 100f64.powf(-0.2)).abs() < 1e-12);
        assert!((kde.bandwidth() - 0.42199).abs() < 1e-5);
    }

    #[test]
    fn silverman_zero_variance_falls_back() {
        let kde = fit_kde(&[vec![1.0, 1.0], vec![1.0, 1.0]], Bandwidth::Silverman).unwrap();
        assert_eq!(kde.bandwidth(), DEFAULT_BANDWIDTH);
        let kde = fit_kde(&[vec![3.0]], Bandwidth::Fixed(0.5)).unwrap();
        assert_eq!(kde.bandwidth(), 0.5);
    }

    #[test]
    fn matches_direct_summation() {
        let pts = random_points(20, 3, 1);
        let kde = fit_kde(&pts, Bandwidth::Fixed(0.7)).unwrap();
        for q in random_points(30, 3, 2) {
            assert!((kde.log_pdf(&q) - naive_log_pdf(&pts, 0.7, &q)).abs() <= 1e-9);
        }
    }

    #[test]
    fn far_queries_stay_finite() {
        let kde = fit_kde(&[vec![0.0, 0.0]], Bandwidth::Fixed(0.1)).unwrap();
        let v = kde.log_pdf(&[1e3, 0.0]);
        assert!(v.is_finite() && v < -1e7);
    }

    #[test]
    fn symmetric_support_has_zero_gradient() {
        let kde = fit_kde(&[vec![-1.3], vec![1.3]], Bandwidth::Fixed(0.5)).unwrap();
        let (_, g) = kde.log_pdf_grad(&[0.0]);
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let pts = random_points(15, 2, 5);
        let kde = fit_kde(&pts, Bandwidth::Fixed(0.6)).unwrap();
        for q in random_points(25, 2, 6) {
            let (_, g) = kde.log_pdf_grad(&q);
            for j in 0..2 {
                let mut a = q.clone();
                let mut b = q.clone();
                a[j] += 1e-5;
                b[j] -= 1e-5;
                let fd = (kde.log_pdf(&a) - kde.log_pdf(&b)) / 2e-5;
                assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn degenerate_bandwidth_samples_support() {
        let pts = random_points(4, 2, 8);
        let kde = fit_kde(&pts, Bandwidth::Fixed(1e-12)).unwrap();
        for s in sample_kde(&kde, 50, 1) {
            assert!(pts.iter().any(|p| p.iter().zip(&s).all(|(a, b)| (a - b).abs() < 1e-9)));
        }
    }

    #[test]
    fn single_point_sample_mean() {
        let kde = fit_kde(&[vec![2.0]], Bandwidth::Fixed(1.0)).unwrap();
        let n = 100_000;
        let m = sample_kde(&kde, n, 3).iter().map(|x| x[0]).sum::<f64>() / n as f64;
        assert!((m - 2.0).abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn entropy_is_negative_mean_log_density() {
        let kde = fit_kde(&random_points(10, 2, 1), Bandwidth::Fixed(0.5)).unwrap();
        let xs = sample_kde(&kde, 300, 4);
        let direct = -xs.iter().map(|x| kde.log_pdf(x)).sum::<f64>() / 300.0;
        assert_eq!(entropy_mc(&kde, 300, 4), direct);
    }

    #[test]
    fn single_kernel_entropy_matches_gaussian() {
        let kde = fit_kde(&[vec![0.0]], Bandwidth::Fixed(1.0)).unwrap();
        let h = entropy_mc(&kde, 100_000, 2);
        assert!((h - 0.5 * (2.0 * PI * std::f64::consts::E).ln()).abs() < 0.05);
    }

    #[test]
    fn spreading_support_raises_entropy() {
        let pts = random_points(12, 2, 3);
        let wide: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| v * 10.0).collect()).collect();
        let a = entropy_mc(&fit_kde(&pts, Bandwidth::Fixed(0.5)).unwrap(), 300, 7);
        let b = entropy_mc(&fit_kde(&wide, Bandwidth::Fixed(0.5)).unwrap(), 300, 7);
        assert!(b > a);
    }

    #[test]
    fn density_integrates_to_one() {
        let kde = fit_kde(&random_points(6, 2, 9), Bandwidth::Fixed(0.4)).unwrap();
        let mut r = rng::seeded(10);
        let n = 200_000;
        let (lo, hi) = (-5.0, 5.0);
        let area = (hi - lo) * (hi - lo);
        let mut acc = 0.0;
        for _ in 0..n {
            let q = [r.random_range(lo..hi), r.random_range(lo..hi)];
            acc += kde.log_pdf(&q).exp();
        }
        assert!((acc / n as f64 * area - 1.0).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn entropy_ignores_support_order(seed in 0u64..1000) {
            let pts = random_points(8, 2, seed);
            let mut rev = pts.clone();
            rev.reverse();
            let a = fit_kde(&pts, Bandwidth::Fixed(0.5)).unwrap();
            let b = fit_kde(&rev, Bandwidth::Fixed(0.5)).unwrap();
            // Draws depend on index order, so compare the density instead of the sampler.
            let xs = sample_kde(&a, 64, seed);
            let ha = -xs.iter().map(|x| a.log_pdf(x)).sum::<f64>() / 64.0;
            let hb = -xs.iter().map(|x| b.log_pdf(x)).sum::<f64>() / 64.0;
            prop_assert!((ha - hb).abs() < 1e-12);
            prop_assert_eq!(entropy_mc(&a, 64, seed), entropy_mc(&a, 64, seed));
        }
    }
}
