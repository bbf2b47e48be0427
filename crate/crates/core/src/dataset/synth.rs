use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Label, Sample};
use crate::error::{Error, Result};
use crate::rng;

/// Interval of the curve parameter `t` for normal sine-toy points.
pub const SINE_T_RANGE: (f64, f64) = (-PI, PI);
/// Vertical extent of the anomaly box.
pub const SINE_Y_RANGE: (f64, f64) = (-2.5, 2.5);

/// Isotropic Gaussian clusters: the first `normal_clusters` centers are
/// normal, the rest anomalous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianClusterSpec {
    pub normal_clusters: usize,
    pub anomalous_clusters: usize,
    pub dim: usize,
    pub sigma: f64,
    pub centers: Vec<Vec<f64>>,
    pub samples_per_cluster: usize,
}

impl GaussianClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.normal_clusters == 0 || self.anomalous_clusters == 0 {
            return Err(Error::InvalidArgument(
                "need at least one normal and one anomalous cluster".into(),
            ));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma {} must be positive", self.sigma)));
        }
        if self.centers.len() != self.normal_clusters + self.anomalous_clusters {
            return Err(Error::InvalidArgument(format!(
                "{} centers for {} clusters",
                self.centers.len(),
                self.normal_clusters + self.anomalous_clusters
            )));
        }
        if let Some(c) = self.centers.iter().find(|c| c.len() != self.dim) {
            return Err(Error::Shape(format!(
                "center of length {} in {}-d spec",
                c.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn label_of(&self, cluster: usize) -> Label {
        if cluster < self.normal_clusters {
            Label::Normal
        } else {
            Label::Anomalous
        }
    }
}

/// Draws `samples_per_cluster` points per cluster, cluster by cluster.
pub fn synth_gaussian_clusters(spec: &GaussianClusterSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut r = rng::seeded(seed);
    let mut samples = Vec::with_capacity(spec.centers.len() * spec.samples_per_cluster);
    for (u, center) in spec.centers.iter().enumerate() {
        let label = spec.label_of(u);
        for _ in 0..spec.samples_per_cluster {
            let x = center
                .iter()
                .map(|c| {
                    let e: f64 = StandardNormal.sample(&mut r);
                    c + spec.sigma * e
                })
                .collect();
            samples.push(Sample::new(x, label));
        }
    }
    Dataset::from_samples(spec.dim, samples)
}

/// Width of the band around the curve kept free of anomalies.
pub fn sine_margin(noise: f64) -> f64 {
    (3.0 * noise).max(0.2)
}

pub fn sine_curve_point(t: f64) -> [f64; 2] {
    [t, t.sin()]
}

/// Normal points `(t, sin t + noise·ε)`; anomalies uniform in the box
/// `SINE_T_RANGE × SINE_Y_RANGE` with vertical distance to the curve of at
/// least [`sine_margin`]. Normals come first.
pub fn synth_sine_toy(n_normal: usize, n_anomalous: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n_normal == 0 || n_anomalous == 0 {
        return Err(Error::InvalidArgument("sine toy needs both classes".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise {noise} must be non-negative")));
    }
    let margin = sine_margin(noise);
    let mut r = rng::seeded(seed);
    let mut samples = Vec::with_capacity(n_normal + n_anomalous);
    for _ in 0..n_normal {
        let t = r.random_range(SINE_T_RANGE.0..SINE_T_RANGE.1);
        let e: f64 = StandardNormal.sample(&mut r);
        samples.push(Sample::new(vec![t, t.sin() + noise * e], Label::Normal));
    }
    while samples.len() < n_normal + n_anomalous {
        let x = r.random_range(SINE_T_RANGE.0..SINE_T_RANGE.1);
        let y = r.random_range(SINE_Y_RANGE.0..SINE_Y_RANGE.1);
        if (y - x.sin()).abs() >= margin {
            samples.push(Sample::new(vec![x, y], Label::Anomalous));
        }
    }
    Dataset::from_samples(2, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_cluster_pair(sep: f64, n: usize) -> GaussianClusterSpec {
        GaussianClusterSpec {
            normal_clusters: 1,
            anomalous_clusters: 1,
            dim: 2,
            sigma: 1.0,
            centers: vec![vec![0.0, 0.0], vec![sep, 0.0]],
            samples_per_cluster: n,
        }
    }

    #[test]
    fn cluster_mean_converges() {
        let ds = synth_gaussian_clusters(&one_cluster_pair(5.0, 1000), 4).unwrap();
        for axis in 0..2 {
            let m: f64 = ds.features_of(Label::Normal).iter().map(|x| x[axis]).sum::<f64>() / 1000.0;
            assert!(m.abs() < 0.1, "axis {axis} mean {m}");
        }
    }

    #[test]
    fn far_clusters_are_separable_by_nearest_centroid() {
        let spec = one_cluster_pair(100.0, 200);
        let ds = synth_gaussian_clusters(&spec, 1).unwrap();
        for s in ds.samples() {
            let d0 = s.features[0].powi(2) + s.features[1].powi(2);
            let d1 = (s.features[0] - 100.0).powi(2) + s.features[1].powi(2);
            let pred = if d0 < d1 { Label::Normal } else { Label::Anomalous };
            assert_eq!(pred, s.label);
        }
    }

    #[test]
    fn overlapping_clusters_defeat_every_threshold() {
        let ds = synth_gaussian_clusters(&one_cluster_pair(1.0, 300), 2).unwrap();
        // Best 1-D threshold along the separating axis, both orientations.
        let mut xs: Vec<(f64, Label)> = ds.samples().iter().map(|s| (s.features[0], s.label)).collect();
        xs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut best = usize::MAX;
        for cut in 0..=xs.len() {
            let err: usize = xs
                .iter()
                .enumerate()
                .filter(|(i, (_, l))| (*i < cut) != (*l == Label::Normal))
                .count();
            best = best.min(err).min(xs.len() - err);
        }
        assert!(best > 0);
    }

    #[test]
    fn generators_are_pure() {
        let spec = one_cluster_pair(3.0, 20);
        assert_eq!(
            synth_gaussian_clusters(&spec, 9).unwrap(),
            synth_gaussian_clusters(&spec, 9).unwrap()
        );
        assert_eq!(synth_sine_toy(5, 5, 0.1, 2).unwrap(), synth_sine_toy(5, 5, 0.1, 2).unwrap());
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = one_cluster_pair(1.0, 1);
        spec.sigma = 0.0;
        assert!(synth_gaussian_clusters(&spec, 0).is_err());
        let mut spec = one_cluster_pair(1.0, 1);
        spec.centers.pop();
        assert!(synth_gaussian_clusters(&spec, 0).is_err());
    }

    #[test]
    fn sine_toy_contract() {
        assert_eq!(sine_curve_point(0.0), [0.0, 0.0]);
        let noise = 0.1;
        let ds = synth_sine_toy(300, 40, noise, 5).unwrap();
        assert_eq!((ds.n_normal(), ds.n_anomalous()), (300, 40));
        let margin = sine_margin(noise);
        for x in ds.features_of(Label::Anomalous) {
            assert!((x[1] - x[0].sin()).abs() >= margin);
        }
        let clean = synth_sine_toy(10, 1, 0.0, 5).unwrap();
        for x in clean.features_of(Label::Normal) {
            assert_eq!(x[1], x[0].sin());
        }
    }
}
