//! Synthetic multi-label data with graded label overlap.
//!
//! Cluster `c` owns the labels `c+1, c+2, ..., c+L` (wrapping around `C`), so
//! neighbouring clusters share `L-1` labels, the next ones `L-2`, and so on.
//! A cluster's centroid is the sum of one fixed prototype per label in its
//! block, and each point is its centroid plus isotropic Gaussian noise.
//! Prototypes have unit norm in expectation (coordinates drawn from
//! N(0, 1/D)) and `noise` is the expected noise norm relative to that.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{DataPoint, LabelSet, MultiLabelDataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub points: usize,
    pub labels: usize,
    pub dim: usize,
    pub clusters: usize,
    pub labels_per_cluster: usize,
    /// Expected norm of the noise vector, relative to a label prototype.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            points: 2000,
            labels: 8,
            dim: 32,
            clusters: 8,
            labels_per_cluster: 3,
            noise: 2.0,
            seed: 0,
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<MultiLabelDataset> {
    let bad = |m: String| Err(Error::InvalidArgument(m));
    if cfg.points == 0 || cfg.labels == 0 || cfg.dim == 0 || cfg.clusters == 0 {
        return bad("points, labels, dim and clusters must be positive".into());
    }
    if cfg.labels_per_cluster == 0 || cfg.labels_per_cluster > cfg.labels {
        return bad(format!(
            "labels per cluster {} outside 1..={}",
            cfg.labels_per_cluster, cfg.labels
        ));
    }
    if !(cfg.noise.is_finite() && cfg.noise >= 0.0) {
        return bad(format!("noise {} must be finite and non-negative", cfg.noise));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coord_scale = 1.0 / (cfg.dim as f64).sqrt();
    let prototypes: Vec<Vec<f64>> = (0..cfg.labels)
        .map(|_| (0..cfg.dim).map(|_| coord_scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let blocks = (0..cfg.clusters)
        .map(|c| {
            let labels: Vec<u32> = (0..cfg.labels_per_cluster)
                .map(|j| ((c + j) % cfg.labels) as u32 + 1)
                .collect();
            LabelSet::from_labels(cfg.labels, &labels)
        })
        .collect::<Result<Vec<_>>>()?;
    let centroids: Vec<Vec<f64>> = blocks
        .iter()
        .map(|b| {
            let mut c = vec![0.0; cfg.dim];
            for l in b.iter() {
                for (x, p) in c.iter_mut().zip(&prototypes[l as usize - 1]) {
                    *x += p;
                }
            }
            c
        })
        .collect();

    let points = (0..cfg.points)
        .map(|i| {
            let c = i % cfg.clusters;
            let features = centroids[c]
                .iter()
                .map(|x| x + cfg.noise * coord_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            DataPoint {
                id: i as u64,
                features,
                labels: blocks[c].clone(),
            }
        })
        .collect();
    MultiLabelDataset::new(points, cfg.dim, cfg.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::similarity_level;

    #[test]
    fn shape_and_determinism() {
        let cfg = SynthConfig { points: 100, seed: 3, ..SynthConfig::default() };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        assert_eq!((a.len(), a.dim, a.label_count), (100, 32, 8));
        assert!(a.points.iter().all(|p| p.labels.len() == 3));
        assert_ne!(a, generate(&SynthConfig { seed: 4, ..cfg }).unwrap());
    }

    #[test]
    fn neighbouring_clusters_overlap() {
        let cfg = SynthConfig { points: 16, ..SynthConfig::default() };
        let ds = generate(&cfg).unwrap();
        let level = |a: usize, b: usize| similarity_level(&ds.points[a].labels, &ds.points[b].labels);
        assert_eq!(level(0, 8), 3);
        assert_eq!(level(0, 1), 2);
        assert_eq!(level(0, 2), 1);
        assert_eq!(level(0, 4), 0);
        // wraps around the label universe
        assert_eq!(level(0, 7), 2);
    }

    #[test]
    fn zero_noise_puts_clusters_on_their_centroid() {
        let ds = generate(&SynthConfig { points: 24, noise: 0.0, ..SynthConfig::default() }).unwrap();
        assert_eq!(ds.points[2].features, ds.points[10].features);
        assert_eq!(ds.points[2].features, ds.points[18].features);
        assert_ne!(ds.points[2].features, ds.points[3].features);
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            SynthConfig { points: 0, ..SynthConfig::default() },
            SynthConfig { labels_per_cluster: 9, ..SynthConfig::default() },
            SynthConfig { noise: -1.0, ..SynthConfig::default() },
            SynthConfig { noise: f64::NAN, ..SynthConfig::default() },
        ] {
            assert!(generate(&cfg).is_err());
        }
    }
}
