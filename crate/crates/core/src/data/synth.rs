use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetItem, Domain};
use crate::error::{Error, Result};
use crate::ndcore::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchMap {
    /// Sketches share the photo feature space.
    Identity,
    /// One fixed random rotation for the whole sketch domain, drawn from
    /// `sketch_transform_seed`. Orthogonal, so no class information is lost.
    Random,
}

/// Synthetic two-domain data. Photos are `centroid + noise`; sketches are a
/// photo-like draw pushed through the sketch map, plus noise, with a fraction
/// of coordinates zeroed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub sketches_per_class: usize,
    pub photos_per_class: usize,
    pub feature_dim: usize,
    /// Standard deviation of class centroids around the origin.
    pub class_separation: f64,
    /// Centroids live in a random subspace of this dimension; `None` uses
    /// the full feature space.
    pub latent_dim: Option<usize>,
    /// Within-class spread of the photo-like draw.
    pub noise_sigma: f64,
    /// Extra noise added to sketches after the map.
    pub sketch_noise_sigma: f64,
    pub sparsify_fraction: f64,
    pub sketch_map: SketchMap,
    pub sketch_transform_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 20,
            sketches_per_class: 50,
            photos_per_class: 50,
            feature_dim: 32,
            class_separation: 1.0,
            latent_dim: None,
            noise_sigma: 0.5,
            sketch_noise_sigma: 0.3,
            sparsify_fraction: 0.3,
            sketch_map: SketchMap::Random,
            sketch_transform_seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.sketches_per_class == 0
            || self.photos_per_class == 0
            || self.feature_dim == 0
        {
            return Err(Error::Config("synthetic counts must be at least 1".into()));
        }
        if let Some(l) = self.latent_dim {
            if l == 0 || l > self.feature_dim {
                return Err(Error::Config(format!(
                    "latent_dim must lie in [1, feature_dim], got {l}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.sparsify_fraction) {
            return Err(Error::Config(format!(
                "sparsify_fraction must lie in [0, 1), got {}",
                self.sparsify_fraction
            )));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Config(format!(
                "class_separation must be > 0, got {}",
                self.class_separation
            )));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("sketch_noise_sigma", self.sketch_noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Gram-Schmidt on Gaussian rows. A Gaussian square matrix is full rank with
/// probability one; a degenerate draw is reported rather than patched.
fn random_rotation(d: usize, rng: &mut Rng) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    for _ in 0..d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _pass in 0..2 {
            for r in &rows {
                let proj: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (vi, ri) in v.iter_mut().zip(r) {
                    *vi -= proj * ri;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::Numeric("degenerate sketch rotation draw".into()));
        }
        rows.push(v.into_iter().map(|x| x / norm).collect());
    }
    Matrix::from_rows(&rows)
}

/// Generates `num_classes × (sketches + photos)` items. Ids are
/// `s{class:04}_{n:04}` / `p{class:04}_{n:04}`; items are ordered by class,
/// sketches before photos.
pub fn generate(cfg: &SynthConfig, rng: &mut Rng) -> Result<Dataset> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let map = match cfg.sketch_map {
        SketchMap::Identity => None,
        SketchMap::Random => Some(random_rotation(d, &mut Rng::new(cfg.sketch_transform_seed))?),
    };
    let zeroed = (cfg.sparsify_fraction * d as f64).round() as usize;

    let centroids: Vec<Vec<f64>> = match cfg.latent_dim {
        None => (0..cfg.num_classes)
            .map(|_| (0..d).map(|_| rng.normal() * cfg.class_separation).collect())
            .collect(),
        Some(l) => {
            let basis = random_rotation(d, rng)?;
            (0..cfg.num_classes)
                .map(|_| {
                    let mut c = vec![0.0; d];
                    for j in 0..l {
                        let z = rng.normal() * cfg.class_separation;
                        for (ci, b) in c.iter_mut().zip(basis.row(j)) {
                            *ci += z * b;
                        }
                    }
                    c
                })
                .collect()
        }
    };

    let mut items = Vec::with_capacity(cfg.num_classes * (cfg.sketches_per_class + cfg.photos_per_class));
    let mut coords: Vec<usize> = (0..d).collect();
    for (class_id, centroid) in centroids.iter().enumerate() {
        for n in 0..cfg.sketches_per_class {
            let draw: Vec<f64> = centroid
                .iter()
                .map(|c| c + rng.normal() * cfg.noise_sigma)
                .collect();
            let mut features = match &map {
                Some(m) => m.matvec(&draw)?,
                None => draw,
            };
            for f in features.iter_mut() {
                *f += rng.normal() * cfg.sketch_noise_sigma;
            }
            if zeroed > 0 {
                rng.shuffle(&mut coords);
                for &k in &coords[..zeroed] {
                    features[k] = 0.0;
                }
            }
            items.push(DatasetItem {
                id: format!("s{class_id:04}_{n:04}"),
                domain: Domain::Sketch,
                class_id,
                features,
            });
        }
        for n in 0..cfg.photos_per_class {
            let features = centroid
                .iter()
                .map(|c| c + rng.normal() * cfg.noise_sigma)
                .collect();
            items.push(DatasetItem {
                id: format!("p{class_id:04}_{n:04}"),
                domain: Domain::Photo,
                class_id,
                features,
            });
        }
    }
    Dataset::new(items)
}
