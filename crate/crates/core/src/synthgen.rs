//! Synthetic paired embeddings with a known linear alignment.
//!
//! Each pair shares a Gaussian latent `z`. Images are `P z + noise`, texts
//! are `Q z + noise`, where `P` and `Q` are different `backbone x latent`
//! maps with orthonormal columns. Raw cross-modal cosine is therefore close
//! to uninformative, while the heads `(P, Q)` (as `d_in x d_out` weights)
//! recover `z` on both sides exactly when the noise is zero.
//!
//! The maps are keyed by `map_seed`, the latents and noise by `seed`, so
//! train/validation/test sets generated with different seeds share one
//! alignment.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contrastive::{initial_log_logit_scale, DualProjector, ProjectionHead};
use crate::dataset::{Lang, PairRecord, PairSet, Style};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_pairs: usize,
    pub latent_dim: usize,
    pub backbone_dim: usize,
    pub noise_sigma: f64,
    pub style: Style,
    pub dataset: String,
    pub lang: Lang,
    pub seed: u64,
    pub map_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_pairs: 1000,
            latent_dim: 16,
            backbone_dim: 768,
            noise_sigma: 0.1,
            style: Style::Descriptive,
            dataset: "synthetic".into(),
            lang: Lang::Other,
            seed: 0,
            map_seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim > self.backbone_dim {
            return Err(Error::Argument(format!(
                "latent_dim must be in 1..={}, got {}",
                self.backbone_dim, self.latent_dim
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Argument(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// The two alignment maps, each `backbone_dim x latent_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthMaps {
    pub image_map: Matrix,
    pub text_map: Matrix,
}

impl SynthMaps {
    pub fn new(backbone_dim: usize, latent_dim: usize, map_seed: u64) -> Self {
        let mut rng = rng::seeded(map_seed, rng::STREAM_SYNTH_MAPS);
        let image_map = orthonormal_columns(backbone_dim, latent_dim, &mut rng);
        let text_map = orthonormal_columns(backbone_dim, latent_dim, &mut rng);
        Self { image_map, text_map }
    }

    pub fn for_spec(spec: &SynthSpec) -> Self {
        Self::new(spec.backbone_dim, spec.latent_dim, spec.map_seed)
    }

    /// Heads that map both modalities straight back to the latent.
    pub fn analytic_projector(&self) -> DualProjector {
        DualProjector {
            image_head: ProjectionHead::new(self.image_map.clone()),
            text_head: ProjectionHead::new(self.text_map.clone()),
            log_logit_scale: initial_log_logit_scale(),
        }
    }
}

/// Gaussian draw orthonormalised by modified Gram-Schmidt, run twice.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let mut c: Vec<Vec<f64>> = (0..cols)
        .map(|_| (0..rows).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for j in 0..cols {
        for _ in 0..2 {
            for k in 0..j {
                let (done, rest) = c.split_at_mut(j);
                let proj: f64 = done[k].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                for (x, q) in rest[0].iter_mut().zip(&done[k]) {
                    *x -= proj * q;
                }
            }
        }
        let n = c[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        c[j].iter_mut().for_each(|v| *v /= n);
    }
    Matrix::from_fn(rows, cols, |i, j| c[j][i] as f32)
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub set: PairSet,
    pub maps: SynthMaps,
}

pub fn generate(spec: &SynthSpec) -> Result<PairSet> {
    Ok(generate_with_maps(spec)?.set)
}

pub fn generate_with_maps(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let maps = SynthMaps::for_spec(spec);
    let (n, d, l) = (spec.n_pairs, spec.backbone_dim, spec.latent_dim);
    let mut rng = rng::seeded(spec.seed, rng::STREAM_SYNTH_DATA);
    let mut images = Vec::with_capacity(n * d);
    let mut texts = Vec::with_capacity(n * d);
    let mut z = vec![0.0f64; l];
    for _ in 0..n {
        z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        for (map, out) in [(&maps.image_map, &mut images), (&maps.text_map, &mut texts)] {
            for r in 0..d {
                let clean: f64 = map.row(r).iter().zip(&z).map(|(&m, &zv)| m as f64 * zv).sum();
                let noise: f64 = StandardNormal.sample(&mut rng);
                out.push((clean + spec.noise_sigma * noise) as f32);
            }
        }
    }

    let mut words = rng::seeded(spec.seed, rng::STREAM_SYNTH_WORDS);
    let records = (0..n)
        .map(|i| PairRecord {
            id: format!("{}-{}-{i}", spec.dataset, spec.seed),
            dataset: spec.dataset.clone(),
            lang: spec.lang,
            style: spec.style,
            image_row: i,
            text_row: i,
            n_words: words.random_range(1..=30),
            text_raw: None,
            extra: Default::default(),
        })
        .collect();
    let set = PairSet::new(records, Matrix::new(n, d, images)?, Matrix::new(n, d, texts)?)?;
    Ok(SynthData { set, maps })
}
