//! Samples, synthetic scenes, on-disk datasets and batching.

mod io;
mod scene;

pub use io::{decode_pfm, decode_ppm, encode_pfm, encode_ppm, list_ids, read_sample, write_sample};
pub use scene::{generate_scene, DepthSampling, Scene, SceneConfig, MIN_NOISY_DEPTH};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objective::Target;
use crate::tensor::Tensor;

/// One image with its depth truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// `3 x H x W`, values in `[0, 1]`.
    pub rgb: Tensor,
    /// Row-major `H x W`; positive wherever `mask` is set.
    pub depth: Vec<f32>,
    pub mask: Vec<bool>,
    /// Generator seed and parameters, or whatever the producer recorded.
    pub meta: Vec<(String, String)>,
}

/// Samples of one split, in id order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads `<root>/<split>/`.
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let dir = root.join(split);
        let ids = list_ids(&dir)?;
        let samples = ids.iter().map(|id| read_sample(&dir, id)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { ids, samples })
    }

    /// Generates `count` scenes with seeds `config.seed + i`.
    pub fn synthetic(config: &SceneConfig, count: usize) -> Result<Self> {
        let mut ds = Dataset::default();
        for i in 0..count {
            let cfg = SceneConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..config.clone()
            };
            ds.ids.push(format!("{i:05}"));
            ds.samples.push(generate_scene(&cfg)?.sample);
        }
        Ok(ds)
    }

    /// Writes every sample to `<root>/<split>/`.
    pub fn save(&self, root: &Path, split: &str) -> Result<()> {
        let dir = root.join(split);
        for (id, s) in self.ids.iter().zip(&self.samples) {
            write_sample(&dir, id, s)?;
        }
        Ok(())
    }

    /// Stacks the chosen samples into a network input and a loss target.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Target)> {
        let first = indices
            .first()
            .map(|&i| &self.samples[i])
            .ok_or_else(|| Error::usage("empty batch"))?;
        let (h, w) = (first.height, first.width);
        let mut rgb = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut depth = Vec::with_capacity(indices.len() * h * w);
        let mut mask = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            let s = &self.samples[i];
            if (s.height, s.width) != (h, w) {
                return Err(Error::config("samples in one batch must share extents"));
            }
            rgb.extend_from_slice(s.rgb.data());
            depth.extend(s.depth.iter().map(|&d| d as f64));
            mask.extend_from_slice(&s.mask);
        }
        let b = indices.len();
        Ok((
            Tensor::new(&[b, 3, h, w], rgb)?,
            Target::new(Tensor::new(&[b, 1, h, w], depth)?, mask)?,
        ))
    }
}

/// Index batches for one epoch: shuffled by `(shuffle_seed, epoch)`, final
/// partial batch dropped.
pub fn batch_iter(n_samples: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n_samples == 0 {
        return Err(Error::usage("cannot batch an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    let seed = shuffle_seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}
