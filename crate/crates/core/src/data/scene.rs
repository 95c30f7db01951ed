//! Procedural planar scenes with known depth.
//!
//! The image is split into Voronoi cells (convex by construction). Every cell
//! carries a tilted depth plane, an albedo and a texture phase; color is a
//! depth-dependent shading of the albedo plus texture. Optional
//! heteroscedastic noise with standard deviation `kappa·depth` corrupts the
//! stored depth while the clean map is kept alongside.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse_value, unknown_key, ConfigSection};
use crate::error::{Error, Result};
use crate::model::INPUT_MULTIPLE;
use crate::tensor::Tensor;

use super::Sample;

/// Smallest depth a noisy sample may take.
pub const MIN_NOISY_DEPTH: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Largest plane tilt, as a fraction of the depth range across the image.
    pub max_slope: f64,
    /// Amplitude of the color texture.
    pub texture_noise: f64,
    /// Depth noise standard deviation per unit depth; 0 disables noise.
    pub kappa: f64,
    /// Range of the per-channel albedo draw. Equal bounds make brightness a
    /// function of depth and texture alone.
    pub albedo_min: f64,
    pub albedo_max: f64,
    pub depth_sampling: DepthSampling,
    pub seed: u64,
}

/// Distribution of each plane's depth offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthSampling {
    Uniform,
    /// Uniform in `ln z`, so near and far octaves are equally represented.
    LogUniform,
}

impl DepthSampling {
    pub fn name(self) -> &'static str {
        match self {
            DepthSampling::Uniform => "uniform",
            DepthSampling::LogUniform => "log_uniform",
        }
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            min_regions: 3,
            max_regions: 6,
            depth_min: 1.0,
            depth_max: 9.0,
            max_slope: 0.5,
            texture_noise: 0.05,
            kappa: 0.0,
            albedo_min: 0.35,
            albedo_max: 1.0,
            depth_sampling: DepthSampling::Uniform,
            seed: 0,
        }
    }
}

impl ConfigSection for SceneConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "min_regions" => self.min_regions = parse_value(key, value)?,
            "max_regions" => self.max_regions = parse_value(key, value)?,
            "depth_min" => self.depth_min = parse_value(key, value)?,
            "depth_max" => self.depth_max = parse_value(key, value)?,
            "max_slope" => self.max_slope = parse_value(key, value)?,
            "texture_noise" => self.texture_noise = parse_value(key, value)?,
            "kappa" => self.kappa = parse_value(key, value)?,
            "albedo_min" => self.albedo_min = parse_value(key, value)?,
            "albedo_max" => self.albedo_max = parse_value(key, value)?,
            "depth_sampling" => {
                self.depth_sampling = match value {
                    "uniform" => DepthSampling::Uniform,
                    "log_uniform" => DepthSampling::LogUniform,
                    other => {
                        return Err(Error::config(format!(
                            "scene.depth_sampling must be uniform or log_uniform, got `{other}`"
                        )))
                    }
                }
            }
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key("scene", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("min_regions", self.min_regions.to_string()),
            ("max_regions", self.max_regions.to_string()),
            ("depth_min", self.depth_min.to_string()),
            ("depth_max", self.depth_max.to_string()),
            ("max_slope", self.max_slope.to_string()),
            ("texture_noise", self.texture_noise.to_string()),
            ("kappa", self.kappa.to_string()),
            ("albedo_min", self.albedo_min.to_string()),
            ("albedo_max", self.albedo_max.to_string()),
            ("depth_sampling", self.depth_sampling.name().to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::config(format!(
                "scene extent {h}x{w} is not a positive multiple of {INPUT_MULTIPLE}"
            )));
        }
        if self.min_regions == 0 || self.min_regions > self.max_regions {
            return Err(Error::config(format!(
                "region range [{}, {}] must be positive and ordered",
                self.min_regions, self.max_regions
            )));
        }
        if !(self.depth_min > 0.0 && self.depth_min <= self.depth_max && self.depth_max.is_finite()) {
            return Err(Error::config(format!(
                "depth range [{}, {}] must be positive and ordered",
                self.depth_min, self.depth_max
            )));
        }
        for (name, v) in [("max_slope", self.max_slope), ("texture_noise", self.texture_noise), ("kappa", self.kappa)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("scene.{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0 <= self.albedo_min && self.albedo_min <= self.albedo_max && self.albedo_max <= 1.0) {
            return Err(Error::config(format!(
                "albedo range [{}, {}] must be ordered within [0, 1]",
                self.albedo_min, self.albedo_max
            )));
        }
        Ok(())
    }
}

/// A generated sample with its generation-time ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub sample: Sample,
    /// Depth before noise, row-major `H x W`.
    pub clean_depth: Vec<f32>,
    /// Region index of every pixel.
    pub regions: Vec<u32>,
    /// Voronoi site of each region as normalized `(y, x)`.
    pub centers: Vec<[f64; 2]>,
}

struct Region {
    center: [f64; 2],
    plane: [f64; 3],
    albedo: [f64; 3],
    freq: [f64; 2],
    phase: f64,
}

/// Index of the nearest center; ties go to the lower index.
fn nearest(centers: &[Region], p: [f64; 2]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, r) in centers.iter().enumerate() {
        let d = (r.center[0] - p[0]).powi(2) + (r.center[1] - p[1]).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generates one scene; `(config)` fully determines the output.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (h, w) = (config.height, config.width);
    let (lo, hi) = (config.depth_min, config.depth_max);
    let span = hi - lo;
    let n_regions = rng.random_range(config.min_regions..=config.max_regions);
    let offset = |rng: &mut ChaCha8Rng| match config.depth_sampling {
        DepthSampling::Uniform => rng.random_range(lo..=hi),
        DepthSampling::LogUniform => rng.random_range(lo.ln()..=hi.ln()).exp().clamp(lo, hi),
    };
    let (a_lo, a_hi) = (config.albedo_min, config.albedo_max);
    let albedo = |rng: &mut ChaCha8Rng| a_lo + (a_hi - a_lo) * rng.random::<f64>();
    let regions: Vec<Region> = (0..n_regions)
        .map(|_| {
            let slope = config.max_slope * span;
            let tilt = |rng: &mut ChaCha8Rng| if slope > 0.0 { rng.random_range(-slope..=slope) } else { 0.0 };
            Region {
                center: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                plane: [tilt(&mut rng), tilt(&mut rng), offset(&mut rng)],
                albedo: [albedo(&mut rng), albedo(&mut rng), albedo(&mut rng)],
                freq: [rng.random_range(4.0..16.0), rng.random_range(4.0..16.0)],
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();

    let n = h * w;
    let mut labels = Vec::with_capacity(n);
    let mut clean = Vec::with_capacity(n);
    let mut rgb = vec![0.0; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let p = [(y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64];
            let r = nearest(&regions, p);
            let reg = &regions[r];
            let z = (reg.plane[0] * (p[1] - reg.center[1]) + reg.plane[1] * (p[0] - reg.center[0]) + reg.plane[2])
                .clamp(lo, hi);
            let shade = if span > 0.0 { 1.0 - 0.6 * (z - lo) / span } else { 1.0 };
            let tex = config.texture_noise
                * (reg.freq[0] * p[1] * std::f64::consts::TAU + reg.phase).sin()
                * (reg.freq[1] * p[0] * std::f64::consts::TAU).cos();
            for (ch, albedo) in reg.albedo.iter().enumerate() {
                rgb[ch * n + y * w + x] = quantize(albedo * shade + tex);
            }
            labels.push(r as u32);
            clean.push(z);
        }
    }

    let depth: Vec<f32> = if config.kappa > 0.0 {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        clean
            .iter()
            .map(|&z| (z + config.kappa * z * unit.sample(&mut rng)).max(MIN_NOISY_DEPTH) as f32)
            .collect()
    } else {
        clean.iter().map(|&z| z as f32).collect()
    };
    let mut meta = vec![("generator".to_string(), "planar-voronoi".to_string())];
    meta.extend(config.entries().into_iter().map(|(k, v)| (k.to_string(), v)));
    meta.push(("regions".to_string(), n_regions.to_string()));
    Ok(Scene {
        sample: Sample {
            height: h,
            width: w,
            rgb: Tensor::new(&[3, h, w], rgb)?,
            depth,
            mask: vec![true; n],
            meta,
        },
        clean_depth: clean.iter().map(|&z| z as f32).collect(),
        regions: labels,
        centers: regions.iter().map(|r| r.center).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::pearson_correlation;

    #[test]
    fn degenerate_plane_gives_constant_scene() {
        let cfg = SceneConfig {
            min_regions: 1,
            max_regions: 1,
            max_slope: 0.0,
            texture_noise: 0.0,
            seed: 3,
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg).unwrap().sample;
        let c = s.depth[0];
        assert!(s.depth.iter().all(|&d| d == c));
        assert!((cfg.depth_min..=cfg.depth_max).contains(&(c as f64)));
        for ch in 0..3 {
            let plane = &s.rgb.data()[ch * 64 * 64..(ch + 1) * 64 * 64];
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SceneConfig {
            kappa: 0.05,
            seed: 9,
            ..SceneConfig::default()
        };
        assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
        let other = SceneConfig { seed: 10, ..cfg.clone() };
        assert_ne!(generate_scene(&cfg).unwrap().sample, generate_scene(&other).unwrap().sample);
    }

    #[test]
    fn partition_covers_every_pixel_once() {
        let cfg = SceneConfig {
            min_regions: 8,
            max_regions: 8,
            seed: 4,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        assert_eq!(scene.regions.len(), 64 * 64);
        // a pixel lies in cell c iff c is strictly closer than every lower
        // index and no farther than every higher one
        for (i, &label) in scene.regions.iter().enumerate() {
            let p = [((i / 64) as f64 + 0.5) / 64.0, ((i % 64) as f64 + 0.5) / 64.0];
            let d: Vec<f64> = scene
                .centers
                .iter()
                .map(|c| (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2))
                .collect();
            let members: Vec<usize> = (0..d.len())
                .filter(|&c| (0..c).all(|j| d[c] < d[j]) && (c + 1..d.len()).all(|j| d[c] <= d[j]))
                .collect();
            assert_eq!(members, vec![label as usize]);
        }
    }

    #[test]
    fn values_stay_in_declared_ranges() {
        let cfg = SceneConfig { seed: 5, ..SceneConfig::default() };
        let s = generate_scene(&cfg).unwrap().sample;
        assert!(s.depth.iter().all(|&d| (1.0..=9.0).contains(&d)));
        assert!(s.rgb.data().iter().all(|&v| (0.0..=1.0).contains(&v) && (v * 255.0).round() / 255.0 == v));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            SceneConfig { height: 48, ..SceneConfig::default() },
            SceneConfig { min_regions: 5, max_regions: 2, ..SceneConfig::default() },
            SceneConfig { depth_min: 0.0, ..SceneConfig::default() },
            SceneConfig { depth_min: 5.0, depth_max: 2.0, ..SceneConfig::default() },
            SceneConfig { kappa: -0.1, ..SceneConfig::default() },
            SceneConfig { albedo_min: 0.9, albedo_max: 0.5, ..SceneConfig::default() },
            SceneConfig { albedo_max: 1.5, ..SceneConfig::default() },
        ];
        for cfg in bad {
            assert_eq!(generate_scene(&cfg).unwrap_err().kind(), "config");
        }
    }

    #[test]
    fn fixed_albedo_makes_brightness_a_function_of_depth() {
        let cfg = SceneConfig {
            albedo_min: 0.8,
            albedo_max: 0.8,
            texture_noise: 0.0,
            min_regions: 4,
            max_regions: 4,
            seed: 3,
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg).unwrap();
        let n = 64 * 64;
        for p in 0..n {
            let z = s.clean_depth[p] as f64;
            let want = (0.8 * (1.0 - 0.6 * (z - 1.0) / 8.0) * 255.0).round() / 255.0;
            for ch in 0..3 {
                assert!((s.sample.rgb.data()[ch * n + p] - want).abs() < 1.5 / 255.0);
            }
        }
    }

    #[test]
    fn log_uniform_offsets_favor_near_depths() {
        let draw = |sampling| {
            let cfg = SceneConfig {
                min_regions: 1,
                max_regions: 1,
                max_slope: 0.0,
                depth_min: 0.5,
                depth_max: 9.5,
                depth_sampling: sampling,
                ..SceneConfig::default()
            };
            (0..400u64)
                .map(|seed| generate_scene(&SceneConfig { seed, ..cfg.clone() }).unwrap().clean_depth[0] as f64)
                .collect::<Vec<_>>()
        };
        let below = |v: &[f64]| v.iter().filter(|&&z| z < 2.0).count() as f64 / v.len() as f64;
        let (uni, log) = (draw(DepthSampling::Uniform), draw(DepthSampling::LogUniform));
        // P(z < 2) is 1/6 when uniform and ln 4 / ln 19 (about 0.47) when log-uniform.
        assert!((below(&uni) - 1.0 / 6.0).abs() < 0.06);
        assert!((below(&log) - 4f64.ln() / 19f64.ln()).abs() < 0.08);
        assert!(log.iter().all(|z| (0.5..=9.5).contains(z)));
    }

    #[test]
    fn noise_spread_tracks_region_depth() {
        let cfg = SceneConfig {
            height: 128,
            width: 128,
            min_regions: 24,
            max_regions: 24,
            max_slope: 0.0,
            depth_min: 1.0,
            depth_max: 20.0,
            kappa: 0.1,
            seed: 6,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        let mut stats = vec![(0.0f64, 0.0f64, 0.0f64); 24];
        for ((&l, &d), &c) in scene.regions.iter().zip(&scene.sample.depth).zip(&scene.clean_depth) {
            let e = d as f64 - c as f64;
            let s = &mut stats[l as usize];
            s.0 += 1.0;
            s.1 += e * e;
            s.2 += c as f64;
        }
        let (mut spread, mut depth) = (Vec::new(), Vec::new());
        for (n, sq, sum) in stats.into_iter().filter(|s| s.0 >= 30.0) {
            spread.push((sq / n).sqrt());
            depth.push(sum / n);
        }
        assert!(spread.len() >= 20);
        assert!(pearson_correlation(&spread, &depth).unwrap() > 0.9);
    }
}
