//! Training loss and evaluation metrics.
//!
//! All maps are `B x 1 x H x W`; `mask` marks valid truth pixels. The loss is
//! `alpha·L1 + beta·Lgrad + gamma·Lunc` where the uncertainty term reweights
//! absolute errors by the predicted log-variance `s` as `|e|·exp(−s) + s`.

use std::sync::Arc;

use crate::config::{parse_value, unknown_key, ConfigSection};
use crate::error::{Error, Result};
use crate::layers::Prediction;
use crate::tensor::{Tape, Tensor, Var};

/// Ratio threshold of the δ₁ accuracy.
pub const DELTA1_THRESHOLD: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.85,
            beta: 0.15,
            gamma: 0.50,
        }
    }
}

impl ConfigSection for LossWeights {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            _ => return Err(unknown_key("loss", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("gamma", self.gamma.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Scalar values of each loss term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub grad: f64,
    /// Absent when the model has no uncertainty head.
    pub unc: Option<f64>,
    pub weighted_l1: f64,
    pub weighted_grad: f64,
    pub weighted_unc: f64,
    pub total: f64,
}

/// Weighted combination; a missing uncertainty term contributes zero.
pub fn total_loss(l1: f64, grad: f64, unc: Option<f64>, weights: &LossWeights) -> LossBreakdown {
    let weighted_l1 = weights.alpha * l1;
    let weighted_grad = weights.beta * grad;
    let weighted_unc = unc.map_or(0.0, |u| weights.gamma * u);
    LossBreakdown {
        l1,
        grad,
        unc,
        weighted_l1,
        weighted_grad,
        weighted_unc,
        total: weighted_l1 + weighted_grad + weighted_unc,
    }
}

/// Truth map and validity mask of one batch.
#[derive(Clone, Debug)]
pub struct Target {
    pub depth: Tensor,
    pub mask: Arc<[bool]>,
    mask_x: Arc<[bool]>,
    mask_y: Arc<[bool]>,
    valid: usize,
}

impl Target {
    pub fn new(depth: Tensor, mask: Vec<bool>) -> Result<Self> {
        let [b, c, h, w] = depth.dims4()?;
        if mask.len() != depth.numel() {
            return Err(Error::config(format!(
                "mask has {} entries for a {b}x{c}x{h}x{w} target",
                mask.len()
            )));
        }
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(Error::usage("target has zero valid pixels"));
        }
        let mut mask_x = Vec::with_capacity(b * c * h * w.saturating_sub(1));
        for row in mask.chunks_exact(w) {
            mask_x.extend(row.windows(2).map(|p| p[0] && p[1]));
        }
        let mut mask_y = Vec::with_capacity(b * c * h.saturating_sub(1) * w);
        for plane in mask.chunks_exact(h * w) {
            for y in 0..h.saturating_sub(1) {
                mask_y.extend((0..w).map(|i| plane[y * w + i] && plane[(y + 1) * w + i]));
            }
        }
        Ok(Target {
            depth,
            mask: mask.into(),
            mask_x: mask_x.into(),
            mask_y: mask_y.into(),
            valid,
        })
    }

    /// Every pixel valid.
    pub fn dense(depth: Tensor) -> Result<Self> {
        let n = depth.numel();
        Self::new(depth, vec![true; n])
    }

    pub fn valid_count(&self) -> usize {
        self.valid
    }
}

fn error_var(tape: &mut Tape, pred: Var, target: &Target) -> Result<Var> {
    if tape.shape(pred) != target.depth.shape() {
        return Err(Error::config(format!(
            "prediction shape {:?} does not match target {:?}",
            tape.shape(pred),
            target.depth.shape()
        )));
    }
    let y = tape.constant(target.depth.clone());
    tape.sub(pred, y)
}

/// Masked mean absolute error and the masked forward-difference gradient
/// loss, both normalized by the valid pixel count.
pub fn l1_and_gradient_loss(tape: &mut Tape, pred: Var, target: &Target) -> Result<(Var, Var)> {
    let err = error_var(tape, pred, target)?;
    let abs = tape.abs(err)?;
    let l1 = tape.masked_mean(abs, &target.mask)?;
    let [_, _, h, w] = tape.value(err).dims4()?;
    let mut grad = tape.constant(Tensor::scalar(0.0));
    if w > 1 {
        let dx = tape.diff_x(err)?;
        let dx = tape.abs(dx)?;
        let sx = tape.masked_sum(dx, &target.mask_x)?;
        grad = tape.add(grad, sx)?;
    }
    if h > 1 {
        let dy = tape.diff_y(err)?;
        let dy = tape.abs(dy)?;
        let sy = tape.masked_sum(dy, &target.mask_y)?;
        grad = tape.add(grad, sy)?;
    }
    let grad = tape.scale(grad, 1.0 / target.valid as f64)?;
    Ok((l1, grad))
}

/// Masked mean of `|D − Y|·exp(−S) + S`.
pub fn uncertainty_loss(tape: &mut Tape, pred: Var, log_var: Var, target: &Target) -> Result<Var> {
    let err = error_var(tape, pred, target)?;
    if tape.shape(log_var) != tape.shape(pred) {
        return Err(Error::config("log-variance and depth maps differ in shape"));
    }
    let abs = tape.abs(err)?;
    let neg = tape.neg(log_var)?;
    let inv = tape.exp(neg)?;
    let scaled = tape.mul(abs, inv)?;
    let per_pixel = tape.add(scaled, log_var)?;
    tape.masked_mean(per_pixel, &target.mask)
}

/// Differentiable total loss of a prediction plus the per-term values.
pub fn compute_loss(
    tape: &mut Tape,
    pred: &Prediction,
    target: &Target,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let (l1, grad) = l1_and_gradient_loss(tape, pred.depth, target)?;
    let wl1 = tape.scale(l1, weights.alpha)?;
    let wgrad = tape.scale(grad, weights.beta)?;
    let mut total = tape.add(wl1, wgrad)?;
    let unc = match pred.log_var {
        Some(s) => {
            let u = uncertainty_loss(tape, pred.depth, s, target)?;
            let wu = tape.scale(u, weights.gamma)?;
            total = tape.add(total, wu)?;
            Some(tape.value(u).data()[0])
        }
        None => None,
    };
    let mut breakdown = total_loss(tape.value(l1).data()[0], tape.value(grad).data()[0], unc, weights);
    breakdown.total = tape.value(total).data()[0];
    Ok((total, breakdown))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub abs_rel: f64,
    pub delta1: f64,
    pub mae: f64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "step,split,rmse,abs_rel,delta1,mae";

    pub fn csv_row(&self, step: u64, split: &str) -> String {
        format!("{step},{split},{},{},{},{}", self.rmse, self.abs_rel, self.delta1, self.mae)
    }
}

/// Standard depth metrics over the valid pixels.
pub fn compute_metrics(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<Metrics> {
    if pred.len() != truth.len() || mask.len() != truth.len() {
        return Err(Error::config("prediction, truth and mask lengths differ"));
    }
    let (mut n, mut sq, mut rel, mut hit, mut abs) = (0usize, 0.0, 0.0, 0usize, 0.0);
    for ((&d, &y), &m) in pred.iter().zip(truth).zip(mask) {
        if !m {
            continue;
        }
        if !(y > 0.0) {
            return Err(Error::usage(format!("non-positive truth depth {y} inside the mask")));
        }
        let e = d - y;
        n += 1;
        sq += e * e;
        abs += e.abs();
        rel += e.abs() / y;
        if (d / y).max(y / d) < DELTA1_THRESHOLD {
            hit += 1;
        }
    }
    if n == 0 {
        return Err(Error::usage("metrics over zero valid pixels"));
    }
    let nf = n as f64;
    Ok(Metrics {
        rmse: (sq / nf).sqrt(),
        abs_rel: rel / nf,
        delta1: hit as f64 / nf,
        mae: abs / nf,
    })
}

/// Ranks with ties sharing their average position (1-based).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

/// Pearson correlation coefficient; NaN when either input is constant.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::usage("correlation needs two equal-length series of at least 2 values"));
    }
    Ok(pearson(a, b))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::usage("correlation needs two equal-length series of at least 2 values"));
    }
    Ok(pearson(&ranks(a), &ranks(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    fn losses(pred: &Tensor, s: Option<&Tensor>, target: &Target) -> (f64, f64, Option<f64>) {
        let mut tape = Tape::new();
        let d = tape.leaf(pred.clone());
        let (l1, grad) = l1_and_gradient_loss(&mut tape, d, target).unwrap();
        let unc = s.map(|s| {
            let sv = tape.leaf(s.clone());
            let u = uncertainty_loss(&mut tape, d, sv, target).unwrap();
            scalar(&tape, u)
        });
        (scalar(&tape, l1), scalar(&tape, grad), unc)
    }

    /// Per-pixel loops over a single-channel batch.
    fn loss_oracle(pred: &Tensor, s: &Tensor, truth: &Tensor, mask: &[bool]) -> (f64, f64, f64) {
        let [b, _, h, w] = pred.dims4().unwrap();
        let (p, y, sv) = (pred.data(), truth.data(), s.data());
        let at = |m: usize, r: usize, c: usize| (m * h + r) * w + c;
        let (mut n, mut l1, mut g, mut u) = (0.0, 0.0, 0.0, 0.0);
        for m in 0..b {
            for r in 0..h {
                for c in 0..w {
                    let i = at(m, r, c);
                    if mask[i] {
                        n += 1.0;
                        l1 += (p[i] - y[i]).abs();
                        u += (p[i] - y[i]).abs() * (-sv[i]).exp() + sv[i];
                    }
                    if c + 1 < w && mask[i] && mask[at(m, r, c + 1)] {
                        let j = at(m, r, c + 1);
                        g += ((p[j] - p[i]) - (y[j] - y[i])).abs();
                    }
                    if r + 1 < h && mask[i] && mask[at(m, r + 1, c)] {
                        let j = at(m, r + 1, c);
                        g += ((p[j] - p[i]) - (y[j] - y[i])).abs();
                    }
                }
            }
        }
        (l1 / n, g / n, u / n)
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_map(&mut rng, &[2, 1, 6, 5], 1.0, 5.0);
        let target = Target::dense(y.clone()).unwrap();
        let (l1, grad, _) = losses(&y, None, &target);
        assert_eq!((l1, grad), (0.0, 0.0));
    }

    #[test]
    fn constant_offset_only_affects_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random_map(&mut rng, &[1, 1, 8, 8], 1.0, 5.0);
        // power-of-two offset keeps differences exact
        let d = Tensor::from_fn(y.shape(), |i| y.data()[i] + 0.5);
        let (l1, grad, _) = losses(&d, None, &Target::dense(y).unwrap());
        assert!((l1 - 0.5).abs() < 1e-15);
        assert!(grad < 1e-14);
    }

    #[test]
    fn losses_match_pixel_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let y = random_map(&mut rng, &[2, 1, 8, 8], 0.5, 4.0);
            let d = random_map(&mut rng, &[2, 1, 8, 8], 0.5, 4.0);
            let s = random_map(&mut rng, &[2, 1, 8, 8], -2.0, 2.0);
            let mask: Vec<bool> = (0..128).map(|_| rng.random_bool(0.8)).collect();
            let target = Target::new(y.clone(), mask.clone()).unwrap();
            let (l1, grad, unc) = losses(&d, Some(&s), &target);
            let (ol1, ograd, ounc) = loss_oracle(&d, &s, &y, &mask);
            assert!((l1 - ol1).abs() < 1e-12);
            assert!((grad - ograd).abs() < 1e-12);
            assert!((unc.unwrap() - ounc).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_log_var_reduces_to_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random_map(&mut rng, &[1, 1, 8, 8], 0.5, 4.0);
        let d = random_map(&mut rng, &[1, 1, 8, 8], 0.5, 4.0);
        let (l1, _, unc) = losses(&d, Some(&Tensor::zeros(&[1, 1, 8, 8])), &Target::dense(y).unwrap());
        assert!((unc.unwrap() - l1).abs() <= 1e-15);
    }

    #[test]
    fn zero_error_leaves_pure_regularizer() {
        let y = Tensor::full(&[1, 1, 4, 4], 2.0);
        let (_, _, unc) = losses(&y, Some(&Tensor::full(&[1, 1, 4, 4], 0.7)), &Target::dense(y.clone()).unwrap());
        assert!((unc.unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn per_pixel_minimum_over_log_var() {
        // e·exp(−s) + s is minimized at s = ln e with value ln e + 1
        for e in [1.0f64, 0.25, 3.0] {
            let f = |s: f64| e * (-s).exp() + s;
            let s_star = e.ln();
            assert!((f(s_star) - (s_star + 1.0)).abs() < 1e-15);
            for ds in [-1e-3, 1e-3] {
                assert!(f(s_star + ds) > f(s_star));
            }
            let y = Tensor::full(&[1, 1, 2, 2], 5.0);
            let d = Tensor::full(&[1, 1, 2, 2], 5.0 + e);
            let (_, _, unc) = losses(&d, Some(&Tensor::full(&[1, 1, 2, 2], s_star)), &Target::dense(y).unwrap());
            assert!((unc.unwrap() - (s_star + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn log_var_gradient_sign_tracks_error_magnitude() {
        let y = Tensor::full(&[1, 1, 1, 4], 2.0);
        let d = Tensor::new(&[1, 1, 1, 4], vec![2.1, 2.5, 4.0, 7.0]).unwrap();
        let s = Tensor::new(&[1, 1, 1, 4], vec![0.0, 0.0, 1.5, 1.5]).unwrap();
        let target = Target::dense(y).unwrap();
        let mut tape = Tape::new();
        let dv = tape.leaf(d.clone());
        let sv = tape.leaf(s.clone());
        let u = uncertainty_loss(&mut tape, dv, sv, &target).unwrap();
        let g = tape.backward(u).unwrap();
        let gs = g.get(sv).unwrap();
        for i in 0..4 {
            let err = (d.data()[i] - 2.0).abs();
            let want_positive = err < s.data()[i].exp();
            assert_eq!(gs[i] > 0.0, want_positive, "pixel {i}");
        }
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 0.0, Some(0.0), &w).total - 0.85).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, Some(0.0), &w).total, 0.0);
        assert!((total_loss(1.0, 1.0, Some(1.0), &w).total - 1.5).abs() < 1e-15);
        assert!((total_loss(1.0, 1.0, None, &w).total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_is_usage_error() {
        let err = Target::new(Tensor::zeros(&[1, 1, 2, 2]), vec![false; 4]).unwrap_err();
        assert_eq!(err.kind(), "usage");
        assert_eq!(compute_metrics(&[1.0], &[1.0], &[false]).unwrap_err().kind(), "usage");
    }

    #[test]
    fn metric_examples() {
        let y = [1.0, 2.0, 4.0, 8.0];
        let m = compute_metrics(&y, &y, &[true; 4]).unwrap();
        assert_eq!((m.rmse, m.abs_rel, m.delta1, m.mae), (0.0, 0.0, 1.0, 0.0));
        let d: Vec<f64> = y.iter().map(|v| 1.3 * v).collect();
        let m = compute_metrics(&d, &y, &[true; 4]).unwrap();
        assert_eq!(m.delta1, 0.0);
        assert!((m.abs_rel - 0.3).abs() < 1e-12);
        let err = compute_metrics(&[1.0, 1.0], &[1.0, 0.0], &[true, true]).unwrap_err();
        assert_eq!(err.kind(), "usage");
        // invalid pixels may hold anything
        assert!(compute_metrics(&[1.0, 1.0], &[1.0, 0.0], &[true, false]).is_ok());
    }

    #[test]
    fn metrics_match_pixel_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 300;
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..10.0)).collect();
        let d: Vec<f64> = y.iter().map(|v| v * rng.random_range(0.6..1.5)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let m = compute_metrics(&d, &y, &mask).unwrap();
        let (mut c, mut sq, mut rel, mut hit, mut abs) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            if mask[i] {
                c += 1.0;
                sq += (d[i] - y[i]).powi(2);
                rel += (d[i] - y[i]).abs() / y[i];
                abs += (d[i] - y[i]).abs();
                let ratio = if d[i] > y[i] { d[i] / y[i] } else { y[i] / d[i] };
                if ratio < 1.25 {
                    hit += 1.0;
                }
            }
        }
        assert!((m.rmse - (sq / c).sqrt()).abs() < 1e-12);
        assert!((m.abs_rel - rel / c).abs() < 1e-12);
        assert!((m.delta1 - hit / c).abs() < 1e-12);
        assert!((m.mae - abs / c).abs() < 1e-12);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 100.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = random_map(&mut rng, &[1, 1, 5, 6], 1.0, 3.0);
        let d = random_map(&mut rng, &[1, 1, 5, 6], 1.0, 3.0);
        let s = random_map(&mut rng, &[1, 1, 5, 6], -1.0, 1.0);
        let mask: Vec<bool> = (0..30).map(|_| rng.random_bool(0.8)).collect();
        let target = Target::new(y, mask).unwrap();
        for term in 0..3 {
            let report = grad_check(
                |tape, v| {
                    let (l1, grad) = l1_and_gradient_loss(tape, v[0], &target)?;
                    match term {
                        0 => Ok(l1),
                        1 => Ok(grad),
                        _ => uncertainty_loss(tape, v[0], v[1], &target),
                    }
                },
                &[d.clone(), s.clone()],
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "term {term}: {report:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn total_is_linear_in_each_term(l1 in 0.0f64..10.0, g in 0.0f64..10.0, u in -5.0f64..10.0, dt in 0.01f64..1.0) {
            let w = LossWeights::default();
            let base = total_loss(l1, g, Some(u), &w).total;
            let cases = [
                (total_loss(l1 + dt, g, Some(u), &w).total, w.alpha),
                (total_loss(l1, g + dt, Some(u), &w).total, w.beta),
                (total_loss(l1, g, Some(u + dt), &w).total, w.gamma),
            ];
            for (moved, weight) in cases {
                prop_assert!(((moved - base) - weight * dt).abs() < 1e-12);
            }
        }

        #[test]
        fn losses_are_invariant_under_batch_permutation(seed in any::<u64>()) {
            // swapping whole images keeps every forward difference intact
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random_map(&mut rng, &[3, 1, 4, 4], 0.5, 4.0);
            let d = random_map(&mut rng, &[3, 1, 4, 4], 0.5, 4.0);
            let s = random_map(&mut rng, &[3, 1, 4, 4], -1.0, 1.0);
            let mut mask: Vec<bool> = (0..48).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            let perm = [2usize, 0, 1];
            let shuffle = |t: &Tensor| {
                let mut out = Vec::with_capacity(48);
                for &p in &perm { out.extend_from_slice(&t.data()[p * 16..p * 16 + 16]); }
                Tensor::new(&[3, 1, 4, 4], out).unwrap()
            };
            let mut pmask = Vec::with_capacity(48);
            for &p in &perm { pmask.extend_from_slice(&mask[p * 16..p * 16 + 16]); }
            let a = losses(&d, Some(&s), &Target::new(y.clone(), mask).unwrap());
            let b = losses(&shuffle(&d), Some(&shuffle(&s)), &Target::new(shuffle(&y), pmask).unwrap());
            prop_assert!((a.0 - b.0).abs() < 1e-12);
            prop_assert!((a.1 - b.1).abs() < 1e-12);
            prop_assert!((a.2.unwrap() - b.2.unwrap()).abs() < 1e-12);
        }

        #[test]
        fn unc_with_zero_log_var_equals_l1(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random_map(&mut rng, &[1, 1, 4, 6], 0.5, 4.0);
            let d = random_map(&mut rng, &[1, 1, 4, 6], 0.5, 4.0);
            let (l1, _, unc) = losses(&d, Some(&Tensor::zeros(&[1, 1, 4, 6])), &Target::dense(y).unwrap());
            prop_assert!((unc.unwrap() - l1).abs() <= 1e-15);
        }
    }
}
