//! Flat-batch GraphSAGE.
//!
//! A `B x C x H x W` map is permuted into `(B·H·W) x C` node rows, messages are
//! aggregated over the batched graph in one pass, and every node is updated as
//! `relu(W · [h_v ‖ agg_{u ∈ N(v)} h_u] + b)` before permuting back.

use std::sync::Arc;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchedGraph, Csr};
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Neighborhood reduction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregator {
    #[default]
    Mean,
    Max,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
        }
    }
}

/// Weight `out x 2·in` and bias `out` of one SAGE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SageLayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl SageLayerParams {
    /// Uniform in `±sqrt(6 / (2·in + out))`, zero bias.
    pub fn init<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (2 * in_channels + out_channels) as f64).sqrt();
        let weight = Tensor::from_fn(&[out_channels, 2 * in_channels], |_| rng.random_range(-bound..bound));
        SageLayerParams {
            weight,
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] / 2
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Neighbor mean over node rows `N x C`; isolated nodes get zero rows.
pub fn scatter_mean(tape: &mut Tape, rows: Var, graph: &BatchedGraph) -> Result<Var> {
    tape.scatter_mean(rows, &graph.global)
}

/// One GraphSAGE layer over a batched graph.
///
/// `weight`/`bias` are vars already on the tape (see [`SageLayerParams`]).
pub fn sage_forward(
    tape: &mut Tape,
    x: Var,
    graph: &BatchedGraph,
    weight: Var,
    bias: Var,
    aggregator: Aggregator,
) -> Result<Var> {
    let [b, c, h, w] = tape.value(x).dims4()?;
    if graph.nodes_per_image != h * w || graph.batch_size() != b {
        return Err(Error::usage(format!(
            "graph built for {} images of {} nodes, feature map is {b}x{c}x{h}x{w}",
            graph.batch_size(),
            graph.nodes_per_image
        )));
    }
    let [_, w_in] = tape.value(weight).dims2()?;
    if w_in != 2 * c {
        return Err(Error::config(format!(
            "SAGE weight expects {} input channels, map has {c}",
            w_in / 2
        )));
    }
    let rows = tape.to_rows(x)?;
    let agg = aggregate(tape, rows, &graph.global, aggregator)?;
    let cat = tape.concat_cols(rows, agg)?;
    let lin = tape.linear(cat, weight, bias)?;
    let act = tape.relu(lin)?;
    tape.from_rows(act, b, h, w)
}

fn aggregate(tape: &mut Tape, rows: Var, csr: &Arc<Csr>, aggregator: Aggregator) -> Result<Var> {
    match aggregator {
        Aggregator::Mean => tape.scatter_mean(rows, csr),
        Aggregator::Max => tape.scatter_max(rows, csr),
    }
}

/// Tape-free SAGE forward on raw slices, generic over the float type.
///
/// Mean aggregation only. `parallel` partitions destination rows across the
/// current rayon pool; each row is still written by one worker.
pub fn sage_forward_detached<T: Float + Send + Sync + Default>(
    x: &[T],
    dims: [usize; 4],
    csr: &Csr,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
    parallel: bool,
) -> Vec<T> {
    let [b, c, h, w] = dims;
    let rows = kernels::nchw_to_rows(x, b, c, h, w);
    let agg = kernels::scatter_mean(&rows, c, csr.offsets(), csr.sources(), parallel);
    let mut cat = Vec::with_capacity(rows.len() * 2);
    for (r, a) in rows.chunks_exact(c).zip(agg.chunks_exact(c)) {
        cat.extend_from_slice(r);
        cat.extend_from_slice(a);
    }
    let n = b * h * w;
    let mut y = if parallel {
        kernels::linear_forward_par(&cat, weight, bias, n, 2 * c, out_channels)
    } else {
        kernels::linear_forward(&cat, weight, bias, n, 2 * c, out_channels)
    };
    y.iter_mut().for_each(|v| *v = v.max(T::zero()));
    kernels::rows_to_nchw(&y, b, out_channels, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{broadcast_batch, build_grid, build_knn_for_map, GraphTopology, KnnParams};
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn grid_batch(h: usize, w: usize, b: usize, conn: u8) -> BatchedGraph {
        broadcast_batch(&[Arc::new(build_grid(h, w, conn).unwrap())], b).unwrap()
    }

    fn run_sage(x: &Tensor, graph: &BatchedGraph, p: &SageLayerParams, agg: Aggregator) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.leaf(p.weight.clone());
        let bv = tape.leaf(p.bias.clone());
        let y = sage_forward(&mut tape, xv, graph, wv, bv, agg).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn scatter_mean_constant_field() {
        let g = grid_batch(3, 4, 1, 8);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[12, 2], 1.5));
        let m = scatter_mean(&mut tape, x, &g).unwrap();
        assert!(tape.value(m).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn scatter_mean_isolated_node_is_zero() {
        let g = grid_batch(1, 1, 2, 8);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3], 7.0));
        let m = scatter_mean(&mut tape, x, &g).unwrap();
        assert!(tape.value(m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scatter_mean_matches_explicit_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid_batch(3, 3, 1, 8);
        let x = random(&[9, 4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let m = scatter_mean(&mut tape, xv, &g).unwrap();
        // naive oracle: scan all pairs for Chebyshev-1 neighbors
        for v in 0..9usize {
            let (vy, vx) = ((v / 3) as i32, (v % 3) as i32);
            let nbrs: Vec<usize> = (0..9usize)
                .filter(|&u| {
                    let (uy, ux) = ((u / 3) as i32, (u % 3) as i32);
                    u != v && (uy - vy).abs() <= 1 && (ux - vx).abs() <= 1
                })
                .collect();
            for c in 0..4 {
                let expect = nbrs.iter().map(|&u| x.data()[u * 4 + c]).sum::<f64>() / nbrs.len() as f64;
                assert!((tape.value(m).data()[v * 4 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 4, 4], &mut rng);
        let p = SageLayerParams {
            weight: Tensor::zeros(&[5, 6]),
            bias: Tensor::zeros(&[5]),
        };
        let y = run_sage(&x, &grid_batch(4, 4, 2, 8), &p, Aggregator::Mean);
        assert_eq!(y.shape(), &[2, 5, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_blocks_on_constant_field() {
        let c = 3;
        let mut w = vec![0.0; c * 2 * c];
        for i in 0..c {
            w[i * 2 * c + i] = 1.0;
            w[i * 2 * c + c + i] = 1.0;
        }
        let p = SageLayerParams {
            weight: Tensor::new(&[c, 2 * c], w).unwrap(),
            bias: Tensor::zeros(&[c]),
        };
        for value in [0.75, -0.5] {
            let x = Tensor::full(&[1, c, 3, 3], value);
            let y = run_sage(&x, &grid_batch(3, 3, 1, 4), &p, Aggregator::Mean);
            let expect = (2.0f64 * value).max(0.0);
            assert!(y.data().iter().all(|&v| (v - expect).abs() < 1e-15));
        }
    }

    #[test]
    fn output_non_negative_and_max_aggregator_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 4, 5, 5], &mut rng);
        let p = SageLayerParams::init(4, 6, &mut rng);
        for agg in [Aggregator::Mean, Aggregator::Max] {
            let y = run_sage(&x, &grid_batch(5, 5, 2, 8), &p, agg);
            assert!(y.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn flat_batch_matches_per_image_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, h, w) = (4, 6, 6);
        for b in [1, 2, 4] {
            let x = random(&[b, c, h, w], &mut rng);
            let p = SageLayerParams::init(c, 5, &mut rng);
            let topos: Vec<Arc<GraphTopology>> = (0..b)
                .map(|m| {
                    let plane = &x.data()[m * c * h * w..][..c * h * w];
                    Arc::new(build_knn_for_map(plane, c, h, w, &KnnParams { k: 8, ..Default::default() }).unwrap())
                })
                .collect();
            let batched = broadcast_batch(&topos, b).unwrap();
            let flat = run_sage(&x, &batched, &p, Aggregator::Mean);
            for m in 0..b {
                let single = Tensor::new(&[1, c, h, w], x.data()[m * c * h * w..][..c * h * w].to_vec()).unwrap();
                let g1 = broadcast_batch(&[Arc::clone(&topos[m])], 1).unwrap();
                let y1 = run_sage(&single, &g1, &p, Aggregator::Mean);
                let block = &flat.data()[m * 5 * h * w..][..5 * h * w];
                assert_eq!(block, y1.data());
            }
        }
    }

    #[test]
    fn detached_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let p = SageLayerParams::init(3, 4, &mut rng);
        let g = grid_batch(4, 5, 2, 8);
        let y = run_sage(&x, &g, &p, Aggregator::Mean);
        for parallel in [false, true] {
            let d = sage_forward_detached(x.data(), [2, 3, 4, 5], &g.global, p.weight.data(), p.bias.data(), 4, parallel);
            assert_eq!(d, y.data());
        }
    }

    #[test]
    fn graph_size_mismatch_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = tape.leaf(Tensor::zeros(&[2, 4]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let r = sage_forward(&mut tape, x, &grid_batch(4, 4, 1, 8), w, b, Aggregator::Mean);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 3, 3, 4], &mut rng);
        let p = SageLayerParams::init(3, 2, &mut rng);
        let bias = random(&[2], &mut rng);
        let g = grid_batch(3, 4, 2, 8);
        let report = grad_check(
            |t, v| {
                let y = sage_forward(t, v[0], &g, v[1], v[2], Aggregator::Mean)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &[x, p.weight, bias],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn scatter_mean_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = grid_batch(3, 3, 2, 4);
        let x = random(&[18, 3], &mut rng);
        let wts = random(&[18, 3], &mut rng);
        let report = grad_check(
            |t, v| {
                let m = scatter_mean(t, v[0], &g)?;
                let s = t.mul(m, v[1])?;
                t.sum(s)
            },
            &[x, wts],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
