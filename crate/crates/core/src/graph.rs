//! Graph construction over feature-map nodes.
//!
//! Every spatial location of a `H x W` map is a node with id `y·W + x`.
//! Adjacency is stored as CSR by destination: `sources[offsets[v]..offsets[v+1]]`
//! lists the in-neighbors aggregated into `v`, ascending by node id.
//!
//! Two topologies are provided: a fixed grid (4- or 8-connected) and an
//! adaptive k-NN graph over the combined distance
//! `alpha·‖f_i − f_j‖ + beta·‖p_i − p_j‖`. [`broadcast_batch`] lays `B` images
//! out as one disjoint graph with per-image node offsets.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use num_traits::Float;

use crate::error::{Error, Result};

/// Compressed adjacency, sorted by destination.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Csr {
    offsets: Vec<usize>,
    sources: Vec<u32>,
}

impl Csr {
    pub fn new(offsets: Vec<usize>, sources: Vec<u32>) -> Result<Self> {
        if offsets.first() != Some(&0) || offsets.last() != Some(&sources.len()) {
            return Err(Error::config("CSR offsets must start at 0 and end at the edge count"));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("CSR offsets must be monotone"));
        }
        let n = offsets.len() - 1;
        if sources.iter().any(|&s| s as usize >= n) {
            return Err(Error::config("CSR source index out of range"));
        }
        Ok(Csr { offsets, sources })
    }

    /// Builds from arbitrary `(src, dst)` pairs; output is canonically sorted.
    pub fn from_edges(n_nodes: usize, edges: &[(u32, u32)]) -> Result<Self> {
        let mut sorted = edges.to_vec();
        sorted.sort_unstable_by_key(|&(s, d)| (d, s));
        let mut offsets = vec![0usize; n_nodes + 1];
        for &(s, d) in &sorted {
            if s as usize >= n_nodes || d as usize >= n_nodes {
                return Err(Error::config(format!("edge ({s}, {d}) outside a {n_nodes}-node graph")));
            }
            offsets[d as usize + 1] += 1;
        }
        for i in 0..n_nodes {
            offsets[i + 1] += offsets[i];
        }
        Ok(Csr {
            offsets,
            sources: sorted.into_iter().map(|(s, _)| s).collect(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_edges(&self) -> usize {
        self.sources.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn sources(&self) -> &[u32] {
        &self.sources
    }

    pub fn in_neighbors(&self, dst: usize) -> &[u32] {
        &self.sources[self.offsets[dst]..self.offsets[dst + 1]]
    }

    pub fn in_degree(&self, dst: usize) -> usize {
        self.offsets[dst + 1] - self.offsets[dst]
    }

    /// Directed `(src, dst)` pairs in CSR order.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.n_nodes()).flat_map(move |d| self.in_neighbors(d).iter().map(move |&s| (s, d as u32)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GraphKind {
    Grid4,
    Grid8,
    Knn,
}

impl GraphKind {
    pub fn name(self) -> &'static str {
        match self {
            GraphKind::Grid4 => "grid4",
            GraphKind::Grid8 => "grid8",
            GraphKind::Knn => "knn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphTopology {
    pub kind: GraphKind,
    /// Neighbor count, k-NN only.
    pub k: Option<usize>,
    pub csr: Csr,
}

impl GraphTopology {
    pub fn n_nodes(&self) -> usize {
        self.csr.n_nodes()
    }

    pub fn n_edges(&self) -> usize {
        self.csr.n_edges()
    }

    /// Plain-text edge list, one `src dst` pair per line.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> Result<()> {
        for (s, d) in self.csr.edges() {
            writeln!(out, "{s} {d}")?;
        }
        Ok(())
    }
}

/// Parameters of the adaptive k-NN graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnnParams {
    pub k: usize,
    /// Weight on feature distance.
    pub alpha: f64,
    /// Weight on spatial distance.
    pub beta: f64,
    /// L2-normalize features and scale coordinates to `[0, 1]` per axis
    /// before measuring distance. `false` uses raw values.
    pub normalize: bool,
}

impl Default for KnnParams {
    fn default() -> Self {
        KnnParams {
            k: 16,
            alpha: 0.7,
            beta: 0.3,
            normalize: true,
        }
    }
}

impl KnnParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("knn k must be positive"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "knn weights must be finite and non-negative (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Grid adjacency: Chebyshev distance 1 for 8-connectivity, Manhattan
/// distance 1 for 4-connectivity. Symmetric, no self-loops.
pub fn build_grid(height: usize, width: usize, connectivity: u8) -> Result<GraphTopology> {
    if height == 0 || width == 0 {
        return Err(Error::config(format!("grid graph over an empty {height}x{width} map")));
    }
    let kind = match connectivity {
        4 => GraphKind::Grid4,
        8 => GraphKind::Grid8,
        other => return Err(Error::config(format!("grid connectivity must be 4 or 8, got {other}"))),
    };
    let n = height * width;
    let mut offsets = Vec::with_capacity(n + 1);
    let mut sources = Vec::with_capacity(n * connectivity as usize);
    offsets.push(0);
    for y in 0..height as isize {
        for x in 0..width as isize {
            // row-major neighbor scan yields ascending source ids
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if (dy, dx) == (0, 0) || (kind == GraphKind::Grid4 && dy != 0 && dx != 0) {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && ny < height as isize && nx < width as isize {
                        sources.push((ny as usize * width + nx as usize) as u32);
                    }
                }
            }
            offsets.push(sources.len());
        }
    }
    Ok(GraphTopology {
        kind,
        k: None,
        csr: Csr { offsets, sources },
    })
}

/// Closed-form directed edge count of [`build_grid`].
pub fn grid_edge_count(height: usize, width: usize, connectivity: u8) -> usize {
    let (h, w) = (height, width);
    let axis = h * w.saturating_sub(1) + h.saturating_sub(1) * w;
    match connectivity {
        4 => 2 * axis,
        _ => 2 * (axis + 2 * h.saturating_sub(1) * w.saturating_sub(1)),
    }
}

/// Memoizes grid topologies per `(H, W, connectivity)`.
#[derive(Default)]
pub struct GridCache {
    entries: Mutex<HashMap<(usize, usize, u8), Arc<GraphTopology>>>,
}

impl GridCache {
    pub fn get(&self, height: usize, width: usize, connectivity: u8) -> Result<Arc<GraphTopology>> {
        let mut map = self.entries.lock().expect("grid cache poisoned");
        if let Some(t) = map.get(&(height, width, connectivity)) {
            return Ok(Arc::clone(t));
        }
        let t = Arc::new(build_grid(height, width, connectivity)?);
        map.insert((height, width, connectivity), Arc::clone(&t));
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("grid cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Directed k-NN graph: every node receives in-edges from its `k` nearest
/// other nodes. Ties are broken by the smaller node index.
///
/// `features` is `n x channels` row-major, `coords` holds `(y, x)` positions.
pub fn build_knn<T: Float>(features: &[T], channels: usize, coords: &[[f64; 2]], params: &KnnParams) -> Result<GraphTopology> {
    params.validate()?;
    let n = coords.len();
    if features.len() != n * channels {
        return Err(Error::config(format!(
            "knn: {} feature values for {n} nodes x {channels} channels",
            features.len()
        )));
    }
    if n <= params.k {
        return Err(Error::config(format!("knn needs more than k={} nodes, got {n}", params.k)));
    }
    let (feats, pos) = prepare_knn_inputs(features, channels, coords, params.normalize);

    let k = params.k;
    let mut sources = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        let fi = &feats[i * channels..][..channels];
        for j in 0..n {
            if j == i {
                continue;
            }
            let fj = &feats[j * channels..][..channels];
            cand.push((knn_distance(fi, fj, pos[i], pos[j], params.alpha, params.beta), j as u32));
        }
        let order = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k - 1, order);
        let mut chosen: Vec<u32> = cand[..k].iter().map(|c| c.1).collect();
        chosen.sort_unstable();
        sources.extend_from_slice(&chosen);
    }
    let offsets = (0..=n).map(|i| i * k).collect();
    Ok(GraphTopology {
        kind: GraphKind::Knn,
        k: Some(k),
        csr: Csr { offsets, sources },
    })
}

/// k-NN graph over one `C x H x W` feature map, nodes at pixel positions.
pub fn build_knn_for_map<T: Float>(map: &[T], channels: usize, height: usize, width: usize, params: &KnnParams) -> Result<GraphTopology> {
    let hw = height * width;
    if map.len() != channels * hw {
        return Err(Error::config("knn feature map size mismatch"));
    }
    let mut rows = Vec::with_capacity(map.len());
    for p in 0..hw {
        rows.extend((0..channels).map(|c| map[c * hw + p]));
    }
    let coords: Vec<[f64; 2]> = (0..hw).map(|p| [(p / width) as f64, (p % width) as f64]).collect();
    build_knn(&rows, channels, &coords, params)
}

/// Feature rows (optionally L2-normalized) and positions (optionally scaled
/// to `[0, 1]` per axis) exactly as the k-NN distance consumes them.
pub fn prepare_knn_inputs<T: Float>(features: &[T], channels: usize, coords: &[[f64; 2]], normalize: bool) -> (Vec<f64>, Vec<[f64; 2]>) {
    let mut feats: Vec<f64> = features.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let mut pos = coords.to_vec();
    if normalize {
        for row in feats.chunks_exact_mut(channels.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for axis in 0..2 {
            let lo = pos.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
            let hi = pos.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            for p in &mut pos {
                p[axis] = if span > 0.0 { (p[axis] - lo) / span } else { 0.0 };
            }
        }
    }
    (feats, pos)
}

#[inline]
pub fn knn_distance(fi: &[f64], fj: &[f64], pi: [f64; 2], pj: [f64; 2], alpha: f64, beta: f64) -> f64 {
    let mut fd = 0.0;
    for (a, b) in fi.iter().zip(fj) {
        let d = a - b;
        fd += d * d;
    }
    let dy = pi[0] - pj[0];
    let dx = pi[1] - pj[1];
    alpha * fd.sqrt() + beta * (dy * dy + dx * dx).sqrt()
}

/// A batch of per-image graphs laid out as one disjoint graph.
#[derive(Clone, Debug)]
pub struct BatchedGraph {
    pub topologies: Vec<Arc<GraphTopology>>,
    /// Image index of every global node, `[0…0, 1…1, …, B−1…B−1]`.
    pub batch_vector: Vec<u32>,
    pub nodes_per_image: usize,
    pub global: Arc<Csr>,
}

impl BatchedGraph {
    pub fn batch_size(&self) -> usize {
        self.batch_vector.len() / self.nodes_per_image.max(1)
    }

    pub fn n_nodes(&self) -> usize {
        self.global.n_nodes()
    }

    /// Re-extracts image `m`'s topology with local node ids.
    pub fn block(&self, m: usize) -> Result<Csr> {
        let npi = self.nodes_per_image;
        if m >= self.batch_size() {
            return Err(Error::usage(format!("image {m} outside a batch of {}", self.batch_size())));
        }
        let lo = m * npi;
        let base = self.global.offsets[lo];
        let offsets = self.global.offsets[lo..=lo + npi].iter().map(|o| o - base).collect();
        let sources = self
            .global
            .sources
            .get(base..self.global.offsets[lo + npi])
            .unwrap_or(&[])
            .iter()
            .map(|s| s - lo as u32)
            .collect();
        Csr::new(offsets, sources)
    }
}

/// Offsets image `m`'s node ids by `m · nodes_per_image`. A single topology
/// is shared by every image; otherwise exactly `batch` topologies are needed.
pub fn broadcast_batch(topologies: &[Arc<GraphTopology>], batch: usize) -> Result<BatchedGraph> {
    if batch == 0 {
        return Err(Error::usage("batch size must be at least 1"));
    }
    let per_image: Vec<Arc<GraphTopology>> = match topologies.len() {
        1 => vec![Arc::clone(&topologies[0]); batch],
        n if n == batch => topologies.to_vec(),
        n => {
            return Err(Error::usage(format!(
                "{n} per-image topologies supplied for a batch of {batch}"
            )))
        }
    };
    let npi = per_image[0].n_nodes();
    if per_image.iter().any(|t| t.n_nodes() != npi) {
        return Err(Error::usage("per-image topologies disagree on node count"));
    }
    let total_edges: usize = per_image.iter().map(|t| t.n_edges()).sum();
    let mut offsets = Vec::with_capacity(batch * npi + 1);
    let mut sources = Vec::with_capacity(total_edges);
    offsets.push(0);
    for (m, topo) in per_image.iter().enumerate() {
        let shift = (m * npi) as u32;
        for d in 0..npi {
            sources.extend(topo.csr.in_neighbors(d).iter().map(|&s| s + shift));
            offsets.push(sources.len());
        }
    }
    let batch_vector = (0..batch as u32).flat_map(|m| std::iter::repeat_n(m, npi)).collect();
    Ok(BatchedGraph {
        topologies: per_image,
        batch_vector,
        nodes_per_image: npi,
        global: Arc::new(Csr { offsets, sources }),
    })
}

/// Which topology a model builds at each graph-reasoning site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphSpec {
    Grid { connectivity: u8 },
    Knn(KnnParams),
}

impl Default for GraphSpec {
    fn default() -> Self {
        GraphSpec::Grid { connectivity: 8 }
    }
}

impl GraphSpec {
    pub fn kind(&self) -> GraphKind {
        match self {
            GraphSpec::Grid { connectivity: 4 } => GraphKind::Grid4,
            GraphSpec::Grid { .. } => GraphKind::Grid8,
            GraphSpec::Knn(_) => GraphKind::Knn,
        }
    }

    /// Batched graph for a `B x C x H x W` feature map. Grids come from the
    /// cache and are shared by every image; k-NN graphs are rebuilt per image
    /// from the current feature values.
    ///
    /// Maps with too few nodes for the configured `k` use `k = nodes − 1`
    /// (a single-node map gets no edges).
    pub fn build(&self, map: &crate::tensor::Tensor, cache: &GridCache) -> Result<BatchedGraph> {
        let [b, c, h, w] = map.dims4()?;
        match *self {
            GraphSpec::Grid { connectivity } => broadcast_batch(&[cache.get(h, w, connectivity)?], b),
            GraphSpec::Knn(params) => {
                let n = h * w;
                let plane = c * n;
                let topos = (0..b)
                    .map(|m| {
                        if n < 2 {
                            return Ok(Arc::new(GraphTopology {
                                kind: GraphKind::Knn,
                                k: Some(0),
                                csr: Csr::new(vec![0; n + 1], vec![])?,
                            }));
                        }
                        let p = KnnParams {
                            k: params.k.min(n - 1),
                            ..params
                        };
                        build_knn_for_map(&map.data()[m * plane..][..plane], c, h, w, &p).map(Arc::new)
                    })
                    .collect::<Result<Vec<_>>>()?;
                broadcast_batch(&topos, b)
            }
        }
    }
}
