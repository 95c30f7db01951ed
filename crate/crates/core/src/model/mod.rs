//! End-to-end depth network.
//!
//! A stride-2 convolutional pyramid produces features at 1/4, 1/8, 1/16 and
//! 1/32 of the input. The 1/32 map passes through a convolution and a SAGE
//! layer; three decoder stages climb back to 1/4 with attention-gated skips,
//! the first two with graph reasoning; the heads predict depth and
//! log-variance at full resolution.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, BLOB_FILE, MANIFEST_FILE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{format_list, parse_list, parse_value, unknown_key, ConfigSection};
use crate::error::{Error, Result};
use crate::gnn::Aggregator;
use crate::graph::{GraphKind, GraphSpec, GridCache, KnnParams};
use crate::layers::{
    conv_relu, decoder_stage, graph_layer, heads, AttentionParams, ConvParams, ForwardTrace, GraphContext,
    HeadParams, Prediction, SageParams, StageParams, StageTransform,
};
use crate::tensor::{Tape, Tensor, Var};

/// Input extents must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels of `x1..x4` (1/4 .. 1/32). The 1/2 stem uses `x1`'s width.
    pub encoder_channels: [usize; 4],
    /// Output channels of decoder stages 1..3.
    pub decoder_channels: [usize; 3],
    pub graph: GraphKind,
    /// Used when `graph` is k-NN.
    pub knn: KnnParams,
    pub aggregator: Aggregator,
    /// SAGE at the bottleneck and in decoder stages 1 and 2.
    pub multi_scale_gnn: bool,
    /// SAGE at the bottleneck only; overrides `multi_scale_gnn`.
    pub bottleneck_gnn_only: bool,
    pub channel_attention: bool,
    pub uncertainty_head: bool,
    pub max_depth: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_channels: [16, 32, 64, 128],
            decoder_channels: [64, 32, 16],
            graph: GraphKind::Grid8,
            knn: KnnParams::default(),
            aggregator: Aggregator::Mean,
            multi_scale_gnn: true,
            bottleneck_gnn_only: false,
            channel_attention: true,
            uncertainty_head: true,
            max_depth: 10.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn graph_spec(&self) -> GraphSpec {
        match self.graph {
            GraphKind::Grid4 => GraphSpec::Grid { connectivity: 4 },
            GraphKind::Grid8 => GraphSpec::Grid { connectivity: 8 },
            GraphKind::Knn => GraphSpec::Knn(self.knn),
        }
    }

    pub fn bottleneck_gnn(&self) -> bool {
        self.multi_scale_gnn || self.bottleneck_gnn_only
    }

    /// Whether decoder stage `l` (1-based) carries a SAGE layer.
    pub fn stage_gnn(&self, stage: usize) -> bool {
        self.multi_scale_gnn && !self.bottleneck_gnn_only && stage <= 2
    }

    /// Resolution denominators at which SAGE layers run, in forward order.
    pub fn expected_gnn_scales(&self) -> Vec<usize> {
        let mut scales = Vec::new();
        if self.bottleneck_gnn() {
            scales.push(32);
        }
        scales.extend([16, 8, 4].into_iter().enumerate().filter(|(i, _)| self.stage_gnn(i + 1)).map(|(_, s)| s));
        scales
    }
}

fn parse_graph_kind(value: &str) -> Result<GraphKind> {
    match value {
        "grid4" => Ok(GraphKind::Grid4),
        "grid8" => Ok(GraphKind::Grid8),
        "knn" => Ok(GraphKind::Knn),
        other => Err(Error::config(format!("graph must be grid4, grid8 or knn, got `{other}`"))),
    }
}

fn parse_aggregator(value: &str) -> Result<Aggregator> {
    match value {
        "mean" => Ok(Aggregator::Mean),
        "max" => Ok(Aggregator::Max),
        other => Err(Error::config(format!("aggregator must be mean or max, got `{other}`"))),
    }
}

fn fixed<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let list: Vec<usize> = parse_list(key, value)?;
    list.try_into()
        .map_err(|l: Vec<usize>| Error::config(format!("`{key}` needs {N} entries, got {}", l.len())))
}

impl ConfigSection for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "encoder_channels" => self.encoder_channels = fixed(key, value)?,
            "decoder_channels" => self.decoder_channels = fixed(key, value)?,
            "graph" => self.graph = parse_graph_kind(value)?,
            "knn.k" => self.knn.k = parse_value(key, value)?,
            "knn.alpha" => self.knn.alpha = parse_value(key, value)?,
            "knn.beta" => self.knn.beta = parse_value(key, value)?,
            "knn.normalize" => self.knn.normalize = parse_value(key, value)?,
            "aggregator" => self.aggregator = parse_aggregator(value)?,
            "multi_scale_gnn" => self.multi_scale_gnn = parse_value(key, value)?,
            "bottleneck_gnn_only" => self.bottleneck_gnn_only = parse_value(key, value)?,
            "channel_attention" => self.channel_attention = parse_value(key, value)?,
            "uncertainty_head" => self.uncertainty_head = parse_value(key, value)?,
            "max_depth" => self.max_depth = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key("model", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("encoder_channels", format_list(&self.encoder_channels)),
            ("decoder_channels", format_list(&self.decoder_channels)),
            ("graph", self.graph.name().to_string()),
            ("knn.k", self.knn.k.to_string()),
            ("knn.alpha", self.knn.alpha.to_string()),
            ("knn.beta", self.knn.beta.to_string()),
            ("knn.normalize", self.knn.normalize.to_string()),
            ("aggregator", self.aggregator.name().to_string()),
            ("multi_scale_gnn", self.multi_scale_gnn.to_string()),
            ("bottleneck_gnn_only", self.bottleneck_gnn_only.to_string()),
            ("channel_attention", self.channel_attention.to_string()),
            ("uncertainty_head", self.uncertainty_head.to_string()),
            ("max_depth", self.max_depth.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if !(self.max_depth > 0.0 && self.max_depth.is_finite()) {
            return Err(Error::config(format!("model.max_depth must be positive, got {}", self.max_depth)));
        }
        self.knn.validate()
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Every parameter as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Indices of every parameter group in the store.
#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<ConvParams<usize>>,
    bottleneck_conv: ConvParams<usize>,
    bottleneck_sage: Option<SageParams<usize>>,
    stages: Vec<StageParams<usize>>,
    heads: HeadParams<usize>,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize) -> ConvParams<usize> {
        let p = ConvParams::init(c_in, c_out, &mut self.rng);
        ConvParams {
            kernel: self.store.push(format!("{name}.kernel"), p.kernel),
            bias: self.store.push(format!("{name}.bias"), p.bias),
        }
    }

    fn sage(&mut self, name: &str, c_in: usize, c_out: usize) -> SageParams<usize> {
        let p = crate::gnn::SageLayerParams::init(c_in, c_out, &mut self.rng);
        SageParams {
            weight: self.store.push(format!("{name}.weight"), p.weight),
            bias: self.store.push(format!("{name}.bias"), p.bias),
        }
    }

    fn attention(&mut self, name: &str, channels: usize) -> AttentionParams<usize> {
        let p = AttentionParams::init(channels, &mut self.rng);
        AttentionParams {
            w1: self.store.push(format!("{name}.w1"), p.w1),
            b1: self.store.push(format!("{name}.b1"), p.b1),
            w2: self.store.push(format!("{name}.w2"), p.w2),
            b2: self.store.push(format!("{name}.b2"), p.b2),
        }
    }
}

/// Predicted maps detached from any tape, each `B x 1 x H x W`.
#[derive(Clone, Debug)]
pub struct PredictionValues {
    pub depth: Tensor,
    pub log_var: Option<Tensor>,
    pub trace: ForwardTrace,
}

pub struct GraphDepthModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    cache: GridCache,
}

impl GraphDepthModel {
    /// Builds and initializes a model; the seed fixes every parameter.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let [c1, c2, c3, c4] = config.encoder_channels;
        let encoder = vec![
            b.conv("enc.stem", 3, c1),
            b.conv("enc.x1", c1, c1),
            b.conv("enc.x2", c1, c2),
            b.conv("enc.x3", c2, c3),
            b.conv("enc.x4", c3, c4),
        ];
        let bottleneck_conv = b.conv("bottleneck.conv", c4, c4);
        let bottleneck_sage = config.bottleneck_gnn().then(|| b.sage("bottleneck.sage", c4, c4));
        let skips = [c3, c2, c1];
        let mut prev = c4;
        let mut stages = Vec::with_capacity(3);
        for (i, (&skip, &out)) in skips.iter().zip(&config.decoder_channels).enumerate() {
            let l = i + 1;
            let merged = prev + skip;
            let attention = config.channel_attention.then(|| b.attention(&format!("dec{l}.att"), merged));
            let transform = if config.stage_gnn(l) {
                StageTransform::Sage(b.sage(&format!("dec{l}.sage"), merged, out))
            } else {
                StageTransform::Conv(b.conv(&format!("dec{l}.conv"), merged, out))
            };
            stages.push(StageParams { attention, transform });
            prev = out;
        }
        let heads = HeadParams {
            depth: b.conv("head.depth", prev, 1),
            uncertainty: config.uncertainty_head.then(|| b.conv("head.log_var", prev, 1)),
        };
        Ok(GraphDepthModel {
            config,
            params: b.store,
            layout: Layout {
                encoder,
                bottleneck_conv,
                bottleneck_sage,
                stages,
                heads,
            },
            cache: GridCache::default(),
        })
    }

    /// Rebuilds a model and installs `params`, which must match the layout.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.set_params(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameters; names and shapes must match.
    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        if params.names != self.params.names
            || params.tensors.iter().zip(&self.params.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::config("parameter set does not match the model configuration"));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, tape: &Tape, input: Var) -> Result<[usize; 4]> {
        let dims = tape.value(input).dims4()?;
        let [_, c, h, w] = dims;
        if c != 3 {
            return Err(Error::config(format!("input must have 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::config(format!(
                "input extent {h}x{w} is not a positive multiple of {INPUT_MULTIPLE}"
            )));
        }
        Ok(dims)
    }

    fn check_vars(&self, vars: &[Var]) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(Error::usage(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        Ok(())
    }

    /// Encoder features `x1..x4` at 1/4, 1/8, 1/16 and 1/32.
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<[Var; 4]> {
        self.check_vars(vars)?;
        self.check_input(tape, input)?;
        let p: Vec<ConvParams<Var>> = self.layout.encoder.iter().map(|c| c.map(|&i| vars[i])).collect();
        let stem = conv_relu(tape, input, &p[0], 2)?;
        let x1 = conv_relu(tape, stem, &p[1], 2)?;
        let x2 = conv_relu(tape, x1, &p[2], 2)?;
        let x3 = conv_relu(tape, x2, &p[3], 2)?;
        let x4 = conv_relu(tape, x3, &p[4], 2)?;
        Ok([x1, x2, x3, x4])
    }

    /// Full forward pass; `vars` are the bound parameters in store order.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<(Prediction, ForwardTrace)> {
        let [x1, x2, x3, x4] = self.encode(tape, vars, input)?;
        let graphs = GraphContext {
            spec: self.config.graph_spec(),
            aggregator: self.config.aggregator,
            cache: &self.cache,
        };
        let mut trace = ForwardTrace::default();
        let conv = self.layout.bottleneck_conv.map(|&i| vars[i]);
        let mut g = match &self.layout.bottleneck_sage {
            Some(s) => {
                let z = tape.conv2d(x4, conv.kernel, conv.bias, 1, 1)?;
                graph_layer(tape, z, &s.map(|&i| vars[i]), &graphs, &mut trace)?
            }
            None => conv_relu(tape, x4, &conv, 1)?,
        };
        for (i, (stage, skip)) in self.layout.stages.iter().zip([x3, x2, x1]).enumerate() {
            let p = stage.map(|&i| vars[i]);
            g = decoder_stage(tape, g, skip, i + 1, &p, &graphs, &mut trace)?;
        }
        let hp = self.layout.heads.map(|&i| vars[i]);
        let pred = heads(tape, g, &hp, self.config.max_depth, 4)?;
        Ok((pred, trace))
    }

    /// Inference without gradients.
    pub fn predict(&self, input: &Tensor) -> Result<PredictionValues> {
        let mut tape = Tape::new();
        let vars = self.params.bind_constant(&mut tape);
        let x = tape.constant(input.clone());
        let (pred, trace) = self.forward(&mut tape, &vars, x)?;
        Ok(PredictionValues {
            depth: tape.value(pred.depth).clone(),
            log_var: pred.log_var.map(|s| tape.value(s).clone()),
            trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, 3, h, w], |_| rng.random_range(0.0..1.0))
    }

    fn conv_count(c_in: usize, c_out: usize) -> usize {
        c_out * c_in * 9 + c_out
    }

    fn att_count(c: usize) -> usize {
        let h = c.div_ceil(16);
        2 * h * c + h + c
    }

    fn sage_count(c_in: usize, c_out: usize) -> usize {
        c_out * 2 * c_in + c_out
    }

    #[test]
    fn default_parameter_count_matches_closed_form() {
        let model = GraphDepthModel::new(ModelConfig::default()).unwrap();
        let encoder = conv_count(3, 16) + conv_count(16, 16) + conv_count(16, 32) + conv_count(32, 64) + conv_count(64, 128);
        let bottleneck = conv_count(128, 128) + sage_count(128, 128);
        let decoder = att_count(192) + sage_count(192, 64) + att_count(96) + sage_count(96, 32) + att_count(48) + conv_count(48, 16);
        let head = 2 * conv_count(16, 1);
        assert_eq!(encoder, 99_760);
        assert_eq!(model.param_count(), encoder + bottleneck + decoder + head);
        assert_eq!(model.param_count(), 324_679);
    }

    #[test]
    fn encoder_shapes_follow_stride_pyramid() {
        let model = GraphDepthModel::new(ModelConfig::default()).unwrap();
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape);
        let x = tape.constant(image(1, 64, 64, 1));
        let feats = model.encode(&mut tape, &vars, x).unwrap();
        let shapes: Vec<_> = feats.iter().map(|&f| tape.shape(f).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![1, 16, 16, 16], vec![1, 32, 8, 8], vec![1, 64, 4, 4], vec![1, 128, 2, 2]]
        );
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let model = GraphDepthModel::new(ModelConfig::default()).unwrap();
        let err = model.predict(&image(1, 48, 64, 2)).unwrap_err();
        assert_eq!(err.kind(), "config");
        let err = model.predict(&Tensor::zeros(&[1, 1, 32, 32])).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn zeroed_encoder_gives_zero_features() {
        let mut model = GraphDepthModel::new(ModelConfig::default()).unwrap();
        let names: Vec<String> = model.params().names().iter().filter(|n| n.starts_with("enc.")).cloned().collect();
        for n in names {
            let t = model.params_mut().get_mut(&n).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape);
        let x = tape.constant(image(2, 32, 32, 3));
        for f in model.encode(&mut tape, &vars, x).unwrap() {
            assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_shapes_range_and_determinism() {
        let cfg = ModelConfig {
            seed: 11,
            ..ModelConfig::default()
        };
        let input = image(2, 64, 64, 4);
        let a = GraphDepthModel::new(cfg.clone()).unwrap().predict(&input).unwrap();
        let b = GraphDepthModel::new(cfg).unwrap().predict(&input).unwrap();
        assert_eq!(a.depth.shape(), &[2, 1, 64, 64]);
        assert_eq!(a.log_var.as_ref().unwrap().shape(), &[2, 1, 64, 64]);
        assert!(a.depth.data().iter().all(|&d| d > 0.0 && d < 10.0));
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.log_var, b.log_var);
    }

    #[test]
    fn gnn_scale_counters_follow_toggles() {
        let input = image(1, 64, 64, 5);
        let cases = [
            (true, false, vec![32, 16, 8]),
            (false, true, vec![32]),
            (true, true, vec![32]),
            (false, false, vec![]),
        ];
        for (multi, only, want) in cases {
            let cfg = ModelConfig {
                multi_scale_gnn: multi,
                bottleneck_gnn_only: only,
                ..ModelConfig::default()
            };
            assert_eq!(cfg.expected_gnn_scales(), want);
            let out = GraphDepthModel::new(cfg).unwrap().predict(&input).unwrap();
            assert_eq!(out.trace.gnn_scales(64), want);
            assert_eq!(out.trace.sage_calls, want.len());
        }
    }

    #[test]
    fn knn_graphs_run_on_every_gnn_scale() {
        let cfg = ModelConfig {
            graph: GraphKind::Knn,
            knn: KnnParams { k: 8, ..KnnParams::default() },
            ..ModelConfig::default()
        };
        let out = GraphDepthModel::new(cfg).unwrap().predict(&image(2, 32, 32, 6)).unwrap();
        assert_eq!(out.trace.gnn_scales(32), vec![32, 16, 8]);
        assert!(out.depth.all_finite());
    }

    #[test]
    fn unit_gate_attention_equals_plain_concat() {
        let on = GraphDepthModel::new(ModelConfig::default()).unwrap();
        let mut off = GraphDepthModel::new(ModelConfig {
            channel_attention: false,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut on_params = on.params().clone();
        for (name, t) in on.params().names().iter().zip(on.params().tensors()) {
            let dst = on_params.get_mut(name).unwrap();
            if name.contains(".att.") {
                // sigmoid(40) rounds to exactly 1
                *dst = if name.ends_with(".b2") { Tensor::full(t.shape(), 40.0) } else { Tensor::zeros(t.shape()) };
            } else if let Some(src) = off.params().get(name) {
                *dst = src.clone();
            }
        }
        let on = GraphDepthModel::with_params(on.config().clone(), on_params).unwrap();
        off.set_params(off.params().clone()).unwrap();
        let input = image(2, 32, 32, 7);
        let a = on.predict(&input).unwrap();
        let b = off.predict(&input).unwrap();
        assert!(a.depth.max_abs_diff(&b.depth) < 1e-12);
        assert!(a.log_var.unwrap().max_abs_diff(&b.log_var.unwrap()) < 1e-12);
    }

    #[test]
    fn disabled_uncertainty_head_has_no_log_var() {
        let cfg = ModelConfig {
            uncertainty_head: false,
            ..ModelConfig::default()
        };
        let model = GraphDepthModel::new(cfg).unwrap();
        assert!(model.params().get("head.log_var.kernel").is_none());
        assert!(model.predict(&image(1, 32, 32, 8)).unwrap().log_var.is_none());
    }

    #[test]
    fn config_round_trips_through_entries() {
        let cfg = ModelConfig {
            graph: GraphKind::Knn,
            knn: KnnParams {
                k: 5,
                alpha: 0.1 + 0.2,
                beta: 0.9,
                normalize: false,
            },
            aggregator: Aggregator::Max,
            max_depth: 80.0,
            seed: 99,
            bottleneck_gnn_only: true,
            ..ModelConfig::default()
        };
        let mut back = ModelConfig::default();
        for (k, v) in cfg.entries() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert_eq!(back.set("nope", "1").unwrap_err().kind(), "config");
        assert_eq!(back.set("encoder_channels", "1,2").unwrap_err().kind(), "config");
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let mut model = GraphDepthModel::new(ModelConfig::default()).unwrap();
        let other = GraphDepthModel::new(ModelConfig {
            channel_attention: false,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_eq!(model.set_params(other.params().clone()).unwrap_err().kind(), "config");
    }
}
