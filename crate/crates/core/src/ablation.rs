//! Component and graph-topology ablation grids.
//!
//! A preset is a list of named model variants derived from a base
//! configuration. Component rows are cumulative: each adds one feature to the
//! row before it. Graph rows keep every component on and vary only the graph.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{GraphKind, KnnParams};
use crate::model::{GraphDepthModel, ModelConfig};
use crate::objective::{LossWeights, Metrics};
use crate::trainer::{evaluate, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Cumulative component rows.
    Table5,
    /// Graph topology rows.
    Table6,
    All,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table5" => Ok(Preset::Table5),
            "table6" => Ok(Preset::Table6),
            "all" => Ok(Preset::All),
            other => Err(Error::config(format!("unknown ablation preset `{other}` (table5, table6, all)"))),
        }
    }
}

/// Cumulative component variants of `base`, in row order.
pub fn component_variants(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let baseline = ModelConfig {
        graph: GraphKind::Grid8,
        multi_scale_gnn: false,
        bottleneck_gnn_only: false,
        channel_attention: false,
        uncertainty_head: false,
        ..base.clone()
    };
    let bottleneck = ModelConfig {
        bottleneck_gnn_only: true,
        ..baseline.clone()
    };
    let multi = ModelConfig {
        bottleneck_gnn_only: false,
        multi_scale_gnn: true,
        ..bottleneck.clone()
    };
    let attention = ModelConfig {
        channel_attention: true,
        ..multi.clone()
    };
    let uncertainty = ModelConfig {
        uncertainty_head: true,
        ..attention.clone()
    };
    let knn = ModelConfig {
        graph: GraphKind::Knn,
        ..uncertainty.clone()
    };
    vec![
        ("baseline", baseline),
        ("+bottleneck-gnn", bottleneck),
        ("+multi-scale", multi),
        ("+attention", attention),
        ("+uncertainty", uncertainty),
        ("+knn", knn),
    ]
}

/// Full-model variants differing only in graph topology.
pub fn graph_variants(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let full = ModelConfig {
        multi_scale_gnn: true,
        bottleneck_gnn_only: false,
        channel_attention: true,
        uncertainty_head: true,
        ..base.clone()
    };
    let knn = |k| ModelConfig {
        graph: GraphKind::Knn,
        knn: KnnParams { k, ..base.knn },
        ..full.clone()
    };
    vec![
        ("grid4", ModelConfig { graph: GraphKind::Grid4, ..full.clone() }),
        ("grid8", ModelConfig { graph: GraphKind::Grid8, ..full.clone() }),
        ("knn8", knn(8)),
        ("knn16", knn(16)),
        ("knn32", knn(32)),
    ]
}

/// `(preset label, row name, config)` for every row of `preset`.
pub fn preset_rows(preset: Preset, base: &ModelConfig) -> Vec<(&'static str, &'static str, ModelConfig)> {
    let table5 = component_variants(base).into_iter().map(|(n, c)| ("table5", n, c));
    let table6 = graph_variants(base).into_iter().map(|(n, c)| ("table6", n, c));
    match preset {
        Preset::Table5 => table5.collect(),
        Preset::Table6 => table6.collect(),
        Preset::All => table5.chain(table6).collect(),
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub preset: &'static str,
    pub name: &'static str,
    pub params: usize,
    pub steps: u64,
    pub final_loss: f64,
    pub metrics: Metrics,
    /// Resolution denominators where SAGE ran during evaluation.
    pub gnn_scales: Vec<usize>,
    pub expected_scales: Vec<usize>,
    pub seconds: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str =
        "preset,config,params,steps,final_loss,rmse,abs_rel,delta1,mae,gnn_scales,expected_scales,seconds";

    pub fn csv_row(&self) -> String {
        let scales = |s: &[usize]| s.iter().map(usize::to_string).collect::<Vec<_>>().join("|");
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.preset,
            self.name,
            self.params,
            self.steps,
            self.final_loss,
            m.rmse,
            m.abs_rel,
            m.delta1,
            m.mae,
            scales(&self.gnn_scales),
            scales(&self.expected_scales),
            self.seconds
        )
    }

    pub fn scales_match(&self) -> bool {
        self.gnn_scales == self.expected_scales
    }
}

/// Trains every row of `preset` for `steps` steps on `train` and evaluates
/// on `val` (or `train` when absent). `on_row` sees each finished row.
pub fn run_ablation(
    preset: Preset,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    weights: &LossWeights,
    steps: u64,
    train: &Dataset,
    val: Option<&Dataset>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let eval_set = val.unwrap_or(train);
    let probe = eval_set.batch(&[0])?.0;
    let mut rows = Vec::new();
    for (label, name, cfg) in preset_rows(preset, base) {
        let start = Instant::now();
        let model = GraphDepthModel::new(cfg.clone())?;
        let params = model.param_count();
        let tc = TrainConfig {
            steps: Some(steps),
            eval_every: 0,
            checkpoint_every: 0,
            ..train_cfg.clone()
        };
        let mut trainer = Trainer::new(model, tc, *weights)?;
        let summary = trainer.run(train, None, None, |_| true)?;
        let final_loss = summary.records.last().map_or(f64::NAN, |r| r.loss.total);
        if !final_loss.is_finite() {
            return Err(Error::usage(format!("ablation row {name} ran no steps")));
        }
        let metrics = evaluate(&trainer.model, eval_set, train_cfg.batch_size)?;
        let trace = trainer.model.predict(&probe)?.trace;
        let row = AblationRow {
            preset: label,
            name,
            params,
            steps: summary.records.len() as u64,
            final_loss,
            metrics,
            gnn_scales: trace.gnn_scales(probe.shape()[2]),
            expected_scales: cfg.expected_gnn_scales(),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Header plus one line per row.
pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{}\n", AblationRow::CSV_HEADER);
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SceneConfig;

    #[test]
    fn component_rows_are_cumulative() {
        let rows = component_variants(&ModelConfig::default());
        let names: Vec<_> = rows.iter().map(|r| r.0).collect();
        assert_eq!(
            names,
            ["baseline", "+bottleneck-gnn", "+multi-scale", "+attention", "+uncertainty", "+knn"]
        );
        let scales: Vec<Vec<usize>> = rows.iter().map(|r| r.1.expected_gnn_scales()).collect();
        assert_eq!(scales[0], Vec::<usize>::new());
        assert_eq!(scales[1], vec![32]);
        for s in &scales[2..] {
            assert_eq!(s, &vec![32, 16, 8]);
        }
        assert!(!rows[2].1.channel_attention && rows[3].1.channel_attention);
        assert!(!rows[3].1.uncertainty_head && rows[4].1.uncertainty_head);
        assert_eq!(rows[4].1.graph, GraphKind::Grid8);
        assert_eq!(rows[5].1.graph, GraphKind::Knn);
    }

    #[test]
    fn graph_rows_vary_only_topology() {
        let base = ModelConfig::default();
        let rows = graph_variants(&base);
        assert_eq!(rows.len(), 5);
        let ks: Vec<_> = rows[2..].iter().map(|r| r.1.knn.k).collect();
        assert_eq!(ks, [8, 16, 32]);
        for (_, c) in &rows {
            assert!(c.multi_scale_gnn && c.channel_attention && c.uncertainty_head);
            assert_eq!(c.encoder_channels, base.encoder_channels);
        }
        assert_eq!(preset_rows(Preset::All, &base).len(), 11);
    }

    #[test]
    fn preset_names_parse() {
        assert_eq!("table5".parse::<Preset>().unwrap(), Preset::Table5);
        assert_eq!("tableX".parse::<Preset>().unwrap_err().kind(), "config");
    }

    #[test]
    fn short_run_emits_one_row_per_config() {
        let data = Dataset::synthetic(&SceneConfig { height: 32, width: 32, ..SceneConfig::default() }, 2).unwrap();
        let tc = TrainConfig { batch_size: 2, ..TrainConfig::default() };
        let mut seen = 0;
        let rows = run_ablation(Preset::Table5, &ModelConfig::default(), &tc, &LossWeights::default(), 2, &data, None, |_| seen += 1).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(seen, 6);
        assert!(rows.iter().all(|r| r.final_loss.is_finite() && r.scales_match() && r.steps == 2));
        assert_eq!(rows_to_csv(&rows).lines().count(), 7);
    }
}
