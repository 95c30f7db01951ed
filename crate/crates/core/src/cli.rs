//! Command-line front end.
//!
//! Every subcommand resolves its configuration (defaults, then an optional
//! `key = value` file, then `--set` overrides) and validates it along with
//! its inputs before touching the filesystem. Outputs land in one directory
//! together with the resolved `run.conf`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{rows_to_csv, run_ablation, AblationRow, Preset};
use crate::bench::{run_benchmarks, BenchConfig};
use crate::config::{parse_kv, render, ConfigSection};
use crate::data::{encode_pfm, Dataset, SceneConfig};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, GraphDepthModel, ModelConfig, MANIFEST_FILE};
use crate::objective::{LossWeights, Metrics};
use crate::trainer::{predict_dataset, uncertainty_correlation, TrainConfig, Trainer, CHECKPOINT_DIR, TRAIN_LOG};

/// File holding the fully resolved configuration of a run.
pub const RUN_CONFIG_FILE: &str = "run.conf";

#[derive(Parser, Debug)]
#[command(name = "graphdepth", version, about = "Graph-augmented monocular depth estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.base_lr=3e-4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on `<data>/train`, validating on `<data>/val` if present.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// Also write per-sample depth and standard-deviation maps.
        #[arg(long)]
        save_predictions: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Measure message-passing scaling.
    Bench {
        #[arg(long, default_value = "bench")]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write synthetic samples to `<out>/train` and optionally `<out>/val`.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        val_count: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and score every row of an ablation preset.
    Ablate {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        steps: u64,
        /// Dataset root; synthetic scenes are generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Every configurable section of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub loss: LossWeights,
    pub bench: BenchConfig,
}

impl RunConfig {
    fn sections_mut(&mut self) -> [(&'static str, &mut dyn ConfigSection); 5] {
        [
            ("model", &mut self.model),
            ("train", &mut self.train),
            ("scene", &mut self.scene),
            ("loss", &mut self.loss),
            ("bench", &mut self.bench),
        ]
    }

    /// Assigns a dotted key such as `train.base_lr`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (prefix, rest) = key
            .split_once('.')
            .ok_or_else(|| Error::config(format!("configuration key `{key}` lacks a section prefix")))?;
        for (name, section) in self.sections_mut() {
            if name == prefix {
                return section.set(rest, value);
            }
        }
        Err(Error::config(format!("unknown configuration section `{prefix}` in `{key}`")))
    }

    /// Applies a configuration file's text, then `KEY=VALUE` overrides.
    pub fn resolve(file_text: Option<(&str, &str)>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some((text, origin)) = file_text {
            for (k, v) in parse_kv(text, origin)? {
                cfg.set(&k, &v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{o}` is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        self.loss.validate()?;
        self.bench.validate()
    }

    pub fn render(&self) -> String {
        render(&[
            ("model", &self.model),
            ("train", &self.train),
            ("scene", &self.scene),
            ("loss", &self.loss),
            ("bench", &self.bench),
        ])
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => Some((
            fs::read_to_string(p).map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
            p.display().to_string(),
        )),
        None => None,
    };
    RunConfig::resolve(text.as_ref().map(|(t, o)| (t.as_str(), o.as_str())), &args.overrides)
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::config(format!("{what} {} is not a directory", path.display())))
    }
}

fn write_run_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(RUN_CONFIG_FILE), cfg.render())?;
    Ok(())
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
/// Failures print one `error kind=<kind> code=<code>: <message>` line to
/// stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if code == 0 {
                let _ = e.print();
            } else {
                eprintln!("error kind=usage code=1: {}", e.to_string().lines().next().unwrap_or("invalid arguments"));
            }
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error kind={} code={}: {e}", e.kind(), e.exit_code());
            e.exit_code()
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { data, out, steps, resume, cfg } => train(&data, &out, steps, resume.as_deref(), &cfg),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            save_predictions,
            cfg,
        } => eval(&checkpoint, &data, &split, &out, save_predictions, &cfg),
        Command::Bench { out, threads, cfg } => bench(&out, threads, &cfg),
        Command::GenData {
            out,
            count,
            seed,
            val_count,
            cfg,
        } => gen_data(&out, count, seed, val_count, &cfg),
        Command::Ablate {
            preset,
            steps,
            data,
            out,
            cfg,
        } => ablate(&preset, steps, data.as_deref(), &out, &cfg),
    }
}

fn train(data: &Path, out: &Path, steps: Option<u64>, resume: Option<&Path>, args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(s) = steps {
        cfg.train.steps = Some(s);
    }
    cfg.validate()?;
    require_dir(&data.join("train"), "training split")?;
    let ckpt = match resume {
        Some(dir) => Some(load_checkpoint(dir)?),
        None => None,
    };
    if let Some(c) = &ckpt {
        cfg.model = c.config.clone();
    }
    let train_set = Dataset::load(data, "train")?;
    let val_set = match data.join("val").is_dir() {
        true => Some(Dataset::load(data, "val")?),
        false => None,
    };
    let mut trainer = match ckpt {
        Some(c) => Trainer::from_checkpoint(c, cfg.train.clone(), cfg.loss)?,
        None => Trainer::new(GraphDepthModel::new(cfg.model.clone())?, cfg.train.clone(), cfg.loss)?,
    };
    // A non-empty split is checked before the output directory appears.
    trainer.total_steps(train_set.len())?;
    write_run_config(out, &cfg)?;
    let summary = trainer.run(&train_set, val_set.as_ref(), Some(out), |_| true)?;
    let last = summary.records.last();
    println!(
        "trained {} steps, final loss {}, logs in {}",
        summary.records.len(),
        last.map_or(f64::NAN, |r| r.loss.total),
        out.join(TRAIN_LOG).display()
    );
    if let Some((step, _, m)) = summary.metrics.last() {
        println!("val at step {step}: rmse {:.4} abs_rel {:.4} delta1 {:.4}", m.rmse, m.abs_rel, m.delta1);
    }
    Ok(())
}

/// Column layout of the `eval` metrics file.
pub const EVAL_CSV_HEADER: &str = "split,samples,rmse,abs_rel,delta1,mae,mean_sigma,sigma_error_spearman";

/// Name of the metrics file `eval` writes into its output directory.
pub const EVAL_METRICS_FILE: &str = "eval_metrics.csv";

fn eval(ckpt_dir: &Path, data: &Path, split: &str, out: &Path, save_predictions: bool, args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    cfg.validate()?;
    require_dir(&data.join(split), "evaluation split")?;
    if !ckpt_dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::config(format!(
            "{} holds no {MANIFEST_FILE}; pass the `{CHECKPOINT_DIR}` directory written by train",
            ckpt_dir.display()
        )));
    }
    let ckpt = load_checkpoint(ckpt_dir)?;
    cfg.model = ckpt.config.clone();
    let model = ckpt.into_model()?;
    let set = Dataset::load(data, split)?;
    if set.is_empty() {
        return Err(Error::usage(format!("split {split} under {} is empty", data.display())));
    }
    let preds = predict_dataset(&model, &set, cfg.train.batch_size)?;
    let (mut p, mut y, mut m) = (Vec::new(), Vec::new(), Vec::new());
    for (d, s) in preds.depth.iter().zip(&set.samples) {
        p.extend_from_slice(d);
        y.extend(s.depth.iter().map(|&v| v as f64));
        m.extend_from_slice(&s.mask);
    }
    let metrics: Metrics = crate::objective::compute_metrics(&p, &y, &m)?;
    let rho = uncertainty_correlation(&preds, &set)?;
    let sigmas: Option<Vec<Vec<f64>>> = preds
        .log_var
        .as_ref()
        .map(|lv| lv.iter().map(|s| s.iter().map(|v| (v / 2.0).exp()).collect()).collect());
    let mean_sigma = sigmas.as_ref().map(|all| {
        let n: usize = all.iter().map(Vec::len).sum();
        all.iter().flatten().sum::<f64>() / n as f64
    });
    let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());

    write_run_config(out, &cfg)?;
    let mut f = fs::File::create(out.join(EVAL_METRICS_FILE))?;
    writeln!(f, "{EVAL_CSV_HEADER}")?;
    writeln!(
        f,
        "{split},{},{},{},{},{},{},{}",
        set.len(),
        metrics.rmse,
        metrics.abs_rel,
        metrics.delta1,
        metrics.mae,
        opt(mean_sigma),
        opt(rho)
    )?;
    if save_predictions {
        let dir = out.join("predictions");
        fs::create_dir_all(&dir)?;
        for (i, (id, s)) in set.ids.iter().zip(&set.samples).enumerate() {
            let as_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
            fs::write(dir.join(format!("{id}.depth.pfm")), encode_pfm(s.width, s.height, &as_f32(&preds.depth[i])))?;
            if let Some(sig) = &sigmas {
                fs::write(dir.join(format!("{id}.sigma.pfm")), encode_pfm(s.width, s.height, &as_f32(&sig[i])))?;
            }
        }
    }
    println!(
        "{split}: rmse {:.4} abs_rel {:.4} delta1 {:.4} mae {:.4} sigma/error spearman {}",
        metrics.rmse,
        metrics.abs_rel,
        metrics.delta1,
        metrics.mae,
        opt(rho)
    );
    Ok(())
}

fn bench(out: &Path, threads: Option<usize>, args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(t) = threads {
        cfg.bench.threads = t;
    }
    cfg.validate()?;
    let report = run_benchmarks(&cfg.bench)?;
    write_run_config(out, &cfg)?;
    fs::write(out.join("bench.csv"), report.to_csv())?;
    fs::write(out.join("summary.txt"), report.summary())?;
    print!("{}", report.summary());
    Ok(())
}

fn gen_data(out: &Path, count: usize, seed: u64, val_count: usize, args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    cfg.scene.seed = seed;
    cfg.validate()?;
    if count == 0 {
        return Err(Error::config("--count must be at least 1"));
    }
    let train = Dataset::synthetic(&cfg.scene, count)?;
    // Validation scenes continue the seed sequence so no scene repeats.
    let val_scene = SceneConfig {
        seed: seed.wrapping_add(count as u64),
        ..cfg.scene.clone()
    };
    let val = Dataset::synthetic(&val_scene, val_count)?;
    write_run_config(out, &cfg)?;
    train.save(out, "train")?;
    if val_count > 0 {
        val.save(out, "val")?;
    }
    println!("wrote {count} training and {val_count} validation samples to {}", out.display());
    Ok(())
}

fn ablate(preset: &str, steps: u64, data: Option<&Path>, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    cfg.validate()?;
    let preset: Preset = preset.parse()?;
    if steps == 0 {
        return Err(Error::config("--steps must be at least 1"));
    }
    let (train_set, val_set) = match data {
        Some(root) => {
            require_dir(&root.join("train"), "training split")?;
            let val = match root.join("val").is_dir() {
                true => Some(Dataset::load(root, "val")?),
                false => None,
            };
            (Dataset::load(root, "train")?, val)
        }
        None => (Dataset::synthetic(&cfg.scene, cfg.train.batch_size)?, None),
    };
    write_run_config(out, &cfg)?;
    println!("{}", AblationRow::CSV_HEADER);
    let rows = run_ablation(
        preset,
        &cfg.model,
        &cfg.train,
        &cfg.loss,
        steps,
        &train_set,
        val_set.as_ref(),
        |r| println!("{}", r.csv_row()),
    )?;
    fs::write(out.join("ablation.csv"), rows_to_csv(&rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_over_file() {
        let cfg = RunConfig::resolve(
            Some(("train.base_lr = 0.5\nmodel.graph = knn\n", "t.conf")),
            &["train.base_lr=0.25".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.base_lr, 0.25);
        assert_eq!(cfg.model.graph, crate::graph::GraphKind::Knn);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for key in ["train.nope=1", "nosection.x=1", "noprefix=1", "model.max_depth"] {
            assert_eq!(RunConfig::resolve(None, &[key.into()]).unwrap_err().kind(), "config", "{key}");
        }
    }

    #[test]
    fn rendered_config_resolves_to_itself() {
        let cfg = RunConfig::resolve(None, &["scene.kappa=0.02".into(), "train.steps=7".into(), "model.knn.k=8".into()]).unwrap();
        let back = RunConfig::resolve(Some((&cfg.render(), "run.conf")), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_failures_exit_with_one() {
        assert_eq!(dispatch(["graphdepth", "train", "--bogus"]), 1);
        assert_eq!(dispatch(["graphdepth", "fly"]), 1);
    }
}
