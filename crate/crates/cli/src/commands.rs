use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use gaunet::bench::{run_bench, BenchConfig};
use gaunet::data::{load_dataset, save_dataset};
use gaunet::experiments::{
    export_effective_filters, run_robustness_study, run_variance_study, RobustnessStudyConfig, StudyData,
    VarianceStudyConfig,
};
use gaunet::io::fmt_float;
use gaunet::net::{evaluate, predict_count, train as train_net, Model, NetworkConfig, TrainOptions};
use gaunet::report::Table;

use crate::config::resolve;
use crate::manifest::Run;
use crate::Common;

/// Resolves the command config; `--seed` sets every key in `seed_keys`.
fn load<T>(common: &Common, seed_keys: &[&str]) -> Result<T>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        if seed_keys.is_empty() {
            bail!("this command takes no seed");
        }
        overrides.extend(seed_keys.iter().map(|k| format!("{k}={seed}")));
    }
    resolve(common.config.as_deref(), &overrides)
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec_pretty(v)?)
}

pub fn gen_data(common: &Common, run: &mut Run) -> Result<()> {
    let cfg: StudyData = load(common, &["seed"])?;
    run.set_config(&cfg)?;
    let (train, test) = cfg.generate()?;
    for (name, ds) in [("train", &train), ("test", &test)] {
        let written = save_dataset(ds, &run.path(name))?;
        run.record_all(&format!("{name}/"), written);
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCommand {
    pub network: NetworkConfig,
    pub train: TrainOptions,
    /// Dataset directory written by `gen-data`.
    pub data: PathBuf,
    /// Optional dataset scored after every epoch.
    pub eval_data: Option<PathBuf>,
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        bail!("`{what}` must name a directory");
    }
    Ok(())
}

pub fn train(common: &Common, run: &mut Run) -> Result<()> {
    let cfg: TrainCommand = load(common, &["network.seed", "train.shuffle_seed"])?;
    run.set_config(&cfg)?;
    require(&cfg.data, "data")?;
    let data = load_dataset(&cfg.data).with_context(|| format!("loading {}", cfg.data.display()))?;
    let eval = match &cfg.eval_data {
        Some(p) => Some(load_dataset(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let (state, report) = train_net(&cfg.network, &data, &cfg.train, eval.as_ref())?;
    let written = state.model.save(&run.path("checkpoint"))?;
    run.record_all("checkpoint/", written);
    run.write("report.json", report.to_json()?)?;
    let mut epochs = Table::new(&["epoch", "loss_mean", "loss_median", "train_mae", "train_mse", "eval_mae", "eval_mse"]);
    let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
    for e in &report.epochs {
        epochs.push(vec![
            e.epoch.to_string(),
            fmt_float(e.loss_mean),
            fmt_float(e.loss_median),
            fmt_float(e.train_mae),
            fmt_float(e.train_mse),
            opt(e.eval_mae),
            opt(e.eval_mse),
        ])?;
    }
    run.write("epochs.csv", epochs.to_csv()?)?;
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCommand {
    /// Checkpoint directory written by `train`.
    pub checkpoint: PathBuf,
    pub data: PathBuf,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    images: usize,
    mean_count: f64,
    mae: f64,
    mse: f64,
}

pub fn eval(common: &Common, run: &mut Run) -> Result<()> {
    let cfg: EvalCommand = load(common, &[])?;
    run.set_config(&cfg)?;
    require(&cfg.checkpoint, "checkpoint")?;
    require(&cfg.data, "data")?;
    let model = Model::load(&cfg.checkpoint).with_context(|| format!("loading {}", cfg.checkpoint.display()))?;
    let data = load_dataset(&cfg.data)?;
    let (mae, mse) = evaluate(&model, &data)?;
    let mut table = Table::new(&["image_id", "predicted", "annotated"]);
    for s in &data.samples {
        table.push(vec![s.id.clone(), fmt_float(predict_count(&model, &s.image)?), fmt_float(s.count())])?;
    }
    run.write("predictions.csv", table.to_csv()?)?;
    let summary = EvalSummary {
        images: data.len(),
        mean_count: data.mean_count(),
        mae,
        mse,
    };
    run.write("eval.json", json_bytes(&summary)?)?;
    Ok(())
}

pub fn bench(common: &Common, run: &mut Run) -> Result<()> {
    let cfg: BenchConfig = load(common, &["seed"])?;
    run.set_config(&cfg)?;
    let report = run_bench(&cfg)?;
    run.write("bench.json", report.to_json()?)?;
    run.write("bench.csv", report.table()?.to_csv()?)?;
    Ok(())
}

pub fn study_variance(common: &Common, run: &mut Run) -> Result<()> {
    let cfg: VarianceStudyConfig = load(common, &["seed", "data.seed"])?;
    run.set_config(&cfg)?;
    let report = run_variance_study(&cfg)?;
    run.write("report.json", report.to_json()?)?;
    run.write("replicas.csv", report.table.to_csv()?)?;
    Ok(())
}

pub fn study_noise(common: &Common, run: &mut Run) -> Result<()> {
    let cfg: RobustnessStudyConfig = load(common, &["data.seed"])?;
    run.set_config(&cfg)?;
    let (report, curves) = run_robustness_study(&cfg)?;
    run.write("report.json", report.to_json()?)?;
    run.write("curve.csv", report.table.to_csv()?)?;
    run.write("degradation.json", json_bytes(&curves)?)?;
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizCommand {
    pub checkpoint: PathBuf,
}

#[derive(Debug, Serialize)]
struct FilterEntry {
    layer_index: usize,
    side: usize,
    file: String,
}

pub fn viz_filters(common: &Common, run: &mut Run) -> Result<()> {
    let cfg: VizCommand = load(common, &[])?;
    run.set_config(&cfg)?;
    require(&cfg.checkpoint, "checkpoint")?;
    let model = Model::load(&cfg.checkpoint)?;
    let mut index = Vec::new();
    for img in export_effective_filters(&model)? {
        let file = format!("filters/layer_{:02}.pgm", img.layer_index);
        run.write(&file, &img.pgm)?;
        index.push(FilterEntry {
            layer_index: img.layer_index,
            side: img.side,
            file,
        });
    }
    run.write("filters.json", json_bytes(&index)?)?;
    Ok(())
}
