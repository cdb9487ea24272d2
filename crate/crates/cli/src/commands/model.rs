//! `infer`, `eval` and `steps-sweep`: commands that use a trained checkpoint
//! or its predictions.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use e2p_core::dtf::{read_dtf, write_dtf};
use e2p_core::flow::NoiseSchedule;
use e2p_core::metrics::EvalResult;
use e2p_core::nn::checkpoint::load_checkpoint;
use e2p_core::nn::train::evaluate_prediction;
use e2p_core::nn::{evaluate, infer as infer_latent, NetConfig, VelocityNet};
use e2p_core::quant::Mapping;
use e2p_core::synth::read_manifest;
use e2p_core::Task;

use super::train::load_examples;
use crate::config::{read_receipt, RunConfig};
use crate::error::CliError;
use crate::svg;

const MODEL_KEYS: [&str; 4] = ["task", "mapping", "hidden", "seed"];

/// Fills model settings left empty from the receipt next to `source`.
fn complete_from_receipt(cfg: &RunConfig, source: &Path, keys: &[&str]) -> Result<RunConfig, CliError> {
    let mut cfg = cfg.clone();
    let dir = if source.is_dir() {
        source
    } else {
        source.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
    };
    let receipt = read_receipt(dir)?.unwrap_or_default();
    for key in keys {
        if cfg.get(key).is_none() {
            let value = receipt.get(*key).ok_or_else(|| {
                CliError::Config(format!("--{key} not given and no {key} in the run config next to {}", source.display()))
            })?;
            cfg.set(key, value);
        }
    }
    Ok(cfg)
}

/// Loads the checkpoint named by `ckpt`, completing model settings from its
/// receipt. Returns the completed config, the network and its z0 seed.
pub fn load_model(cfg: &RunConfig) -> Result<(RunConfig, VelocityNet, u64), CliError> {
    let ckpt = cfg.path("ckpt")?;
    let cfg = complete_from_receipt(cfg, &ckpt, &MODEL_KEYS)?;
    let net_cfg = NetConfig::new(cfg.parse("task")?, cfg.parse("mapping")?, cfg.list("hidden")?)?;
    let (net, _) = load_checkpoint(&ckpt, &net_cfg)?;
    let seed = cfg.parse("seed")?;
    Ok((cfg, net, seed))
}

fn prediction_names(data: &Path) -> Result<Vec<String>, CliError> {
    Ok(read_manifest(data)?
        .iter()
        .map(|e| e.rgb.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect())
}

pub fn infer(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let (cfg, net, seed) = load_model(cfg)?;
    let data = cfg.path("data")?;
    let out_dir = cfg.path("out")?;
    let steps: usize = cfg.parse("steps")?;
    let examples = load_examples(&data, cfg.parse("task")?, cfg.parse("mapping")?)?;
    let names = prediction_names(&data)?;
    let noise = NoiseSchedule::default();
    fs::create_dir_all(&out_dir)?;
    let preds = examples
        .par_iter()
        .map(|ex| Ok(infer_latent(&net, &ex.cond, ex.shape(), steps, seed, &noise)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    for (pred, name) in preds.iter().zip(&names) {
        write_dtf(pred, &out_dir.join(name))?;
    }
    cfg.write_to(&out_dir)?;
    writeln!(out, "wrote {} predictions ({} step{}) to {}", preds.len(), steps, if steps == 1 { "" } else { "s" }, out_dir.display())?;
    Ok(())
}

/// Per-image metrics and their mean.
#[derive(Clone, Debug)]
pub struct EvalTable {
    pub rows: Vec<(String, EvalResult)>,
    pub mean: EvalResult,
}

impl EvalTable {
    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", self.mean.csv_header());
        for (name, r) in &self.rows {
            s.push_str(&r.csv_row(name));
            s.push('\n');
        }
        s.push_str(&self.mean.csv_row("mean"));
        s.push('\n');
        s
    }

    pub fn text(&self) -> String {
        let mut s = format!("{} images\n", self.mean.count);
        for (k, v) in &self.mean.metrics {
            s.push_str(&format!("{k:>16} {v:.6}\n"));
        }
        s
    }
}

/// Scores latent predictions in `pred` against the ground-truth split
/// `data`. Depth predictions are decoded with each image's own GT encoding.
pub fn score(pred: &Path, data: &Path, task: Task, mapping: Mapping) -> Result<EvalTable, CliError> {
    let examples = load_examples(data, task, mapping)?;
    let names = prediction_names(data)?;
    let rows = examples
        .par_iter()
        .zip(names.par_iter())
        .map(|(ex, name)| {
            let z = read_dtf(&pred.join(name))?;
            if z.shape() != ex.shape() {
                return Err(CliError::Tensor(e2p_core::TensorError::ShapeMismatch {
                    expected: ex.shape().to_vec(),
                    got: z.shape().to_vec(),
                }));
            }
            Ok((name.clone(), evaluate_prediction(&z, ex)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let per: Vec<EvalResult> = rows.iter().map(|r| r.1.clone()).collect();
    Ok(EvalTable { mean: EvalResult::aggregate(task, &per), rows })
}

pub fn eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<EvalTable, CliError> {
    let pred = cfg.path("pred")?;
    let cfg = complete_from_receipt(cfg, &pred, &["task", "mapping"])?;
    let data = cfg.path("data")?;
    let table = score(&pred, &data, cfg.parse("task")?, cfg.parse("mapping")?)?;
    let out_dir = cfg.get("out").map(PathBuf::from).unwrap_or(pred);
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("eval.csv"), table.csv())?;
    let mut receipt = cfg.clone();
    receipt.set("out", out_dir.display());
    // Predictions keep their own receipt; the eval one gets its own name.
    fs::write(out_dir.join("eval_config.txt"), receipt.render())?;
    out.write_all(table.text().as_bytes())?;
    Ok(table)
}

/// Aggregate metrics at each step count.
#[derive(Clone, Debug)]
pub struct SweepTable {
    pub rows: Vec<(usize, EvalResult)>,
}

impl SweepTable {
    pub fn csv(&self) -> String {
        let Some((_, first)) = self.rows.first() else {
            return String::new();
        };
        let mut s = format!("{}\n", first.csv_header().replacen("image", "steps", 1));
        for (steps, r) in &self.rows {
            s.push_str(&r.csv_row(&steps.to_string()));
            s.push('\n');
        }
        s
    }
}

pub fn sweep(cfg: &RunConfig, out: &mut dyn Write) -> Result<SweepTable, CliError> {
    let (cfg, net, seed) = load_model(cfg)?;
    let data = cfg.path("data")?;
    let out_dir = cfg.path("out")?;
    let grid: Vec<usize> = cfg.list("steps")?;
    if grid.is_empty() {
        return Err(CliError::Config("steps list is empty".into()));
    }
    let examples = load_examples(&data, cfg.parse("task")?, cfg.parse("mapping")?)?;
    let noise = NoiseSchedule::default();
    let rows = grid
        .iter()
        .map(|&s| Ok((s, evaluate(&net, &examples, s, seed, &noise)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let table = SweepTable { rows };
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("sweep.csv"), table.csv())?;
    let names: Vec<String> = table.rows[0].1.metrics.keys().cloned().collect();
    let series: Vec<svg::Series> = names
        .iter()
        .map(|k| svg::Series { label: k.clone(), points: table.rows.iter().map(|(s, r)| (*s as f64, r.metrics[k])).collect() })
        .collect();
    fs::write(out_dir.join("sweep.svg"), svg::line_chart("Metrics vs sampler steps", "steps", "metric", &series))?;
    cfg.write_to(&out_dir)?;
    out.write_all(table.csv().replace(',', "\t").as_bytes())?;
    Ok(table)
}
