//! `train`: fit a velocity network on a generated dataset.

use std::fs;
use std::io::Write;
use std::path::Path;

use e2p_core::losses::LossReport;
use e2p_core::metrics::EvalResult;
use e2p_core::nn::checkpoint::save_checkpoint;
use e2p_core::nn::{evaluate, prepare_examples, Example, Trainer, TrainerConfig};
use e2p_core::quant::Mapping;
use e2p_core::synth::load_split;
use e2p_core::Task;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::svg;

pub const DEFAULT_BATCH: &str = "2";
pub const DEFAULT_LR: &str = "0.003";
pub const DEFAULT_HIDDEN: &str = "16,16,16,16";
pub const CHECKPOINT_FILE: &str = "model.e2pc";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    /// Validation metrics after each epoch (empty without a val split).
    pub val: Vec<EvalResult>,
    pub steps_taken: u64,
}

pub fn load_examples(dir: &Path, task: Task, mapping: Mapping) -> Result<Vec<Example>, CliError> {
    if !dir.join("manifest.txt").is_file() {
        let msg = format!("{} has no manifest.txt", dir.display());
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, msg).into());
    }
    Ok(prepare_examples(&load_split(dir)?, task, mapping)?)
}

pub fn trainer_config(cfg: &RunConfig, n_train: usize) -> Result<TrainerConfig, CliError> {
    let mut tc = TrainerConfig::new(cfg.parse("task")?, cfg.parse("mapping")?);
    tc.use_cons = cfg.flag("use-cons")?;
    tc.epochs = cfg.parse("epochs")?;
    tc.batch = cfg.parse("batch")?;
    tc.lr = cfg.parse("lr")?;
    tc.hidden = cfg.list("hidden")?;
    let clip: f64 = cfg.parse("grad-clip")?;
    tc.grad_clip = (clip != 0.0).then_some(clip);
    tc.seed = cfg.parse("seed")?;
    tc.n_step = TrainerConfig::steps_per_epoch(n_train, tc.batch);
    tc.validate()?;
    Ok(tc)
}

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainOutcome, CliError> {
    let root = cfg.path("data")?;
    let out_dir = cfg.path("out")?;
    let task: Task = cfg.parse("task")?;
    let mapping: Mapping = cfg.parse("mapping")?;
    let train = load_examples(&root.join("train"), task, mapping)?;
    let val_dir = root.join("val");
    let val = if val_dir.join("manifest.txt").exists() { load_examples(&val_dir, task, mapping)? } else { Vec::new() };
    let tc = trainer_config(cfg, train.len())?;
    let eval_steps: usize = cfg.parse("steps")?;
    let (seed, noise) = (tc.seed, tc.noise);
    let mut trainer = Trainer::new(tc)?;
    let mut val_rows = Vec::new();
    let reports = trainer.fit(&train, |epoch, reports, net| {
        let fm = reports.iter().map(|r| r.l_fm).sum::<f64>() / reports.len().max(1) as f64;
        let mut line = format!("epoch {epoch}: mean l_fm {fm:.5}");
        if !val.is_empty() {
            let res = evaluate(net, &val, eval_steps, seed, &noise)?;
            for (k, v) in &res.metrics {
                line.push_str(&format!(", val {k} {v:.5}"));
            }
            val_rows.push(res);
        }
        writeln!(out, "{line}")?;
        Ok(())
    })?;
    fs::create_dir_all(&out_dir)?;
    save_checkpoint(&trainer.net, trainer.step().min(u32::MAX as u64) as u32, &out_dir.join(CHECKPOINT_FILE))?;
    let mut csv = format!("{}\n", LossReport::CSV_HEADER);
    for r in &reports {
        csv.push_str(&r.to_csv_row());
        csv.push('\n');
    }
    fs::write(out_dir.join("losses.csv"), csv)?;
    if let Some(first) = val_rows.first() {
        let mut csv = first.csv_header().replacen("image", "epoch", 1) + "\n";
        for (e, r) in val_rows.iter().enumerate() {
            csv.push_str(&r.csv_row(&e.to_string()));
            csv.push('\n');
        }
        fs::write(out_dir.join("val.csv"), csv)?;
    }
    let series = vec![
        svg::Series { label: "l_fm".into(), points: reports.iter().map(|r| (r.step as f64, r.l_fm)).collect() },
        svg::Series { label: "total".into(), points: reports.iter().map(|r| (r.step as f64, r.total)).collect() },
    ];
    fs::write(out_dir.join("loss.svg"), svg::line_chart("Training loss", "step", "loss", &series))?;
    cfg.write_to(&out_dir)?;
    writeln!(out, "checkpoint {}", out_dir.join(CHECKPOINT_FILE).display())?;
    Ok(TrainOutcome { reports, val: val_rows, steps_taken: trainer.step() })
}
