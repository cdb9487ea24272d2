//! `quant-analyze`: analytic and simulated bf16 depth quantization error.

use std::fs;
use std::io::Write;

use e2p_core::quant::{analytic_error, default_power_grid, optimality_scan, Mapping, QuantReport, DEFAULT_QUAD_NODES};
use e2p_core::SeededRng;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::svg;

/// Analytic error of each power exponent on one range.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSweep {
    pub y_min: f64,
    pub y_max: f64,
    pub rows: Vec<(f64, f64)>,
    pub best: f64,
}

/// `n` depths drawn uniformly from `[y_min, y_max]`.
pub fn uniform_depths(seed: u64, y_min: f64, y_max: f64, n: usize) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    (0..n).map(|_| rng.uniform_range(y_min, y_max)).collect()
}

/// One report row per (range, mapping). Empirical errors use `samples`
/// uniform depths per range, or are skipped when `samples` is zero.
pub fn analyze(ranges: &[(f64, f64)], mappings: &[Mapping], samples: usize, seed: u64) -> Result<Vec<QuantReport>, CliError> {
    let mut rows = Vec::new();
    for (i, &(lo, hi)) in ranges.iter().enumerate() {
        let depths = (samples > 0).then(|| uniform_depths(SeededRng::new(seed).derive(i as u64).next_u64(), lo, hi, samples));
        for &m in mappings {
            rows.push(QuantReport::build(m, lo, hi, depths.as_deref())?);
        }
    }
    Ok(rows)
}

pub fn power_sweep(y_min: f64, y_max: f64) -> Result<PowerSweep, CliError> {
    let grid = default_power_grid();
    let rows = grid
        .iter()
        .map(|&p| Ok((p, analytic_error(Mapping::Power(p), y_min, y_max, DEFAULT_QUAD_NODES)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let best = optimality_scan(&grid, y_min, y_max)?;
    Ok(PowerSweep { y_min, y_max, rows, best })
}

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let ranges = cfg.ranges("range")?;
    let mappings: Vec<Mapping> = cfg.list("mapping")?;
    if ranges.is_empty() || mappings.is_empty() {
        return Err(CliError::Config("need at least one range and one mapping".into()));
    }
    let rows = analyze(&ranges, &mappings, cfg.parse("samples")?, cfg.parse("seed")?)?;
    let mut table = format!("{}\n", QuantReport::HEADER);
    for r in &rows {
        table.push_str(&r.to_line());
        table.push('\n');
    }
    let mut sweeps = Vec::new();
    if cfg.flag("power-sweep")? {
        for &(lo, hi) in &ranges {
            let s = power_sweep(lo, hi)?;
            table.push_str(&format!("\npower sweep [{lo}, {hi}]\np\tanalytic\n"));
            for (p, e) in &s.rows {
                table.push_str(&format!("{p:.2}\t{e:.6}\n"));
            }
            table.push_str(&format!("argmin p = {}\n", s.best));
            sweeps.push(s);
        }
    }
    out.write_all(table.as_bytes())?;
    if let Some(dir) = cfg.get("out") {
        let dir = std::path::PathBuf::from(dir);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("quant.tsv"), &table)?;
        let cats: Vec<String> = ranges.iter().map(|(lo, hi)| format!("[{lo}, {hi}]")).collect();
        let series: Vec<(String, Vec<f64>)> = mappings
            .iter()
            .enumerate()
            .map(|(j, m)| (m.to_string(), (0..ranges.len()).map(|i| rows[i * mappings.len() + j].analytic_error * 100.0).collect()))
            .collect();
        fs::write(dir.join("quant.svg"), svg::bar_chart("Analytic relative error", "error (%)", &cats, &series))?;
        if !sweeps.is_empty() {
            let lines: Vec<svg::Series> = sweeps
                .iter()
                .map(|s| svg::Series { label: format!("[{}, {}]", s.y_min, s.y_max), points: s.rows.clone() })
                .collect();
            fs::write(dir.join("power_sweep.svg"), svg::line_chart("Power mapping sweep", "p", "analytic error", &lines))?;
        }
        cfg.write_to(&dir)?;
    }
    Ok(())
}
