//! `grad-check`: finite-difference verification of every op, loss and the
//! network, plus the atan2 versus arccos gradient table.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use e2p_core::nn::gradcheck::{check_losses, check_nets, check_ops, loss_agreement, near_parallel_dots, stability_row, CheckResult};

use crate::config::RunConfig;
use crate::error::CliError;

/// Random seeds per primitive op.
pub const OP_SEEDS: u64 = 20;
/// Samples of the loss-agreement scan over `|dot| ≤ 0.999`.
const AGREEMENT_SAMPLES: usize = 2000;

pub struct GradReport {
    pub checks: Vec<CheckResult>,
    pub text: String,
}

impl GradReport {
    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

pub fn report(points: u64) -> Result<GradReport, CliError> {
    let mut checks = check_ops(OP_SEEDS)?;
    checks.extend(check_losses(points)?);
    checks.push(check_nets(points)?);
    let mut text = String::from("check\ttrials\tmax_rel_err\ttolerance\tstatus\n");
    for c in &checks {
        text.push_str(&format!(
            "{}\t{}\t{:.3e}\t{:.0e}\t{}\n",
            c.name,
            c.trials,
            c.max_rel_err,
            c.tolerance,
            if c.passed() { "pass" } else { "FAIL" }
        ));
    }
    text.push_str("\ndot\tatan2_loss\tarccos_loss\tatan2_grad\tarccos_grad\n");
    for dot in near_parallel_dots() {
        let r = stability_row(dot)?;
        text.push_str(&format!(
            "1-{:.0e}\t{:.3e}\t{:.3e}\t{:.3e}\t{:.3e}\n",
            1.0 - dot,
            r.atan2_loss,
            r.arccos_loss,
            r.atan2_grad_norm,
            r.arccos_grad_norm
        ));
    }
    text.push_str(&format!("\nmax |atan2 - arccos| for |dot| <= 0.999: {:.3e}\n", loss_agreement(AGREEMENT_SAMPLES)?));
    Ok(GradReport { checks, text })
}

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let rep = report(cfg.parse("points")?)?;
    out.write_all(rep.text.as_bytes())?;
    if let Some(dir) = cfg.get("out").map(PathBuf::from) {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("grad_check.tsv"), &rep.text)?;
        cfg.write_to(&dir)?;
    }
    let failed: Vec<&str> = rep.failures().iter().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient check failed for {}", failed.join(", "))))
    }
}
