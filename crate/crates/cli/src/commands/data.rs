//! `gen-data`: render a synthetic train/val dataset.

use std::io::Write;

use e2p_core::synth::{make_split, SplitParams};

use crate::config::{parse_range, RunConfig};
use crate::error::CliError;

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let root = cfg.path("out")?;
    let params = SplitParams {
        resolution: cfg.parse("resolution")?,
        depth_range: parse_range(cfg.require("range")?)?,
        max_objects: cfg.parse("max-objects")?,
    };
    let (n_train, n_val): (usize, usize) = (cfg.parse("n-train")?, cfg.parse("n-val")?);
    make_split(&root, cfg.parse("seed")?, n_train, n_val, &params)?;
    cfg.write_to(&root)?;
    writeln!(out, "wrote {n_train} train and {n_val} val scenes to {}", root.display())?;
    Ok(())
}
