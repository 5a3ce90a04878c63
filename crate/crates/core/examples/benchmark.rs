//! Drives the benchmark harness from code: a small spatial experiment, the
//! summary table and the CSV outputs.
//!
//! cargo run --release --example benchmark -- [out_dir]

use smcmc_flow::harness::{emit_outputs, format_table, run_experiment, ExperimentConfig, ModelKind, RunMetadata};

fn main() -> smcmc_flow::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("smcmc-benchmark-example"), Into::into);
    let cfg = ExperimentConfig::new("spatial-d16-example", ModelKind::Spatial, 16, 10, 4).with_filters(&[
        "smcmc-edh:100",
        "smcmc-prior:100",
        "pfpf-edh:200",
        "ekf",
        "ukf",
        "bpf:2000",
    ]);
    cfg.validate()?;
    let report = run_experiment(&cfg, None)?;
    let summary = emit_outputs(&report, &out, &RunMetadata::current(None))?;
    print!("{}", format_table(&summary));
    println!("outputs written to {}", out.display());
    Ok(())
}
