//! Grid sweeps over one parameter with a combined comparison table.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::run::{mean_std, run_training};

/// Parameters a sweep may vary.
pub const SWEEP_PARAMS: [&str; 3] = ["T", "L", "mode"];

fn canonical(parameter: &str) -> Option<&'static str> {
    match parameter {
        "T" | "threshold" => Some("T"),
        "L" | "range" => Some("L"),
        "mode" => Some("mode"),
        _ => None,
    }
}

/// One row per swept value, aggregated over seeds from the final
/// evaluation of each seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub seeds: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub cost1_mean: f64,
    pub cost2_mean: f64,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub opening_mean: f64,
    pub success_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| {} | reward/step | bits/step | round-1 bits | round-2 bits | opening | success |\n|---|---|---|---|---|---|---|\n",
            self.parameter
        );
        for r in &self.rows {
            let success = r.success_mean.map_or("-".to_string(), |v| format!("{:.3}", v));
            let _ = writeln!(
                s,
                "| {} | {:.4} ± {:.4} | {:.1} ± {:.1} | {:.1} | {:.1} | {:.3} | {} |",
                r.value, r.reward_mean, r.reward_std, r.cost_mean, r.cost_std, r.cost1_mean, r.cost2_mean, r.opening_mean, success
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let fmt_err = |e: csv::Error| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(fmt_err)?;
        for r in &self.rows {
            w.serialize(r).map_err(fmt_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Trains one run set per value of `parameter` under
/// `<output_dir>/<parameter>=<value>` and tabulates the final evaluations.
pub fn sweep(cfg: &ExperimentConfig, parameter: &str, values: &[String]) -> Result<SweepTable> {
    let name = canonical(parameter).ok_or_else(|| {
        Error::Config(format!(
            "cannot sweep `{parameter}` (valid: {})",
            SWEEP_PARAMS.join(", ")
        ))
    })?;
    if values.is_empty() {
        return Err(Error::Config(format!("sweep over `{name}` needs at least one value")));
    }
    // reject bad values before any training starts
    let configs = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.set(name, v)?;
            c.output_dir = cfg.output_dir.join(format!("{name}={}", v.trim()));
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (value, c) in values.iter().zip(&configs) {
        let outcomes = run_training(c)?;
        let col = |f: &dyn Fn(&super::metrics::MetricsRecord) -> f64| {
            mean_std(&outcomes.iter().map(|o| f(&o.final_eval)).collect::<Vec<_>>())
        };
        let (reward_mean, reward_std) = col(&|r| r.reward_per_step);
        let (cost_mean, cost_std) = col(&|r| r.cost_per_step());
        let success: Vec<f64> = outcomes.iter().filter_map(|o| o.final_eval.success_rate).collect();
        rows.push(SweepRow {
            value: value.trim().to_string(),
            seeds: outcomes.len(),
            reward_mean,
            reward_std,
            cost1_mean: col(&|r| r.cost1_per_step).0,
            cost2_mean: col(&|r| r.cost2_per_step).0,
            cost_mean,
            cost_std,
            opening_mean: col(&|r| r.opening_rate).0,
            success_mean: (!success.is_empty()).then(|| mean_std(&success).0),
        });
    }
    let table = SweepTable {
        parameter: name.to_string(),
        rows,
    };
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    table.write_csv(cfg.output_dir.join(format!("sweep-{name}.csv")))?;
    Ok(table)
}
