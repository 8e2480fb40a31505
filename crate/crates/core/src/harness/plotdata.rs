//! Long-format plot data from metrics files, with per-episode mean and
//! standard deviation across seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::metrics::{read_metrics, MetricsRecord, Phase};
use super::run::mean_std;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub run: String,
    pub seed: u64,
    pub episode: usize,
    pub metric: String,
    pub value: f64,
}

/// Mean ± sample standard deviation across seeds; `lower`/`upper` are
/// the shaded band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub episode: usize,
    pub metric: String,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotData {
    pub long: Vec<LongRow>,
    pub summary: Vec<SummaryRow>,
}

fn metrics_of(r: &MetricsRecord) -> Vec<(String, f64)> {
    let prefix = match r.phase {
        Phase::Train => "train",
        Phase::Eval => "eval",
    };
    let mut m = vec![
        ("reward_per_step", r.reward_per_step),
        ("episode_return", r.episode_return),
        ("cost1_per_step", r.cost1_per_step),
        ("cost2_per_step", r.cost2_per_step),
        ("cost_per_step", r.cost_per_step()),
        ("opening_rate", r.opening_rate),
    ];
    if let Some(s) = r.success_rate {
        m.push(("success_rate", s));
    }
    m.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)).collect()
}

/// Reads metrics files and builds the long table plus the summary.
///
/// Records are ordered by run, metric, episode and seed, so the output
/// does not depend on the order the files are given in.
pub fn emit_plotdata(files: &[PathBuf]) -> Result<PlotData> {
    if files.is_empty() {
        return Err(Error::Config("plot data needs at least one metrics file".into()));
    }
    // (run, metric, episode, seed) -> value
    let mut cells: BTreeMap<(String, String, usize, u64), f64> = BTreeMap::new();
    // junction runs report a success rate, particle runs do not
    let mut has_success: BTreeMap<String, (bool, PathBuf)> = BTreeMap::new();
    for file in files {
        let records = read_metrics(file)?;
        for r in &records {
            let flag = r.success_rate.is_some();
            match has_success.get(&r.run) {
                Some((f, first)) if *f != flag => {
                    return Err(Error::Format {
                        path: file.display().to_string(),
                        message: format!(
                            "run `{}` mixes records with and without success rate (first seen in {})",
                            r.run,
                            first.display()
                        ),
                    })
                }
                Some(_) => {}
                None => {
                    has_success.insert(r.run.clone(), (flag, file.clone()));
                }
            }
            for (metric, value) in metrics_of(r) {
                if cells.insert((r.run.clone(), metric.clone(), r.episode, r.seed), value).is_some() {
                    return Err(Error::Format {
                        path: file.display().to_string(),
                        message: format!("duplicate {metric} for run `{}` seed {} episode {}", r.run, r.seed, r.episode),
                    });
                }
            }
        }
    }

    let mut out = PlotData::default();
    let mut group: Vec<f64> = Vec::new();
    let mut key: Option<(String, String, usize)> = None;
    let flush = |key: &Option<(String, String, usize)>, group: &mut Vec<f64>, out: &mut PlotData| {
        if let Some((run, metric, episode)) = key {
            let (mean, std) = mean_std(group);
            out.summary.push(SummaryRow {
                run: run.clone(),
                episode: *episode,
                metric: metric.clone(),
                seeds: group.len(),
                mean,
                std,
                lower: mean - std,
                upper: mean + std,
            });
        }
        group.clear();
    };
    for ((run, metric, episode, seed), value) in cells {
        let k = (run.clone(), metric.clone(), episode);
        if key.as_ref() != Some(&k) {
            flush(&key, &mut group, &mut out);
            key = Some(k);
        }
        group.push(value);
        out.long.push(LongRow {
            run,
            seed,
            episode,
            metric,
            value,
        });
    }
    flush(&key, &mut group, &mut out);
    Ok(out)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fmt_err = |e: csv::Error| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(fmt_err)?;
    for r in rows {
        w.serialize(r).map_err(fmt_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl PlotData {
    /// Writes `long.csv` and `summary.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let long = dir.join("long.csv");
        let summary = dir.join("summary.csv");
        write_rows(&long, &self.long)?;
        write_rows(&summary, &self.summary)?;
        Ok((long, summary))
    }
}

/// Metrics files under `root`: `root` itself if it is a file, otherwise
/// every `metrics.jsonl` below it, sorted.
pub fn find_metrics(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "metrics.jsonl") {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}
