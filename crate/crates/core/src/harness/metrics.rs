//! Metrics records, their JSON-lines persistence and the run manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::commgraph::CostLedger;
use crate::error::{Error, Result};

use super::config::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// One exploratory training episode.
    Train,
    /// Aggregate over noise-free evaluation episodes.
    Eval,
}

/// Statistics of one finished episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStats {
    pub steps: usize,
    pub n_agents: usize,
    /// Undiscounted sum of team rewards.
    pub total_reward: f64,
    pub ledger: CostLedger,
    /// Sum over steps of the fraction of active agents with an open gate.
    pub opening_sum: f64,
    /// Steps with at least one active agent.
    pub opening_steps: usize,
    pub collisions: Vec<usize>,
    /// Junction only.
    pub success: Option<bool>,
}

impl EpisodeStats {
    pub fn reward_per_step(&self) -> f64 {
        self.total_reward / (self.steps * self.n_agents) as f64
    }

    pub fn opening_rate(&self) -> f64 {
        if self.opening_steps == 0 {
            0.0
        } else {
            self.opening_sum / self.opening_steps as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub run: String,
    pub seed: u64,
    pub phase: Phase,
    /// Training episodes completed when the record was taken.
    pub episode: usize,
    /// Episodes aggregated in this record.
    pub episodes: usize,
    /// Mean team reward per timestep per agent.
    pub reward_per_step: f64,
    /// Mean undiscounted episode return.
    pub episode_return: f64,
    /// Exact first-round bits over all aggregated episodes.
    pub round1_bits: u64,
    pub round2_bits: u64,
    pub steps: u64,
    /// `round1_bits / steps`.
    pub cost1_per_step: f64,
    pub cost2_per_step: f64,
    pub opening_rate: f64,
    /// Fraction of collision-free episodes (junction only).
    pub success_rate: Option<f64>,
}

impl MetricsRecord {
    pub fn aggregate(run: &str, seed: u64, phase: Phase, episode: usize, stats: &[EpisodeStats]) -> Self {
        let n = stats.len().max(1) as f64;
        let round1_bits = stats.iter().map(|s| s.ledger.round1_bits()).sum::<u64>();
        let round2_bits = stats.iter().map(|s| s.ledger.round2_bits()).sum::<u64>();
        let steps = stats.iter().map(|s| s.steps as u64).sum::<u64>();
        let per_step = |bits: u64| if steps == 0 { 0.0 } else { bits as f64 / steps as f64 };
        let success: Vec<bool> = stats.iter().filter_map(|s| s.success).collect();
        Self {
            run: run.to_string(),
            seed,
            phase,
            episode,
            episodes: stats.len(),
            reward_per_step: stats.iter().map(EpisodeStats::reward_per_step).sum::<f64>() / n,
            episode_return: stats.iter().map(|s| s.total_reward).sum::<f64>() / n,
            round1_bits,
            round2_bits,
            steps,
            cost1_per_step: per_step(round1_bits),
            cost2_per_step: per_step(round2_bits),
            opening_rate: stats.iter().map(EpisodeStats::opening_rate).sum::<f64>() / n,
            success_rate: (!success.is_empty())
                .then(|| success.iter().filter(|&&s| s).count() as f64 / success.len() as f64),
        }
    }

    pub fn cost_per_step(&self) -> f64 {
        self.cost1_per_step + self.cost2_per_step
    }
}

/// Append-only JSON-lines writer, one record per line.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { out: BufWriter::new(file), path })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Format {
            path: self.path.display().to_string(),
            message: e.to_string(),
        })?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub trainer: String,
    pub crate_version: String,
}

impl RunManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            path: path.as_ref().display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path.as_ref(), text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}
