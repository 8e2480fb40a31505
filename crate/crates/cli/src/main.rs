use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;

use twohop_core::commgraph::{build_topology_masked, cost_round1, cost_round2, Point};
use twohop_core::envs::EnvKind;
use twohop_core::harness::{
    emit_plotdata, find_metrics, run_eval, run_training, sweep, Behaviour, ExperimentConfig,
};
use twohop_core::protocol::ProtocolMode;

/// Output root; relative output directories are resolved against it.
const OUTPUT_ROOT_VAR: &str = "TWOHOP_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "twohop", version, about = "Gated two-hop communication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every configured seed and write metrics and checkpoints.
    Train(ConfigArgs),
    /// Evaluate a checkpoint (or a random policy) over every seed.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory, or a training output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation episodes per seed (defaults to `eval_episodes`).
        #[arg(long)]
        episodes: Option<usize>,
        /// Uniform random actions instead of the greedy policy.
        #[arg(long)]
        random: bool,
    },
    /// Train one run set per value of T, L or mode.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Parameter to vary: T, L or mode.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Convert metrics files into long-format CSV plus a mean/std summary.
    Plotdata {
        /// Metrics files or directories searched for `metrics.jsonl`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory for `long.csv` and `summary.csv`.
        #[arg(long, default_value = "plotdata")]
        out: PathBuf,
    },
    /// Print the neighbour sets and per-step bit costs of a layout.
    InspectTopology {
        /// Positions as `x,y;x,y;...`.
        #[arg(long, conflicts_with = "positions_file")]
        positions: Option<String>,
        /// File with one `x y` (or `x,y`) pair per line.
        #[arg(long)]
        positions_file: Option<PathBuf>,
        #[arg(long, short = 'L', default_value_t = 1.0)]
        range: f64,
        /// Open gates as 0/1 per agent (default: all open).
        #[arg(long, value_delimiter = ',')]
        gates: Vec<u8>,
        #[arg(long, default_value = "ac2c")]
        mode: String,
        /// Bits per message.
        #[arg(long, default_value_t = 4096)]
        message_bits: u64,
    },
}

/// Config file plus per-field overrides. Flags win over the file.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML config; omitted keys keep their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Start from published-scale settings instead of desk scale.
    #[arg(long, conflicts_with = "config")]
    table_scale: bool,
    /// cooperative_navigation, predator_prey or traffic_junction.
    #[arg(long)]
    env: Option<String>,
    /// Junction difficulty: medium or hard.
    #[arg(long)]
    difficulty: Option<String>,
    #[arg(long)]
    n_agents: Option<usize>,
    #[arg(long)]
    n_landmarks: Option<usize>,
    #[arg(long)]
    episode_length: Option<usize>,
    /// ac2c, ac2c_no_controller, gnn_two_round or one_round.
    #[arg(long)]
    mode: Option<String>,
    /// Communication range L.
    #[arg(long, short = 'L')]
    range: Option<f64>,
    /// Gate threshold T.
    #[arg(long, short = 'T')]
    threshold: Option<f64>,
    #[arg(long)]
    message_bits: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    /// auto, ddpg or reinforce.
    #[arg(long)]
    trainer: Option<String>,
    #[arg(long)]
    train_episodes: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    update_every: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Write per-step traces of a few evaluation episodes.
    #[arg(long)]
    trace: bool,
    /// Any other field as `name=value`; may repeat.
    #[arg(long = "set", value_name = "NAME=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let env_kind: Option<EnvKind> = self.env.as_deref().map(str::parse).transpose()?;
        let mut cfg = match (&self.config, self.table_scale) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, true) => ExperimentConfig::table_scale(env_kind.unwrap_or(EnvKind::CooperativeNavigation)),
            (None, false) => ExperimentConfig::desk_scale(env_kind.unwrap_or(EnvKind::CooperativeNavigation)),
        };
        if self.config.is_some() {
            if let Some(env) = &self.env {
                cfg.set("env", env)?;
            }
        }
        let fields: [(&str, Option<String>); 18] = [
            ("difficulty", self.difficulty.clone()),
            ("n_agents", self.n_agents.map(|v| v.to_string())),
            ("n_landmarks", self.n_landmarks.map(|v| v.to_string())),
            ("episode_length", self.episode_length.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("range", self.range.map(|v| v.to_string())),
            ("threshold", self.threshold.map(|v| v.to_string())),
            ("message_bits", self.message_bits.map(|v| v.to_string())),
            ("hidden", self.hidden.map(|v| v.to_string())),
            ("trainer", self.trainer.clone()),
            ("train_episodes", self.train_episodes.map(|v| v.to_string())),
            ("eval_episodes", self.eval_episodes.map(|v| v.to_string())),
            ("eval_interval", self.eval_interval.map(|v| v.to_string())),
            ("checkpoint_interval", self.checkpoint_interval.map(|v| v.to_string())),
            ("seeds", self.seeds.clone()),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("update_every", self.update_every.map(|v| v.to_string())),
            ("output_dir", self.output_dir.as_ref().map(|p| p.display().to_string())),
        ];
        for (name, value) in fields {
            if let Some(v) = value {
                cfg.set(name, &v)?;
            }
        }
        for kv in &self.sets {
            let Some((name, value)) = kv.split_once('=') else {
                bail!(twohop_core::Error::Config(format!("expected NAME=VALUE, got `{kv}`")));
            };
            cfg.set(name.trim(), value)?;
        }
        if self.trace {
            cfg.trace = true;
        }
        if let Ok(root) = std::env::var(OUTPUT_ROOT_VAR) {
            if cfg.output_dir.is_relative() && !root.is_empty() {
                cfg.output_dir = Path::new(&root).join(&cfg.output_dir);
            }
        }
        for w in cfg.validate()? {
            warn!("{w}");
        }
        Ok(cfg)
    }
}

fn parse_positions(text: &str) -> Result<Vec<Point>> {
    text.split([';', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty() && !s.starts_with('#'))
        .map(|pair| {
            let nums: Vec<f64> = pair
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| twohop_core::Error::Config(format!("bad coordinate `{s}`"))))
                .collect::<Result<_, _>>()?;
            match nums[..] {
                [x, y] => Ok([x, y]),
                _ => bail!(twohop_core::Error::Config(format!("expected `x,y`, got `{pair}`"))),
            }
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let outcomes = run_training(&cfg)?;
            for o in &outcomes {
                let r = &o.final_eval;
                println!(
                    "seed {}: reward/step {:.4}  bits/step {:.1}  opening {:.3}{}  -> {}",
                    o.seed,
                    r.reward_per_step,
                    r.cost_per_step(),
                    r.opening_rate,
                    r.success_rate.map_or(String::new(), |s| format!("  success {s:.3}")),
                    o.dir.display()
                );
            }
        }
        Command::Eval {
            config,
            checkpoint,
            episodes,
            random,
        } => {
            let cfg = config.resolve()?;
            let behaviour = if random { Behaviour::Random } else { Behaviour::Greedy };
            let report = run_eval(&cfg, checkpoint.as_deref(), episodes.unwrap_or(cfg.eval_episodes), behaviour)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Sweep { config, param, values } => {
            let cfg = config.resolve()?;
            let table = sweep(&cfg, &param, &values)?;
            print!("{}", table.to_markdown());
        }
        Command::Plotdata { inputs, out } => {
            let mut files = Vec::new();
            for input in &inputs {
                files.extend(find_metrics(input)?);
            }
            let data = emit_plotdata(&files)?;
            let (long, summary) = data.write(&out)?;
            println!("{} rows -> {}", data.long.len(), long.display());
            println!("{} rows -> {}", data.summary.len(), summary.display());
        }
        Command::InspectTopology {
            positions,
            positions_file,
            range,
            gates,
            mode,
            message_bits,
        } => {
            let text = match (positions, positions_file) {
                (Some(p), _) => p,
                (None, Some(f)) => std::fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?,
                (None, None) => bail!(twohop_core::Error::Config("give --positions or --positions-file".into())),
            };
            let pts = parse_positions(&text)?;
            let mode: ProtocolMode = mode.parse()?;
            let gates: Vec<bool> = if gates.is_empty() {
                vec![true; pts.len()]
            } else if gates.len() == pts.len() {
                gates.iter().map(|&g| g != 0).collect()
            } else {
                bail!(twohop_core::Error::Config(format!(
                    "{} gates for {} agents",
                    gates.len(),
                    pts.len()
                )));
            };
            let topo = build_topology_masked(&pts, &vec![true; pts.len()], range)?;
            print!("{}", topo.dump());
            println!("round1_bits: {}", cost_round1(&topo, message_bits));
            println!("round2_bits: {}", cost_round2(&topo, &gates, mode, message_bits));
        }
    }
    Ok(())
}

/// `error: kind=<kind> message="<text>"` on one line.
fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<twohop_core::Error>())
        .map_or("other", |e| e.kind());
    let message: Vec<String> = err.chain().map(ToString::to_string).collect();
    let message = message.join(": ").replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    format!("error: kind={kind} message=\"{message}\"")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage message=\"{}\"", first.replace('"', "\\\""));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
