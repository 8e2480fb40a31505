//! Rollouts, training loops and evaluation.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::commgraph::{build_topology_masked, CostLedger};
use crate::envs::{self, Action, Env, EnvKind, EpisodeOutcome, TraceRecord, TraceWriter};
use crate::error::{Error, Result};
use crate::learning::{
    actor_update_ddpg, controller_update, critic_update, reinforce_update, Baseline, Batch, Episode, EpisodeStep,
    Networks, ReplayBuffer, Transition,
};
use crate::neural::ActionKind;
use crate::protocol::{Protocol, ProtocolMode};

use super::config::{ExperimentConfig, Trainer};
use super::metrics::{EpisodeStats, MetricsRecord, MetricsWriter, Phase, RunManifest};

/// How actions are chosen from the policy output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Behaviour {
    /// Bounded output as is (continuous) or the arg-max logit (discrete).
    Greedy,
    /// Gaussian noise on continuous outputs, clipped to `[-1, 1]`;
    /// softmax sampling for discrete ones.
    Explore { sigma: f64 },
    /// Uniform random actions; the protocol still runs so overhead is
    /// measured.
    Random,
}

/// Everything recorded about one episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutput {
    pub stats: EpisodeStats,
    pub transitions: Vec<Transition>,
    pub steps: Vec<EpisodeStep>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Environment seed of training episode `episode` of run seed `seed`.
pub fn train_env_seed(seed: u64, episode: usize) -> u64 {
    splitmix(splitmix(seed) ^ episode as u64)
}

/// Environment seed of evaluation episode `k`; the same set is used at
/// every evaluation point of a run.
pub fn eval_env_seed(seed: u64, k: usize) -> u64 {
    splitmix(splitmix(seed ^ 0x005E_ED0F_E7A1) ^ k as u64)
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax(logits: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut p = logits.to_vec();
    crate::diffmath::softmax_in_place(&mut p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Runs one episode. Transitions and per-step records are kept when
/// `record` is set; `trace` receives one record per step.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    env: &mut Env,
    nets: &Networks,
    cfg: &ExperimentConfig,
    env_seed: u64,
    behaviour: Behaviour,
    rng: &mut ChaCha8Rng,
    record: bool,
    mut trace: Option<(&mut TraceWriter, usize)>,
) -> Result<EpisodeOutput> {
    let dims = &nets.dims;
    let n = env.n_agents();
    let proto = Protocol {
        dims,
        actor: &nets.actor,
        controller: &nets.controller,
        mode: cfg.mode,
        threshold: cfg.threshold,
        message_bits: cfg.message_bits,
    };
    let noise = match behaviour {
        Behaviour::Explore { sigma } if sigma > 0.0 => {
            Some(Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("bad noise scale: {e}")))?)
        }
        _ => None,
    };

    let mut obs = env.reset(env_seed);
    let mut hist = vec![vec![0.0; dims.hidden]; n];
    let mut occupants = env.occupants();
    let mut ledger = CostLedger::new(cfg.message_bits);
    let (mut total, mut opening_sum, mut opening_steps) = (0.0, 0.0, 0);
    let mut collisions = Vec::new();
    let mut transitions = Vec::new();
    let mut steps = Vec::new();

    for t in 0..env.episode_length() {
        let positions = env.positions();
        let active = env.active();
        let topo = build_topology_masked(&positions, &active, cfg.range)?;
        let out = proto.step(&topo, &obs, &hist)?;

        let mut env_actions = Vec::with_capacity(n);
        let mut stored = Vec::with_capacity(n);
        let mut indices = Vec::with_capacity(n);
        for (i, raw) in out.actions.iter().enumerate() {
            match dims.action {
                ActionKind::Continuous => {
                    let a: Vec<f64> = match behaviour {
                        Behaviour::Random => raw.iter().map(|_| rng.gen_range(-1.0..=1.0)).collect(),
                        _ => raw
                            .iter()
                            .map(|&x| match &noise {
                                Some(d) => (x + d.sample(rng)).clamp(-1.0, 1.0),
                                None => x,
                            })
                            .collect(),
                    };
                    env_actions.push(Action::Continuous(a.clone()));
                    stored.push(a);
                    indices.push(0);
                }
                ActionKind::Discrete => {
                    let k = if !active[i] {
                        0
                    } else {
                        match behaviour {
                            Behaviour::Greedy => argmax(raw),
                            Behaviour::Explore { .. } => sample_softmax(raw, rng),
                            Behaviour::Random => rng.gen_range(0..raw.len()),
                        }
                    };
                    let mut one_hot = vec![0.0; raw.len()];
                    one_hot[k] = 1.0;
                    env_actions.push(Action::Discrete(k));
                    stored.push(one_hot);
                    indices.push(k);
                }
            }
        }

        let res = env.step(&env_actions)?;
        total += res.reward;
        collisions.push(res.collisions);
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active > 0 {
            let open = (0..n).filter(|&i| active[i] && out.state.gates[i]).count();
            opening_sum += open as f64 / n_active as f64;
            opening_steps += 1;
        }
        let gates = out.state.gates.clone();
        ledger.push(out.ledger);

        let next_occupants = env.occupants();
        let mut next_hist = out.next_histories;
        for i in 0..n {
            if next_occupants[i].is_none() || next_occupants[i] != occupants[i] {
                next_hist[i].iter_mut().for_each(|v| *v = 0.0);
            }
        }

        if let Some((writer, episode)) = trace.as_mut() {
            writer.write(&TraceRecord {
                episode: *episode,
                t,
                positions: positions.clone(),
                active: active.clone(),
                actions: match dims.action {
                    ActionKind::Continuous => stored.clone(),
                    ActionKind::Discrete => indices.iter().map(|&k| vec![k as f64]).collect(),
                },
                reward: res.reward,
                collisions: res.collisions,
                gates,
            })?;
        }

        if record {
            steps.push(EpisodeStep {
                obs: obs.clone(),
                hist: hist.clone(),
                actions: indices,
                reward: res.reward,
                positions: positions.clone(),
                active: active.clone(),
            });
            transitions.push(Transition {
                obs: obs.clone(),
                hist: hist.clone(),
                actions: stored,
                reward: res.reward,
                next_obs: res.obs.clone(),
                next_hist: next_hist.clone(),
                done: res.done,
                positions,
                active,
                next_positions: env.positions(),
                next_active: env.active(),
            });
        }

        obs = res.obs;
        hist = next_hist;
        occupants = next_occupants;
        if res.done {
            break;
        }
    }

    let success = match env.kind() {
        EnvKind::TrafficJunction => Some(envs::success(&EpisodeOutcome {
            kind: EnvKind::TrafficJunction,
            collisions: collisions.clone(),
        })?),
        _ => None,
    };
    Ok(EpisodeOutput {
        stats: EpisodeStats {
            steps: ledger.steps(),
            n_agents: n,
            total_reward: total,
            ledger,
            opening_sum,
            opening_steps,
            collisions,
            success,
        },
        transitions,
        steps,
    })
}

/// Runs `episodes` evaluation episodes of run seed `seed`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    nets: &Networks,
    behaviour: Behaviour,
    episodes: usize,
    seed: u64,
    mut trace: Option<&mut TraceWriter>,
) -> Result<Vec<EpisodeStats>> {
    let mut env = Env::new(&cfg.env)?;
    let mut rng = rng_stream(seed, 3);
    (0..episodes)
        .map(|k| {
            let tr = trace.as_deref_mut().map(|w| (w, k));
            run_episode(&mut env, nets, cfg, eval_env_seed(seed, k), behaviour, &mut rng, false, tr).map(|o| o.stats)
        })
        .collect()
}

/// Name of a run: the last component of its output directory.
pub fn run_name(cfg: &ExperimentConfig) -> String {
    cfg.output_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string())
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed-{seed}"))
}

/// Result of training one seed.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub final_eval: MetricsRecord,
    pub nets: Networks,
}

fn update_cycle(
    nets: &mut Networks,
    cfg: &ExperimentConfig,
    replay: &ReplayBuffer,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let sample = replay.sample(cfg.hyper.batch_size, rng)?;
    let batch = Batch::new(&sample, cfg.range)?;
    let setting = cfg.setting();
    critic_update(nets, &batch, &setting, &cfg.hyper)?;
    actor_update_ddpg(nets, &batch, &setting, &cfg.hyper)?;
    if cfg.mode == ProtocolMode::Ac2c {
        controller_update(nets, &batch, cfg.threshold, &cfg.hyper)?;
    }
    nets.targets.update(&nets.actor, &nets.critic, cfg.hyper.tau, cfg.hyper.hard_update_period)
}

/// Trains one seed, writing `metrics.jsonl`, `manifest.json` and
/// checkpoints under the seed's directory.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    let trainer = cfg.resolved_trainer()?;
    let dir = seed_dir(cfg, seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let run = run_name(cfg);
    RunManifest {
        run: run.clone(),
        seed,
        config: cfg.clone(),
        trainer: format!("{trainer:?}").to_lowercase(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
    }
    .save(dir.join("manifest.json"))?;
    let mut metrics = MetricsWriter::create(dir.join("metrics.jsonl"))?;

    let mut nets = Networks::new(cfg.net_dims(), &mut rng_stream(seed, 0))?;
    let mut env = Env::new(&cfg.env)?;
    let mut policy_rng = rng_stream(seed, 1);
    let mut replay_rng = rng_stream(seed, 2);
    let setting = cfg.setting();
    let mut replay = ReplayBuffer::new(cfg.hyper.replay_capacity);
    let mut pending: Vec<EpisodeOutput> = Vec::new();
    let mut last_eval = None;

    for ep in 0..cfg.train_episodes {
        let env_seed = train_env_seed(seed, ep);
        let behaviour = Behaviour::Explore {
            sigma: (cfg.hyper.noise_sigma * cfg.hyper.noise_decay.powi(ep as i32)).max(cfg.hyper.noise_min),
        };
        let out = run_episode(&mut env, &nets, cfg, env_seed, behaviour, &mut policy_rng, true, None)?;
        metrics.write(&MetricsRecord::aggregate(&run, seed, Phase::Train, ep + 1, std::slice::from_ref(&out.stats)))?;

        match trainer {
            Trainer::Reinforce => {
                pending.push(out);
                if pending.len() == cfg.hyper.episodes_per_update {
                    let episodes: Vec<Episode> = pending.iter().map(|o| Episode { steps: o.steps.clone() }).collect();
                    reinforce_update(&mut nets, &episodes, &setting, &cfg.hyper, Baseline::BatchMean)?;
                    if cfg.mode == ProtocolMode::Ac2c {
                        // the controller learns from the transitions of the
                        // episodes just used
                        let mut recent = ReplayBuffer::new(pending.iter().map(|o| o.transitions.len()).sum::<usize>().max(1));
                        for t in pending.drain(..).flat_map(|o| o.transitions) {
                            recent.push(t)?;
                        }
                        if recent.len() >= cfg.hyper.batch_size {
                            let sample = recent.sample(cfg.hyper.batch_size, &mut replay_rng)?;
                            let batch = Batch::new(&sample, cfg.range)?;
                            controller_update(&mut nets, &batch, cfg.threshold, &cfg.hyper)?;
                        }
                    }
                    pending.clear();
                }
            }
            _ => {
                let steps = out.stats.steps;
                for t in out.transitions {
                    replay.push(t)?;
                }
                if replay.len() >= cfg.hyper.batch_size {
                    for _ in 0..steps / cfg.hyper.update_every {
                        update_cycle(&mut nets, cfg, &replay, &mut replay_rng)?;
                    }
                }
            }
        }

        let done = ep + 1 == cfg.train_episodes;
        if (cfg.eval_interval > 0 && (ep + 1) % cfg.eval_interval == 0) || done {
            let stats = evaluate(cfg, &nets, Behaviour::Greedy, cfg.eval_episodes, seed, None)?;
            let rec = MetricsRecord::aggregate(&run, seed, Phase::Eval, ep + 1, &stats);
            info!(
                "{run} seed {seed} episode {}: reward/step {:.4}, bits/step {:.1}, opening {:.3}",
                ep + 1,
                rec.reward_per_step,
                rec.cost_per_step(),
                rec.opening_rate
            );
            metrics.write(&rec)?;
            last_eval = Some(rec);
        }
        if cfg.checkpoint_interval > 0 && (ep + 1) % cfg.checkpoint_interval == 0 {
            nets.save(dir.join(format!("checkpoint-{}", ep + 1)))?;
        }
    }

    let final_eval = match last_eval {
        Some(r) => r,
        None => {
            let stats = evaluate(cfg, &nets, Behaviour::Greedy, cfg.eval_episodes, seed, None)?;
            let rec = MetricsRecord::aggregate(&run, seed, Phase::Eval, 0, &stats);
            metrics.write(&rec)?;
            rec
        }
    };
    nets.save(dir.join("checkpoint"))?;
    if cfg.trace {
        let mut w = TraceWriter::create(dir.join("eval_trace.jsonl"))?;
        evaluate(cfg, &nets, Behaviour::Greedy, cfg.eval_episodes.min(5), seed, Some(&mut w))?;
        w.finish()?;
    }
    Ok(TrainOutcome { seed, dir, final_eval, nets })
}

/// Trains every configured seed in turn.
pub fn run_training(cfg: &ExperimentConfig) -> Result<Vec<TrainOutcome>> {
    for w in cfg.validate()? {
        warn!("{w}");
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    cfg.save(cfg.output_dir.join("config.toml"))?;
    cfg.seeds.iter().map(|&s| train_seed(cfg, s)).collect()
}

/// Headline numbers of an evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub reward_per_step: f64,
    pub cost1_per_step: f64,
    pub cost2_per_step: f64,
    pub cost_per_step: f64,
    pub opening_rate: f64,
    pub success_rate: Option<f64>,
}

impl Summary {
    fn of(r: &MetricsRecord) -> Self {
        Self {
            reward_per_step: r.reward_per_step,
            cost1_per_step: r.cost1_per_step,
            cost2_per_step: r.cost2_per_step,
            cost_per_step: r.cost_per_step(),
            opening_rate: r.opening_rate,
            success_rate: r.success_rate,
        }
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-seed evaluation plus mean ± std across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_seed: Vec<MetricsRecord>,
    pub mean: Summary,
    pub std: Summary,
}

impl EvalReport {
    pub fn from_records(per_seed: Vec<MetricsRecord>) -> Self {
        let rows: Vec<Summary> = per_seed.iter().map(Summary::of).collect();
        let col = |f: &dyn Fn(&Summary) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
        let (r, rs) = col(&|s| s.reward_per_step);
        let (c1, c1s) = col(&|s| s.cost1_per_step);
        let (c2, c2s) = col(&|s| s.cost2_per_step);
        let (c, cs) = col(&|s| s.cost_per_step);
        let (o, os) = col(&|s| s.opening_rate);
        let succ: Vec<f64> = rows.iter().filter_map(|s| s.success_rate).collect();
        let (sm, ss) = mean_std(&succ);
        let has = !succ.is_empty();
        Self {
            per_seed,
            mean: Summary {
                reward_per_step: r,
                cost1_per_step: c1,
                cost2_per_step: c2,
                cost_per_step: c,
                opening_rate: o,
                success_rate: has.then_some(sm),
            },
            std: Summary {
                reward_per_step: rs,
                cost1_per_step: c1s,
                cost2_per_step: c2s,
                cost_per_step: cs,
                opening_rate: os,
                success_rate: has.then_some(ss),
            },
        }
    }
}

/// Evaluates a checkpoint on every configured seed.
///
/// `checkpoint` may be a checkpoint directory or a training output
/// directory holding `seed-<s>/checkpoint`; without one, freshly
/// initialized networks are used.
pub fn run_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    episodes: usize,
    behaviour: Behaviour,
) -> Result<EvalReport> {
    cfg.validate()?;
    let run = run_name(cfg);
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let nets = match checkpoint {
            Some(path) => {
                let per = path.join(format!("seed-{seed}")).join("checkpoint");
                let dir = if per.is_dir() { per } else { path.to_path_buf() };
                Networks::load(&dir, cfg.net_dims())?
            }
            None => Networks::new(cfg.net_dims(), &mut rng_stream(seed, 0))?,
        };
        let stats = evaluate(cfg, &nets, behaviour, episodes, seed, None)?;
        per_seed.push(MetricsRecord::aggregate(&run, seed, Phase::Eval, 0, &stats));
    }
    Ok(EvalReport::from_records(per_seed))
}
