//! The `search` command: chunked runs with on-disk checkpoints.
//!
//! Run directory layout:
//! `run.json` (settings and episodes done), `episodes.jsonl` (one record per
//! episode), `strategy.json` and `model/` (best so far), `agent/` (SAC state).

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use dfprune::bundle::{load_evalset, load_model, save_model};
use dfprune::env::{model_signature, resume_search, EnvConfig, SearchConfig, SearchEnv, Strategy};
use dfprune::nn::{accuracy_with_workers, ModelGraph};
use dfprune::policy::{PolicyRegistry, PolicySpec};
use dfprune::sac::AGENT_FILE;
use serde::{Deserialize, Serialize};

use crate::{model, write_json, SearchArgs};

const RUN_FILE: &str = "run.json";
const EPISODES_FILE: &str = "episodes.jsonl";
const STRATEGY_FILE: &str = "strategy.json";

/// Everything that must match for a resumed run to continue the same search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunSettings {
    model_signature: String,
    policy: String,
    lambda: f64,
    warmup: usize,
    episodes: usize,
    env: EnvConfig,
}

#[derive(Serialize, Deserialize)]
struct RunFile {
    settings: RunSettings,
    episodes_done: usize,
}

pub fn run(args: SearchArgs) -> Result<()> {
    let graph = model(&args.model)?;
    let set = load_evalset(&args.evalset).with_context(|| format!("loading evalset {}", args.evalset.display()))?;
    let registry = PolicyRegistry::with_defaults();
    let env_config = EnvConfig {
        p_r: args.p_r,
        p_min: args.p_min,
        p_max: args.p_max,
        budget_mode: args.budget_mode.into(),
        state: args.state.config(),
        reward_subset: args.reward_subset,
        seed: args.seed,
        workers: args.workers.max(1),
    };
    let settings = RunSettings {
        model_signature: model_signature(&graph),
        policy: args.policy.clone(),
        lambda: args.lambda,
        warmup: args.warmup,
        episodes: args.episodes,
        env: EnvConfig {
            workers: 1,
            ..env_config.clone()
        },
    };
    let env = SearchEnv::new(graph, &set, env_config)?;
    // an unreachable budget fails at the first layer; report it before creating anything
    env.reset()?.ledger.clamp_ratio(args.p_max, 0)?;
    let total = args.warmup + args.episodes;
    if total == 0 {
        bail!("nothing to run: --warmup and --episodes are both 0");
    }

    let out = &args.out;
    let mut spec = PolicySpec::new(args.seed, args.p_r, env.plan().clone());
    spec.lambda = args.lambda;
    let (start, mut best) = if args.resume {
        let (done, best) = load_checkpoint(out, &settings)?;
        if done >= total {
            bail!("run in {} already finished {done} episodes", out.display());
        }
        spec.resume = Some(out.join("agent"));
        (done, best)
    } else {
        if out.join(RUN_FILE).exists() {
            bail!(
                "{} already holds a run; pass --resume or choose another directory",
                out.display()
            );
        }
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        File::create(out.join(EPISODES_FILE))?;
        (0, None)
    };
    let mut policy = registry.create(&args.policy, &spec)?;

    let mut log = BufWriter::new(OpenOptions::new().append(true).open(out.join(EPISODES_FILE))?);
    let mut done = start;
    let mut saved_episode = best.as_ref().map(|(s, _): &(Strategy, ModelGraph)| s.episode);
    let mut baseline = 0.0;
    while done < total {
        let stop = match args.checkpoint_every {
            0 => total,
            n => (done + n).min(total),
        };
        let config = SearchConfig {
            start_episode: done,
            stop_episode: Some(stop),
            ..SearchConfig::new(args.warmup, args.episodes, args.seed)
        };
        let outcome = resume_search(&env, policy.as_mut(), &config, best.take(), |r| {
            serde_json::to_writer(&mut log, r)?;
            log.write_all(b"\n")
                .and_then(|_| log.flush())
                .map_err(|e| dfprune::Error::io(EPISODES_FILE, e))?;
            if args.log_every > 0 && (r.episode + 1) % args.log_every == 0 {
                eprintln!(
                    "episode {}/{total}  reward {:.4}  best {:.4}  params {:.4}",
                    r.episode + 1,
                    r.reward,
                    r.best_reward,
                    r.param_ratio
                );
            }
            Ok(())
        })?;
        baseline = outcome.baseline_accuracy;
        done = stop;
        let mut strategy = outcome.best;
        if saved_episode != Some(strategy.episode) {
            strategy.full_accuracy = Some(accuracy_with_workers(
                &outcome.best_graph,
                &set.images,
                &set.labels,
                args.workers.max(1),
            )?);
            write_json(&out.join(STRATEGY_FILE), &strategy)?;
            save_model(&outcome.best_graph, out.join("model"))?;
            saved_episode = Some(strategy.episode);
        }
        policy.save(&out.join("agent"))?;
        write_json(
            &out.join(RUN_FILE),
            &RunFile {
                settings: settings.clone(),
                episodes_done: done,
            },
        )?;
        best = Some((strategy, outcome.best_graph));
    }

    let (strategy, _) = best.expect("at least one episode ran");
    println!(
        "baseline acc {baseline:.4}  best acc {:.4} (episode {}, full set {:.4})  param ratio {:.4}  budget ratio {:.4}  flops ratio {:.4}",
        strategy.accuracy,
        strategy.episode,
        strategy.full_accuracy.unwrap_or(f64::NAN),
        strategy.param_ratio,
        strategy.budget_ratio,
        strategy.flops_ratio
    );
    Ok(())
}

/// Reads the checkpoint in `out`, checks it belongs to the same search, and
/// trims the episode log to the checkpointed episodes.
fn load_checkpoint(out: &Path, settings: &RunSettings) -> Result<(usize, Option<(Strategy, ModelGraph)>)> {
    let run_path = out.join(RUN_FILE);
    let text = fs::read_to_string(&run_path).with_context(|| format!("reading {}", run_path.display()))?;
    let run: RunFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", run_path.display()))?;
    if &run.settings != settings {
        let saved = serde_json::to_string(&run.settings)?;
        let now = serde_json::to_string(settings)?;
        bail!("settings differ from the checkpointed run\n  saved: {saved}\n  now:   {now}");
    }
    if !out.join("agent").join(AGENT_FILE).exists() {
        bail!(
            "no agent checkpoint in {}; only `sac` runs can be resumed",
            out.join("agent").display()
        );
    }
    let text = fs::read_to_string(out.join(STRATEGY_FILE)).context("reading checkpointed strategy")?;
    let strategy: Strategy = serde_json::from_str(&text).context("parsing checkpointed strategy")?;
    let graph = load_model(out.join("model")).context("loading checkpointed model")?;

    let path = out.join(EPISODES_FILE);
    let lines: Vec<String> = BufReader::new(File::open(&path).with_context(|| format!("opening {}", path.display()))?)
        .lines()
        .take(run.episodes_done)
        .collect::<Result<_, _>>()?;
    if lines.len() < run.episodes_done {
        bail!(
            "{} holds {} of {} episodes",
            path.display(),
            lines.len(),
            run.episodes_done
        );
    }
    let mut file = File::create(&path)?;
    for line in lines {
        writeln!(file, "{line}")?;
    }
    Ok((run.episodes_done, Some((strategy, graph))))
}
