use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sgf_core::demos::{augment, DemoStore};
use sgf_core::envs::{EnvKind, EnvSpec, EnvState};
use sgf_core::harness::{
    centroid, eval_checkpoint, farthest_agent, gen_experts, load_expert_demos, load_run_checkpoint,
    plot_metrics, probe_state, resolve, reward_map, train, verify_record, verify_theory,
    write_reward_map, ExperimentConfig, ExpertStats, TheoryConfig, OUTPUT_ROOT_VAR,
};
use sgf_core::{dihedral_elements, Error};

#[derive(Parser)]
#[command(
    name = "sgf",
    version,
    about = "Symmetry-guided multi-agent adversarial imitation"
)]
struct Cli {
    /// Directory that relative paths resolve against.
    #[arg(long, global = true, env = OUTPUT_ROOT_VAR, default_value = ".")]
    root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll out the scripted expert and write a demonstration file.
    GenExperts {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, default_value_t = 100)]
        demos: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the dihedral orbit of a demonstration file.
    Augment {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, default_value_t = 4)]
        order: u32,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every seed of an experiment config.
    Train {
        config: PathBuf,
        /// `key=value` overrides applied after the file.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the true reward and append a summary row.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        stochastic: bool,
        #[arg(long, default_value = "eval_summary.csv")]
        out: PathBuf,
    },
    /// Check the feasible-reward lemma and the augmentation bound on random games.
    VerifyTheory {
        config: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long, default_value = "theory_report.txt")]
        out: PathBuf,
    },
    /// Learned reward over a grid of one agent's accelerations.
    RewardMap {
        checkpoint: PathBuf,
        /// Reset seed of the probed state (velocities are zeroed).
        #[arg(long, default_value_t = 0)]
        state_seed: u64,
        /// Probe the state of this expert demonstration tuple instead.
        #[arg(long, conflicts_with = "state_seed")]
        demo_state: Option<usize>,
        /// Defaults to the agent farthest from the centroid.
        #[arg(long)]
        agent: Option<usize>,
        #[arg(long, default_value_t = 21)]
        grid: usize,
        /// Output stem; `.csv` and `.svg` are appended.
        #[arg(long, default_value = "reward_map")]
        out: PathBuf,
    },
    /// SVG line plot of a metric for one or more run directories.
    Plot {
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "true_reward")]
        metric: String,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Recompute a run's summary from its metric rows.
    VerifyRecord { run: PathBuf },
}

#[derive(clap::Args)]
struct EnvArgs {
    #[arg(long)]
    env: EnvKind,
    #[arg(long, default_value_t = 5)]
    agents: usize,
    #[arg(long, default_value_t = 200)]
    max_steps: usize,
}

impl EnvArgs {
    fn spec(&self) -> Result<EnvSpec> {
        let spec = EnvSpec {
            max_steps: self.max_steps,
            ..EnvSpec::new(self.env, self.agents)
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Distinguishes failed checks from broken invocations.
#[derive(Debug)]
struct GateFailure(String);

impl std::fmt::Display for GateFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for GateFailure {}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn theory_config(root: &Path, file: Option<&Path>, overrides: &[String]) -> Result<TheoryConfig> {
    let mut table: toml::Table = match file {
        Some(f) => {
            let path = resolve(root, f);
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            text.parse().map_err(|e| Error::Config(format!("{e}")))?
        }
        None => toml::Table::new(),
    };
    for kv in overrides {
        let snippet: toml::Table = kv
            .parse()
            .map_err(|e| Error::Config(format!("override `{kv}`: {e}")))?;
        table.extend(snippet);
    }
    let text = toml::to_string(&table).map_err(|e| Error::Config(format!("{e}")))?;
    Ok(toml::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?)
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.root;
    match cli.cmd {
        Cmd::GenExperts {
            env,
            demos,
            seed,
            out,
        } => {
            let spec = env.spec()?;
            let (store, stats) = gen_experts(&spec, demos, seed)?;
            let path = resolve(&root, &out);
            create_parent(&path)?;
            store.save(&path)?;
            stats.save(&ExpertStats::sidecar_path(&path))?;
            println!(
                "{}: {} tuples from {} episodes, return {:.4} ± {:.4}, final order {:.4}",
                path.display(),
                store.len(),
                stats.episodes,
                stats.mean_return,
                stats.std_return,
                stats.mean_final_order
            );
        }
        Cmd::Augment {
            env,
            order,
            input,
            out,
        } => {
            let spec = env.spec()?;
            let store = DemoStore::load(&resolve(&root, &input), Some(&spec))?;
            let aug = augment(&store, &spec, &dihedral_elements(order))?;
            let path = resolve(&root, &out);
            create_parent(&path)?;
            aug.save(&path)?;
            println!(
                "{}: {} -> {} tuples",
                path.display(),
                store.len(),
                aug.len()
            );
        }
        Cmd::Train { config, overrides } => {
            let cfg =
                ExperimentConfig::load(&resolve(&root, &config))?.with_overrides(&overrides)?;
            let rec = train(&cfg, &root)?;
            let s = &rec.summary;
            println!(
                "{} -> {}: tail true reward {:.4} ± {:.4}, tail order {:.4} ± {:.4}, eval return {:.4} ± {:.4}, eval order {:.4}",
                s.label,
                rec.dir.display(),
                s.tail_true_reward_mean,
                s.tail_true_reward_std,
                s.tail_order_mean,
                s.tail_order_std,
                s.eval_return_mean,
                s.eval_return_std,
                s.eval_order_mean
            );
        }
        Cmd::Eval {
            checkpoint,
            episodes,
            seeds,
            stochastic,
            out,
        } => {
            let ck = resolve(&root, &checkpoint);
            let ev = eval_checkpoint(&ck, episodes, &seeds, !stochastic)?;
            let path = resolve(&root, &out);
            create_parent(&path)?;
            let fresh = !path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)?;
            if fresh {
                writeln!(f, "checkpoint,episodes,seeds,mean,std,order_mean")?;
            }
            let seeds_col = seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(
                f,
                "{},{episodes},{seeds_col},{},{},{}",
                ck.display(),
                ev.mean,
                ev.std,
                ev.order_mean
            )?;
            println!(
                "return {:.4} ± {:.4} over {} seeds",
                ev.mean,
                ev.std,
                seeds.len()
            );
        }
        Cmd::VerifyTheory {
            config,
            overrides,
            out,
        } => {
            let cfg = theory_config(&root, config.as_deref(), &overrides)?;
            let report = verify_theory(&cfg)?;
            let text = report.to_text();
            let path = resolve(&root, &out);
            create_parent(&path)?;
            std::fs::write(&path, &text)?;
            print!("{text}");
            if !report.passed() {
                bail!(GateFailure(format!(
                    "theory checks failed, see {}",
                    path.display()
                )));
            }
        }
        Cmd::RewardMap {
            checkpoint,
            state_seed,
            demo_state,
            agent,
            grid,
            out,
        } => {
            let run = load_run_checkpoint(&resolve(&root, &checkpoint))?;
            let state = match demo_state {
                Some(k) => {
                    let demos = load_expert_demos(&run.config, &root)?;
                    let t = demos.tuples().get(k).ok_or_else(|| {
                        Error::Input(format!("demo {k} out of range ({} tuples)", demos.len()))
                    })?;
                    EnvState::from_structured(&run.spec, &t.s, t.step_index)?
                }
                None => probe_state(&run.spec, state_seed),
            };
            let agent = agent.unwrap_or_else(|| farthest_agent(&state));
            let map = reward_map(&run, &state, agent, grid)?;
            let stem = resolve(&root, &out);
            create_parent(&stem)?;
            let (c, s) = write_reward_map(&map, &stem)?;
            let [ax, ay] = map.argmax();
            let (p, m) = (state.positions[agent], centroid(&state));
            let toward = ax * (p[0] - m[0]) + ay * (p[1] - m[1]) < 0.0;
            println!(
                "{} {}: agent {agent}, argmax acceleration ({ax:.3}, {ay:.3}){}",
                c.display(),
                s.display(),
                if toward { ", toward the centroid" } else { "" }
            );
        }
        Cmd::Plot { runs, metric, out } => {
            if runs.is_empty() {
                bail!(Error::Config("no run directories given".into()));
            }
            let dirs: Vec<PathBuf> = runs.iter().map(|r| resolve(&root, r)).collect();
            let path = plot_metrics(&dirs, &metric, &resolve(&root, &out))?;
            println!("{}", path.display());
        }
        Cmd::VerifyRecord { run } => {
            let bad = verify_record(&resolve(&root, &run))?;
            if !bad.is_empty() {
                for b in &bad {
                    eprintln!("{b}");
                }
                bail!(GateFailure(format!(
                    "{} summary fields do not match the rows",
                    bad.len()
                )));
            }
            println!("record consistent");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<GateFailure>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
