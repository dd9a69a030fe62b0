use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{
    loss_plain, loss_sgf, Discriminator, DiscriminatorSet, EnvFeaturizer, LossOutput,
};
use crate::approx::{AdamState, Checkpoint};
use crate::demos::{augment, sample_indices, ContinuousTuple, DemoStore};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::marl::{
    evaluate_policy, ppo_update, ActorCritic, PolicyDensity, PpoOptimizer, RewardOrigin,
    RewardSource, RolloutWorker,
};

use super::config::ExperimentConfig;
use super::experts::gen_experts;
use super::record::{summarize, summarize_seed, write_rows, EvalRow, MetricsRow, RunSummary};
use super::{mean_std, resolve};

/// Group draws use their own stream so that turning the symmetric loss off
/// leaves every other random draw of a run unchanged.
const GROUP_STREAM_SALT: u64 = 0x5347_4644_5f67_7270;
/// Evaluation start states are seeded from the run seed plus this offset.
pub const EVAL_SEED_OFFSET: u64 = 1_000_003;

pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub eval: Vec<EvalRow>,
    pub policy: ActorCritic,
    pub discs: DiscriminatorSet,
    pub checkpoint: Checkpoint,
}

pub struct RunRecord {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub summary: RunSummary,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn mean_or_nan(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Expert demonstrations for a config: the configured file (fingerprint
/// checked against the environment) or an in-memory scripted-expert set.
pub fn load_expert_demos(cfg: &ExperimentConfig, root: &Path) -> Result<DemoStore> {
    let spec = cfg.env_spec();
    if cfg.demo_file.is_empty() {
        Ok(gen_experts(&spec, cfg.demos, cfg.expert_seed)?.0)
    } else {
        DemoStore::load(&resolve(root, &cfg.demo_file), Some(&spec))
    }
}

/// Trains every configured seed, writing per-seed metrics, evaluations and
/// checkpoints plus the effective config and a summary under the output dir.
pub fn train(cfg: &ExperimentConfig, root: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    let spec = cfg.env_spec();
    let expert = load_expert_demos(cfg, root)?;
    let dir = resolve(root, &cfg.output_dir);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = train_seed(cfg, &spec, &expert, seed)?;
        let sd = dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&sd)?;
        write_rows(&sd.join("metrics.csv"), &run.rows)?;
        write_rows(&sd.join("eval.csv"), &run.eval)?;
        run.checkpoint.save(&sd.join("checkpoint.bin"))?;
        seeds.push(summarize_seed(seed, &run.rows, &run.eval));
    }
    let summary = summarize(&cfg.label(), seeds);
    summary.save(&dir.join("summary.toml"))?;
    Ok(RunRecord {
        config: cfg.clone(),
        dir,
        summary,
    })
}

/// The adversarial loop for one seed, without touching the filesystem.
///
/// Per update: collect `horizon` generator steps, take `disc_updates`
/// discriminator steps on expert vs generator minibatches (adding the
/// transformed-batch term when `sad`), relabel the batch with the updated
/// discriminators, then one PPO update.
pub fn train_seed(
    cfg: &ExperimentConfig,
    spec: &EnvSpec,
    expert: &DemoStore,
    seed: u64,
) -> Result<SeedRun> {
    expert.check_spec(spec)?;
    let group = cfg.group();
    let expert = if cfg.augment_expert {
        augment(expert, spec, &group)?
    } else {
        expert.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g_rng = ChaCha8Rng::seed_from_u64(seed ^ GROUP_STREAM_SALT);
    let feat = EnvFeaturizer { spec: spec.clone() };
    let variant = cfg.algorithm.variant();
    let mut ac = ActorCritic::for_spec(
        spec,
        &cfg.hidden,
        cfg.shared_actor,
        cfg.init_log_std,
        &mut rng,
    )?;
    let mut discs = DiscriminatorSet::new(
        variant,
        &feat,
        spec.n_agents,
        &cfg.disc_hidden,
        cfg.gamma,
        cfg.shared_disc,
        &mut rng,
    )?;
    let mut d_opt: Vec<AdamState> = discs
        .discs
        .iter()
        .map(|d| AdamState::new(d.n_params(), cfg.disc_lr))
        .collect();
    let ppo = cfg.ppo();
    let mut p_opt = PpoOptimizer::new(&ac, ppo.lr);
    let mut worker = RolloutWorker::new(spec.clone(), rng.random());
    let mut rows = Vec::with_capacity(cfg.updates);

    for update in 0..cfg.updates {
        let mut buf = worker.collect(&ac, cfg.horizon, &RewardSource::TrueReward)?;
        let mut d_loss = 0.0;
        for _ in 0..cfg.disc_updates {
            let e_idx = sample_indices(expert.len(), cfg.disc_batch, true, &mut rng)?;
            let g_idx = sample_indices(buf.tuples.len(), cfg.disc_batch, true, &mut rng)?;
            let eb: Vec<&ContinuousTuple> = e_idx.iter().map(|&i| &expert.tuples()[i]).collect();
            let gb: Vec<&ContinuousTuple> = g_idx.iter().map(|&i| &buf.tuples[i]).collect();
            let density = PolicyDensity { policy: &ac, spec };
            let ld = Some(&density as &dyn crate::adversarial::LogDensity);
            let out: LossOutput = if cfg.sad {
                let elements = if cfg.sad_full_group {
                    group.clone()
                } else {
                    vec![group[g_rng.random_range(0..group.len())]]
                };
                loss_sgf(&discs, &feat, &eb, &gb, ld, &elements)?
            } else {
                loss_plain(&discs, &feat, &eb, &gb, ld)?
            };
            for (k, d) in discs.discs.iter_mut().enumerate() {
                let mut p = d.params();
                d_opt[k].update(&mut p, &out.grads[k])?;
                d.set_params(&p)?;
            }
            d_loss += out.value / cfg.disc_updates as f64;
        }
        buf.label_rewards(&RewardSource::Discriminator {
            set: &discs,
            featurizer: &feat,
            gail_reward: cfg.gail_reward,
        })?;
        // the generator must only ever see discriminator rewards
        if buf.reward_origin != RewardOrigin::Discriminator {
            return Err(Error::Input(
                "generator batch not labelled by the discriminators".into(),
            ));
        }
        buf.compute_gae(ppo.gamma, ppo.lambda, true);
        let stats = ppo_update(&mut ac, &mut p_opt, &buf, &ppo, &mut rng)?;
        rows.push(MetricsRow {
            seed,
            update,
            timestamp_ms: now_ms(),
            true_reward: mean_or_nan(&buf.true_rewards),
            disc_reward: mean_or_nan(&buf.rewards),
            episode_return: mean_or_nan(&buf.episode_returns),
            order_parameter: mean_or_nan(&buf.episode_final_order),
            disc_loss: d_loss,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
        });
    }

    let eval = evaluate_policy(spec, &ac, cfg.eval_episodes, seed + EVAL_SEED_OFFSET, true)?
        .into_iter()
        .enumerate()
        .map(|(episode, (ret, phi))| EvalRow {
            seed,
            episode,
            episode_return: ret,
            final_order: phi,
        })
        .collect();

    let mut ck = Checkpoint::new(spec.fingerprint());
    ck.put_text("config", cfg.to_toml());
    ck.put_u64("run", vec![seed, cfg.updates as u64]);
    ac.write_sections(&mut ck);
    p_opt.write_sections(&mut ck);
    ck.put_u64(
        "disc.layout",
        vec![
            discs.discs.len() as u64,
            discs.n_agents as u64,
            discs.shared as u64,
        ],
    );
    for (k, d) in discs.discs.iter().enumerate() {
        d.write_sections(&format!("disc{k}"), &mut ck);
        d_opt[k].write_sections(&format!("disc{k}.opt"), &mut ck);
    }
    Ok(SeedRun {
        seed,
        rows,
        eval,
        policy: ac,
        discs,
        checkpoint: ck,
    })
}

/// Policy and discriminators restored from a training checkpoint.
pub struct TrainedRun {
    pub config: ExperimentConfig,
    pub spec: EnvSpec,
    pub seed: u64,
    pub policy: ActorCritic,
    pub discs: DiscriminatorSet,
}

pub fn load_run_checkpoint(path: &Path) -> Result<TrainedRun> {
    let ck = Checkpoint::load(path)?;
    let config = ExperimentConfig::from_toml(ck.text("config")?)?;
    let spec = config.env_spec();
    if spec.fingerprint() != ck.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: ck.fingerprint,
            found: spec.fingerprint(),
        });
    }
    let run = ck.u64s("run")?;
    let layout = ck.u64s("disc.layout")?;
    if layout.len() != 3 || run.is_empty() {
        return Err(Error::Checkpoint("bad run layout".into()));
    }
    let discs = DiscriminatorSet {
        discs: (0..layout[0])
            .map(|k| Discriminator::read_sections(&format!("disc{k}"), &ck))
            .collect::<Result<_>>()?,
        n_agents: layout[1] as usize,
        shared: layout[2] != 0,
    };
    Ok(TrainedRun {
        config,
        spec,
        seed: run[0],
        policy: ActorCritic::read_sections(&ck)?,
        discs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub seeds: Vec<u64>,
    /// Per-seed mean episode return.
    pub seed_means: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Mean final order parameter over all episodes (NaN outside Vicsek).
    pub order_mean: f64,
}

/// True-reward statistics of a checkpointed policy: per-seed means over
/// `episodes`, then mean and sample std over seeds.
pub fn eval_checkpoint(
    path: &Path,
    episodes: usize,
    seeds: &[u64],
    deterministic: bool,
) -> Result<EvalSummary> {
    let run = load_run_checkpoint(path)?;
    let mut seed_means = Vec::with_capacity(seeds.len());
    let mut orders = Vec::new();
    for &s in seeds {
        let eps = evaluate_policy(&run.spec, &run.policy, episodes, s, deterministic)?;
        seed_means.push(eps.iter().map(|e| e.0).sum::<f64>() / eps.len().max(1) as f64);
        orders.extend(eps.iter().map(|e| e.1).filter(|x| x.is_finite()));
    }
    let (mean, std) = mean_std(&seed_means);
    Ok(EvalSummary {
        seeds: seeds.to_vec(),
        seed_means,
        mean,
        std,
        order_mean: mean_std(&orders).0,
    })
}
