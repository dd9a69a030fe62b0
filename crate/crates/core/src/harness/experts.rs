use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demos::{ContinuousTuple, DemoStore, Provenance, Source};
use crate::envs::{self, EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::marl::EVAL_ACTION_SALT;

use super::mean_std;

/// Scripted-expert quality over complete episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertStats {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    /// NaN outside Vicsek.
    pub mean_final_order: f64,
}

impl ExpertStats {
    fn from_episodes(returns: &[f64], orders: &[f64]) -> Self {
        let (mean_return, std_return) = mean_std(returns);
        Self {
            episodes: returns.len(),
            mean_return,
            std_return,
            mean_final_order: mean_std(orders).0,
        }
    }

    pub fn sidecar_path(demo_path: &Path) -> PathBuf {
        let mut p = demo_path.as_os_str().to_owned();
        p.push(".stats.toml");
        PathBuf::from(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Rolls out `⌈M / max_steps⌉` scripted-expert episodes and keeps exactly the
/// first `M` transitions. Statistics cover the complete episodes.
pub fn gen_experts(spec: &EnvSpec, m: usize, seed: u64) -> Result<(DemoStore, ExpertStats)> {
    if m == 0 {
        return Err(Error::Config("demo count must be positive".into()));
    }
    let episodes = m.div_ceil(spec.max_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tuples = Vec::with_capacity(m);
    let (mut returns, mut orders) = (Vec::new(), Vec::new());
    for ep in 0..episodes {
        let start = envs::reset_with(spec, &mut rng);
        let (states, actions, rewards) =
            envs::expert_rollout(spec, start, spec.max_steps, &mut rng)?;
        for t in 0..actions.len() {
            if tuples.len() == m {
                break;
            }
            tuples.push(ContinuousTuple::from_states(
                &states[t],
                &actions[t],
                &states[t + 1],
                ep as u64,
                Provenance::raw(Source::Expert),
            ));
        }
        returns.push(rewards.iter().sum());
        if spec.kind == EnvKind::Vicsek {
            orders.push(envs::order_parameter(states.last().expect("nonempty")));
        }
    }
    Ok((
        DemoStore::new(spec, tuples)?,
        ExpertStats::from_episodes(&returns, &orders),
    ))
}

/// The scripted expert evaluated on the same start states that
/// [`crate::marl::evaluate_policy`] uses for `seed`.
pub fn expert_reference(spec: &EnvSpec, episodes: usize, seed: u64) -> Result<ExpertStats> {
    let mut resets = ChaCha8Rng::seed_from_u64(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_ACTION_SALT);
    let (mut returns, mut orders) = (Vec::new(), Vec::new());
    for _ in 0..episodes {
        let start = envs::reset_with(spec, &mut resets);
        let (states, _, rewards) = envs::expert_rollout(spec, start, spec.max_steps, &mut rng)?;
        returns.push(rewards.iter().sum());
        if spec.kind == EnvKind::Vicsek {
            orders.push(envs::order_parameter(states.last().expect("nonempty")));
        }
    }
    Ok(ExpertStats::from_episodes(&returns, &orders))
}
