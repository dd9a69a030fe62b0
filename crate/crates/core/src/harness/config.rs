use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversarial::{GailReward, Variant};
use crate::envs::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::group::dihedral_elements;
use crate::group::GroupElement;
use crate::marl::PpoConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "ma-gail")]
    MaGail,
    #[serde(rename = "ma-airl")]
    MaAirl,
}

impl Algorithm {
    pub fn variant(self) -> Variant {
        match self {
            Algorithm::MaGail => Variant::Gail,
            Algorithm::MaAirl => Variant::Airl,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::MaGail => "ma-gail",
            Algorithm::MaAirl => "ma-airl",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ma-gail" => Ok(Algorithm::MaGail),
            "ma-airl" => Ok(Algorithm::MaAirl),
            _ => Err(Error::Config(format!(
                "unknown algorithm `{s}` (ma-gail | ma-airl)"
            ))),
        }
    }
}

/// Flat TOML experiment description. Every key is optional except
/// `version`; missing keys take the desk-scale defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub env: EnvKind,
    pub n_agents: usize,
    pub algorithm: Algorithm,
    /// Materialize the group orbit of the expert demonstrations.
    pub augment_expert: bool,
    /// Add the transformed-batch cross-entropy to the discriminator loss.
    pub sad: bool,
    pub group_order: u32,
    /// Average the symmetric loss over the whole group instead of one
    /// uniformly drawn element per minibatch.
    pub sad_full_group: bool,
    /// Expert demonstration count `M`.
    pub demos: usize,
    /// Demo file; when empty, demos are generated in memory from the
    /// scripted expert with `expert_seed`.
    pub demo_file: String,
    pub expert_seed: u64,
    pub seeds: Vec<u64>,
    /// Generator updates per seed.
    pub updates: usize,
    /// Environment steps collected per update.
    pub horizon: usize,
    pub max_steps: usize,
    pub hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub disc_lr: f64,
    pub disc_batch: usize,
    pub disc_updates: usize,
    pub shared_actor: bool,
    pub shared_disc: bool,
    pub init_log_std: f64,
    pub gail_reward: GailReward,
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub eval_episodes: usize,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let ppo = PpoConfig::default();
        Self {
            version: CONFIG_VERSION,
            env: EnvKind::Rendezvous,
            n_agents: 5,
            algorithm: Algorithm::MaGail,
            augment_expert: false,
            sad: false,
            group_order: 4,
            sad_full_group: false,
            demos: 100,
            demo_file: String::new(),
            expert_seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            updates: 200,
            horizon: 200,
            max_steps: 200,
            hidden: vec![64, 64],
            disc_hidden: vec![64],
            disc_lr: 3e-4,
            disc_batch: 128,
            disc_updates: 1,
            shared_actor: true,
            shared_disc: false,
            init_log_std: -0.5,
            gail_reward: GailReward::default(),
            gamma: ppo.gamma,
            lambda: ppo.lambda,
            clip_eps: ppo.clip_eps,
            epochs: ppo.epochs,
            minibatch: ppo.minibatch,
            lr: ppo.lr,
            value_coef: ppo.value_coef,
            entropy_coef: ppo.entropy_coef,
            max_grad_norm: ppo.max_grad_norm,
            log_std_min: ppo.log_std_min,
            log_std_max: ppo.log_std_max,
            eval_episodes: 5,
            output_dir: "runs/default".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        match raw.get("version").and_then(|v| v.as_integer()) {
            Some(v) if v == CONFIG_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "config version {v} is not supported (expected {CONFIG_VERSION})"
                )))
            }
            None => return Err(Error::Config("config is missing the `version` key".into())),
        }
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides as if they appeared in the file.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        for kv in overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let snippet = format!("{k} = {v}");
            let value = match snippet.parse::<toml::Table>() {
                Ok(t) => t.get(k).cloned().expect("parsed key"),
                // bare words are strings
                Err(_) => toml::Value::String(v.to_string()),
            };
            table.insert(k.to_string(), value);
        }
        let cfg: Self = toml::from_str(&toml::to_string(&table).expect("table serializes"))
            .map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {}",
                self.version
            )));
        }
        if self.group_order == 0 {
            return Err(Error::Config("group_order must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.demos == 0 {
            return Err(Error::Config("demos must be positive".into()));
        }
        if self.updates > 0 && (self.horizon == 0 || self.disc_batch == 0 || self.minibatch == 0) {
            return Err(Error::Config(
                "horizon, disc_batch and minibatch must be positive".into(),
            ));
        }
        if self.log_std_min > self.log_std_max {
            return Err(Error::Config("log_std_min exceeds log_std_max".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(
                "gamma must lie in [0, 1) and lambda in [0, 1]".into(),
            ));
        }
        self.env_spec().validate()
    }

    pub fn env_spec(&self) -> EnvSpec {
        EnvSpec {
            max_steps: self.max_steps,
            ..EnvSpec::new(self.env, self.n_agents)
        }
    }

    pub fn ppo(&self) -> PpoConfig {
        PpoConfig {
            gamma: self.gamma,
            lambda: self.lambda,
            clip_eps: self.clip_eps,
            epochs: self.epochs,
            minibatch: self.minibatch,
            lr: self.lr,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
            max_grad_norm: self.max_grad_norm,
            log_std_min: self.log_std_min,
            log_std_max: self.log_std_max,
        }
    }

    pub fn group(&self) -> Vec<GroupElement> {
        dihedral_elements(self.group_order)
    }

    /// Short label in the naming of the experiments: `S-` marks both
    /// symmetry components on.
    pub fn label(&self) -> String {
        let base = match self.algorithm {
            Algorithm::MaGail => "MA-GAIL",
            Algorithm::MaAirl => "MA-AIRL",
        };
        match (self.augment_expert, self.sad) {
            (false, false) => base.to_string(),
            (true, true) => format!("S-{base}"),
            (true, false) => format!("{base}+aug"),
            (false, true) => format!("{base}+sad"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig {
            env: EnvKind::Vicsek,
            sad: true,
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn minimal_file_takes_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "version = 1\nenv = \"pursuit\"\nalgorithm = \"ma-airl\"\n",
        )
        .unwrap();
        assert_eq!(cfg.env, EnvKind::Pursuit);
        assert_eq!(cfg.algorithm, Algorithm::MaAirl);
        assert_eq!(cfg.demos, 100);
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in [
            "env = \"vicsek\"\n",
            "version = 2\n",
            "version = 1\nbogus = 3\n",
            "version = 1\nenv = \"swarm\"\n",
            "version = 1\nseeds = []\n",
            "version = 1\ngamma = 1.5\n",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn overrides_replace_keys() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[
                "env=vicsek".into(),
                "sad=true".into(),
                "seeds=[3, 4]".into(),
                "disc_lr=1e-3".into(),
            ])
            .unwrap();
        assert_eq!(cfg.env, EnvKind::Vicsek);
        assert!(cfg.sad);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.disc_lr, 1e-3);
        assert!(ExperimentConfig::default()
            .with_overrides(&["nokey".into()])
            .is_err());
    }

    #[test]
    fn labels() {
        let mut cfg = ExperimentConfig {
            algorithm: Algorithm::MaAirl,
            ..Default::default()
        };
        assert_eq!(cfg.label(), "MA-AIRL");
        cfg.augment_expert = true;
        cfg.sad = true;
        assert_eq!(cfg.label(), "S-MA-AIRL");
    }
}
