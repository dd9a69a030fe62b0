use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adversarial::{EnvFeaturizer, Featurizer, Variant};
use crate::envs::{self, EnvState, Vec2};
use crate::error::{Error, Result};

use super::train::TrainedRun;

/// Learned reward of one agent over a square grid of its accelerations.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardMap {
    pub agent: usize,
    /// Grid coordinates along either axis, ascending.
    pub axis: Vec<f64>,
    /// Row-major, `values[iy * res + ix]` at `(axis[ix], axis[iy])`.
    pub values: Vec<f64>,
}

impl RewardMap {
    pub fn res(&self) -> usize {
        self.axis.len()
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.res() + ix]
    }

    pub fn argmax(&self) -> Vec2 {
        let k = (0..self.values.len()).fold(0, |b, k| {
            if self.values[k] > self.values[b] {
                k
            } else {
                b
            }
        });
        [self.axis[k % self.res()], self.axis[k / self.res()]]
    }
}

/// Evaluates `f(s, a, s')` of an adversarial-IRL checkpoint for `agent`,
/// sweeping its acceleration over `[-max_accel, max_accel]²`. The other
/// agents take their deterministic policy action and `s'` is the simulated
/// successor.
pub fn reward_map(
    run: &TrainedRun,
    state: &EnvState,
    agent: usize,
    grid_res: usize,
) -> Result<RewardMap> {
    if run.discs.variant() != Variant::Airl {
        return Err(Error::Domain(
            "reward maps need an ma-airl checkpoint: a GAIL discriminator scores \
             state-action pairs against the policy and has no standalone reward"
                .into(),
        ));
    }
    let spec = &run.spec;
    if agent >= spec.n_agents {
        return Err(Error::Input(format!(
            "agent {agent} out of range for {} agents",
            spec.n_agents
        )));
    }
    if grid_res == 0 {
        return Err(Error::Input("grid resolution must be positive".into()));
    }
    let lim = spec.max_accel;
    let axis: Vec<f64> = if grid_res == 1 {
        vec![0.0]
    } else {
        (0..grid_res)
            .map(|k| -lim + 2.0 * lim * k as f64 / (grid_res - 1) as f64)
            .collect()
    };
    let mut joint: Vec<Vec2> = (0..spec.n_agents)
        .map(|j| {
            let m = run.policy.mean(j, &envs::observe(spec, state, j))?;
            Ok([m[0], m[1]])
        })
        .collect::<Result<_>>()?;
    let feat = EnvFeaturizer { spec: spec.clone() };
    let disc = run.discs.for_agent(agent);
    let s = feat.state_features(&state.to_structured(), agent)?;
    let mut values = Vec::with_capacity(grid_res * grid_res);
    for &ay in &axis {
        for &ax in &axis {
            joint[agent] = [ax, ay];
            let (next, _) = envs::step(spec, state, &joint)?;
            let a = crate::StructuredVector::from_pairs(
                &[envs::effective_action(spec, [ax, ay])],
                Vec::new(),
            );
            let af = feat.action_features(&state.to_structured(), &a, agent)?;
            let sn = feat.state_features(&next.to_structured(), agent)?;
            values.push(disc.f_value(&s, &af, &sn)?);
        }
    }
    Ok(RewardMap {
        agent,
        axis,
        values,
    })
}

/// Linear blue-white-red colour for `t` in `[0, 1]`.
fn colour(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let u = t * 2.0;
        (u, u, 1.0)
    } else {
        let u = (t - 0.5) * 2.0;
        (1.0, 1.0 - u, 1.0 - u)
    };
    format!(
        "#{:02x}{:02x}{:02x}",
        (r * 255.0) as u8,
        (g * 255.0) as u8,
        (b * 255.0) as u8
    )
}

pub fn heatmap_svg(map: &RewardMap, title: &str) -> String {
    let res = map.res();
    let cell = (360 / res.max(1)).max(2);
    let side = cell * res;
    let (lo, hi) = map
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
        side + 40,
        side + 60
    );
    let _ = writeln!(s, r#"<text x="20" y="16">{title}</text>"#);
    for iy in 0..res {
        for ix in 0..res {
            // a_y grows upwards
            let y = 30 + (res - 1 - iy) * cell;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{cell}" height="{cell}" fill="{}"/>"#,
                20 + ix * cell,
                colour((map.at(ix, iy) - lo) / span)
            );
        }
    }
    let [bx, by] = map.argmax();
    let lim = map.axis.last().copied().unwrap_or(1.0).abs().max(1e-12);
    let cx = 20.0 + side as f64 * (bx / lim + 1.0) / 2.0;
    let cy = 30.0 + side as f64 * (1.0 - by / lim) / 2.0;
    let _ = writeln!(
        s,
        r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="4" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{}">a_x, a_y in [-{lim}, {lim}]; reward {lo:.3} .. {hi:.3}</text>"#,
        side + 50
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv` (`a_x,a_y,reward`) and `<stem>.svg`.
pub fn write_reward_map(map: &RewardMap, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv_path = stem.with_extension("csv");
    let svg_path = stem.with_extension("svg");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["a_x", "a_y", "reward"])?;
    for iy in 0..map.res() {
        for ix in 0..map.res() {
            w.write_record([map.axis[ix], map.axis[iy], map.at(ix, iy)].map(|v| v.to_string()))?;
        }
    }
    w.flush()?;
    std::fs::write(
        &svg_path,
        heatmap_svg(map, &format!("reward of agent {}", map.agent)),
    )?;
    Ok((csv_path, svg_path))
}

/// A reset state with every velocity zeroed, for probing a reward map.
pub fn probe_state(spec: &crate::envs::EnvSpec, seed: u64) -> EnvState {
    let mut s = envs::reset(spec, seed);
    s.velocities.iter_mut().for_each(|v| *v = [0.0, 0.0]);
    s
}

/// Mean agent position.
pub fn centroid(state: &EnvState) -> Vec2 {
    let n = state.positions.len().max(1) as f64;
    state
        .positions
        .iter()
        .fold([0.0, 0.0], |c, p| [c[0] + p[0] / n, c[1] + p[1] / n])
}

/// The agent farthest from the centroid, where the pull back toward the
/// group is strongest.
pub fn farthest_agent(state: &EnvState) -> usize {
    let c = centroid(state);
    let d = |p: &Vec2| (p[0] - c[0]).hypot(p[1] - c[1]);
    (0..state.positions.len()).fold(0, |b, i| {
        if d(&state.positions[i]) > d(&state.positions[b]) {
            i
        } else {
            b
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversarial::DiscriminatorSet;
    use crate::harness::config::{Algorithm, ExperimentConfig};
    use crate::marl::ActorCritic;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(algorithm: Algorithm) -> TrainedRun {
        let config = ExperimentConfig {
            algorithm,
            n_agents: 3,
            ..Default::default()
        };
        let spec = config.env_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feat = EnvFeaturizer { spec: spec.clone() };
        TrainedRun {
            policy: ActorCritic::for_spec(&spec, &[8], true, -0.5, &mut rng).unwrap(),
            discs: DiscriminatorSet::new(
                algorithm.variant(),
                &feat,
                3,
                &[8],
                0.99,
                false,
                &mut rng,
            )
            .unwrap(),
            config,
            spec,
            seed: 0,
        }
    }

    #[test]
    fn grid_of_three_has_nine_values() {
        let r = run(Algorithm::MaAirl);
        let m = reward_map(&r, &probe_state(&r.spec, 1), 0, 3).unwrap();
        assert_eq!(m.values.len(), 9);
        assert_eq!(m.axis, vec![-1.0, 0.0, 1.0]);
        let dir = tempfile::tempdir().unwrap();
        let (c, s) = write_reward_map(&m, &dir.path().join("map")).unwrap();
        assert_eq!(std::fs::read_to_string(c).unwrap().lines().count(), 10);
        assert!(std::fs::read_to_string(s).unwrap().starts_with("<svg"));
    }

    #[test]
    fn constant_discriminator_gives_a_flat_map() {
        let mut r = run(Algorithm::MaAirl);
        for d in &mut r.discs.discs {
            let p = vec![0.0; d.n_params()];
            d.set_params(&p).unwrap();
        }
        let m = reward_map(&r, &probe_state(&r.spec, 2), 1, 5).unwrap();
        assert!(m.values.iter().all(|&v| v == m.values[0]));
    }

    #[test]
    fn gail_checkpoints_are_refused() {
        let r = run(Algorithm::MaGail);
        let err = reward_map(&r, &probe_state(&r.spec, 0), 0, 3).unwrap_err();
        assert!(err.to_string().contains("ma-airl"));
    }

    #[test]
    fn argmax_reads_the_grid() {
        let m = RewardMap {
            agent: 0,
            axis: vec![-1.0, 0.0, 1.0],
            values: vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0],
        };
        assert_eq!(m.argmax(), [-1.0, 1.0]);
    }

    #[test]
    fn farthest_agent_and_centroid() {
        let r = run(Algorithm::MaAirl);
        let mut st = probe_state(&r.spec, 0);
        st.positions = vec![[0.0, 0.0], [1.0, 0.0], [-1.0, 1.5]];
        assert_eq!(centroid(&st), [0.0, 0.5]);
        assert_eq!(farthest_agent(&st), 2);
    }
}
