use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tabular::{
    build_feasible_reward, is_optimal, random_symmetric_instance, recover_feasible_params,
    verify_prop2, FeasibleRewardParams, GroupActionOnMG, JointPolicy, Prop2Config, TabularMG,
};

/// Tolerance for optimality checks and reconstruction residuals.
pub const LEMMA_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub seed: u64,
    /// Symmetric instances, alternating between D_2 and D_4.
    pub instances: usize,
    pub sample_sizes: Vec<usize>,
    pub concentration: f64,
    /// Replace each instance's group by the identity alone.
    pub identity_only: bool,
    pub lemma_games: usize,
    pub lemma_draws: usize,
    pub completeness_games: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 200,
            sample_sizes: vec![5, 20, 50, 200, 1000],
            concentration: 1.0,
            identity_only: false,
            lemma_games: 100,
            lemma_draws: 50,
            completeness_games: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TheoryReport {
    pub prop2_runs: usize,
    pub prop2_cells: usize,
    pub prop2_min_delta: f64,
    /// Cells where the data-dependent (rather than worst-case) bound grew.
    pub prop2_realized_worse: usize,
    pub prop2_failures: Vec<String>,
    pub lemma_rewards: usize,
    pub lemma_failures: Vec<String>,
    pub completeness_games: usize,
    pub completeness_max_residual: f64,
    pub completeness_failures: Vec<String>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.prop2_failures.is_empty()
            && self.lemma_failures.is_empty()
            && self.completeness_failures.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let _ = writeln!(
            s,
            "augmentation bound: {} ({} runs, {} cells, min delta {:e}, realized bound worse in {} cells)",
            verdict(self.prop2_failures.is_empty()),
            self.prop2_runs,
            self.prop2_cells,
            self.prop2_min_delta,
            self.prop2_realized_worse
        );
        for f in &self.prop2_failures {
            let _ = writeln!(s, "  {f}");
        }
        let _ = writeln!(
            s,
            "feasible reward soundness: {} ({} rewards)",
            verdict(self.lemma_failures.is_empty()),
            self.lemma_rewards
        );
        for f in &self.lemma_failures {
            let _ = writeln!(s, "  {f}");
        }
        let _ = writeln!(
            s,
            "feasible reward completeness: {} ({} games, max residual {:e})",
            verdict(self.completeness_failures.is_empty()),
            self.completeness_games,
            self.completeness_max_residual
        );
        for f in &self.completeness_failures {
            let _ = writeln!(s, "  {f}");
        }
        let _ = writeln!(s, "overall: {}", verdict(self.passed()));
        s
    }
}

/// Optimal action values by value iteration over joint actions.
fn optimal_q(mg: &TabularMG, reward: &[f64]) -> Vec<f64> {
    let (ns, na, gamma) = (mg.n_states(), mg.n_joint(), mg.gamma());
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    loop {
        for s in 0..ns {
            for a in 0..na {
                let ev: f64 = mg.row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
                q[s * na + a] = reward[s * na + a] + gamma * ev;
            }
        }
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            let best = q[s * na..(s + 1) * na]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta < 1e-14 {
            return q;
        }
    }
}

fn prop2_suite(cfg: &TheoryConfig, report: &mut TheoryReport) -> Result<()> {
    report.prop2_min_delta = f64::INFINITY;
    for inst in 0..cfg.instances {
        let order = if inst % 2 == 0 { 2 } else { 4 };
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(inst as u64));
        let sym = random_symmetric_instance(order, &mut rng)?;
        let action = if cfg.identity_only {
            GroupActionOnMG::identity_only(
                sym.mg.n_states(),
                sym.mg.action_counts().to_vec(),
                order,
            )
        } else {
            sym.action
        };
        for &m in &cfg.sample_sizes {
            let run_seed = rng.random();
            let rep = verify_prop2(
                &sym.mg,
                &sym.pi_e,
                &action,
                &Prop2Config {
                    sample_size: m,
                    seeds: vec![run_seed],
                    concentration: cfg.concentration,
                },
            )?;
            report.prop2_runs += 1;
            report.prop2_cells += rep.n_cells;
            report.prop2_realized_worse += rep.realized_worse;
            report.prop2_min_delta = report.prop2_min_delta.min(rep.min_delta);
            for v in rep.violations {
                report.prop2_failures.push(format!(
                    "instance {inst} (D_{order}, M={m}, seed {}): delta {:e} at s={} a={}",
                    v.seed, v.delta, v.s, v.a
                ));
            }
        }
    }
    Ok(())
}

fn soundness_suite(cfg: &TheoryConfig, report: &mut TheoryReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1e33a);
    for game in 0..cfg.lemma_games {
        let ns = rng.random_range(1..=6);
        let counts = vec![rng.random_range(1..=3), rng.random_range(1..=3)];
        let gamma = rng.random_range(0.5..0.95);
        let mg = TabularMG::random(ns, counts.clone(), gamma, &mut rng)?;
        let pi = JointPolicy::random(ns, counts, 0.4, &mut rng);
        for draw in 0..cfg.lemma_draws {
            let params = FeasibleRewardParams::random(&mg, 2.0, 5.0, &mut rng);
            let r = build_feasible_reward(&mg, &pi, &params)?;
            report.lemma_rewards += 1;
            if !is_optimal(&mg, &r, &pi, LEMMA_TOL)? {
                report
                    .lemma_failures
                    .push(format!("game {game} draw {draw}: expert not optimal"));
            }
        }
    }
    Ok(())
}

/// Rewards are drawn first and the expert is read off as a greedy policy, so
/// the decomposition is recovered for rewards that were not built from one.
fn completeness_suite(cfg: &TheoryConfig, report: &mut TheoryReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0a1e7e);
    for game in 0..cfg.completeness_games {
        let ns = rng.random_range(1..=3);
        let counts = vec![2, 2];
        let gamma = rng.random_range(0.5..0.9);
        let mg = TabularMG::random(ns, counts.clone(), gamma, &mut rng)?;
        let r: Vec<f64> = (0..ns * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = optimal_q(&mg, &r);
        let mut choice = vec![vec![0; ns]; 2];
        for s in 0..ns {
            let row = &q[s * 4..(s + 1) * 4];
            let best = (0..4).fold(0, |b, a| if row[a] > row[b] { a } else { b });
            let joint = mg.decode_joint(best);
            choice[0][s] = joint[0];
            choice[1][s] = joint[1];
        }
        let pi = JointPolicy::deterministic(ns, counts, &choice)?;
        report.completeness_games += 1;
        if !is_optimal(&mg, &r, &pi, LEMMA_TOL)? {
            report
                .completeness_failures
                .push(format!("game {game}: greedy expert not optimal"));
            continue;
        }
        let params = match recover_feasible_params(&mg, &r, &pi, LEMMA_TOL) {
            Ok(p) => p,
            Err(e) => {
                report
                    .completeness_failures
                    .push(format!("game {game}: {e}"));
                continue;
            }
        };
        if params.zeta.iter().any(|&z| z < 0.0) {
            report
                .completeness_failures
                .push(format!("game {game}: negative zeta"));
        }
        let again = build_feasible_reward(&mg, &pi, &params)?;
        let res = r
            .iter()
            .zip(&again)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        report.completeness_max_residual = report.completeness_max_residual.max(res);
        if res > LEMMA_TOL {
            report
                .completeness_failures
                .push(format!("game {game}: residual {res:e}"));
        }
    }
    Ok(())
}

/// Runs the augmentation-bound sweep and both feasible-reward suites.
/// A game that is not actually invariant under its group is an error.
pub fn verify_theory(cfg: &TheoryConfig) -> Result<TheoryReport> {
    let mut report = TheoryReport::default();
    prop2_suite(cfg, &mut report)?;
    soundness_suite(cfg, &mut report)?;
    completeness_suite(cfg, &mut report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TheoryConfig {
        TheoryConfig {
            instances: 6,
            sample_sizes: vec![5, 100],
            lemma_games: 5,
            lemma_draws: 5,
            completeness_games: 20,
            ..Default::default()
        }
    }

    #[test]
    fn small_grid_passes() {
        let r = verify_theory(&small()).unwrap();
        assert!(r.passed(), "{}", r.to_text());
        assert_eq!(r.prop2_runs, 12);
        assert_eq!(r.completeness_games, 20);
        assert!(r.to_text().contains("overall: PASS"));
    }

    #[test]
    fn identity_group_gives_zero_delta() {
        let r = verify_theory(&TheoryConfig {
            identity_only: true,
            ..small()
        })
        .unwrap();
        assert_eq!(r.prop2_min_delta, 0.0);
        assert_eq!(r.prop2_realized_worse, 0);
    }

    #[test]
    fn value_iteration_matches_a_hand_solution() {
        // one state, self loop: Q(a) = r(a) + γ max r / (1 - γ)
        let mg = TabularMG::new(1, vec![2, 2], vec![1.0; 4], 0.5).unwrap();
        let q = optimal_q(&mg, &[0.0, 1.0, 2.0, -1.0]);
        assert!((q[2] - 4.0).abs() < 1e-12);
        assert!((q[0] - 2.0).abs() < 1e-12);
    }
}
