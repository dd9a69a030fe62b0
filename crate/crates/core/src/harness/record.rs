use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mean_std;

/// Summaries average the last 10% of updates (at least one).
pub const TAIL_FRACTION: f64 = 0.1;

/// One row per generator update per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub update: usize,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    /// Mean per-step environment reward over the collected batch.
    pub true_reward: f64,
    /// Mean per-step discriminator reward the generator trained on.
    pub disc_reward: f64,
    /// Mean summed true reward of episodes completed in this batch.
    pub episode_return: f64,
    /// Mean final order parameter of completed episodes (Vicsek).
    pub order_parameter: f64,
    pub disc_loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
}

/// Per-episode evaluation of the final policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub seed: u64,
    pub episode: usize,
    pub episode_return: f64,
    pub final_order: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub updates: usize,
    pub tail_true_reward: f64,
    pub tail_episode_return: f64,
    pub tail_order_parameter: f64,
    pub eval_return: f64,
    pub eval_order: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seeds: Vec<SeedSummary>,
    pub tail_true_reward_mean: f64,
    pub tail_true_reward_std: f64,
    pub tail_order_mean: f64,
    pub tail_order_std: f64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub eval_order_mean: f64,
    pub eval_order_std: f64,
}

fn mean_finite(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    mean_std(&v).0
}

pub fn summarize_seed(seed: u64, rows: &[MetricsRow], eval: &[EvalRow]) -> SeedSummary {
    let k = ((rows.len() as f64 * TAIL_FRACTION).ceil() as usize)
        .max(1)
        .min(rows.len());
    let tail = &rows[rows.len() - k..];
    SeedSummary {
        seed,
        updates: rows.len(),
        tail_true_reward: mean_finite(tail.iter().map(|r| r.true_reward)),
        tail_episode_return: mean_finite(tail.iter().map(|r| r.episode_return)),
        tail_order_parameter: mean_finite(tail.iter().map(|r| r.order_parameter)),
        eval_return: mean_finite(eval.iter().map(|r| r.episode_return)),
        eval_order: mean_finite(eval.iter().map(|r| r.final_order)),
    }
}

pub fn summarize(label: &str, seeds: Vec<SeedSummary>) -> RunSummary {
    let col = |f: fn(&SeedSummary) -> f64| -> (f64, f64) {
        let v: Vec<f64> = seeds.iter().map(f).filter(|x| x.is_finite()).collect();
        mean_std(&v)
    };
    let (tm, ts) = col(|s| s.tail_true_reward);
    let (pm, ps) = col(|s| s.tail_order_parameter);
    let (em, es) = col(|s| s.eval_return);
    let (om, os) = col(|s| s.eval_order);
    RunSummary {
        label: label.to_string(),
        seeds,
        tail_true_reward_mean: tm,
        tail_true_reward_std: ts,
        tail_order_mean: pm,
        tail_order_std: ps,
        eval_return_mean: em,
        eval_return_std: es,
        eval_order_mean: om,
        eval_order_std: os,
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    read_rows(path)
}

impl RunSummary {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))
    }
}

fn same(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

/// Recomputes `summary.toml` of a run directory from its per-seed CSV files.
/// Returns the list of mismatching fields (empty when the record is sound).
pub fn verify_record(run_dir: &Path) -> Result<Vec<String>> {
    let stored = RunSummary::load(&run_dir.join("summary.toml"))?;
    let mut seeds = Vec::with_capacity(stored.seeds.len());
    for s in &stored.seeds {
        let dir = run_dir.join(format!("seed_{}", s.seed));
        let rows: Vec<MetricsRow> = read_rows(&dir.join("metrics.csv"))?;
        let eval: Vec<EvalRow> = read_rows(&dir.join("eval.csv"))?;
        seeds.push(summarize_seed(s.seed, &rows, &eval));
    }
    let again = summarize(&stored.label, seeds);
    let mut bad = Vec::new();
    for (a, b) in stored.seeds.iter().zip(&again.seeds) {
        let fields = [
            ("tail_true_reward", a.tail_true_reward, b.tail_true_reward),
            (
                "tail_episode_return",
                a.tail_episode_return,
                b.tail_episode_return,
            ),
            (
                "tail_order_parameter",
                a.tail_order_parameter,
                b.tail_order_parameter,
            ),
            ("eval_return", a.eval_return, b.eval_return),
            ("eval_order", a.eval_order, b.eval_order),
        ];
        for (name, x, y) in fields {
            if !same(x, y) {
                bad.push(format!("seed {}: {name} stored {x} recomputed {y}", a.seed));
            }
        }
        if a.updates != b.updates {
            bad.push(format!(
                "seed {}: updates stored {} recomputed {}",
                a.seed, a.updates, b.updates
            ));
        }
    }
    let totals = [
        (
            "tail_true_reward_mean",
            stored.tail_true_reward_mean,
            again.tail_true_reward_mean,
        ),
        (
            "tail_true_reward_std",
            stored.tail_true_reward_std,
            again.tail_true_reward_std,
        ),
        (
            "tail_order_mean",
            stored.tail_order_mean,
            again.tail_order_mean,
        ),
        (
            "tail_order_std",
            stored.tail_order_std,
            again.tail_order_std,
        ),
        (
            "eval_return_mean",
            stored.eval_return_mean,
            again.eval_return_mean,
        ),
        (
            "eval_return_std",
            stored.eval_return_std,
            again.eval_return_std,
        ),
        (
            "eval_order_mean",
            stored.eval_order_mean,
            again.eval_order_mean,
        ),
        (
            "eval_order_std",
            stored.eval_order_std,
            again.eval_order_std,
        ),
    ];
    for (name, x, y) in totals {
        if !same(x, y) {
            bad.push(format!("{name}: stored {x} recomputed {y}"));
        }
    }
    Ok(bad)
}
