//! Experiment configuration, the adversarial training loop, run records,
//! and the theory/visualization entry points behind the CLI.

mod config;
mod experts;
mod plot;
mod record;
mod reward_map;
mod theory;
mod train;

use std::path::{Path, PathBuf};

pub use config::{Algorithm, ExperimentConfig, CONFIG_VERSION};
pub use experts::{expert_reference, gen_experts, ExpertStats};
pub use plot::{line_plot_svg, plot_metrics};
pub use record::{
    read_metrics, read_rows, summarize, summarize_seed, verify_record, write_rows, EvalRow,
    MetricsRow, RunSummary, SeedSummary, TAIL_FRACTION,
};
pub use reward_map::{
    centroid, farthest_agent, heatmap_svg, probe_state, reward_map, write_reward_map, RewardMap,
};
pub use theory::{verify_theory, TheoryConfig, TheoryReport, LEMMA_TOL};
pub use train::{
    eval_checkpoint, load_expert_demos, load_run_checkpoint, train, train_seed, EvalSummary,
    RunRecord, SeedRun, TrainedRun, EVAL_SEED_OFFSET,
};

/// Environment variable naming the directory all relative paths resolve against.
pub const OUTPUT_ROOT_VAR: &str = "SGF_OUTPUT_ROOT";

/// `path` if absolute, otherwise `root/path`.
pub fn resolve(root: &Path, path: impl AsRef<Path>) -> PathBuf {
    let p = path.as_ref();
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}
