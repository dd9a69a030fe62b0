//! Shared fixtures for the criterion benches.

use sgf_core::demos::DemoStore;
use sgf_core::envs::{EnvKind, EnvSpec};
use sgf_core::harness::gen_experts;

/// Scripted-expert demonstrations for a five-agent `kind` environment.
pub fn expert_store(kind: EnvKind, demos: usize) -> (EnvSpec, DemoStore) {
    let spec = EnvSpec::new(kind, 5);
    let (store, _) = gen_experts(&spec, demos, 0).expect("expert rollout");
    (spec, store)
}
