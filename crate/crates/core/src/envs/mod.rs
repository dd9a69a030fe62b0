//! Continuous multi-agent swarm tasks: Rendezvous, Pursuit and Vicsek.
//!
//! All tasks live in a square arena `[-L/2, L/2]^2` centered at the origin, so
//! the `D_4` group acting about the origin maps the arena onto itself.
//! Rendezvous and Pursuit clamp positions at the walls (zeroing the blocked
//! velocity component); Vicsek wraps periodically.
//!
//! Structured state layout (all blocks equivariant 2D pairs):
//! positions (N), velocities (N), then Vicsek headings (N) or the Pursuit
//! prey position and velocity. Every per-agent action is one 2D pair.

mod voronoi;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::group::{GroupElement, StructuredVector};

pub use voronoi::{bounded_cell, centroid};

pub type Vec2 = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Rendezvous,
    Pursuit,
    Vicsek,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::Rendezvous, EnvKind::Pursuit, EnvKind::Vicsek];

    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::Rendezvous => "rendezvous",
            EnvKind::Pursuit => "pursuit",
            EnvKind::Vicsek => "vicsek",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown environment `{s}`")))
    }
}

/// Physical constants and expert gains of one task instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub n_agents: usize,
    /// Side length of the square arena (m).
    pub arena_size: f64,
    pub dt: f64,
    pub max_steps: usize,
    /// Predator / rendezvous agent acceleration cap (m/s²).
    pub max_accel: f64,
    /// Predator / rendezvous agent speed cap (m/s).
    pub max_speed: f64,
    /// Prey speed and acceleration caps relative to the predators'.
    pub prey_speed_ratio: f64,
    /// Constant Vicsek speed (m/s).
    pub vicsek_speed: f64,
    /// Vicsek neighbourhood radius (m).
    pub vicsek_radius: f64,
    /// Width of the uniform angular noise of the Vicsek expert (rad).
    pub vicsek_noise: f64,
    /// Rendezvous expert: proportional gain toward the centroid.
    pub expert_gain: f64,
    /// Rendezvous expert: velocity damping.
    pub expert_damping: f64,
    /// Pursuit expert: weight of the tangential spreading term.
    pub pursuit_spread: f64,
}

impl EnvSpec {
    pub fn new(kind: EnvKind, n_agents: usize) -> Self {
        Self {
            kind,
            n_agents,
            arena_size: 4.0,
            dt: 0.1,
            max_steps: 200,
            max_accel: 1.0,
            max_speed: 1.0,
            prey_speed_ratio: 1.5,
            vicsek_speed: 0.5,
            vicsek_radius: 2.0,
            vicsek_noise: 0.1,
            expert_gain: 1.0,
            expert_damping: 1.5,
            pursuit_spread: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("arena_size", self.arena_size),
            ("dt", self.dt),
            ("max_accel", self.max_accel),
            ("max_speed", self.max_speed),
            ("prey_speed_ratio", self.prey_speed_ratio),
            ("vicsek_speed", self.vicsek_speed),
            ("vicsek_radius", self.vicsek_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_agents == 0 || self.max_steps == 0 {
            return Err(Error::Config(
                "n_agents and max_steps must be positive".into(),
            ));
        }
        if self.vicsek_noise < 0.0 {
            return Err(Error::Config("vicsek_noise must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn half(&self) -> f64 {
        0.5 * self.arena_size
    }

    /// Stable 64-bit hash of every field; stored in demo and checkpoint files.
    pub fn fingerprint(&self) -> u64 {
        let text = toml::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Length of the structured state's equivariant block.
    pub fn state_equ_len(&self) -> usize {
        let n = self.n_agents;
        match self.kind {
            EnvKind::Rendezvous => 4 * n,
            EnvKind::Pursuit => 4 * n + 4,
            EnvKind::Vicsek => 6 * n,
        }
    }

    pub fn state_inv_len(&self) -> usize {
        0
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    /// Which slots of the structured state are equivariant (named blocks in
    /// layout order). Invariant blocks would follow in `inv`.
    pub fn feature_blocks(&self) -> Vec<FeatureBlock> {
        let n = self.n_agents;
        let mut b = vec![
            FeatureBlock::equ("positions", 2 * n),
            FeatureBlock::equ("velocities", 2 * n),
        ];
        match self.kind {
            EnvKind::Rendezvous => {}
            EnvKind::Pursuit => {
                b.push(FeatureBlock::equ("prey_position", 2));
                b.push(FeatureBlock::equ("prey_velocity", 2));
            }
            EnvKind::Vicsek => b.push(FeatureBlock::equ("headings", 2 * n)),
        }
        b
    }

    /// Length of the agent-centric observation built by [`observe`].
    pub fn obs_dim(&self) -> usize {
        let n = self.n_agents;
        match self.kind {
            EnvKind::Rendezvous => 4 * n,
            EnvKind::Pursuit => 4 * n + 4,
            EnvKind::Vicsek => 4 * n - 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureBlock {
    pub name: &'static str,
    pub equivariant: bool,
    pub len: usize,
}

impl FeatureBlock {
    fn equ(name: &'static str, len: usize) -> Self {
        Self {
            name,
            equivariant: true,
            len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prey {
    pub position: Vec2,
    pub velocity: Vec2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    /// Unit headings (Vicsek only).
    pub headings: Vec<Vec2>,
    /// Pursuit only.
    pub prey: Option<Prey>,
    pub time_step: u64,
}

impl EnvState {
    pub fn to_structured(&self) -> StructuredVector {
        let mut equ = Vec::with_capacity(2 * (3 * self.positions.len() + 2));
        for p in self
            .positions
            .iter()
            .chain(&self.velocities)
            .chain(&self.headings)
        {
            equ.extend_from_slice(p);
        }
        if let Some(prey) = &self.prey {
            equ.extend_from_slice(&prey.position);
            equ.extend_from_slice(&prey.velocity);
        }
        StructuredVector {
            equ,
            inv: Vec::new(),
        }
    }

    pub fn from_structured(spec: &EnvSpec, v: &StructuredVector, time_step: u64) -> Result<Self> {
        if v.equ.len() != spec.state_equ_len() || v.inv.len() != spec.state_inv_len() {
            return Err(Error::Shape(format!(
                "state vector ({}, {}) does not match {} with {} agents",
                v.equ.len(),
                v.inv.len(),
                spec.kind,
                spec.n_agents
            )));
        }
        let n = spec.n_agents;
        let pair = |i: usize| [v.equ[2 * i], v.equ[2 * i + 1]];
        let positions = (0..n).map(pair).collect();
        let velocities = (n..2 * n).map(pair).collect();
        let (headings, prey) = match spec.kind {
            EnvKind::Rendezvous => (Vec::new(), None),
            EnvKind::Vicsek => ((2 * n..3 * n).map(pair).collect(), None),
            EnvKind::Pursuit => (
                Vec::new(),
                Some(Prey {
                    position: pair(2 * n),
                    velocity: pair(2 * n + 1),
                }),
            ),
        };
        Ok(Self {
            positions,
            velocities,
            headings,
            prey,
            time_step,
        })
    }

    /// `L_g[s]`.
    pub fn transformed(&self, g: &GroupElement) -> EnvState {
        let map = |v: &Vec<Vec2>| v.iter().map(|p| g.apply(*p)).collect();
        EnvState {
            positions: map(&self.positions),
            velocities: map(&self.velocities),
            headings: map(&self.headings),
            prey: self.prey.as_ref().map(|p| Prey {
                position: g.apply(p.position),
                velocity: g.apply(p.velocity),
            }),
            time_step: self.time_step,
        }
    }
}

#[inline]
fn norm(v: Vec2) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

#[inline]
fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn clamp_norm(v: Vec2, max: f64) -> Vec2 {
    let n = norm(v);
    if n > max {
        let k = max / n;
        [v[0] * k, v[1] * k]
    } else {
        v
    }
}

fn unit_or_zero(v: Vec2) -> Vec2 {
    let n = norm(v);
    if n > 1e-12 {
        [v[0] / n, v[1] / n]
    } else {
        [0.0, 0.0]
    }
}

/// Periodic wrap into `[-half, half)`.
fn wrap(x: f64, size: f64) -> f64 {
    let half = 0.5 * size;
    x - size * ((x + half) / size).floor()
}

/// Minimum-image displacement `b - a` in the periodic box.
pub fn min_image(a: Vec2, b: Vec2, size: f64) -> Vec2 {
    [wrap(b[0] - a[0], size), wrap(b[1] - a[1], size)]
}

/// The action the dynamics actually apply: accelerations are norm-capped,
/// Vicsek directions normalized (zero keeps the current heading).
pub fn effective_action(spec: &EnvSpec, a: Vec2) -> Vec2 {
    match spec.kind {
        EnvKind::Vicsek => unit_or_zero(a),
        _ => clamp_norm(a, spec.max_accel),
    }
}

pub fn reset(spec: &EnvSpec, seed: u64) -> EnvState {
    reset_with(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Agents uniform in the arena at rest; Vicsek headings uniform on the circle.
pub fn reset_with<R: Rng>(spec: &EnvSpec, rng: &mut R) -> EnvState {
    let h = spec.half();
    let point = |rng: &mut R| [rng.random_range(-h..h), rng.random_range(-h..h)];
    let n = spec.n_agents;
    let positions: Vec<Vec2> = (0..n).map(|_| point(rng)).collect();
    let (velocities, headings) = if spec.kind == EnvKind::Vicsek {
        let headings: Vec<Vec2> = (0..n)
            .map(|_| {
                let th = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                [th.cos(), th.sin()]
            })
            .collect();
        let v = headings
            .iter()
            .map(|d| [spec.vicsek_speed * d[0], spec.vicsek_speed * d[1]])
            .collect();
        (v, headings)
    } else {
        (vec![[0.0, 0.0]; n], Vec::new())
    };
    let prey = (spec.kind == EnvKind::Pursuit).then(|| Prey {
        position: point(rng),
        velocity: [0.0, 0.0],
    });
    EnvState {
        positions,
        velocities,
        headings,
        prey,
        time_step: 0,
    }
}

/// Advances one step. Returns the next state and each agent's true reward.
pub fn step(
    spec: &EnvSpec,
    state: &EnvState,
    joint_action: &[Vec2],
) -> Result<(EnvState, Vec<f64>)> {
    if joint_action.len() != spec.n_agents || state.positions.len() != spec.n_agents {
        return Err(Error::Input(format!(
            "expected {} agents, got {} actions for {} agents",
            spec.n_agents,
            joint_action.len(),
            state.positions.len()
        )));
    }
    if joint_action.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Input("non-finite action".into()));
    }
    let next = match spec.kind {
        EnvKind::Rendezvous => {
            let (positions, velocities) = integrate(
                spec,
                &state.positions,
                &state.velocities,
                joint_action,
                spec.max_accel,
                spec.max_speed,
            );
            EnvState {
                positions,
                velocities,
                headings: Vec::new(),
                prey: None,
                time_step: state.time_step + 1,
            }
        }
        EnvKind::Pursuit => {
            let prey = state
                .prey
                .as_ref()
                .ok_or_else(|| Error::Input("pursuit state without prey".into()))?;
            let prey_a = prey_policy(spec, state);
            let (positions, velocities) = integrate(
                spec,
                &state.positions,
                &state.velocities,
                joint_action,
                spec.max_accel,
                spec.max_speed,
            );
            let r = spec.prey_speed_ratio;
            let (pp, pv) = integrate(
                spec,
                &[prey.position],
                &[prey.velocity],
                &[prey_a],
                r * spec.max_accel,
                r * spec.max_speed,
            );
            EnvState {
                positions,
                velocities,
                headings: Vec::new(),
                prey: Some(Prey {
                    position: pp[0],
                    velocity: pv[0],
                }),
                time_step: state.time_step + 1,
            }
        }
        EnvKind::Vicsek => {
            let mut headings = state.headings.clone();
            for (h, a) in headings.iter_mut().zip(joint_action) {
                let u = unit_or_zero(*a);
                if u != [0.0, 0.0] {
                    *h = u;
                }
            }
            let s = spec.vicsek_speed;
            let velocities: Vec<Vec2> = headings.iter().map(|h| [s * h[0], s * h[1]]).collect();
            let positions = state
                .positions
                .iter()
                .zip(&velocities)
                .map(|(p, v)| {
                    [
                        wrap(p[0] + v[0] * spec.dt, spec.arena_size),
                        wrap(p[1] + v[1] * spec.dt, spec.arena_size),
                    ]
                })
                .collect();
            EnvState {
                positions,
                velocities,
                headings,
                prey: None,
                time_step: state.time_step + 1,
            }
        }
    };
    let r = true_reward(spec, &next);
    Ok((next, vec![r; spec.n_agents]))
}

/// Explicit double integrator with caps and wall clamping.
fn integrate(
    spec: &EnvSpec,
    positions: &[Vec2],
    velocities: &[Vec2],
    accels: &[Vec2],
    max_accel: f64,
    max_speed: f64,
) -> (Vec<Vec2>, Vec<Vec2>) {
    let h = spec.half();
    let mut ps = Vec::with_capacity(positions.len());
    let mut vs = Vec::with_capacity(positions.len());
    for ((p, v), a) in positions.iter().zip(velocities).zip(accels) {
        let a = clamp_norm(*a, max_accel);
        let mut p2 = [p[0] + v[0] * spec.dt, p[1] + v[1] * spec.dt];
        let mut v2 = clamp_norm([v[0] + a[0] * spec.dt, v[1] + a[1] * spec.dt], max_speed);
        for k in 0..2 {
            if p2[k] > h {
                p2[k] = h;
                v2[k] = v2[k].min(0.0);
            } else if p2[k] < -h {
                p2[k] = -h;
                v2[k] = v2[k].max(0.0);
            }
        }
        ps.push(p2);
        vs.push(v2);
    }
    (ps, vs)
}

/// Shared per-step reward of a state: Rendezvous `-mean pairwise distance`,
/// Pursuit `-mean predator-prey distance`, Vicsek order parameter.
pub fn true_reward(spec: &EnvSpec, state: &EnvState) -> f64 {
    match spec.kind {
        EnvKind::Rendezvous => {
            let n = state.positions.len();
            if n < 2 {
                return 0.0;
            }
            let mut sum = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    sum += norm(sub(state.positions[i], state.positions[j]));
                }
            }
            -sum / (n * (n - 1) / 2) as f64
        }
        EnvKind::Pursuit => {
            let q = state
                .prey
                .as_ref()
                .map(|p| p.position)
                .unwrap_or([0.0, 0.0]);
            let sum: f64 = state.positions.iter().map(|p| norm(sub(*p, q))).sum();
            -sum / state.positions.len() as f64
        }
        EnvKind::Vicsek => order_parameter(state),
    }
}

/// `‖(1/N) Σ ĥ_i‖` over unit headings (normalized velocities if no headings).
pub fn order_parameter(state: &EnvState) -> f64 {
    let dirs: Vec<Vec2> = if state.headings.is_empty() {
        state.velocities.iter().map(|v| unit_or_zero(*v)).collect()
    } else {
        state.headings.clone()
    };
    if dirs.is_empty() {
        return 0.0;
    }
    let n = dirs.len() as f64;
    let s = dirs
        .iter()
        .fold([0.0, 0.0], |acc, d| [acc[0] + d[0], acc[1] + d[1]]);
    norm([s[0] / n, s[1] / n])
}

/// Prey decision together with whether the away-from-nearest fallback fired.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreyDecision {
    pub accel: Vec2,
    pub fallback: bool,
}

/// Voronoi evasion: accelerate toward the centroid of the prey's cell in the
/// arena partition induced by prey and predators. When the centroid coincides
/// with the prey, flee the nearest predator(s), summing over exact ties.
pub fn prey_decision(spec: &EnvSpec, state: &EnvState) -> PreyDecision {
    let accel_cap = spec.prey_speed_ratio * spec.max_accel;
    let Some(prey) = &state.prey else {
        return PreyDecision {
            accel: [0.0, 0.0],
            fallback: false,
        };
    };
    let q = prey.position;
    let cell = bounded_cell(q, &state.positions, spec.half());
    let tol = 1e-9 * spec.arena_size;
    if let Some(c) = centroid(&cell) {
        let d = sub(c, q);
        if norm(d) > tol {
            let u = unit_or_zero(d);
            return PreyDecision {
                accel: [accel_cap * u[0], accel_cap * u[1]],
                fallback: false,
            };
        }
    }
    let dists: Vec<f64> = state.positions.iter().map(|p| norm(sub(q, *p))).collect();
    let dmin = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let mut away = [0.0, 0.0];
    for (p, &d) in state.positions.iter().zip(&dists) {
        if d <= dmin * (1.0 + 1e-9) && d > 0.0 {
            let u = unit_or_zero(sub(q, *p));
            away = [away[0] + u[0], away[1] + u[1]];
        }
    }
    let u = unit_or_zero(away);
    PreyDecision {
        accel: [accel_cap * u[0], accel_cap * u[1]],
        fallback: true,
    }
}

pub fn prey_policy(spec: &EnvSpec, state: &EnvState) -> Vec2 {
    prey_decision(spec, state).accel
}

/// Scripted demonstrator for each task.
///
/// * Vicsek: mean unit heading of neighbours within the radius (self
///   included, periodic distances), rotated by uniform noise in `±η/2`.
/// * Rendezvous: `k_p (centroid - p_i) - k_d v_i`, capped.
/// * Pursuit: full-thrust pure pursuit plus a tangential term that spreads
///   predators around the prey.
pub fn scripted_expert<R: Rng>(spec: &EnvSpec, state: &EnvState, rng: &mut R) -> Vec<Vec2> {
    let n = spec.n_agents;
    match spec.kind {
        EnvKind::Vicsek => (0..n)
            .map(|i| {
                let mut m = [0.0, 0.0];
                for j in 0..n {
                    let d = min_image(state.positions[i], state.positions[j], spec.arena_size);
                    if norm(d) <= spec.vicsek_radius {
                        m = [m[0] + state.headings[j][0], m[1] + state.headings[j][1]];
                    }
                }
                let mut u = unit_or_zero(m);
                if u == [0.0, 0.0] {
                    u = state.headings[i];
                }
                if spec.vicsek_noise > 0.0 {
                    let half = 0.5 * spec.vicsek_noise;
                    let th: f64 = rng.random_range(-half..half);
                    let (c, s) = (th.cos(), th.sin());
                    u = [c * u[0] - s * u[1], s * u[0] + c * u[1]];
                }
                u
            })
            .collect(),
        EnvKind::Rendezvous => {
            let c = mean_point(&state.positions);
            (0..n)
                .map(|i| {
                    let p = state.positions[i];
                    let v = state.velocities[i];
                    let a = [
                        spec.expert_gain * (c[0] - p[0]) - spec.expert_damping * v[0],
                        spec.expert_gain * (c[1] - p[1]) - spec.expert_damping * v[1],
                    ];
                    clamp_norm(a, spec.max_accel)
                })
                .collect()
        }
        EnvKind::Pursuit => {
            let q = state
                .prey
                .as_ref()
                .map(|p| p.position)
                .unwrap_or([0.0, 0.0]);
            (0..n)
                .map(|i| {
                    let p = state.positions[i];
                    let dir = unit_or_zero(sub(q, p));
                    let mut rep = [0.0, 0.0];
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let d = sub(p, state.positions[j]);
                        let d2 = (d[0] * d[0] + d[1] * d[1]).max(1e-6);
                        rep = [rep[0] + d[0] / d2, rep[1] + d[1] / d2];
                    }
                    let along = rep[0] * dir[0] + rep[1] * dir[1];
                    let tang = [rep[0] - along * dir[0], rep[1] - along * dir[1]];
                    let k = spec.pursuit_spread;
                    let a = [
                        spec.max_accel * dir[0] + k * tang[0],
                        spec.max_accel * dir[1] + k * tang[1],
                    ];
                    clamp_norm(a, spec.max_accel)
                })
                .collect()
        }
    }
}

fn mean_point(ps: &[Vec2]) -> Vec2 {
    let n = ps.len().max(1) as f64;
    let s = ps
        .iter()
        .fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
    [s[0] / n, s[1] / n]
}

/// Agent-centric view of the global state, built only from equivariant 2D
/// blocks, so `observe(L_g s, i) = g · observe(s, i)` blockwise. Other agents
/// appear in cyclic index order starting after `agent`.
///
/// * Rendezvous: own position, own velocity, then per other agent the
///   relative position and its velocity.
/// * Pursuit: as Rendezvous, followed by the prey's relative position and
///   velocity.
/// * Vicsek: own heading, then per other agent the minimum-image relative
///   position and its heading.
pub fn observe(spec: &EnvSpec, state: &EnvState, agent: usize) -> Vec<f64> {
    let n = spec.n_agents;
    let mut out = Vec::with_capacity(spec.obs_dim());
    let me = state.positions[agent];
    match spec.kind {
        EnvKind::Rendezvous | EnvKind::Pursuit => {
            out.extend_from_slice(&me);
            out.extend_from_slice(&state.velocities[agent]);
            for k in 1..n {
                let j = (agent + k) % n;
                out.extend_from_slice(&sub(state.positions[j], me));
                out.extend_from_slice(&state.velocities[j]);
            }
            if let Some(prey) = &state.prey {
                out.extend_from_slice(&sub(prey.position, me));
                out.extend_from_slice(&prey.velocity);
            }
        }
        EnvKind::Vicsek => {
            out.extend_from_slice(&state.headings[agent]);
            for k in 1..n {
                let j = (agent + k) % n;
                out.extend_from_slice(&min_image(me, state.positions[j], spec.arena_size));
                out.extend_from_slice(&state.headings[j]);
            }
        }
    }
    out
}

/// Episode roll-out of the scripted expert. Returns visited states (length
/// `steps + 1`), the effective joint actions, and per-step mean true reward.
pub fn expert_rollout<R: Rng>(
    spec: &EnvSpec,
    start: EnvState,
    steps: usize,
    rng: &mut R,
) -> Result<(Vec<EnvState>, Vec<Vec<Vec2>>, Vec<f64>)> {
    let mut states = vec![start];
    let mut actions = Vec::with_capacity(steps);
    let mut rewards = Vec::with_capacity(steps);
    for _ in 0..steps {
        let s = states.last().expect("nonempty");
        let a: Vec<Vec2> = scripted_expert(spec, s, rng)
            .into_iter()
            .map(|a| effective_action(spec, a))
            .collect();
        let (next, r) = step(spec, s, &a)?;
        rewards.push(r.iter().sum::<f64>() / r.len() as f64);
        actions.push(a);
        states.push(next);
    }
    Ok((states, actions, rewards))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::dihedral_elements;

    fn random_state<R: Rng>(spec: &EnvSpec, rng: &mut R) -> EnvState {
        let mut s = reset_with(spec, rng);
        for v in s.velocities.iter_mut() {
            if spec.kind != EnvKind::Vicsek {
                *v = [rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
            }
        }
        if let Some(p) = s.prey.as_mut() {
            p.velocity = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        }
        s
    }

    #[test]
    fn reset_is_deterministic_and_sized() {
        let spec = EnvSpec::new(EnvKind::Vicsek, 10);
        assert_eq!(reset(&spec, 7), reset(&spec, 7));
        assert_ne!(reset(&spec, 7), reset(&spec, 8));
        let s = reset(&spec, 7);
        assert_eq!(s.positions.len(), 10);
        for h in &s.headings {
            assert!((norm(*h) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_action_at_rest_stays_put() {
        for kind in [EnvKind::Rendezvous, EnvKind::Pursuit] {
            let spec = EnvSpec::new(kind, 3);
            let s = reset(&spec, 1);
            let (next, _) = step(&spec, &s, &[[0.0, 0.0]; 3]).unwrap();
            assert_eq!(next.positions, s.positions);
        }
    }

    #[test]
    fn rendezvous_reward_is_zero_when_gathered() {
        let spec = EnvSpec::new(EnvKind::Rendezvous, 4);
        let mut s = reset(&spec, 2);
        s.positions = vec![[0.3, -0.1]; 4];
        let (_, r) = step(&spec, &s, &[[0.0, 0.0]; 4]).unwrap();
        assert!(r.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn nan_action_is_rejected() {
        let spec = EnvSpec::new(EnvKind::Rendezvous, 2);
        let s = reset(&spec, 0);
        let err = step(&spec, &s, &[[f64::NAN, 0.0], [0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn dynamics_commute_with_d4() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in EnvKind::ALL {
            let spec = EnvSpec::new(kind, 4);
            for _ in 0..50 {
                let s = random_state(&spec, &mut rng);
                let a: Vec<Vec2> = (0..4)
                    .map(|_| [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)])
                    .collect();
                let (next, r) = step(&spec, &s, &a).unwrap();
                for g in dihedral_elements(4) {
                    let ga: Vec<Vec2> = a.iter().map(|x| g.apply(*x)).collect();
                    let (gnext, gr) = step(&spec, &s.transformed(&g), &ga).unwrap();
                    let want = next.transformed(&g).to_structured();
                    let got = gnext.to_structured();
                    for (x, y) in want.equ.iter().zip(&got.equ) {
                        assert!((x - y).abs() <= 1e-9, "{kind} {g}: {x} vs {y}");
                    }
                    assert_eq!(r, gr, "{kind} {g}");
                }
            }
        }
    }

    #[test]
    fn order_parameter_extremes() {
        let spec = EnvSpec::new(EnvKind::Vicsek, 2);
        let mut s = reset(&spec, 0);
        s.headings = vec![[0.6, 0.8], [0.6, 0.8]];
        assert!((order_parameter(&s) - 1.0).abs() < 1e-15);
        s.headings = vec![[0.6, 0.8], [-0.6, -0.8]];
        assert!(order_parameter(&s).abs() < 1e-15);
    }

    #[test]
    fn single_predator_prey_flees_along_the_axis() {
        let spec = EnvSpec::new(EnvKind::Pursuit, 1);
        let mut s = reset(&spec, 0);
        s.prey = Some(Prey {
            position: [0.0, 0.0],
            velocity: [0.0, 0.0],
        });
        s.positions = vec![[0.8, 0.0]];
        let d = prey_decision(&spec, &s);
        assert!(!d.fallback);
        let u = unit_or_zero(d.accel);
        assert!((u[0] + 1.0).abs() < 1e-12 && u[1].abs() < 1e-12, "{u:?}");
        assert!((norm(d.accel) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn symmetric_predators_trigger_the_fallback() {
        let spec = EnvSpec::new(EnvKind::Pursuit, 4);
        let mut s = reset(&spec, 0);
        s.prey = Some(Prey {
            position: [0.0, 0.0],
            velocity: [0.0, 0.0],
        });
        s.positions = vec![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        let d = prey_decision(&spec, &s);
        assert!(d.fallback);
        assert_eq!(d.accel, [0.0, 0.0]);
    }

    #[test]
    fn prey_policy_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = EnvSpec::new(EnvKind::Pursuit, 3);
        for _ in 0..100 {
            let s = random_state(&spec, &mut rng);
            let a = prey_policy(&spec, &s);
            for g in dihedral_elements(4) {
                let ga = prey_policy(&spec, &s.transformed(&g));
                let want = g.apply(a);
                assert!((ga[0] - want[0]).abs() < 1e-9 && (ga[1] - want[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn expert_fixed_points() {
        let spec = EnvSpec {
            vicsek_noise: 0.0,
            ..EnvSpec::new(EnvKind::Vicsek, 3)
        };
        let mut s = reset(&spec, 5);
        s.headings = vec![[0.0, 1.0]; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for a in scripted_expert(&spec, &s, &mut rng) {
            assert!((a[0]).abs() < 1e-15 && (a[1] - 1.0).abs() < 1e-15);
        }

        let spec = EnvSpec::new(EnvKind::Rendezvous, 3);
        let mut s = reset(&spec, 5);
        s.positions = vec![[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]];
        let a = scripted_expert(&spec, &s, &mut rng);
        assert_eq!(a[2], [0.0, 0.0]);
    }

    #[test]
    fn vicsek_positions_stay_in_the_box() {
        let spec = EnvSpec::new(EnvKind::Vicsek, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (states, _, _) = expert_rollout(&spec, reset(&spec, 9), 300, &mut rng).unwrap();
        let h = spec.half();
        for s in &states {
            for p in &s.positions {
                assert!(p[0] >= -h && p[0] < h && p[1] >= -h && p[1] < h);
            }
        }
    }

    #[test]
    fn speeds_never_grow_without_actions() {
        for kind in [EnvKind::Rendezvous, EnvKind::Pursuit] {
            let spec = EnvSpec::new(kind, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut s = random_state(&spec, &mut rng);
            for _ in 0..100 {
                let (next, _) = step(&spec, &s, &[[0.0, 0.0]; 3]).unwrap();
                for (v0, v1) in s.velocities.iter().zip(&next.velocities) {
                    assert!(norm(*v1) <= norm(*v0) + 1e-15);
                }
                s = next;
            }
        }
    }

    #[test]
    fn observation_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in EnvKind::ALL {
            let spec = EnvSpec::new(kind, 3);
            let s = random_state(&spec, &mut rng);
            for g in dihedral_elements(4) {
                for i in 0..3 {
                    let o = observe(&spec, &s, i);
                    assert_eq!(o.len(), spec.obs_dim());
                    let go = observe(&spec, &s.transformed(&g), i);
                    let want = g.apply_pairs(&o).unwrap();
                    for (x, y) in want.iter().zip(&go) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn structured_round_trip_and_blocks() {
        for kind in EnvKind::ALL {
            let spec = EnvSpec::new(kind, 3);
            let s = reset(&spec, 11);
            let sv = s.to_structured();
            assert_eq!(sv.equ.len(), spec.state_equ_len());
            let covered: usize = spec.feature_blocks().iter().map(|b| b.len).sum();
            assert_eq!(covered, sv.len());
            assert_eq!(EnvState::from_structured(&spec, &sv, 0).unwrap(), s);
        }
    }

    #[test]
    fn fingerprint_tracks_fields() {
        let a = EnvSpec::new(EnvKind::Vicsek, 5);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.dt = 0.05;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn reset_positions_pass_a_chi_square_test() {
        // 10 bins per axis, 9 dof; the 0.01 critical value is 21.67
        let spec = EnvSpec::new(EnvKind::Rendezvous, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut bins = [[0usize; 10]; 2];
        let n = 10_000;
        for _ in 0..n {
            let p = reset_with(&spec, &mut rng).positions[0];
            for k in 0..2 {
                let b = ((p[k] + spec.half()) / spec.arena_size * 10.0) as usize;
                bins[k][b.min(9)] += 1;
            }
        }
        for axis in bins {
            let e = n as f64 / 10.0;
            let chi2: f64 = axis.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
            assert!(chi2 < 21.67, "chi2 = {chi2}");
        }
    }

    #[test]
    fn random_headings_order_parameter_matches_random_walk() {
        let spec = EnvSpec::new(EnvKind::Vicsek, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 100_000;
        let mean: f64 = (0..draws)
            .map(|_| order_parameter(&reset_with(&spec, &mut rng)))
            .sum::<f64>()
            / draws as f64;
        let want = std::f64::consts::PI.sqrt() / (2.0 * 10f64.sqrt());
        assert!((mean - want).abs() <= 0.05 * want, "{mean} vs {want}");
    }

    #[test]
    fn vicsek_expert_aligns_the_swarm() {
        let spec = EnvSpec::new(EnvKind::Vicsek, 10);
        let mut total = 0.0;
        let runs = 20;
        for seed in 0..runs {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (states, _, _) = expert_rollout(&spec, reset(&spec, seed), 200, &mut rng).unwrap();
            total += order_parameter(states.last().unwrap());
        }
        let mean = total / runs as f64;
        assert!(mean >= 0.9, "mean final order parameter {mean}");
    }
}
