//! Finite Markov games without reward, their feasible reward sets, and the
//! error-propagation bounds between true and empirically estimated problems.
//!
//! Tables over `(state, joint action)` are flat `Vec<f64>` indexed
//! `s * n_joint + a`. Joint actions use a mixed-radix code with agent 0 as the
//! least significant digit: `a = a_0 + c_0 * (a_1 + c_1 * (a_2 + ...))`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::group::{dihedral_elements, GroupElement};

const ROW_TOL: f64 = 1e-12;

/// Residual target for iterative policy evaluation.
pub const EVAL_TOL: f64 = 1e-12;
pub const EVAL_MAX_ITERS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMG {
    n_states: usize,
    action_counts: Vec<usize>,
    n_joint: usize,
    transition: Vec<f64>,
    gamma: f64,
}

impl TabularMG {
    /// `transition` is dense `P[s][joint_a][s']`.
    pub fn new(
        n_states: usize,
        action_counts: Vec<usize>,
        transition: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || action_counts.is_empty() || action_counts.contains(&0) {
            return Err(Error::Shape("empty state or action space".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Domain(format!("discount {gamma} outside [0, 1)")));
        }
        let n_joint: usize = action_counts.iter().product();
        if transition.len() != n_states * n_joint * n_states {
            return Err(Error::Shape(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n_states * n_joint * n_states
            )));
        }
        for (k, row) in transition.chunks_exact(n_states).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::Domain(format!(
                    "negative or NaN probability in row {k}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::Domain(format!("row {k} sums to {sum}")));
            }
        }
        Ok(Self {
            n_states,
            action_counts,
            n_joint,
            transition,
            gamma,
        })
    }

    /// Random game: each row mixes a few random successors.
    pub fn random<R: Rng>(
        n_states: usize,
        action_counts: Vec<usize>,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n_joint: usize = action_counts.iter().product();
        let mut transition = Vec::with_capacity(n_states * n_joint * n_states);
        for _ in 0..n_states * n_joint {
            let mut row: Vec<f64> = (0..n_states)
                .map(|_| {
                    if rng.random::<f64>() < 0.3 {
                        0.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            if row.iter().all(|&p| p == 0.0) {
                row[rng.random_range(0..n_states)] = 1.0;
            }
            normalize(&mut row);
            transition.extend(row);
        }
        Self::new(n_states, action_counts, transition, gamma)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn n_joint(&self) -> usize {
        self.n_joint
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_joint + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.row(s, a)[s_next]
    }

    pub fn encode_joint(&self, actions: &[usize]) -> usize {
        encode_joint(&self.action_counts, actions)
    }

    pub fn decode_joint(&self, a: usize) -> Vec<usize> {
        decode_joint(&self.action_counts, a)
    }

    fn table_len(&self) -> usize {
        self.n_states * self.n_joint
    }

    fn check_table(&self, t: &[f64], what: &str) -> Result<()> {
        if t.len() != self.table_len() {
            return Err(Error::Shape(format!(
                "{what} has {} entries, expected {}",
                t.len(),
                self.table_len()
            )));
        }
        Ok(())
    }
}

pub fn encode_joint(counts: &[usize], actions: &[usize]) -> usize {
    let mut code = 0;
    for (&c, &a) in counts.iter().zip(actions).rev() {
        code = code * c + a;
    }
    code
}

pub fn decode_joint(counts: &[usize], mut code: usize) -> Vec<usize> {
    counts
        .iter()
        .map(|&c| {
            let a = code % c;
            code /= c;
            a
        })
        .collect()
}

fn normalize(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= sum);
}

/// Product policy: one table `π_i[s][a_i]` per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPolicy {
    n_states: usize,
    action_counts: Vec<usize>,
    tables: Vec<Vec<f64>>,
}

impl JointPolicy {
    pub fn new(n_states: usize, action_counts: Vec<usize>, tables: Vec<Vec<f64>>) -> Result<Self> {
        if tables.len() != action_counts.len() {
            return Err(Error::Shape("one table per agent expected".into()));
        }
        for (i, (t, &c)) in tables.iter().zip(&action_counts).enumerate() {
            if t.len() != n_states * c {
                return Err(Error::Shape(format!(
                    "agent {i} table has {} entries",
                    t.len()
                )));
            }
            for (s, row) in t.chunks_exact(c).enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                    return Err(Error::Domain(format!(
                        "agent {i} policy row {s} is not a distribution"
                    )));
                }
            }
        }
        Ok(Self {
            n_states,
            action_counts,
            tables,
        })
    }

    pub fn uniform(n_states: usize, action_counts: Vec<usize>) -> Self {
        let tables = action_counts
            .iter()
            .map(|&c| vec![1.0 / c as f64; n_states * c])
            .collect();
        Self {
            n_states,
            action_counts,
            tables,
        }
    }

    /// Random policy; roughly `zero_frac` of entries are exactly zero, each
    /// row keeps at least one positive entry.
    pub fn random<R: Rng>(
        n_states: usize,
        action_counts: Vec<usize>,
        zero_frac: f64,
        rng: &mut R,
    ) -> Self {
        let tables = action_counts
            .iter()
            .map(|&c| {
                let mut t = Vec::with_capacity(n_states * c);
                for _ in 0..n_states {
                    let mut row: Vec<f64> = (0..c)
                        .map(|_| {
                            if rng.random::<f64>() < zero_frac {
                                0.0
                            } else {
                                0.05 + rng.random::<f64>()
                            }
                        })
                        .collect();
                    if row.iter().all(|&p| p == 0.0) {
                        row[rng.random_range(0..c)] = 1.0;
                    }
                    normalize(&mut row);
                    t.extend(row);
                }
                t
            })
            .collect();
        Self {
            n_states,
            action_counts,
            tables,
        }
    }

    /// Deterministic product policy from one action index per (agent, state).
    pub fn deterministic(
        n_states: usize,
        action_counts: Vec<usize>,
        choice: &[Vec<usize>],
    ) -> Result<Self> {
        let tables = action_counts
            .iter()
            .zip(choice)
            .map(|(&c, ch)| {
                let mut t = vec![0.0; n_states * c];
                for (s, &a) in ch.iter().enumerate() {
                    t[s * c + a] = 1.0;
                }
                t
            })
            .collect();
        Self::new(n_states, action_counts, tables)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn agent_prob(&self, agent: usize, s: usize, a_i: usize) -> f64 {
        self.tables[agent][s * self.action_counts[agent] + a_i]
    }

    pub fn tables(&self) -> &[Vec<f64>] {
        &self.tables
    }

    /// `π(a|s) = Π_i π_i(a_i|s)`.
    pub fn joint_prob(&self, s: usize, a: usize) -> f64 {
        let mut code = a;
        let mut p = 1.0;
        for (i, &c) in self.action_counts.iter().enumerate() {
            p *= self.tables[i][s * c + code % c];
            code /= c;
        }
        p
    }

    pub fn joint_table(&self) -> Vec<f64> {
        let n_joint: usize = self.action_counts.iter().product();
        let mut out = Vec::with_capacity(self.n_states * n_joint);
        for s in 0..self.n_states {
            for a in 0..n_joint {
                out.push(self.joint_prob(s, a));
            }
        }
        out
    }

    fn check_against(&self, mg: &TabularMG) -> Result<()> {
        if self.n_states != mg.n_states || self.action_counts != mg.action_counts {
            return Err(Error::Shape(
                "policy does not match the game's spaces".into(),
            ));
        }
        Ok(())
    }
}

/// `Q^π` and `V^π` of a policy.
#[derive(Clone, Debug)]
pub struct ValueTables {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn policy_evaluation(mg: &TabularMG, reward: &[f64], pi: &JointPolicy) -> Result<ValueTables> {
    pi.check_against(mg)?;
    evaluate_joint_table(mg, reward, &pi.joint_table(), EVAL_TOL, EVAL_MAX_ITERS)
}

/// Iterates `Q ← r + γ P (π · Q)` until the sup-norm Bellman residual drops
/// below `tol`. `joint_pi` is any (not necessarily product) table over
/// `(s, joint_a)`.
pub fn evaluate_joint_table(
    mg: &TabularMG,
    reward: &[f64],
    joint_pi: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<ValueTables> {
    mg.check_table(reward, "reward")?;
    mg.check_table(joint_pi, "policy table")?;
    if reward.iter().any(|r| !r.is_finite()) {
        return Err(Error::Input("reward must be finite".into()));
    }
    let (ns, na) = (mg.n_states, mg.n_joint);
    let mut q = reward.to_vec();
    let mut v = vec![0.0; ns];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        state_values(&q, joint_pi, na, &mut v);
        residual = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let k = s * na + a;
                let next: f64 = mg.row(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
                let updated = reward[k] + mg.gamma * next;
                residual = f64::max(residual, (updated - q[k]).abs());
                q[k] = updated;
            }
        }
        if residual <= tol {
            state_values(&q, joint_pi, na, &mut v);
            return Ok(ValueTables { q, v });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        residual,
    })
}

fn state_values(q: &[f64], joint_pi: &[f64], na: usize, v: &mut [f64]) {
    for (s, vs) in v.iter_mut().enumerate() {
        *vs = (0..na).map(|a| joint_pi[s * na + a] * q[s * na + a]).sum();
    }
}

/// Checks the optimality conditions of `π_E` under `reward`: `Q - V = 0`
/// where `π_E(a|s) > 0` and `Q - V <= 0` elsewhere, both up to `tol`.
pub fn is_optimal(mg: &TabularMG, reward: &[f64], pi_e: &JointPolicy, tol: f64) -> Result<bool> {
    let vt = policy_evaluation(mg, reward, pi_e)?;
    let na = mg.n_joint;
    for s in 0..mg.n_states {
        for a in 0..na {
            let gap = vt.q[s * na + a] - vt.v[s];
            let ok = if pi_e.joint_prob(s, a) > 0.0 {
                gap.abs() <= tol
            } else {
                gap <= tol
            };
            if !ok {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// The pair `(ζ, V)` parameterizing a feasible reward.
#[derive(Clone, Debug, PartialEq)]
pub struct FeasibleRewardParams {
    /// Nonnegative table over `(s, joint_a)`.
    pub zeta: Vec<f64>,
    /// Table over `s`.
    pub value: Vec<f64>,
}

impl FeasibleRewardParams {
    pub fn zeros(mg: &TabularMG) -> Self {
        Self {
            zeta: vec![0.0; mg.table_len()],
            value: vec![0.0; mg.n_states],
        }
    }

    /// `ζ ~ U[0, zeta_max)`, `V ~ U[-v_max, v_max)`.
    pub fn random<R: Rng>(mg: &TabularMG, zeta_max: f64, v_max: f64, rng: &mut R) -> Self {
        Self {
            zeta: (0..mg.table_len())
                .map(|_| zeta_max * rng.random::<f64>())
                .collect(),
            value: (0..mg.n_states)
                .map(|_| v_max * (2.0 * rng.random::<f64>() - 1.0))
                .collect(),
        }
    }

    fn validate(&self, n_states: usize, n_joint: usize) -> Result<()> {
        if self.zeta.len() != n_states * n_joint || self.value.len() != n_states {
            return Err(Error::Shape(
                "feasible-reward parameters have the wrong size".into(),
            ));
        }
        if let Some(z) = self.zeta.iter().find(|&&z| !(z >= 0.0)) {
            return Err(Error::Domain(format!(
                "zeta must be nonnegative, found {z}"
            )));
        }
        Ok(())
    }
}

/// `Σ_{s'} P(s'|s,a) V(s')` for every `(s, a)`.
fn expected_next_value(mg: &TabularMG, value: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(mg.table_len());
    for s in 0..mg.n_states {
        for a in 0..mg.n_joint {
            out.push(mg.row(s, a).iter().zip(value).map(|(p, v)| p * v).sum());
        }
    }
    out
}

/// `r(s,a) = -ζ(s,a)·1{π_E(a|s)=0} + V(s) - γ Σ_{s'} P(s'|s,a) V(s')`.
///
/// The indicator is an exact-zero test on the supplied expert table.
pub fn build_feasible_reward(
    mg: &TabularMG,
    pi_e: &JointPolicy,
    params: &FeasibleRewardParams,
) -> Result<Vec<f64>> {
    pi_e.check_against(mg)?;
    params.validate(mg.n_states, mg.n_joint)?;
    let ev = expected_next_value(mg, &params.value);
    let na = mg.n_joint;
    let mut r = Vec::with_capacity(mg.table_len());
    for s in 0..mg.n_states {
        for a in 0..na {
            let k = s * na + a;
            let penalty = if pi_e.joint_prob(s, a) == 0.0 {
                params.zeta[k]
            } else {
                0.0
            };
            r.push(-penalty + params.value[s] - mg.gamma * ev[k]);
        }
    }
    Ok(r)
}

/// Inverse of [`build_feasible_reward`] for a reward under which `π_E` is
/// optimal: `V = V^{π_E}` and `ζ = V^{π_E} - Q^{π_E}` off the expert support.
/// Off-support gaps within `tol` of zero are clamped to zero.
pub fn recover_feasible_params(
    mg: &TabularMG,
    reward: &[f64],
    pi_e: &JointPolicy,
    tol: f64,
) -> Result<FeasibleRewardParams> {
    let vt = policy_evaluation(mg, reward, pi_e)?;
    let na = mg.n_joint;
    let mut zeta = vec![0.0; mg.table_len()];
    for s in 0..mg.n_states {
        for a in 0..na {
            let k = s * na + a;
            let gap = vt.v[s] - vt.q[k];
            if pi_e.joint_prob(s, a) > 0.0 {
                if gap.abs() > tol {
                    return Err(Error::Domain(format!(
                        "expert action {a} at state {s} is not greedy (gap {gap:e})"
                    )));
                }
            } else if gap < -tol {
                return Err(Error::Domain(format!(
                    "action {a} at state {s} improves on the expert by {:e}",
                    -gap
                )));
            } else {
                zeta[k] = gap.max(0.0);
            }
        }
    }
    Ok(FeasibleRewardParams { zeta, value: vt.v })
}

/// Transition tuples `(s, joint_a, s')` as index triples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DemoDataset {
    pub n_states: usize,
    pub n_joint: usize,
    pub tuples: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct DemoCounts {
    pub n_s: Vec<usize>,
    pub n_sa: Vec<usize>,
    pub n_sas: Vec<usize>,
}

impl DemoDataset {
    pub fn new(
        n_states: usize,
        n_joint: usize,
        tuples: Vec<(usize, usize, usize)>,
    ) -> Result<Self> {
        if let Some(t) = tuples
            .iter()
            .find(|&&(s, a, s2)| s >= n_states || s2 >= n_states || a >= n_joint)
        {
            return Err(Error::Shape(format!("tuple {t:?} is out of range")));
        }
        Ok(Self {
            n_states,
            n_joint,
            tuples,
        })
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn counts(&self) -> DemoCounts {
        let (ns, na) = (self.n_states, self.n_joint);
        let mut c = DemoCounts {
            n_s: vec![0; ns],
            n_sa: vec![0; ns * na],
            n_sas: vec![0; ns * na * ns],
        };
        for &(s, a, s2) in &self.tuples {
            c.n_s[s] += 1;
            c.n_sa[s * na + a] += 1;
            c.n_sas[(s * na + a) * ns + s2] += 1;
        }
        c
    }
}

/// `(P̂, π̂)` estimated from counts. Rows of unvisited `(s, a)` are undefined.
#[derive(Clone, Debug)]
pub struct EmpiricalModel {
    n_states: usize,
    n_joint: usize,
    p_hat: Vec<f64>,
    visits: Vec<usize>,
    pi_hat: Vec<f64>,
}

impl EmpiricalModel {
    pub fn p_row(&self, s: usize, a: usize) -> Option<&[f64]> {
        let k = s * self.n_joint + a;
        if self.visits[k] == 0 {
            None
        } else {
            Some(&self.p_hat[k * self.n_states..(k + 1) * self.n_states])
        }
    }

    pub fn visits(&self, s: usize, a: usize) -> usize {
        self.visits[s * self.n_joint + a]
    }

    /// Joint empirical expert policy `π̂(a|s)`; zero on unvisited states.
    pub fn pi_hat(&self) -> &[f64] {
        &self.pi_hat
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_joint(&self) -> usize {
        self.n_joint
    }
}

pub fn estimate_empirical(demos: &DemoDataset) -> Result<EmpiricalModel> {
    if demos.is_empty() {
        return Err(Error::Estimation(
            "cannot estimate a model from zero tuples".into(),
        ));
    }
    let (ns, na) = (demos.n_states, demos.n_joint);
    let c = demos.counts();
    let mut p_hat = vec![0.0; ns * na * ns];
    let mut pi_hat = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let k = s * na + a;
            if c.n_sa[k] > 0 {
                for s2 in 0..ns {
                    p_hat[k * ns + s2] = c.n_sas[k * ns + s2] as f64 / c.n_sa[k] as f64;
                }
            }
            if c.n_s[s] > 0 {
                pi_hat[k] = c.n_sa[k] as f64 / c.n_s[s] as f64;
            }
        }
    }
    Ok(EmpiricalModel {
        n_states: ns,
        n_joint: na,
        p_hat,
        visits: c.n_sa,
        pi_hat,
    })
}

/// Sample `m` i.i.d. tuples: `s` uniform, `a ~ π_E(·|s)`, `s' ~ P(·|s,a)`.
pub fn sample_demos<R: Rng>(
    mg: &TabularMG,
    pi_e: &JointPolicy,
    m: usize,
    rng: &mut R,
) -> DemoDataset {
    let mut tuples = Vec::with_capacity(m);
    for _ in 0..m {
        let s = rng.random_range(0..mg.n_states);
        let actions: Vec<usize> = (0..mg.n_agents())
            .map(|i| {
                let c = mg.action_counts[i];
                sample_index(&pi_e.tables[i][s * c..(s + 1) * c], rng)
            })
            .collect();
        let a = mg.encode_joint(&actions);
        let s2 = sample_index(mg.row(s, a), rng);
        tuples.push((s, a, s2));
    }
    DemoDataset {
        n_states: mg.n_states,
        n_joint: mg.n_joint,
        tuples,
    }
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last index with positive mass
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// A finite group acting on a game by permuting states and per-agent actions.
#[derive(Clone, Debug)]
pub struct GroupActionOnMG {
    elements: Vec<GroupElement>,
    state_perm: Vec<Vec<usize>>,
    agent_action_perm: Vec<Vec<Vec<usize>>>,
    action_perm: Vec<Vec<usize>>,
    action_counts: Vec<usize>,
}

impl GroupActionOnMG {
    /// `state_perm[g][s]` and `agent_action_perm[g][agent][a_i]`, one entry per
    /// element of `elements`. Checks bijectivity, identity, and that the maps
    /// compose like the group wherever a product is among `elements`.
    pub fn new(
        elements: Vec<GroupElement>,
        state_perm: Vec<Vec<usize>>,
        agent_action_perm: Vec<Vec<Vec<usize>>>,
        action_counts: Vec<usize>,
    ) -> Result<Self> {
        let k = elements.len();
        if k == 0 || state_perm.len() != k || agent_action_perm.len() != k {
            return Err(Error::Shape(
                "one permutation set per group element expected".into(),
            ));
        }
        let n_states = state_perm[0].len();
        for (g, (sp, ap)) in elements
            .iter()
            .zip(state_perm.iter().zip(&agent_action_perm))
        {
            check_bijection(sp, n_states, &format!("state map of {g}"))?;
            if ap.len() != action_counts.len() {
                return Err(Error::Shape(format!("action maps of {g} miss agents")));
            }
            for (i, (p, &c)) in ap.iter().zip(&action_counts).enumerate() {
                check_bijection(p, c, &format!("agent {i} action map of {g}"))?;
            }
            if g.is_identity() {
                let id_states = sp.iter().enumerate().all(|(i, &j)| i == j);
                let id_actions = ap
                    .iter()
                    .all(|p| p.iter().enumerate().all(|(i, &j)| i == j));
                if !id_states || !id_actions {
                    return Err(Error::Structure(
                        "identity element must act trivially".into(),
                    ));
                }
            }
        }
        for (gi, g) in elements.iter().enumerate() {
            for (hi, h) in elements.iter().enumerate() {
                let gh = g.compose(h)?;
                let Some(ki) = elements.iter().position(|e| *e == gh) else {
                    continue;
                };
                let states_ok =
                    (0..n_states).all(|s| state_perm[ki][s] == state_perm[gi][state_perm[hi][s]]);
                let actions_ok = (0..action_counts.len()).all(|i| {
                    (0..action_counts[i]).all(|a| {
                        agent_action_perm[ki][i][a]
                            == agent_action_perm[gi][i][agent_action_perm[hi][i][a]]
                    })
                });
                if !states_ok || !actions_ok {
                    return Err(Error::Structure(format!(
                        "maps of {g} and {h} do not compose to the map of {gh}"
                    )));
                }
            }
        }
        let action_perm = agent_action_perm
            .iter()
            .map(|ap| {
                let n_joint: usize = action_counts.iter().product();
                (0..n_joint)
                    .map(|a| {
                        let parts: Vec<usize> = decode_joint(&action_counts, a)
                            .iter()
                            .zip(ap)
                            .map(|(&ai, p)| p[ai])
                            .collect();
                        encode_joint(&action_counts, &parts)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            elements,
            state_perm,
            agent_action_perm,
            action_perm,
            action_counts,
        })
    }

    pub fn identity_only(n_states: usize, action_counts: Vec<usize>, order: u32) -> Self {
        let state_perm = vec![(0..n_states).collect()];
        let agent_action_perm = vec![action_counts.iter().map(|&c| (0..c).collect()).collect()];
        Self::new(
            vec![GroupElement::identity(order)],
            state_perm,
            agent_action_perm,
            action_counts,
        )
        .expect("identity action is valid")
    }

    /// Derives the permutations from planar coordinates: state `s` sits at
    /// `state_points[s]` and agent `i`'s action `a_i` is the direction
    /// `action_points[i][a_i]`. Every point set must be closed under the group.
    pub fn from_points(
        elements: Vec<GroupElement>,
        state_points: &[[f64; 2]],
        action_points: &[Vec<[f64; 2]>],
    ) -> Result<Self> {
        let lookup = |pts: &[[f64; 2]], q: [f64; 2]| {
            pts.iter()
                .position(|p| (p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9)
                .ok_or_else(|| Error::Structure(format!("point set not closed: {q:?} missing")))
        };
        let mut state_perm = Vec::new();
        let mut agent_action_perm = Vec::new();
        for g in &elements {
            state_perm.push(
                state_points
                    .iter()
                    .map(|&p| lookup(state_points, g.apply(p)))
                    .collect::<Result<Vec<_>>>()?,
            );
            agent_action_perm.push(
                action_points
                    .iter()
                    .map(|pts| {
                        pts.iter()
                            .map(|&p| lookup(pts, g.apply(p)))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let counts = action_points.iter().map(Vec::len).collect();
        Self::new(elements, state_perm, agent_action_perm, counts)
    }

    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn state(&self, g: usize, s: usize) -> usize {
        self.state_perm[g][s]
    }

    pub fn joint_action(&self, g: usize, a: usize) -> usize {
        self.action_perm[g][a]
    }

    pub fn agent_action(&self, g: usize, agent: usize, a_i: usize) -> usize {
        self.agent_action_perm[g][agent][a_i]
    }

    pub fn n_states(&self) -> usize {
        self.state_perm[0].len()
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    fn check_against(&self, n_states: usize, action_counts: &[usize]) -> Result<()> {
        if self.n_states() != n_states || self.action_counts != action_counts {
            return Err(Error::Shape(
                "group action does not match the game's spaces".into(),
            ));
        }
        Ok(())
    }
}

fn check_bijection(p: &[usize], n: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; n];
    if p.len() != n {
        return Err(Error::Structure(format!(
            "{what} has {} entries, expected {n}",
            p.len()
        )));
    }
    for &j in p {
        if j >= n || seen[j] {
            return Err(Error::Structure(format!("{what} is not a bijection")));
        }
        seen[j] = true;
    }
    Ok(())
}

/// `{(g s, g a, g s') | g ∈ G, (s, a, s') ∈ demos}`, group-major, duplicates kept.
pub fn augment_demos(demos: &DemoDataset, action: &GroupActionOnMG) -> Result<DemoDataset> {
    if action.n_states() != demos.n_states || action.action_perm[0].len() != demos.n_joint {
        return Err(Error::Shape(
            "group action does not match the dataset".into(),
        ));
    }
    let mut tuples = Vec::with_capacity(demos.len() * action.len());
    for g in 0..action.len() {
        for &(s, a, s2) in &demos.tuples {
            tuples.push((
                action.state(g, s),
                action.joint_action(g, a),
                action.state(g, s2),
            ));
        }
    }
    Ok(DemoDataset {
        n_states: demos.n_states,
        n_joint: demos.n_joint,
        tuples,
    })
}

/// Orbit average `P̄(s'|s,a) = 1/|G| Σ_g P(g s' | g s, g a)`.
pub fn symmetrize_transition(mg: &TabularMG, action: &GroupActionOnMG) -> Result<TabularMG> {
    action.check_against(mg.n_states, &mg.action_counts)?;
    let (ns, na) = (mg.n_states, mg.n_joint);
    let k = action.len() as f64;
    let mut t = vec![0.0; ns * na * ns];
    for s in 0..ns {
        for a in 0..na {
            for s2 in 0..ns {
                let sum: f64 = (0..action.len())
                    .map(|g| {
                        mg.p(
                            action.state(g, s),
                            action.joint_action(g, a),
                            action.state(g, s2),
                        )
                    })
                    .sum();
                t[(s * na + a) * ns + s2] = sum / k;
            }
        }
    }
    for row in t.chunks_exact_mut(ns) {
        normalize(row);
    }
    TabularMG::new(ns, mg.action_counts.clone(), t, mg.gamma)
}

/// Orbit average of each agent's table, `π̄_i(a|s) = 1/|G| Σ_g π_i(g a | g s)`.
pub fn symmetrize_policy(pi: &JointPolicy, action: &GroupActionOnMG) -> Result<JointPolicy> {
    action.check_against(pi.n_states, &pi.action_counts)?;
    let k = action.len() as f64;
    let tables = pi
        .action_counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut t = vec![0.0; pi.n_states * c];
            for s in 0..pi.n_states {
                for a in 0..c {
                    let sum: f64 = (0..action.len())
                        .map(|g| pi.agent_prob(i, action.state(g, s), action.agent_action(g, i, a)))
                        .sum();
                    t[s * c + a] = sum / k;
                }
            }
            for row in t.chunks_exact_mut(c) {
                normalize(row);
            }
            t
        })
        .collect();
    JointPolicy::new(pi.n_states, pi.action_counts.clone(), tables)
}

/// Checks both invariance equations (per-agent policy and transitions) and
/// reports the first offending index tuple.
pub fn find_g_invariance_violation(
    mg: &TabularMG,
    pi: &JointPolicy,
    action: &GroupActionOnMG,
    tol: f64,
) -> Result<()> {
    action.check_against(mg.n_states, &mg.action_counts)?;
    pi.check_against(mg)?;
    let (ns, na) = (mg.n_states, mg.n_joint);
    for (g, elem) in action.elements.iter().enumerate() {
        for s in 0..ns {
            let gs = action.state(g, s);
            for (i, &c) in mg.action_counts.iter().enumerate() {
                for a in 0..c {
                    let lhs = pi.agent_prob(i, s, a);
                    let rhs = pi.agent_prob(i, gs, action.agent_action(g, i, a));
                    if (lhs - rhs).abs() > tol {
                        return Err(Error::PolicySymmetryViolation {
                            g: *elem,
                            agent: i,
                            s,
                            a,
                        });
                    }
                }
            }
            for a in 0..na {
                let ga = action.joint_action(g, a);
                for s2 in 0..ns {
                    let lhs = mg.p(s, a, s2);
                    let rhs = mg.p(gs, ga, action.state(g, s2));
                    if (lhs - rhs).abs() > tol {
                        return Err(Error::SymmetryViolation {
                            g: *elem,
                            s,
                            a,
                            s_next: s2,
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn check_g_invariance(mg: &TabularMG, pi: &JointPolicy, action: &GroupActionOnMG) -> bool {
    find_g_invariance_violation(mg, pi, action, ROW_TOL).is_ok()
}

/// Elementwise upper bound on `|r - r̂|`:
/// `ζ·1{π_E=0}·1{π̂_E>0} + γ Σ_{s'} |V(s') (P - P̂)(s'|s,a)|`, with the
/// worst case `|P - P̂| <= 1` on rows the data never visited.
pub fn error_bound(
    mg_true: &TabularMG,
    pi_e_true: &JointPolicy,
    model: &EmpiricalModel,
    params: &FeasibleRewardParams,
) -> Result<Vec<f64>> {
    check_model(mg_true, pi_e_true, model)?;
    params.validate(mg_true.n_states, mg_true.n_joint)?;
    let (ns, na) = (mg_true.n_states, mg_true.n_joint);
    let mut out = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let k = s * na + a;
            let mut b = zeta_term(pi_e_true, model, params, s, a);
            let dev: f64 = match model.p_row(s, a) {
                Some(p_hat) => mg_true
                    .row(s, a)
                    .iter()
                    .zip(p_hat)
                    .zip(&params.value)
                    .map(|((p, q), v)| (v * (p - q)).abs())
                    .sum(),
                None => params.value.iter().map(|v| v.abs()).sum(),
            };
            b += mg_true.gamma * dev;
            out.push(b);
            debug_assert!(out[k].is_finite());
        }
    }
    Ok(out)
}

fn zeta_term(
    pi_e: &JointPolicy,
    model: &EmpiricalModel,
    params: &FeasibleRewardParams,
    s: usize,
    a: usize,
) -> f64 {
    let k = s * model.n_joint + a;
    if pi_e.joint_prob(s, a) == 0.0 && model.pi_hat[k] > 0.0 {
        params.zeta[k]
    } else {
        0.0
    }
}

fn check_model(mg: &TabularMG, pi_e: &JointPolicy, model: &EmpiricalModel) -> Result<()> {
    pi_e.check_against(mg)?;
    if model.n_states != mg.n_states || model.n_joint != mg.n_joint {
        return Err(Error::Shape(
            "empirical model does not match the game".into(),
        ));
    }
    Ok(())
}

/// The reward `r̂` feasible for the empirical problem that the error bound is
/// stated for: same `V`, `ζ̂ = ζ·1{π_E=0}`, transitions `P̂` (uniform on
/// unvisited rows).
pub fn constructive_estimate(
    gamma: f64,
    pi_e_true: &JointPolicy,
    model: &EmpiricalModel,
    params: &FeasibleRewardParams,
) -> Vec<f64> {
    let (ns, na) = (model.n_states, model.n_joint);
    let uniform = vec![1.0 / ns as f64; ns];
    let mut out = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let k = s * na + a;
            let zeta_hat = if pi_e_true.joint_prob(s, a) == 0.0 {
                params.zeta[k]
            } else {
                0.0
            };
            let penalty = if model.pi_hat[k] == 0.0 {
                zeta_hat
            } else {
                0.0
            };
            let row = model.p_row(s, a).unwrap_or(&uniform);
            let ev: f64 = row.iter().zip(&params.value).map(|(p, v)| p * v).sum();
            out.push(-penalty + params.value[s] - gamma * ev);
        }
    }
    out
}

/// Worst-case form of the bound: the transition deviation on a row visited
/// `D` times is replaced by its concentration bound `min(1, c/√D)` (1 when
/// unvisited), giving `ζ·1{π_E=0}·1{π̂_E>0} + γ·min(1, c/√D)·Σ_{s'}|V(s')|`.
pub fn concentration_bound(
    gamma: f64,
    pi_e_true: &JointPolicy,
    model: &EmpiricalModel,
    params: &FeasibleRewardParams,
    c: f64,
) -> Vec<f64> {
    let (ns, na) = (model.n_states, model.n_joint);
    let v_mass: f64 = params.value.iter().map(|v| v.abs()).sum();
    let mut out = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let d = model.visits(s, a);
            let dev = if d == 0 {
                1.0
            } else {
                f64::min(1.0, c / (d as f64).sqrt())
            };
            out.push(zeta_term(pi_e_true, model, params, s, a) + gamma * dev * v_mass);
        }
    }
    out
}

/// Per-cell differences `plain - augmented` of both bound forms.
#[derive(Clone, Debug)]
pub struct Prop2Cells {
    /// Concentration (worst-case) form; the quantity the improvement claim is about.
    pub delta_bound: Vec<f64>,
    /// Realized error bound using the true deviation `|P - P̂|`; diagnostic only.
    pub delta_realized: Vec<f64>,
}

pub fn prop2_deltas(
    mg: &TabularMG,
    pi_e: &JointPolicy,
    action: &GroupActionOnMG,
    demos: &DemoDataset,
    params: &FeasibleRewardParams,
    c: f64,
) -> Result<Prop2Cells> {
    let plain = estimate_empirical(demos)?;
    let augmented = estimate_empirical(&augment_demos(demos, action)?)?;
    let bp = concentration_bound(mg.gamma, pi_e, &plain, params, c);
    let ba = concentration_bound(mg.gamma, pi_e, &augmented, params, c);
    let rp = error_bound(mg, pi_e, &plain, params)?;
    let ra = error_bound(mg, pi_e, &augmented, params)?;
    Ok(Prop2Cells {
        delta_bound: bp.iter().zip(&ba).map(|(x, y)| x - y).collect(),
        delta_realized: rp.iter().zip(&ra).map(|(x, y)| x - y).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct Prop2Config {
    pub sample_size: usize,
    pub seeds: Vec<u64>,
    /// Constant `c` of the concentration bound; any `c > 0` works.
    pub concentration: f64,
}

#[derive(Clone, Debug)]
pub struct Prop2SeedReport {
    pub seed: u64,
    pub cells: Prop2Cells,
    pub min_delta_bound: f64,
    pub min_delta_realized: f64,
}

#[derive(Clone, Debug)]
pub struct Prop2Violation {
    pub seed: u64,
    pub s: usize,
    pub a: usize,
    pub delta: f64,
}

#[derive(Clone, Debug)]
pub struct Prop2Report {
    pub per_seed: Vec<Prop2SeedReport>,
    pub min_delta: f64,
    pub n_cells: usize,
    pub violations: Vec<Prop2Violation>,
    /// Cells where the realized bound got strictly worse with augmentation.
    pub realized_worse: usize,
}

impl Prop2Report {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const PROP2_TOL: f64 = 1e-12;

/// For each seed: draw `(ζ, V)` and `M` expert tuples, then compare the error
/// bounds of the plain and the augmented empirical problems cell by cell.
/// The game and expert must be invariant under `action` (checked first).
pub fn verify_prop2(
    mg: &TabularMG,
    pi_e: &JointPolicy,
    action: &GroupActionOnMG,
    cfg: &Prop2Config,
) -> Result<Prop2Report> {
    find_g_invariance_violation(mg, pi_e, action, ROW_TOL)?;
    let na = mg.n_joint;
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    let mut violations = Vec::new();
    let mut min_delta = f64::INFINITY;
    let mut realized_worse = 0;
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = FeasibleRewardParams::random(mg, 1.0, 1.0, &mut rng);
        let demos = sample_demos(mg, pi_e, cfg.sample_size, &mut rng);
        let cells = prop2_deltas(mg, pi_e, action, &demos, &params, cfg.concentration)?;
        let min_b = cells
            .delta_bound
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let min_r = cells
            .delta_realized
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        for (k, &d) in cells.delta_bound.iter().enumerate() {
            if d < -PROP2_TOL {
                violations.push(Prop2Violation {
                    seed,
                    s: k / na,
                    a: k % na,
                    delta: d,
                });
            }
        }
        realized_worse += cells
            .delta_realized
            .iter()
            .filter(|&&d| d < -PROP2_TOL)
            .count();
        min_delta = min_delta.min(min_b);
        per_seed.push(Prop2SeedReport {
            seed,
            cells,
            min_delta_bound: min_b,
            min_delta_realized: min_r,
        });
    }
    Ok(Prop2Report {
        n_cells: per_seed.len() * mg.table_len(),
        per_seed,
        min_delta,
        violations,
        realized_worse,
    })
}

/// A game, an expert, and a dihedral action under which both are invariant.
#[derive(Clone, Debug)]
pub struct SymmetricInstance {
    pub mg: TabularMG,
    pub pi_e: JointPolicy,
    pub action: GroupActionOnMG,
}

/// Orbit of a lattice point under the group, in first-seen order.
fn orbit(elements: &[GroupElement], p: [f64; 2]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = Vec::new();
    for g in elements {
        let q = g.apply(p);
        if !out.iter().any(|o| o == &q) {
            out.push(q);
        }
    }
    out
}

/// Random `D_order`-invariant instance (`order` ∈ {2, 4}) with two agents.
///
/// States are the points of a few random lattice orbits; each agent's actions
/// are a closed set of planar directions. Transition rows and the expert are
/// random, orbit-averaged, and the expert is thresholded so that some of its
/// entries are exactly zero.
pub fn random_symmetric_instance<R: Rng>(order: u32, rng: &mut R) -> Result<SymmetricInstance> {
    if order != 2 && order != 4 {
        return Err(Error::Domain(format!(
            "instances are built for D_2 and D_4, got D_{order}"
        )));
    }
    let elements = dihedral_elements(order);
    let mut states: Vec<[f64; 2]> = Vec::new();
    let n_orbits = rng.random_range(1..=3);
    if rng.random::<f64>() < 0.3 {
        states.push([0.0, 0.0]);
    }
    let (mut added, mut tries) = (0, 0);
    while (added < n_orbits || states.len() < 2) && tries < 200 {
        tries += 1;
        let p = [
            rng.random_range(-2..=2) as f64,
            rng.random_range(-2..=2) as f64,
        ];
        if states.iter().any(|q| q == &p) {
            continue;
        }
        let orb = orbit(&elements, p);
        if states.len() + orb.len() > 16 {
            continue;
        }
        states.extend(orb);
        added += 1;
    }
    let direction_sets: Vec<Vec<[f64; 2]>> = if order == 4 {
        vec![
            vec![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]],
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]],
            vec![[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]],
        ]
    } else {
        vec![
            vec![[1.0, 0.0], [-1.0, 0.0]],
            vec![[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]],
            vec![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]],
        ]
    };
    let agent_actions: Vec<Vec<[f64; 2]>> = (0..2)
        .map(|_| direction_sets[rng.random_range(0..direction_sets.len())].clone())
        .collect();
    let action = GroupActionOnMG::from_points(elements, &states, &agent_actions)?;
    let counts = action.action_counts.clone();
    let gamma = rng.random_range(0.5..0.95);
    let raw = TabularMG::random(states.len(), counts.clone(), gamma, rng)?;
    let mg = symmetrize_transition(&raw, &action)?;
    let pi_raw = JointPolicy::random(states.len(), counts.clone(), 0.4, rng);
    let pi_sym = symmetrize_policy(&pi_raw, &action)?;
    // Entries of one orbit agree to rounding, so a shared threshold keeps the
    // zero pattern symmetric.
    let frac = 0.6 + 0.35 * rng.random::<f64>();
    let tables = pi_sym
        .tables
        .iter()
        .zip(&counts)
        .map(|(t, &c)| {
            let mut t = t.clone();
            for row in t.chunks_exact_mut(c) {
                let max = row.iter().copied().fold(0.0, f64::max);
                for p in row.iter_mut() {
                    if *p < frac * max {
                        *p = 0.0;
                    }
                }
                normalize(row);
            }
            t
        })
        .collect();
    let pi_e = JointPolicy::new(states.len(), counts, tables)?;
    Ok(SymmetricInstance { mg, pi_e, action })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn chain(gamma: f64) -> TabularMG {
        // 3 states, 2 agents with 2 actions. Joint action 3 (both pick 1)
        // moves right; everything else stays.
        let (ns, na) = (3, 4);
        let mut t = vec![0.0; ns * na * ns];
        for s in 0..ns {
            for a in 0..na {
                let next = if a == 3 { (s + 1).min(ns - 1) } else { s };
                t[(s * na + a) * ns + next] = 1.0;
            }
        }
        TabularMG::new(ns, vec![2, 2], t, gamma).unwrap()
    }

    #[test]
    fn joint_code_round_trips() {
        let counts = [2, 3, 4];
        for a in 0..24 {
            assert_eq!(encode_joint(&counts, &decode_joint(&counts, a)), a);
        }
        assert_eq!(encode_joint(&counts, &[1, 0, 0]), 1);
        assert_eq!(encode_joint(&counts, &[0, 1, 0]), 2);
    }

    #[test]
    fn rejects_bad_games() {
        assert!(TabularMG::new(1, vec![1], vec![0.5], 0.9).is_err());
        assert!(TabularMG::new(1, vec![1], vec![1.0], 1.0).is_err());
        assert!(TabularMG::new(2, vec![1], vec![1.0, 0.0], 0.9).is_err());
    }

    #[test]
    fn zero_reward_gives_zero_values() {
        let mg = TabularMG::random(4, vec![2, 2], 0.9, &mut rng(1)).unwrap();
        let pi = JointPolicy::uniform(4, vec![2, 2]);
        let vt = policy_evaluation(&mg, &[0.0; 16], &pi).unwrap();
        assert!(vt.q.iter().chain(&vt.v).all(|&x| x == 0.0));
    }

    #[test]
    fn geometric_series_value() {
        let mg = TabularMG::new(1, vec![1], vec![1.0], 0.5).unwrap();
        let pi = JointPolicy::uniform(1, vec![1]);
        let vt = policy_evaluation(&mg, &[1.0], &pi).unwrap();
        assert!((vt.v[0] - 2.0).abs() < 1e-11);
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let mg = TabularMG::new(1, vec![1], vec![1.0], 0.99).unwrap();
        let err = evaluate_joint_table(&mg, &[1.0], &[1.0], 1e-12, 5).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { iterations: 5, residual } if residual > 0.0));
    }

    #[test]
    fn zero_reward_makes_every_policy_optimal() {
        let mg = TabularMG::random(3, vec![2, 3], 0.8, &mut rng(2)).unwrap();
        let pi = JointPolicy::random(3, vec![2, 3], 0.5, &mut rng(3));
        assert!(is_optimal(&mg, &[0.0; 18], &pi, 1e-10).unwrap());
    }

    #[test]
    fn reward_off_the_expert_support_breaks_optimality() {
        // Expert always picks joint action 0 (stay); rewarding the unused
        // joint action 3 at a reachable state makes a deviation strictly better.
        let mg = chain(0.9);
        let pi = JointPolicy::deterministic(3, vec![2, 2], &[vec![0; 3], vec![0; 3]]).unwrap();
        let mut r = vec![0.0; 12];
        r[3] = 1.0;
        assert!(!is_optimal(&mg, &r, &pi, 1e-8).unwrap());
    }

    #[test]
    fn feasible_reward_examples() {
        let mut g = rng(4);
        let mg = TabularMG::random(5, vec![2, 2], 0.9, &mut g).unwrap();
        let pi = JointPolicy::random(5, vec![2, 2], 0.4, &mut g);
        let zero = build_feasible_reward(&mg, &pi, &FeasibleRewardParams::zeros(&mg)).unwrap();
        assert!(zero.iter().all(|&r| r == 0.0));

        let mut shaping = FeasibleRewardParams::random(&mg, 1.0, 3.0, &mut g);
        shaping.zeta.iter_mut().for_each(|z| *z = 0.0);
        let r = build_feasible_reward(&mg, &pi, &shaping).unwrap();
        assert!(is_optimal(&mg, &r, &pi, 1e-8).unwrap());

        let mut bad = FeasibleRewardParams::zeros(&mg);
        bad.zeta[0] = -0.1;
        assert!(matches!(
            build_feasible_reward(&mg, &pi, &bad),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn feasible_rewards_pass_on_random_draws() {
        let mut g = rng(5);
        let mg = TabularMG::random(5, vec![2, 3], 0.85, &mut g).unwrap();
        let pi = JointPolicy::random(5, vec![2, 3], 0.4, &mut g);
        for _ in 0..50 {
            let params = FeasibleRewardParams::random(&mg, 2.0, 5.0, &mut g);
            let r = build_feasible_reward(&mg, &pi, &params).unwrap();
            assert!(is_optimal(&mg, &r, &pi, 1e-8).unwrap());
            let back = recover_feasible_params(&mg, &r, &pi, 1e-8).unwrap();
            let again = build_feasible_reward(&mg, &pi, &back).unwrap();
            let err = r
                .iter()
                .zip(&again)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-8, "reconstruction error {err}");
        }
    }

    #[test]
    fn estimate_examples() {
        let single = DemoDataset::new(2, 1, vec![(0, 0, 1)]).unwrap();
        let m = estimate_empirical(&single).unwrap();
        assert_eq!(m.p_row(0, 0).unwrap(), &[0.0, 1.0]);
        assert!(m.p_row(1, 0).is_none());
        assert_eq!(m.pi_hat(), &[1.0, 0.0]);

        let empty = DemoDataset::new(2, 1, vec![]).unwrap();
        assert!(matches!(
            estimate_empirical(&empty),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn exact_frequency_dataset_recovers_the_model() {
        // transition probabilities in quarters, so 4 tuples per (s,a) are exact
        let mut g = rng(6);
        let (ns, na) = (3, 2);
        let mut t = Vec::new();
        let mut tuples = Vec::new();
        for s in 0..ns {
            for a in 0..na {
                let mut row = [0usize; 3];
                for _ in 0..4 {
                    row[g.random_range(0..3)] += 1;
                }
                for (s2, &c) in row.iter().enumerate() {
                    t.push(c as f64 / 4.0);
                    tuples.extend(std::iter::repeat_n((s, a, s2), c));
                }
            }
        }
        let mg = TabularMG::new(ns, vec![2], t, 0.9).unwrap();
        let m = estimate_empirical(&DemoDataset::new(ns, na, tuples).unwrap()).unwrap();
        for s in 0..ns {
            for a in 0..na {
                assert_eq!(m.p_row(s, a).unwrap(), mg.row(s, a));
            }
        }
    }

    #[test]
    fn monte_carlo_estimate_concentrates() {
        let mut g = rng(7);
        let mg = TabularMG::random(3, vec![2], 0.9, &mut g).unwrap();
        let pi = JointPolicy::uniform(3, vec![2]);
        let demos = sample_demos(&mg, &pi, 10_000, &mut g);
        let m = estimate_empirical(&demos).unwrap();
        let mut worst: f64 = 0.0;
        for s in 0..3 {
            for a in 0..2 {
                for (p, q) in mg.row(s, a).iter().zip(m.p_row(s, a).unwrap()) {
                    worst = worst.max((p - q).abs());
                }
            }
            let pi_row = &m.pi_hat()[s * 2..s * 2 + 2];
            assert!((pi_row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(worst <= 0.05, "worst deviation {worst}");
    }

    fn d2_square() -> SymmetricInstance {
        let elements = dihedral_elements(2);
        let states = [[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]];
        let acts = vec![vec![[1.0, 0.0], [-1.0, 0.0]], vec![[1.0, 0.0], [-1.0, 0.0]]];
        let action = GroupActionOnMG::from_points(elements, &states, &acts).unwrap();
        let mut g = rng(8);
        let mg = symmetrize_transition(
            &TabularMG::random(4, vec![2, 2], 0.9, &mut g).unwrap(),
            &action,
        )
        .unwrap();
        let pi_e =
            symmetrize_policy(&JointPolicy::random(4, vec![2, 2], 0.0, &mut g), &action).unwrap();
        SymmetricInstance { mg, pi_e, action }
    }

    #[test]
    fn group_action_validation() {
        let e = dihedral_elements(2);
        // state map of r1 is not a bijection
        let bad = GroupActionOnMG::new(
            e[..2].to_vec(),
            vec![vec![0, 1], vec![0, 0]],
            vec![vec![vec![0]], vec![vec![0]]],
            vec![1],
        );
        assert!(matches!(bad, Err(Error::Structure(_))));
        // r1 squared must be the identity map
        let bad = GroupActionOnMG::new(
            e[..2].to_vec(),
            vec![vec![0, 1, 2], vec![1, 2, 0]],
            vec![vec![vec![0]], vec![vec![0]]],
            vec![1],
        );
        assert!(matches!(bad, Err(Error::Structure(_))));
    }

    #[test]
    fn augmentation_cardinality_and_identity() {
        let inst = d2_square();
        let demos = sample_demos(&inst.mg, &inst.pi_e, 10, &mut rng(9));
        let id = GroupActionOnMG::identity_only(4, vec![2, 2], 2);
        assert_eq!(augment_demos(&demos, &id).unwrap(), demos);

        let elements = dihedral_elements(4);
        let ring: Vec<[f64; 2]> = orbit(&elements, [2.0, 1.0]);
        let dirs = vec![vec![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]];
        let d4 = GroupActionOnMG::from_points(elements, &ring, &dirs).unwrap();
        let demos =
            DemoDataset::new(8, 4, (0..10).map(|j| (j % 8, j % 4, (j + 3) % 8)).collect()).unwrap();
        assert_eq!(augment_demos(&demos, &d4).unwrap().len(), 80);
    }

    #[test]
    fn augmented_policy_estimate_is_symmetric() {
        let inst = d2_square();
        let demos = sample_demos(&inst.mg, &inst.pi_e, 25, &mut rng(10));
        let aug = estimate_empirical(&augment_demos(&demos, &inst.action).unwrap()).unwrap();
        let na = inst.mg.n_joint();
        for g in 0..inst.action.len() {
            for s in 0..4 {
                for a in 0..na {
                    let gs = inst.action.state(g, s);
                    let ga = inst.action.joint_action(g, a);
                    assert_eq!(aug.pi_hat()[gs * na + ga], aug.pi_hat()[s * na + a]);
                }
            }
        }
    }

    #[test]
    fn invariance_checks() {
        let mut g = rng(11);
        let mg = TabularMG::random(4, vec![2, 2], 0.9, &mut g).unwrap();
        let pi = JointPolicy::random(4, vec![2, 2], 0.3, &mut g);
        assert!(check_g_invariance(
            &mg,
            &pi,
            &GroupActionOnMG::identity_only(4, vec![2, 2], 4)
        ));

        let inst = d2_square();
        assert!(check_g_invariance(&inst.mg, &inst.pi_e, &inst.action));

        let mut t = inst.mg.transition().to_vec();
        t[0] += 0.1;
        t[1] -= 0.1;
        if t[1] < 0.0 {
            t[1] += 0.2;
            t[2] -= 0.2;
        }
        let broken = TabularMG::new(4, vec![2, 2], t, 0.9);
        if let Ok(broken) = broken {
            assert!(!check_g_invariance(&broken, &inst.pi_e, &inst.action));
            let err =
                find_g_invariance_violation(&broken, &inst.pi_e, &inst.action, 1e-12).unwrap_err();
            assert!(matches!(err, Error::SymmetryViolation { .. }));
        }
    }

    #[test]
    fn error_bound_trivial_cases() {
        let mut g = rng(12);
        let mg = TabularMG::random(3, vec![2], 0.9, &mut g).unwrap();
        let pi = JointPolicy::random(3, vec![2], 0.3, &mut g);
        let params = FeasibleRewardParams::random(&mg, 1.0, 1.0, &mut g);

        // V ≡ 0 leaves only the ζ indicator term
        let mut no_v = params.clone();
        no_v.value.iter_mut().for_each(|v| *v = 0.0);
        let demos = sample_demos(&mg, &pi, 30, &mut g);
        let model = estimate_empirical(&demos).unwrap();
        let b = error_bound(&mg, &pi, &model, &no_v).unwrap();
        for (k, &x) in b.iter().enumerate() {
            let (s, a) = (k / 2, k % 2);
            let expected = if pi.joint_prob(s, a) == 0.0 && model.pi_hat()[k] > 0.0 {
                no_v.zeta[k]
            } else {
                0.0
            };
            assert_eq!(x, expected);
        }
    }

    #[test]
    fn error_bound_dominates_constructive_gap() {
        let mut g = rng(13);
        for _ in 0..20 {
            let mg = TabularMG::random(4, vec![2, 2], 0.9, &mut g).unwrap();
            let pi = JointPolicy::random(4, vec![2, 2], 0.4, &mut g);
            let params = FeasibleRewardParams::random(&mg, 1.0, 2.0, &mut g);
            let model = estimate_empirical(&sample_demos(&mg, &pi, 20, &mut g)).unwrap();
            let r = build_feasible_reward(&mg, &pi, &params).unwrap();
            let r_hat = constructive_estimate(mg.gamma(), &pi, &model, &params);
            let bound = error_bound(&mg, &pi, &model, &params).unwrap();
            for k in 0..r.len() {
                assert!((r[k] - r_hat[k]).abs() <= bound[k] + 1e-12);
            }
        }
    }

    #[test]
    fn prop2_single_tuple_exhaustive() {
        let inst = d2_square();
        let params = FeasibleRewardParams::random(&inst.mg, 1.0, 1.0, &mut rng(14));
        let na = inst.mg.n_joint();
        for s in 0..4 {
            for a in 0..na {
                for s2 in 0..4 {
                    let demos = DemoDataset::new(4, na, vec![(s, a, s2)]).unwrap();
                    let cells =
                        prop2_deltas(&inst.mg, &inst.pi_e, &inst.action, &demos, &params, 1.0)
                            .unwrap();
                    assert!(cells.delta_bound.iter().all(|&d| d >= -PROP2_TOL));
                }
            }
        }
    }

    #[test]
    fn prop2_rejects_asymmetric_games() {
        let inst = d2_square();
        let mg = TabularMG::random(4, vec![2, 2], 0.9, &mut rng(15)).unwrap();
        let cfg = Prop2Config {
            sample_size: 5,
            seeds: vec![1],
            concentration: 1.0,
        };
        let err = verify_prop2(&mg, &inst.pi_e, &inst.action, &cfg).unwrap_err();
        assert!(matches!(
            err,
            Error::SymmetryViolation { .. } | Error::PolicySymmetryViolation { .. }
        ));
    }

    #[test]
    fn random_symmetric_instances_are_invariant() {
        let mut g = rng(16);
        for order in [2, 4] {
            let mut with_zeros = 0;
            for _ in 0..10 {
                let inst = random_symmetric_instance(order, &mut g).unwrap();
                assert!(check_g_invariance(&inst.mg, &inst.pi_e, &inst.action));
                if inst.pi_e.tables().iter().flatten().any(|&p| p == 0.0) {
                    with_zeros += 1;
                }
            }
            assert!(
                with_zeros >= 7,
                "only {with_zeros} instances exercise the zeta term"
            );
        }
    }
}
