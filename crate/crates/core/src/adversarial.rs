//! Per-agent discriminators, the cross-entropy objectives on raw and
//! group-transformed batches, and the reward handed to the generator.
//!
//! Every objective is computed through the logit `z` of `D`:
//! `-log D = softplus(-z)` and `-log(1 - D) = softplus(z)`, so values stay
//! finite and gradients never vanish through a probability clamp.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{sigmoid, softplus, Activation, Checkpoint, Mlp, Trace};
use crate::demos::ContinuousTuple;
use crate::envs::{effective_action, observe, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::group::{GroupElement, StructuredVector};

const PROB_FLOOR: f64 = 1e-12;
pub const GAIL_REWARD_CLAMP: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gail,
    Airl,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gail" => Ok(Variant::Gail),
            "airl" => Ok(Variant::Airl),
            _ => Err(Error::Config(format!(
                "unknown discriminator variant `{s}`"
            ))),
        }
    }
}

/// Reward extracted from a GAIL discriminator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GailReward {
    /// `-log(1 - D)`
    #[default]
    NegLogOneMinusD,
    /// `log D - log(1 - D)`
    Logit,
}

/// Maps stored tuples to discriminator inputs for one agent.
pub trait Featurizer {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn state_features(&self, s: &StructuredVector, agent: usize) -> Result<Vec<f64>>;
    fn action_features(
        &self,
        s: &StructuredVector,
        a: &StructuredVector,
        agent: usize,
    ) -> Result<Vec<f64>>;
}

/// Log-density of the current generator, `log π_i(a | s)`.
pub trait LogDensity {
    fn log_prob(&self, s: &StructuredVector, agent: usize, a: &StructuredVector) -> Result<f64>;
}

/// Agent-centric observation; the action block is the effective action
/// followed by its inner product with every `(x, y)` pair of the observation.
#[derive(Clone, Debug)]
pub struct EnvFeaturizer {
    pub spec: EnvSpec,
}

impl Featurizer for EnvFeaturizer {
    fn state_dim(&self) -> usize {
        self.spec.obs_dim()
    }

    fn action_dim(&self) -> usize {
        self.spec.action_dim() + self.spec.obs_dim() / 2
    }

    fn state_features(&self, s: &StructuredVector, agent: usize) -> Result<Vec<f64>> {
        let st = EnvState::from_structured(&self.spec, s, 0)?;
        Ok(observe(&self.spec, &st, agent))
    }

    fn action_features(
        &self,
        s: &StructuredVector,
        a: &StructuredVector,
        agent: usize,
    ) -> Result<Vec<f64>> {
        if a.equ.len() != 2 {
            return Err(Error::Shape(format!(
                "expected one action pair, got {}",
                a.equ.len()
            )));
        }
        let u = effective_action(&self.spec, a.pair(0));
        let obs = self.state_features(s, agent)?;
        let mut out = u.to_vec();
        out.extend(obs.chunks_exact(2).map(|o| u[0] * o[0] + u[1] * o[1]));
        Ok(out)
    }
}

/// Reduces everything to `O(2)` invariants: inner products between all
/// equivariant pairs of the state (and of the action with the state), plus the
/// invariant scalars. A discriminator on these features is exactly invariant.
#[derive(Clone, Debug)]
pub struct InvariantFeaturizer {
    pub state_pairs: usize,
    pub state_inv: usize,
}

impl InvariantFeaturizer {
    fn dot(u: [f64; 2], v: [f64; 2]) -> f64 {
        u[0] * v[0] + u[1] * v[1]
    }
}

impl Featurizer for InvariantFeaturizer {
    fn state_dim(&self) -> usize {
        self.state_pairs * (self.state_pairs + 1) / 2 + self.state_inv
    }

    fn action_dim(&self) -> usize {
        self.state_pairs + 1
    }

    fn state_features(&self, s: &StructuredVector, _agent: usize) -> Result<Vec<f64>> {
        let n = s.n_pairs();
        let mut out = Vec::with_capacity(self.state_dim());
        for i in 0..n {
            for j in i..n {
                out.push(Self::dot(s.pair(i), s.pair(j)));
            }
        }
        out.extend_from_slice(&s.inv);
        Ok(out)
    }

    fn action_features(
        &self,
        s: &StructuredVector,
        a: &StructuredVector,
        _agent: usize,
    ) -> Result<Vec<f64>> {
        let u = a.pair(0);
        let mut out: Vec<f64> = (0..s.n_pairs()).map(|i| Self::dot(u, s.pair(i))).collect();
        out.push(Self::dot(u, u));
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub variant: Variant,
    pub gamma: f64,
    /// GAIL: `(s, a, s') -> logit`. AIRL: `g(s, a)`.
    pub main: Mlp,
    /// AIRL shaping potential `h(s)`.
    pub shaping: Option<Mlp>,
}

struct Eval {
    z: f64,
    main: Trace,
    shaping: Option<(Trace, Trace)>,
}

impl Discriminator {
    pub fn new<R: Rng>(
        variant: Variant,
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (main_in, shaping) = match variant {
            Variant::Gail => (2 * state_dim + action_dim, None),
            Variant::Airl => {
                let mut h =
                    Mlp::with_hidden(state_dim, hidden, 1, Activation::Tanh, Activation::Identity)?;
                h.init(1.0, rng);
                (state_dim + action_dim, Some(h))
            }
        };
        let mut main =
            Mlp::with_hidden(main_in, hidden, 1, Activation::Tanh, Activation::Identity)?;
        main.init(1.0, rng);
        Ok(Self {
            variant,
            gamma,
            main,
            shaping,
        })
    }

    pub fn for_featurizer<R: Rng>(
        variant: Variant,
        feat: &dyn Featurizer,
        hidden: &[usize],
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            variant,
            feat.state_dim(),
            feat.action_dim(),
            hidden,
            gamma,
            rng,
        )
    }

    pub fn n_params(&self) -> usize {
        self.main.n_params() + self.shaping.as_ref().map_or(0, Mlp::n_params)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.main.params().to_vec();
        if let Some(h) = &self.shaping {
            p.extend_from_slice(h.params());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "{} params for a {}-param discriminator",
                p.len(),
                self.n_params()
            )));
        }
        let k = self.main.n_params();
        self.main.params_mut().copy_from_slice(&p[..k]);
        if let Some(h) = &mut self.shaping {
            h.params_mut().copy_from_slice(&p[k..]);
        }
        Ok(())
    }

    /// Reward-function output `f`: the GAIL logit, or `g + γ h(s') - h(s)`.
    pub fn f_value(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<f64> {
        Ok(self.eval(s, a, s_next, 0.0)?.z)
    }

    fn eval(&self, s: &[f64], a: &[f64], s_next: &[f64], log_pi: f64) -> Result<Eval> {
        match (self.variant, &self.shaping) {
            (Variant::Gail, _) => {
                let x: Vec<f64> = s.iter().chain(a).chain(s_next).copied().collect();
                let main = self.main.forward_trace(&x)?;
                Ok(Eval {
                    z: main.output()[0],
                    main,
                    shaping: None,
                })
            }
            (Variant::Airl, Some(h)) => {
                let x: Vec<f64> = s.iter().chain(a).copied().collect();
                let main = self.main.forward_trace(&x)?;
                let hs = h.forward_trace(s)?;
                let hn = h.forward_trace(s_next)?;
                let f = main.output()[0] + self.gamma * hn.output()[0] - hs.output()[0];
                Ok(Eval {
                    z: f - log_pi,
                    main,
                    shaping: Some((hs, hn)),
                })
            }
            (Variant::Airl, None) => Err(Error::Structure(
                "airl discriminator without shaping net".into(),
            )),
        }
    }

    /// Adds `dz · ∂z/∂θ` into `grad` (layout of [`Discriminator::params`]).
    fn backprop(&self, e: &Eval, dz: f64, grad: &mut [f64]) {
        let k = self.main.n_params();
        let (gm, gh) = grad.split_at_mut(k);
        self.main.backward(&e.main, &[dz], gm);
        if let (Some(h), Some((hs, hn))) = (&self.shaping, &e.shaping) {
            h.backward(hn, &[self.gamma * dz], gh);
            h.backward(hs, &[-dz], gh);
        }
    }

    fn logit(&self, s: &[f64], a: &[f64], s_next: &[f64], log_pi: Option<f64>) -> Result<f64> {
        let lp = match self.variant {
            Variant::Gail => 0.0,
            Variant::Airl => log_pi.ok_or(Error::MissingLogDensity)?,
        };
        Ok(self.eval(s, a, s_next, lp)?.z)
    }

    /// `D(s, a, s')` in `[1e-12, 1 - 1e-12]`. AIRL evaluates
    /// `e^f / (e^f + π)` as `σ(f - log π)`.
    pub fn d_prob(&self, s: &[f64], a: &[f64], s_next: &[f64], log_pi: Option<f64>) -> Result<f64> {
        let z = self.logit(s, a, s_next, log_pi)?;
        Ok(sigmoid(z).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
    }

    /// AIRL: `f - log π` (that is `log D - log(1 - D)`). GAIL: per `mode`,
    /// clamped to `±20`.
    pub fn reward_signal(
        &self,
        s: &[f64],
        a: &[f64],
        s_next: &[f64],
        log_pi: Option<f64>,
        mode: GailReward,
    ) -> Result<f64> {
        let z = self.logit(s, a, s_next, log_pi)?;
        Ok(match self.variant {
            Variant::Airl => z,
            Variant::Gail => {
                let r = match mode {
                    GailReward::NegLogOneMinusD => softplus(z),
                    GailReward::Logit => z,
                };
                r.clamp(-GAIL_REWARD_CLAMP, GAIL_REWARD_CLAMP)
            }
        })
    }

    pub fn write_sections(&self, prefix: &str, ck: &mut Checkpoint) {
        ck.put_text(
            &format!("{prefix}.variant"),
            match self.variant {
                Variant::Gail => "gail",
                Variant::Airl => "airl",
            },
        );
        ck.put_f64(&format!("{prefix}.gamma"), vec![self.gamma]);
        self.main.write_sections(&format!("{prefix}.main"), ck);
        if let Some(h) = &self.shaping {
            h.write_sections(&format!("{prefix}.shaping"), ck);
        }
    }

    pub fn read_sections(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let variant: Variant = ck.text(&format!("{prefix}.variant"))?.parse()?;
        let gamma = ck
            .f64s(&format!("{prefix}.gamma"))?
            .first()
            .copied()
            .unwrap_or(0.99);
        let main = Mlp::read_sections(&format!("{prefix}.main"), ck)?;
        let shaping = match variant {
            Variant::Airl => Some(Mlp::read_sections(&format!("{prefix}.shaping"), ck)?),
            Variant::Gail => None,
        };
        Ok(Self {
            variant,
            gamma,
            main,
            shaping,
        })
    }
}

/// One discriminator per agent, or a single one shared by all agents.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSet {
    pub discs: Vec<Discriminator>,
    pub shared: bool,
    pub n_agents: usize,
}

impl DiscriminatorSet {
    pub fn new<R: Rng>(
        variant: Variant,
        feat: &dyn Featurizer,
        n_agents: usize,
        hidden: &[usize],
        gamma: f64,
        shared: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let count = if shared { 1 } else { n_agents };
        let discs = (0..count)
            .map(|_| Discriminator::for_featurizer(variant, feat, hidden, gamma, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            discs,
            shared,
            n_agents,
        })
    }

    pub fn index(&self, agent: usize) -> usize {
        if self.shared {
            0
        } else {
            agent
        }
    }

    pub fn for_agent(&self, agent: usize) -> &Discriminator {
        &self.discs[self.index(agent)]
    }

    pub fn variant(&self) -> Variant {
        self.discs[0].variant
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.discs.iter().map(|d| vec![0.0; d.n_params()]).collect()
    }

    /// Reward for agent `agent` on one tuple.
    pub fn reward(
        &self,
        feat: &dyn Featurizer,
        t: &ContinuousTuple,
        agent: usize,
        log_pi: Option<f64>,
        mode: GailReward,
    ) -> Result<f64> {
        let (s, a, sn) = features(feat, t, agent)?;
        self.for_agent(agent)
            .reward_signal(&s, &a, &sn, log_pi, mode)
    }
}

fn features(
    feat: &dyn Featurizer,
    t: &ContinuousTuple,
    agent: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    Ok((
        feat.state_features(&t.s, agent)?,
        feat.action_features(&t.s, &t.joint_a[agent], agent)?,
        feat.state_features(&t.s_next, agent)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// One flat gradient per discriminator of the set.
    pub grads: Vec<Vec<f64>>,
}

impl LossOutput {
    fn add(&mut self, other: &LossOutput, scale: f64) {
        self.value += scale * other.value;
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

/// Cross-entropy between expert and generator batches:
/// `-mean_E Σ_i log D_i - mean_G Σ_i log(1 - D_i)`.
pub fn loss_plain(
    set: &DiscriminatorSet,
    feat: &dyn Featurizer,
    expert: &[&ContinuousTuple],
    generator: &[&ContinuousTuple],
    log_density: Option<&dyn LogDensity>,
) -> Result<LossOutput> {
    if expert.is_empty() || generator.is_empty() {
        return Err(Error::EmptyStore);
    }
    let mut out = LossOutput {
        value: 0.0,
        grads: set.zero_grads(),
    };
    for (batch, is_expert) in [(expert, true), (generator, false)] {
        let w = 1.0 / batch.len() as f64;
        for t in batch.iter() {
            for agent in 0..set.n_agents {
                let k = set.index(agent);
                let d = &set.discs[k];
                let log_pi = match (d.variant, log_density) {
                    (Variant::Gail, _) => 0.0,
                    (Variant::Airl, Some(ld)) => ld.log_prob(&t.s, agent, &t.joint_a[agent])?,
                    (Variant::Airl, None) => return Err(Error::MissingLogDensity),
                };
                let (s, a, sn) = features(feat, t, agent)?;
                let e = d.eval(&s, &a, &sn, log_pi)?;
                // expert: softplus(-z), generator: softplus(z)
                let (val, dz) = if is_expert {
                    (softplus(-e.z), -sigmoid(-e.z))
                } else {
                    (softplus(e.z), sigmoid(e.z))
                };
                out.value += w * val;
                d.backprop(&e, w * dz, &mut out.grads[k]);
            }
        }
    }
    Ok(out)
}

/// Applies `g` to every tuple of a batch.
pub fn transform_batch(
    batch: &[&ContinuousTuple],
    g: &GroupElement,
) -> Result<Vec<ContinuousTuple>> {
    batch.iter().map(|t| t.transformed(g)).collect()
}

/// The objective on transformed batches, averaged over `elements`. Pass one
/// element drawn per minibatch, or the whole group to average exactly.
pub fn loss_symmetric(
    set: &DiscriminatorSet,
    feat: &dyn Featurizer,
    expert: &[&ContinuousTuple],
    generator: &[&ContinuousTuple],
    log_density: Option<&dyn LogDensity>,
    elements: &[GroupElement],
) -> Result<LossOutput> {
    if elements.is_empty() {
        return Err(Error::Input("no group elements supplied".into()));
    }
    let mut out = LossOutput {
        value: 0.0,
        grads: set.zero_grads(),
    };
    let w = 1.0 / elements.len() as f64;
    for g in elements {
        let te = transform_batch(expert, g)?;
        let tg = transform_batch(generator, g)?;
        let re: Vec<&ContinuousTuple> = te.iter().collect();
        let rg: Vec<&ContinuousTuple> = tg.iter().collect();
        let l = loss_plain(set, feat, &re, &rg, log_density)?;
        out.add(&l, w);
    }
    Ok(out)
}

/// Sum of the plain and symmetric objectives.
pub fn loss_sgf(
    set: &DiscriminatorSet,
    feat: &dyn Featurizer,
    expert: &[&ContinuousTuple],
    generator: &[&ContinuousTuple],
    log_density: Option<&dyn LogDensity>,
    elements: &[GroupElement],
) -> Result<LossOutput> {
    let mut out = loss_plain(set, feat, expert, generator, log_density)?;
    let sym = loss_symmetric(set, feat, expert, generator, log_density, elements)?;
    out.add(&sym, 1.0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{finite_difference, max_relative_error};
    use crate::demos::{Provenance, Source};
    use crate::envs::EnvKind;
    use crate::group::dihedral_elements;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const N: usize = 3;

    /// Isotropic Gaussian log-density with a position-dependent mean, so the
    /// value changes under a transformation of the tuple.
    struct TestDensity;

    impl LogDensity for TestDensity {
        fn log_prob(
            &self,
            s: &StructuredVector,
            agent: usize,
            a: &StructuredVector,
        ) -> Result<f64> {
            let m = [0.3 * s.equ[2 * agent], -0.2 * s.equ[2 * agent + 1]];
            let d = [a.equ[0] - m[0], a.equ[1] - m[1]];
            Ok(
                -0.5 * (d[0] * d[0] + d[1] * d[1]) / 0.25
                    - (2.0 * std::f64::consts::PI * 0.25).ln(),
            )
        }
    }

    fn random_tuple(rng: &mut ChaCha8Rng, spec: &EnvSpec) -> ContinuousTuple {
        let mut v = |n: usize, k: f64| (0..n).map(|_| rng.random_range(-k..k)).collect::<Vec<_>>();
        let equ = v(spec.state_equ_len(), 1.5);
        let next = v(spec.state_equ_len(), 1.5);
        let acts = v(2 * spec.n_agents, 0.7);
        ContinuousTuple {
            s: StructuredVector { equ, inv: vec![] },
            joint_a: acts
                .chunks(2)
                .map(|c| StructuredVector {
                    equ: c.to_vec(),
                    inv: vec![],
                })
                .collect(),
            s_next: StructuredVector {
                equ: next,
                inv: vec![],
            },
            episode_id: 0,
            step_index: 0,
            provenance: Provenance::raw(Source::Expert),
        }
    }

    fn setup(
        variant: Variant,
        shared: bool,
        seed: u64,
    ) -> (
        EnvFeaturizer,
        DiscriminatorSet,
        Vec<ContinuousTuple>,
        Vec<ContinuousTuple>,
    ) {
        let spec = EnvSpec::new(EnvKind::Rendezvous, N);
        let feat = EnvFeaturizer { spec: spec.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = DiscriminatorSet::new(variant, &feat, N, &[6], 0.9, shared, &mut rng).unwrap();
        let e = (0..5).map(|_| random_tuple(&mut rng, &spec)).collect();
        let g = (0..4).map(|_| random_tuple(&mut rng, &spec)).collect();
        (feat, set, e, g)
    }

    fn refs(v: &[ContinuousTuple]) -> Vec<&ContinuousTuple> {
        v.iter().collect()
    }

    fn zero_set(set: &mut DiscriminatorSet) {
        for d in &mut set.discs {
            let n = d.n_params();
            d.set_params(&vec![0.0; n]).unwrap();
        }
    }

    fn fd_check<F>(set: &DiscriminatorSet, loss: F, analytic: &LossOutput)
    where
        F: Fn(&DiscriminatorSet) -> f64,
    {
        for k in 0..set.discs.len() {
            let fd = finite_difference(&set.discs[k].params(), 1e-5, |p| {
                let mut s = set.clone();
                s.discs[k].set_params(p).unwrap();
                loss(&s)
            });
            let err = max_relative_error(&analytic.grads[k], &fd);
            assert!(err <= 1e-4, "disc {k}: relative error {err}");
        }
    }

    #[test]
    fn zero_gail_is_one_half_and_loss_is_two_n_ln2() {
        let (feat, mut set, e, g) = setup(Variant::Gail, false, 0);
        zero_set(&mut set);
        let (s, a, sn) = features(&feat, &e[0], 1).unwrap();
        assert_eq!(set.discs[1].d_prob(&s, &a, &sn, None).unwrap(), 0.5);
        let l = loss_plain(&set, &feat, &refs(&e), &refs(&g), None).unwrap();
        assert!((l.value - 2.0 * N as f64 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_discriminator_drives_the_loss_to_zero() {
        // a GAIL net whose logit is +big on the expert side and -big on the
        // generator side: bias on the sign of the first feature
        let (feat, mut set, mut e, mut g) = setup(Variant::Gail, true, 1);
        zero_set(&mut set);
        for t in &mut e {
            t.s.equ.iter_mut().for_each(|x| *x = 1.0);
        }
        for t in &mut g {
            t.s.equ.iter_mut().for_each(|x| *x = -1.0);
        }
        let d = &mut set.discs[0];
        let (w, _) = d.main.layer_offsets(0);
        d.main.params_mut()[w] = 5.0; // hidden unit 0 reads x_0 (own position x)
        let (w1, _) = d.main.layer_offsets(1);
        d.main.params_mut()[w1] = 100.0;
        let l = loss_plain(&set, &feat, &refs(&e), &refs(&g), None).unwrap();
        assert!(l.value < 1e-30, "{}", l.value);
    }

    #[test]
    fn airl_probability_identities() {
        let (feat, set, e, _) = setup(Variant::Airl, false, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for t in &e {
            for i in 0..N {
                let (s, a, sn) = features(&feat, t, i).unwrap();
                let d = &set.discs[i];
                let f = d.f_value(&s, &a, &sn).unwrap();
                assert!((d.d_prob(&s, &a, &sn, Some(f)).unwrap() - 0.5).abs() < 1e-15);
                let lp = rng.random_range(-3.0..1.0);
                let p = d.d_prob(&s, &a, &sn, Some(lp)).unwrap();
                let lhs = p.ln() - (1.0 - p).ln();
                assert!((lhs - (f - lp)).abs() < 1e-10);
                let r = d
                    .reward_signal(&s, &a, &sn, Some(lp), GailReward::default())
                    .unwrap();
                assert!((r - lhs).abs() < 1e-10);
                assert!(matches!(
                    d.d_prob(&s, &a, &sn, None),
                    Err(Error::MissingLogDensity)
                ));
            }
        }
    }

    #[test]
    fn airl_reward_ignores_a_constant_shared_by_g_and_log_pi() {
        let (feat, mut set, e, _) = setup(Variant::Airl, true, 3);
        let (s, a, sn) = features(&feat, &e[0], 0).unwrap();
        let lp = -1.3;
        let r0 = set.discs[0]
            .reward_signal(&s, &a, &sn, Some(lp), GailReward::default())
            .unwrap();
        let d = &mut set.discs[0];
        let (_, b) = d.main.layer_offsets(d.main.n_layers() - 1);
        d.main.params_mut()[b] += 2.5;
        let r1 = d
            .reward_signal(&s, &a, &sn, Some(lp + 2.5), GailReward::default())
            .unwrap();
        assert!((r0 - r1).abs() < 1e-12);
    }

    #[test]
    fn gail_reward_forms() {
        let (feat, mut set, e, _) = setup(Variant::Gail, true, 4);
        zero_set(&mut set);
        let (s, a, sn) = features(&feat, &e[0], 0).unwrap();
        let d = &mut set.discs[0];
        let r = d
            .reward_signal(&s, &a, &sn, None, GailReward::Logit)
            .unwrap();
        assert_eq!(r, 0.0);
        let (_, b) = d.main.layer_offsets(d.main.n_layers() - 1);
        d.main.params_mut()[b] = 500.0;
        assert_eq!(
            d.reward_signal(&s, &a, &sn, None, GailReward::NegLogOneMinusD)
                .unwrap(),
            20.0
        );
        assert!(d.d_prob(&s, &a, &sn, None).unwrap() < 1.0);
    }

    #[test]
    fn plain_gradients_match_finite_differences() {
        for (variant, shared) in [
            (Variant::Gail, false),
            (Variant::Airl, false),
            (Variant::Airl, true),
        ] {
            let (feat, set, e, g) = setup(variant, shared, 5);
            let ld = TestDensity;
            let l = loss_plain(&set, &feat, &refs(&e), &refs(&g), Some(&ld)).unwrap();
            fd_check(
                &set,
                |s| {
                    loss_plain(s, &feat, &refs(&e), &refs(&g), Some(&ld))
                        .unwrap()
                        .value
                },
                &l,
            );
        }
    }

    #[test]
    fn symmetric_loss_is_plain_loss_on_the_transformed_batch() {
        for variant in [Variant::Gail, Variant::Airl] {
            let (feat, set, e, g) = setup(variant, false, 6);
            let ld = TestDensity;
            let id = [GroupElement::identity(4)];
            let a = loss_symmetric(&set, &feat, &refs(&e), &refs(&g), Some(&ld), &id).unwrap();
            let b = loss_plain(&set, &feat, &refs(&e), &refs(&g), Some(&ld)).unwrap();
            assert_eq!(a, b);
            for h in dihedral_elements(4) {
                let sym =
                    loss_symmetric(&set, &feat, &refs(&e), &refs(&g), Some(&ld), &[h]).unwrap();
                let te = transform_batch(&refs(&e), &h).unwrap();
                let tg = transform_batch(&refs(&g), &h).unwrap();
                let plain = loss_plain(&set, &feat, &refs(&te), &refs(&tg), Some(&ld)).unwrap();
                assert!((sym.value - plain.value).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn invariant_discriminator_sees_no_difference() {
        let spec = EnvSpec::new(EnvKind::Rendezvous, N);
        let feat = InvariantFeaturizer {
            state_pairs: spec.state_equ_len() / 2,
            state_inv: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set =
            DiscriminatorSet::new(Variant::Gail, &feat, N, &[5], 0.9, false, &mut rng).unwrap();
        let e: Vec<_> = (0..4).map(|_| random_tuple(&mut rng, &spec)).collect();
        let g: Vec<_> = (0..4).map(|_| random_tuple(&mut rng, &spec)).collect();
        let plain = loss_plain(&set, &feat, &refs(&e), &refs(&g), None).unwrap();
        for h in dihedral_elements(4) {
            let sym = loss_symmetric(&set, &feat, &refs(&e), &refs(&g), None, &[h]).unwrap();
            assert!((sym.value - plain.value).abs() <= 1e-12, "{h}");
        }
    }

    #[test]
    fn sgf_loss_is_additive() {
        let (feat, set, e, g) = setup(Variant::Airl, false, 8);
        let ld = TestDensity;
        let id = [GroupElement::identity(4)];
        let plain = loss_plain(&set, &feat, &refs(&e), &refs(&g), Some(&ld)).unwrap();
        let sgf_id = loss_sgf(&set, &feat, &refs(&e), &refs(&g), Some(&ld), &id).unwrap();
        assert!((sgf_id.value - 2.0 * plain.value).abs() < 1e-12);

        let all = dihedral_elements(4);
        let sym = loss_symmetric(&set, &feat, &refs(&e), &refs(&g), Some(&ld), &all).unwrap();
        let sgf = loss_sgf(&set, &feat, &refs(&e), &refs(&g), Some(&ld), &all).unwrap();
        for k in 0..set.discs.len() {
            for ((a, b), c) in sgf.grads[k].iter().zip(&plain.grads[k]).zip(&sym.grads[k]) {
                assert!((a - (b + c)).abs() <= 1e-12);
            }
        }
        fd_check(
            &set,
            |s| {
                loss_sgf(s, &feat, &refs(&e), &refs(&g), Some(&ld), &all)
                    .unwrap()
                    .value
            },
            &sgf,
        );
    }

    #[test]
    fn losses_stay_finite_for_extreme_logits() {
        let (feat, mut set, e, g) = setup(Variant::Gail, true, 9);
        let d = &mut set.discs[0];
        let (_, b) = d.main.layer_offsets(d.main.n_layers() - 1);
        d.main.params_mut()[b] = -1e6;
        let l = loss_plain(&set, &feat, &refs(&e), &refs(&g), None).unwrap();
        assert!(l.value.is_finite() && l.grads[0].iter().all(|x| x.is_finite()));
    }

    #[test]
    fn checkpoint_sections_round_trip() {
        let (_, set, _, _) = setup(Variant::Airl, false, 10);
        let mut ck = Checkpoint::new(0);
        set.discs[1].write_sections("d1", &mut ck);
        assert_eq!(
            Discriminator::read_sections("d1", &ck).unwrap(),
            set.discs[1]
        );
    }
}
