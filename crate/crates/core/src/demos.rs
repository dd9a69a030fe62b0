//! Demonstration storage, group augmentation and minibatch sampling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::envs::{EnvSpec, EnvState, Vec2};
use crate::error::{Error, Result};
use crate::group::{GroupElement, StructuredVector, DEFAULT_ORDER};

pub const MAGIC: [u8; 4] = *b"SGFD";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 4 * 5;
const PROVENANCE_LEN: usize = 8 + 8 + 1 + 1 + 2 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Expert,
    Generator,
}

/// Where a tuple came from. `transform` is the composed group element applied
/// to the original record (identity for raw data).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub source: Source,
    pub transform: GroupElement,
}

impl Provenance {
    pub fn raw(source: Source) -> Self {
        Self {
            source,
            transform: GroupElement::identity(DEFAULT_ORDER),
        }
    }

    pub fn is_augmented(&self) -> bool {
        !self.transform.is_identity()
    }

    /// `expert`, `generator`, or `augmented:<g>` for transformed records.
    pub fn tag(&self) -> String {
        if self.is_augmented() {
            format!("augmented:{}", self.transform)
        } else {
            match self.source {
                Source::Expert => "expert".into(),
                Source::Generator => "generator".into(),
            }
        }
    }
}

/// One transition `(s, a, s')`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousTuple {
    pub s: StructuredVector,
    /// One structured action per agent.
    pub joint_a: Vec<StructuredVector>,
    pub s_next: StructuredVector,
    pub episode_id: u64,
    /// Time step of `s`; `s_next` is one step later.
    pub step_index: u64,
    pub provenance: Provenance,
}

impl ContinuousTuple {
    pub fn from_states(
        s: &EnvState,
        joint_a: &[Vec2],
        s_next: &EnvState,
        episode_id: u64,
        provenance: Provenance,
    ) -> Self {
        Self {
            s: s.to_structured(),
            joint_a: joint_a
                .iter()
                .map(|a| StructuredVector::from_pairs(&[*a], Vec::new()))
                .collect(),
            s_next: s_next.to_structured(),
            episode_id,
            step_index: s.time_step,
            provenance,
        }
    }

    pub fn action_pair(&self, agent: usize) -> Vec2 {
        self.joint_a[agent].pair(0)
    }

    /// `(L_g s, K_g a, L_g s')` with the provenance updated to `g ∘ old`.
    pub fn transformed(&self, g: &GroupElement) -> Result<Self> {
        Ok(Self {
            s: g.act(&self.s)?,
            joint_a: self
                .joint_a
                .iter()
                .map(|a| g.act(a))
                .collect::<Result<_>>()?,
            s_next: g.act(&self.s_next)?,
            episode_id: self.episode_id,
            step_index: self.step_index,
            provenance: Provenance {
                source: self.provenance.source,
                transform: g.compose(&self.provenance.transform)?,
            },
        })
    }
}

/// Per-tuple array sizes, shared by every tuple of a store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TupleDims {
    pub s_equ: usize,
    pub s_inv: usize,
    pub n_agents: usize,
    pub a_equ: usize,
    pub a_inv: usize,
}

impl TupleDims {
    pub fn of_spec(spec: &EnvSpec) -> Self {
        Self {
            s_equ: spec.state_equ_len(),
            s_inv: spec.state_inv_len(),
            n_agents: spec.n_agents,
            a_equ: spec.action_dim(),
            a_inv: 0,
        }
    }

    fn floats(&self) -> usize {
        2 * (self.s_equ + self.s_inv) + self.n_agents * (self.a_equ + self.a_inv)
    }

    fn check(&self, t: &ContinuousTuple) -> Result<()> {
        let ok = t.s.equ.len() == self.s_equ
            && t.s.inv.len() == self.s_inv
            && t.s_next.equ.len() == self.s_equ
            && t.s_next.inv.len() == self.s_inv
            && t.joint_a.len() == self.n_agents
            && t.joint_a
                .iter()
                .all(|a| a.equ.len() == self.a_equ && a.inv.len() == self.a_inv);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("tuple does not match dims {self:?}")))
        }
    }
}

/// Immutable list of tuples sharing one environment fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoStore {
    fingerprint: u64,
    dims: TupleDims,
    tuples: Vec<ContinuousTuple>,
}

impl DemoStore {
    pub fn new(spec: &EnvSpec, tuples: Vec<ContinuousTuple>) -> Result<Self> {
        Self::with_dims(spec.fingerprint(), TupleDims::of_spec(spec), tuples)
    }

    pub fn with_dims(
        fingerprint: u64,
        dims: TupleDims,
        tuples: Vec<ContinuousTuple>,
    ) -> Result<Self> {
        for t in &tuples {
            dims.check(t)?;
        }
        Ok(Self {
            fingerprint,
            dims,
            tuples,
        })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn dims(&self) -> TupleDims {
        self.dims
    }

    pub fn tuples(&self) -> &[ContinuousTuple] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn check_spec(&self, spec: &EnvSpec) -> Result<()> {
        let found = spec.fingerprint();
        if found != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint,
                found,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.fingerprint.to_le_bytes())?;
        w.write_all(&(self.tuples.len() as u64).to_le_bytes())?;
        let d = self.dims;
        for x in [d.s_equ, d.s_inv, d.n_agents, d.a_equ, d.a_inv] {
            w.write_all(&(x as u32).to_le_bytes())?;
        }
        for t in &self.tuples {
            w.write_all(&t.episode_id.to_le_bytes())?;
            w.write_all(&t.step_index.to_le_bytes())?;
            let p = &t.provenance;
            w.write_all(&[
                matches!(p.source, Source::Generator) as u8,
                p.transform.is_reflected() as u8,
                0,
                0,
            ])?;
            w.write_all(&p.transform.rotation_index().to_le_bytes())?;
            w.write_all(&p.transform.order().to_le_bytes())?;
            let floats =
                t.s.equ
                    .iter()
                    .chain(&t.s.inv)
                    .chain(t.joint_a.iter().flat_map(|a| a.equ.iter().chain(&a.inv)))
                    .chain(&t.s_next.equ)
                    .chain(&t.s_next.inv);
            for x in floats {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a store. When `expect` is given its fingerprint must match.
    pub fn load(path: &Path, expect: Option<&EnvSpec>) -> Result<Self> {
        let header_err = |reason: String| Error::Header {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut head = [0u8; HEADER_LEN];
        r.read_exact(&mut head)
            .map_err(|_| header_err("file shorter than the header".into()))?;
        if head[..4] != MAGIC {
            return Err(header_err("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(head[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let fingerprint = u64_at(8);
        if let Some(spec) = expect {
            let found = spec.fingerprint();
            if found != fingerprint {
                return Err(Error::FingerprintMismatch {
                    expected: fingerprint,
                    found,
                });
            }
        }
        let m = u64_at(16) as usize;
        let dims = TupleDims {
            s_equ: u32_at(24) as usize,
            s_inv: u32_at(28) as usize,
            n_agents: u32_at(32) as usize,
            a_equ: u32_at(36) as usize,
            a_inv: u32_at(40) as usize,
        };
        if !dims.s_equ.is_multiple_of(2) || !dims.a_equ.is_multiple_of(2) {
            return Err(header_err("odd equivariant block length".into()));
        }
        let rec_len = PROVENANCE_LEN + 8 * dims.floats();
        let mut buf = vec![0u8; rec_len];
        let mut tuples = Vec::with_capacity(m.min(1 << 24));
        for i in 0..m {
            r.read_exact(&mut buf)
                .map_err(|_| header_err(format!("truncated at tuple {i} of {m}")))?;
            tuples.push(
                decode_tuple(&buf, &dims).map_err(|e| header_err(format!("tuple {i}: {e}")))?,
            );
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(header_err("trailing bytes after the last tuple".into()));
        }
        Ok(Self {
            fingerprint,
            dims,
            tuples,
        })
    }
}

fn decode_tuple(buf: &[u8], d: &TupleDims) -> Result<ContinuousTuple> {
    let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().expect("8 bytes"));
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
    let source = match buf[16] {
        0 => Source::Expert,
        1 => Source::Generator,
        b => return Err(Error::Input(format!("unknown source byte {b}"))),
    };
    let transform = GroupElement::new(u32_at(20), buf[17] != 0, u32_at(24))?;
    let mut floats = buf[PROVENANCE_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |n: usize| -> Vec<f64> { floats.by_ref().take(n).collect() };
    let s = StructuredVector {
        equ: take(d.s_equ),
        inv: take(d.s_inv),
    };
    let joint_a = (0..d.n_agents)
        .map(|_| StructuredVector {
            equ: take(d.a_equ),
            inv: take(d.a_inv),
        })
        .collect();
    let s_next = StructuredVector {
        equ: take(d.s_equ),
        inv: take(d.s_inv),
    };
    Ok(ContinuousTuple {
        s,
        joint_a,
        s_next,
        episode_id: u64_at(0),
        step_index: u64_at(8),
        provenance: Provenance { source, transform },
    })
}

/// Every tuple under every element, element-major (all of `g_1`, then `g_2`,
/// ...). Duplicates are kept: the union is a list concatenation.
pub fn augment(store: &DemoStore, spec: &EnvSpec, elements: &[GroupElement]) -> Result<DemoStore> {
    store.check_spec(spec)?;
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    let mut out = Vec::with_capacity(store.len() * elements.len());
    for g in elements {
        for t in store.tuples() {
            out.push(t.transformed(g)?);
        }
    }
    Ok(DemoStore {
        fingerprint: store.fingerprint,
        dims: store.dims,
        tuples: out,
    })
}

/// Uniform minibatch. Without replacement requires `batch_size <= |store|`.
pub fn sample_batch<'a, R: Rng>(
    store: &'a DemoStore,
    batch_size: usize,
    with_replacement: bool,
    rng: &mut R,
) -> Result<Vec<&'a ContinuousTuple>> {
    sample_indices(store.len(), batch_size, with_replacement, rng)
        .map(|idx| idx.into_iter().map(|i| &store.tuples[i]).collect())
}

pub fn sample_indices<R: Rng>(
    len: usize,
    batch_size: usize,
    with_replacement: bool,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptyStore);
    }
    if with_replacement {
        Ok((0..batch_size).map(|_| rng.random_range(0..len)).collect())
    } else if batch_size > len {
        Err(Error::Input(format!(
            "batch of {batch_size} without replacement from {len} tuples"
        )))
    } else {
        Ok(index::sample(rng, len, batch_size).into_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{self, EnvKind};
    use crate::group::dihedral_elements;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn expert_store(kind: EnvKind, m: usize) -> (EnvSpec, DemoStore) {
        let spec = EnvSpec::new(kind, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (states, actions, _) =
            envs::expert_rollout(&spec, envs::reset(&spec, 1), m, &mut rng).unwrap();
        let tuples = (0..m)
            .map(|t| {
                ContinuousTuple::from_states(
                    &states[t],
                    &actions[t],
                    &states[t + 1],
                    0,
                    Provenance::raw(Source::Expert),
                )
            })
            .collect();
        let store = DemoStore::new(&spec, tuples).unwrap();
        (spec, store)
    }

    #[test]
    fn identity_augmentation_is_a_no_op() {
        let (spec, store) = expert_store(EnvKind::Rendezvous, 20);
        let out = augment(&store, &spec, &[GroupElement::identity(4)]).unwrap();
        assert_eq!(out, store);
    }

    #[test]
    fn full_d4_multiplies_by_eight() {
        let (spec, store) = expert_store(EnvKind::Pursuit, 100);
        let out = augment(&store, &spec, &dihedral_elements(4)).unwrap();
        assert_eq!(out.len(), 800);
        assert_eq!(out.tuples()[100].provenance.tag(), "augmented:r1");
        assert_eq!(out.tuples()[0].provenance.tag(), "expert");
    }

    #[test]
    fn augmented_tuples_replay_through_the_dynamics() {
        for kind in EnvKind::ALL {
            let (spec, store) = expert_store(kind, 30);
            let out = augment(&store, &spec, &dihedral_elements(4)).unwrap();
            for t in out.tuples() {
                let s = EnvState::from_structured(&spec, &t.s, t.step_index).unwrap();
                let a: Vec<Vec2> = (0..spec.n_agents).map(|i| t.action_pair(i)).collect();
                let (next, _) = envs::step(&spec, &s, &a).unwrap();
                for (x, y) in next.to_structured().equ.iter().zip(&t.s_next.equ) {
                    assert!((x - y).abs() < 1e-9, "{kind}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn double_augmentation_composes_tags() {
        let (spec, store) = expert_store(EnvKind::Rendezvous, 5);
        let g = dihedral_elements(4);
        let twice = augment(&augment(&store, &spec, &g).unwrap(), &spec, &g).unwrap();
        assert_eq!(twice.len(), 5 * 64);
        for (hi, h) in g.iter().enumerate() {
            for (gi, gg) in g.iter().enumerate() {
                let t = &twice.tuples()[(hi * 8 + gi) * 5];
                assert_eq!(t.provenance.transform, h.compose(gg).unwrap());
                let direct = store.tuples()[0]
                    .transformed(&h.compose(gg).unwrap())
                    .unwrap();
                assert_eq!(t.s, direct.s);
            }
        }
    }

    #[test]
    fn invariant_blocks_are_untouched() {
        let t = ContinuousTuple {
            s: StructuredVector::new(vec![1.0, 2.0], vec![0.1 + 0.2, -0.0]).unwrap(),
            joint_a: vec![StructuredVector::new(vec![0.5, -0.5], vec![7.0]).unwrap()],
            s_next: StructuredVector::new(vec![3.0, 4.0], vec![f64::MIN_POSITIVE, 9.0]).unwrap(),
            episode_id: 0,
            step_index: 0,
            provenance: Provenance::raw(Source::Expert),
        };
        for g in dihedral_elements(4) {
            let u = t.transformed(&g).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&u.s.inv), bits(&t.s.inv));
            assert_eq!(bits(&u.s_next.inv), bits(&t.s_next.inv));
            assert_eq!(bits(&u.joint_a[0].inv), bits(&t.joint_a[0].inv));
        }
    }

    #[test]
    fn spec_mismatch_is_rejected() {
        let (_, store) = expert_store(EnvKind::Rendezvous, 5);
        let other = EnvSpec::new(EnvKind::Rendezvous, 4);
        assert!(matches!(
            augment(&store, &other, &dihedral_elements(4)),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn full_batch_without_replacement_is_a_permutation() {
        let (_, store) = expert_store(EnvKind::Vicsek, 25);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut idx = sample_indices(store.len(), 25, false, &mut rng).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..25).collect::<Vec<_>>());
        assert!(sample_indices(25, 26, false, &mut rng).is_err());
        assert!(matches!(
            sample_indices(0, 1, true, &mut rng),
            Err(Error::EmptyStore)
        ));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (_, store) = expert_store(EnvKind::Vicsek, 25);
        let a = sample_batch(&store, 10, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_batch(&store, 10, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws = 100_000usize;
        let mut counts = [0usize; 10];
        for i in sample_indices(10, draws, true, &mut rng).unwrap() {
            counts[i] += 1;
        }
        let p = 0.1;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let (spec, store) = expert_store(EnvKind::Pursuit, 40);
        let store = augment(&store, &spec, &dihedral_elements(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.bin");
        store.save(&path).unwrap();
        let back = DemoStore::load(&path, Some(&spec)).unwrap();
        assert_eq!(back, store);
        let len = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(
            len,
            HEADER_LEN + store.len() * (PROVENANCE_LEN + 8 * store.dims().floats())
        );
    }

    #[test]
    fn corrupted_headers_give_typed_errors() {
        let (spec, store) = expert_store(EnvKind::Rendezvous, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.bin");
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut v = bytes.clone();
        v[4] = 99;
        std::fs::write(&path, &v).unwrap();
        assert!(matches!(
            DemoStore::load(&path, None),
            Err(Error::Version { found: 99, .. })
        ));

        let mut v = bytes.clone();
        v[0] = b'X';
        std::fs::write(&path, &v).unwrap();
        assert!(matches!(
            DemoStore::load(&path, None),
            Err(Error::Header { .. })
        ));

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            DemoStore::load(&path, None),
            Err(Error::Header { .. })
        ));

        std::fs::write(&path, &bytes).unwrap();
        let other = EnvSpec::new(EnvKind::Rendezvous, 4);
        assert!(matches!(
            DemoStore::load(&path, Some(&other)),
            Err(Error::FingerprintMismatch { .. })
        ));
        DemoStore::load(&path, Some(&spec)).unwrap();
    }
}
