//! The dihedral group `D_n` and its action on structured feature vectors.
//!
//! An element is stored as `R^k S^f`: first the reflection `S` (if `f`), then
//! a rotation by `2πk/n`. `S` is the flip about the x-axis, `(x, y) -> (x, -y)`.
//! Any other reflection axis gives an isomorphic group; this one keeps the
//! representation of `D_4` a set of signed permutation matrices, so every
//! product with it is exact in floating point.
//!
//! Tokens: `r<k>` is the rotation `R^k`, `sr<k>` is `R^k S` (reflect, then
//! rotate by `k` steps). For `n = 4`, `sr1` maps `(1, 0)` to `(0, 1)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default group order used by the experiments (`D_4`).
pub const DEFAULT_ORDER: u32 = 4;

pub type Mat2 = [[f64; 2]; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GroupElement {
    rotation: u32,
    reflected: bool,
    order: u32,
}

impl GroupElement {
    /// Builds `R^k S^f` in `D_n`. `k` is reduced mod `n`.
    pub fn new(rotation: u32, reflected: bool, order: u32) -> Result<Self> {
        if order == 0 {
            return Err(Error::Domain("group order must be at least 1".into()));
        }
        Ok(Self {
            rotation: rotation % order,
            reflected,
            order,
        })
    }

    pub fn identity(order: u32) -> Self {
        Self::new(0, false, order).expect("order checked by caller")
    }

    pub fn rotation(steps: u32, order: u32) -> Self {
        Self::new(steps, false, order).expect("order checked by caller")
    }

    /// The generator reflection `S`.
    pub fn reflection(order: u32) -> Self {
        Self::new(0, true, order).expect("order checked by caller")
    }

    pub fn rotation_index(&self) -> u32 {
        self.rotation
    }

    pub fn is_reflected(&self) -> bool {
        self.reflected
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0 && !self.reflected
    }

    /// Group product `self ∘ other` (apply `other` first).
    ///
    /// `R^a S^f · R^b S^e = R^(a ± b) S^(f xor e)` since `S R^b = R^-b S`.
    pub fn compose(&self, other: &GroupElement) -> Result<GroupElement> {
        if self.order != other.order {
            return Err(Error::OrderMismatch {
                left: self.order,
                right: other.order,
            });
        }
        let n = self.order;
        let b = if self.reflected {
            (n - other.rotation) % n
        } else {
            other.rotation
        };
        GroupElement::new((self.rotation + b) % n, self.reflected ^ other.reflected, n)
    }

    pub fn inverse(&self) -> GroupElement {
        if self.reflected {
            *self
        } else {
            GroupElement {
                rotation: (self.order - self.rotation) % self.order,
                reflected: false,
                order: self.order,
            }
        }
    }

    /// Planar orthogonal representation. Quarter-turn multiples are exact.
    pub fn matrix(&self) -> Mat2 {
        let (c, s) = exact_cos_sin(self.rotation, self.order);
        if self.reflected {
            // [[c, -s], [s, c]] · diag(1, -1)
            [[c, s], [s, -c]]
        } else {
            [[c, -s], [s, c]]
        }
    }

    #[inline]
    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        let m = self.matrix();
        [
            m[0][0] * v[0] + m[0][1] * v[1],
            m[1][0] * v[0] + m[1][1] * v[1],
        ]
    }

    /// Applies the element to every consecutive coordinate pair of `equ`.
    pub fn apply_pairs(&self, equ: &[f64]) -> Result<Vec<f64>> {
        if !equ.len().is_multiple_of(2) {
            return Err(Error::Structure(format!(
                "equivariant block has odd length {}",
                equ.len()
            )));
        }
        let m = self.matrix();
        let mut out = Vec::with_capacity(equ.len());
        for p in equ.chunks_exact(2) {
            out.push(m[0][0] * p[0] + m[0][1] * p[1]);
            out.push(m[1][0] * p[0] + m[1][1] * p[1]);
        }
        Ok(out)
    }

    pub fn act(&self, v: &StructuredVector) -> Result<StructuredVector> {
        Ok(StructuredVector {
            equ: self.apply_pairs(&v.equ)?,
            inv: v.inv.clone(),
        })
    }
}

fn exact_cos_sin(k: u32, n: u32) -> (f64, f64) {
    // k/n as a multiple of a quarter turn when possible
    if (4 * k as u64).is_multiple_of(n as u64) {
        match (4 * k as u64 / n as u64) % 4 {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let theta = 2.0 * PI * k as f64 / n as f64;
        (theta.cos(), theta.sin())
    }
}

/// All `2n` elements: rotations `r0..r(n-1)` followed by `sr0..sr(n-1)`.
pub fn dihedral_elements(order: u32) -> Vec<GroupElement> {
    let mut out = Vec::with_capacity(2 * order as usize);
    for reflected in [false, true] {
        for k in 0..order {
            out.push(GroupElement {
                rotation: k,
                reflected,
                order,
            });
        }
    }
    out
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.reflected {
            write!(f, "sr{}", self.rotation)
        } else {
            write!(f, "r{}", self.rotation)
        }
    }
}

impl GroupElement {
    /// Parses a `r<k>` / `sr<k>` token for a known group order.
    pub fn parse(token: &str, order: u32) -> Result<Self> {
        let t = token.trim();
        let (reflected, digits) = if let Some(rest) = t.strip_prefix("sr") {
            (true, rest)
        } else if let Some(rest) = t.strip_prefix('r') {
            (false, rest)
        } else {
            return Err(Error::BadToken(token.into()));
        };
        let k: u32 = digits.parse().map_err(|_| Error::BadToken(token.into()))?;
        if k >= order {
            return Err(Error::BadToken(format!(
                "{token} (rotation index >= {order})"
            )));
        }
        Self::new(k, reflected, order)
    }
}

/// Self-describing form used by serde: `"<token>@D<n>"`, e.g. `"sr3@D4"`.
impl FromStr for GroupElement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once("@D") {
            Some((tok, n)) => {
                let n: u32 = n.parse().map_err(|_| Error::BadToken(s.into()))?;
                Self::parse(tok, n)
            }
            None => Self::parse(s, DEFAULT_ORDER),
        }
    }
}

impl TryFrom<String> for GroupElement {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GroupElement> for String {
    fn from(g: GroupElement) -> String {
        format!("{g}@D{}", g.order)
    }
}

/// A feature vector split into 2D equivariant blocks and invariant scalars.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StructuredVector {
    pub equ: Vec<f64>,
    pub inv: Vec<f64>,
}

impl StructuredVector {
    pub fn new(equ: Vec<f64>, inv: Vec<f64>) -> Result<Self> {
        if !equ.len().is_multiple_of(2) {
            return Err(Error::Structure(format!(
                "equivariant block has odd length {}",
                equ.len()
            )));
        }
        Ok(Self { equ, inv })
    }

    pub fn from_pairs(pairs: &[[f64; 2]], inv: Vec<f64>) -> Self {
        Self {
            equ: pairs.iter().flatten().copied().collect(),
            inv,
        }
    }

    pub fn pair(&self, i: usize) -> [f64; 2] {
        [self.equ[2 * i], self.equ[2 * i + 1]]
    }

    pub fn n_pairs(&self) -> usize {
        self.equ.len() / 2
    }

    pub fn len(&self) -> usize {
        self.equ.len() + self.inv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
