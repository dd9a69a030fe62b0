//! Small dense feedforward networks with hand-written reverse mode, Adam, and
//! a binary checkpoint container.
//!
//! Parameters live in one flat `Vec<f64>`; layer `l` stores its weight matrix
//! row-major (`out × in`) followed by its bias.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    fn code(self) -> u64 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
            Activation::Sigmoid => 3,
        }
    }

    fn from_code(c: u64) -> Result<Self> {
        Ok(match c {
            0 => Activation::Identity,
            1 => Activation::Tanh,
            2 => Activation::Relu,
            3 => Activation::Sigmoid,
            _ => return Err(Error::Checkpoint(format!("unknown activation code {c}"))),
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Post-activation outputs of every layer, input first.
#[derive(Clone, Debug)]
pub struct Trace {
    layers: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("trace has the input layer")
    }
}

impl Mlp {
    /// `sizes = [in, h_1, ..., out]`; one activation per weight layer.
    pub fn zeros(sizes: &[usize], activations: &[Activation]) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 || sizes.contains(&0) {
            return Err(Error::Shape(format!(
                "layer sizes {sizes:?} do not fit {} activations",
                activations.len()
            )));
        }
        let n: usize = sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; n],
        })
    }

    /// Hidden layers share `hidden`, the last layer uses `output`.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_act: Activation,
        output_act: Activation,
    ) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut acts = vec![hidden_act; hidden.len()];
        acts.push(output_act);
        Self::zeros(&sizes, &acts)
    }

    /// Fan-in scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`, zero biases;
    /// the last layer is additionally scaled by `last_gain`.
    pub fn init<R: Rng>(&mut self, last_gain: f64, rng: &mut R) {
        let n_layers = self.n_layers();
        let mut off = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let k = 1.0 / (fan_in as f64).sqrt() * if l + 1 == n_layers { last_gain } else { 1.0 };
            for w in &mut self.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-1.0..=1.0) * k;
            }
            off += fan_in * fan_out;
            self.params[off..off + fan_out].fill(0.0);
            off += fan_out;
        }
    }

    pub fn n_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Offsets of `(weights, bias)` of layer `l` in the flat vector.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self
            .sizes
            .windows(2)
            .take(l)
            .map(|w| w[1] * (w[0] + 1))
            .sum();
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut off = 0;
        for l in 0..self.n_layers() {
            cur = self.layer(l, &cur, &mut off);
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut layers = Vec::with_capacity(self.n_layers() + 1);
        layers.push(x.to_vec());
        let mut off = 0;
        for l in 0..self.n_layers() {
            let next = self.layer(l, &layers[l], &mut off);
            layers.push(next);
        }
        Ok(Trace { layers })
    }

    fn layer(&self, l: usize, x: &[f64], off: &mut usize) -> Vec<f64> {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[*off..*off + n_in * n_out];
        let b = &self.params[*off + n_in * n_out..*off + n_in * n_out + n_out];
        *off += n_out * (n_in + 1);
        let act = self.activations[l];
        w.chunks_exact(n_in)
            .zip(b)
            .map(|(row, bias)| act.apply(row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias))
            .collect()
    }

    /// Reverse pass. Adds `∂(out_grad · y)/∂θ` into `param_grad` and returns
    /// the gradient with respect to the input.
    pub fn backward(&self, trace: &Trace, out_grad: &[f64], param_grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(out_grad.len(), self.output_dim(), "output gradient width");
        assert_eq!(
            param_grad.len(),
            self.params.len(),
            "parameter gradient width"
        );
        let mut delta = out_grad.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let y = &trace.layers[l + 1];
            let x = &trace.layers[l];
            let act = self.activations[l];
            for (d, yy) in delta.iter_mut().zip(y) {
                *d *= act.grad_from_output(*yy);
            }
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut param_grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
                param_grad[b_off + o] += d;
            }
            let w = &self.params[w_off..b_off];
            let mut prev = vec![0.0; n_in];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (p, wij) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wij;
                }
            }
            debug_assert_eq!(delta.len(), n_out);
            delta = prev;
        }
        delta
    }

    /// Serializes the architecture and parameters into checkpoint sections
    /// `<prefix>.sizes`, `<prefix>.acts`, `<prefix>.params`.
    pub fn write_sections(&self, prefix: &str, ck: &mut Checkpoint) {
        ck.put_u64(
            &format!("{prefix}.sizes"),
            self.sizes.iter().map(|&s| s as u64).collect(),
        );
        ck.put_u64(
            &format!("{prefix}.acts"),
            self.activations.iter().map(|a| a.code()).collect(),
        );
        ck.put_f64(&format!("{prefix}.params"), self.params.clone());
    }

    pub fn read_sections(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let sizes: Vec<usize> = ck
            .u64s(&format!("{prefix}.sizes"))?
            .iter()
            .map(|&s| s as usize)
            .collect();
        let acts = ck
            .u64s(&format!("{prefix}.acts"))?
            .iter()
            .map(|&c| Activation::from_code(c))
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self::zeros(&sizes, &acts)?;
        let params = ck.f64s(&format!("{prefix}.params"))?;
        if params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "{prefix}: parameter count mismatch"
            )));
        }
        net.params.copy_from_slice(params);
        Ok(net)
    }
}

/// Scales `grads` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let n = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if n > max_norm && n > 0.0 {
        let k = max_norm / n;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    n
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One descent step on `params` given the loss gradient.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn write_sections(&self, prefix: &str, ck: &mut Checkpoint) {
        ck.put_f64(
            &format!("{prefix}.hyper"),
            vec![self.lr, self.beta1, self.beta2, self.eps],
        );
        ck.put_u64(&format!("{prefix}.step"), vec![self.step]);
        ck.put_f64(&format!("{prefix}.m"), self.m.clone());
        ck.put_f64(&format!("{prefix}.v"), self.v.clone());
    }

    pub fn read_sections(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let h = ck.f64s(&format!("{prefix}.hyper"))?;
        if h.len() != 4 {
            return Err(Error::Checkpoint(format!("{prefix}: bad optimizer header")));
        }
        let step = *ck
            .u64s(&format!("{prefix}.step"))?
            .first()
            .ok_or_else(|| Error::Checkpoint(format!("{prefix}: missing step")))?;
        let m = ck.f64s(&format!("{prefix}.m"))?.to_vec();
        let v = ck.f64s(&format!("{prefix}.v"))?.to_vec();
        if m.len() != v.len() {
            return Err(Error::Checkpoint(format!(
                "{prefix}: moment length mismatch"
            )));
        }
        Ok(Self {
            lr: h[0],
            beta1: h[1],
            beta2: h[2],
            eps: h[3],
            step,
            m,
            v,
        })
    }
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SGFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Section {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Text(String),
}

/// Named sections in insertion order, tagged with an environment fingerprint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    sections: Vec<(String, Section)>,
}

impl Checkpoint {
    pub fn new(fingerprint: u64) -> Self {
        Self {
            fingerprint,
            sections: Vec::new(),
        }
    }

    fn put(&mut self, name: &str, s: Section) {
        match self.sections.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = s,
            None => self.sections.push((name.to_string(), s)),
        }
    }

    pub fn put_f64(&mut self, name: &str, v: Vec<f64>) {
        self.put(name, Section::F64(v));
    }

    pub fn put_u64(&mut self, name: &str, v: Vec<u64>) {
        self.put(name, Section::U64(v));
    }

    pub fn put_text(&mut self, name: &str, v: impl Into<String>) {
        self.put(name, Section::Text(v.into()));
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    fn missing(name: &str) -> Error {
        Error::Checkpoint(format!("missing or mistyped section `{name}`"))
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name) {
            Some(Section::F64(v)) => Ok(v),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Section::U64(v)) => Ok(v),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Section::Text(v)) => Ok(v),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.fingerprint.to_le_bytes())?;
        w.write_all(&(self.sections.len() as u64).to_le_bytes())?;
        for (name, s) in &self.sections {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            match s {
                Section::F64(v) => {
                    w.write_all(&[0])?;
                    w.write_all(&(v.len() as u64).to_le_bytes())?;
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                Section::U64(v) => {
                    w.write_all(&[1])?;
                    w.write_all(&(v.len() as u64).to_le_bytes())?;
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                Section::Text(t) => {
                    w.write_all(&[2])?;
                    w.write_all(&(t.len() as u64).to_le_bytes())?;
                    w.write_all(t.as_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Header {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut head = [0u8; 24];
        r.read_exact(&mut head)
            .map_err(|_| bad("file shorter than the header"))?;
        if head[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let fingerprint = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
        let n = u64::from_le_bytes(head[16..24].try_into().expect("8 bytes"));
        let mut ck = Checkpoint::new(fingerprint);
        let truncated = || bad("truncated section");
        for _ in 0..n {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4).map_err(|_| truncated())?;
            let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut name).map_err(|_| truncated())?;
            let name = String::from_utf8(name).map_err(|_| bad("section name is not UTF-8"))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag).map_err(|_| truncated())?;
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8).map_err(|_| truncated())?;
            let len = u64::from_le_bytes(b8) as usize;
            let s = match tag[0] {
                0 | 1 => {
                    let mut raw = vec![0u8; len.checked_mul(8).ok_or_else(truncated)?];
                    r.read_exact(&mut raw).map_err(|_| truncated())?;
                    let words = raw.chunks_exact(8).map(|c| c.try_into().expect("8 bytes"));
                    if tag[0] == 0 {
                        Section::F64(words.map(f64::from_le_bytes).collect())
                    } else {
                        Section::U64(words.map(u64::from_le_bytes).collect())
                    }
                }
                2 => {
                    let mut raw = vec![0u8; len];
                    r.read_exact(&mut raw).map_err(|_| truncated())?;
                    Section::Text(
                        String::from_utf8(raw).map_err(|_| bad("text section is not UTF-8"))?,
                    )
                }
                _ => return Err(bad("unknown section tag")),
            };
            ck.sections.push((name, s));
        }
        Ok(ck)
    }
}

/// Central-difference gradient of a scalar function of the parameters.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(params: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let x0 = p[i];
            p[i] = x0 + h;
            let up = f(&p);
            p[i] = x0 - h;
            let down = f(&p);
            p[i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative gradient error `|a - b| / max(1, |a|, |b|)` maximized over entries.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
