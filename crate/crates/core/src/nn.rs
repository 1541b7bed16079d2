//! Trainable parameters, layer builders and the Adam optimizer.
//!
//! Each sub-model owns a [`ParamStore`]; layers hold [`ParamId`] handles into
//! it. Before a forward pass the store is bound onto a [`Tape`], which yields
//! the [`Var`] handles the layers compute with. The store also carries the
//! Adam moment buffers so a saved store restores training bit-for-bit.

use std::io::{self, Read, Write};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    value: ArrayD<f64>,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

/// Named parameter set with Adam state.
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    step: u64,
}

/// Tape bindings for every parameter of a store, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            m,
            v,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<f64>) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = value;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).map(ParamId).collect()
    }

    /// Push every parameter as a leaf on the tape.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.value.clone()))
                .collect(),
        }
    }

    /// One Adam update from the gradients of a bound tape. Parameters whose
    /// bound var received no gradient are treated as having zero gradient.
    pub fn adam_step(&mut self, bound: &Bound, grads: &Gradients, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (entry, var) in self.entries.iter_mut().zip(&bound.vars) {
            let zero;
            let g = match grads.get(*var) {
                Some(g) => g,
                None => {
                    zero = ArrayD::zeros(entry.value.raw_dim());
                    &zero
                }
            };
            ndarray::azip!((m in &mut entry.m, &gv in g) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gv;
            });
            ndarray::azip!((v in &mut entry.v, &gv in g) {
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gv * gv;
            });
            ndarray::azip!((p in &mut entry.value, &m in &entry.m, &v in &entry.v) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            });
        }
    }

    /// Flat snapshot of all parameter values, for bitwise comparisons.
    pub fn snapshot(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for e in &self.entries {
            out.extend(e.value.iter().cloned());
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        write_u64(w, self.step)?;
        write_u64(w, self.entries.len() as u64)?;
        for e in &self.entries {
            write_str(w, &e.name)?;
            write_array(w, &e.value)?;
            write_array(w, &e.m)?;
            write_array(w, &e.v)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> io::Result<Self> {
        let step = read_u64(r)?;
        let n = read_u64(r)? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_str(r)?;
            let value = read_array(r)?;
            let m = read_array(r)?;
            let v = read_array(r)?;
            entries.push(ParamEntry { name, value, m, v });
        }
        Ok(ParamStore { entries, step })
    }

    /// Sanity check that two stores describe the same architecture.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // conventional GAN defaults
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> io::Result<String> {
    let n = read_u64(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn write_array(w: &mut impl Write, a: &ArrayD<f64>) -> io::Result<()> {
    write_u64(w, a.ndim() as u64)?;
    for &d in a.shape() {
        write_u64(w, d as u64)?;
    }
    let flat = a.as_standard_layout();
    for &x in flat.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read) -> io::Result<ArrayD<f64>> {
    let ndim = read_u64(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

// ---- initializers ----

pub fn normal_init(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("normal std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn uniform_init(rng: &mut ChaCha12Rng, shape: &[usize], bound: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

// ---- layers ----

/// 2-D convolution layer; owns weight and bias handles.
#[derive(Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = store.add(&format!("{name}.w"), normal_init(rng, &[cout, cin, k, k], std));
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        t.conv2d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}

/// Fully connected layer.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        fin: usize,
        fout: usize,
    ) -> Self {
        let bound = (1.0 / fin as f64).sqrt();
        let w = store.add(&format!("{name}.w"), uniform_init(rng, &[fin, fout], bound));
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[fout])));
        Linear { w, b }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        t.linear(x, p.var(self.w), p.var(self.b))
    }
}

/// Embedding table; rows are looked up by index.
#[derive(Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        let table = store.add(&format!("{name}.table"), normal_init(rng, &[vocab, dim], 0.1));
        Embedding { table, dim }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, indices: &[usize]) -> Var {
        t.index_rows(p.var(self.table), indices)
    }
}

/// Single GRU cell built from primitive ops.
pub struct GruCell {
    wx: Linear, // input -> 3*hidden (r, z, n gates)
    wh: Linear, // hidden -> 3*hidden
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        GruCell {
            wx: Linear::new(store, rng, &format!("{name}.wx"), input, 3 * hidden),
            wh: Linear::new(store, rng, &format!("{name}.wh"), hidden, 3 * hidden),
            hidden,
        }
    }

    /// `x: [N, input]`, `h: [N, hidden]` -> new hidden `[N, hidden]`.
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var, h: Var) -> Var {
        let gx = self.wx.forward(t, p, x);
        let gh = self.wh.forward(t, p, h);
        let n = t.shape(x)[0];
        let hd = self.hidden;
        let split = |t: &mut Tape, v: Var, i: usize| -> Var {
            let r = t.reshape(v, &[n, 3, hd]);
            let c = t.select(r, 1, i);
            t.reshape(c, &[n, hd])
        };
        let xr = split(t, gx, 0);
        let xz = split(t, gx, 1);
        let xn = split(t, gx, 2);
        let hr = split(t, gh, 0);
        let hz = split(t, gh, 1);
        let hn = split(t, gh, 2);
        let r_in = t.add(xr, hr);
        let r = t.sigmoid(r_in);
        let z_in = t.add(xz, hz);
        let z = t.sigmoid(z_in);
        let rhn = t.mul(r, hn);
        let n_in = t.add(xn, rhn);
        let nv = t.tanh(n_in);
        // h' = (1 - z) * n + z * h
        let one_minus_z = t.scalar_affine(z, -1.0, 1.0);
        let a = t.mul(one_minus_z, nv);
        let b = t.mul(z, h);
        t.add(a, b)
    }
}
