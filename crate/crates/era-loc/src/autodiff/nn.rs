//! Neural building blocks on top of the tape: parameters, linear layers,
//! multi-head self-attention, an LSTM cell, Adam, gradient checking and
//! checkpoint serialization.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Flat collection of model parameters; names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    grads_populated: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn grads_populated(&self) -> bool {
        self.grads_populated
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
        self.grads_populated = false;
    }

    /// Registers every parameter value as a tape leaf for one forward pass.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone()))
                .collect(),
        }
    }

    /// Accumulates the tape gradients of the bound leaves into the parameters.
    pub fn accumulate_grads(&mut self, bound: &BoundParams, grads: &[Tensor]) {
        for (p, var) in self.params.iter_mut().zip(&bound.vars) {
            let src = &grads[var.index()];
            for (d, s) in p.grad.data_mut().iter_mut().zip(src.data()) {
                *d += s;
            }
        }
        self.grads_populated = true;
    }

    /// Extracts the per-parameter gradients from a full tape gradient vector,
    /// aligned with the parameter order.
    pub fn grads_for(&self, bound: &BoundParams, grads: &[Tensor]) -> Vec<Tensor> {
        bound.vars.iter().map(|v| grads[v.index()].clone()).collect()
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so the global norm does not exceed `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for p in &mut self.params {
                for v in p.grad.data_mut() {
                    *v *= s;
                }
            }
        }
    }

    /// Deterministic content hash of all parameter values.
    pub fn value_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            for b in p.name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in p.value.data() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Tape leaves for one forward pass, aligned with the ParamSet order.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

impl Var {
    pub(crate) fn index(&self) -> usize {
        self.0
    }
}

fn init_weight<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let len = shape.iter().product();
    Tensor::new(
        shape,
        (0..len).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

/// Fully connected layer: y = x W + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = params.add(
            &format!("{name}.w"),
            init_weight(vec![in_dim, out_dim], in_dim, rng),
        );
        let b = params.add(&format!("{name}.b"), Tensor::zeros(vec![out_dim]));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Applies to the last axis of `x`; leading axes are flattened and restored.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("empty input".into()))?;
        if d != self.in_dim {
            return Err(Error::Shape(format!(
                "linear expects last dim {}, got {d}",
                self.in_dim
            )));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, vec![rows, d]);
        let y = tape.matmul(flat, bound.var(self.w));
        let y = tape.add_row(y, bound.var(self.b));
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        Ok(tape.reshape(y, out_shape))
    }
}

/// Multi-head scaled dot-product self-attention with residual addition.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(params, &format!("{name}.q"), d_model, d_model, rng),
            wk: Linear::new(params, &format!("{name}.k"), d_model, d_model, rng),
            wv: Linear::new(params, &format!("{name}.v"), d_model, d_model, rng),
            wo: Linear::new(params, &format!("{name}.o"), d_model, d_model, rng),
            heads,
            d_model,
        })
    }

    /// tokens: [b, L, d_model] -> [b, L, d_model].
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, tokens: Var) -> Result<Var> {
        let shape = tape.value(tokens).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(Error::Shape(format!(
                "attention expects [b, L, {}], got {shape:?}",
                self.d_model
            )));
        }
        let dh = self.d_model / self.heads;
        let q = self.wq.forward(tape, bound, tokens)?;
        let k = self.wk.forward(tape, bound, tokens)?;
        let v = self.wv.forward(tape, bound, tokens)?;
        let qh = tape.split_heads(q, self.heads);
        let kh = tape.split_heads(k, self.heads);
        let vh = tape.split_heads(v, self.heads);
        let scores = tape.bmm(qh, kh, true);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_last(scores);
        let ctx = tape.bmm(attn, vh, false);
        let merged = tape.merge_heads(ctx, self.heads);
        let out = self.wo.forward(tape, bound, merged)?;
        Ok(tape.add(tokens, out))
    }
}

/// Standard LSTM cell with gate order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: usize,
    pub b: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = input_dim + hidden_dim;
        let w = params.add(
            &format!("{name}.w"),
            init_weight(vec![fan_in, 4 * hidden_dim], fan_in, rng),
        );
        let mut bias = Tensor::zeros(vec![4 * hidden_dim]);
        // Forget-gate bias starts at +1.
        for v in &mut bias.data_mut()[hidden_dim..2 * hidden_dim] {
            *v = 1.0;
        }
        let b = params.add(&format!("{name}.b"), bias);
        LstmCell {
            w,
            b,
            input_dim,
            hidden_dim,
        }
    }

    /// (z [b,d], h_prev [b,n], c_prev [b,n]) -> (h, c).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        z: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let zs = tape.value(z).shape().to_vec();
        let hs = tape.value(h_prev).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.input_dim {
            return Err(Error::Shape(format!(
                "lstm input must be [b, {}], got {zs:?}",
                self.input_dim
            )));
        }
        if hs != [zs[0], self.hidden_dim] || tape.value(c_prev).shape() != hs.as_slice() {
            return Err(Error::Shape("lstm state shape mismatch".into()));
        }
        let n = self.hidden_dim;
        let cat = tape.concat_last(z, h_prev);
        let gates = tape.matmul(cat, bound.var(self.w));
        let gates = tape.add_row(gates, bound.var(self.b));
        let i_raw = tape.slice_last(gates, 0, n);
        let f_raw = tape.slice_last(gates, n, n);
        let g_raw = tape.slice_last(gates, 2 * n, n);
        let o_raw = tape.slice_last(gates, 3 * n, n);
        let i = tape.sigmoid(i_raw);
        let f = tape.sigmoid(f_raw);
        let g = tape.tanh(g_raw);
        let o = tape.sigmoid(o_raw);
        let fc = tape.mul(f, c_prev);
        let ig = tape.mul(i, g);
        let c = tape.add(fc, ig);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc);
        Ok((h, c))
    }
}

/// Adam optimizer with bias correction; moments persist per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_defaults(lr: f64) -> Self {
        Adam::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if !params.grads_populated() {
            return Err(Error::State(
                "adam step requested before any backward pass".into(),
            ));
        }
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, id) in (0..params.len()).enumerate() {
            let grad = params.get(id).grad.data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let value = params.get_mut(id).value.data_mut();
            for j in 0..grad.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                value[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn state_tensors(&self) -> (&[Tensor], &[Tensor], u64) {
        (&self.m, &self.v, self.step)
    }

    fn restore_state(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, step: u64) {
        self.m = m;
        self.v = v;
        self.step = step;
    }
}

/// Result of a finite-difference gradient audit.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compares analytic gradients against central finite differences on a random
/// coordinate subset (step 1e-6). `loss_and_grads` must be a pure function of
/// the parameter values.
pub fn grad_check<F, R: Rng>(
    params: &ParamSet,
    loss_and_grads: F,
    max_coords_per_param: usize,
    rng: &mut R,
) -> GradCheckReport
where
    F: Fn(&ParamSet) -> (f64, Vec<Tensor>),
{
    let h = 1e-6;
    let (_, analytic) = loss_and_grads(params);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    let mut work = params.clone();
    for id in 0..params.len() {
        let len = params.get(id).value.len();
        let mut coords: Vec<usize> = (0..len).collect();
        if len > max_coords_per_param {
            for i in 0..max_coords_per_param {
                let j = rng.gen_range(i..len);
                coords.swap(i, j);
            }
            coords.truncate(max_coords_per_param);
        }
        for &c in &coords {
            let orig = params.get(id).value.data()[c];
            work.get_mut(id).value.data_mut()[c] = orig + h;
            let (fp, _) = loss_and_grads(&work);
            work.get_mut(id).value.data_mut()[c] = orig - h;
            let (fm, _) = loss_and_grads(&work);
            work.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[id].data()[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-5);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params.get(id).name.clone();
            }
        }
    }
    report
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into data.bin.
    offset: u64,
    /// Byte length.
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn write_f64s<W: Write>(out: &mut W, data: &[f64]) -> Result<()> {
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Saves parameters (and optionally optimizer moments) as a checkpoint
/// directory: manifest.json + data.bin (+ optimizer.bin).
pub fn save_checkpoint(
    dir: &Path,
    params: &ParamSet,
    config: &serde_json::Value,
    optimizer: Option<&Adam>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut offset = 0u64;
    let mut data = Vec::new();
    for p in params.iter() {
        let length = (p.value.len() * 8) as u64;
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            length,
        });
        write_f64s(&mut data, p.value.data())?;
        offset += length;
    }
    let manifest = Manifest {
        config: config.clone(),
        tensors: entries,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    std::fs::write(dir.join("data.bin"), data)?;
    if let Some(adam) = optimizer {
        let (m, v, step) = adam.state_tensors();
        let mut opt_data = Vec::new();
        for (mi, vi) in m.iter().zip(v) {
            write_f64s(&mut opt_data, mi.data())?;
            write_f64s(&mut opt_data, vi.data())?;
        }
        write_f64s(&mut opt_data, &[step as f64])?;
        std::fs::write(dir.join("optimizer.bin"), opt_data)?;
    }
    Ok(())
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Loads a checkpoint directory; returns the parameters, the embedded config,
/// and the optimizer state when optimizer.bin is present.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet, serde_json::Value, Option<Adam>)> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut data = Vec::new();
    std::fs::File::open(dir.join("data.bin"))?.read_to_end(&mut data)?;
    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::Config(format!("unsupported dtype {}", e.dtype)));
        }
        let bytes = &data[e.offset as usize..(e.offset + e.length) as usize];
        params.add(&e.name, Tensor::new(e.shape.clone(), read_f64s(bytes)));
    }
    let opt_path = dir.join("optimizer.bin");
    let adam = if opt_path.exists() {
        let raw = read_f64s(&std::fs::read(opt_path)?);
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut pos = 0usize;
        for e in &manifest.tensors {
            let len = e.shape.iter().product::<usize>();
            m.push(Tensor::new(e.shape.clone(), raw[pos..pos + len].to_vec()));
            pos += len;
            v.push(Tensor::new(e.shape.clone(), raw[pos..pos + len].to_vec()));
            pos += len;
        }
        let step = raw[pos] as u64;
        let mut adam = Adam::with_defaults(0.0);
        adam.restore_state(m, v, step);
        Some(adam)
    } else {
        None
    };
    Ok((params, manifest.config, adam))
}
