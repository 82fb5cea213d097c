//! Coordinate MLP `L(x, n, w) -> rgb` with hand-written gradients and Adam.
//!
//! Inputs are the positionally encoded position, normal and view direction,
//! concatenated. The network is a stack of ReLU layers of equal width
//! (optionally re-injecting the encoded input at one layer), one narrower
//! ReLU layer and a sigmoid output of three channels.
//!
//! Weights are stored input-major (`w[i * out + o]`), so the forward pass is
//! a sequence of axpy updates that skip zero ReLU activations.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{ByteReader, ByteWriter, FormatError, FORMAT_VERSION};
use crate::par;

pub trait Scalar: Float + FromPrimitive + NumAssign + Send + Sync + Debug + Default + 'static {}
impl<T> Scalar for T where T: Float + FromPrimitive + NumAssign + Send + Sync + Debug + Default + 'static {}

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("non-finite field input")]
    NonFiniteInput,
    #[error("checkpoint: {0}")]
    Format(#[from] FormatError),
    #[error("encoding dimension mismatch: checkpoint stores {stored}, config implies {expected}")]
    EncodingMismatch { stored: usize, expected: usize },
    #[error("parameter count mismatch: checkpoint stores {stored}, architecture needs {expected}")]
    ParamCount { stored: usize, expected: usize },
    #[error("invalid architecture: {0}")]
    Arch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    pub position_freqs: usize,
    /// Used for both the normal and the view direction.
    pub direction_freqs: usize,
    pub include_raw: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { position_freqs: 10, direction_freqs: 4, include_raw: true }
    }
}

impl EncodingConfig {
    pub fn encoded_len(freqs: usize, include_raw: bool) -> usize {
        3 * (usize::from(include_raw) + 2 * freqs)
    }

    pub fn input_dim(&self) -> usize {
        Self::encoded_len(self.position_freqs, self.include_raw)
            + 2 * Self::encoded_len(self.direction_freqs, self.include_raw)
    }
}

/// `[v, sin(2^0 v), cos(2^0 v), ..., sin(2^(F-1) v), cos(2^(F-1) v)]`.
pub fn positional_encoding<T: Scalar>(v: &[T], freqs: usize, include_raw: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(v.len() * (usize::from(include_raw) + 2 * freqs));
    encode_into(v, freqs, include_raw, &mut out);
    out
}

fn encode_into<T: Scalar>(v: &[T], freqs: usize, include_raw: bool, out: &mut Vec<T>) {
    if include_raw {
        out.extend_from_slice(v);
    }
    let mut scale = T::one();
    let two = T::one() + T::one();
    for _ in 0..freqs {
        out.extend(v.iter().map(|x| (*x * scale).sin()));
        out.extend(v.iter().map(|x| (*x * scale).cos()));
        scale = scale * two;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldArch {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub head_width: usize,
    /// Hidden layer (0-based) whose input is `[encoded input, previous]`.
    /// Written as an integer in config files, or `false` for none.
    #[serde(with = "skip_layer_repr")]
    pub skip_layer: Option<usize>,
}

impl Default for FieldArch {
    fn default() -> Self {
        Self { hidden_layers: 8, hidden_width: 256, head_width: 128, skip_layer: Some(5) }
    }
}

impl FieldArch {
    /// Small network for tests and desk-scale runs.
    pub fn tiny() -> Self {
        Self { hidden_layers: 4, hidden_width: 64, head_width: 32, skip_layer: None }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.hidden_layers == 0 || self.hidden_width == 0 || self.head_width == 0 {
            return Err(FieldError::Arch("layer counts and widths must be >= 1".into()));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.hidden_layers {
                return Err(FieldError::Arch(format!(
                    "skip layer {s} must be in 1..{} (hidden layer count)",
                    self.hidden_layers
                )));
            }
        }
        Ok(())
    }
}

mod skip_layer_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Layer(usize),
        Flag(bool),
    }

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(l) => Repr::Layer(*l),
            None => Repr::Flag(false),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Layer(l) => Ok(Some(l)),
            Repr::Flag(false) => Ok(None),
            Repr::Flag(true) => Err(serde::de::Error::custom("skip_layer = true is ambiguous; give the layer index")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// Offset of the weights; biases follow at `offset + inputs * outputs`.
    offset: usize,
    /// Encoded input is prepended to this layer's input.
    skip: bool,
}

fn layout(enc_dim: usize, arch: &FieldArch) -> (Vec<Layer>, usize) {
    let mut layers = Vec::new();
    let mut offset = 0;
    let mut push = |inputs: usize, outputs: usize, skip: bool| {
        layers.push(Layer { inputs, outputs, offset, skip });
        offset += inputs * outputs + outputs;
    };
    for l in 0..arch.hidden_layers {
        let skip = arch.skip_layer == Some(l);
        let inputs = if l == 0 {
            enc_dim
        } else if skip {
            enc_dim + arch.hidden_width
        } else {
            arch.hidden_width
        };
        push(inputs, arch.hidden_width, skip);
    }
    push(arch.hidden_width, arch.head_width, false);
    push(arch.head_width, 3, false);
    (layers, offset)
}

/// Query point of the field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldInput<T> {
    pub position: [T; 3],
    pub normal: [T; 3],
    pub view_dir: [T; 3],
}

impl FieldInput<f32> {
    pub fn cast<T: Scalar>(&self) -> FieldInput<T> {
        let c = |v: [f32; 3]| v.map(|x| T::from_f32(x).unwrap());
        FieldInput { position: c(self.position), normal: c(self.normal), view_dir: c(self.view_dir) }
    }
}

impl<T: Scalar> FieldInput<T> {
    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(&self.normal).chain(&self.view_dir).all(|v| v.is_finite())
    }
}

/// Network parameters plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParameters<T> {
    pub encoding: EncodingConfig,
    pub arch: FieldArch,
    pub params: Vec<T>,
    layers: Vec<Layer>,
}

/// Samples processed per gradient partial; fixed so reductions do not
/// depend on the thread count.
const GRAD_CHUNK: usize = 32;

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// 8-lane dot product; the lane split is fixed so the result is reproducible.
#[inline]
fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    for (x, y) in ra.iter().zip(rb) {
        acc[0] += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Per-sample activations kept for the backward pass.
struct Trace<T> {
    enc: Vec<T>,
    /// Post-activation output of every layer, the last one is the sigmoid.
    acts: Vec<Vec<T>>,
}

impl<T: Scalar> FieldParameters<T> {
    /// Xavier-uniform weights, zero biases, deterministic in `seed`.
    pub fn new(encoding: EncodingConfig, arch: FieldArch, seed: u64) -> Result<Self, FieldError> {
        arch.validate()?;
        let (layers, count) = layout(encoding.input_dim(), &arch);
        let mut params = vec![T::zero(); count];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &layers {
            let bound = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            for w in &mut params[l.offset..l.offset + l.inputs * l.outputs] {
                *w = T::from_f64(rng.random_range(-bound..bound)).unwrap();
            }
        }
        Ok(Self { encoding, arch, params, layers })
    }

    pub fn from_params(encoding: EncodingConfig, arch: FieldArch, params: Vec<T>) -> Result<Self, FieldError> {
        arch.validate()?;
        let (layers, count) = layout(encoding.input_dim(), &arch);
        if params.len() != count {
            return Err(FieldError::ParamCount { stored: params.len(), expected: count });
        }
        Ok(Self { encoding, arch, params, layers })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Sets the output layer's weights and biases to zero, so the field
    /// returns exactly 0.5 everywhere.
    pub fn zero_output_layer(mut self) -> Self {
        let l = *self.layers.last().unwrap();
        for p in &mut self.params[l.offset..l.offset + l.inputs * l.outputs + l.outputs] {
            *p = T::zero();
        }
        self
    }

    pub fn cast<U: Scalar>(&self) -> FieldParameters<U> {
        FieldParameters {
            encoding: self.encoding,
            arch: self.arch,
            params: self.params.iter().map(|p| U::from_f64(p.to_f64().unwrap()).unwrap()).collect(),
            layers: self.layers.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn arch_summary(&self) -> String {
        let dims: Vec<String> = self
            .layers
            .iter()
            .map(|l| format!("{}->{}{}", l.inputs, l.outputs, if l.skip { " (skip)" } else { "" }))
            .collect();
        format!(
            "encoding(pos_freqs={}, dir_freqs={}, raw={}) input_dim={} hidden={}x{} head={} out=3(sigmoid) params={} layers=[{}]",
            self.encoding.position_freqs,
            self.encoding.direction_freqs,
            self.encoding.include_raw,
            self.encoding.input_dim(),
            self.arch.hidden_layers,
            self.arch.hidden_width,
            self.arch.head_width,
            self.params.len(),
            dims.join(", ")
        )
    }

    fn encode(&self, input: &FieldInput<T>) -> Vec<T> {
        let e = &self.encoding;
        let mut out = Vec::with_capacity(e.input_dim());
        encode_into(&input.position, e.position_freqs, e.include_raw, &mut out);
        encode_into(&input.normal, e.direction_freqs, e.include_raw, &mut out);
        encode_into(&input.view_dir, e.direction_freqs, e.include_raw, &mut out);
        out
    }

    fn trace(&self, input: &FieldInput<T>) -> Trace<T> {
        let enc = self.encode(input);
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let w = &self.params[l.offset..l.offset + l.inputs * l.outputs];
            let mut z = self.params[l.offset + l.inputs * l.outputs..l.offset + l.inputs * l.outputs + l.outputs].to_vec();
            let prev: &[T] = if li == 0 { &enc } else { &acts[li - 1] };
            let mut row = 0;
            let mut feed = |x: &[T], z: &mut [T]| {
                for &xi in x {
                    if xi != T::zero() {
                        axpy(xi, &w[row * l.outputs..(row + 1) * l.outputs], z);
                    }
                    row += 1;
                }
            };
            if l.skip {
                feed(&enc, &mut z);
            }
            feed(prev, &mut z);
            if li == last {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            } else {
                z.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            acts.push(z);
        }
        Trace { enc, acts }
    }

    /// Field value at one query point.
    pub fn forward(&self, input: &FieldInput<T>) -> Result<[T; 3], FieldError> {
        if !input.is_finite() {
            return Err(FieldError::NonFiniteInput);
        }
        Ok(self.forward_unchecked(input))
    }

    fn forward_unchecked(&self, input: &FieldInput<T>) -> [T; 3] {
        let t = self.trace(input);
        let o = t.acts.last().unwrap();
        [o[0], o[1], o[2]]
    }

    /// Forward pass over a batch, evaluated in parallel.
    pub fn forward_batch(&self, inputs: &[FieldInput<T>]) -> Result<Vec<[T; 3]>, FieldError> {
        if inputs.iter().any(|i| !i.is_finite()) {
            return Err(FieldError::NonFiniteInput);
        }
        Ok(par::map_slice(inputs, |i| self.forward_unchecked(i)))
    }

    /// Accumulates `d(upstream . out)/d(theta)` for one traced sample.
    fn accumulate(&self, t: &Trace<T>, upstream: &[T; 3], grad: &mut [T]) {
        let last = self.layers.len() - 1;
        let out = &t.acts[last];
        let mut delta: Vec<T> = (0..3).map(|c| upstream[c] * out[c] * (T::one() - out[c])).collect();
        for li in (0..self.layers.len()).rev() {
            let l = self.layers[li];
            let wlen = l.inputs * l.outputs;
            let prev: &[T] = if li == 0 { &t.enc } else { &t.acts[li - 1] };
            let (gw, gb) = grad[l.offset..l.offset + wlen + l.outputs].split_at_mut(wlen);
            for (b, d) in gb.iter_mut().zip(&delta) {
                *b += *d;
            }
            let enc_rows = if l.skip { t.enc.len() } else { 0 };
            let inputs = (l.skip.then_some(t.enc.as_slice()).into_iter().flatten()).chain(prev.iter());
            for (row, &xi) in inputs.enumerate() {
                if xi != T::zero() {
                    axpy(xi, &delta, &mut gw[row * l.outputs..(row + 1) * l.outputs]);
                }
            }
            if li == 0 {
                break;
            }
            let w = &self.params[l.offset..l.offset + wlen];
            let next: Vec<T> = prev
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    if h > T::zero() {
                        let row = enc_rows + i;
                        dot_lanes(&w[row * l.outputs..(row + 1) * l.outputs], &delta)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            delta = next;
        }
    }

    /// Runs the forward pass, asks `upstream(index, output)` for the loss
    /// gradient with respect to each output, and returns the outputs with
    /// the summed parameter gradient.
    pub fn forward_backward<F>(&self, inputs: &[FieldInput<T>], upstream: F) -> (Vec<[T; 3]>, Vec<T>)
    where
        F: Fn(usize, &[T; 3]) -> [T; 3] + Sync + Send,
    {
        let chunks = inputs.len().div_ceil(GRAD_CHUNK);
        let parts = par::map_range(chunks, |c| {
            let lo = c * GRAD_CHUNK;
            let hi = (lo + GRAD_CHUNK).min(inputs.len());
            let mut grad = vec![T::zero(); self.params.len()];
            let mut outs = Vec::with_capacity(hi - lo);
            for (j, input) in inputs[lo..hi].iter().enumerate() {
                let t = self.trace(input);
                let o = t.acts.last().unwrap();
                let out = [o[0], o[1], o[2]];
                let up = upstream(lo + j, &out);
                if up.iter().any(|u| *u != T::zero()) {
                    self.accumulate(&t, &up, &mut grad);
                }
                outs.push(out);
            }
            (outs, grad)
        });
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut grads = Vec::with_capacity(parts.len());
        for (o, g) in parts {
            outputs.extend(o);
            grads.push(g);
        }
        let grad = par::tree_sum_vecs(grads).unwrap_or_else(|| vec![T::zero(); self.params.len()]);
        (outputs, grad)
    }

    /// Gradient of `sum_b upstream[b] . out_b`.
    pub fn backward(&self, inputs: &[FieldInput<T>], upstream: &[[T; 3]]) -> Vec<T> {
        assert_eq!(inputs.len(), upstream.len());
        self.forward_backward(inputs, |i, _| upstream[i]).1
    }

    /// Mean L1 colour loss `mean_b |out_b - ref_b|_1` and its gradient, plus
    /// an optional per-sample external output gradient added on top.
    /// The subgradient of `|r|` at `r = 0` is taken as 0.
    pub fn l1_loss_and_gradient(
        &self,
        inputs: &[FieldInput<T>],
        references: &[[T; 3]],
        external: Option<&[[T; 3]]>,
    ) -> (T, Vec<T>) {
        assert_eq!(inputs.len(), references.len());
        assert!(!inputs.is_empty(), "empty batch");
        let inv_b = T::one() / T::from_usize(inputs.len()).unwrap();
        let (outs, grad) = self.forward_backward(inputs, |i, out| {
            let r = &references[i];
            let mut up = [T::zero(); 3];
            for c in 0..3 {
                let d = out[c] - r[c];
                up[c] = if d > T::zero() {
                    inv_b
                } else if d < T::zero() {
                    -inv_b
                } else {
                    T::zero()
                };
                if let Some(e) = external {
                    up[c] += e[i][c];
                }
            }
            up
        });
        let per: Vec<f64> = outs
            .iter()
            .zip(references)
            .map(|(o, r)| (0..3).map(|c| (o[c] - r[c]).abs().to_f64().unwrap()).sum())
            .collect();
        let loss = par::tree_sum(&per) / inputs.len() as f64;
        (T::from_f64(loss).unwrap(), grad)
    }

    pub fn mean_l1_loss(&self, inputs: &[FieldInput<T>], references: &[[T; 3]]) -> Result<f64, FieldError> {
        let outs = self.forward_batch(inputs)?;
        let per: Vec<f64> = outs
            .iter()
            .zip(references)
            .map(|(o, r)| (0..3).map(|c| (o[c] - r[c]).abs().to_f64().unwrap()).sum())
            .collect();
        Ok(par::tree_sum(&per) / inputs.len().max(1) as f64)
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub const DEFAULT_LR: f64 = 1e-4;

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1 = T::from_f64(self.beta1).unwrap();
        let b2 = T::from_f64(self.beta2).unwrap();
        let c1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32)).unwrap();
        let c2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32)).unwrap();
        let lr = T::from_f64(self.lr).unwrap();
        let eps = T::from_f64(self.eps).unwrap();
        let one = T::one();
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// NFLD checkpoint, version 1:
///
/// ```text
/// "NFLD" u32:version
/// u32:position_freqs u32:direction_freqs u8:include_raw
/// u32:hidden_layers u32:hidden_width u32:head_width i32:skip_layer (-1 = none)
/// u32:input_dim u64:param_count  param_count x f32
/// ```
pub fn encode_checkpoint(p: &FieldParameters<f32>) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.magic(b"NFLD")
        .u32(FORMAT_VERSION)
        .u32(p.encoding.position_freqs as u32)
        .u32(p.encoding.direction_freqs as u32)
        .u8(u8::from(p.encoding.include_raw))
        .u32(p.arch.hidden_layers as u32)
        .u32(p.arch.hidden_width as u32)
        .u32(p.arch.head_width as u32)
        .i32(p.arch.skip_layer.map_or(-1, |s| s as i32))
        .u32(p.encoding.input_dim() as u32)
        .u64(p.params.len() as u64)
        .f32s(p.params.iter().copied());
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<FieldParameters<f32>, FieldError> {
    let mut r = ByteReader::new(bytes);
    r.magic(b"NFLD")?;
    r.version()?;
    let encoding = EncodingConfig {
        position_freqs: r.u32("position_freqs")? as usize,
        direction_freqs: r.u32("direction_freqs")? as usize,
        include_raw: r.u8("include_raw")? != 0,
    };
    let skip;
    let arch = FieldArch {
        hidden_layers: r.u32("hidden_layers")? as usize,
        hidden_width: r.u32("hidden_width")? as usize,
        head_width: r.u32("head_width")? as usize,
        skip_layer: {
            skip = r.i32("skip_layer")?;
            (skip >= 0).then_some(skip as usize)
        },
    };
    let stored_dim = r.u32("input_dim")? as usize;
    if stored_dim != encoding.input_dim() {
        return Err(FieldError::EncodingMismatch { stored: stored_dim, expected: encoding.input_dim() });
    }
    let count = r.u64("param_count")? as usize;
    r.expect_remaining(count as u64 * 4)?;
    FieldParameters::from_params(encoding, arch, r.f32s(count))
}

pub fn save_checkpoint(p: &FieldParameters<f32>, path: &std::path::Path) -> Result<(), FieldError> {
    Ok(crate::io::write_atomic(path, &encode_checkpoint(p))?)
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<FieldParameters<f32>, FieldError> {
    let bytes = std::fs::read(path).map_err(FormatError::from)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: [f64; 3]) -> [f64; 3] {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.map(|x| x / n)
    }

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize) -> Vec<FieldInput<f64>> {
        (0..n)
            .map(|_| FieldInput {
                position: [0; 3].map(|_| rng.random_range(-1.0..1.0)),
                normal: unit([0; 3].map(|_| rng.random_range(-1.0..1.0))),
                view_dir: unit([0; 3].map(|_| rng.random_range(-1.0..1.0))),
            })
            .collect()
    }

    fn small_field(seed: u64, skip: bool) -> FieldParameters<f64> {
        let arch = FieldArch { hidden_layers: 2, hidden_width: 8, head_width: 8, skip_layer: skip.then_some(1) };
        let enc = EncodingConfig { position_freqs: 3, direction_freqs: 2, include_raw: true };
        FieldParameters::new(enc, arch, seed).unwrap()
    }

    #[test]
    fn encoding_examples() {
        let z = positional_encoding(&[0.0f64; 3], 4, true);
        assert_eq!(z.len(), 3 * (1 + 8));
        for f in 0..4 {
            assert!(z[3 + f * 6..3 + f * 6 + 3].iter().all(|v| *v == 0.0));
            assert!(z[6 + f * 6..6 + f * 6 + 3].iter().all(|v| *v == 1.0));
        }
        let v = [0.3f64, -1.2, 2.0];
        assert_eq!(positional_encoding(&v, 0, true), v.to_vec());
        let e = positional_encoding(&v, 3, true);
        assert_eq!(e.len(), 3 * (1 + 6));
        assert_eq!(e[3 + 6 + 1], (-1.2f64 * 2.0).sin());
        assert_eq!(EncodingConfig::default().input_dim(), 63 + 27 + 27);
    }

    #[test]
    fn default_architecture_shapes() {
        let p = FieldParameters::<f32>::new(EncodingConfig::default(), FieldArch::default(), 0).unwrap();
        let shapes: Vec<(usize, usize)> = p.layers.iter().map(|l| (l.inputs, l.outputs)).collect();
        let mut want = vec![(117, 256)];
        want.extend((1..8).map(|l| (if l == 5 { 117 + 256 } else { 256 }, 256)));
        want.push((256, 128));
        want.push((128, 3));
        assert_eq!(shapes, want);
        assert!(p.layers[5].skip);
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let p = FieldParameters::<f32>::new(EncodingConfig::default(), FieldArch::tiny(), 3).unwrap().zero_output_layer();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in random_inputs(&mut rng, 20) {
            assert_eq!(p.forward(&i.cast_f32()).unwrap(), [0.5; 3]);
        }
    }

    impl FieldInput<f64> {
        fn cast_f32(&self) -> FieldInput<f32> {
            let c = |v: [f64; 3]| v.map(|x| x as f32);
            FieldInput { position: c(self.position), normal: c(self.normal), view_dir: c(self.view_dir) }
        }
    }

    #[test]
    fn batched_forward_equals_single() {
        let p = small_field(4, true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = random_inputs(&mut rng, 70);
        let batch = p.forward_batch(&ins).unwrap();
        for (i, o) in ins.iter().zip(batch) {
            assert_eq!(p.forward(i).unwrap(), o);
        }
        let mut bad = ins[0];
        bad.position[0] = f64::NAN;
        assert!(matches!(p.forward(&bad), Err(FieldError::NonFiniteInput)));
        assert!(p.forward_batch(&[bad]).is_err());
    }

    /// Central finite differences of the mean L1 loss in f64.
    fn fd_check(p: &FieldParameters<f64>, ins: &[FieldInput<f64>], refs: &[[f64; 3]], probes: &[usize]) {
        let (_, g) = p.l1_loss_and_gradient(ins, refs, None);
        let h = 1e-6;
        for &k in probes {
            let mut plus = p.clone();
            plus.params[k] += h;
            let mut minus = p.clone();
            minus.params[k] -= h;
            let fd = (plus.mean_l1_loss(ins, refs).unwrap() - minus.mean_l1_loss(ins, refs).unwrap()) / (2.0 * h);
            let scale = g[k].abs().max(fd.abs()).max(1e-6);
            assert!((g[k] - fd).abs() / scale < 1e-4, "param {k}: analytic {} vs fd {fd}", g[k]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for skip in [false, true] {
            let p = small_field(5, skip);
            let ins = random_inputs(&mut rng, 12);
            let refs: Vec<[f64; 3]> = (0..12).map(|_| [0; 3].map(|_| rng.random_range(0.0..1.0))).collect();
            let probes: Vec<usize> = (0..p.param_count()).step_by(7).collect();
            fd_check(&p, &ins, &refs, &probes);
        }
    }

    #[test]
    fn exact_predictions_give_zero_gradient() {
        let p = small_field(8, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = random_inputs(&mut rng, 10);
        let refs = p.forward_batch(&ins).unwrap();
        let (loss, g) = p.l1_loss_and_gradient(&ins, &refs, None);
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let p = small_field(9, true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = random_inputs(&mut rng, 40);
        let refs: Vec<[f64; 3]> = (0..40).map(|_| [0.2, 0.5, 0.9]).collect();
        let (l1, g1) = p.l1_loss_and_gradient(&ins, &refs, None);
        let ins2: Vec<_> = ins.iter().chain(&ins).copied().collect();
        let refs2: Vec<_> = refs.iter().chain(&refs).copied().collect();
        let (l2, g2) = p.l1_loss_and_gradient(&ins2, &refs2, None);
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn external_gradient_is_added() {
        let p = small_field(12, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ins = random_inputs(&mut rng, 5);
        let refs = p.forward_batch(&ins).unwrap();
        let ext: Vec<[f64; 3]> = (0..5).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
        let (_, g) = p.l1_loss_and_gradient(&ins, &refs, Some(&ext));
        assert_eq!(g, p.backward(&ins, &ext));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-3, 0.5, -2.0, 40.0] {
            let mut s = AdamState::<f64>::new(3, 1e-4);
            let mut theta = vec![1.0, -2.0, 0.5];
            let before = theta.clone();
            s.step(&mut theta, &[g; 3]);
            for (a, b) in theta.iter().zip(&before) {
                let d = (a - b).abs();
                assert!((d - 1e-4).abs() / 1e-4 < 1e-5, "g={g} step {d}");
                assert_eq!((a - b).signum(), -g.signum());
            }
        }
        let mut s = AdamState::<f64>::new(2, 1e-4);
        let mut theta = vec![0.25, 3.0];
        for _ in 0..100 {
            s.step(&mut theta, &[0.0, 0.0]);
        }
        assert_eq!(theta, vec![0.25, 3.0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut s = AdamState::<f32>::new(4, 1e-3);
            let mut theta = vec![0.1f32, 0.2, 0.3, 0.4];
            for k in 0..50 {
                let g: Vec<f32> = theta.iter().map(|t| (t * k as f32).sin()).collect();
                s.step(&mut theta, &g);
            }
            theta
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let p = FieldParameters::<f32>::new(EncodingConfig::default(), FieldArch::tiny(), 1).unwrap();
        let bytes = encode_checkpoint(&p);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);

        // Corrupt the stored input dimension.
        let mut bad = bytes.clone();
        let off = 4 + 4 + 4 + 4 + 1 + 4 + 4 + 4 + 4;
        bad[off] = bad[off].wrapping_add(1);
        assert!(matches!(decode_checkpoint(&bad), Err(FieldError::EncodingMismatch { .. })));

        let mut short = bytes;
        short.truncate(short.len() - 4);
        assert!(decode_checkpoint(&short).is_err());
        assert!(FieldParameters::<f32>::from_params(EncodingConfig::default(), FieldArch::tiny(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn arch_validation() {
        assert!(FieldArch { skip_layer: Some(0), ..FieldArch::default() }.validate().is_err());
        assert!(FieldArch { skip_layer: Some(8), ..FieldArch::default() }.validate().is_err());
        assert!(FieldArch { hidden_width: 0, ..FieldArch::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn outputs_are_in_unit_interval(seed in any::<u64>(), x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
            let p = small_field(seed, seed % 2 == 0);
            let i = FieldInput { position: [x, y, z], normal: unit([x, 1.0, z]), view_dir: unit([1.0, y, -z]) };
            let o = p.forward(&i).unwrap();
            prop_assert!(o.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }
}
