//! The deep hash function.
//!
//! A stack of fully-connected ReLU layers produces two taps, `f_a` (the
//! skipping layer) and `f_b` (the last hidden layer). Their concatenation
//! feeds a bias-free hash layer `W` with `K` rows:
//!
//! * binary codes: `sign(W [f_a; f_b])`, with `sign(0) = +1`
//! * relaxed codes: `2 * logistic(W [f_a; f_b]) - 1`, used during training
//!
//! Dropout (inverted convention) is applied to hidden activations on their
//! way into the next hidden layer. The hash layer always sees the undropped
//! taps.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// An affine layer: `weights` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    pub layers: Vec<Dense>,
    /// Layer whose activation is `f_a`.
    pub tap_a: usize,
    /// Layer whose activation is `f_b`; always the last layer.
    pub tap_b: usize,
}

impl FeatureNet {
    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn dim_a(&self) -> usize {
        self.layers[self.tap_a].output_dim()
    }

    pub fn dim_b(&self) -> usize {
        self.layers[self.tap_b].output_dim()
    }
}

/// Bias-free projection from `[f_a; f_b]` to `K` code bits.
#[derive(Clone, Debug, PartialEq)]
pub struct HashLayer {
    pub weights: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashModel {
    pub feature_net: FeatureNet,
    pub hash_layer: HashLayer,
}

/// Layer widths for [`init_weights`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    /// Output width of each hidden layer; `f_b` is the last one.
    pub hidden: Vec<usize>,
    /// Index into `hidden` of the skipping layer `f_a`.
    pub tap_a: usize,
    pub bits: usize,
}

impl Architecture {
    /// Two hidden blocks, `input -> a -> b`, with `f_a` the first.
    pub fn two_block(input_dim: usize, dim_a: usize, dim_b: usize, bits: usize) -> Self {
        Architecture {
            input_dim,
            hidden: vec![dim_a, dim_b],
            tap_a: 0,
            bits,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input dimension must be positive".into()));
        }
        if self.hidden.len() < 2 {
            return Err(Error::InvalidArgument(
                "the feature net needs at least two hidden layers".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        if self.tap_a + 1 >= self.hidden.len() {
            return Err(Error::InvalidArgument(
                "the skipping layer must precede the last hidden layer".into(),
            ));
        }
        if self.bits == 0 {
            return Err(Error::InvalidArgument("code length must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform fan-in initialization: weights in `[-sqrt(3/fan_in), sqrt(3/fan_in)]`
/// (unit-variance scaled by `1/sqrt(fan_in)`), biases zero.
pub fn init_weights<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<HashModel> {
    arch.validate()?;
    let mut layers = Vec::with_capacity(arch.hidden.len());
    let mut fan_in = arch.input_dim;
    for &width in &arch.hidden {
        layers.push(Dense {
            weights: uniform_matrix(width, fan_in, rng),
            bias: vec![0.0; width],
        });
        fan_in = width;
    }
    let concat = arch.hidden[arch.tap_a] + arch.hidden[arch.hidden.len() - 1];
    let model = HashModel {
        feature_net: FeatureNet {
            layers,
            tap_a: arch.tap_a,
            tap_b: arch.hidden.len() - 1,
        },
        hash_layer: HashLayer {
            weights: uniform_matrix(arch.bits, concat, rng),
        },
    };
    Ok(model)
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (3.0 / cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Whether a parameter tensor is a weight matrix (subject to weight decay)
/// or a bias vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Gradients with the same shapes as a [`HashModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterGradients {
    pub layers: Vec<Dense>,
    pub hash: Matrix,
}

impl ParameterGradients {
    pub fn zeros_like(model: &HashModel) -> Self {
        ParameterGradients {
            layers: model
                .feature_net
                .layers
                .iter()
                .map(|l| Dense {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            hash: Matrix::zeros(
                model.hash_layer.weights.rows(),
                model.hash_layer.weights.cols(),
            ),
        }
    }

    /// Flat views in [`HashModel::params`] order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        out.push(self.hash.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.hash.as_mut_slice());
        out
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

/// Per-item keep indicators for each hidden layer that feeds another hidden
/// layer (all but the last).
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub keep_prob: f64,
    /// `masks[l]` is `batch x width_l`; 1.0 keeps the unit, 0.0 drops it.
    pub masks: Vec<Matrix>,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(
        model: &HashModel,
        batch: usize,
        keep_prob: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dropout keep probability {keep_prob} outside (0, 1]"
            )));
        }
        let layers = &model.feature_net.layers;
        let masks = layers[..layers.len() - 1]
            .iter()
            .map(|l| {
                let data = (0..batch * l.output_dim())
                    .map(|_| if rng.gen::<f64>() < keep_prob { 1.0 } else { 0.0 })
                    .collect();
                Matrix::from_vec(batch, l.output_dim(), data)
            })
            .collect();
        Ok(DropoutMask { keep_prob, masks })
    }
}

/// Everything backprop needs from one relaxed forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input seen by each feature layer (after dropout of the previous one).
    pub inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
    /// Undropped ReLU outputs of each feature layer.
    pub activations: Vec<Matrix>,
    /// `[f_a; f_b]` per item.
    pub concat: Matrix,
    pub hash_pre_activations: Matrix,
    pub codes: Matrix,
    pub mask: Option<DropoutMask>,
}

impl HashModel {
    pub fn bits(&self) -> usize {
        self.hash_layer.weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.feature_net.input_dim()
    }

    /// Checks that the layer chain composes and every value is finite.
    pub fn validate(&self) -> Result<()> {
        let net = &self.feature_net;
        if net.layers.len() < 2 {
            return Err(Error::Shape("feature net needs at least two layers".into()));
        }
        if net.tap_a >= net.tap_b || net.tap_b != net.layers.len() - 1 {
            return Err(Error::Shape(format!(
                "taps ({}, {}) invalid for {} layers",
                net.tap_a,
                net.tap_b,
                net.layers.len()
            )));
        }
        for (i, l) in net.layers.iter().enumerate() {
            if l.weights.rows() == 0 || l.weights.cols() == 0 {
                return Err(Error::Shape(format!("layer {i} has a zero dimension")));
            }
            if l.bias.len() != l.weights.rows() {
                return Err(Error::Shape(format!("layer {i} bias length")));
            }
            if i > 0 && l.input_dim() != net.layers[i - 1].output_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs, previous layer produces {}",
                    l.input_dim(),
                    net.layers[i - 1].output_dim()
                )));
            }
        }
        let h = &self.hash_layer.weights;
        if h.rows() == 0 || h.cols() != net.dim_a() + net.dim_b() {
            return Err(Error::Shape(format!(
                "hash layer is {}x{}, expected Kx{}",
                h.rows(),
                h.cols(),
                net.dim_a() + net.dim_b()
            )));
        }
        if self.params().iter().any(|(t, _)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("model weights"));
        }
        Ok(())
    }

    /// Flat views of every parameter tensor: per feature layer its weights
    /// then bias, and the hash layer last.
    pub fn params(&self) -> Vec<(&[f64], ParamKind)> {
        let mut out = Vec::new();
        for l in &self.feature_net.layers {
            out.push((l.weights.as_slice(), ParamKind::Weight));
            out.push((l.bias.as_slice(), ParamKind::Bias));
        }
        out.push((self.hash_layer.weights.as_slice(), ParamKind::Weight));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&mut [f64], ParamKind)> {
        let mut out = Vec::new();
        for l in &mut self.feature_net.layers {
            out.push((l.weights.as_mut_slice(), ParamKind::Weight));
            out.push((l.bias.as_mut_slice(), ParamKind::Bias));
        }
        out.push((self.hash_layer.weights.as_mut_slice(), ParamKind::Weight));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(t, _)| t.len()).sum()
    }

    /// Sum of squared entries over weight matrices (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.params()
            .iter()
            .filter(|(_, k)| *k == ParamKind::Weight)
            .map(|(t, _)| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    fn check_batch<R: AsRef<[f64]>>(&self, batch: &[R]) -> Result<()> {
        let dim = self.input_dim();
        for item in batch {
            let item = item.as_ref();
            if item.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: item.len(),
                });
            }
            if item.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("input features"));
            }
        }
        Ok(())
    }

    fn run<R: AsRef<[f64]>>(
        &self,
        batch: &[R],
        mask: Option<&DropoutMask>,
    ) -> Result<ForwardTrace> {
        self.check_batch(batch)?;
        let net = &self.feature_net;
        if let Some(m) = mask {
            if m.masks.len() != net.layers.len() - 1
                || m.masks
                    .iter()
                    .zip(&net.layers)
                    .any(|(mm, l)| mm.shape() != (batch.len(), l.output_dim()))
            {
                return Err(Error::Shape("dropout mask does not match batch/model".into()));
            }
        }
        let last = net.layers.len() - 1;
        let mut input = Matrix::from_rows(batch, self.input_dim());
        let mut inputs = Vec::with_capacity(net.layers.len());
        let mut pre_activations = Vec::with_capacity(net.layers.len());
        let mut activations = Vec::with_capacity(net.layers.len());
        for (l, layer) in net.layers.iter().enumerate() {
            let mut z = input.matmul_transposed(&layer.weights);
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let mut a = z.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            let next = match mask {
                Some(m) if l < last => {
                    let scale = 1.0 / m.keep_prob;
                    let mut d = a.clone();
                    for (v, k) in d.as_mut_slice().iter_mut().zip(m.masks[l].as_slice()) {
                        *v *= k * scale;
                    }
                    d
                }
                _ => a.clone(),
            };
            inputs.push(input);
            pre_activations.push(z);
            activations.push(a);
            input = next;
        }

        let (da, db) = (net.dim_a(), net.dim_b());
        let mut concat = Matrix::zeros(batch.len(), da + db);
        for r in 0..batch.len() {
            let row = concat.row_mut(r);
            row[..da].copy_from_slice(activations[net.tap_a].row(r));
            row[da..].copy_from_slice(activations[net.tap_b].row(r));
        }
        let u = concat.matmul_transposed(&self.hash_layer.weights);
        let mut codes = u.clone();
        codes
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = relaxed_bit(*v));
        Ok(ForwardTrace {
            inputs,
            pre_activations,
            activations,
            concat,
            hash_pre_activations: u,
            codes,
            mask: mask.cloned(),
        })
    }

    /// Relaxed codes `2*logistic(z) - 1` in `(-1, 1)^K`, one row per item.
    pub fn forward_relaxed<R: AsRef<[f64]>>(
        &self,
        batch: &[R],
        mask: Option<&DropoutMask>,
    ) -> Result<(Matrix, ForwardTrace)> {
        let trace = self.run(batch, mask)?;
        Ok((trace.codes.clone(), trace))
    }

    /// Hash-layer pre-activations without dropout.
    pub fn hash_pre_activations<R: AsRef<[f64]>>(&self, batch: &[R]) -> Result<Matrix> {
        Ok(self.run(batch, None)?.hash_pre_activations)
    }

    /// Binary codes in `{-1, +1}^K`, `sign(0) = +1`.
    pub fn forward_binary<R: AsRef<[f64]>>(&self, batch: &[R]) -> Result<Vec<Vec<i8>>> {
        let u = self.hash_pre_activations(batch)?;
        Ok(u.iter_rows().map(|r| r.iter().map(|&z| sign(z)).collect()).collect())
    }

    /// Gradients of `sum(code_grads .* codes)` with respect to every
    /// parameter, for the batch recorded in `trace`.
    pub fn backward(&self, trace: &ForwardTrace, code_grads: &Matrix) -> Result<ParameterGradients> {
        let net = &self.feature_net;
        let n = trace.codes.rows();
        if code_grads.shape() != trace.codes.shape() || trace.inputs.len() != net.layers.len() {
            return Err(Error::Shape(format!(
                "code gradients {:?} vs codes {:?}",
                code_grads.shape(),
                trace.codes.shape()
            )));
        }
        if code_grads.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("code gradients"));
        }

        let mut grads = ParameterGradients::zeros_like(self);

        // d/du of 2*logistic(u) - 1 is (1 - h^2) / 2
        let mut g_u = code_grads.clone();
        for (g, h) in g_u.as_mut_slice().iter_mut().zip(trace.codes.as_slice()) {
            *g *= 0.5 * (1.0 - h) * (1.0 + h);
        }
        grads.hash = g_u.transposed_matmul(&trace.concat);
        let g_concat = g_u.matmul(&self.hash_layer.weights);

        let da = net.dim_a();
        let mut g_act: Vec<Matrix> = net
            .layers
            .iter()
            .map(|l| Matrix::zeros(n, l.output_dim()))
            .collect();
        for r in 0..n {
            let src = g_concat.row(r);
            for (g, s) in g_act[net.tap_a].row_mut(r).iter_mut().zip(&src[..da]) {
                *g += s;
            }
            for (g, s) in g_act[net.tap_b].row_mut(r).iter_mut().zip(&src[da..]) {
                *g += s;
            }
        }

        for l in (0..net.layers.len()).rev() {
            let mut g_z = std::mem::replace(&mut g_act[l], Matrix::zeros(0, 0));
            for (g, z) in g_z
                .as_mut_slice()
                .iter_mut()
                .zip(trace.pre_activations[l].as_slice())
            {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
            grads.layers[l].weights = g_z.transposed_matmul(&trace.inputs[l]);
            grads.layers[l].bias = g_z.column_sums();
            if l > 0 {
                let mut g_in = g_z.matmul(&net.layers[l].weights);
                if let Some(m) = &trace.mask {
                    let scale = 1.0 / m.keep_prob;
                    for (g, k) in g_in.as_mut_slice().iter_mut().zip(m.masks[l - 1].as_slice()) {
                        *g *= k * scale;
                    }
                }
                for (acc, g) in g_act[l - 1].as_mut_slice().iter_mut().zip(g_in.as_slice()) {
                    *acc += g;
                }
            }
        }
        Ok(grads)
    }
}

/// Largest `f64` below 1.
const RELAXED_LIMIT: f64 = 1.0 - f64::EPSILON / 2.0;

/// `2 * logistic(z) - 1`, computed as `tanh(z / 2)` and kept strictly inside
/// `(-1, 1)` where `tanh` would round to the endpoints.
pub fn relaxed_bit(z: f64) -> f64 {
    (0.5 * z).tanh().clamp(-RELAXED_LIMIT, RELAXED_LIMIT)
}

pub fn sign(z: f64) -> i8 {
    if z >= 0.0 {
        1
    } else {
        -1
    }
}

const MODEL_MAGIC: &[u8; 8] = b"DSRHMODL";
const MODEL_VERSION: u16 = 1;

/// Checkpoint layout (little-endian): magic, version u16, K u32, layer count
/// u16, tap_a u16, tap_b u16, then per layer rows u32, cols u32, row-major
/// f64 weights and f64 biases. The hash layer is last with no biases.
pub fn encode_model(model: &HashModel) -> Vec<u8> {
    let net = &model.feature_net;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.bits() as u32).to_le_bytes());
    out.extend_from_slice(&((net.layers.len() + 1) as u16).to_le_bytes());
    out.extend_from_slice(&(net.tap_a as u16).to_le_bytes());
    out.extend_from_slice(&(net.tap_b as u16).to_le_bytes());
    let mut put_matrix = |m: &Matrix, bias: &[f64]| {
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice().iter().chain(bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for l in &net.layers {
        put_matrix(&l.weights, &l.bias);
    }
    put_matrix(&model.hash_layer.weights, &[]);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<HashModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MODEL_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = cur.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let bits = cur.u32()? as usize;
    let layer_count = cur.u16()? as usize;
    let tap_a = cur.u16()? as usize;
    let tap_b = cur.u16()? as usize;
    if layer_count < 3 {
        return Err(Error::Format(format!("layer count {layer_count} too small")));
    }
    let mut layers = Vec::with_capacity(layer_count - 1);
    for _ in 0..layer_count - 1 {
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let weights = cur.f64s(rows * cols)?;
        let bias = cur.f64s(rows)?;
        layers.push(Dense {
            weights: Matrix::from_vec(rows, cols, weights),
            bias,
        });
    }
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let weights = cur.f64s(rows * cols)?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the hash layer",
            bytes.len() - cur.pos
        )));
    }
    if rows != bits {
        return Err(Error::Shape(format!("header K={bits} but hash layer has {rows} rows")));
    }
    let model = HashModel {
        feature_net: FeatureNet {
            layers,
            tap_a,
            tap_b,
        },
        hash_layer: HashLayer {
            weights: Matrix::from_vec(rows, cols, weights),
        },
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &HashModel, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), |w| w.write_all(&encode_model(model)))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<HashModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
