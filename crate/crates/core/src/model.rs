//! The MambaBF network.
//!
//! Activations are laid out time-major as `[batch, time, channels]`. The
//! pipeline is
//!
//! ```text
//! Y (M × L complex)
//!   → stack [Re; Im], standardize            2M × L
//!   → conv1d(k_f) → maxpool(2, 2) → BN → SeLU  L' × M_z
//!   → 2 × Mamba layer                          L' × M_z
//!   → flatten → dense(hidden) → SeLU → dense(2M) → ŵ / ‖ŵ‖
//! ```
//!
//! A Mamba layer computes `x̃ = SeLU(A x + a)`, `c = SeLU(conv_k(B x + b))`,
//! runs a GRU over `c` from a zero state and returns `W_out (g ⊙ x̃)`.
//! The dense output packs real parts in the first `M` entries and imaginary
//! parts in the last `M`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient_check, GradCheckReport, Tape, Tensor, Var};
use crate::beamform::{BeamWeights, Method};
use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::signals::SnapshotMatrix;

pub const FORMAT_VERSION: u32 = 1;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const NUM_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    /// Array elements `M`.
    pub m: usize,
    /// Snapshots per sample `L`.
    pub l: usize,
    pub m_z: usize,
    /// Front-end convolution width.
    pub k_f: usize,
    /// Mamba-layer convolution width.
    pub k: usize,
    pub hidden: usize,
    /// Max-pool kernel and stride; 1 disables pooling.
    pub pool: usize,
}

impl Hyperparams {
    pub fn new(m: usize, l: usize) -> Self {
        Self { m, l, m_z: 100, k_f: 3, k: 3, hidden: 256, pool: 2 }
    }

    pub fn latent_len(&self) -> usize {
        self.l / self.pool
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m == 0 || self.m_z == 0 || self.hidden == 0 {
            return bad(format!("sizes must be positive: {self:?}"));
        }
        if self.pool == 0 || self.l < 2 || self.l < self.pool {
            return bad(format!("snapshot count {} too short for pooling by {}", self.l, self.pool));
        }
        if self.k_f % 2 == 0 || self.k % 2 == 0 {
            return bad(format!("convolution widths must be odd, got {} and {}", self.k_f, self.k));
        }
        Ok(())
    }

    /// Parameter names and shapes in initialization order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (m2, z) = (2 * self.m, self.m_z);
        let mut v = vec![
            ("frontend.conv".to_string(), vec![self.k_f, m2, z]),
            ("frontend.bn.gamma".to_string(), vec![z]),
            ("frontend.bn.beta".to_string(), vec![z]),
        ];
        for i in 0..NUM_LAYERS {
            let p = |s: &str| format!("layer{i}.{s}");
            v.extend([
                (p("lin_a.w"), vec![z, z]),
                (p("lin_a.b"), vec![z]),
                (p("lin_b.w"), vec![z, z]),
                (p("lin_b.b"), vec![z]),
                (p("conv.w"), vec![self.k, z, z]),
                (p("conv.b"), vec![z]),
            ]);
            for gate in ["z", "r", "n"] {
                v.push((p(&format!("gru.w_{gate}")), vec![z, z]));
                v.push((p(&format!("gru.u_{gate}")), vec![z, z]));
                v.push((p(&format!("gru.b_{gate}")), vec![z]));
            }
            v.push((p("out.w"), vec![z, z]));
        }
        v.extend([
            ("head.dense1.w".to_string(), vec![self.latent_len() * z, self.hidden]),
            ("head.dense1.b".to_string(), vec![self.hidden]),
            ("head.dense2.w".to_string(), vec![self.hidden, m2]),
            ("head.dense2.b".to_string(), vec![m2]),
        ]);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; the caller folds them into the running
    /// statistics.
    Train,
    /// Running statistics in batch norm.
    Infer,
}

/// Network parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaBf {
    pub hyper: Hyperparams,
    pub params: BTreeMap<String, Tensor>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Parameters recorded on a tape, by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self { vars: iter.into_iter().collect() }
    }
}

/// Result of a forward pass on a tape.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Unit-norm packed weights, `[B, 2M]`.
    pub weights: Var,
    /// Batch-norm batch mean, biased variance and element count (train mode).
    pub bn_batch: Option<(Vec<f64>, Vec<f64>, usize)>,
}

impl MambaBf {
    /// Uniform `±√(1/fan_in)` weights, zero GRU biases, identity batch norm.
    pub fn init(hyper: Hyperparams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut params = BTreeMap::new();
        for (idx, (name, shape)) in hyper.layout().into_iter().enumerate() {
            let t = if name.ends_with("bn.gamma") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with("bn.beta") || name.contains("gru.b_") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = if name.ends_with(".b") {
                    // Bias shares the fan-in of its weight.
                    fan_in_of(&hyper, &name)
                } else {
                    shape[..shape.len() - 1].iter().product()
                };
                let bound = (1.0 / fan_in as f64).sqrt();
                Tensor::uniform(&shape, bound, &mut seed::stream_rng(seed, stream::INIT, idx as u64))
            };
            params.insert(name, t);
        }
        Ok(Self { hyper, params, running_mean: vec![0.0; hyper.m_z], running_var: vec![1.0; hyper.m_z] })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Records the full network on `tape`. `x` is `[B, L, 2M]`.
    pub fn forward_tape(&self, tape: &mut Tape, p: &Bound, x: Var, mode: Mode) -> Result<Forward> {
        let (z, bn_batch) = self.frontend(tape, p, x, mode)?;
        let mut h = z;
        for i in 0..NUM_LAYERS {
            h = mamba_layer(tape, p, i, h)?;
        }
        let weights = head(tape, p, h)?;
        Ok(Forward { weights, bn_batch })
    }

    /// conv → maxpool → batch norm → SeLU.
    pub fn frontend(&self, tape: &mut Tape, p: &Bound, x: Var, mode: Mode) -> Result<(Var, Option<(Vec<f64>, Vec<f64>, usize)>)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != 2 * self.hyper.m {
            return Err(Error::Shape(format!("frontend input {s:?}, expected [B, L, {}]", 2 * self.hyper.m)));
        }
        if s[1] < 2 {
            return Err(Error::Shape(format!("frontend needs at least 2 snapshots, got {}", s[1])));
        }
        let c = tape.conv1d(x, p.get("frontend.conv"))?;
        let pooled = if self.hyper.pool > 1 { tape.maxpool1d(c, self.hyper.pool, self.hyper.pool)? } else { c };
        let (normed, stats) = match mode {
            Mode::Train => {
                let n = tape.batch_norm(pooled, BN_EPS)?;
                let (mean, var) = tape.batch_moments(n).expect("batch norm node");
                let count = tape.value(pooled).numel() / self.hyper.m_z;
                (n, Some((mean.to_vec(), var.to_vec(), count)))
            }
            Mode::Infer => {
                let mean = tape.constant(Tensor::from_vec(self.running_mean.clone()));
                let inv: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let inv = tape.constant(Tensor::from_vec(inv));
                let centered = tape.sub(pooled, mean)?;
                (tape.mul(centered, inv)?, None)
            }
        };
        let scaled = tape.mul(normed, p.get("frontend.bn.gamma"))?;
        let shifted = tape.add(scaled, p.get("frontend.bn.beta"))?;
        Ok((tape.selu(shifted)?, stats))
    }

    /// Exponential moving average with the unbiased batch variance.
    pub fn update_running_stats(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for j in 0..self.running_mean.len() {
            self.running_mean[j] = (1.0 - BN_MOMENTUM) * self.running_mean[j] + BN_MOMENTUM * mean[j];
            self.running_var[j] = (1.0 - BN_MOMENTUM) * self.running_var[j] + BN_MOMENTUM * var[j] * unbias;
        }
    }

    /// Inference-mode weights for each snapshot matrix.
    pub fn infer_batch(&self, ys: &[&SnapshotMatrix]) -> Result<Vec<BeamWeights>> {
        let x = network_input(ys, self.hyper.m)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = self.forward_tape(&mut tape, &p, xv, Mode::Infer)?;
        unpack_weights(tape.value(out.weights))
    }

    pub fn infer(&self, y: &SnapshotMatrix) -> Result<BeamWeights> {
        Ok(self.infer_batch(&[y])?.remove(0))
    }

    pub fn to_json(&self) -> Result<String> {
        self.to_json_with(None)
    }

    /// Checkpoint text with an optional free-form `metadata` object, which
    /// loading ignores.
    pub fn to_json_with(&self, metadata: Option<&BTreeMap<String, String>>) -> Result<String> {
        for (name, t) in &self.params {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        let ck = CheckpointRef {
            format_version: FORMAT_VERSION,
            hyperparams: &self.hyper,
            parameters: &self.params,
            batchnorm: RunningStatsRef { running_mean: &self.running_mean, running_var: &self.running_var },
            metadata,
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("checkpoint format {} (expected {FORMAT_VERSION})", ck.format_version)));
        }
        let model = Self {
            hyper: ck.hyperparams,
            params: ck.parameters,
            running_mean: ck.batchnorm.running_mean,
            running_var: ck.batchnorm.running_var,
        };
        model.check_layout()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check_layout(&self) -> Result<()> {
        self.hyper.validate().map_err(|e| Error::Format(e.to_string()))?;
        let layout = self.hyper.layout();
        if layout.len() != self.params.len() {
            return Err(Error::Format(format!("{} parameters, expected {}", self.params.len(), layout.len())));
        }
        for (name, shape) in layout {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(Error::Format(format!("{name} has shape {:?}, expected {shape:?}", t.shape()))),
                None => return Err(Error::Format(format!("missing parameter {name}"))),
            }
        }
        let z = self.hyper.m_z;
        if self.running_mean.len() != z || self.running_var.len() != z {
            return Err(Error::Format("batch-norm statistics do not match M_z".into()));
        }
        Ok(())
    }
}

fn fan_in_of(hyper: &Hyperparams, bias: &str) -> usize {
    let z = hyper.m_z;
    if bias.ends_with("conv.b") {
        hyper.k * z
    } else if bias == "head.dense1.b" {
        hyper.latent_len() * z
    } else if bias == "head.dense2.b" {
        hyper.hidden
    } else {
        z
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format_version: u32,
    hyperparams: &'a Hyperparams,
    parameters: &'a BTreeMap<String, Tensor>,
    batchnorm: RunningStatsRef<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metadata: Option<&'a BTreeMap<String, String>>,
}

#[derive(Serialize)]
struct RunningStatsRef<'a> {
    running_mean: &'a [f64],
    running_var: &'a [f64],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format_version: u32,
    hyperparams: Hyperparams,
    parameters: BTreeMap<String, Tensor>,
    batchnorm: RunningStats,
    #[serde(default, rename = "metadata")]
    _metadata: Option<BTreeMap<String, String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunningStats {
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

/// Stacks `Re(Y)` over `Im(Y)` into `2M × L` and standardizes over all
/// entries. An all-zero input maps to zeros.
pub fn preprocess(y: &SnapshotMatrix) -> Tensor {
    let (m, l) = (y.num_elements(), y.num_snapshots());
    let mut data = vec![0.0; 2 * m * l];
    for r in 0..m {
        for c in 0..l {
            let v = y.data[(r, c)];
            data[r * l + c] = v.re;
            data[(m + r) * l + c] = v.im;
        }
    }
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        let inv = 1.0 / var.sqrt();
        data.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    } else {
        data.iter_mut().for_each(|v| *v = 0.0);
    }
    Tensor::new(vec![2 * m, l], data).expect("preprocess shape")
}

/// Batched network input `[B, L, 2M]`.
///
/// Standardized values are rounded to single precision so that the few-ulp
/// differences between `Y` and `αY` after standardization vanish and the
/// network output is exactly scale invariant.
pub fn network_input(ys: &[&SnapshotMatrix], m: usize) -> Result<Tensor> {
    let first = ys.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let l = first.num_snapshots();
    let mut data = Vec::with_capacity(ys.len() * l * 2 * m);
    for y in ys {
        if y.num_elements() != m || y.num_snapshots() != l {
            return Err(Error::Shape(format!(
                "snapshots {}×{}, expected {m}×{l}",
                y.num_elements(),
                y.num_snapshots()
            )));
        }
        let x = preprocess(y);
        let d = x.data();
        for t in 0..l {
            for c in 0..2 * m {
                data.push(d[c * l + t] as f32 as f64);
            }
        }
    }
    Tensor::new(vec![ys.len(), l, 2 * m], data)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let cin = *s.last().unwrap();
    let rows = s.iter().product::<usize>() / cin;
    let flat = tape.reshape(x, &[rows, cin])?;
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        y = tape.add(y, b)?;
    }
    let mut out = s;
    *out.last_mut().unwrap() = tape.shape(y)[1];
    tape.reshape(y, &out)
}

/// One Mamba layer on `[B, T, M_z]`.
pub fn mamba_layer(tape: &mut Tape, p: &Bound, layer: usize, x: Var) -> Result<Var> {
    let n = |s: &str| p.get(&format!("layer{layer}.{s}"));
    let a = linear(tape, x, n("lin_a.w"), Some(n("lin_a.b")))?;
    let skip = tape.selu(a)?;
    let b = linear(tape, x, n("lin_b.w"), Some(n("lin_b.b")))?;
    let conv = tape.conv1d(b, n("conv.w"))?;
    let conv = tape.add(conv, n("conv.b"))?;
    let c = tape.selu(conv)?;
    let gru = Gru {
        w: [n("gru.w_z"), n("gru.w_r"), n("gru.w_n")],
        u: [n("gru.u_z"), n("gru.u_r"), n("gru.u_n")],
        b: [n("gru.b_z"), n("gru.b_r"), n("gru.b_n")],
    };
    let g = gru.run(tape, c)?;
    let gated = tape.mul(g, skip)?;
    linear(tape, gated, n("out.w"), None)
}

/// GRU weights: input maps `w`, recurrent maps `u`, biases `b`, each ordered
/// update, reset, candidate.
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub w: [Var; 3],
    pub u: [Var; 3],
    pub b: [Var; 3],
}

impl Gru {
    /// `z = σ(W_z c + U_z g + b_z)`, `r = σ(W_r c + U_r g + b_r)`,
    /// `ñ = tanh(W_n c + U_n (r ⊙ g) + b_n)`, `g ← g + z ⊙ (ñ − g)`,
    /// starting from `g = 0`. Returns every state, `[B, T, H]`.
    pub fn run(&self, tape: &mut Tape, c: Var) -> Result<Var> {
        let s = tape.shape(c).to_vec();
        let (batch, steps) = (s[0], s[1]);
        let h = tape.shape(self.u[0])[0];
        let w = tape.concat(&self.w, 1)?;
        let bias = tape.concat(&self.b, 0)?;
        let xs = linear(tape, c, w, Some(bias))?;
        let u_zr = tape.concat(&self.u[..2], 1)?;
        let mut g = tape.constant(Tensor::zeros(&[batch, h]));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = tape.slice(xs, 1, t, 1)?;
            let xt = tape.reshape(xt, &[batch, 3 * h])?;
            let x_zr = tape.slice(xt, 1, 0, 2 * h)?;
            let x_n = tape.slice(xt, 1, 2 * h, h)?;
            let g_zr = tape.matmul(g, u_zr)?;
            let pre = tape.add(x_zr, g_zr)?;
            let zr = tape.sigmoid(pre)?;
            let z = tape.slice(zr, 1, 0, h)?;
            let r = tape.slice(zr, 1, h, h)?;
            let rg = tape.mul(r, g)?;
            let un = tape.matmul(rg, self.u[2])?;
            let pre_n = tape.add(x_n, un)?;
            let cand = tape.tanh(pre_n)?;
            let delta = tape.sub(cand, g)?;
            let step = tape.mul(z, delta)?;
            g = tape.add(g, step)?;
            states.push(tape.reshape(g, &[batch, 1, h])?);
        }
        tape.concat(&states, 1)
    }
}

/// Flatten → dense → SeLU → dense → row normalization. Returns `[B, 2M]`.
pub fn head(tape: &mut Tape, p: &Bound, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    let flat = tape.reshape(f, &[s[0], s[1] * s[2]])?;
    let h = linear(tape, flat, p.get("head.dense1.w"), Some(p.get("head.dense1.b")))?;
    let h = tape.selu(h)?;
    let raw = linear(tape, h, p.get("head.dense2.w"), Some(p.get("head.dense2.b")))?;
    normalize_rows(tape, raw)
}

/// `ŵ / ‖ŵ‖` per row; a zero row is a degenerate-output error.
pub fn normalize_rows(tape: &mut Tape, raw: Var) -> Result<Var> {
    let b = tape.shape(raw)[0];
    let sq = tape.square(raw)?;
    let ss = tape.sum(sq, Some(1))?;
    if let Some(i) = tape.value(ss).data().iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::DegenerateOutput(format!("network output row {i} has norm² {}", tape.value(ss).data()[i])));
    }
    let norm = tape.sqrt(ss)?;
    let norm = tape.reshape(norm, &[b, 1])?;
    tape.div(raw, norm)
}

/// Finite-difference check of `Σ f²` for Mamba layer 0 with respect to its
/// parameters and input, at `M_z = 6`, `L' = 4`, batch 2.
pub fn layer_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let h = Hyperparams { m: 4, l: 8, m_z: 6, k_f: 3, k: 3, hidden: 5, pool: 2 };
    let model = MambaBf::init(h, seed)?;
    let names: Vec<String> = model.params.keys().filter(|k| k.starts_with("layer0.")).cloned().collect();
    let mut point: Vec<Tensor> = names.iter().map(|n| model.params[n].clone()).collect();
    // Non-zero GRU biases so their gradients are probed away from the origin.
    for (i, (n, t)) in names.iter().zip(point.iter_mut()).enumerate() {
        if n.contains("gru.b_") {
            *t = Tensor::uniform(t.shape(), 0.3, &mut seed::stream_rng(seed, stream::INIT, 1000 + i as u64));
        }
    }
    point.push(Tensor::uniform(&[2, h.latent_len(), h.m_z], 1.0, &mut seed::stream_rng(seed, stream::INIT, 999)));
    gradient_check(
        |tape, vars| {
            let bound: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
            let f = mamba_layer(tape, &bound, 0, *vars.last().unwrap())?;
            let sq = tape.square(f)?;
            tape.sum(sq, None)
        },
        &point,
        1e-6,
    )
}

/// Splits packed `[B, 2M]` rows into complex weights.
pub fn unpack_weights(packed: &Tensor) -> Result<Vec<BeamWeights>> {
    let (b, m2) = (packed.shape()[0], packed.shape()[1]);
    let m = m2 / 2;
    (0..b)
        .map(|i| {
            let row = &packed.data()[i * m2..(i + 1) * m2];
            let w = DVector::from_fn(m, |j, _| Complex64::new(row[j], row[m + j]));
            BeamWeights::new(w, Method::MambaBf)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn tiny() -> Hyperparams {
        Hyperparams { m: 4, l: 8, m_z: 6, k_f: 3, k: 3, hidden: 5, pool: 2 }
    }

    fn random_snapshots(m: usize, l: usize, seed: u64) -> SnapshotMatrix {
        let mut rng = seed::rng(seed);
        let data = DMatrix::from_fn(m, l, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        SnapshotMatrix::new(data, 1.0).unwrap()
    }

    #[test]
    fn preprocess_real_input_has_zero_imag_rows() {
        let data = DMatrix::from_fn(3, 4, |r, c| Complex64::new((r * 4 + c) as f64, 0.0));
        let y = SnapshotMatrix::new(data, 1.0).unwrap();
        // Before standardization the bottom block is zero, so after it every
        // bottom entry equals the standardized value of 0.
        let x = preprocess(&y);
        let bottom = &x.data()[12..];
        assert!(bottom.iter().all(|&v| v == bottom[0]));
        assert!(bottom[0] < 0.0);
    }

    #[test]
    fn preprocess_standardizes() {
        let x = preprocess(&random_snapshots(5, 40, 1));
        let n = x.numel() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn preprocess_zero_input() {
        let y = SnapshotMatrix::new(DMatrix::zeros(2, 4), 1.0).unwrap();
        assert!(preprocess(&y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layout_shapes_at_full_scale() {
        let h = Hyperparams::new(100, 200);
        assert_eq!(h.latent_len(), 100);
        let model = MambaBf::init(h, 0).unwrap();
        let count: usize = h.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(model.param_count(), count);
        assert_eq!(model.params["head.dense1.w"].shape(), &[10_000, 256]);
        assert_eq!(model.params["frontend.conv"].shape(), &[3, 200, 100]);
    }

    #[test]
    fn pooled_constant_sequence_stays_constant() {
        // M_z = 2M with an identity centre tap: the conv copies its input.
        let h = Hyperparams { m: 2, l: 6, m_z: 4, k_f: 1, k: 1, hidden: 3, pool: 2 };
        let mut model = MambaBf::init(h, 0).unwrap();
        let mut conv = Tensor::zeros(&[1, 4, 4]);
        for i in 0..4 {
            conv.data_mut()[i * 4 + i] = 1.0;
        }
        model.params.insert("frontend.conv".into(), conv);
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let row = [0.5, -1.0, 2.0, 0.25];
        let x = Tensor::new(vec![1, 6, 4], row.iter().copied().cycle().take(24).collect()).unwrap();
        let xv = tape.constant(x);
        let (z, _) = model.frontend(&mut tape, &p, xv, Mode::Infer).unwrap();
        assert_eq!(tape.shape(z), &[1, 3, 4]);
        let d = tape.value(z).data();
        for t in 1..3 {
            assert_eq!(&d[t * 4..(t + 1) * 4], &d[..4]);
        }
    }

    #[test]
    fn inference_batch_norm_with_unit_stats_is_identity() {
        let h = Hyperparams { m: 2, l: 4, m_z: 3, k_f: 1, k: 1, hidden: 3, pool: 1 };
        let model = MambaBf::init(h, 0).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::uniform(&[2, 4, 4], 1.0, &mut seed::rng(3)));
        let (z, _) = model.frontend(&mut tape, &p, x, Mode::Infer).unwrap();
        let conv = tape.conv1d(x, p.get("frontend.conv")).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, c) in tape.value(z).data().iter().zip(tape.value(conv).data()) {
            let e = c * scale;
            let e = if e > 0.0 {
                crate::autodiff::SELU_LAMBDA * e
            } else {
                crate::autodiff::SELU_LAMBDA * crate::autodiff::SELU_ALPHA * e.exp_m1()
            };
            assert_relative_eq!(*a, e, epsilon = 1e-15);
        }
    }

    #[test]
    fn frontend_rejects_single_snapshot() {
        let h = Hyperparams { m: 2, l: 2, m_z: 3, k_f: 1, k: 1, hidden: 3, pool: 2 };
        let model = MambaBf::init(h, 0).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 1, 4]));
        assert!(model.frontend(&mut tape, &p, x, Mode::Infer).is_err());
        assert!(Hyperparams { l: 1, ..h }.validate().is_err());
    }

    #[test]
    fn zero_input_and_biases_give_zero_output() {
        let h = tiny();
        let mut model = MambaBf::init(h, 4).unwrap();
        for (name, t) in model.params.iter_mut() {
            if name.starts_with("layer0.") && (name.ends_with(".b") || name.contains("gru.b_")) {
                *t = Tensor::zeros(t.shape());
            }
        }
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 4, h.m_z]));
        let f = mamba_layer(&mut tape, &p, 0, x).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_output_projection_silences_layer() {
        let h = tiny();
        let mut model = MambaBf::init(h, 5).unwrap();
        model.params.insert("layer1.out.w".into(), Tensor::zeros(&[h.m_z, h.m_z]));
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::uniform(&[2, 4, h.m_z], 3.0, &mut seed::rng(1)));
        let f = mamba_layer(&mut tape, &p, 1, x).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_single_step_matches_hand_evaluation() {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (wz, wr, wn, uz, ur, un, bz, br, bn) = (0.5, -0.3, 0.8, 0.2, 0.7, -0.4, 0.1, -0.2, 0.05);
        let c0 = 1.5;
        let mut tape = Tape::new();
        let s = |tape: &mut Tape, v: f64| tape.constant(Tensor::new(vec![1, 1], vec![v]).unwrap());
        let b = |tape: &mut Tape, v: f64| tape.constant(Tensor::from_vec(vec![v]));
        let gru = Gru {
            w: [s(&mut tape, wz), s(&mut tape, wr), s(&mut tape, wn)],
            u: [s(&mut tape, uz), s(&mut tape, ur), s(&mut tape, un)],
            b: [b(&mut tape, bz), b(&mut tape, br), b(&mut tape, bn)],
        };
        let c = tape.constant(Tensor::new(vec![1, 2, 1], vec![c0, -0.6]).unwrap());
        let g = gru.run(&mut tape, c).unwrap();
        let d = tape.value(g).data();
        let g_prev = 0.0;
        let z = sig(wz * c0 + uz * g_prev + bz);
        let r = sig(wr * c0 + ur * g_prev + br);
        let cand = (wn * c0 + un * (r * g_prev) + bn).tanh();
        let g1 = (1.0 - z) * g_prev + z * cand;
        assert_relative_eq!(d[0], g1, epsilon = 1e-15);
        let c1 = -0.6;
        let z = sig(wz * c1 + uz * g1 + bz);
        let r = sig(wr * c1 + ur * g1 + br);
        let cand = (wn * c1 + un * (r * g1) + bn).tanh();
        assert_relative_eq!(d[1], (1.0 - z) * g1 + z * cand, epsilon = 1e-15);
    }

    #[test]
    fn head_packing_and_normalization() {
        let mut tape = Tape::new();
        let raw = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let w = normalize_rows(&mut tape, raw).unwrap();
        let bw = unpack_weights(tape.value(w)).unwrap();
        assert_eq!(bw[0].weights.as_slice(), &[Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);

        let v = Tensor::new(vec![1, 4], vec![0.3, -1.2, 0.7, 2.0]).unwrap();
        let scaled = Tensor::new(vec![1, 4], v.data().iter().map(|x| 7.0 * x).collect()).unwrap();
        let a = tape.constant(v);
        let b = tape.constant(scaled);
        let wa = normalize_rows(&mut tape, a).unwrap();
        let wb = normalize_rows(&mut tape, b).unwrap();
        for (a, b) in tape.value(wa).data().iter().zip(tape.value(wb).data()) {
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
        let zero = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(normalize_rows(&mut tape, zero), Err(Error::DegenerateOutput(_))));
    }

    #[test]
    fn output_is_unit_norm_and_deterministic() {
        let h = tiny();
        let model = MambaBf::init(h, 9).unwrap();
        for s in 0..5 {
            let y = random_snapshots(h.m, h.l, s);
            let w = model.infer(&y).unwrap();
            assert!((w.weights.norm() - 1.0).abs() < 1e-12);
            assert_eq!(model.infer(&y).unwrap(), w);
        }
    }

    #[test]
    fn forward_is_scale_invariant() {
        let h = tiny();
        let model = MambaBf::init(h, 2).unwrap();
        let y = random_snapshots(h.m, h.l, 7);
        let w = model.infer(&y).unwrap();
        for alpha in [0.1, 5.0] {
            assert_eq!(model.infer(&y.scaled(alpha)).unwrap(), w);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let h = tiny();
        let mut model = MambaBf::init(h, 11).unwrap();
        model.update_running_stats(&[0.1; 6], &[2.0 / 3.0; 6], 10);
        let back = MambaBf::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        let meta = BTreeMap::from([("seed".to_string(), "11".to_string())]);
        let text = model.to_json_with(Some(&meta)).unwrap();
        assert!(text.contains("\"metadata\":{\"seed\":\"11\"}"));
        assert_eq!(MambaBf::from_json(&text).unwrap(), model);
        let y = random_snapshots(h.m, h.l, 3);
        assert_eq!(back.infer(&y).unwrap(), model.infer(&y).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_input() {
        let model = MambaBf::init(tiny(), 1).unwrap();
        let text = model.to_json().unwrap().replace("\"format_version\":1", "\"format_version\":99");
        assert!(matches!(MambaBf::from_json(&text), Err(Error::Format(_))));
        let mut broken = model.clone();
        broken.params.remove("head.dense2.b");
        assert!(matches!(MambaBf::from_json(&broken.to_json().unwrap()), Err(Error::Format(_))));
        assert!(matches!(MambaBf::from_json("{"), Err(Error::Format(_))));
    }

    #[test]
    fn running_stats_use_unbiased_variance() {
        let mut model = MambaBf::init(tiny(), 0).unwrap();
        model.update_running_stats(&[1.0; 6], &[0.5; 6], 2);
        assert_relative_eq!(model.running_mean[0], 0.1);
        assert_relative_eq!(model.running_var[0], 0.9 + 0.1 * 1.0);
    }

    #[test]
    fn mamba_layer_gradients_match_finite_differences() {
        let report = layer_gradcheck(21).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
