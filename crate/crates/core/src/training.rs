//! Datasets, the self-supervised SINR loss, Adam, the training loop and
//! evaluation against the closed-form baselines.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient_check, GradCheckReport, Tape, Tensor, Var};
use crate::beamform::{mrc, mvdr, sinr, smi, zf, BeamWeights, Loading, Method};
use crate::error::{Error, Result};
use crate::model::{network_input, Bound, Hyperparams, MambaBf, Mode};
use crate::scenario::{perturb_csi, ArrayConfig, sample_scenario, steering_vector, to_db, Doa, ScenarioConfig};
use crate::seed::{self, stream};
use crate::signals::{synthesize_snapshots, SnapshotMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum CsiMode {
    Perfect,
    Imperfect { error_variance: f64 },
}

impl CsiMode {
    pub fn tag(&self) -> &'static str {
        match self {
            CsiMode::Perfect => "perfect",
            CsiMode::Imperfect { .. } => "imperfect",
        }
    }
}

/// Network sizes other than `M` and `L`, which follow the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub m_z: usize,
    pub k_f: usize,
    pub k: usize,
    pub hidden: usize,
    pub pool: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let h = Hyperparams::new(1, 2);
        Self { m_z: h.m_z, k_f: h.k_f, k: h.k, hidden: h.hidden, pool: h.pool }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub batch: usize,
    pub epochs: usize,
    pub learn_rate: f64,
    pub seed: u64,
    /// Snapshots per sample.
    pub snapshots: usize,
    /// Train on `−mean SINR_dB` instead of `−mean SINR`.
    pub loss_db: bool,
    /// Inference chunk size during evaluation.
    pub eval_batch: usize,
    pub csi: CsiMode,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_train: 4000,
            n_test: 1000,
            batch: 16,
            epochs: 30,
            learn_rate: 1e-3,
            seed: 0,
            snapshots: 200,
            loss_db: false,
            eval_batch: 64,
            csi: CsiMode::Imperfect { error_variance: 0.15 },
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_train == 0 || self.n_test == 0 {
            return bad("dataset sizes must be positive".into());
        }
        if self.batch == 0 || self.batch > self.n_train {
            return bad(format!("batch {} must be in 1..={}", self.batch, self.n_train));
        }
        if !(self.learn_rate >= 0.0) || !self.learn_rate.is_finite() {
            return bad(format!("learning rate {} must be finite and non-negative", self.learn_rate));
        }
        if self.eval_batch == 0 {
            return bad("eval_batch must be positive".into());
        }
        if let CsiMode::Imperfect { error_variance } = self.csi {
            if !(error_variance >= 0.0) || !error_variance.is_finite() {
                return bad(format!("CSI error variance {error_variance} must be finite and non-negative"));
            }
        }
        self.hyperparams(1).validate()
    }

    pub fn hyperparams(&self, m: usize) -> Hyperparams {
        let c = self.model;
        Hyperparams { m, l: self.snapshots, m_z: c.m_z, k_f: c.k_f, k: c.k, hidden: c.hidden, pool: c.pool }
    }
}

/// One training or test example. True channels feed only the loss and the
/// evaluation; the network sees `snapshots` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub id: usize,
    pub seed: u64,
    pub snapshots: SnapshotMatrix,
    /// Initial beam `v_d`.
    pub steering_d: DVector<Complex64>,
    pub true_h_d: DVector<Complex64>,
    /// `M × K`.
    pub true_h_int: DMatrix<Complex64>,
    /// Perturbed desired channel, present in imperfect-CSI mode.
    pub est_h_d: Option<DVector<Complex64>>,
    pub noise_w: f64,
    pub desired_doa: Doa,
    pub interferer_doas: Vec<Doa>,
}

impl DatasetSample {
    /// Desired channel available to the baselines.
    pub fn baseline_h_d(&self) -> &DVector<Complex64> {
        self.est_h_d.as_ref().unwrap_or(&self.true_h_d)
    }

    pub fn sinr(&self, w: &DVector<Complex64>) -> f64 {
        sinr(w, &self.true_h_d, &self.true_h_int, self.noise_w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => stream::TRAIN_SET,
            Split::Test => stream::TEST_SET,
        }
    }
}

/// Seed of sample `index` within a split.
pub fn sample_seed(master: u64, split: Split, index: usize) -> u64 {
    seed::derive(master, split.stream(), index as u64)
}

pub fn build_sample(config: &ScenarioConfig, id: usize, sample_seed: u64, snapshots: usize, csi: CsiMode) -> Result<DatasetSample> {
    let scenario = sample_scenario(config, sample_seed)?;
    let y = synthesize_snapshots(&scenario, snapshots, sample_seed)?;
    let est_h_d = match csi {
        CsiMode::Perfect => None,
        CsiMode::Imperfect { error_variance } => Some(perturb_csi(&scenario.desired.channel, error_variance, sample_seed)),
    };
    Ok(DatasetSample {
        id,
        seed: sample_seed,
        snapshots: y,
        steering_d: steering_vector(&scenario.geometry, scenario.desired.link.doa),
        true_h_d: scenario.desired_channel().clone(),
        true_h_int: scenario.interference_matrix(),
        est_h_d,
        noise_w: scenario.noise_power_w,
        desired_doa: scenario.desired.link.doa,
        interferer_doas: scenario.interferers.iter().map(|e| e.link.doa).collect(),
    })
}

/// `n` independent samples whose seeds come from `(seed, split)`.
pub fn build_dataset(
    config: &ScenarioConfig,
    n: usize,
    seed: u64,
    split: Split,
    snapshots: usize,
    csi: CsiMode,
) -> Result<Vec<DatasetSample>> {
    if n == 0 {
        return Err(Error::Config("dataset must contain at least one sample".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| build_sample(config, i, sample_seed(seed, split, i), snapshots, csi))
        .collect()
}

/// Per-sample constant `A` of shape `[2M, 2(K+1)]`, scaled by `1/σ`, with
/// `ŵᵀA = [Re wᴴh_d, Im wᴴh_d, Re wᴴh_1, Im wᴴh_1, …] / σ` for the packed
/// weights `ŵ = [Re w; Im w]`.
fn loss_operator(sample: &DatasetSample) -> Vec<f64> {
    let m = sample.true_h_d.len();
    let k = sample.true_h_int.ncols();
    let cols = 2 * (k + 1);
    let inv_sigma = 1.0 / sample.noise_w.sqrt();
    let mut a = vec![0.0; 2 * m * cols];
    for j in 0..=k {
        let h = if j == 0 { sample.true_h_d.column(0) } else { sample.true_h_int.column(j - 1) };
        for i in 0..m {
            let (hr, hi) = (h[i].re * inv_sigma, h[i].im * inv_sigma);
            a[i * cols + 2 * j] = hr;
            a[(m + i) * cols + 2 * j] = hi;
            a[i * cols + 2 * j + 1] = hi;
            a[(m + i) * cols + 2 * j + 1] = -hr;
        }
    }
    a
}

/// Per-sample output SINR of packed weights `w` (`[B, 2M]`), as a `[B]` node.
pub fn sinr_node(tape: &mut Tape, w: Var, samples: &[&DatasetSample]) -> Result<Var> {
    let s = tape.shape(w).to_vec();
    if s.len() != 2 || s[0] != samples.len() {
        return Err(Error::Shape(format!("weights {s:?} for {} samples", samples.len())));
    }
    let (b, m2) = (s[0], s[1]);
    let k = samples[0].true_h_int.ncols();
    let cols = 2 * (k + 1);
    let mut a = Vec::with_capacity(b * m2 * cols);
    for smp in samples {
        if smp.true_h_d.len() * 2 != m2 || smp.true_h_int.ncols() != k {
            return Err(Error::Shape("samples in a batch must share M and K".into()));
        }
        a.extend(loss_operator(smp));
    }
    let a = tape.constant(Tensor::new(vec![b, m2, cols], a)?);
    let w3 = tape.reshape(w, &[b, m2, 1])?;
    let prod = tape.mul(w3, a)?;
    let proj = tape.sum(prod, Some(1))?;
    let sq = tape.square(proj)?;
    let sig = tape.slice(sq, 1, 0, 2)?;
    let num = tape.sum(sig, Some(1))?;
    let wsq = tape.square(w)?;
    let mut den = tape.sum(wsq, Some(1))?;
    if k > 0 {
        let int = tape.slice(sq, 1, 2, cols - 2)?;
        let int = tape.sum(int, Some(1))?;
        den = tape.add(den, int)?;
    }
    tape.div(num, den)
}

/// `−mean_b SINR_b`, or `−mean_b 10·log10 SINR_b` when `db`.
pub fn loss_asinr(tape: &mut Tape, w: Var, samples: &[&DatasetSample], db: bool) -> Result<Var> {
    let mut s = sinr_node(tape, w, samples)?;
    if db {
        let ln = tape.ln(s)?;
        let c = tape.constant(Tensor::scalar(10.0 / std::f64::consts::LN_10));
        s = tape.mul(ln, c)?;
    }
    let mean = tape.mean(s)?;
    let neg = tape.constant(Tensor::scalar(-1.0));
    tape.mul(mean, neg)
}

/// Adaptive moment estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learn_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learn_rate: f64) -> Self {
        Self { learn_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; rejects non-finite gradients before touching
    /// anything.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {name} {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).unwrap();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= self.learn_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Loss and gradients of one mini-batch in train mode. Also returns the
/// batch-norm statistics to fold into the running averages.
pub fn batch_gradients(
    model: &MambaBf,
    samples: &[&DatasetSample],
    loss_db: bool,
) -> Result<(f64, BTreeMap<String, Tensor>, Option<(Vec<f64>, Vec<f64>, usize)>)> {
    let ys: Vec<&SnapshotMatrix> = samples.iter().map(|s| &s.snapshots).collect();
    let x = network_input(&ys, model.hyper.m)?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let xv = tape.constant(x);
    let fwd = model.forward_tape(&mut tape, &p, xv, Mode::Train)?;
    let loss = loss_asinr(&mut tape, fwd.weights, samples, loss_db)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Divergence(format!("batch loss {value}")));
    }
    let grads = tape.backward(loss)?;
    let named = p.iter().map(|(k, v)| (k.clone(), grads.get(*v))).collect();
    Ok((value, named, fwd.bn_batch))
}

/// Finite-difference check of the batch loss with respect to every network
/// parameter at `M = 4`, `L = 8`, `M_z = 6`, batch 2, train-mode batch norm.
pub fn end_to_end_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let sc = ScenarioConfig { array: ArrayConfig { mx: 2, my: 2 }, ..Default::default() };
    let h = Hyperparams { m: 4, l: 8, m_z: 6, k_f: 3, k: 3, hidden: 5, pool: 2 };
    let samples = build_dataset(&sc, 2, seed, Split::Test, h.l, CsiMode::Perfect)?;
    let refs: Vec<&DatasetSample> = samples.iter().collect();
    let ys: Vec<&SnapshotMatrix> = samples.iter().map(|s| &s.snapshots).collect();
    let x = network_input(&ys, h.m)?;
    let model = MambaBf::init(h, seed)?;
    let names: Vec<String> = model.params.keys().cloned().collect();
    let point: Vec<Tensor> = model.params.values().cloned().collect();
    gradient_check(
        |tape, vars| {
            let bound: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
            let xv = tape.constant(x.clone());
            let fwd = model.forward_tape(tape, &bound, xv, Mode::Train)?;
            loss_asinr(tape, fwd.weights, &refs, false)
        },
        &point,
        1e-6,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub mean_test_asinr_db: f64,
}

/// Runs `config.epochs` epochs of shuffled mini-batch training.
///
/// On divergence the error is returned and `model` holds the parameters of
/// the last successful step.
pub fn train(
    model: &mut MambaBf,
    train_set: &[DatasetSample],
    test_set: &[DatasetSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut adam = Adam::new(config.learn_rate);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::stream_rng(config.seed, stream::SHUFFLE, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch) {
            let batch: Vec<&DatasetSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads, bn) = batch_gradients(model, &batch, config.loss_db)?;
            adam.step(&mut model.params, &grads)?;
            if let Some((mean, var, count)) = bn {
                model.update_running_stats(&mean, &var, count);
            }
            total += loss * batch.len() as f64;
        }
        let mean_test_asinr_db = mean_db(&network_sinr(model, test_set, config.eval_batch)?);
        let rec = EpochRecord { epoch: epoch + 1, mean_train_loss: total / train_set.len() as f64, mean_test_asinr_db };
        log::info!(
            "epoch {}: train loss {:.6e}, test ASINR {:.4} dB",
            rec.epoch,
            rec.mean_train_loss,
            rec.mean_test_asinr_db
        );
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

/// Inference-mode weights for every sample, in order.
pub fn network_weights(model: &MambaBf, samples: &[DatasetSample], chunk: usize) -> Result<Vec<BeamWeights>> {
    let parts: Vec<Vec<BeamWeights>> = samples
        .par_chunks(chunk.max(1))
        .map(|c| {
            let ys: Vec<&SnapshotMatrix> = c.iter().map(|s| &s.snapshots).collect();
            model.infer_batch(&ys)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Linear SINR of the network on each sample.
pub fn network_sinr(model: &MambaBf, samples: &[DatasetSample], chunk: usize) -> Result<Vec<f64>> {
    let w = network_weights(model, samples, chunk)?;
    Ok(samples.iter().zip(&w).map(|(s, w)| s.sinr(&w.weights)).collect())
}

/// Mean of per-sample dB values.
pub fn mean_db(linear: &[f64]) -> f64 {
    linear.iter().map(|&v| to_db(v)).sum::<f64>() / linear.len() as f64
}

/// Weights of a closed-form baseline for one sample.
pub fn baseline_weights(sample: &DatasetSample, method: Method) -> Result<BeamWeights> {
    let h = sample.baseline_h_d();
    match method {
        Method::Initial => BeamWeights::new(sample.steering_d.clone(), Method::Initial),
        Method::Mrc => mrc(h),
        Method::Zf => zf(h, &sample.true_h_int),
        Method::Smi => smi(&sample.snapshots, h, Loading::default()),
        Method::Mvdr => {
            let r = &sample.true_h_d * sample.true_h_d.adjoint()
                + &sample.true_h_int * sample.true_h_int.adjoint()
                + DMatrix::from_diagonal_element(h.len(), h.len(), Complex64::new(sample.noise_w, 0.0));
            mvdr(&r, h, Loading::default(), Method::Mvdr)
        }
        Method::MambaBf => Err(Error::Config("the network is not a closed-form baseline".into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample_id: usize,
    pub seed: u64,
    pub sinr_in_db: f64,
    pub sinr_out_db: BTreeMap<Method, f64>,
    pub desired_doa: Doa,
    pub interferer_doas: Vec<Doa>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub csi: CsiMode,
    pub methods: Vec<Method>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_in_db(&self) -> f64 {
        self.rows.iter().map(|r| r.sinr_in_db).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_out_db(&self, method: Method) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.sinr_out_db.get(&method).copied()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<()> {
        for c in comments {
            for line in c.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        let k = self.rows.first().map_or(0, |r| r.interferer_doas.len());
        write!(out, "sample_id,seed,csi_mode,sinr_in_db")?;
        for m in &self.methods {
            write!(out, ",{m}_sinr_out_db")?;
        }
        write!(out, ",desired_az_deg,desired_el_deg")?;
        for i in 1..=k {
            write!(out, ",int{i}_az_deg,int{i}_el_deg")?;
        }
        writeln!(out)?;
        for r in &self.rows {
            write!(out, "{},{},{},{:.9}", r.sample_id, r.seed, self.csi.tag(), r.sinr_in_db)?;
            for m in &self.methods {
                write!(out, ",{:.9}", r.sinr_out_db[m])?;
            }
            write!(out, ",{:.6},{:.6}", r.desired_doa.azimuth_deg, r.desired_doa.elevation_deg)?;
            for d in &r.interferer_doas {
                write!(out, ",{:.6},{:.6}", d.azimuth_deg, d.elevation_deg)?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// `SINR_in` with `w_in = v_d` and `SINR_out` for every requested method.
pub fn evaluate(model: Option<&MambaBf>, test_set: &[DatasetSample], methods: &[Method], csi: CsiMode, chunk: usize) -> Result<EvalReport> {
    let mut methods: Vec<Method> = methods.to_vec();
    methods.sort();
    methods.dedup();
    let net = if methods.contains(&Method::MambaBf) {
        let model = model.ok_or_else(|| Error::Config("evaluating the network requires a checkpoint".into()))?;
        Some(network_sinr(model, test_set, chunk)?)
    } else {
        None
    };
    let rows = test_set
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let sinr_in_db = to_db(s.sinr(&s.steering_d));
            let mut out = BTreeMap::new();
            for &m in &methods {
                let v = match (m, &net) {
                    (Method::MambaBf, Some(n)) => n[i],
                    _ => s.sinr(&baseline_weights(s, m)?.weights),
                };
                out.insert(m, to_db(v));
            }
            Ok(EvalRow {
                sample_id: s.id,
                seed: s.seed,
                sinr_in_db,
                sinr_out_db: out,
                desired_doa: s.desired_doa,
                interferer_doas: s.interferer_doas.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { csi, methods, rows })
}

pub fn write_history_csv<W: Write>(mut out: W, history: &[EpochRecord], comments: &[String]) -> Result<()> {
    for c in comments {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    writeln!(out, "epoch,mean_train_loss,mean_test_asinr_db")?;
    for r in history {
        writeln!(out, "{},{:.12e},{:.9}", r.epoch, r.mean_train_loss, r.mean_test_asinr_db)?;
    }
    Ok(())
}
