//! Covariance estimation, closed-form and adaptive beamformers, SINR metrics
//! and beam patterns.
//!
//! SINR is always evaluated from the channels directly,
//! `|wᴴh_d|² / (Σ_k |wᴴh_k|² + σ²‖w‖²)`, which equals the covariance form
//! `wᴴR_d w / wᴴR_{i+n} w` without building the `M × M` outer products.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, HermitianCholesky, View};
use crate::scenario::{steering_vector, to_db, ArrayGeometry, Doa, Scenario};
use crate::signals::SnapshotMatrix;

/// Condition number above which a covariance solve logs a warning.
pub const CONDITION_WARN: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Initial,
    Mrc,
    Zf,
    Smi,
    Mvdr,
    #[serde(rename = "mamba")]
    MambaBf,
}

impl Method {
    pub const BASELINES: [Method; 4] = [Method::Mrc, Method::Zf, Method::Smi, Method::Mvdr];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Initial => "initial",
            Method::Mrc => "mrc",
            Method::Zf => "zf",
            Method::Smi => "smi",
            Method::Mvdr => "mvdr",
            Method::MambaBf => "mamba",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamWeights {
    pub weights: DVector<Complex64>,
    pub method: Method,
}

impl BeamWeights {
    pub fn new(weights: DVector<Complex64>, method: Method) -> Result<Self> {
        if weights.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite(format!("{method} weights")));
        }
        if weights.norm() == 0.0 {
            return Err(Error::DegenerateGeometry(format!("{method} weights are all zero")));
        }
        Ok(Self { weights, method })
    }

    /// `w_in = v_d`.
    pub fn initial(scenario: &Scenario) -> Self {
        Self { weights: scenario.desired_steering().clone(), method: Method::Initial }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `R̂ = (1/L) Σ_l y[l] y[l]ᴴ`, exactly Hermitian.
pub fn sample_covariance(y: &SnapshotMatrix) -> DMatrix<Complex64> {
    let m = y.num_elements();
    let l = y.num_snapshots();
    // Column-major storage read as a row-major M×L matrix with strides (1, M).
    let yr: Vec<f64> = y.data.iter().map(|z| z.re).collect();
    let yi: Vec<f64> = y.data.iter().map(|z| z.im).collect();
    let yv = View { rows: m, cols: l, rs: 1, cs: m as isize };
    let scale = 1.0 / l as f64;
    let mut re = vec![0.0; m * m];
    let mut im = vec![0.0; m * m];
    gemm(scale, &yr, yv, &yr, yv.t(), 0.0, &mut re);
    gemm(scale, &yi, yv, &yi, yv.t(), 1.0, &mut re);
    gemm(scale, &yi, yv, &yr, yv.t(), 0.0, &mut im);
    gemm(-scale, &yr, yv, &yi, yv.t(), 1.0, &mut im);
    let mut r = DMatrix::from_fn(m, m, |i, j| Complex64::new(re[i * m + j], im[i * m + j]));
    hermitize(&mut r);
    r
}

fn hermitize(r: &mut DMatrix<Complex64>) {
    let m = r.nrows();
    for i in 0..m {
        r[(i, i)].im = 0.0;
        for j in (i + 1)..m {
            let avg = (r[(i, j)] + r[(j, i)].conj()) * 0.5;
            r[(i, j)] = avg;
            r[(j, i)] = avg.conj();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSet {
    pub r_desired: DMatrix<Complex64>,
    pub r_int_noise: DMatrix<Complex64>,
    pub r_sample: DMatrix<Complex64>,
}

impl CovarianceSet {
    pub fn new(scenario: &Scenario, y: &SnapshotMatrix) -> Self {
        Self {
            r_desired: desired_covariance(scenario),
            r_int_noise: interference_noise_covariance(scenario),
            r_sample: sample_covariance(y),
        }
    }

    /// `R = R_d + R_{i+n}`.
    pub fn r_true(&self) -> DMatrix<Complex64> {
        &self.r_desired + &self.r_int_noise
    }
}

pub fn desired_covariance(scenario: &Scenario) -> DMatrix<Complex64> {
    let h = scenario.desired_channel();
    h * h.adjoint()
}

pub fn interference_noise_covariance(scenario: &Scenario) -> DMatrix<Complex64> {
    let h = scenario.interference_matrix();
    let m = scenario.num_elements();
    let mut r = &h * h.adjoint() + DMatrix::identity(m, m) * Complex64::from(scenario.noise_power_w);
    hermitize(&mut r);
    r
}

/// True covariance `R_d + R_{i+n}` of the scenario.
pub fn true_covariance(scenario: &Scenario) -> DMatrix<Complex64> {
    let mut r = desired_covariance(scenario) + interference_noise_covariance(scenario);
    hermitize(&mut r);
    r
}

/// `w = h_d / ‖h_d‖`.
pub fn mrc(h_d: &DVector<Complex64>) -> Result<BeamWeights> {
    let n = h_d.norm();
    if !(n > 0.0) {
        return Err(Error::DegenerateGeometry("MRC of a zero channel".into()));
    }
    BeamWeights::new(h_d.unscale(n), Method::Mrc)
}

/// Projects `x` onto the orthogonal complement of the column space of `h`.
fn project_out(h: &DMatrix<Complex64>, x: &DVector<Complex64>) -> DVector<Complex64> {
    let gram = h.adjoint() * h;
    let chol = HermitianCholesky::new(&gram).filter(|c| c.condition_estimate() < CONDITION_WARN);
    let coeffs = match chol {
        Some(c) => c.solve(&(h.adjoint() * x)),
        None => {
            // Collinear interferers: fall back to the pseudo-inverse of H.
            let svd = h.clone().svd(true, true);
            let tol = 1e-12 * svd.singular_values.max();
            let pinv = svd
                .pseudo_inverse(tol)
                .expect("SVD computed with both factors");
            pinv * x
        }
    };
    x - h * coeffs
}

/// Zero-forcing: `P h_d / ‖P h_d‖` with `P = I − H(HᴴH)⁻¹Hᴴ`.
pub fn zf(h_d: &DVector<Complex64>, h_int: &DMatrix<Complex64>) -> Result<BeamWeights> {
    if h_int.ncols() == 0 {
        return mrc(h_d).map(|w| BeamWeights { method: Method::Zf, ..w });
    }
    if h_int.ncols() >= h_int.nrows() {
        return Err(Error::DegenerateGeometry("ZF needs fewer interferers than elements".into()));
    }
    if h_int.iter().all(|z| *z == Complex64::new(0.0, 0.0)) {
        return Err(Error::DegenerateGeometry("all interferer channels are zero".into()));
    }
    // Two projection passes restore orthogonality lost to rounding in the first.
    let once = project_out(h_int, h_d);
    let p = project_out(h_int, &once);
    let n = p.norm();
    if !(n > 1e-10 * h_d.norm()) {
        return Err(Error::DegenerateGeometry(
            "desired channel lies in the interference subspace".into(),
        ));
    }
    BeamWeights::new(p.unscale(n), Method::Zf)
}

/// Optional diagonal loading `R + ε·tr(R)/M·I`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Loading(pub Option<f64>);

impl Loading {
    pub const DEFAULT_EPSILON: f64 = 1e-3;

    pub fn apply(&self, r: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        match self.0 {
            None => r.clone(),
            Some(eps) => {
                let m = r.nrows();
                let load = eps * r.trace().re / m as f64;
                r + DMatrix::identity(m, m) * Complex64::from(load)
            }
        }
    }
}

fn hermitian_solve(r: &DMatrix<Complex64>, b: &DVector<Complex64>) -> Result<DVector<Complex64>> {
    let m = r.nrows();
    if r.ncols() != m || b.len() != m {
        return Err(Error::Shape(format!("{}x{} system with rhs {}", m, r.ncols(), b.len())));
    }
    let chol = HermitianCholesky::new(r)
        .ok_or_else(|| Error::Conditioning("covariance is not numerically positive definite".into()))?;
    let cond = chol.condition_estimate();
    if cond > CONDITION_WARN {
        log::warn!("covariance condition estimate {cond:.3e} exceeds {CONDITION_WARN:.0e}");
    }
    Ok(chol.solve(b))
}

/// `w = R⁻¹v / (vᴴR⁻¹v)`, so that `wᴴv = 1`.
pub fn mvdr(r: &DMatrix<Complex64>, v_d: &DVector<Complex64>, loading: Loading, method: Method) -> Result<BeamWeights> {
    if !(v_d.norm() > 0.0) {
        return Err(Error::DegenerateGeometry("zero steering vector".into()));
    }
    let x = hermitian_solve(&loading.apply(r), v_d)?;
    let denom = v_d.dotc(&x);
    if !(denom.norm() > 0.0) || !denom.re.is_finite() {
        return Err(Error::Conditioning("vᴴR⁻¹v vanished".into()));
    }
    BeamWeights::new(x.map(|z| z / denom), method)
}

/// Sample-matrix-inversion MVDR from snapshots.
pub fn smi(y: &SnapshotMatrix, steering: &DVector<Complex64>, loading: Loading) -> Result<BeamWeights> {
    mvdr(&sample_covariance(y), steering, loading, Method::Smi)
}

/// MVDR with the true covariance `R_d + R_{i+n}`.
pub fn mvdr_true(scenario: &Scenario) -> Result<BeamWeights> {
    mvdr(&true_covariance(scenario), scenario.desired_steering(), Loading::default(), Method::Mvdr)
}

/// Output SINR (linear).
pub fn sinr(w: &DVector<Complex64>, h_d: &DVector<Complex64>, h_int: &DMatrix<Complex64>, noise_w: f64) -> f64 {
    let signal = w.dotc(h_d).norm_sqr();
    let interference: f64 = h_int.column_iter().map(|h| w.dotc(&h).norm_sqr()).sum();
    signal / (interference + noise_w * w.norm_squared())
}

pub fn scenario_sinr(w: &DVector<Complex64>, scenario: &Scenario) -> f64 {
    sinr(w, scenario.desired_channel(), &scenario.interference_matrix(), scenario.noise_power_w)
}

/// Mean of the per-snapshot SINR values.
pub fn average_sinr(per_snapshot: &[f64]) -> f64 {
    per_snapshot.iter().sum::<f64>() / per_snapshot.len() as f64
}

/// Average SINR over `len` snapshots of one coherence interval. Channels are
/// constant within the interval, so every term equals [`sinr`].
pub fn asinr(w: &DVector<Complex64>, scenario: &Scenario, len: usize) -> f64 {
    let per = scenario_sinr(w, scenario);
    average_sinr(&vec![per; len.max(1)])
}

/// Receive gain `η · M · |wᴴv(ϕ)|² / ‖w‖²`.
pub fn beam_gain(geometry: &ArrayGeometry, w: &DVector<Complex64>, doa: Doa, efficiency: f64) -> f64 {
    let v = steering_vector(geometry, doa);
    efficiency * geometry.num_elements() as f64 * w.dotc(&v).norm_sqr() / w.norm_squared()
}

/// Inclusive grid `start, start + step, …` not exceeding `stop`.
pub fn angle_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) {
        return Err(Error::Config(format!("invalid grid [{start}, {stop}] step {step}")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| start + i as f64 * step).collect())
}

/// Receive gain in dB over an azimuth × elevation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamPattern {
    pub azimuths: Vec<f64>,
    pub elevations: Vec<f64>,
    /// `gain_db[(i_az, i_el)]`.
    pub gain_db: DMatrix<f64>,
}

pub fn beam_pattern_grid(
    geometry: &ArrayGeometry,
    w: &DVector<Complex64>,
    az_range: (f64, f64),
    el_range: (f64, f64),
    step_deg: f64,
    efficiency: f64,
) -> Result<BeamPattern> {
    let azimuths = angle_grid(az_range.0, az_range.1, step_deg)?;
    let elevations = angle_grid(el_range.0, el_range.1, step_deg)?;
    let mut gain_db = DMatrix::zeros(azimuths.len(), elevations.len());
    for (i, &az) in azimuths.iter().enumerate() {
        for (j, &el) in elevations.iter().enumerate() {
            let doa = Doa::new(az, el)?;
            gain_db[(i, j)] = to_db(beam_gain(geometry, w, doa, efficiency));
        }
    }
    Ok(BeamPattern { azimuths, elevations, gain_db })
}

impl BeamPattern {
    pub fn peak_db(&self) -> f64 {
        self.gain_db.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index pair of the maximum (first occurrence).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for i in 0..self.gain_db.nrows() {
            for j in 0..self.gain_db.ncols() {
                if self.gain_db[(i, j)] > self.gain_db[best] {
                    best = (i, j);
                }
            }
        }
        best
    }

    pub fn lookup(&self, doa: Doa) -> Option<f64> {
        let find = |grid: &[f64], x: f64| grid.iter().position(|g| (g - x).abs() < 1e-9);
        Some(self.gain_db[(find(&self.azimuths, doa.azimuth_deg)?, find(&self.elevations, doa.elevation_deg)?)])
    }

    /// Header row of azimuths, one row per elevation, cells in dB. Lines
    /// starting with `#` carry provenance.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<()> {
        for line in comments.iter().flat_map(|c| c.lines()) {
            writeln!(out, "# {line}")?;
        }
        write!(out, "el_deg\\az_deg")?;
        for az in &self.azimuths {
            write!(out, ",{az}")?;
        }
        writeln!(out)?;
        for (j, el) in self.elevations.iter().enumerate() {
            write!(out, "{el}")?;
            for i in 0..self.azimuths.len() {
                write!(out, ",{:.6}", self.gain_db[(i, j)])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}
