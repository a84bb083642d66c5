//! Symbol streams and received snapshot synthesis.
//!
//! Snapshots are symbol-rate samples of `y[l] = h_d s_x[l] + H_i s_i[l] + n[l]`
//! with independent streams for the desired source (QPSK), each interferer
//! (8-QAM) and the receiver noise.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::Scenario;
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modulation {
    Qpsk,
    /// Rectangular 2×4 grid, `{±1, ±3} + j{±1}`.
    Qam8,
}

impl Modulation {
    /// Constellation points scaled to unit average power.
    pub fn constellation(self) -> Vec<Complex64> {
        match self {
            Modulation::Qpsk => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                vec![
                    Complex64::new(s, s),
                    Complex64::new(-s, s),
                    Complex64::new(-s, -s),
                    Complex64::new(s, -s),
                ]
            }
            Modulation::Qam8 => {
                let norm = 6f64.sqrt().recip();
                let mut pts = Vec::with_capacity(8);
                for im in [-1.0, 1.0] {
                    for re in [-3.0, -1.0, 1.0, 3.0] {
                        pts.push(Complex64::new(re * norm, im * norm));
                    }
                }
                pts
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolStream {
    pub symbols: Vec<Complex64>,
    pub modulation: Modulation,
}

pub fn gen_symbols(modulation: Modulation, len: usize, seed: u64) -> Result<SymbolStream> {
    if len == 0 {
        return Err(Error::Config("symbol stream length must be at least 1".into()));
    }
    let points = modulation.constellation();
    let mut rng = seed::rng(seed);
    let symbols = (0..len).map(|_| points[rng.random_range(0..points.len())]).collect();
    Ok(SymbolStream { symbols, modulation })
}

/// Received samples, one column per snapshot (`M × L`).
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    pub data: DMatrix<Complex64>,
    pub sample_rate_hz: f64,
}

impl SnapshotMatrix {
    pub fn new(data: DMatrix<Complex64>, sample_rate_hz: f64) -> Result<Self> {
        if data.ncols() == 0 || data.nrows() == 0 {
            return Err(Error::Shape("snapshot matrix must be non-empty".into()));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("snapshot matrix".into()));
        }
        Ok(Self { data, sample_rate_hz })
    }

    pub fn num_elements(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_snapshots(&self) -> usize {
        self.data.ncols()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { data: self.data.map(|z| z * alpha), sample_rate_hz: self.sample_rate_hz }
    }
}

/// The three additive terms of the snapshot model, kept apart.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotComponents {
    pub desired: DMatrix<Complex64>,
    pub interference: DMatrix<Complex64>,
    pub noise: DMatrix<Complex64>,
}

impl SnapshotComponents {
    pub fn total(&self) -> DMatrix<Complex64> {
        &self.desired + &self.interference + &self.noise
    }
}

pub fn synthesize_components(scenario: &Scenario, len: usize, seed: u64) -> Result<SnapshotComponents> {
    if len == 0 {
        return Err(Error::Config("number of snapshots must be at least 1".into()));
    }
    let m = scenario.num_elements();

    let s_x = gen_symbols(Modulation::Qpsk, len, seed::derive(seed, stream::DESIRED_SYMBOLS, 0))?;
    let h_d = scenario.desired_channel();
    let desired = DMatrix::from_fn(m, len, |r, c| h_d[r] * s_x.symbols[c]);

    let mut interference = DMatrix::zeros(m, len);
    for (k, e) in scenario.interferers.iter().enumerate() {
        let s_k = gen_symbols(Modulation::Qam8, len, seed::derive(seed, stream::INTERFERER_SYMBOLS, k as u64))?;
        let h = e.channel.coefficients();
        for c in 0..len {
            for r in 0..m {
                interference[(r, c)] += h[r] * s_k.symbols[c];
            }
        }
    }

    let sd = (scenario.noise_power_w / 2.0).sqrt();
    let mut rng = seed::stream_rng(seed, stream::NOISE, 0);
    let noise = DMatrix::from_fn(m, len, |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        Complex64::new(sd * re, sd * im)
    });

    Ok(SnapshotComponents { desired, interference, noise })
}

/// Synthesizes `L` snapshots at `f_s = 2 · BW`.
pub fn synthesize_snapshots(scenario: &Scenario, len: usize, seed: u64) -> Result<SnapshotMatrix> {
    let parts = synthesize_components(scenario, len, seed)?;
    SnapshotMatrix::new(parts.total(), 2.0 * scenario.desired.link.bandwidth_hz)
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"NGSOSNAP";
const SNAPSHOT_VERSION: u32 = 1;

/// Binary dump: magic, `u32` version, `u64` M, `u64` L, then `M·L` pairs of
/// little-endian `f64` (re, im), row-major by element index.
pub fn write_snapshots<W: Write>(y: &SnapshotMatrix, mut out: W) -> Result<()> {
    out.write_all(SNAPSHOT_MAGIC)?;
    out.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
    out.write_u64::<LittleEndian>(y.num_elements() as u64)?;
    out.write_u64::<LittleEndian>(y.num_snapshots() as u64)?;
    for r in 0..y.num_elements() {
        for c in 0..y.num_snapshots() {
            let z = y.data[(r, c)];
            out.write_f64::<LittleEndian>(z.re)?;
            out.write_f64::<LittleEndian>(z.im)?;
        }
    }
    Ok(())
}

/// Reads a dump written by [`write_snapshots`]. The sample rate is not part of
/// the format and is returned as zero.
pub fn read_snapshots<R: Read>(mut input: R) -> Result<SnapshotMatrix> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Format("bad snapshot magic".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let m = input.read_u64::<LittleEndian>()? as usize;
    let l = input.read_u64::<LittleEndian>()? as usize;
    let mut data = DMatrix::zeros(m, l);
    for r in 0..m {
        for c in 0..l {
            let re = input.read_f64::<LittleEndian>()?;
            let im = input.read_f64::<LittleEndian>()?;
            data[(r, c)] = Complex64::new(re, im);
        }
    }
    SnapshotMatrix::new(data, 0.0)
}
