//! Array geometry, link budgets and seeded interference scenarios.
//!
//! Elements of the `M_x × M_y` planar array are flattened as
//! `m = m_x · M_y + m_y`. Every channel is a scaled steering vector
//! `h = χ · v(φ, θ)` with `χ = sqrt(P · (λ / 4πr)² · G)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::beamform::beam_gain;
use crate::error::{Error, Result};
use crate::seed::{self, stream};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const BOLTZMANN: f64 = 1.380649e-23;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    m_x_count: usize,
    m_y_count: usize,
    spacing: f64,
    wavelength: f64,
}

impl ArrayGeometry {
    pub fn new(m_x_count: usize, m_y_count: usize, spacing: f64, wavelength: f64) -> Result<Self> {
        if m_x_count == 0 || m_y_count == 0 {
            return Err(Error::Config("array needs at least one element per axis".into()));
        }
        if !(spacing > 0.0 && spacing.is_finite()) || !(wavelength > 0.0 && wavelength.is_finite()) {
            return Err(Error::Config("spacing and wavelength must be positive".into()));
        }
        Ok(Self { m_x_count, m_y_count, spacing, wavelength })
    }

    /// Half-wavelength spaced array at the given carrier.
    pub fn half_wavelength(m_x_count: usize, m_y_count: usize, carrier_hz: f64) -> Result<Self> {
        let wavelength = wavelength(carrier_hz)?;
        Self::new(m_x_count, m_y_count, wavelength / 2.0, wavelength)
    }

    pub fn m_x_count(&self) -> usize {
        self.m_x_count
    }

    pub fn m_y_count(&self) -> usize {
        self.m_y_count
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn num_elements(&self) -> usize {
        self.m_x_count * self.m_y_count
    }

    pub fn element_index(&self, m_x: usize, m_y: usize) -> usize {
        m_x * self.m_y_count + m_y
    }
}

pub fn wavelength(carrier_hz: f64) -> Result<f64> {
    if !(carrier_hz > 0.0 && carrier_hz.is_finite()) {
        return Err(Error::Config("carrier frequency must be positive".into()));
    }
    Ok(SPEED_OF_LIGHT / carrier_hz)
}

/// Direction of arrival in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Doa {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

impl Doa {
    pub fn new(azimuth_deg: f64, elevation_deg: f64) -> Result<Self> {
        let ok = |a: f64| (-90.0..=90.0).contains(&a);
        if !ok(azimuth_deg) || !ok(elevation_deg) {
            return Err(Error::Config(format!(
                "DOA ({azimuth_deg}, {elevation_deg}) outside [-90, 90] degrees"
            )));
        }
        Ok(Self { azimuth_deg, elevation_deg })
    }

    pub const BORESIGHT: Doa = Doa { azimuth_deg: 0.0, elevation_deg: 0.0 };
}

/// Unit-norm array response toward `doa`.
pub fn steering_vector(geometry: &ArrayGeometry, doa: Doa) -> DVector<Complex64> {
    let m = geometry.num_elements();
    let (az, el) = (doa.azimuth_deg.to_radians(), doa.elevation_deg.to_radians());
    let k = 2.0 * std::f64::consts::PI / geometry.wavelength * geometry.spacing;
    let ux = az.sin() * el.cos();
    let uy = el.sin();
    let amp = 1.0 / (m as f64).sqrt();
    let mut v = DVector::zeros(m);
    for mx in 0..geometry.m_x_count {
        for my in 0..geometry.m_y_count {
            let phase = k * (mx as f64 * ux + my as f64 * uy);
            v[geometry.element_index(mx, my)] = Complex64::from_polar(amp, phase);
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatelliteLink {
    pub eirp_dbw: f64,
    pub slant_range_m: f64,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub doa: Doa,
}

impl SatelliteLink {
    pub fn eirp_w(&self) -> f64 {
        10f64.powf(self.eirp_dbw / 10.0)
    }

    /// Inverse free-space path loss `(λ / 4πr)²`.
    pub fn free_space_gain(&self) -> Result<f64> {
        if !(self.slant_range_m > 0.0) {
            return Err(Error::Config("slant range must be positive".into()));
        }
        let lambda = wavelength(self.carrier_hz)?;
        Ok((lambda / (4.0 * std::f64::consts::PI * self.slant_range_m)).powi(2))
    }
}

/// Channel amplitude `χ = sqrt(P · L · G)`.
pub fn link_budget_gain(link: &SatelliteLink, rx_gain_linear: f64) -> Result<f64> {
    if !(rx_gain_linear >= 0.0) {
        return Err(Error::Config("receive gain must be non-negative".into()));
    }
    Ok((link.eirp_w() * link.free_space_gain()? * rx_gain_linear).sqrt())
}

/// Thermal noise power `κ T B` in watts.
pub fn noise_power(temperature_k: f64, bandwidth_hz: f64) -> f64 {
    BOLTZMANN * temperature_k * bandwidth_hz
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// `h = χ · v(ϕ)`; the unit steering vector and amplitude are kept so the
/// product can be reconstructed exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector {
    steering: DVector<Complex64>,
    coefficients: DVector<Complex64>,
    gain_scalar: f64,
    doa: Doa,
}

impl ChannelVector {
    pub fn new(geometry: &ArrayGeometry, doa: Doa, gain_scalar: f64) -> Self {
        let steering = steering_vector(geometry, doa);
        let coefficients = steering.map(|v| v * gain_scalar);
        Self { steering, coefficients, gain_scalar, doa }
    }

    pub fn coefficients(&self) -> &DVector<Complex64> {
        &self.coefficients
    }

    pub fn steering(&self) -> &DVector<Complex64> {
        &self.steering
    }

    pub fn gain_scalar(&self) -> f64 {
        self.gain_scalar
    }

    pub fn doa(&self) -> Doa {
        self.doa
    }

    /// Same direction, amplitude scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let gain_scalar = self.gain_scalar * factor;
        Self {
            steering: self.steering.clone(),
            coefficients: self.steering.map(|v| v * gain_scalar),
            gain_scalar,
            doa: self.doa,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emitter {
    pub link: SatelliteLink,
    pub channel: ChannelVector,
}

/// One coherence interval: all channels are constant across its snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub geometry: ArrayGeometry,
    pub desired: Emitter,
    pub interferers: Vec<Emitter>,
    pub noise_power_w: f64,
    pub ut_efficiency: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn num_elements(&self) -> usize {
        self.geometry.num_elements()
    }

    pub fn num_interferers(&self) -> usize {
        self.interferers.len()
    }

    pub fn desired_steering(&self) -> &DVector<Complex64> {
        self.desired.channel.steering()
    }

    pub fn desired_channel(&self) -> &DVector<Complex64> {
        self.desired.channel.coefficients()
    }

    /// `H_i`, one interferer channel per column (`M × K`).
    pub fn interference_matrix(&self) -> DMatrix<Complex64> {
        let m = self.num_elements();
        DMatrix::from_fn(m, self.interferers.len(), |r, c| {
            self.interferers[c].channel.coefficients()[r]
        })
    }

    /// Copy with the desired channel amplitude multiplied by `factor`.
    pub fn desired_scaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        s.desired.channel = s.desired.channel.scaled(factor);
        s
    }

    /// Copy with every interferer removed.
    pub fn without_interference(&self) -> Self {
        Self { interferers: Vec::new(), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArrayConfig {
    pub mx: usize,
    pub my: usize,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self { mx: 10, my: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesiredConfig {
    pub eirp_dbw: f64,
    pub range_km: f64,
    pub doa_az: f64,
    pub doa_el: f64,
}

impl Default for DesiredConfig {
    fn default() -> Self {
        Self { eirp_dbw: 45.0, range_km: 1000.0, doa_az: 0.0, doa_el: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterfererConfig {
    pub count: usize,
    pub eirp_dbw: f64,
    pub range_km_min: f64,
    pub range_km_max: f64,
    /// Azimuth and elevation are drawn independently from `[-x, x]`.
    pub doa_abs_max_deg: f64,
}

impl Default for InterfererConfig {
    fn default() -> Self {
        Self {
            count: 3,
            eirp_dbw: 40.0,
            range_km_min: 500.0,
            range_km_max: 600.0,
            doa_abs_max_deg: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsiConfig {
    pub error_variance: f64,
}

impl Default for CsiConfig {
    fn default() -> Self {
        Self { error_variance: 0.15 }
    }
}

/// Scenario parameters. Every key is optional in the TOML file; missing
/// keys take the reference values below.
///
/// ```toml
/// carrier_ghz = 11.75
/// bandwidth_mhz = 50.0
/// noise_temp_k = 230.0
/// ut_efficiency = 0.99
/// seed = 0
///
/// [array]
/// mx = 10
/// my = 10
///
/// [desired]
/// eirp_dbw = 45.0
/// range_km = 1000.0
/// doa_az = 0.0
/// doa_el = 0.0
///
/// [interferers]
/// count = 3
/// eirp_dbw = 40.0
/// range_km_min = 500.0
/// range_km_max = 600.0
/// doa_abs_max_deg = 40.0
///
/// [csi]
/// error_variance = 0.15
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub carrier_ghz: f64,
    pub bandwidth_mhz: f64,
    pub noise_temp_k: f64,
    pub ut_efficiency: f64,
    pub seed: u64,
    pub array: ArrayConfig,
    pub desired: DesiredConfig,
    pub interferers: InterfererConfig,
    pub csi: CsiConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            carrier_ghz: 11.75,
            bandwidth_mhz: 50.0,
            noise_temp_k: 230.0,
            ut_efficiency: 0.99,
            seed: 0,
            array: ArrayConfig::default(),
            desired: DesiredConfig::default(),
            interferers: InterfererConfig::default(),
            csi: CsiConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config is always serializable")
    }

    pub fn carrier_hz(&self) -> f64 {
        self.carrier_ghz * 1e9
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.bandwidth_mhz * 1e6
    }

    pub fn num_elements(&self) -> usize {
        self.array.mx * self.array.my
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::half_wavelength(self.array.mx, self.array.my, self.carrier_hz())
    }

    pub fn noise_power_w(&self) -> f64 {
        noise_power(self.noise_temp_k, self.bandwidth_hz())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_elements();
        if m == 0 {
            return Err(Error::Config("array must have at least one element".into()));
        }
        if self.interferers.count >= m {
            return Err(Error::Config(format!(
                "number of interferers ({}) must be below the number of elements ({m})",
                self.interferers.count
            )));
        }
        let positive = [
            ("carrier_ghz", self.carrier_ghz),
            ("bandwidth_mhz", self.bandwidth_mhz),
            ("noise_temp_k", self.noise_temp_k),
            ("desired.range_km", self.desired.range_km),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.ut_efficiency) {
            return Err(Error::Config("ut_efficiency must lie in [0, 1]".into()));
        }
        let i = &self.interferers;
        if i.count > 0 {
            if !(i.range_km_min > 0.0 && i.range_km_min <= i.range_km_max && i.range_km_max.is_finite()) {
                return Err(Error::Config(format!(
                    "empty or invalid interferer range [{}, {}] km",
                    i.range_km_min, i.range_km_max
                )));
            }
            if !(0.0..=90.0).contains(&i.doa_abs_max_deg) {
                return Err(Error::Config(format!(
                    "empty or invalid interferer DOA range ±{} deg",
                    i.doa_abs_max_deg
                )));
            }
        }
        Doa::new(self.desired.doa_az, self.desired.doa_el)?;
        if !(self.csi.error_variance >= 0.0 && self.csi.error_variance.is_finite()) {
            return Err(Error::Config("csi.error_variance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Draws one scenario. A pure function of `(config, seed)`.
///
/// The receive gain folded into every channel amplitude is the gain of the
/// initial beam `v_d` toward that emitter.
pub fn sample_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let geometry = config.geometry()?;
    let carrier_hz = config.carrier_hz();
    let bandwidth_hz = config.bandwidth_hz();
    let eta = config.ut_efficiency;

    let desired_doa = Doa::new(config.desired.doa_az, config.desired.doa_el)?;
    let v_d = steering_vector(&geometry, desired_doa);
    let emitter = |eirp_dbw: f64, range_m: f64, doa: Doa| -> Result<Emitter> {
        let link = SatelliteLink { eirp_dbw, slant_range_m: range_m, carrier_hz, bandwidth_hz, doa };
        let gain = beam_gain(&geometry, &v_d, doa, eta);
        let chi = link_budget_gain(&link, gain)?;
        Ok(Emitter { link, channel: ChannelVector::new(&geometry, doa, chi) })
    };

    let desired = emitter(config.desired.eirp_dbw, config.desired.range_km * 1e3, desired_doa)?;

    let mut rng = seed::stream_rng(seed, stream::SCENARIO, 0);
    let spec = &config.interferers;
    let mut interferers = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let d = spec.doa_abs_max_deg;
        let az = rng.random_range(-d..=d);
        let el = rng.random_range(-d..=d);
        let range_km = rng.random_range(spec.range_km_min..=spec.range_km_max);
        interferers.push(emitter(spec.eirp_dbw, range_km * 1e3, Doa::new(az, el)?)?);
    }

    Ok(Scenario {
        geometry,
        desired,
        interferers,
        noise_power_w: config.noise_power_w(),
        ut_efficiency: eta,
        seed,
    })
}

/// Imperfect channel estimate `ĥ = χ · (v + e)` with `e ~ CN(0, σ_e² I)`.
///
/// The error is added to the unit steering direction and then scaled by the
/// channel amplitude, so `σ_e²` is relative to the per-element direction and
/// independent of the absolute link budget.
pub fn perturb_csi(h: &ChannelVector, error_variance: f64, seed: u64) -> DVector<Complex64> {
    if error_variance == 0.0 {
        return h.coefficients().clone();
    }
    let mut rng = seed::stream_rng(seed, stream::CSI_ERROR, 0);
    let sd = (error_variance / 2.0).sqrt();
    let chi = h.gain_scalar();
    h.steering().map(|v| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        (v + Complex64::new(sd * re, sd * im)) * chi
    })
}
