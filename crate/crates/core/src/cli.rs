//! Command-line experiment runner.
//!
//! Every file written embeds the scenario and training configuration and the
//! master seed, either as `#` comment lines (CSV) or as JSON fields.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::autodiff::GradCheckReport;
use crate::beamform::{beam_gain, beam_pattern_grid, Method};
use crate::error::{Error, Result};
use crate::model::{layer_gradcheck, MambaBf};
use crate::scenario::{sample_scenario, to_db, Doa, ScenarioConfig};
use crate::training::{
    baseline_weights, build_dataset, build_sample, end_to_end_gradcheck, evaluate, sample_seed, train,
    write_history_csv, CsiMode, Split, TrainConfig,
};

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "ngso-bf", version, about = "Satellite user-terminal beamforming experiments")]
pub struct Cli {
    /// Scenario configuration (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Training configuration (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    pub train_config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Master seed; overrides both configuration files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub csi: Option<CsiArg>,
    /// Snapshots per sample.
    #[arg(long, global = true)]
    pub snapshots: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "all")]
    pub method: MethodArg,
    /// Beam-pattern grid step in degrees.
    #[arg(long, global = true, default_value_t = 1.0)]
    pub grid_step: f64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write the dataset manifest: per-sample seeds and geometry.
    GenData,
    /// Train the network; writes a checkpoint and the per-epoch history.
    Train,
    /// SINR_in vs SINR_out scatter for the requested methods.
    Eval,
    /// Azimuth × elevation gain grid per method for one test sample.
    BeamPattern {
        /// Test-set index of the sample.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Compare reverse-mode gradients with central differences.
    Gradcheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CsiArg {
    Perfect,
    Imperfect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Mrc,
    Zf,
    Smi,
    Mvdr,
    Mamba,
    All,
}

/// Configuration after applying command-line overrides.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub csi_modes: Vec<CsiMode>,
}

pub fn resolve(cli: &Cli) -> Result<Resolved> {
    let mut scenario = match &cli.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    let mut train = match &cli.train_config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        scenario.seed = s;
        train.seed = s;
    }
    if let Some(l) = cli.snapshots {
        train.snapshots = l;
    }
    let imperfect = CsiMode::Imperfect { error_variance: scenario.csi.error_variance };
    let csi_modes = match cli.csi {
        Some(CsiArg::Perfect) => vec![CsiMode::Perfect],
        Some(CsiArg::Imperfect) => vec![imperfect],
        None if cli.command == Command::Eval => vec![CsiMode::Perfect, imperfect],
        None => vec![train.csi],
    };
    train.csi = csi_modes[0];
    scenario.validate()?;
    train.validate()?;
    Ok(Resolved { scenario, train, csi_modes })
}

impl Resolved {
    /// Provenance lines shared by every output.
    fn header(&self, command: &str) -> Vec<String> {
        vec![
            format!("ngso-bf {} {command}", env!("CARGO_PKG_VERSION")),
            format!("seed = {}", self.train.seed),
            "[scenario]".to_string(),
            self.scenario.to_toml_string(),
            "[train]".to_string(),
            self.train.to_toml_string(),
        ]
    }

    fn metadata(&self, command: &str) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("command".to_string(), command.to_string()),
            ("tool_version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("seed".to_string(), self.train.seed.to_string()),
            ("scenario_config".to_string(), self.scenario.to_toml_string()),
            ("train_config".to_string(), self.train.to_toml_string()),
        ])
    }
}

fn methods(arg: MethodArg, with_network: bool) -> Vec<Method> {
    match arg {
        MethodArg::Mrc => vec![Method::Mrc],
        MethodArg::Zf => vec![Method::Zf],
        MethodArg::Smi => vec![Method::Smi],
        MethodArg::Mvdr => vec![Method::Mvdr],
        MethodArg::Mamba => vec![Method::MambaBf],
        MethodArg::All => {
            let mut v = Method::BASELINES.to_vec();
            if with_network {
                v.push(Method::MambaBf);
            }
            v
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn load_model(cli: &Cli, m: usize) -> Result<Option<MambaBf>> {
    let Some(path) = &cli.checkpoint else { return Ok(None) };
    let model = MambaBf::load(path)?;
    if model.hyper.m != m {
        return Err(Error::Config(format!("checkpoint expects M = {}, scenario has M = {m}", model.hyper.m)));
    }
    Ok(Some(model))
}

/// Runs one command, printing a short summary to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::GenData => gen_data(cli, &cfg),
        Command::Train => run_train(cli, &cfg),
        Command::Eval => run_eval(cli, &cfg),
        Command::BeamPattern { sample } => run_beam_pattern(cli, &cfg, sample),
        Command::Gradcheck => run_gradcheck(cli, &cfg),
    }
}

#[derive(Serialize)]
struct ManifestEntry {
    split: &'static str,
    index: usize,
    seed: u64,
    desired_doa: Doa,
    interferer_doas: Vec<Doa>,
    interferer_range_km: Vec<f64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    metadata: BTreeMap<String, String>,
    csi: CsiMode,
    snapshots: usize,
    samples: &'a [ManifestEntry],
}

fn gen_data(cli: &Cli, cfg: &Resolved) -> Result<()> {
    let mut entries = Vec::with_capacity(cfg.train.n_train + cfg.train.n_test);
    for (split, n, name) in [(Split::Train, cfg.train.n_train, "train"), (Split::Test, cfg.train.n_test, "test")] {
        for index in 0..n {
            let seed = sample_seed(cfg.train.seed, split, index);
            let s = sample_scenario(&cfg.scenario, seed)?;
            entries.push(ManifestEntry {
                split: name,
                index,
                seed,
                desired_doa: s.desired.link.doa,
                interferer_doas: s.interferers.iter().map(|e| e.link.doa).collect(),
                interferer_range_km: s.interferers.iter().map(|e| e.link.slant_range_m / 1e3).collect(),
            });
        }
    }
    let manifest = Manifest {
        metadata: cfg.metadata("gen-data"),
        csi: cfg.train.csi,
        snapshots: cfg.train.snapshots,
        samples: &entries,
    };
    let path = cli.out.join("manifest.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    w.flush()?;
    println!("wrote {} samples to {}", entries.len(), path.display());
    Ok(())
}

fn run_train(cli: &Cli, cfg: &Resolved) -> Result<()> {
    let t = &cfg.train;
    let m = cfg.scenario.num_elements();
    let train_set = build_dataset(&cfg.scenario, t.n_train, t.seed, Split::Train, t.snapshots, t.csi)?;
    let test_set = build_dataset(&cfg.scenario, t.n_test, t.seed, Split::Test, t.snapshots, t.csi)?;
    let mut model = MambaBf::init(t.hyperparams(m), t.seed)?;
    log::info!("{} trainable parameters", model.param_count());
    let meta = cfg.metadata("train");
    let result = train(&mut model, &train_set, &test_set, t, |_| {});
    let history = match result {
        Ok(h) => h,
        Err(e) => {
            let path = cli.out.join("checkpoint_last_good.json");
            fs::write(&path, model.to_json_with(Some(&meta))?)?;
            eprintln!("last good parameters saved to {}", path.display());
            return Err(e);
        }
    };
    let ck = cli.out.join("checkpoint.json");
    fs::write(&ck, model.to_json_with(Some(&meta))?)?;
    let mut w = create(&cli.out.join("history.csv"))?;
    write_history_csv(&mut w, &history, &cfg.header("train"))?;
    w.flush()?;
    if let Some(last) = history.last() {
        println!("epoch {}: train loss {:.6e}, test ASINR {:.4} dB", last.epoch, last.mean_train_loss, last.mean_test_asinr_db);
    }
    println!("{} parameters, checkpoint {}", model.param_count(), ck.display());
    Ok(())
}

fn run_eval(cli: &Cli, cfg: &Resolved) -> Result<()> {
    let t = &cfg.train;
    let model = load_model(cli, cfg.scenario.num_elements())?;
    let methods = methods(cli.method, model.is_some());
    for &csi in &cfg.csi_modes {
        let test_set = build_dataset(&cfg.scenario, t.n_test, t.seed, Split::Test, t.snapshots, csi)?;
        let report = evaluate(model.as_ref(), &test_set, &methods, csi, t.eval_batch)?;
        let path = cli.out.join(format!("eval_{}.csv", csi.tag()));
        let mut header = cfg.header("eval");
        header.push(format!("csi = {}", csi.tag()));
        let mut w = create(&path)?;
        report.write_csv(&mut w, &header)?;
        w.flush()?;
        print!("{}: SINR_in {:.3} dB", csi.tag(), report.mean_in_db());
        for &m in &report.methods {
            print!(", {m} {:.3} dB", report.mean_out_db(m).unwrap_or(f64::NAN));
        }
        println!();
    }
    Ok(())
}

#[derive(Serialize)]
struct Markers {
    metadata: BTreeMap<String, String>,
    sample: usize,
    sample_seed: u64,
    csi: CsiMode,
    desired_doa: Doa,
    interferer_doas: Vec<Doa>,
    /// Gain at each interferer DOA minus the grid peak, per method.
    null_depth_db: BTreeMap<Method, Vec<f64>>,
}

fn run_beam_pattern(cli: &Cli, cfg: &Resolved, index: usize) -> Result<()> {
    let t = &cfg.train;
    let geometry = cfg.scenario.geometry()?;
    let model = load_model(cli, geometry.num_elements())?;
    let methods = methods(cli.method, model.is_some());
    let seed = sample_seed(t.seed, Split::Test, index);
    let sample = build_sample(&cfg.scenario, index, seed, t.snapshots, t.csi)?;
    let mut depth = BTreeMap::new();
    for m in methods {
        let w = match m {
            Method::MambaBf => model
                .as_ref()
                .ok_or_else(|| Error::Config("--method mamba requires --checkpoint".into()))?
                .infer(&sample.snapshots)?,
            _ => baseline_weights(&sample, m)?,
        };
        let grid = beam_pattern_grid(&geometry, &w.weights, (-90.0, 90.0), (-90.0, 90.0), cli.grid_step, cfg.scenario.ut_efficiency)?;
        let peak = grid.peak_db();
        let eff = cfg.scenario.ut_efficiency;
        depth.insert(m, sample.interferer_doas.iter().map(|&d| to_db(beam_gain(&geometry, &w.weights, d, eff)) - peak).collect());
        let mut header = cfg.header("beam-pattern");
        header.push(format!("method = {m}, sample = {index}, csi = {}", t.csi.tag()));
        let mut w = create(&cli.out.join(format!("pattern_{m}.csv")))?;
        grid.write_csv(&mut w, &header)?;
        w.flush()?;
        println!("{m}: peak {peak:.3} dB");
    }
    let markers = Markers {
        metadata: cfg.metadata("beam-pattern"),
        sample: index,
        sample_seed: seed,
        csi: t.csi,
        desired_doa: sample.desired_doa,
        interferer_doas: sample.interferer_doas.clone(),
        null_depth_db: depth,
    };
    let mut w = create(&cli.out.join("pattern_markers.json"))?;
    serde_json::to_writer_pretty(&mut w, &markers)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn run_gradcheck(cli: &Cli, cfg: &Resolved) -> Result<()> {
    let seed = cfg.train.seed;
    let checks: [(&str, GradCheckReport); 2] =
        [("mamba layer", layer_gradcheck(seed)?), ("end-to-end loss", end_to_end_gradcheck(seed)?)];
    let mut text = String::new();
    for line in cfg.header("gradcheck") {
        for l in line.lines() {
            text.push_str(&format!("# {l}\n"));
        }
    }
    text.push_str("check,coordinates,max_rel_error\n");
    let mut worst: f64 = 0.0;
    for (name, r) in &checks {
        println!("{name}: max relative error {:.3e} over {} coordinates", r.max_rel_error, r.coordinates);
        text.push_str(&format!("{name},{},{:.6e}\n", r.coordinates, r.max_rel_error));
        worst = worst.max(r.max_rel_error);
    }
    fs::write(cli.out.join("gradcheck.csv"), text)?;
    println!("max relative error {worst:.3e}");
    if worst > GRADCHECK_TOLERANCE {
        return Err(Error::NonFinite(format!(
            "gradient check failed: {worst:.3e} exceeds {GRADCHECK_TOLERANCE:.0e}"
        )));
    }
    Ok(())
}

/// Applies `NGSO_BF_THREADS` to the global thread pool.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("NGSO_BF_THREADS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| Error::Config(format!("NGSO_BF_THREADS={v} is not a count")))?;
    if n == 0 {
        return Err(Error::Config("NGSO_BF_THREADS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}
