//! Config-driven orchestration of the full pipeline with persisted
//! intermediate artifacts and a provenance hash chain.
//!
//! Artifact layout under `output.dir`:
//!
//! ```text
//! basis/    meta.json modes.npy eigvals.npy [freqs.npy] weights.npy
//! coeffs/   train.npy train.index.json test.npy test.index.json
//!           [freq_train.npy freq_test.npy freq_meta.json]
//! model/    hyperparams.json netJ.json netJ.*.npy loss_history.csv
//! report/   errors.csv [snapshot dumps]
//! ```
//!
//! Every artifact records the FNV-1a hash of its upstream input; a stage
//! refuses inputs whose recorded hash no longer matches what it recomputes.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{self, DataLayout, LatLonGrid, RawHeader, SnapshotMatrix, WeightVector};
use crate::decomposition::{self, Basis, BasisKind, ReducedBasis, WelchParams, WindowKind};
use crate::emulator::{self, EmulatorEnsemble, LstmHyperParams};
use crate::error::{Error, Result};
use crate::latent::{self, CoeffKind, CoeffMatrix, FreqCoeffMatrix};
use crate::linalg::C64;
use crate::metrics::{self, ErrorCsvRow, ErrorReport};
use crate::npy;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum LayoutConfig {
    Npy,
    Raw(RawHeader),
    Csv,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum WeightsConfig {
    Uniform,
    Spherical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default = "default_layout")]
    pub layout: LayoutConfig,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_n_vars")]
    pub n_vars: usize,
    #[serde(default)]
    pub grid: Option<LatLonGrid>,
    #[serde(default = "default_weights")]
    pub weights: WeightsConfig,
}

fn default_layout() -> LayoutConfig {
    LayoutConfig::Npy
}
fn default_dt() -> f64 {
    1.0
}
fn default_n_vars() -> usize {
    1
}
fn default_weights() -> WeightsConfig {
    WeightsConfig::Uniform
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WelchConfig {
    #[serde(default = "default_n_fft")]
    pub n_fft: usize,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default = "default_window")]
    pub window: WindowKind,
    #[serde(default = "default_normalize")]
    pub normalize_window: bool,
}

fn default_n_fft() -> usize {
    64
}
fn default_overlap() -> f64 {
    0.5
}
fn default_window() -> WindowKind {
    WindowKind::Hamming
}
fn default_normalize() -> bool {
    true
}

impl Default for WelchConfig {
    fn default() -> Self {
        WelchConfig {
            n_fft: default_n_fft(),
            overlap: default_overlap(),
            window: default_window(),
            normalize_window: default_normalize(),
        }
    }
}

impl WelchConfig {
    pub fn params(&self) -> WelchParams {
        WelchParams {
            n_fft: self.n_fft,
            overlap_fraction: self.overlap,
            window: self.window,
            normalize_window: self.normalize_window,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum CoeffDomain {
    Time,
    Frequency,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub kind: BasisKind,
    #[serde(default = "default_l_r")]
    pub l_r: usize,
    #[serde(default)]
    pub flb: usize,
    /// Defaults to the last available frequency bin.
    #[serde(default)]
    pub fub: Option<usize>,
    #[serde(default = "default_domain")]
    pub coeff_domain: CoeffDomain,
}

fn default_l_r() -> usize {
    10
}
fn default_domain() -> CoeffDomain {
    CoeffDomain::Time
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmulatorConfig {
    #[serde(default = "default_n_c")]
    pub n_c: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_n_tau_p")]
    pub n_tau_p: usize,
    #[serde(default = "default_n_tau_f")]
    pub n_tau_f: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_c() -> usize {
    25
}
fn default_epochs() -> usize {
    130
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_dropout() -> f64 {
    0.15
}
fn default_n_tau_p() -> usize {
    60
}
fn default_n_tau_f() -> usize {
    1
}

impl EmulatorConfig {
    pub fn hyperparams(&self) -> LstmHyperParams {
        LstmHyperParams {
            hidden: self.n_c,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            dropout: self.dropout,
            seed: self.seed,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// Sweep axes; the cross product of all lists is executed and appended to
/// one errors.csv. Empty lists fall back to the base configuration value.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub modes: Vec<usize>,
    /// (flb, fub) pairs.
    #[serde(default)]
    pub bands: Vec<(usize, usize)>,
    #[serde(default)]
    pub horizons: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    #[serde(default)]
    pub welch: WelchConfig,
    pub basis: BasisConfig,
    #[serde(default = "default_emulator")]
    pub emulator: EmulatorConfig,
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_emulator() -> EmulatorConfig {
    EmulatorConfig {
        n_c: default_n_c(),
        epochs: default_epochs(),
        batch: default_batch(),
        lr: default_lr(),
        dropout: default_dropout(),
        n_tau_p: default_n_tau_p(),
        n_tau_f: default_n_tau_f(),
        seed: 0,
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ConfigValidation(format!(
                "config file {} does not exist",
                path.display()
            )));
        }
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::ConfigValidation(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fail fast on anything checkable without touching the data payload.
    pub fn validate(&self) -> Result<()> {
        if !self.data.path.exists() {
            return Err(Error::ConfigValidation(format!(
                "data path {} does not exist",
                self.data.path.display()
            )));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Error::ConfigValidation(format!(
                "train_fraction must be in (0, 1), got {}",
                self.split.train_fraction
            )));
        }
        self.welch.params().validate()?;
        if self.basis.l_r == 0 {
            return Err(Error::ConfigValidation("l_r must be >= 1".into()));
        }
        if self.basis.kind == BasisKind::Spod {
            let n_freq = self.welch.params().n_freq();
            let fub = self.basis.fub.unwrap_or(n_freq - 1);
            if self.basis.flb > fub || fub >= n_freq {
                return Err(Error::ConfigValidation(format!(
                    "frequency band [{}, {fub}] invalid for {n_freq} bins",
                    self.basis.flb
                )));
            }
        }
        let e = &self.emulator;
        if e.n_tau_p == 0 || e.n_tau_f == 0 {
            return Err(Error::ConfigValidation(
                "n_tau_p and n_tau_f must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&e.dropout) {
            return Err(Error::ConfigValidation(format!(
                "dropout must be in [0, 1), got {}",
                e.dropout
            )));
        }
        if e.batch == 0 {
            return Err(Error::ConfigValidation("batch must be >= 1".into()));
        }
        if self.data.weights == WeightsConfig::Spherical && self.data.grid.is_none() {
            return Err(Error::ConfigValidation(
                "spherical weights need a lat-lon grid".into(),
            ));
        }
        Ok(())
    }

    fn basis_dir(&self) -> PathBuf {
        self.output.dir.join("basis")
    }
    fn coeffs_dir(&self) -> PathBuf {
        self.output.dir.join("coeffs")
    }
    fn model_dir(&self) -> PathBuf {
        self.output.dir.join("model")
    }
    fn report_dir(&self) -> PathBuf {
        self.output.dir.join("report")
    }
}

// ---------------------------------------------------------------------------
// Provenance hashing
// ---------------------------------------------------------------------------

pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf29ce484222325)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub fn update_f64(&mut self, xs: impl IntoIterator<Item = f64>) {
        for x in xs {
            self.update(&x.to_le_bytes());
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

pub fn hash_snapshots(q: &SnapshotMatrix) -> u64 {
    let mut h = Fnv1a::new();
    h.update(&(q.n_rows() as u64).to_le_bytes());
    h.update(&(q.n_snapshots() as u64).to_le_bytes());
    h.update_f64(q.values.iter().cloned());
    h.finish()
}

pub fn hash_basis(basis: &Basis) -> u64 {
    let mut h = Fnv1a::new();
    match basis {
        Basis::Spod(b) => {
            h.update(b"spod");
            h.update_f64(b.eigvals.iter().cloned());
            for mk in &b.modes {
                h.update_f64(mk.iter().flat_map(|z| [z.re, z.im]));
            }
        }
        Basis::Pod(b) => {
            h.update(b"pod");
            h.update_f64(b.eigvals.iter().cloned());
            h.update_f64(b.modes.iter().cloned());
        }
    }
    h.finish()
}

pub fn hash_coeffs(a: &CoeffMatrix) -> u64 {
    let mut h = Fnv1a::new();
    h.update(&(a.d() as u64).to_le_bytes());
    h.update_f64(a.values.iter().flat_map(|z| [z.re, z.im]));
    h.finish()
}

// ---------------------------------------------------------------------------
// Shared stage plumbing
// ---------------------------------------------------------------------------

/// Loaded, split, and centered data plus its weights and provenance hash.
pub struct PreparedData {
    pub train: SnapshotMatrix,
    pub test: SnapshotMatrix,
    pub weights: WeightVector,
    pub data_hash: u64,
}

pub fn prepare_data(cfg: &PipelineConfig) -> Result<PreparedData> {
    let layout = match &cfg.data.layout {
        LayoutConfig::Npy => DataLayout::Npy,
        LayoutConfig::Raw(h) => DataLayout::Raw(h.clone()),
        LayoutConfig::Csv => DataLayout::Csv,
    };
    let q = data::load_snapshot_matrix(
        &cfg.data.path,
        &layout,
        cfg.data.n_vars,
        cfg.data.dt,
        cfg.data.grid.clone(),
    )?;
    let data_hash = hash_snapshots(&q);
    let weights = match cfg.data.weights {
        WeightsConfig::Uniform => data::build_uniform_weights(q.n_rows())?,
        WeightsConfig::Spherical => {
            let grid = cfg.data.grid.as_ref().ok_or_else(|| {
                Error::ConfigValidation("spherical weights need a lat-lon grid".into())
            })?;
            data::build_spherical_weights(&grid.lats, &grid.lons, cfg.data.n_vars)?
        }
    };
    if weights.len() != q.n_rows() {
        return Err(Error::DimensionMismatch(format!(
            "weights cover {} rows, data has {}",
            weights.len(),
            q.n_rows()
        )));
    }
    let (train, test) = data::split_train_test(&q, cfg.split.train_fraction)?;
    Ok(PreparedData {
        train,
        test,
        weights,
        data_hash,
    })
}

fn band_of(cfg: &PipelineConfig) -> (usize, usize) {
    let n_freq = cfg.welch.params().n_freq();
    (cfg.basis.flb, cfg.basis.fub.unwrap_or(n_freq - 1))
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DecomposeSummary {
    pub kind: BasisKind,
    pub n_blocks: usize,
    pub n_freq: usize,
    pub n_modes: usize,
    pub basis_dir: PathBuf,
}

/// Build and persist the basis from the train split.
pub fn cmd_decompose(cfg: &PipelineConfig) -> Result<DecomposeSummary> {
    cfg.validate()?;
    let prep = prepare_data(cfg)?;
    let p = cfg.welch.params();
    let summary = match cfg.basis.kind {
        BasisKind::Spod => {
            let n_blocks = p.block_count(prep.train.n_snapshots())?;
            let basis = decomposition::compute_spod(&prep.train, &p, &prep.weights)?;
            let s = DecomposeSummary {
                kind: BasisKind::Spod,
                n_blocks,
                n_freq: basis.n_freq(),
                n_modes: basis.n_modes(),
                basis_dir: cfg.basis_dir(),
            };
            decomposition::save_basis(&cfg.basis_dir(), &Basis::Spod(basis), prep.data_hash)?;
            s
        }
        BasisKind::Pod => {
            let l_max = cfg
                .basis
                .l_r
                .max(14)
                .min(prep.train.n_snapshots())
                .min(prep.train.n_rows());
            let basis = decomposition::compute_pod(&prep.train, &prep.weights, l_max)?;
            let s = DecomposeSummary {
                kind: BasisKind::Pod,
                n_blocks: 0,
                n_freq: 0,
                n_modes: basis.n_modes(),
                basis_dir: cfg.basis_dir(),
            };
            decomposition::save_basis(&cfg.basis_dir(), &Basis::Pod(basis), prep.data_hash)?;
            s
        }
    };
    Ok(summary)
}

fn load_basis_checked(cfg: &PipelineConfig, data_hash: u64) -> Result<Basis> {
    let (basis, recorded) = decomposition::load_basis(&cfg.basis_dir())?;
    if recorded != data_hash {
        return Err(Error::ProvenanceMismatch {
            stage: "project".into(),
            expected: recorded,
            found: data_hash,
        });
    }
    Ok(basis)
}

fn reduced_basis(cfg: &PipelineConfig, basis: &Basis) -> Result<ReducedBasis> {
    match basis {
        Basis::Spod(b) => {
            let (flb, fub) = band_of(cfg);
            decomposition::select_band_spod(b, cfg.basis.l_r, flb, fub)
        }
        Basis::Pod(b) => decomposition::select_band_pod(b, cfg.basis.l_r),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectSummary {
    pub d: usize,
    pub effective_rank: usize,
    pub compression: f64,
    /// Shape [n_freq, n_modes, n_blocks] when projecting in the frequency
    /// domain.
    pub freq_shape: Option<(usize, usize, usize)>,
}

/// Project train and test splits onto the persisted basis.
pub fn cmd_project(cfg: &PipelineConfig) -> Result<ProjectSummary> {
    cfg.validate()?;
    let prep = prepare_data(cfg)?;
    let basis = load_basis_checked(cfg, prep.data_hash)?;
    let basis_hash = hash_basis(&basis);
    let dir = cfg.coeffs_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io("creating coeffs dir", e))?;

    let rb = reduced_basis(cfg, &basis)?;
    let (a_train, rank) = latent::oblique_project(&rb, &prep.weights, &prep.train)?;
    let (a_test, _) = latent::oblique_project(&rb, &prep.weights, &prep.test)?;
    latent::save_coeffs(&dir, "train", &a_train, basis_hash)?;
    latent::save_coeffs(&dir, "test", &a_test, basis_hash)?;

    let mut freq_shape = None;
    if cfg.basis.coeff_domain == CoeffDomain::Frequency {
        let b = match &basis {
            Basis::Spod(b) => b,
            Basis::Pod(_) => {
                return Err(Error::ConfigValidation(
                    "frequency-domain coefficients need a spod basis".into(),
                ))
            }
        };
        let p = cfg.welch.params();
        let ens_train = latent::build_frequency_ensembles(&prep.train, &p)?;
        let ens_test = latent::build_frequency_ensembles(&prep.test, &p)?;
        let fa_train = latent::freq_project(b, &ens_train, &prep.weights)?;
        let fa_test = latent::freq_project(b, &ens_test, &prep.weights)?;
        freq_shape = Some(fa_train.values.dim());
        save_freq_coeffs(&dir, "freq_train", &fa_train, basis_hash)?;
        save_freq_coeffs(&dir, "freq_test", &fa_test, basis_hash)?;
    }

    Ok(ProjectSummary {
        d: rb.d(),
        effective_rank: rank,
        compression: latent::compression_ratio(&rb, prep.train.n_rows()),
        freq_shape,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FreqCoeffMeta {
    welch: WelchParams,
    shape: (usize, usize, usize),
    provenance: String,
}

fn save_freq_coeffs(dir: &Path, name: &str, a: &FreqCoeffMatrix, provenance: u64) -> Result<()> {
    let (nf, nm, nb) = a.values.dim();
    let flat: Vec<C64> = a.values.iter().cloned().collect();
    npy::write_c128(&dir.join(format!("{name}.npy")), &flat, &[nf, nm, nb])?;
    let meta = FreqCoeffMeta {
        welch: a.welch,
        shape: (nf, nm, nb),
        provenance: format!("{provenance:016x}"),
    };
    let s = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::json("serializing freq coeff meta", e))?;
    fs::write(dir.join(format!("{name}.json")), s)
        .map_err(|e| Error::io(format!("writing {name}.json"), e))?;
    Ok(())
}

fn load_freq_coeffs(dir: &Path, name: &str) -> Result<(FreqCoeffMatrix, u64)> {
    let text = fs::read_to_string(dir.join(format!("{name}.json")))
        .map_err(|e| Error::io(format!("reading {name}.json"), e))?;
    let meta: FreqCoeffMeta = serde_json::from_str(&text)
        .map_err(|e| Error::json(format!("parsing {name}.json"), e))?;
    let (flat, shape) = npy::read_c128(&dir.join(format!("{name}.npy")))?;
    let dims = (meta.shape.0, meta.shape.1, meta.shape.2);
    if shape != vec![dims.0, dims.1, dims.2] {
        return Err(Error::ShapeMismatch(format!(
            "{name}.npy shape {shape:?} does not match meta {dims:?}"
        )));
    }
    let values =
        Array3::from_shape_vec(dims, flat).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let provenance = u64::from_str_radix(&meta.provenance, 16)
        .map_err(|_| Error::ConfigValidation("bad provenance in freq coeff meta".into()))?;
    Ok((
        FreqCoeffMatrix {
            values,
            welch: meta.welch,
        },
        provenance,
    ))
}

/// Frequency-domain coefficients flattened into a (rows = band modes,
/// columns = blocks) matrix for the emulator.
fn freq_coeffs_as_matrix(
    fa: &FreqCoeffMatrix,
    l_r: usize,
    flb: usize,
    fub: usize,
) -> CoeffMatrix {
    let (_nf, n_modes, n_blocks) = fa.values.dim();
    let l_r = l_r.min(n_modes);
    let mut index = Vec::new();
    for k in flb..=fub {
        for j in 0..l_r {
            index.push((j, k));
        }
    }
    let mut values = Array2::zeros((index.len(), n_blocks));
    for (row, &(j, k)) in index.iter().enumerate() {
        for l in 0..n_blocks {
            values[[row, l]] = fa.values[[k, j, l]];
        }
    }
    CoeffMatrix {
        values,
        index,
        kind: CoeffKind::SpodTime,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub n_networks: usize,
    pub features_per_network: Vec<usize>,
    pub final_train_loss: Vec<f64>,
}

/// Train the per-mode ensemble on the persisted train coefficients, using
/// the test coefficients for held-out loss tracking.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = cfg.coeffs_dir();
    let (train_c, test_c, upstream) = match cfg.basis.coeff_domain {
        CoeffDomain::Time => {
            let (a, prov) = latent::load_coeffs(&dir, "train")?;
            let (b, prov_b) = latent::load_coeffs(&dir, "test")?;
            if prov != prov_b {
                return Err(Error::ProvenanceMismatch {
                    stage: "train".into(),
                    expected: prov,
                    found: prov_b,
                });
            }
            (a, b, prov)
        }
        CoeffDomain::Frequency => {
            let (fa, prov) = load_freq_coeffs(&dir, "freq_train")?;
            let (fb, prov_b) = load_freq_coeffs(&dir, "freq_test")?;
            if prov != prov_b {
                return Err(Error::ProvenanceMismatch {
                    stage: "train".into(),
                    expected: prov,
                    found: prov_b,
                });
            }
            let (flb, fub) = band_of(cfg);
            (
                freq_coeffs_as_matrix(&fa, cfg.basis.l_r, flb, fub),
                freq_coeffs_as_matrix(&fb, cfg.basis.l_r, flb, fub),
                prov,
            )
        }
    };
    if cfg.emulator.epochs == 0 {
        eprintln!("warning: epochs = 0, persisting an untrained ensemble");
    }
    let _ = upstream;
    let hp = cfg.emulator.hyperparams();
    let ensemble = emulator::train_ensemble(
        &train_c,
        &hp,
        cfg.emulator.n_tau_p,
        cfg.emulator.n_tau_f,
        Some(&test_c),
    )?;
    emulator::save_ensemble(&cfg.model_dir(), &ensemble, hash_coeffs(&train_c))?;
    write_loss_history(&cfg.model_dir().join("loss_history.csv"), &ensemble)?;

    Ok(TrainSummary {
        n_networks: ensemble.nets.len(),
        features_per_network: ensemble
            .nets
            .iter()
            .map(|n| n.model.n_features)
            .collect(),
        final_train_loss: ensemble
            .nets
            .iter()
            .map(|n| *n.loss.train.last().unwrap_or(&f64::NAN))
            .collect(),
    })
}

fn write_loss_history(path: &Path, e: &EmulatorEnsemble) -> Result<()> {
    let epochs = e.nets.iter().map(|n| n.loss.train.len()).max().unwrap_or(0);
    let mut out = String::from("epoch");
    for j in 0..e.nets.len() {
        out.push_str(&format!(",net{j}_train,net{j}_holdout"));
    }
    out.push('\n');
    for ep in 0..epochs {
        out.push_str(&ep.to_string());
        for net in &e.nets {
            let tr = net.loss.train.get(ep).copied().unwrap_or(f64::NAN);
            let hd = net.loss.holdout.get(ep).copied().unwrap_or(f64::NAN);
            out.push_str(&format!(",{tr:.8e},{hd:.8e}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastSummary {
    pub report: ErrorReport,
    pub window: (usize, usize),
    pub imag_residual: f64,
}

/// Forecast the test coefficients, reconstruct fields, and write errors.csv.
pub fn cmd_forecast(cfg: &PipelineConfig, dump_snapshot: Option<usize>) -> Result<ForecastSummary> {
    cfg.validate()?;
    let prep = prepare_data(cfg)?;
    let basis = load_basis_checked(cfg, prep.data_hash)?;
    let report = match cfg.basis.coeff_domain {
        CoeffDomain::Time => forecast_time_domain(cfg, &prep, &basis, dump_snapshot)?,
        CoeffDomain::Frequency => forecast_frequency_domain(cfg, &prep, &basis)?,
    };
    Ok(report)
}

fn forecast_time_domain(
    cfg: &PipelineConfig,
    prep: &PreparedData,
    basis: &Basis,
    dump_snapshot: Option<usize>,
) -> Result<ForecastSummary> {
    let dir = cfg.coeffs_dir();
    let basis_hash = hash_basis(basis);
    let (a_test, prov) = latent::load_coeffs(&dir, "test")?;
    if prov != basis_hash {
        return Err(Error::ProvenanceMismatch {
            stage: "forecast".into(),
            expected: prov,
            found: basis_hash,
        });
    }
    let (a_train, _) = latent::load_coeffs(&dir, "train")?;
    let (ensemble, model_prov) = emulator::load_ensemble(&cfg.model_dir())?;
    let train_hash = hash_coeffs(&a_train);
    if model_prov != train_hash {
        return Err(Error::ProvenanceMismatch {
            stage: "forecast".into(),
            expected: model_prov,
            found: train_hash,
        });
    }

    let rb = reduced_basis(cfg, basis)?;
    let fc = emulator::predict_over_test(&ensemble, &a_test)?;
    let start = fc.start;
    let nt_test = prep.test.n_snapshots();
    if start >= nt_test {
        return Err(Error::SpanTooShort {
            span: nt_test,
            need: start + 1,
        });
    }

    // Align truth, projection, and prediction over [start, nt_test).
    let window = |a: &CoeffMatrix| CoeffMatrix {
        values: a.values.slice(ndarray::s![.., start..]).to_owned(),
        index: a.index.clone(),
        kind: a.kind,
    };
    let mean = prep.train.mean.as_ref();
    let (q_proj, _) = latent::reconstruct_time_domain(&rb, &window(&a_test), mean)?;
    let (q_pred, imag_resid) = latent::reconstruct_time_domain(&rb, &window(&fc.coeffs), mean)?;
    let truth = SnapshotMatrix {
        values: prep
            .test
            .values
            .slice(ndarray::s![.., start..])
            .to_owned()
            + &mean_matrix(mean, nt_test - start),
        n_space: prep.test.n_space,
        n_vars: prep.test.n_vars,
        dt: prep.test.dt,
        grid: None,
        mean: None,
    };
    let report = metrics::error_report(&truth, &q_proj, &q_pred)?;

    let report_dir = cfg.report_dir();
    fs::create_dir_all(&report_dir).map_err(|e| Error::io("creating report dir", e))?;
    let (flb, fub) = band_of(cfg);
    let n_freqs = match cfg.basis.kind {
        BasisKind::Spod => fub - flb + 1,
        BasisKind::Pod => 0,
    };
    let row = ErrorCsvRow {
        label: format!("{:?}", cfg.basis.kind).to_lowercase(),
        modes: cfg.basis.l_r,
        frequencies: n_freqs,
        n_tau_f: cfg.emulator.n_tau_f,
        seed: cfg.emulator.seed,
        report: report.clone(),
    };
    append_errors_csv(&report_dir.join("errors.csv"), &[row])?;

    if let Some(t_global) = dump_snapshot {
        dump_fields(cfg, prep, &truth, &q_proj, &q_pred, start, t_global)?;
    }

    Ok(ForecastSummary {
        report,
        window: (start, nt_test),
        imag_residual: imag_resid,
    })
}

fn mean_matrix(mean: Option<&ndarray::Array1<f64>>, nt: usize) -> Array2<f64> {
    match mean {
        Some(mu) => {
            let m = mu.len();
            Array2::from_shape_fn((m, nt), |(i, _)| mu[i])
        }
        None => Array2::zeros((0, 0)),
    }
}

fn forecast_frequency_domain(
    cfg: &PipelineConfig,
    prep: &PreparedData,
    basis: &Basis,
) -> Result<ForecastSummary> {
    let b = match basis {
        Basis::Spod(b) => b,
        Basis::Pod(_) => {
            return Err(Error::ConfigValidation(
                "frequency-domain forecasting needs a spod basis".into(),
            ))
        }
    };
    let dir = cfg.coeffs_dir();
    let basis_hash = hash_basis(basis);
    let (fa_test, prov) = load_freq_coeffs(&dir, "freq_test")?;
    if prov != basis_hash {
        return Err(Error::ProvenanceMismatch {
            stage: "forecast".into(),
            expected: prov,
            found: basis_hash,
        });
    }
    let (fa_train, _) = load_freq_coeffs(&dir, "freq_train")?;
    let (flb, fub) = band_of(cfg);
    let test_c = freq_coeffs_as_matrix(&fa_test, cfg.basis.l_r, flb, fub);
    let train_c = freq_coeffs_as_matrix(&fa_train, cfg.basis.l_r, flb, fub);
    let (ensemble, model_prov) = emulator::load_ensemble(&cfg.model_dir())?;
    let train_hash = hash_coeffs(&train_c);
    if model_prov != train_hash {
        return Err(Error::ProvenanceMismatch {
            stage: "forecast".into(),
            expected: model_prov,
            found: train_hash,
        });
    }

    let fc = emulator::predict_over_test(&ensemble, &test_c)?;
    let start = fc.start;
    let n_blocks = test_c.n_snapshots();
    if start >= n_blocks {
        return Err(Error::SpanTooShort {
            span: n_blocks,
            need: start + 1,
        });
    }

    // Truncate the true coefficients to the same modes/band, then rebuild
    // per-block fields for truth comparison.
    let keep: BTreeSet<usize> = (flb..=fub).collect();
    let truncated = truncate_freq(&fa_test, cfg.basis.l_r, &keep);
    let predicted = overwrite_freq(&truncated, &fc.coeffs, start);

    let p = cfg.welch.params();
    let true_blocks = decomposition::partition_blocks(&prep.test, &p)?;
    let m = prep.test.n_rows();
    let mean = prep.train.mean.as_ref();
    let n_eval = n_blocks - start;
    let width = p.n_fft;
    let mut truth_w = Array2::zeros((m, n_eval * width));
    let mut proj_w = Array2::zeros((m, n_eval * width));
    let mut pred_w = Array2::zeros((m, n_eval * width));
    for (slot, l) in (start..n_blocks).enumerate() {
        let rec_proj = latent::reconstruct_frequency_domain(b, &truncated, &keep, l, true)?;
        let rec_pred = latent::reconstruct_frequency_domain(b, &predicted, &keep, l, true)?;
        for i in 0..m {
            for t in 0..width {
                let col = slot * width + t;
                let mu = mean.map_or(0.0, |v| v[i]);
                truth_w[[i, col]] = true_blocks[l][[i, t]] + mu;
                proj_w[[i, col]] = rec_proj[[i, t]] + mu;
                pred_w[[i, col]] = rec_pred[[i, t]] + mu;
            }
        }
    }
    let wrap = |values: Array2<f64>| SnapshotMatrix {
        values,
        n_space: m,
        n_vars: prep.test.n_vars,
        dt: prep.test.dt,
        grid: None,
        mean: None,
    };
    let report = metrics::error_report(&wrap(truth_w), &wrap(proj_w), &wrap(pred_w))?;

    let report_dir = cfg.report_dir();
    fs::create_dir_all(&report_dir).map_err(|e| Error::io("creating report dir", e))?;
    let row = ErrorCsvRow {
        label: "spod-frequency".into(),
        modes: cfg.basis.l_r,
        frequencies: fub - flb + 1,
        n_tau_f: cfg.emulator.n_tau_f,
        seed: cfg.emulator.seed,
        report: report.clone(),
    };
    append_errors_csv(&report_dir.join("errors.csv"), &[row])?;

    Ok(ForecastSummary {
        report,
        window: (start, n_blocks),
        imag_residual: 0.0,
    })
}

fn truncate_freq(fa: &FreqCoeffMatrix, l_r: usize, keep: &BTreeSet<usize>) -> FreqCoeffMatrix {
    let mut out = fa.truncate_modes(l_r);
    let (nf, _, _) = out.values.dim();
    for k in 0..nf {
        if !keep.contains(&k) {
            out.values
                .index_axis_mut(Axis(0), k)
                .mapv_inplace(|_| C64::new(0.0, 0.0));
        }
    }
    out
}

/// Write predicted rows back into the per-frequency layout for blocks at
/// and after `start`.
fn overwrite_freq(base: &FreqCoeffMatrix, predicted: &CoeffMatrix, start: usize) -> FreqCoeffMatrix {
    let mut out = base.clone();
    for (row, &(j, k)) in predicted.index.iter().enumerate() {
        for l in start..predicted.n_snapshots() {
            out.values[[k, j, l]] = predicted.values[[row, l]];
        }
    }
    out
}

fn append_errors_csv(path: &Path, rows: &[ErrorCsvRow]) -> Result<()> {
    if path.exists() {
        let existing = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let tmp = path.with_extension("csv.tmp");
        metrics::write_errors_csv(&tmp, rows)?;
        let new = fs::read_to_string(&tmp)
            .map_err(|e| Error::io(format!("reading {}", tmp.display()), e))?;
        fs::remove_file(&tmp).ok();
        let body: String = new.lines().skip(1).map(|l| format!("{l}\n")).collect();
        fs::write(path, existing + &body)
            .map_err(|e| Error::io(format!("appending {}", path.display()), e))?;
        Ok(())
    } else {
        metrics::write_errors_csv(path, rows)
    }
}

fn dump_fields(
    cfg: &PipelineConfig,
    prep: &PreparedData,
    truth: &SnapshotMatrix,
    q_proj: &SnapshotMatrix,
    q_pred: &SnapshotMatrix,
    start: usize,
    t_global: usize,
) -> Result<()> {
    let nt_train = prep.train.n_snapshots();
    let report_dir = cfg.report_dir();
    let m = prep.train.n_rows();
    let write_field = |name: &str, col: ndarray::ArrayView1<f64>| -> Result<()> {
        let flat: Vec<f64> = col.iter().cloned().collect();
        npy::write_f64(
            &report_dir.join(format!("snapshot_{t_global}_{name}.npy")),
            &flat,
            &[m],
        )?;
        let csv = field_to_csv(&flat, cfg.data.grid.as_ref());
        fs::write(
            report_dir.join(format!("snapshot_{t_global}_{name}.csv")),
            csv,
        )
        .map_err(|e| Error::io("writing field dump", e))?;
        Ok(())
    };

    if t_global < nt_train {
        // train-side snapshot: dump truth and its projection only
        let mean = prep.train.mean.as_ref();
        let rb = reduced_basis(cfg, &load_basis_checked(cfg, prep.data_hash)?)?;
        let one = SnapshotMatrix {
            values: prep
                .train
                .values
                .slice(ndarray::s![.., t_global..t_global + 1])
                .to_owned(),
            n_space: prep.train.n_space,
            n_vars: prep.train.n_vars,
            dt: prep.train.dt,
            grid: None,
            mean: None,
        };
        let (a_one, _) = latent::oblique_project(&rb, &prep.weights, &one)?;
        let (rec, _) = latent::reconstruct_time_domain(&rb, &a_one, mean)?;
        let mut truth_col = one.values.column(0).to_owned();
        if let Some(mu) = mean {
            truth_col += mu;
        }
        write_field("truth", truth_col.view())?;
        write_field("proj", rec.values.column(0))?;
    } else {
        let local = t_global - nt_train;
        if local < start || local - start >= truth.n_snapshots() {
            return Err(Error::IndexOutOfRange(format!(
                "snapshot {t_global} has no prediction (window starts at {})",
                nt_train + start
            )));
        }
        let col = local - start;
        write_field("truth", truth.values.column(col))?;
        write_field("proj", q_proj.values.column(col))?;
        write_field("pred", q_pred.values.column(col))?;
    }
    Ok(())
}

fn field_to_csv(flat: &[f64], grid: Option<&LatLonGrid>) -> String {
    match grid {
        Some(g) if g.lats.len() * g.lons.len() == flat.len() => {
            let n_lon = g.lons.len();
            let mut out = String::new();
            for (i, chunk) in flat.chunks(n_lon).enumerate() {
                let _ = i;
                let row: Vec<String> = chunk.iter().map(|v| format!("{v:.8e}")).collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
            out
        }
        _ => flat.iter().map(|v| format!("{v:.8e}\n")).collect(),
    }
}

/// Decompose, project, train, forecast, in sequence.
pub fn cmd_pipeline(
    cfg: &PipelineConfig,
    dump_snapshot: Option<usize>,
) -> Result<(DecomposeSummary, ProjectSummary, TrainSummary, ForecastSummary)> {
    let d = cmd_decompose(cfg)?;
    let p = cmd_project(cfg)?;
    let t = cmd_train(cfg)?;
    let f = cmd_forecast(cfg, dump_snapshot)?;
    Ok((d, p, t, f))
}

/// Expand the sweep cross product, run each cell end to end, and collect
/// every error row into report/errors.csv. Cells reuse the decomposition
/// when the basis does not change shape (the basis depends only on the
/// data and Welch parameters, not on the swept axes).
pub fn cmd_sweep(cfg: &PipelineConfig) -> Result<Vec<ErrorCsvRow>> {
    cfg.validate()?;
    let sweep = cfg.sweep.clone().unwrap_or_default();
    let modes = if sweep.modes.is_empty() {
        vec![cfg.basis.l_r]
    } else {
        sweep.modes.clone()
    };
    let bands: Vec<(usize, usize)> = if sweep.bands.is_empty() {
        vec![band_of(cfg)]
    } else {
        sweep.bands.clone()
    };
    let horizons = if sweep.horizons.is_empty() {
        vec![cfg.emulator.n_tau_f]
    } else {
        sweep.horizons.clone()
    };
    let seeds = if sweep.seeds.is_empty() {
        vec![cfg.emulator.seed]
    } else {
        sweep.seeds.clone()
    };

    cmd_decompose(cfg)?;
    let mut rows = Vec::new();
    for &l_r in &modes {
        for &(flb, fub) in &bands {
            for &h in &horizons {
                for &seed in &seeds {
                    let mut cell = cfg.clone();
                    cell.basis.l_r = l_r;
                    cell.basis.flb = flb;
                    cell.basis.fub = Some(fub);
                    cell.emulator.n_tau_f = h;
                    cell.emulator.seed = seed;
                    cell.sweep = None;
                    cmd_project(&cell)?;
                    cmd_train(&cell)?;
                    let f = cmd_forecast(&cell, None)?;
                    let n_freqs = match cfg.basis.kind {
                        BasisKind::Spod => fub - flb + 1,
                        BasisKind::Pod => 0,
                    };
                    rows.push(ErrorCsvRow {
                        label: format!("{:?}", cfg.basis.kind).to_lowercase(),
                        modes: l_r,
                        frequencies: n_freqs,
                        n_tau_f: h,
                        seed,
                        report: f.report,
                    });
                }
            }
        }
    }
    Ok(rows)
}
