//! Experiment configuration and the figure pipelines.
//!
//! A run is driven by an [`ExperimentConfig`] (TOML, every key optional,
//! unknown keys rejected). Each experiment writes CSV files and a
//! `bundle.json` into `<out_dir>/<experiment>/`; trained networks are cached
//! in `<out_dir>/models/` under a hash of everything that affects training.
//!
//! Result CSVs share the header
//! `scheme,n_t,n_r,n_rf,n_s,snr_db,seed,step,value,units,config_hash`, where
//! `snr_db` and `step` may be empty. Beam patterns use
//! `scheme,azimuth_deg,elevation_deg,gain_db,config_hash`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{AngularSpread, ArrayGeometry, ChannelError, ChannelModel, ChannelRealization};
use crate::linalg::{ComplexMatrix, MultiplicationCounter};
use crate::metrics::{
    angle_grid_deg, beam_pattern, ber_16qam, complexity_count, db_to_linear, spectral_efficiency, BeamGrid,
    ComplexityDims, LinkBudget, MetricsError, Scheme,
};
use crate::neural::{
    self, default_architecture, init_network, random_projection, split_dataset, MlpModel, NeuralError, TrainConfig,
    TrainHistory, TrainingSample, PROJECTED_INPUT,
};
use crate::precoders::{
    omp_hybrid_combiner, omp_hybrid_precoder, omp_hybrid_precoder_traced, optimal_precoder,
    subconnected_hybrid_precoder, zf_hybrid_precoder, zf_hybrid_precoder_counted, HybridPrecoder, OptimalPrecoder,
    PrecoderDictionary, PrecoderError,
};
use crate::rng;
use crate::tensor_io::{self, TensorIoError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Precoder(#[from] PrecoderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    Fig6,
    Fig7,
    Fig8,
    Fig9,
    Beampattern,
    Fig12,
    Fig13,
    All,
}

impl ExperimentId {
    /// Execution order of `all`.
    pub const SEQUENCE: [ExperimentId; 7] = [
        ExperimentId::Fig6,
        ExperimentId::Fig7,
        ExperimentId::Fig8,
        ExperimentId::Fig9,
        ExperimentId::Beampattern,
        ExperimentId::Fig12,
        ExperimentId::Fig13,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::Fig6 => "fig6",
            ExperimentId::Fig7 => "fig7",
            ExperimentId::Fig8 => "fig8",
            ExperimentId::Fig9 => "fig9",
            ExperimentId::Beampattern => "beampattern",
            ExperimentId::Fig12 => "fig12",
            ExperimentId::Fig13 => "fig13",
            ExperimentId::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::SEQUENCE
            .into_iter()
            .chain([ExperimentId::All])
            .find(|e| e.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureChoice {
    FullyConnected,
    SubConnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub carrier_hz: f64,
    /// Element spacing in wavelengths.
    pub spacing_wavelengths: f64,
    pub n_t: usize,
    pub n_r: usize,
    pub n_rf_t: usize,
    pub n_rf_r: usize,
    pub n_s: usize,
    pub n_cl: usize,
    pub n_ray: usize,
    /// Intra-cluster Laplacian spread (degrees); absent means fully random rays.
    pub angular_spread_deg: Option<f64>,
    pub structure: StructureChoice,
    /// Recorded in result metadata only; SNR is the power knob.
    pub transmit_power_dbm: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            carrier_hz: 28e9,
            spacing_wavelengths: 0.5,
            n_t: 64,
            n_r: 16,
            n_rf_t: 4,
            n_rf_r: 4,
            n_s: 1,
            n_cl: 5,
            n_ray: 5,
            angular_spread_deg: None,
            structure: StructureChoice::FullyConnected,
            transmit_power_dbm: 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DictionaryMode {
    /// Steering vectors at the realization's true ray angles.
    Genie,
    /// Uniform angle grid, no channel knowledge.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictionaryConfig {
    pub mode: DictionaryMode,
    pub grid_azimuth: usize,
    pub grid_elevation: usize,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        Self {
            mode: DictionaryMode::Genie,
            grid_azimuth: 64,
            grid_elevation: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Channels generated for the 80/10/10 split.
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub noise_sigma: f64,
    /// Relative-error threshold for accuracy.
    pub tau: f64,
    /// Project features to 100 inputs with a fixed random matrix first.
    pub projected_input: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            samples: 5000,
            epochs: 100,
            batch_size: 250,
            lr: 1e-4,
            noise_sigma: 0.1,
            tau: 0.1,
            projected_input: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnrSweepConfig {
    pub snr_db: Vec<f64>,
}

impl Default for SnrSweepConfig {
    fn default() -> Self {
        Self {
            snr_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig7Config {
    pub n_t: Vec<usize>,
    pub snr_db: f64,
}

impl Default for Fig7Config {
    fn default() -> Self {
        Self {
            n_t: vec![16, 32, 64],
            snr_db: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig8Config {
    pub n_t: Vec<usize>,
    /// Streams for the complexity count (independent of `system.n_s`).
    pub n_s: usize,
}

impl Default for Fig8Config {
    fn default() -> Self {
        Self {
            n_t: vec![16, 32, 64, 128, 256],
            n_s: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig9Config {
    /// Channels averaged for the OMP residual trace.
    pub channels: usize,
}

impl Default for Fig9Config {
    fn default() -> Self {
        Self { channels: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeamScheme {
    Omp,
    Dnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamPatternConfig {
    pub spread_deg: f64,
    pub center_azimuth_deg: f64,
    pub center_elevation_deg: f64,
    pub azimuth_points: usize,
    pub elevation_points: usize,
    pub hybrid_scheme: BeamScheme,
    /// Lobes at or above this level (dB below peak) are counted.
    pub lobe_threshold_db: f64,
}

impl Default for BeamPatternConfig {
    fn default() -> Self {
        Self {
            spread_deg: 10.0,
            center_azimuth_deg: 55.0,
            center_elevation_deg: 20.0,
            azimuth_points: 181,
            elevation_points: 91,
            hybrid_scheme: BeamScheme::Omp,
            lobe_threshold_db: -10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig12Config {
    pub n_rf: usize,
    pub snr_db: Vec<f64>,
    pub channels: usize,
    /// Bits simulated per channel and SNR point.
    pub bits_per_channel: u64,
}

impl Default for Fig12Config {
    fn default() -> Self {
        Self {
            n_rf: 5,
            snr_db: vec![-30.0, -25.0, -20.0, -15.0, -10.0],
            channels: 20,
            bits_per_channel: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub seed: u64,
    /// Output root; not part of the config hash.
    pub out_dir: PathBuf,
    /// Channels averaged per spectral-efficiency point.
    pub trials: usize,
    pub system: SystemConfig,
    pub dictionary: DictionaryConfig,
    pub training: TrainingConfig,
    pub fig6: SnrSweepConfig,
    pub fig7: Fig7Config,
    pub fig8: Fig8Config,
    pub fig9: Fig9Config,
    pub beampattern: BeamPatternConfig,
    pub fig12: Fig12Config,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentId::All,
            seed: 1,
            out_dir: PathBuf::from("results"),
            trials: 100,
            system: SystemConfig::default(),
            dictionary: DictionaryConfig::default(),
            training: TrainingConfig::default(),
            fig6: SnrSweepConfig::default(),
            fig7: Fig7Config::default(),
            fig8: Fig8Config::default(),
            fig9: Fig9Config::default(),
            beampattern: BeamPatternConfig::default(),
            fig12: Fig12Config::default(),
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(HarnessError::Config(msg()))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        check(s.carrier_hz > 0.0 && s.spacing_wavelengths > 0.0, || {
            "carrier_hz and spacing_wavelengths must be positive".into()
        })?;
        check(s.n_t > 0 && s.n_r > 0 && s.n_cl > 0 && s.n_ray > 0, || {
            "n_t, n_r, n_cl, n_ray must be positive".into()
        })?;
        check(s.n_s >= 1 && s.n_s <= s.n_rf_t && s.n_rf_t <= s.n_t, || {
            format!(
                "need 1 <= n_s <= n_rf_t <= n_t (n_s = {}, n_rf_t = {}, n_t = {})",
                s.n_s, s.n_rf_t, s.n_t
            )
        })?;
        check(s.n_s <= s.n_rf_r && s.n_rf_r <= s.n_r, || {
            format!("need n_s <= n_rf_r <= n_r (n_rf_r = {}, n_r = {})", s.n_rf_r, s.n_r)
        })?;
        if s.structure == StructureChoice::SubConnected {
            check(s.n_t.is_multiple_of(s.n_rf_t), || {
                format!(
                    "sub-connected structure needs n_t ({}) divisible by n_rf_t ({})",
                    s.n_t, s.n_rf_t
                )
            })?;
        }
        if let Some(sp) = s.angular_spread_deg {
            check(sp >= 0.0, || "angular_spread_deg must be non-negative".into())?;
        }
        check(self.trials > 0, || "trials must be positive".into())?;
        let d = &self.dictionary;
        check(d.grid_azimuth > 0 && d.grid_elevation > 0, || {
            "dictionary grid must be non-empty".into()
        })?;
        let t = &self.training;
        check(t.samples >= 10, || "training.samples must be at least 10".into())?;
        check(t.epochs > 0 && t.batch_size > 0, || {
            "epochs and batch_size must be positive".into()
        })?;
        check(t.lr > 0.0 && t.noise_sigma >= 0.0 && t.tau >= 0.0, || {
            "lr must be positive, noise_sigma and tau non-negative".into()
        })?;
        check(!self.fig6.snr_db.is_empty(), || "fig6.snr_db is empty".into())?;
        check(!self.fig7.n_t.is_empty(), || "fig7.n_t is empty".into())?;
        check(self.fig7.n_t.iter().all(|&n| n >= s.n_rf_t), || {
            "fig7.n_t values must be >= n_rf_t".into()
        })?;
        check(!self.fig8.n_t.is_empty(), || "fig8.n_t is empty".into())?;
        check(self.fig8.n_t.iter().all(|&n| n >= s.n_rf_t), || {
            "fig8.n_t values must be >= n_rf_t".into()
        })?;
        check(self.fig8.n_s >= 1 && self.fig8.n_s <= s.n_rf_t, || {
            "fig8.n_s must lie in 1..=n_rf_t".into()
        })?;
        check(self.fig9.channels > 0, || "fig9.channels must be positive".into())?;
        let b = &self.beampattern;
        check(
            b.azimuth_points > 0 && b.elevation_points > 0 && b.spread_deg >= 0.0,
            || "beampattern grid must be non-empty and spread non-negative".into(),
        )?;
        let f = &self.fig12;
        check(!f.snr_db.is_empty() && f.channels > 0, || {
            "fig12 needs SNR points and channels".into()
        })?;
        check(f.n_rf >= s.n_s && f.n_rf <= s.n_t && f.n_rf <= s.n_r, || {
            format!("fig12.n_rf = {} must lie in n_s..=min(n_t, n_r)", f.n_rf)
        })?;
        check(
            f.bits_per_channel >= 10_000 && f.bits_per_channel.is_multiple_of(4 * s.n_s as u64),
            || format!("fig12.bits_per_channel must be >= 10^4 and a multiple of {}", 4 * s.n_s),
        )?;
        Ok(())
    }

    /// Canonical TOML text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    /// First 16 hex digits of SHA-256 over the canonical TOML with
    /// `out_dir` blanked, so relocating outputs keeps the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        short_hash(c.to_toml().as_bytes())
    }
}

fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(digest)[..16].to_string()
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text)
}

/// One result value.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scheme: String,
    pub n_t: usize,
    pub n_r: usize,
    pub n_rf: usize,
    pub n_s: usize,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub step: Option<usize>,
    pub value: f64,
    pub units: String,
}

pub const RESULT_HEADER: [&str; 11] = [
    "scheme",
    "n_t",
    "n_r",
    "n_rf",
    "n_s",
    "snr_db",
    "seed",
    "step",
    "value",
    "units",
    "config_hash",
];

pub const BEAM_HEADER: [&str; 5] = ["scheme", "azimuth_deg", "elevation_deg", "gain_db", "config_hash"];

fn write_rows(path: &Path, rows: &[ResultRow], hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULT_HEADER)?;
    for r in rows {
        w.write_record([
            r.scheme.clone(),
            r.n_t.to_string(),
            r.n_r.to_string(),
            r.n_rf.to_string(),
            r.n_s.to_string(),
            r.snr_db.map(|v| v.to_string()).unwrap_or_default(),
            r.seed.to_string(),
            r.step.map(|v| v.to_string()).unwrap_or_default(),
            r.value.to_string(),
            r.units.clone(),
            hash.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| HarnessError::Config(format!("bad number {:?} in {}", &rec[i], path.display())))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        out.push(ResultRow {
            scheme: rec[0].to_string(),
            n_t: num(1)? as usize,
            n_r: num(2)? as usize,
            n_rf: num(3)? as usize,
            n_s: num(4)? as usize,
            snr_db: opt(5)?,
            seed: rec[6].parse().unwrap_or_default(),
            step: opt(7)?.map(|v| v as usize),
            value: num(8)?,
            units: rec[9].to_string(),
        });
    }
    Ok(out)
}

fn write_beam(path: &Path, scheme: &str, grid: &BeamGrid, hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(BEAM_HEADER)?;
    for (e, row) in grid.gains_db.iter().enumerate() {
        for (a, g) in row.iter().enumerate() {
            w.write_record([
                scheme.to_string(),
                round_deg(grid.azimuths[a]).to_string(),
                round_deg(grid.elevations[e]).to_string(),
                g.to_string(),
                hash.to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Degrees rounded to 1e-9 so grid labels print cleanly.
fn round_deg(rad: f64) -> f64 {
    (rad.to_degrees() * 1e9).round() / 1e9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngInfo {
    pub generator: String,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub experiment: String,
    /// Relative to the output root.
    pub csv_paths: Vec<String>,
    pub config_hash: String,
    pub code_version: String,
    pub timings_s: BTreeMap<String, f64>,
    pub rng: RngInfo,
    pub notes: BTreeMap<String, String>,
}

/// Everything an experiment produced, in memory as well as on disk.
#[derive(Debug, Clone)]
pub struct FigureResult {
    pub bundle: ResultBundle,
    pub rows: Vec<ResultRow>,
    pub beams: Vec<(String, BeamGrid)>,
    pub history: Option<TrainHistory>,
}

impl FigureResult {
    pub fn values(&self, scheme: &str, units: &str) -> Vec<&ResultRow> {
        self.rows
            .iter()
            .filter(|r| r.scheme == scheme && r.units == units)
            .collect()
    }
}

/// A trained network plus how it was obtained.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: MlpModel,
    pub history: TrainHistory,
    pub key: String,
    pub from_cache: bool,
    pub train_seconds: f64,
}

pub struct Runner {
    pub cfg: ExperimentConfig,
    pub verbose: bool,
}

const SE_UNITS: &str = "bits/s/Hz";

#[derive(Serialize)]
struct ModelKey<'a> {
    system: &'a SystemConfig,
    training: &'a TrainingConfig,
    n_t: usize,
    n_rf: usize,
    seed: u64,
    format: u32,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, verbose: false })
    }

    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("[hbf] {msg}");
        }
    }

    pub fn config_hash(&self) -> String {
        self.cfg.hash()
    }

    fn experiment_dir(&self, id: &str) -> Result<PathBuf> {
        let d = self.cfg.out_dir.join(id);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        Ok(d)
    }

    pub fn channel_model(&self, n_t: usize) -> Result<ChannelModel> {
        let s = &self.cfg.system;
        let wavelength = crate::channel::SPEED_OF_LIGHT / s.carrier_hz;
        let geom = |n: usize| -> Result<ArrayGeometry> {
            let (l, b) = crate::channel::upa_layout(n);
            Ok(ArrayGeometry::new(
                l,
                b,
                s.spacing_wavelengths * wavelength,
                wavelength,
            )?)
        };
        Ok(ChannelModel {
            tx: geom(n_t)?,
            rx: geom(s.n_r)?,
            n_cl: s.n_cl,
            n_ray: s.n_ray,
            spread: s.angular_spread_deg.map(|d| AngularSpread {
                std_deg: d,
                pinned_tx_center: None,
            }),
        })
    }

    /// Evaluation channels `0..count` for `n_t` (independent of training data).
    pub fn eval_channels(&self, n_t: usize, count: usize) -> Result<Vec<ChannelRealization>> {
        Ok(self.channel_model(n_t)?.batch(self.cfg.seed, "eval", count)?)
    }

    fn tx_dictionary(&self, ch: &ChannelRealization) -> PrecoderDictionary {
        match self.cfg.dictionary.mode {
            DictionaryMode::Genie => PrecoderDictionary::genie_tx(ch),
            DictionaryMode::Grid => PrecoderDictionary::grid(
                &ch.tx_geometry,
                self.cfg.dictionary.grid_azimuth,
                self.cfg.dictionary.grid_elevation,
            ),
        }
    }

    fn rx_dictionary(&self, ch: &ChannelRealization) -> PrecoderDictionary {
        match self.cfg.dictionary.mode {
            DictionaryMode::Genie => PrecoderDictionary::genie_rx(ch),
            DictionaryMode::Grid => PrecoderDictionary::grid(
                &ch.rx_geometry,
                self.cfg.dictionary.grid_azimuth,
                self.cfg.dictionary.grid_elevation,
            ),
        }
    }

    fn model_key(&self, n_t: usize, n_rf: usize) -> String {
        let key = ModelKey {
            system: &self.cfg.system,
            training: &self.cfg.training,
            n_t,
            n_rf,
            seed: self.cfg.seed,
            format: neural::CHECKPOINT_VERSION,
        };
        short_hash(serde_json::to_string(&key).expect("key serialises").as_bytes())
    }

    /// Training samples for `n_t`, split 80/10/10.
    pub fn dataset(&self, n_t: usize) -> Result<neural::DatasetSplit<TrainingSample>> {
        let model = self.channel_model(n_t)?;
        let n_s = self.cfg.system.n_s;
        let samples = (0..self.cfg.training.samples as u64)
            .map(|i| {
                let ch = model.realize_normalized(self.cfg.seed, "train-data", i)?;
                Ok(TrainingSample::from_channel(&ch.h, n_s)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(split_dataset(
            samples,
            &mut rng::stream(self.cfg.seed, "split", n_t as u64),
        )?)
    }

    /// Loads the cached network for `(n_t, n_rf)` or trains and caches one.
    pub fn trained_model(&self, n_t: usize, n_rf: usize) -> Result<TrainedModel> {
        let key = self.model_key(n_t, n_rf);
        let dir = self.cfg.out_dir.join("models");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let ckpt = dir.join(format!("dnn-{key}.bin"));
        let hist_path = dir.join(format!("dnn-{key}.history.json"));
        if ckpt.exists() && hist_path.exists() {
            let model = neural::load_checkpoint(&ckpt)?;
            let text = fs::read_to_string(&hist_path).map_err(io_err(&hist_path))?;
            let history: TrainHistory = serde_json::from_str(&text)?;
            self.log(&format!("loaded cached network {key} (n_t = {n_t}, n_rf = {n_rf})"));
            return Ok(TrainedModel {
                model,
                history,
                key,
                from_cache: true,
                train_seconds: 0.0,
            });
        }
        let t0 = Instant::now();
        let t = &self.cfg.training;
        let n_r = self.cfg.system.n_r;
        let raw = 2 * n_r * n_t;
        let inputs = if t.projected_input { PROJECTED_INPUT } else { raw };
        let mut model = init_network(
            &default_architecture(inputs, n_t * n_rf),
            t.noise_sigma,
            &mut rng::stream(self.cfg.seed, "init", (n_t * 1000 + n_rf) as u64),
        )?;
        if t.projected_input {
            model.projection = Some(random_projection(
                raw,
                PROJECTED_INPUT,
                &mut rng::stream(self.cfg.seed, "projection", n_t as u64),
            ));
        }
        self.log(&format!(
            "training network {key} (n_t = {n_t}, n_rf = {n_rf}, {} samples)",
            t.samples
        ));
        let data = self.dataset(n_t)?;
        let tc = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: self.cfg.seed,
            n_rf,
            tau: t.tau,
        };
        let history = neural::train_with_progress(&mut model, &data, &tc, |e, h| {
            if (e + 1) % 10 == 0 || e == 0 {
                self.log(&format!(
                    "  epoch {:>3}: train loss {:.4}, val loss {:.4}, train acc {:.3}",
                    e + 1,
                    h.train_loss[e],
                    h.val_loss[e],
                    h.train_accuracy[e]
                ));
            }
        })?;
        let secs = t0.elapsed().as_secs_f64();
        neural::save_checkpoint(&model, &ckpt)?;
        fs::write(&hist_path, serde_json::to_string(&history)?).map_err(io_err(&hist_path))?;
        let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN).to_string();
        tensor_io::write_sidecar(
            &ckpt,
            &[
                ("config_hash", self.config_hash()),
                ("model_key", key.clone()),
                ("seed", self.cfg.seed.to_string()),
                ("n_t", n_t.to_string()),
                ("n_r", n_r.to_string()),
                ("n_rf", n_rf.to_string()),
                ("epochs_trained", t.epochs.to_string()),
                ("final_train_loss", last(&history.train_loss)),
                ("final_val_loss", last(&history.val_loss)),
                ("final_train_accuracy", last(&history.train_accuracy)),
                ("final_test_accuracy", last(&history.test_accuracy)),
                ("tau", t.tau.to_string()),
                ("train_seconds", format!("{secs:.1}")),
            ],
        )
        .map_err(io_err(&ckpt))?;
        Ok(TrainedModel {
            model,
            history,
            key,
            from_cache: false,
            train_seconds: secs,
        })
    }

    fn row(
        &self,
        scheme: &str,
        n_t: usize,
        n_rf: usize,
        snr_db: Option<f64>,
        step: Option<usize>,
        value: f64,
        units: &str,
    ) -> ResultRow {
        ResultRow {
            scheme: scheme.to_string(),
            n_t,
            n_r: self.cfg.system.n_r,
            n_rf,
            n_s: self.cfg.system.n_s,
            snr_db,
            seed: self.cfg.seed,
            step,
            value,
            units: units.to_string(),
        }
    }

    fn base_notes(&self) -> BTreeMap<String, String> {
        let s = &self.cfg.system;
        let mut n = BTreeMap::new();
        n.insert(
            "dictionary_mode".into(),
            format!("{:?}", self.cfg.dictionary.mode).to_lowercase(),
        );
        n.insert(
            "snr_definition".into(),
            "rho/sigma^2 with sigma^2 = 1, channels normalised to ||H||_F^2 = N_t*N_r".into(),
        );
        n.insert("transmit_power_dbm".into(), s.transmit_power_dbm.to_string());
        n.insert("combiner".into(), "optimal: leading left singular vectors; hybrid schemes: OMP over receive dictionary against the MMSE combiner".into());
        n
    }

    fn finish(
        &self,
        id: &str,
        files: Vec<(String, Vec<ResultRow>)>,
        timings: BTreeMap<String, f64>,
        notes: BTreeMap<String, String>,
    ) -> Result<FigureResult> {
        let dir = self.experiment_dir(id)?;
        let hash = self.config_hash();
        let mut paths = Vec::new();
        let mut all = Vec::new();
        for (name, rows) in files {
            let p = dir.join(&name);
            write_rows(&p, &rows, &hash)?;
            paths.push(format!("{id}/{name}"));
            all.extend(rows);
        }
        let bundle = ResultBundle {
            experiment: id.to_string(),
            csv_paths: paths,
            config_hash: hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            timings_s: timings,
            rng: RngInfo {
                generator: rng::GENERATOR_NAME.to_string(),
                master_seed: self.cfg.seed,
            },
            notes,
        };
        let bp = dir.join("bundle.json");
        fs::write(&bp, serde_json::to_string_pretty(&bundle)?).map_err(io_err(&bp))?;
        Ok(FigureResult {
            bundle,
            rows: all,
            beams: Vec::new(),
            history: None,
        })
    }

    /// Hybrid combiner for a transmit precoder at linear SNR `snr`.
    fn hybrid_combiner(
        &self,
        ch: &ChannelRealization,
        f: &ComplexMatrix,
        n_rf: usize,
        snr: f64,
    ) -> Result<ComplexMatrix> {
        Ok(omp_hybrid_combiner(&ch.h, f, &self.rx_dictionary(ch), n_rf, snr)?.effective())
    }

    fn hybrid_se(
        &self,
        ch: &ChannelRealization,
        p: &HybridPrecoder,
        n_rf_r: usize,
        budget: &LinkBudget,
    ) -> Result<f64> {
        let f = p.effective();
        let w = self.hybrid_combiner(ch, &f, n_rf_r, budget.rho)?;
        Ok(spectral_efficiency(&ch.h, &f, &w, budget)?)
    }

    fn optimal_se(ch: &ChannelRealization, opt: &OptimalPrecoder, budget: &LinkBudget) -> Result<f64> {
        Ok(spectral_efficiency(&ch.h, &opt.f_opt, &opt.w_opt, budget)?)
    }

    fn scheme_precoder(
        &self,
        scheme: &str,
        ch: &ChannelRealization,
        opt: &OptimalPrecoder,
        n_rf: usize,
        model: Option<&MlpModel>,
    ) -> Result<HybridPrecoder> {
        let n_s = self.cfg.system.n_s;
        Ok(match scheme {
            "omp" => omp_hybrid_precoder(&opt.f_opt, &self.tx_dictionary(ch), n_rf)?,
            "zf" => zf_hybrid_precoder(&ch.h, n_rf, n_s)?,
            "subconnected" => subconnected_hybrid_precoder(&opt.f_opt, n_rf)?,
            "dnn" => neural::infer_precoder(
                model.ok_or_else(|| HarnessError::Config("dnn scheme needs a model".into()))?,
                &ch.h,
                Some(&opt.f_opt),
                n_rf,
                n_s,
            )?,
            other => return Err(HarnessError::Config(format!("unknown scheme {other}"))),
        })
    }

    /// Mean SE per scheme and SNR over `channels`.
    fn se_sweep(
        &self,
        channels: &[ChannelRealization],
        schemes: &[&str],
        snrs: &[f64],
        n_rf: usize,
        model: Option<&MlpModel>,
    ) -> Result<Vec<(String, f64, f64)>> {
        let n_s = self.cfg.system.n_s;
        let n_rf_r = self.cfg.system.n_rf_r;
        let mut sums = vec![vec![0.0; snrs.len()]; schemes.len()];
        for ch in channels {
            let opt = optimal_precoder(&ch.h, n_s)?;
            for (si, scheme) in schemes.iter().enumerate() {
                let pre = if *scheme == "optimal" {
                    None
                } else {
                    Some(self.scheme_precoder(scheme, ch, &opt, n_rf, model)?)
                };
                for (k, &snr) in snrs.iter().enumerate() {
                    let budget = LinkBudget::from_snr_db(snr, n_s)?;
                    sums[si][k] += match &pre {
                        None => Self::optimal_se(ch, &opt, &budget)?,
                        Some(p) => self.hybrid_se(ch, p, n_rf_r, &budget)?,
                    };
                }
            }
        }
        let n = channels.len() as f64;
        let mut out = Vec::new();
        for (si, scheme) in schemes.iter().enumerate() {
            for (k, &snr) in snrs.iter().enumerate() {
                out.push((scheme.to_string(), snr, sums[si][k] / n));
            }
        }
        Ok(out)
    }

    /// Writes the evaluation channels used by the SE experiments.
    pub fn gen_channels(&self) -> Result<PathBuf> {
        let dir = self.experiment_dir("channels")?;
        let chans = self.eval_channels(self.cfg.system.n_t, self.cfg.trials)?;
        let path = dir.join("eval_channels.bin");
        let mats: Vec<ComplexMatrix> = chans.iter().map(|c| c.h.clone()).collect();
        tensor_io::write_tensor(&path, &mats)?;
        tensor_io::write_sidecar(
            &path,
            &[
                ("config_hash", self.config_hash()),
                ("seed", self.cfg.seed.to_string()),
                ("domain", "eval".into()),
                ("count", chans.len().to_string()),
                ("n_t", self.cfg.system.n_t.to_string()),
                ("n_r", self.cfg.system.n_r.to_string()),
                ("normalisation", "||H||_F^2 = N_t*N_r".into()),
                ("generator", rng::GENERATOR_NAME.into()),
            ],
        )
        .map_err(io_err(&path))?;
        Ok(path)
    }

    /// SE of every scheme (sub-connected included) on the evaluation
    /// channels over the fig6 SNR grid.
    pub fn run_eval(&self) -> Result<FigureResult> {
        let s = &self.cfg.system;
        let t0 = Instant::now();
        let tm = self.trained_model(s.n_t, s.n_rf_t)?;
        let t_train = t0.elapsed().as_secs_f64();
        let chans = self.eval_channels(s.n_t, self.cfg.trials)?;
        let mut schemes = vec!["optimal", "omp", "zf", "dnn"];
        if s.n_t.is_multiple_of(s.n_rf_t) {
            schemes.push("subconnected");
        }
        let t1 = Instant::now();
        let res = self.se_sweep(&chans, &schemes, &self.cfg.fig6.snr_db, s.n_rf_t, Some(&tm.model))?;
        let rows = res
            .into_iter()
            .map(|(sc, snr, v)| self.row(&sc, s.n_t, s.n_rf_t, Some(snr), None, v, SE_UNITS))
            .collect();
        let mut timings = BTreeMap::new();
        timings.insert("training".into(), t_train);
        timings.insert("evaluation".into(), t1.elapsed().as_secs_f64());
        self.finish("eval", vec![("se.csv".into(), rows)], timings, self.base_notes())
    }

    pub fn run_fig6(&self) -> Result<FigureResult> {
        let s = &self.cfg.system;
        let t0 = Instant::now();
        let tm = self.trained_model(s.n_t, s.n_rf_t)?;
        let t_train = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let chans = self.eval_channels(s.n_t, self.cfg.trials)?;
        let res = self.se_sweep(
            &chans,
            &["optimal", "omp", "dnn"],
            &self.cfg.fig6.snr_db,
            s.n_rf_t,
            Some(&tm.model),
        )?;
        let rows = res
            .into_iter()
            .map(|(sc, snr, v)| self.row(&sc, s.n_t, s.n_rf_t, Some(snr), None, v, SE_UNITS))
            .collect();
        let mut timings = BTreeMap::new();
        timings.insert("training".into(), t_train);
        timings.insert("evaluation".into(), t1.elapsed().as_secs_f64());
        let mut notes = self.base_notes();
        notes.insert("model_key".into(), tm.key);
        notes.insert("model_from_cache".into(), tm.from_cache.to_string());
        self.finish("fig6", vec![("se_vs_snr.csv".into(), rows)], timings, notes)
    }

    pub fn run_fig7(&self) -> Result<FigureResult> {
        let s = &self.cfg.system;
        let snr = self.cfg.fig7.snr_db;
        let mut rows = Vec::new();
        let mut timings = BTreeMap::new();
        let mut notes = self.base_notes();
        notes.insert(
            "dnn_per_antenna_count".into(),
            "retrained per N_t, cached by model key".into(),
        );
        for &n_t in &self.cfg.fig7.n_t {
            let t0 = Instant::now();
            let tm = self.trained_model(n_t, s.n_rf_t)?;
            timings.insert(format!("training_n_t_{n_t}"), t0.elapsed().as_secs_f64());
            notes.insert(format!("model_key_n_t_{n_t}"), tm.key.clone());
            let t1 = Instant::now();
            let chans = self.eval_channels(n_t, self.cfg.trials)?;
            let res = self.se_sweep(
                &chans,
                &["optimal", "zf", "omp", "dnn"],
                &[snr],
                s.n_rf_t,
                Some(&tm.model),
            )?;
            rows.extend(
                res.into_iter()
                    .map(|(sc, snr, v)| self.row(&sc, n_t, s.n_rf_t, Some(snr), None, v, SE_UNITS)),
            );
            timings.insert(format!("evaluation_n_t_{n_t}"), t1.elapsed().as_secs_f64());
        }
        self.finish("fig7", vec![("se_vs_antennas.csv".into(), rows)], timings, notes)
    }

    pub fn run_fig8(&self) -> Result<FigureResult> {
        let s = &self.cfg.system;
        let n_s = self.cfg.fig8.n_s;
        let t0 = Instant::now();
        let d = &self.cfg.dictionary;
        let n_atoms = d.grid_azimuth * d.grid_elevation;
        let mut rows = Vec::new();
        for &n_t in &self.cfg.fig8.n_t {
            let ch = self.eval_channels(n_t, 1)?.remove(0);
            let opt = optimal_precoder(&ch.h, n_s)?;
            let model = init_network(
                &default_architecture(2 * s.n_r * n_t, n_t * s.n_rf_t),
                0.0,
                &mut rng::stream(self.cfg.seed, "fig8-init", n_t as u64),
            )?;
            let dims = ComplexityDims {
                n_t,
                n_r: s.n_r,
                n_rf: s.n_rf_t,
                n_s,
                n_atoms,
                layer_widths: model.dense_widths(),
            };
            let grid = PrecoderDictionary::grid(&ch.tx_geometry, d.grid_azimuth, d.grid_elevation);
            let mut c_omp = MultiplicationCounter::new();
            omp_hybrid_precoder_traced(&opt.f_opt, &grid, s.n_rf_t, &mut c_omp)?;
            let mut c_dnn = MultiplicationCounter::new();
            neural::infer_precoder_counted(&model, &ch.h, Some(&opt.f_opt), s.n_rf_t, n_s, &mut c_dnn)?;
            let mut c_zf = MultiplicationCounter::new();
            zf_hybrid_precoder_counted(&ch.h, s.n_rf_t, n_s, &mut c_zf)?;
            for (scheme, counter) in [(Scheme::Omp, c_omp), (Scheme::Dnn, c_dnn), (Scheme::Zf, c_zf)] {
                let closed = complexity_count(scheme, &dims) as f64;
                for (value, units) in [
                    (closed, "complex_mults_closed_form"),
                    (counter.count() as f64, "complex_mults_measured"),
                ] {
                    let mut r = self.row(scheme.name(), n_t, s.n_rf_t, None, None, value, units);
                    r.n_s = n_s;
                    rows.push(r);
                }
            }
        }
        let mut timings = BTreeMap::new();
        timings.insert("total".into(), t0.elapsed().as_secs_f64());
        let mut notes = BTreeMap::new();
        notes.insert(
            "omp_dictionary".into(),
            format!("{}x{} angle grid ({n_atoms} atoms)", d.grid_azimuth, d.grid_elevation),
        );
        notes.insert(
            "dnn_counting".into(),
            "dense forward real multiplications / 4 (rounded up) + least-squares F_D + final product".into(),
        );
        notes.insert("n_s".into(), n_s.to_string());
        notes.insert(
            "zf_counting".into(),
            "SVD charged 4*m*n*min(m,n); products counted exactly".into(),
        );
        self.finish("fig8", vec![("complexity.csv".into(), rows)], timings, notes)
    }

    pub fn run_fig9(&self) -> Result<FigureResult> {
        let s = &self.cfg.system;
        let t0 = Instant::now();
        let tm = self.trained_model(s.n_t, s.n_rf_t)?;
        let mut rows: Vec<ResultRow> = tm
            .history
            .epoch_mse
            .iter()
            .enumerate()
            .map(|(i, &v)| self.row("dnn", s.n_t, s.n_rf_t, None, Some(i + 1), v, "mse"))
            .collect();
        let chans = self.eval_channels(s.n_t, self.cfg.fig9.channels)?;
        let mut sums = vec![0.0; s.n_rf_t];
        for ch in &chans {
            let opt = optimal_precoder(&ch.h, s.n_s)?;
            let mut c = MultiplicationCounter::new();
            let (_, trace) = omp_hybrid_precoder_traced(&opt.f_opt, &self.tx_dictionary(ch), s.n_rf_t, &mut c)?;
            for (k, r) in trace.residual_norms.iter().enumerate() {
                sums[k] += r * r;
            }
        }
        rows.extend(
            sums.iter()
                .enumerate()
                .map(|(k, v)| self.row("omp", s.n_t, s.n_rf_t, None, Some(k + 1), v / chans.len() as f64, "mse")),
        );
        let mut timings = BTreeMap::new();
        timings.insert("total".into(), t0.elapsed().as_secs_f64());
        let mut notes = self.base_notes();
        notes.insert(
            "dnn_iteration".into(),
            "one epoch; value = mean squared loss over the training split, inference mode".into(),
        );
        notes.insert(
            "omp_iteration".into(),
            "one greedy step; value = mean ||F_opt - F_A F_D||_F^2 before power normalisation".into(),
        );
        let mut res = self.finish("fig9", vec![("mse_vs_iteration.csv".into(), rows)], timings, notes)?;
        res.history = Some(tm.history);
        Ok(res)
    }

    pub fn run_beampattern(&self) -> Result<FigureResult> {
        let s = &self.cfg.system;
        let b = &self.cfg.beampattern;
        let t0 = Instant::now();
        let mut cm = self.channel_model(s.n_t)?;
        cm.spread = Some(AngularSpread {
            std_deg: b.spread_deg,
            pinned_tx_center: Some((b.center_azimuth_deg.to_radians(), b.center_elevation_deg.to_radians())),
        });
        let ch = cm.realize_normalized(self.cfg.seed, "beampattern", 0)?;
        let opt = optimal_precoder(&ch.h, s.n_s)?;
        let hybrid = match b.hybrid_scheme {
            BeamScheme::Omp => omp_hybrid_precoder(&opt.f_opt, &self.tx_dictionary(&ch), s.n_rf_t)?,
            BeamScheme::Dnn => {
                let tm = self.trained_model(s.n_t, s.n_rf_t)?;
                neural::infer_precoder(&tm.model, &ch.h, Some(&opt.f_opt), s.n_rf_t, s.n_s)?
            }
        };
        let az = angle_grid_deg(-90.0, 90.0, b.azimuth_points);
        let el = angle_grid_deg(0.0, 180.0, b.elevation_points);
        let w_opt = opt.f_opt.column(0);
        let w_hyb = hybrid.effective().column(0);
        let g_opt = beam_pattern(&w_opt, &ch.tx_geometry, &az, &el)?;
        let g_hyb = beam_pattern(&w_hyb, &ch.tx_geometry, &az, &el)?;
        let dir = self.experiment_dir("beampattern")?;
        let hash = self.config_hash();
        write_beam(&dir.join("beam_optimal.csv"), "optimal", &g_opt, &hash)?;
        write_beam(&dir.join("beam_hybrid.csv"), "hybrid", &g_hyb, &hash)?;

        let peak_deg = |g: &BeamGrid| {
            let (e, a) = g.peak();
            (round_deg(g.azimuths[a]), round_deg(g.elevations[e]))
        };
        let mut rows = Vec::new();
        for (name, g) in [("optimal", &g_opt), ("hybrid", &g_hyb)] {
            let (pa, pe) = peak_deg(g);
            rows.push(self.row(name, s.n_t, s.n_rf_t, None, None, pa, "peak_azimuth_deg"));
            rows.push(self.row(name, s.n_t, s.n_rf_t, None, None, pe, "peak_elevation_deg"));
            rows.push(self.row(
                name,
                s.n_t,
                s.n_rf_t,
                None,
                None,
                g.lobes(b.lobe_threshold_db).len() as f64,
                "lobes_above_threshold",
            ));
        }
        let mut timings = BTreeMap::new();
        timings.insert("total".into(), t0.elapsed().as_secs_f64());
        let mut notes = self.base_notes();
        notes.insert(
            "angular_spread".into(),
            format!("{} degrees (Laplacian standard deviation)", b.spread_deg),
        );
        notes.insert(
            "pinned_cluster".into(),
            format!(
                "first cluster departure centre at azimuth {} deg, elevation {} deg",
                b.center_azimuth_deg, b.center_elevation_deg
            ),
        );
        notes.insert("hybrid_scheme".into(), format!("{:?}", b.hybrid_scheme).to_lowercase());
        notes.insert("lobe_threshold_db".into(), b.lobe_threshold_db.to_string());
        let mut res = self.finish("beampattern", vec![("summary.csv".into(), rows)], timings, notes)?;
        res.bundle.csv_paths.insert(0, "beampattern/beam_optimal.csv".into());
        res.bundle.csv_paths.insert(1, "beampattern/beam_hybrid.csv".into());
        let bp = dir.join("bundle.json");
        fs::write(&bp, serde_json::to_string_pretty(&res.bundle)?).map_err(io_err(&bp))?;
        res.beams = vec![("optimal".into(), g_opt), ("hybrid".into(), g_hyb)];
        Ok(res)
    }

    pub fn run_fig12(&self) -> Result<FigureResult> {
        let s = &self.cfg.system;
        let f = &self.cfg.fig12;
        let t0 = Instant::now();
        let tm = self.trained_model(s.n_t, f.n_rf)?;
        let t_train = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let chans = self.eval_channels(s.n_t, f.channels)?;
        let schemes = ["zf", "omp", "dnn"];
        let mut errors = vec![vec![0u64; f.snr_db.len()]; schemes.len()];
        let mut singular = 0usize;
        for (ci, ch) in chans.iter().enumerate() {
            let opt = optimal_precoder(&ch.h, s.n_s)?;
            for (si, scheme) in schemes.iter().enumerate() {
                let p = self.scheme_precoder(scheme, ch, &opt, f.n_rf, Some(&tm.model))?;
                let fe = p.effective();
                for (k, &snr) in f.snr_db.iter().enumerate() {
                    let w = self.hybrid_combiner(ch, &fe, f.n_rf, db_to_linear(snr))?;
                    // same stream at every SNR: common random numbers
                    let mut r = rng::stream(self.cfg.seed, "ber", ci as u64);
                    let est = ber_16qam(&ch.h, &fe, &w, snr, f.bits_per_channel, &mut r)?;
                    singular += est.singular as usize;
                    errors[si][k] += est.bit_errors;
                }
            }
        }
        let total_bits = f.bits_per_channel * chans.len() as u64;
        let mut rows = Vec::new();
        for (si, scheme) in schemes.iter().enumerate() {
            for (k, &snr) in f.snr_db.iter().enumerate() {
                rows.push(self.row(
                    scheme,
                    s.n_t,
                    f.n_rf,
                    Some(snr),
                    None,
                    errors[si][k] as f64 / total_bits as f64,
                    "ber",
                ));
            }
        }
        let mut timings = BTreeMap::new();
        timings.insert("training".into(), t_train);
        timings.insert("simulation".into(), t1.elapsed().as_secs_f64());
        let mut notes = self.base_notes();
        notes.insert(
            "modulation".into(),
            "16-QAM, Gray mapped, zero-forcing equaliser after combining".into(),
        );
        notes.insert(
            "snr_axis".into(),
            "rho in dB: per-stream symbol energy over noise variance before channel gain".into(),
        );
        notes.insert("bits_per_point".into(), total_bits.to_string());
        notes.insert("singular_effective_channels".into(), singular.to_string());
        notes.insert("n_rf".into(), f.n_rf.to_string());
        self.finish("fig12", vec![("ber_vs_snr.csv".into(), rows)], timings, notes)
    }

    pub fn run_fig13(&self) -> Result<FigureResult> {
        let s = &self.cfg.system;
        let t0 = Instant::now();
        let tm = self.trained_model(s.n_t, s.n_rf_t)?;
        let h = &tm.history;
        let mut rows = Vec::new();
        for (units, series) in [
            ("train_accuracy", &h.train_accuracy),
            ("validation_accuracy", &h.val_accuracy),
            ("test_accuracy", &h.test_accuracy),
        ] {
            rows.extend(
                series
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| self.row("dnn", s.n_t, s.n_rf_t, None, Some(i + 1), v, units)),
            );
        }
        let mut timings = BTreeMap::new();
        timings.insert("total".into(), t0.elapsed().as_secs_f64());
        let mut notes = self.base_notes();
        notes.insert("tau".into(), self.cfg.training.tau.to_string());
        notes.insert(
            "accuracy_definition".into(),
            "fraction of samples with ||F_opt - F_A F_D||_F / ||F_opt||_F <= tau".into(),
        );
        let mut res = self.finish("fig13", vec![("accuracy.csv".into(), rows)], timings, notes)?;
        res.history = Some(tm.history);
        Ok(res)
    }

    pub fn run(&self, id: ExperimentId) -> Result<FigureResult> {
        self.log(&format!("running {}", id.name()));
        match id {
            ExperimentId::Fig6 => self.run_fig6(),
            ExperimentId::Fig7 => self.run_fig7(),
            ExperimentId::Fig8 => self.run_fig8(),
            ExperimentId::Fig9 => self.run_fig9(),
            ExperimentId::Beampattern => self.run_beampattern(),
            ExperimentId::Fig12 => self.run_fig12(),
            ExperimentId::Fig13 => self.run_fig13(),
            ExperimentId::All => self.run_all(),
        }
    }

    /// Runs the seven experiments in fixed order and aggregates their bundles.
    pub fn run_all(&self) -> Result<FigureResult> {
        let mut rows = Vec::new();
        let mut beams = Vec::new();
        let mut paths = Vec::new();
        let mut timings = BTreeMap::new();
        let mut notes = BTreeMap::new();
        let mut history = None;
        for id in ExperimentId::SEQUENCE {
            let t0 = Instant::now();
            let r = self.run(id)?;
            timings.insert(id.name().to_string(), t0.elapsed().as_secs_f64());
            paths.extend(r.bundle.csv_paths);
            for (k, v) in r.bundle.notes {
                notes.insert(format!("{}.{k}", id.name()), v);
            }
            rows.extend(r.rows);
            beams.extend(r.beams);
            if r.history.is_some() {
                history = r.history;
            }
        }
        let bundle = ResultBundle {
            experiment: "all".into(),
            csv_paths: paths,
            config_hash: self.config_hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            timings_s: timings,
            rng: RngInfo {
                generator: rng::GENERATOR_NAME.to_string(),
                master_seed: self.cfg.seed,
            },
            notes,
        };
        fs::create_dir_all(&self.cfg.out_dir).map_err(io_err(&self.cfg.out_dir))?;
        let bp = self.cfg.out_dir.join("bundle.json");
        fs::write(&bp, serde_json::to_string_pretty(&bundle)?).map_err(io_err(&bp))?;
        Ok(FigureResult {
            bundle,
            rows,
            beams,
            history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.system.carrier_hz, 28e9);
        assert_eq!((c.system.n_cl, c.system.n_ray), (5, 5));
        assert_eq!((c.training.epochs, c.training.batch_size), (100, 250));
        assert_eq!(c.training.lr, 1e-4);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config("[training]\nepohcs = 3\n").unwrap_err().to_string();
        assert!(err.contains("epohcs"), "{err}");
    }

    #[test]
    fn round_trip_is_stable() {
        let c = parse_config("seed = 9\n[system]\nn_t = 32\n[fig6]\nsnr_db = [0.0]\n").unwrap();
        let again = parse_config(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_toml(), c.to_toml());
    }

    #[test]
    fn validation_errors() {
        assert!(parse_config("[fig6]\nsnr_db = []\n").is_err());
        assert!(parse_config("[system]\nstructure = \"sub_connected\"\nn_t = 30\n").is_err());
        assert!(parse_config("[system]\nn_s = 5\n").is_err());
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn experiment_names_parse() {
        for id in ExperimentId::SEQUENCE {
            assert_eq!(ExperimentId::parse(id.name()), Some(id));
        }
        assert_eq!(ExperimentId::parse("all"), Some(ExperimentId::All));
        assert_eq!(ExperimentId::parse("fig5"), None);
    }
}
