//! Run configuration: defaults, an optional JSON file, then command-line
//! overrides. The resolved result is echoed into every output directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cellfree_core::aagnn::ModelConfig;
use cellfree_core::io::write_atomic;
use cellfree_core::scenario::{ScenarioConfig, DEFAULT_ISD, DEFAULT_SERVING_RADIUS};
use cellfree_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepRanges {
    pub samples: Vec<usize>,
    #[serde(rename = "K")]
    pub ues: Vec<usize>,
    #[serde(rename = "N")]
    pub antennas: Vec<usize>,
    #[serde(rename = "M")]
    pub aps: Vec<usize>,
}

impl Default for SweepRanges {
    fn default() -> Self {
        Self {
            samples: vec![16, 64, 256, 1000],
            ues: (2..=8).collect(),
            antennas: (4..=12).collect(),
            aps: (1..=5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(rename = "K")]
    pub n_ues: usize,
    #[serde(rename = "M")]
    pub n_aps: usize,
    #[serde(rename = "N")]
    pub n_antennas: usize,
    #[serde(rename = "P")]
    pub power: f64,
    pub edge_snr_db: f64,
    pub isd: f64,
    pub serving_radius: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Train set stream; the test set uses `data_seed + 1`.
    pub data_seed: u64,
    /// Model initialization and batch shuffling.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepRanges,
    pub out_dir: PathBuf,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_ues: 4,
            n_aps: 3,
            n_antennas: 8,
            power: 1.0,
            edge_snr_db: 5.0,
            isd: DEFAULT_ISD,
            serving_radius: DEFAULT_SERVING_RADIUS,
            train_samples: 1000,
            test_samples: 200,
            data_seed: 100,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepRanges::default(),
            out_dir: PathBuf::from("runs/default"),
            workers: 1,
        }
    }
}

/// Command-line values that replace file or default values when present.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub n_ues: Option<usize>,
    pub n_aps: Option<usize>,
    pub n_antennas: Option<usize>,
    pub power: Option<f64>,
    pub edge_snr_db: Option<f64>,
    pub train_samples: Option<usize>,
    pub test_samples: Option<usize>,
    pub data_seed: Option<u64>,
    pub seed: Option<u64>,
    pub layers: Option<usize>,
    pub features: Option<usize>,
    pub no_attention: bool,
    pub gain_exponent: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub eval_every: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Defaults, then `file`, then `o`.
    pub fn resolve(file: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        c.apply(o);
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&mut self, o: &Overrides) {
        set!(self.n_ues, o.n_ues);
        set!(self.n_aps, o.n_aps);
        set!(self.n_antennas, o.n_antennas);
        set!(self.power, o.power);
        set!(self.edge_snr_db, o.edge_snr_db);
        set!(self.train_samples, o.train_samples);
        set!(self.test_samples, o.test_samples);
        set!(self.data_seed, o.data_seed);
        set!(self.seed, o.seed);
        set!(self.model.layers, o.layers);
        set!(self.model.features, o.features);
        if o.no_attention {
            self.model.attention = false;
        }
        set!(self.model.gain_exponent, o.gain_exponent);
        set!(self.train.epochs, o.epochs);
        set!(self.train.batch_size, o.batch_size);
        set!(self.train.learning_rate, o.learning_rate);
        set!(self.train.eval_every, o.eval_every);
        set!(self.out_dir, o.out_dir);
        set!(self.workers, o.workers);
        self.model.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ues == 0 || self.n_aps == 0 || self.n_antennas == 0 {
            bail!("K, M and N must be at least 1");
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            bail!("P must be positive");
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            n_ues: self.n_ues,
            n_aps: self.n_aps,
            n_antennas: self.n_antennas,
            power: self.power,
            edge_snr_db: self.edge_snr_db,
            isd: self.isd,
            serving_radius: self.serving_radius,
        }
    }

    pub fn train_seed(&self) -> u64 {
        self.data_seed
    }

    pub fn test_seed(&self) -> u64 {
        self.data_seed.wrapping_add(1)
    }

    /// Writes `config.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.join("config.json"), text.as_bytes())?;
        Ok(())
    }
}
