//! Declarative run configuration (TOML) shared by the CLI subcommands.
//!
//! ```toml
//! seed = 7
//! method = "proposed"          # basic | e-sindy | proposed
//!
//! [data]
//! source = "plant"             # plant | file
//! plant = "surrogate-airpath"
//! horizon = 3000
//! excitation = "steps"         # steps | filtered-random
//! # file = "train.csv"         # with source = "file"
//! # validation_file = "val.csv"
//!
//! [schema]                     # column mapping for CSV input
//! states = ["y1", "y2"]
//! controls = ["u1", "u2"]
//! exogenous = ["d1", "d2"]
//! sample_period = 0.1
//!
//! [library]
//! sigma_x = 1
//! degree = 2
//! include_sine = false
//! center = true
//!
//! [stls]                       # used by method = "basic"
//! lambda = 30.0
//!
//! [ensemble]                   # see EnsembleConfig for every key
//! target_elites = 50
//! r2_gate = 0.9
//!
//! [noise]
//! eta = 0.0
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Every table and key is optional. Relative paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Schema;
use crate::ensemble::{EnsembleConfig, LibrarySettings};
use crate::error::{Error, Result};
use crate::plants::ExcitationKind;
use crate::regression::StlsConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Single full-library STLS fit.
    Basic,
    /// Mean over plain library bags, no gate or clustering.
    ESindy,
    /// Gated bagging, clustering and best-class selection.
    #[default]
    Proposed,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Basic => "basic",
            Method::ESindy => "e-sindy",
            Method::Proposed => "proposed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Plant,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub plant: String,
    pub horizon: usize,
    pub excitation: ExcitationKind,
    pub file: Option<PathBuf>,
    pub validation_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Plant,
            plant: "surrogate-airpath".into(),
            horizon: 3000,
            excitation: ExcitationKind::Steps,
            file: None,
            validation_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub data: DataConfig,
    pub schema: Option<Schema>,
    pub library: LibrarySettings,
    pub stls: StlsConfig,
    pub ensemble: EnsembleConfig,
    pub noise: NoiseConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Proposed,
            data: DataConfig::default(),
            schema: None,
            library: LibrarySettings::default(),
            stls: StlsConfig::default(),
            ensemble: EnsembleConfig::default(),
            noise: NoiseConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Independent sub-seeds derived from the single run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPurpose {
    Excitation = 1,
    Noise = 2,
    Ensemble = 3,
}

pub fn derive_seed(seed: u64, purpose: SeedPurpose, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | index);
    rng.next_u64()
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(f) = cfg.data.file.as_mut() {
            resolve(f);
        }
        if let Some(f) = cfg.data.validation_file.as_mut() {
            resolve(f);
        }
        resolve(&mut cfg.output.dir);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.stls.validate()?;
        self.ensemble.validate()?;
        if !(self.noise.eta >= 0.0 && self.noise.eta.is_finite()) {
            return Err(Error::Config(format!("noise eta must be >= 0, got {}", self.noise.eta)));
        }
        match self.data.source {
            DataSource::File => {
                if self.data.file.is_none() {
                    return Err(Error::Config("data.source = \"file\" needs data.file".into()));
                }
                if self.schema.is_none() {
                    return Err(Error::Config("data.source = \"file\" needs a [schema] table".into()));
                }
            }
            DataSource::Plant => {
                if self.data.horizon < self.library.sigma_x + 2 {
                    return Err(Error::Config("data.horizon is too short for sigma_x".into()));
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form. Output location and the
    /// threading switch do not change results and are excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = OutputConfig::default();
        canonical.ensemble.parallel = true;
        let bytes = serde_json::to_vec(&canonical).expect("run config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Ensemble settings with the seed taken from the run seed.
    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            seed: derive_seed(self.seed, SeedPurpose::Ensemble, 0),
            ..self.ensemble.clone()
        }
    }
}
