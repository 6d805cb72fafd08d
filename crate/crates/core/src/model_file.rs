//! JSON persistence for identified models.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{CenteringOffsets, ChannelNames};
use crate::error::{Error, Result};
use crate::library::LibrarySpec;
use crate::regression::CoefficientMatrix;
use crate::simulate::SindyModel;

pub const MODEL_FORMAT: &str = "esindy-model";
pub const MODEL_VERSION: u32 = 1;

/// Nonzero coefficient `(row, column, value)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet(pub usize, pub usize, pub f64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub states: usize,
    pub controls: usize,
    pub exogenous: usize,
    pub embedded_states: usize,
    pub features: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64, method: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            method: method.into(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub sigma_x: usize,
    pub dimensions: Dimensions,
    pub channels: ChannelNames,
    pub sample_period: f64,
    pub offsets: CenteringOffsets,
    /// Largest absolute training value per state, sets the divergence bound.
    pub state_scale: Vec<f64>,
    pub library: LibrarySpec,
    /// Row-major nonzero entries of the coefficient matrix.
    pub coefficients: Vec<Triplet>,
    /// One readable update equation per raw state.
    pub equations: Vec<String>,
    pub provenance: Provenance,
}

/// `name[t+1] = c0 + c1*term1 + ...` for each raw state row.
pub fn equations(model: &SindyModel, names: &ChannelNames) -> Vec<String> {
    let n = model.raw_state_dim();
    let terms = model.spec().term_names(Some(n));
    let xi = model.coefficients().xi();
    (0..n)
        .map(|r| {
            let rhs: Vec<String> = (0..xi.ncols())
                .filter(|&c| xi[(r, c)] != 0.0)
                .map(|c| {
                    if terms[c] == "1" {
                        format!("{:e}", xi[(r, c)])
                    } else {
                        format!("{:e}*{}", xi[(r, c)], terms[c])
                    }
                })
                .collect();
            let rhs = if rhs.is_empty() {
                "0".to_string()
            } else {
                rhs.join(" + ")
            };
            format!("{}[t+1] = {rhs}", names.states.get(r).map_or("x", String::as_str))
        })
        .collect()
}

impl ModelFile {
    pub fn from_model(model: &SindyModel, channels: &ChannelNames, provenance: Provenance) -> Result<Self> {
        if channels.states.len() != model.raw_state_dim()
            || channels.controls.len() != model.control_dim()
            || channels.exogenous.len() != model.exogenous_dim()
        {
            return Err(Error::Dimension("channel names do not match the model".into()));
        }
        let xi = model.coefficients().xi();
        let mut coefficients = Vec::with_capacity(model.coefficients().support_count());
        for r in 0..xi.nrows() {
            for c in 0..xi.ncols() {
                if xi[(r, c)] != 0.0 {
                    coefficients.push(Triplet(r, c, xi[(r, c)]));
                }
            }
        }
        Ok(Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            sigma_x: model.sigma_x(),
            dimensions: Dimensions {
                states: model.raw_state_dim(),
                controls: model.control_dim(),
                exogenous: model.exogenous_dim(),
                embedded_states: model.embedded_dim(),
                features: model.spec().len(),
            },
            channels: channels.clone(),
            sample_period: model.sample_period(),
            offsets: model.offsets().clone(),
            state_scale: model.state_scale().to_vec(),
            library: model.spec().clone(),
            coefficients,
            equations: equations(model, channels),
            provenance,
        })
    }

    pub fn to_model(&self) -> Result<SindyModel> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported model file '{}' version {} (expected '{MODEL_FORMAT}' version {MODEL_VERSION})",
                self.format, self.version
            )));
        }
        let d = &self.dimensions;
        if self.library.len() != d.features
            || self.library.state_dim() != d.embedded_states
            || d.embedded_states != d.states * (self.sigma_x + 1)
            || self.library.control_dim() != d.controls
            || self.library.exogenous_dim() != d.exogenous
            || self.channels.states.len() != d.states
            || self.channels.controls.len() != d.controls
            || self.channels.exogenous.len() != d.exogenous
        {
            return Err(Error::Dimension("model file dimensions are inconsistent".into()));
        }
        let mut xi = DMatrix::zeros(d.embedded_states, d.features);
        for &Triplet(r, c, v) in &self.coefficients {
            if r >= d.embedded_states || c >= d.features || !v.is_finite() {
                return Err(Error::Dimension(format!("invalid coefficient entry ({r}, {c}, {v})")));
            }
            xi[(r, c)] = v;
        }
        SindyModel::new(
            self.library.clone(),
            CoefficientMatrix::new(xi, self.library.fingerprint()),
            self.sigma_x,
            self.offsets.clone(),
            self.sample_period,
            self.state_scale.clone(),
        )
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model file serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{basic_fit, IdentificationProblem, LibrarySettings};
    use crate::plants::{generate, surrogate_airpath, ExcitationKind};
    use crate::regression::StlsConfig;
    use crate::simulate::predict_multi_step;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fitted() -> (SindyModel, ChannelNames) {
        let ts = generate(&surrogate_airpath(), ExcitationKind::Steps, 400, 2).unwrap();
        let problem = IdentificationProblem::from_series(&ts, None, &LibrarySettings::default()).unwrap();
        (
            basic_fit(&problem, &StlsConfig::with_lambda(1.0)).unwrap(),
            ts.names().clone(),
        )
    }

    #[test]
    fn round_trip_predicts_bit_exactly() {
        let (model, names) = fitted();
        let file = ModelFile::from_model(&model, &names, Provenance::new("abc", 1, "basic")).unwrap();
        let loaded = ModelFile::from_json(&file.to_json()).unwrap().to_model().unwrap();
        assert_eq!(loaded, model);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let mut draw =
                |r: usize, c: usize, scale: f64| DMatrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0));
            let window = draw(2, 2, 1000.0);
            let u = draw(2, 5, 40.0);
            let d = draw(2, 5, 20.0);
            let a = predict_multi_step(&model, &window, &u, &d).unwrap();
            let b = predict_multi_step(&loaded, &window, &u, &d).unwrap();
            assert_eq!(a.predicted, b.predicted);
        }
    }

    #[test]
    fn sparse_triplets_only_hold_nonzeros() {
        let (model, names) = fitted();
        let file = ModelFile::from_model(&model, &names, Provenance::new("", 0, "basic")).unwrap();
        assert_eq!(file.coefficients.len(), model.coefficients().support_count());
        assert!(file.coefficients.iter().all(|t| t.2 != 0.0));
        assert_eq!(file.equations.len(), 2);
        assert!(file.equations[0].starts_with("boost_pressure[t+1] = "));
    }

    #[test]
    fn rejects_bad_files() {
        let (model, names) = fitted();
        let good = ModelFile::from_model(&model, &names, Provenance::new("", 0, "basic")).unwrap();
        let mut v = good.clone();
        v.version = 99;
        assert!(matches!(v.to_model(), Err(Error::Config(_))));
        let mut oob = good.clone();
        oob.coefficients.push(Triplet(0, 10_000, 1.0));
        assert!(matches!(oob.to_model(), Err(Error::Dimension(_))));
        let mut dims = good.clone();
        dims.dimensions.states = 3;
        assert!(dims.to_model().is_err());
        assert!(ModelFile::from_json("{\"format\": 1}").is_err());
        // library terms are validated on load
        let tampered = good.to_json().replacen("\"index\": 0", "\"index\": 99", 1);
        assert!(ModelFile::from_json(&tampered).is_err());
    }
}
