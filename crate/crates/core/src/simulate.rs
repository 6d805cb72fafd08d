//! One-step and closed-loop (multi-step) prediction of identified models,
//! scored with the coefficient of determination.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{embed_delay, CenteringOffsets, SnapshotSet, TimeSeries};
use crate::error::{Error, Result};
use crate::library::LibrarySpec;
use crate::regression::CoefficientMatrix;

/// Default rollout abort threshold, as a multiple of each channel's largest
/// absolute training value.
pub const DEFAULT_DIVERGENCE_FACTOR: f64 = 1e6;

/// Identified difference equation `x_m(t+1) = Ξ ϑ(x_m(t), u(t), d(t))`,
/// operating in centered coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SindyModel {
    spec: LibrarySpec,
    coefficients: CoefficientMatrix,
    sigma_x: usize,
    raw_state_dim: usize,
    offsets: CenteringOffsets,
    sample_period: f64,
    /// Largest absolute training value per raw state channel.
    state_scale: Vec<f64>,
}

impl SindyModel {
    pub fn new(
        spec: LibrarySpec,
        coefficients: CoefficientMatrix,
        sigma_x: usize,
        offsets: CenteringOffsets,
        sample_period: f64,
        state_scale: Vec<f64>,
    ) -> Result<Self> {
        let n = offsets.state_means.len();
        let n_e = n * (sigma_x + 1);
        if spec.state_dim() != n_e {
            return Err(Error::Dimension(format!(
                "library state dimension {} != n*(sigma_x+1) = {n_e}",
                spec.state_dim()
            )));
        }
        if coefficients.nrows() != n_e || coefficients.ncols() != spec.len() {
            return Err(Error::Dimension(format!(
                "coefficient matrix is {}x{}, expected {n_e}x{}",
                coefficients.nrows(),
                coefficients.ncols(),
                spec.len()
            )));
        }
        let fp = coefficients.library_fingerprint();
        if !fp.is_empty() && fp != spec.fingerprint() {
            return Err(Error::Dimension(
                "coefficients were fit against a different library".into(),
            ));
        }
        if offsets.control_means.len() != spec.control_dim() || offsets.exogenous_means.len() != spec.exogenous_dim() {
            return Err(Error::Dimension("centering offsets do not match library inputs".into()));
        }
        if state_scale.len() != n {
            return Err(Error::Dimension("state_scale needs one entry per state channel".into()));
        }
        Ok(Self {
            spec,
            coefficients,
            sigma_x,
            raw_state_dim: n,
            offsets,
            sample_period,
            state_scale,
        })
    }

    pub fn spec(&self) -> &LibrarySpec {
        &self.spec
    }

    pub fn coefficients(&self) -> &CoefficientMatrix {
        &self.coefficients
    }

    pub fn sigma_x(&self) -> usize {
        self.sigma_x
    }

    pub fn raw_state_dim(&self) -> usize {
        self.raw_state_dim
    }

    pub fn embedded_dim(&self) -> usize {
        self.spec.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.spec.control_dim()
    }

    pub fn exogenous_dim(&self) -> usize {
        self.spec.exogenous_dim()
    }

    pub fn offsets(&self) -> &CenteringOffsets {
        &self.offsets
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn state_scale(&self) -> &[f64] {
        &self.state_scale
    }

    /// Replaces the coefficients, keeping everything else.
    pub fn with_coefficients(&self, coefficients: CoefficientMatrix) -> Result<Self> {
        Self::new(
            self.spec.clone(),
            coefficients,
            self.sigma_x,
            self.offsets.clone(),
            self.sample_period,
            self.state_scale.clone(),
        )
    }

    fn divergence_bounds(&self, factor: f64) -> Vec<f64> {
        self.state_scale
            .iter()
            .map(|s| factor * if *s > 0.0 && s.is_finite() { *s } else { 1.0 })
            .collect()
    }
}

/// Row-major copy of `Ξ` plus scratch space for repeated steps.
struct Stepper<'a> {
    spec: &'a LibrarySpec,
    xi: Vec<f64>,
    p: usize,
    features: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a SindyModel) -> Self {
        let xi = model.coefficients.xi();
        let p = xi.ncols();
        let mut rows = Vec::with_capacity(xi.len());
        for r in 0..xi.nrows() {
            rows.extend(xi.row(r).iter());
        }
        Self {
            spec: &model.spec,
            xi: rows,
            p,
            features: vec![0.0; p],
        }
    }

    /// Writes `Ξ ϑ(x_m, u, d)` into `out`.
    #[inline]
    fn step(&mut self, x_m: &[f64], u: &[f64], d: &[f64], out: &mut [f64]) {
        self.spec.evaluate_row_into(x_m, u, d, &mut self.features);
        for (r, o) in out.iter_mut().enumerate() {
            let coefs = &self.xi[r * self.p..(r + 1) * self.p];
            let mut acc = 0.0;
            for (c, f) in coefs.iter().zip(&self.features) {
                acc += c * f;
            }
            *o = acc;
        }
    }
}

/// Output of a prediction run. `predicted` holds the raw-state block
/// (`n x horizon`, fewer columns if a rollout was aborted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub predicted: DMatrix<f64>,
    /// Per-output R²; empty if the run was not scored against a truth record.
    pub r2_per_output: Vec<f64>,
    pub diverged: bool,
    pub diverged_at: Option<usize>,
    /// Some prediction was NaN or infinite.
    pub non_finite: bool,
    /// Number of steps requested.
    pub horizon: usize,
}

impl PredictionReport {
    /// Smallest per-output R²; `-inf` when unscored or any entry is NaN.
    pub fn min_r2(&self) -> f64 {
        if self.r2_per_output.is_empty() || self.r2_per_output.iter().any(|v| v.is_nan()) {
            return f64::NEG_INFINITY;
        }
        self.r2_per_output.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Predictions shifted back to the original (uncentered) units.
    pub fn in_original_units(&self, offsets: &CenteringOffsets) -> DMatrix<f64> {
        offsets.restore_states(&self.predicted)
    }

    /// Predicted trajectory over the full horizon, holding the last value
    /// (clipped to the divergence bound) after an aborted rollout.
    fn padded(&self, bounds: &[f64]) -> DMatrix<f64> {
        let have = self.predicted.ncols();
        if have == self.horizon {
            return self.predicted.clone();
        }
        let n = self.predicted.nrows();
        DMatrix::from_fn(n, self.horizon, |r, c| {
            if c + 1 < have {
                self.predicted[(r, c)]
            } else {
                let last = self.predicted[(r, have - 1)];
                let b = bounds[r];
                if last.is_nan() {
                    b
                } else {
                    last.clamp(-b, b)
                }
            }
        })
    }

    fn score(&mut self, truth: &DMatrix<f64>, bounds: &[f64]) -> Result<()> {
        if truth.ncols() != self.horizon || truth.nrows() != self.predicted.nrows() {
            return Err(Error::Dimension(format!(
                "truth is {}x{}, predictions are {}x{}",
                truth.nrows(),
                truth.ncols(),
                self.predicted.nrows(),
                self.horizon
            )));
        }
        let full = self.padded(bounds);
        self.r2_per_output = (0..truth.nrows())
            .map(|r| {
                let t: Vec<f64> = truth.row(r).iter().copied().collect();
                let p: Vec<f64> = full.row(r).iter().copied().collect();
                r_squared(&t, &p)
            })
            .collect::<Result<_>>()?;
        Ok(())
    }
}

/// `1 - Σ(y - ŷ)² / Σ(y - ȳ)²`.
pub fn r_squared(truth: &[f64], prediction: &[f64]) -> Result<f64> {
    if truth.len() != prediction.len() {
        return Err(Error::Dimension(format!(
            "truth has {} samples, prediction {}",
            truth.len(),
            prediction.len()
        )));
    }
    if truth.len() < 2 {
        return Err(Error::InsufficientData {
            what: "R²".into(),
            required: 2,
            available: truth.len(),
        });
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedR2);
    }
    let ss_res: f64 = truth.iter().zip(prediction).map(|(y, p)| (y - p).powi(2)).sum();
    if ss_res.is_nan() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(1.0 - ss_res / ss_tot)
}

fn check_snapshot(model: &SindyModel, snap: &SnapshotSet) -> Result<()> {
    if snap.delay_order != model.sigma_x
        || snap.raw_state_dim != model.raw_state_dim
        || snap.gamma.nrows() != model.control_dim()
        || snap.d.nrows() != model.exogenous_dim()
    {
        return Err(Error::Dimension(format!(
            "snapshots (n={}, sigma_x={}, l={}, q={}) do not match model (n={}, sigma_x={}, l={}, q={})",
            snap.raw_state_dim,
            snap.delay_order,
            snap.gamma.nrows(),
            snap.d.nrows(),
            model.raw_state_dim,
            model.sigma_x,
            model.control_dim(),
            model.exogenous_dim()
        )));
    }
    Ok(())
}

/// Predicts every snapshot column from the measured embedded state and
/// scores the raw-state block against the measured next states.
pub fn predict_one_step(model: &SindyModel, snap: &SnapshotSet) -> Result<PredictionReport> {
    check_snapshot(model, snap)?;
    let n = model.raw_state_dim;
    let m = snap.len();
    let mut stepper = Stepper::new(model);
    let mut out = vec![0.0; model.embedded_dim()];
    let mut predicted = DMatrix::zeros(n, m);
    let mut non_finite = false;
    for j in 0..m {
        stepper.step(
            snap.x.column(j).as_slice(),
            snap.gamma.column(j).as_slice(),
            snap.d.column(j).as_slice(),
            &mut out,
        );
        non_finite |= out.iter().any(|v| !v.is_finite());
        predicted.column_mut(j).copy_from_slice(&out[..n]);
    }
    let mut report = PredictionReport {
        predicted,
        r2_per_output: Vec::new(),
        diverged: false,
        diverged_at: None,
        non_finite,
        horizon: m,
    };
    let truth = snap.x_plus.rows(0, n).into_owned();
    report.score(&truth, &model.divergence_bounds(DEFAULT_DIVERGENCE_FACTOR))?;
    Ok(report)
}

/// Closed-loop rollout from measured initial states.
///
/// `initial_window` is `n x (sigma_x + 1)` in chronological order (last
/// column is the newest sample). Step `k` consumes column `k` of `controls`
/// and `exogenous` and predicts the state one sample later.
pub fn predict_multi_step(
    model: &SindyModel,
    initial_window: &DMatrix<f64>,
    controls: &DMatrix<f64>,
    exogenous: &DMatrix<f64>,
) -> Result<PredictionReport> {
    predict_multi_step_with_bound(model, initial_window, controls, exogenous, DEFAULT_DIVERGENCE_FACTOR)
}

/// [`predict_multi_step`] with an explicit divergence factor.
pub fn predict_multi_step_with_bound(
    model: &SindyModel,
    initial_window: &DMatrix<f64>,
    controls: &DMatrix<f64>,
    exogenous: &DMatrix<f64>,
    divergence_factor: f64,
) -> Result<PredictionReport> {
    let n = model.raw_state_dim;
    let sigma = model.sigma_x;
    if initial_window.shape() != (n, sigma + 1) {
        return Err(Error::Dimension(format!(
            "initial window must be {n}x{}, got {}x{}",
            sigma + 1,
            initial_window.nrows(),
            initial_window.ncols()
        )));
    }
    let horizon = controls.ncols();
    if horizon == 0 {
        return Err(Error::Dimension("horizon must be at least 1".into()));
    }
    if controls.nrows() != model.control_dim() || exogenous.nrows() != model.exogenous_dim() {
        return Err(Error::Dimension(format!(
            "inputs have {} controls and {} exogenous channels, model expects {} and {}",
            controls.nrows(),
            exogenous.nrows(),
            model.control_dim(),
            model.exogenous_dim()
        )));
    }
    if exogenous.ncols() != horizon {
        return Err(Error::Dimension(format!(
            "horizon {horizon} exceeds exogenous record length {}",
            exogenous.ncols()
        )));
    }
    let bounds = model.divergence_bounds(divergence_factor);
    let n_e = model.embedded_dim();
    let mut x_m: Vec<f64> = (0..n_e).map(|r| initial_window[(r % n, sigma - r / n)]).collect();
    let mut next = vec![0.0; n_e];
    let mut stepper = Stepper::new(model);
    let mut predicted = DMatrix::zeros(n, horizon);
    let mut halted = None;
    let mut non_finite = false;
    for k in 0..horizon {
        stepper.step(
            &x_m,
            controls.column(k).as_slice(),
            exogenous.column(k).as_slice(),
            &mut next,
        );
        predicted.column_mut(k).copy_from_slice(&next[..n]);
        let bad = next.iter().any(|v| !v.is_finite());
        non_finite |= bad;
        if bad || next[..n].iter().zip(&bounds).any(|(v, b)| v.abs() > *b) {
            halted = Some(k);
            break;
        }
        std::mem::swap(&mut x_m, &mut next);
    }
    if let Some(k) = halted {
        predicted = predicted.columns(0, k + 1).into_owned();
    }
    Ok(PredictionReport {
        predicted,
        r2_per_output: Vec::new(),
        diverged: halted.is_some(),
        diverged_at: halted,
        non_finite,
        horizon,
    })
}

/// Initial states, input record and measured states for a multi-step test.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub initial_window: DMatrix<f64>,
    pub controls: DMatrix<f64>,
    pub exogenous: DMatrix<f64>,
    pub truth: DMatrix<f64>,
}

impl Scenario {
    /// Uses the first `sigma_x + 1` samples as the initial window and the
    /// rest of the record as inputs and truth (horizon `m - sigma_x - 1`).
    pub fn from_series(ts: &TimeSeries, sigma_x: usize) -> Result<Self> {
        let m = ts.len();
        if m < sigma_x + 2 {
            return Err(Error::InsufficientData {
                what: format!("validation scenario with sigma_x = {sigma_x}"),
                required: sigma_x + 2,
                available: m,
            });
        }
        let h = m - sigma_x - 1;
        Ok(Self {
            initial_window: ts.states().columns(0, sigma_x + 1).into_owned(),
            controls: ts.controls().columns(sigma_x, h).into_owned(),
            exogenous: ts.exogenous().columns(sigma_x, h).into_owned(),
            truth: ts.states().columns(sigma_x + 1, h).into_owned(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.controls.ncols()
    }
}

/// Rolls the model out over the scenario and scores it against its truth.
pub fn simulate_scenario(model: &SindyModel, scenario: &Scenario) -> Result<PredictionReport> {
    simulate_scenario_with_bound(model, scenario, DEFAULT_DIVERGENCE_FACTOR)
}

pub fn simulate_scenario_with_bound(
    model: &SindyModel,
    scenario: &Scenario,
    divergence_factor: f64,
) -> Result<PredictionReport> {
    let mut report = predict_multi_step_with_bound(
        model,
        &scenario.initial_window,
        &scenario.controls,
        &scenario.exogenous,
        divergence_factor,
    )?;
    report.score(&scenario.truth, &model.divergence_bounds(divergence_factor))?;
    Ok(report)
}

/// One-step and closed-loop scores of a model on a record in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesEvaluation {
    pub one_step: PredictionReport,
    pub long_term: PredictionReport,
    /// The record shifted by the model's offsets.
    pub scenario: Scenario,
}

pub fn evaluate_series(model: &SindyModel, ts: &TimeSeries) -> Result<SeriesEvaluation> {
    let centered = model.offsets().apply(ts)?;
    let snap = embed_delay(&centered, model.sigma_x())?;
    let one_step = predict_one_step(model, &snap)?;
    let scenario = Scenario::from_series(&centered, model.sigma_x())?;
    let long_term = simulate_scenario(model, &scenario)?;
    Ok(SeriesEvaluation {
        one_step,
        long_term,
        scenario,
    })
}
