//! Synthetic discrete-time plants with known sparse update rules, used to
//! generate identification data with a ground truth.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CenteringOffsets, ChannelNames, TimeSeries};
use crate::error::{Error, Result};
use crate::library::{FeatureTerm, LibrarySpec, Operand};

/// Signal a plant term can depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    One,
    /// State channel `index` delayed by `lag` samples.
    State {
        index: usize,
        lag: usize,
    },
    Control(usize),
    Exogenous(usize),
}

use Factor::{Control as U, Exogenous as D, One};

const fn x(index: usize) -> Factor {
    Factor::State { index, lag: 0 }
}

const fn x_lag(index: usize, lag: usize) -> Factor {
    Factor::State { index, lag }
}

/// `coefficient * a * b`; linear terms use `b = One`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantTerm {
    pub coefficient: f64,
    pub a: Factor,
    pub b: Factor,
}

const fn term(coefficient: f64, a: Factor, b: Factor) -> PlantTerm {
    PlantTerm { coefficient, a, b }
}

/// Per-channel operating range and default excitation hold time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRange {
    pub lo: f64,
    pub hi: f64,
    pub hold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantSpec {
    pub name: &'static str,
    pub description: &'static str,
    pub names: ChannelNames,
    /// One sum of terms per state channel.
    pub rows: Vec<Vec<PlantTerm>>,
    pub state_ranges: Vec<(f64, f64)>,
    pub control_ranges: Vec<ChannelRange>,
    pub exogenous_ranges: Vec<ChannelRange>,
    pub sample_period: f64,
}

impl PlantSpec {
    pub fn state_dim(&self) -> usize {
        self.rows.len()
    }

    pub fn control_dim(&self) -> usize {
        self.control_ranges.len()
    }

    pub fn exogenous_dim(&self) -> usize {
        self.exogenous_ranges.len()
    }

    /// Largest state delay used by the update rule.
    pub fn max_lag(&self) -> usize {
        self.rows
            .iter()
            .flatten()
            .flat_map(|t| [t.a, t.b])
            .map(|f| match f {
                Factor::State { lag, .. } => lag,
                _ => 0,
            })
            .max()
            .unwrap_or(0)
    }

    /// One step of the update rule. `history[k]` is the state `k` samples ago.
    pub fn step(&self, history: &[Vec<f64>], u: &[f64], d: &[f64]) -> Vec<f64> {
        let value = |f: Factor| match f {
            One => 1.0,
            Factor::State { index, lag } => history[lag][index],
            U(i) => u[i],
            D(i) => d[i],
        };
        self.rows
            .iter()
            .map(|row| row.iter().map(|t| t.coefficient * value(t.a) * value(t.b)).sum())
            .collect()
    }

    /// Warnings for initial states outside the operating range.
    pub fn check_initial_state(&self, x0: &[f64]) -> Vec<String> {
        x0.iter()
            .zip(&self.state_ranges)
            .zip(&self.names.states)
            .filter(|((v, (lo, hi)), _)| **v < *lo || **v > *hi)
            .map(|((v, (lo, hi)), name)| format!("initial {name} = {v} is outside [{lo}, {hi}]"))
            .collect()
    }

    /// The update rule as a coefficient matrix over `library`, for data that
    /// was centered with `offsets`. Rows past the raw block are the exact
    /// shift of the delay embedding.
    pub fn true_coefficients(&self, library: &LibrarySpec, offsets: &CenteringOffsets) -> Result<DMatrix<f64>> {
        let n = self.state_dim();
        let n_e = library.state_dim();
        if !n_e.is_multiple_of(n) || n_e / n <= self.max_lag() {
            return Err(Error::Dimension(format!(
                "library state dimension {n_e} cannot hold {n} states with lag {}",
                self.max_lag()
            )));
        }
        if library.control_dim() != self.control_dim() || library.exogenous_dim() != self.exogenous_dim() {
            return Err(Error::Dimension("library inputs do not match the plant".into()));
        }
        let operand = |f: Factor| -> Option<Operand> {
            match f {
                One => None,
                Factor::State { index, lag } => Some(Operand::state(lag * n + index)),
                U(i) => Some(Operand::control(i)),
                D(i) => Some(Operand::exogenous(i)),
            }
        };
        let mean = |f: Factor| match f {
            One => 1.0,
            Factor::State { index, .. } => offsets.state_means[index],
            U(i) => offsets.control_means[i],
            D(i) => offsets.exogenous_means[i],
        };
        let mut xi = DMatrix::zeros(n_e, library.len());
        let add = |row: usize, ops: &[Operand], c: f64, xi: &mut DMatrix<f64>| -> Result<()> {
            let t = match ops {
                [] => FeatureTerm::constant(),
                [a] => FeatureTerm::linear(*a),
                [a, b] => FeatureTerm::product(*a, *b),
                _ => unreachable!(),
            };
            let col = library
                .position(&t)
                .ok_or_else(|| Error::Dimension(format!("term {} is not in the library", t.name(Some(n)))))?;
            xi[(row, col)] += c;
            Ok(())
        };
        for (row, terms) in self.rows.iter().enumerate() {
            for t in terms {
                let (oa, ob) = (operand(t.a), operand(t.b));
                let (ma, mb) = (mean(t.a), mean(t.b));
                // c (a~ + ma)(b~ + mb)
                match (oa, ob) {
                    (None, None) => add(row, &[], t.coefficient, &mut xi)?,
                    (Some(a), None) | (None, Some(a)) => {
                        add(row, &[a], t.coefficient, &mut xi)?;
                        add(row, &[], t.coefficient * if oa.is_some() { ma } else { mb }, &mut xi)?;
                    }
                    (Some(a), Some(b)) => {
                        add(row, &[a, b], t.coefficient, &mut xi)?;
                        add(row, &[a], t.coefficient * mb, &mut xi)?;
                        add(row, &[b], t.coefficient * ma, &mut xi)?;
                        add(row, &[], t.coefficient * ma * mb, &mut xi)?;
                    }
                }
            }
            add(row, &[], -offsets.state_means[row], &mut xi)?;
        }
        for r in n..n_e {
            add(r, &[Operand::state(r - n)], 1.0, &mut xi)?;
        }
        Ok(xi)
    }
}

/// Exact rollout; the state before `x0` is taken equal to `x0`. Returns as
/// many samples as there are input columns.
pub fn simulate_plant(
    spec: &PlantSpec,
    x0: &[f64],
    controls: &DMatrix<f64>,
    exogenous: &DMatrix<f64>,
) -> Result<TimeSeries> {
    let n = spec.state_dim();
    if x0.len() != n || controls.nrows() != spec.control_dim() || exogenous.nrows() != spec.exogenous_dim() {
        return Err(Error::Dimension(format!(
            "plant '{}' expects {n} states, {} controls, {} exogenous; got {}, {}, {}",
            spec.name,
            spec.control_dim(),
            spec.exogenous_dim(),
            x0.len(),
            controls.nrows(),
            exogenous.nrows()
        )));
    }
    let h = controls.ncols();
    if exogenous.ncols() != h {
        return Err(Error::Dimension(
            "control and exogenous records differ in length".into(),
        ));
    }
    let mut history = vec![x0.to_vec(); spec.max_lag() + 1];
    let mut states = DMatrix::zeros(n, h);
    if h > 0 {
        states.column_mut(0).copy_from_slice(x0);
    }
    for t in 0..h.saturating_sub(1) {
        let next = spec.step(&history, controls.column(t).as_slice(), exogenous.column(t).as_slice());
        states.column_mut(t + 1).copy_from_slice(&next);
        history.pop();
        history.insert(0, next);
    }
    TimeSeries::new(
        states,
        controls.clone(),
        exogenous.clone(),
        spec.sample_period,
        spec.names.clone(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExcitationKind {
    /// Piecewise-constant levels drawn uniformly, each held `hold` samples.
    Steps,
    /// Uniform noise through a first-order low-pass with time constant `hold`.
    FilteredRandom,
}

/// One row per channel, `horizon` columns. Channels are drawn in order from a
/// single stream seeded with `seed`.
pub fn excitation_signal(
    kind: ExcitationKind,
    channels: &[ChannelRange],
    seed: u64,
    horizon: usize,
) -> Result<DMatrix<f64>> {
    if horizon == 0 {
        return Err(Error::Config("excitation horizon must be at least 1".into()));
    }
    for c in channels {
        if c.hold == 0 {
            return Err(Error::Config("hold_samples must be at least 1".into()));
        }
        if !(c.lo.is_finite() && c.hi.is_finite() && c.lo < c.hi) {
            return Err(Error::Config(format!("empty excitation range [{}, {}]", c.lo, c.hi)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(channels.len(), horizon);
    for (r, c) in channels.iter().enumerate() {
        match kind {
            ExcitationKind::Steps => {
                let mut level = 0.0;
                for t in 0..horizon {
                    if t % c.hold == 0 {
                        level = rng.random_range(c.lo..c.hi);
                    }
                    out[(r, t)] = level;
                }
            }
            ExcitationKind::FilteredRandom => {
                let alpha = 1.0 / c.hold as f64;
                let mut y = rng.random_range(c.lo..c.hi);
                for t in 0..horizon {
                    let v = rng.random_range(c.lo..c.hi);
                    y += alpha * (v - y);
                    out[(r, t)] = y.clamp(c.lo, c.hi);
                }
            }
        }
    }
    Ok(out)
}

/// Excites every input with its default range and hold, then simulates from
/// the zero state.
pub fn generate(spec: &PlantSpec, kind: ExcitationKind, horizon: usize, seed: u64) -> Result<TimeSeries> {
    let channels: Vec<ChannelRange> = spec
        .control_ranges
        .iter()
        .chain(&spec.exogenous_ranges)
        .cloned()
        .collect();
    let inputs = excitation_signal(kind, &channels, seed, horizon)?;
    let l = spec.control_dim();
    let controls = inputs.rows(0, l).into_owned();
    let exogenous = inputs.rows(l, spec.exogenous_dim()).into_owned();
    simulate_plant(spec, &vec![0.0; spec.state_dim()], &controls, &exogenous)
}

fn names(states: &[&str], controls: &[&str], exogenous: &[&str]) -> ChannelNames {
    let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
    ChannelNames {
        states: own(states),
        controls: own(controls),
        exogenous: own(exogenous),
    }
}

fn range(lo: f64, hi: f64, hold: usize) -> ChannelRange {
    ChannelRange { lo, hi, hold }
}

/// Two-output airpath stand-in: boost pressure deviation with second-order
/// dynamics and EGR ratio deviation, driven by two actuators and two
/// measured disturbances, with bilinear coupling. Linearized spectral radius
/// at the origin is about 0.94.
pub fn surrogate_airpath() -> PlantSpec {
    PlantSpec {
        name: "surrogate-airpath",
        description: "2 states (delay 1), 2 controls, 2 exogenous inputs, bilinear coupling",
        names: names(
            &["boost_pressure", "egr_ratio"],
            &["vgt_position", "egr_valve"],
            &["fuel_injection", "engine_speed"],
        ),
        rows: vec![
            vec![
                term(1.65, x(0), One),
                term(-0.665, x_lag(0, 1), One),
                term(-0.6, x(1), One),
                term(2.0, U(0), One),
                term(-1.0, U(1), One),
                term(3.0, D(0), One),
                term(0.08, D(1), One),
                term(0.0002, x(0), U(0)),
                term(0.004, D(0), D(1)),
                term(10.0, One, One),
            ],
            vec![
                term(0.9, x(1), One),
                term(0.004, x(0), One),
                term(-1.5, U(0), One),
                term(4.0, U(1), One),
                term(1.0, D(0), One),
                term(-0.001, x(1), U(1)),
                term(0.05, U(1), D(0)),
                term(-5.0, One, One),
            ],
        ],
        state_ranges: vec![(-1e5, 1e5), (-5e3, 5e3)],
        control_ranges: vec![range(-40.0, 40.0, 40), range(-40.0, 40.0, 60)],
        exogenous_ranges: vec![range(-20.0, 20.0, 80), range(-600.0, 600.0, 100)],
        sample_period: 0.1,
    }
}

/// Scalar first-order lag `x+ = 0.9 x + 0.5 u`.
pub fn linear_siso() -> PlantSpec {
    PlantSpec {
        name: "linear-siso",
        description: "1 state, 1 control, first-order lag",
        names: names(&["y"], &["u"], &[]),
        rows: vec![vec![term(0.9, x(0), One), term(0.5, U(0), One)]],
        state_ranges: vec![(-10.0, 10.0)],
        control_ranges: vec![range(-1.0, 1.0, 20)],
        exogenous_ranges: vec![],
        sample_period: 0.1,
    }
}

pub fn available_plants() -> Vec<&'static str> {
    vec!["surrogate-airpath", "linear-siso"]
}

pub fn plant_by_name(name: &str) -> Result<PlantSpec> {
    match name {
        "surrogate-airpath" => Ok(surrogate_airpath()),
        "linear-siso" => Ok(linear_siso()),
        _ => Err(Error::UnknownPlant {
            name: name.to_string(),
            available: available_plants().join(", "),
        }),
    }
}
