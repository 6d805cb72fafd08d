//! Time-series ingestion, centering, measurement-noise injection and
//! delay-embedded snapshot matrices.
//!
//! Matrices are channel-major: one row per channel, one column per sample.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel names of each signal block, in row order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelNames {
    pub states: Vec<String>,
    pub controls: Vec<String>,
    pub exogenous: Vec<String>,
}

impl ChannelNames {
    /// `y1.., u1.., d1..` names for the given block sizes.
    pub fn generic(n: usize, l: usize, q: usize) -> Self {
        let gen = |p: &str, k: usize| (1..=k).map(|i| format!("{p}{i}")).collect();
        Self {
            states: gen("y", n),
            controls: gen("u", l),
            exogenous: gen("d", q),
        }
    }

    fn all(&self) -> impl Iterator<Item = &String> {
        self.states.iter().chain(&self.controls).chain(&self.exogenous)
    }
}

/// Sampled states `x`, control inputs `u` and exogenous inputs `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    states: DMatrix<f64>,
    controls: DMatrix<f64>,
    exogenous: DMatrix<f64>,
    sample_period: f64,
    names: ChannelNames,
}

impl TimeSeries {
    pub fn new(
        states: DMatrix<f64>,
        controls: DMatrix<f64>,
        exogenous: DMatrix<f64>,
        sample_period: f64,
        names: ChannelNames,
    ) -> Result<Self> {
        let m = states.ncols();
        if controls.ncols() != m || exogenous.ncols() != m {
            return Err(Error::Dimension(format!(
                "blocks disagree on sample count: states {m}, controls {}, exogenous {}",
                controls.ncols(),
                exogenous.ncols()
            )));
        }
        if m < 2 {
            return Err(Error::InsufficientData {
                what: "time series".into(),
                required: 2,
                available: m,
            });
        }
        if !(sample_period > 0.0 && sample_period.is_finite()) {
            return Err(Error::Config(format!(
                "sample period must be positive, got {sample_period}"
            )));
        }
        if names.states.len() != states.nrows()
            || names.controls.len() != controls.nrows()
            || names.exogenous.len() != exogenous.nrows()
        {
            return Err(Error::Dimension(
                "channel name count does not match block row count".into(),
            ));
        }
        for (block, mat) in [("state", &states), ("control", &controls), ("exogenous", &exogenous)] {
            if let Some(pos) = mat.iter().position(|v| !v.is_finite()) {
                let (r, c) = (pos % mat.nrows(), pos / mat.nrows());
                return Err(Error::Numerical(format!(
                    "non-finite {block} value in channel {r} at sample {c}"
                )));
            }
        }
        Ok(Self {
            states,
            controls,
            exogenous,
            sample_period,
            names,
        })
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn controls(&self) -> &DMatrix<f64> {
        &self.controls
    }

    pub fn exogenous(&self) -> &DMatrix<f64> {
        &self.exogenous
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn names(&self) -> &ChannelNames {
        &self.names
    }

    pub fn state_dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.controls.nrows()
    }

    pub fn exogenous_dim(&self) -> usize {
        self.exogenous.nrows()
    }

    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples `[start, end)` of every block.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Dimension(format!(
                "slice {start}..{end} out of range for {} samples",
                self.len()
            )));
        }
        let w = end - start;
        Self::new(
            self.states.columns(start, w).into_owned(),
            self.controls.columns(start, w).into_owned(),
            self.exogenous.columns(start, w).into_owned(),
            self.sample_period,
            self.names.clone(),
        )
    }

    pub(crate) fn with_states(&self, states: DMatrix<f64>) -> Self {
        Self { states, ..self.clone() }
    }

    /// Writes `time` followed by every channel, one sample per row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["time".to_string()];
        header.extend(self.names.all().cloned());
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for j in 0..self.len() {
            row.clear();
            row.push(fmt_f64(j as f64 * self.sample_period));
            for mat in [&self.states, &self.controls, &self.exogenous] {
                row.extend(mat.column(j).iter().map(|v| fmt_f64(*v)));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Column-to-role mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub states: Vec<String>,
    #[serde(default)]
    pub controls: Vec<String>,
    #[serde(default)]
    pub exogenous: Vec<String>,
    #[serde(default = "default_sample_period")]
    pub sample_period: f64,
}

pub(crate) fn default_sample_period() -> f64 {
    0.1
}

impl Schema {
    pub fn new(states: &[&str], controls: &[&str], exogenous: &[&str], sample_period: f64) -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            states: own(states),
            controls: own(controls),
            exogenous: own(exogenous),
            sample_period,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::Schema("at least one state column is required".into()));
        }
        let mut seen = HashSet::new();
        for name in self.states.iter().chain(&self.controls).chain(&self.exogenous) {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("column '{name}' is mapped more than once")));
            }
        }
        Ok(())
    }
}

/// Reads a headered CSV and assigns columns to blocks per `schema`. Unmapped
/// columns (e.g. `time`) are ignored.
pub fn load_timeseries(path: &Path, schema: &Schema) -> Result<TimeSeries> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                _ => unreachable!(),
            },
            _ => Error::Csv(e),
        })?;
    let header = reader.headers()?.clone();
    let locate = |name: &String| -> Result<usize> {
        let hits: Vec<usize> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| *h == name)
            .map(|(i, _)| i)
            .collect();
        match hits.as_slice() {
            [i] => Ok(*i),
            [] => Err(Error::Schema(format!(
                "column '{name}' not found in {}",
                path.display()
            ))),
            _ => Err(Error::Schema(format!(
                "column '{name}' appears more than once in header"
            ))),
        }
    };
    let columns: Vec<Vec<usize>> = [&schema.states, &schema.controls, &schema.exogenous]
        .iter()
        .map(|names| names.iter().map(locate).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;

    let mut blocks: Vec<Vec<Vec<f64>>> = columns.iter().map(|cols| vec![Vec::new(); cols.len()]).collect();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        for (block, cols) in blocks.iter_mut().zip(&columns) {
            for (series, &c) in block.iter_mut().zip(cols) {
                let raw = record.get(c).unwrap_or("");
                let value: f64 = raw.parse().map_err(|_| Error::Parse {
                    row,
                    column: header[c].to_string(),
                    message: format!("'{raw}' is not a number"),
                })?;
                if !value.is_finite() {
                    return Err(Error::Parse {
                        row,
                        column: header[c].to_string(),
                        message: format!("non-finite value '{raw}'"),
                    });
                }
                series.push(value);
            }
        }
    }
    let m = blocks[0].first().map_or(0, Vec::len);
    if m < 2 {
        return Err(Error::InsufficientData {
            what: format!("time series in {}", path.display()),
            required: 2,
            available: m,
        });
    }
    let to_matrix = |block: &Vec<Vec<f64>>| DMatrix::from_fn(block.len(), m, |r, c| block[r][c]);
    TimeSeries::new(
        to_matrix(&blocks[0]),
        to_matrix(&blocks[1]),
        to_matrix(&blocks[2]),
        schema.sample_period,
        ChannelNames {
            states: schema.states.clone(),
            controls: schema.controls.clone(),
            exogenous: schema.exogenous.clone(),
        },
    )
}

/// Per-channel means subtracted by [`center`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringOffsets {
    pub state_means: Vec<f64>,
    pub control_means: Vec<f64>,
    pub exogenous_means: Vec<f64>,
}

impl CenteringOffsets {
    pub fn zeros(n: usize, l: usize, q: usize) -> Self {
        Self {
            state_means: vec![0.0; n],
            control_means: vec![0.0; l],
            exogenous_means: vec![0.0; q],
        }
    }

    fn check(&self, ts: &TimeSeries) -> Result<()> {
        if self.state_means.len() != ts.state_dim()
            || self.control_means.len() != ts.control_dim()
            || self.exogenous_means.len() != ts.exogenous_dim()
        {
            return Err(Error::Dimension(format!(
                "offsets ({}, {}, {}) do not match series ({}, {}, {})",
                self.state_means.len(),
                self.control_means.len(),
                self.exogenous_means.len(),
                ts.state_dim(),
                ts.control_dim(),
                ts.exogenous_dim()
            )));
        }
        Ok(())
    }

    /// Subtracts the stored means from `ts`.
    pub fn apply(&self, ts: &TimeSeries) -> Result<TimeSeries> {
        self.check(ts)?;
        Ok(TimeSeries {
            states: shift_rows(&ts.states, &self.state_means, -1.0),
            controls: shift_rows(&ts.controls, &self.control_means, -1.0),
            exogenous: shift_rows(&ts.exogenous, &self.exogenous_means, -1.0),
            ..ts.clone()
        })
    }

    /// Adds the stored means back.
    pub fn restore(&self, ts: &TimeSeries) -> Result<TimeSeries> {
        self.check(ts)?;
        Ok(TimeSeries {
            states: shift_rows(&ts.states, &self.state_means, 1.0),
            controls: shift_rows(&ts.controls, &self.control_means, 1.0),
            exogenous: shift_rows(&ts.exogenous, &self.exogenous_means, 1.0),
            ..ts.clone()
        })
    }

    /// Adds the state means to a state-block matrix.
    pub fn restore_states(&self, states: &DMatrix<f64>) -> DMatrix<f64> {
        shift_rows(states, &self.state_means, 1.0)
    }
}

fn shift_rows(mat: &DMatrix<f64>, offsets: &[f64], sign: f64) -> DMatrix<f64> {
    DMatrix::from_fn(mat.nrows(), mat.ncols(), |r, c| mat[(r, c)] + sign * offsets[r])
}

fn row_means(mat: &DMatrix<f64>) -> Vec<f64> {
    mat.row_iter()
        .map(|row| {
            let m = row.len() as f64;
            let mean = row.sum() / m;
            // second pass removes the first-pass rounding error
            mean + row.iter().map(|v| v - mean).sum::<f64>() / m
        })
        .collect()
}

/// Subtracts the per-channel sample mean from every block.
pub fn center(ts: &TimeSeries) -> (TimeSeries, CenteringOffsets) {
    let offsets = CenteringOffsets {
        state_means: row_means(&ts.states),
        control_means: row_means(&ts.controls),
        exogenous_means: row_means(&ts.exogenous),
    };
    let centered = offsets.apply(ts).expect("offsets built from the same series");
    (centered, offsets)
}

/// Measurement-noise level as a fraction of each state channel's standard
/// deviation, plus the RNG seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub eta: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(eta: f64, seed: u64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("noise level must be >= 0, got {eta}")));
        }
        Ok(Self { eta, seed })
    }
}

/// Sample standard deviation (n - 1 denominator) of each row.
pub fn row_std(mat: &DMatrix<f64>) -> DVector<f64> {
    let means = row_means(mat);
    DVector::from_iterator(
        mat.nrows(),
        mat.row_iter().zip(&means).map(|(row, mean)| {
            let ss: f64 = row.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (row.len() as f64 - 1.0)).sqrt()
        }),
    )
}

/// `X_v = X + eta * (Z ∘ G)` on the state block, where `G` is standard
/// normal and every column of `Z` holds the per-channel sample standard
/// deviations. Inputs are left untouched.
pub fn inject_noise(ts: &TimeSeries, spec: &NoiseSpec) -> Result<TimeSeries> {
    if !(spec.eta >= 0.0 && spec.eta.is_finite()) {
        return Err(Error::Config(format!("noise level must be >= 0, got {}", spec.eta)));
    }
    if spec.eta == 0.0 {
        return Ok(ts.clone());
    }
    let std = row_std(&ts.states);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut states = ts.states.clone();
    let (n, m) = states.shape();
    // column-major draw order
    for c in 0..m {
        for r in 0..n {
            let g: f64 = StandardNormal.sample(&mut rng);
            states[(r, c)] += spec.eta * std[r] * g;
        }
    }
    Ok(ts.with_states(states))
}

/// Aligned regression snapshots of a delay-embedded series.
///
/// Row block `k` of `x` holds `x(t - k)`, newest first; column `j`
/// corresponds to source time `t = j + delay_order`. `x_plus` holds the same
/// stack one sample later; `gamma` and `d` hold `u(t)` and `d(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub x: DMatrix<f64>,
    pub x_plus: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub delay_order: usize,
    pub raw_state_dim: usize,
}

impl SnapshotSet {
    /// Embedded state dimension `n * (delay_order + 1)`.
    pub fn embedded_dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Minimum record length for [`embed_delay`].
pub fn min_samples(sigma_x: usize) -> usize {
    sigma_x + 2
}

/// Builds the delay-embedded snapshot matrices with delay order `sigma_x`.
pub fn embed_delay(ts: &TimeSeries, sigma_x: usize) -> Result<SnapshotSet> {
    let n = ts.state_dim();
    let m = ts.len();
    let required = min_samples(sigma_x);
    if m < required {
        return Err(Error::InsufficientData {
            what: format!("delay embedding of order {sigma_x}"),
            required,
            available: m,
        });
    }
    let n_e = n * (sigma_x + 1);
    let m_s = m - sigma_x - 1;
    let states = &ts.states;
    let x = DMatrix::from_fn(n_e, m_s, |r, j| {
        let (k, i) = (r / n, r % n);
        states[(i, j + sigma_x - k)]
    });
    let x_plus = DMatrix::from_fn(n_e, m_s, |r, j| {
        let (k, i) = (r / n, r % n);
        states[(i, j + sigma_x + 1 - k)]
    });
    Ok(SnapshotSet {
        x,
        x_plus,
        gamma: ts.controls.columns(sigma_x, m_s).into_owned(),
        d: ts.exogenous.columns(sigma_x, m_s).into_owned(),
        delay_order: sigma_x,
        raw_state_dim: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn series(states: &[&[f64]]) -> TimeSeries {
        let m = states[0].len();
        let mat = DMatrix::from_fn(states.len(), m, |r, c| states[r][c]);
        TimeSeries::new(
            mat,
            DMatrix::zeros(0, m),
            DMatrix::zeros(0, m),
            0.1,
            ChannelNames::generic(states.len(), 0, 0),
        )
        .unwrap()
    }

    fn csv_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn six_column_csv(rows: usize) -> String {
        let mut s = String::from("y1,y2,u1,u2,d1,d2\n");
        for i in 0..rows {
            let v = i as f64;
            s += &format!("{},{},{},{},{},{}\n", v, 2.0 * v, v + 0.5, -v, 3.0, v * v);
        }
        s
    }

    #[test]
    fn loads_six_columns_into_blocks() {
        let f = csv_file(&six_column_csv(10));
        let schema = Schema::new(&["y1", "y2"], &["u1", "u2"], &["d1", "d2"], 0.1);
        let ts = load_timeseries(f.path(), &schema).unwrap();
        assert_eq!(
            (ts.state_dim(), ts.control_dim(), ts.exogenous_dim(), ts.len()),
            (2, 2, 2, 10)
        );
        assert_eq!(ts.states()[(1, 3)], 6.0);
        assert_eq!(ts.controls()[(0, 2)], 2.5);
        assert_eq!(ts.exogenous()[(1, 4)], 16.0);
    }

    #[test]
    fn duplicate_mapping_is_schema_error() {
        let f = csv_file(&six_column_csv(10));
        let schema = Schema::new(&["y1", "y2"], &["u1", "u1"], &["d1", "d2"], 0.1);
        assert!(matches!(load_timeseries(f.path(), &schema), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_column_is_schema_error() {
        let f = csv_file(&six_column_csv(10));
        let schema = Schema::new(&["y1", "y3"], &[], &[], 0.1);
        assert!(matches!(load_timeseries(f.path(), &schema), Err(Error::Schema(_))));
    }

    #[test]
    fn nan_cell_names_its_row() {
        let mut body = six_column_csv(10);
        body = body.replacen("4,8,4.5", "NaN,8,4.5", 1);
        let f = csv_file(&body);
        let schema = Schema::new(&["y1", "y2"], &["u1", "u2"], &["d1", "d2"], 0.1);
        match load_timeseries(f.path(), &schema) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 5);
                assert_eq!(column, "y1");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_is_parse_error() {
        let f = csv_file("y1\n1\nabc\n3\n");
        let schema = Schema::new(&["y1"], &[], &[], 0.1);
        assert!(matches!(
            load_timeseries(f.path(), &schema),
            Err(Error::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn single_row_is_insufficient() {
        let f = csv_file("y1,u1\n1,2\n");
        let schema = Schema::new(&["y1"], &["u1"], &[], 0.1);
        assert!(matches!(
            load_timeseries(f.path(), &schema),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let f = csv_file(&six_column_csv(7));
        let schema = Schema::new(&["y1", "y2"], &["u1", "u2"], &["d1", "d2"], 0.1);
        let ts = load_timeseries(f.path(), &schema).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        ts.write_csv(out.path()).unwrap();
        let back = load_timeseries(out.path(), &schema).unwrap();
        assert_eq!(ts, back);
    }

    #[test]
    fn center_examples() {
        let ts = series(&[&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0], &[-1.0, 0.0, 1.0]]);
        let (c, off) = center(&ts);
        assert_eq!(off.state_means, vec![5.0, 2.0, 0.0]);
        assert_eq!(c.states().row(0).iter().copied().collect::<Vec<_>>(), vec![0.0; 3]);
        assert_eq!(
            c.states().row(1).iter().copied().collect::<Vec<_>>(),
            vec![-1.0, 0.0, 1.0]
        );
        assert_eq!(c.states().row(2), ts.states().row(2));
    }

    #[test]
    fn zero_noise_is_identity() {
        let ts = series(&[&[1.0, 4.0, 2.0, 8.0]]);
        for seed in [0, 1, 99] {
            assert_eq!(inject_noise(&ts, &NoiseSpec { eta: 0.0, seed }).unwrap(), ts);
        }
    }

    #[test]
    fn noise_is_deterministic_and_leaves_inputs() {
        let m = 50;
        let ts = TimeSeries::new(
            DMatrix::from_fn(1, m, |_, c| (c as f64).sin()),
            DMatrix::from_fn(1, m, |_, c| c as f64),
            DMatrix::zeros(0, m),
            0.1,
            ChannelNames::generic(1, 1, 0),
        )
        .unwrap();
        let spec = NoiseSpec { eta: 0.2, seed: 5 };
        let a = inject_noise(&ts, &spec).unwrap();
        let b = inject_noise(&ts, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.controls(), ts.controls());
        assert_ne!(a.states(), ts.states());
    }

    #[test]
    fn negative_eta_rejected() {
        assert!(NoiseSpec::new(-0.1, 0).is_err());
    }

    #[test]
    fn noise_scale_monte_carlo() {
        let m = 10_000;
        let ts = series(&[&(0..m).map(|i| (i as f64 * 0.01).sin() * 3.0).collect::<Vec<_>>()]);
        let s = row_std(ts.states())[0];
        let noisy = inject_noise(&ts, &NoiseSpec { eta: 0.2, seed: 11 }).unwrap();
        let diff = noisy.states() - ts.states();
        let empirical = row_std(&diff)[0];
        assert!((empirical / (0.2 * s) - 1.0).abs() < 0.05, "{empirical} vs {}", 0.2 * s);
    }

    #[test]
    fn sigma_zero_is_plain_snapshots() {
        let ts = series(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]]);
        let snap = embed_delay(&ts, 0).unwrap();
        assert_eq!(snap.x, ts.states().columns(0, 3).into_owned());
        assert_eq!(snap.x_plus, ts.states().columns(1, 3).into_owned());
    }

    #[test]
    fn hand_unrolled_delay_one() {
        let ts = series(&[&[10.0, 20.0, 30.0, 40.0]]);
        let snap = embed_delay(&ts, 1).unwrap();
        assert_eq!(snap.x, DMatrix::from_row_slice(2, 2, &[20.0, 30.0, 10.0, 20.0]));
        assert_eq!(snap.x_plus, DMatrix::from_row_slice(2, 2, &[30.0, 40.0, 20.0, 30.0]));
    }

    #[test]
    fn embedded_dimension_two_states_delay_one() {
        let ts = series(&[&[1.0; 8], &[2.0; 8]]);
        let snap = embed_delay(&ts, 1).unwrap();
        assert_eq!(snap.embedded_dim(), 4);
        assert_eq!(snap.len(), 6);
    }

    #[test]
    fn embedding_too_short_reports_minimum() {
        let ts = series(&[&[1.0, 2.0, 3.0]]);
        match embed_delay(&ts, 2) {
            Err(Error::InsufficientData {
                required, available, ..
            }) => {
                assert_eq!((required, available), (4, 3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inputs_align_with_newest_block() {
        let m = 6;
        let ts = TimeSeries::new(
            DMatrix::from_fn(1, m, |_, c| c as f64),
            DMatrix::from_fn(1, m, |_, c| 100.0 + c as f64),
            DMatrix::from_fn(1, m, |_, c| 200.0 + c as f64),
            0.1,
            ChannelNames::generic(1, 1, 1),
        )
        .unwrap();
        let snap = embed_delay(&ts, 2).unwrap();
        for j in 0..snap.len() {
            assert_eq!(snap.gamma[(0, j)], 100.0 + snap.x[(0, j)]);
            assert_eq!(snap.d[(0, j)], 200.0 + snap.x[(0, j)]);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn center_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 2..40)) {
                let ts = series(&[&vals]);
                let (c, off) = center(&ts);
                let back = off.restore(&c).unwrap();
                for (a, b) in back.states().iter().zip(ts.states().iter()) {
                    prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0) * 1e3);
                }
                let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
                let mean: f64 = c.states().row(0).sum() / vals.len() as f64;
                prop_assert!(mean.abs() <= 1e-12 * scale);
            }

            #[test]
            fn shift_consistency(
                vals in prop::collection::vec(-100f64..100.0, 24),
                sigma in 0usize..4,
            ) {
                let half = vals.len() / 2;
                let ts = series(&[&vals[..half], &vals[half..]]);
                let snap = embed_delay(&ts, sigma).unwrap();
                prop_assert_eq!(snap.embedded_dim(), 2 * (sigma + 1));
                prop_assert_eq!(snap.len(), half - sigma - 1);
                for j in 0..snap.len() - 1 {
                    prop_assert_eq!(snap.x_plus.column(j), snap.x.column(j + 1));
                }
            }
        }
    }
}
