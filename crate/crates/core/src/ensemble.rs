//! Library bagging with multi-step elite gating, adaptive threshold,
//! k-means classification of elites and best-class selection.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{center, embed_delay, CenteringOffsets, SnapshotSet, TimeSeries};
use crate::error::{Error, Result};
use crate::library::{build_polynomial_spec, evaluate_library, FeatureMatrix, FeatureTerm, LibrarySpec};
use crate::regression::{CoefficientMatrix, LeastSquaresSystem, StlsConfig};
use crate::simulate::{predict_one_step, simulate_scenario, Scenario, SindyModel};

/// Class aggregates snap entries smaller than this to exact zero.
pub const AGGREGATE_ZERO_TOL: f64 = 1e-12;

/// How per-output long-term R² values are reduced before comparing to the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    #[default]
    Min,
    Mean,
    /// Every member is accepted. Used for degenerate-equivalence checks.
    Disabled,
}

impl GateMode {
    fn reduce(self, r2: &[f64]) -> f64 {
        if r2.is_empty() || r2.iter().any(|v| v.is_nan()) {
            return f64::NEG_INFINITY;
        }
        match self {
            GateMode::Min | GateMode::Disabled => r2.iter().copied().fold(f64::INFINITY, f64::min),
            GateMode::Mean => r2.iter().sum::<f64>() / r2.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub target_elites: usize,
    pub r2_gate: f64,
    pub gate_mode: GateMode,
    pub lambda_init: f64,
    /// Threshold decrement; `None` means a tenth of `lambda_init`.
    pub lambda_step: Option<f64>,
    pub lambda_floor: f64,
    /// Consecutive elite-free iterations before the threshold is lowered.
    pub stall_iterations: usize,
    pub max_iterations: usize,
    pub bag_min_fraction: f64,
    pub bag_max_fraction: f64,
    pub k_clusters: usize,
    /// Choose k in 2..=8 by mean silhouette instead of using `k_clusters`.
    pub silhouette_scan: bool,
    pub kmeans_restarts: usize,
    /// Iterations evaluated per round; the threshold and the stop condition
    /// are updated between rounds. Results do not depend on thread count.
    pub batch_size: usize,
    pub parallel: bool,
    pub max_sweeps: usize,
    pub ridge: f64,
    /// Set from the run seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            target_elites: 50,
            r2_gate: 0.9,
            gate_mode: GateMode::Min,
            lambda_init: 30.0,
            lambda_step: None,
            lambda_floor: 0.0,
            stall_iterations: 100,
            max_iterations: 20_000,
            bag_min_fraction: 0.3,
            bag_max_fraction: 0.9,
            k_clusters: 4,
            silhouette_scan: false,
            kmeans_restarts: 10,
            batch_size: 16,
            parallel: true,
            max_sweeps: 10,
            ridge: 0.0,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn lambda_step(&self) -> f64 {
        self.lambda_step.unwrap_or(0.1 * self.lambda_init)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.target_elites == 0 {
            return fail("target_elites must be positive");
        }
        if self.gate_mode != GateMode::Disabled && !(self.r2_gate > 0.0 && self.r2_gate < 1.0) {
            return fail("r2_gate must lie in (0, 1)");
        }
        if !(self.lambda_init.is_finite() && self.lambda_init >= 0.0) {
            return fail("lambda_init must be finite and non-negative");
        }
        if !(self.lambda_step() > 0.0 || self.lambda_init == 0.0) || !self.lambda_step().is_finite() {
            return fail("lambda_step must be positive");
        }
        if !(self.lambda_floor >= 0.0 && self.lambda_floor <= self.lambda_init) {
            return fail("lambda_floor must lie in [0, lambda_init]");
        }
        if self.stall_iterations == 0 || self.max_iterations == 0 {
            return fail("stall_iterations and max_iterations must be positive");
        }
        if !(self.bag_min_fraction > 0.0
            && self.bag_min_fraction <= self.bag_max_fraction
            && self.bag_max_fraction <= 1.0)
        {
            return fail("bag fractions must satisfy 0 < min <= max <= 1");
        }
        if self.k_clusters == 0 || self.kmeans_restarts == 0 || self.batch_size == 0 {
            return fail("k_clusters, kmeans_restarts and batch_size must be positive");
        }
        self.stls(self.lambda_init).validate()
    }

    fn stls(&self, lambda: f64) -> StlsConfig {
        StlsConfig {
            lambda,
            max_sweeps: self.max_sweeps,
            ridge: self.ridge,
        }
    }
}

/// RNG for one bagging iteration, independent of evaluation order.
fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

/// Sorted feature subset of random size. `constant` (if any) is always added.
pub fn draw_bag<R: Rng + ?Sized>(
    p: usize,
    constant: Option<usize>,
    cfg: &EnsembleConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if p == 0 {
        return Err(Error::Config("cannot bag an empty library".into()));
    }
    let hi = (cfg.bag_max_fraction * p as f64).floor() as usize;
    if hi == 0 {
        return Err(Error::Config(format!(
            "bag_max_fraction {} selects no feature out of {p}",
            cfg.bag_max_fraction
        )));
    }
    let lo = ((cfg.bag_min_fraction * p as f64).ceil() as usize).clamp(1, hi);
    let size = rng.random_range(lo..=hi);
    let mut bag = sample(rng, p, size).into_vec();
    if let Some(c) = constant {
        if !bag.contains(&c) {
            bag.push(c);
        }
    }
    bag.sort_unstable();
    Ok(bag)
}

/// Training features, validation scenario and the context needed to turn a
/// coefficient matrix into a runnable model.
#[derive(Debug, Clone)]
pub struct IdentificationProblem {
    pub snapshots: SnapshotSet,
    pub spec: LibrarySpec,
    pub features: FeatureMatrix,
    pub validation: Scenario,
    pub offsets: CenteringOffsets,
    pub sample_period: f64,
    pub state_scale: Vec<f64>,
}

/// Library settings for [`IdentificationProblem::from_series`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibrarySettings {
    pub sigma_x: usize,
    pub degree: usize,
    pub include_sine: bool,
    pub center: bool,
}

impl Default for LibrarySettings {
    fn default() -> Self {
        Self {
            sigma_x: 1,
            degree: 2,
            include_sine: false,
            center: true,
        }
    }
}

impl IdentificationProblem {
    pub fn new(
        snapshots: SnapshotSet,
        spec: LibrarySpec,
        validation: Scenario,
        offsets: CenteringOffsets,
        sample_period: f64,
    ) -> Result<Self> {
        let features = evaluate_library(&spec, &snapshots)?;
        let n = snapshots.raw_state_dim;
        let state_scale = (0..n)
            .map(|r| {
                snapshots
                    .x
                    .row(r)
                    .iter()
                    .chain(snapshots.x_plus.row(r).iter())
                    .fold(0.0f64, |a, v| a.max(v.abs()))
            })
            .collect();
        let problem = Self {
            snapshots,
            spec,
            features,
            validation,
            offsets,
            sample_period,
            state_scale,
        };
        // dimension check of everything against everything
        let model = problem.model(CoefficientMatrix::new(
            DMatrix::zeros(problem.spec.state_dim(), problem.spec.len()),
            problem.spec.fingerprint(),
        ))?;
        crate::simulate::predict_multi_step(
            &model,
            &problem.validation.initial_window,
            &problem.validation.controls.columns(0, 1).into_owned(),
            &problem.validation.exogenous.columns(0, 1).into_owned(),
        )?;
        if problem.validation.truth.nrows() != n {
            return Err(Error::Dimension(
                "validation truth has the wrong number of states".into(),
            ));
        }
        Ok(problem)
    }

    /// Centers (optionally), delay-embeds and evaluates the polynomial
    /// library. Without a separate validation record the training record is
    /// reused for the long-term score.
    pub fn from_series(
        train: &TimeSeries,
        validation: Option<&TimeSeries>,
        settings: &LibrarySettings,
    ) -> Result<Self> {
        let (centered, offsets) = if settings.center {
            center(train)
        } else {
            (
                train.clone(),
                CenteringOffsets::zeros(train.state_dim(), train.control_dim(), train.exogenous_dim()),
            )
        };
        let snap = embed_delay(&centered, settings.sigma_x)?;
        let spec = build_polynomial_spec(
            snap.embedded_dim(),
            train.control_dim(),
            train.exogenous_dim(),
            settings.degree,
            settings.include_sine,
        )?;
        let val_series = match validation {
            Some(v) => offsets.apply(v)?,
            None => centered,
        };
        let scenario = Scenario::from_series(&val_series, settings.sigma_x)?;
        Self::new(snap, spec, scenario, offsets, train.sample_period())
    }

    pub fn model(&self, coefficients: CoefficientMatrix) -> Result<SindyModel> {
        SindyModel::new(
            self.spec.clone(),
            coefficients,
            self.snapshots.delay_order,
            self.offsets.clone(),
            self.sample_period,
            self.state_scale.clone(),
        )
    }

    pub fn system(&self) -> Result<LeastSquaresSystem> {
        LeastSquaresSystem::new(&self.features, &self.snapshots.x_plus)
    }

    fn constant_index(&self) -> Option<usize> {
        self.spec.position(&FeatureTerm::constant())
    }

    /// One-step and long-term scores of a candidate.
    pub fn evaluate(&self, model: &SindyModel) -> Result<CandidateMetrics> {
        let one = predict_one_step(model, &self.snapshots)?;
        let long = simulate_scenario(model, &self.validation)?;
        Ok(CandidateMetrics {
            r2_one_step: one.r2_per_output,
            r2_long: long.r2_per_output,
            diverged: long.diverged,
            diverged_at: long.diverged_at,
            support_count: model.coefficients().support_count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateMetrics {
    pub r2_one_step: Vec<f64>,
    pub r2_long: Vec<f64>,
    pub diverged: bool,
    pub diverged_at: Option<usize>,
    pub support_count: usize,
}

impl CandidateMetrics {
    pub fn min_long(&self) -> f64 {
        GateMode::Min.reduce(&self.r2_long)
    }
}

/// Single full-library STLS fit.
pub fn basic_fit(problem: &IdentificationProblem, cfg: &StlsConfig) -> Result<SindyModel> {
    let fit = crate::regression::stls_fit(&problem.features, &problem.snapshots.x_plus, cfg)?;
    problem.model(fit.coefficients)
}

/// Ensemble member that passed the long-term gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Elite {
    pub iteration: usize,
    /// Coefficients in full-library coordinates, zero outside `bag`.
    pub xi_full: CoefficientMatrix,
    pub bag: Vec<usize>,
    pub r2_long: Vec<f64>,
    pub r2_one_step: Vec<f64>,
    pub lambda_used: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub silhouette: Vec<f64>,
    pub inertia: f64,
}

impl KMeansResult {
    pub fn mean_silhouette(&self) -> f64 {
        self.silhouette.iter().sum::<f64>() / self.silhouette.len() as f64
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = dist2(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, centroids.last().unwrap()));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    for _ in 0..1000 {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assignments {
            break;
        }
        assignments = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // move an empty centroid onto the point worst served so far
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        dist2(&points[i], &centroids[assignments[i]])
                            .total_cmp(&dist2(&points[j], &centroids[assignments[j]]))
                            .then(j.cmp(&i))
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| dist2(p, &centroids[a]))
        .sum();
    (assignments, centroids, inertia)
}

/// Euclidean silhouette per point; members of singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<f64> {
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    (0..points.len())
        .map(|i| {
            let own = assignments[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..points.len() {
                if j != i {
                    sums[assignments[j]] += dist2(&points[i], &points[j]).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect()
}

/// k-means with k-means++ seeding, best of `restarts` by inertia. Cluster ids
/// are relabelled in order of first appearance.
pub fn kmeans_cluster<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::Config("k-means needs at least one point".into()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!("k = {k} is invalid for {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Dimension("k-means points differ in length".into()));
    }
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let seeds = plus_plus_seed(points, k, rng);
        let run = lloyd(points, seeds);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (assignments, centroids, inertia) = best.unwrap();
    let mut relabel = vec![usize::MAX; k];
    let mut next = 0;
    for &a in &assignments {
        if relabel[a] == usize::MAX {
            relabel[a] = next;
            next += 1;
        }
    }
    for r in relabel.iter_mut() {
        if *r == usize::MAX {
            *r = next;
            next += 1;
        }
    }
    let assignments: Vec<usize> = assignments.iter().map(|a| relabel[*a]).collect();
    let mut ordered = vec![Vec::new(); k];
    for (old, c) in centroids.into_iter().enumerate() {
        ordered[relabel[old]] = c;
    }
    let silhouette = silhouette(points, &assignments, k);
    Ok(KMeansResult {
        assignments,
        centroids: ordered,
        silhouette,
        inertia,
    })
}

/// Entrywise mean of the member matrices. Tiny entries of a multi-member
/// mean are snapped to zero.
pub fn aggregate_class(members: &[&CoefficientMatrix]) -> Result<CoefficientMatrix> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("cannot aggregate an empty class".into()))?;
    if members.len() == 1 {
        return Ok((*first).clone());
    }
    let shape = first.xi().shape();
    let mut sum = DMatrix::zeros(shape.0, shape.1);
    for m in members {
        if m.xi().shape() != shape || m.library_fingerprint() != first.library_fingerprint() {
            return Err(Error::Dimension(
                "class members have different shapes or libraries".into(),
            ));
        }
        sum += m.xi();
    }
    let count = members.len() as f64;
    sum.apply(|v| {
        *v /= count;
        if v.abs() < AGGREGATE_ZERO_TOL {
            *v = 0.0;
        }
    });
    Ok(CoefficientMatrix::new(sum, first.library_fingerprint()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub members: usize,
    #[serde(flatten)]
    pub metrics: CandidateMetrics,
}

#[derive(Debug, Clone)]
pub struct ClusterReport {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub silhouette: Vec<f64>,
    /// One per non-empty cluster, indexed like `class_metrics`.
    pub class_candidates: Vec<SindyModel>,
    pub class_metrics: Vec<ClassMetrics>,
}

/// Index into `metrics` of the class with the best worst-output long-term
/// R², then the fewest nonzero coefficients, then the lowest id.
pub fn select_best(metrics: &[ClassMetrics]) -> Option<usize> {
    (0..metrics.len()).min_by(|&a, &b| {
        let (ma, mb) = (&metrics[a], &metrics[b]);
        mb.metrics
            .min_long()
            .total_cmp(&ma.metrics.min_long())
            .then(ma.metrics.support_count.cmp(&mb.metrics.support_count))
            .then(ma.class_id.cmp(&mb.class_id))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReason {
    pub class_id: usize,
    pub min_long_r2: f64,
    pub support_count: usize,
    pub rule: String,
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub config: EnsembleConfig,
    pub elites: Vec<Elite>,
    pub clusters: ClusterReport,
    pub selected: SindyModel,
    pub selected_index: usize,
    pub selection_reason: SelectionReason,
    pub iterations_used: usize,
    pub final_lambda: f64,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliteSummary {
    pub iteration: usize,
    pub bag_size: usize,
    pub lambda_used: f64,
    pub support_count: usize,
    pub cluster: usize,
    pub silhouette: f64,
    pub r2_one_step: Vec<f64>,
    pub r2_long: Vec<f64>,
}

/// JSON-friendly view of an [`EnsembleRun`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub config: EnsembleConfig,
    pub iterations_used: usize,
    pub final_lambda: f64,
    pub wall_time_s: f64,
    pub k: usize,
    pub elites: Vec<EliteSummary>,
    pub classes: Vec<ClassMetrics>,
    pub selection: SelectionReason,
    pub warnings: Vec<String>,
}

impl EnsembleRun {
    pub fn report(&self) -> EnsembleReport {
        EnsembleReport {
            config: self.config.clone(),
            iterations_used: self.iterations_used,
            final_lambda: self.final_lambda,
            wall_time_s: self.wall_time_s,
            k: self.clusters.k,
            elites: self
                .elites
                .iter()
                .enumerate()
                .map(|(i, e)| EliteSummary {
                    iteration: e.iteration,
                    bag_size: e.bag.len(),
                    lambda_used: e.lambda_used,
                    support_count: e.xi_full.support_count(),
                    cluster: self.clusters.assignments[i],
                    silhouette: self.clusters.silhouette[i],
                    r2_one_step: e.r2_one_step.clone(),
                    r2_long: e.r2_long.clone(),
                })
                .collect(),
            classes: self.clusters.class_metrics.clone(),
            selection: self.selection_reason.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

/// Outcome of one bagging iteration.
struct Trial {
    iteration: usize,
    bag: Vec<usize>,
    coefficients: CoefficientMatrix,
    r2_long: Vec<f64>,
    score: f64,
}

fn run_trial(
    problem: &IdentificationProblem,
    system: &LeastSquaresSystem,
    cfg: &EnsembleConfig,
    iteration: usize,
    lambda: f64,
) -> Result<Trial> {
    let mut rng = iteration_rng(cfg.seed, iteration);
    let bag = draw_bag(problem.spec.len(), problem.constant_index(), cfg, &mut rng)?;
    let fit = system.fit(&bag, &cfg.stls(lambda))?;
    let model = problem.model(fit.coefficients)?;
    let long = simulate_scenario(&model, &problem.validation)?;
    let score = cfg.gate_mode.reduce(&long.r2_per_output);
    Ok(Trial {
        iteration,
        bag,
        coefficients: model.coefficients().clone(),
        r2_long: long.r2_per_output,
        score,
    })
}

fn run_batch(
    problem: &IdentificationProblem,
    system: &LeastSquaresSystem,
    cfg: &EnsembleConfig,
    iterations: std::ops::Range<usize>,
    lambda: f64,
) -> Result<Vec<Trial>> {
    if cfg.parallel {
        iterations
            .into_par_iter()
            .map(|i| run_trial(problem, system, cfg, i, lambda))
            .collect()
    } else {
        iterations.map(|i| run_trial(problem, system, cfg, i, lambda)).collect()
    }
}

fn passes(cfg: &EnsembleConfig, score: f64) -> bool {
    match cfg.gate_mode {
        GateMode::Disabled => true,
        _ => score >= cfg.r2_gate,
    }
}

/// Runs the bagging loop, clusters the elites and selects the best class.
pub fn run_ensemble(problem: &IdentificationProblem, cfg: &EnsembleConfig) -> Result<EnsembleRun> {
    cfg.validate()?;
    let started = Instant::now();
    let system = problem.system()?;
    let mut lambda = cfg.lambda_init;
    let mut stall = 0usize;
    let mut elites = Vec::new();
    let mut best_seen = f64::NEG_INFINITY;
    let mut done = 0usize;
    let mut warnings = Vec::new();
    while done < cfg.max_iterations && elites.len() < cfg.target_elites {
        let end = (done + cfg.batch_size).min(cfg.max_iterations);
        let batch_lambda = lambda;
        for trial in run_batch(problem, &system, cfg, done..end, batch_lambda)? {
            best_seen = best_seen.max(trial.score);
            if passes(cfg, trial.score) {
                stall = 0;
                let model = problem.model(trial.coefficients.clone())?;
                let one = predict_one_step(&model, &problem.snapshots)?;
                elites.push(Elite {
                    iteration: trial.iteration,
                    xi_full: trial.coefficients,
                    bag: trial.bag,
                    r2_long: trial.r2_long,
                    r2_one_step: one.r2_per_output,
                    lambda_used: batch_lambda,
                });
            } else {
                stall += 1;
                if stall >= cfg.stall_iterations {
                    stall = 0;
                    lambda = (lambda - cfg.lambda_step()).max(cfg.lambda_floor);
                }
            }
        }
        done = end;
    }
    if elites.is_empty() {
        return Err(Error::NoModel {
            iterations: done,
            best_r2: best_seen,
            final_lambda: lambda,
        });
    }
    if elites.len() < cfg.target_elites {
        warnings.push(format!(
            "stopped at max_iterations = {} with {} of {} elites",
            cfg.max_iterations,
            elites.len(),
            cfg.target_elites
        ));
    }

    let points: Vec<Vec<f64>> = elites.iter().map(|e| e.xi_full.xi().as_slice().to_vec()).collect();
    let mut rng = iteration_rng(cfg.seed, usize::MAX - 1);
    let clustering = if cfg.silhouette_scan && points.len() >= 3 {
        let mut best: Option<KMeansResult> = None;
        for k in 2..=8.min(points.len() - 1) {
            let res = kmeans_cluster(&points, k, cfg.kmeans_restarts, &mut rng)?;
            if best
                .as_ref()
                .is_none_or(|b| res.mean_silhouette() > b.mean_silhouette())
            {
                best = Some(res);
            }
        }
        best.unwrap()
    } else {
        let k = cfg.k_clusters.min(points.len());
        if k < cfg.k_clusters {
            warnings.push(format!("only {} elites, clustering with k = {k}", points.len()));
        }
        kmeans_cluster(&points, k, cfg.kmeans_restarts, &mut rng)?
    };
    let k = clustering.centroids.len();

    let mut class_candidates = Vec::new();
    let mut class_metrics = Vec::new();
    for class_id in 0..k {
        let members: Vec<&CoefficientMatrix> = elites
            .iter()
            .zip(&clustering.assignments)
            .filter(|(_, a)| **a == class_id)
            .map(|(e, _)| &e.xi_full)
            .collect();
        if members.is_empty() {
            continue;
        }
        let model = problem.model(aggregate_class(&members)?)?;
        let metrics = problem.evaluate(&model)?;
        class_metrics.push(ClassMetrics {
            class_id,
            members: members.len(),
            metrics,
        });
        class_candidates.push(model);
    }
    let selected_index = select_best(&class_metrics).expect("at least one non-empty class");
    let chosen = &class_metrics[selected_index];
    let selection_reason = SelectionReason {
        class_id: chosen.class_id,
        min_long_r2: chosen.metrics.min_long(),
        support_count: chosen.metrics.support_count,
        rule: "max min-over-outputs long-term R2, then fewest nonzeros, then lowest class id".into(),
    };
    Ok(EnsembleRun {
        config: cfg.clone(),
        selected: class_candidates[selected_index].clone(),
        selected_index,
        clusters: ClusterReport {
            k,
            assignments: clustering.assignments,
            silhouette: clustering.silhouette,
            class_candidates,
            class_metrics,
        },
        elites,
        selection_reason,
        iterations_used: done,
        final_lambda: lambda,
        wall_time_s: started.elapsed().as_secs_f64(),
        warnings,
    })
}

/// Plain bagging baseline: `target_elites` bags at `lambda_init`, no gate, no
/// clustering, mean of every member.
pub fn bagging_mean(problem: &IdentificationProblem, cfg: &EnsembleConfig) -> Result<SindyModel> {
    cfg.validate()?;
    let system = problem.system()?;
    let fit_one = |i: usize| -> Result<CoefficientMatrix> {
        let mut rng = iteration_rng(cfg.seed, i);
        let bag = draw_bag(problem.spec.len(), problem.constant_index(), cfg, &mut rng)?;
        Ok(system.fit(&bag, &cfg.stls(cfg.lambda_init))?.coefficients)
    };
    let members: Vec<CoefficientMatrix> = if cfg.parallel {
        (0..cfg.target_elites)
            .into_par_iter()
            .map(fit_one)
            .collect::<Result<_>>()?
    } else {
        (0..cfg.target_elites).map(fit_one).collect::<Result<_>>()?
    };
    let refs: Vec<&CoefficientMatrix> = members.iter().collect();
    problem.model(aggregate_class(&refs)?)
}
