//! Sequentially thresholded least squares (STLS) on the scaled library.
//!
//! The scaled feature matrix `A = Θ diag(1/s)` is factored once as `A = QR`.
//! Every sub-problem on a column subset `S` is then the small problem
//! `min ‖Qᵀy − R[:, S] β‖`, which has the same minimizers (and the same
//! minimum-norm minimizer) as `min ‖y − A[:, S] β‖`. Sub-problems are solved
//! with a thresholded SVD.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StlsConfig {
    /// Hard threshold on coefficients of max-abs scaled features.
    pub lambda: f64,
    pub max_sweeps: usize,
    /// Tikhonov weight on scaled coefficients; 0 disables it.
    pub ridge: f64,
}

impl Default for StlsConfig {
    fn default() -> Self {
        Self {
            lambda: 30.0,
            max_sweeps: 10,
            ridge: 0.0,
        }
    }
}

impl StlsConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.max_sweeps == 0 {
            return Err(Error::Config("max_sweeps must be >= 1".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config(format!("ridge must be >= 0, got {}", self.ridge)));
        }
        Ok(())
    }
}

/// Sparse coefficient matrix `Ξ` (targets x features) in raw feature units.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    xi: DMatrix<f64>,
    support_count: usize,
    library_fingerprint: String,
}

impl CoefficientMatrix {
    pub fn new(xi: DMatrix<f64>, library_fingerprint: impl Into<String>) -> Self {
        let support_count = xi.iter().filter(|v| **v != 0.0).count();
        Self {
            xi,
            support_count,
            library_fingerprint: library_fingerprint.into(),
        }
    }

    pub fn xi(&self) -> &DMatrix<f64> {
        &self.xi
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.xi
    }

    /// Number of nonzero entries, `N`.
    pub fn support_count(&self) -> usize {
        self.support_count
    }

    pub fn library_fingerprint(&self) -> &str {
        &self.library_fingerprint
    }

    /// Nonzero column indices of row `i`.
    pub fn row_support(&self, i: usize) -> Vec<usize> {
        self.xi
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn nrows(&self) -> usize {
        self.xi.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.xi.ncols()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StlsDiagnostics {
    /// Threshold sweeps performed per target row.
    pub sweeps: Vec<usize>,
    /// Rows whose support was thresholded away entirely.
    pub empty_rows: Vec<usize>,
    /// Rows that hit `max_sweeps` before the support settled.
    pub unconverged_rows: Vec<usize>,
    /// Some sub-problem was rank deficient; the minimum-norm solution was used.
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StlsFit {
    pub coefficients: CoefficientMatrix,
    pub diagnostics: StlsDiagnostics,
}

/// Orthogonally compressed regression problem shared by all STLS runs on the
/// same data.
#[derive(Debug, Clone)]
pub struct LeastSquaresSystem {
    r: DMatrix<f64>,
    qty: DMatrix<f64>,
    scales: Vec<f64>,
    fingerprint: String,
}

impl LeastSquaresSystem {
    /// `targets` is `n_targets x m_s`, aligned with the columns of `theta.theta_t`.
    pub fn new(theta: &FeatureMatrix, targets: &DMatrix<f64>) -> Result<Self> {
        let (p, m) = theta.theta_t.shape();
        if targets.ncols() != m {
            return Err(Error::Dimension(format!(
                "targets have {} samples, features have {m}",
                targets.ncols()
            )));
        }
        if theta.column_scales.len() != p {
            return Err(Error::Dimension(
                "column_scales length differs from feature count".into(),
            ));
        }
        if theta.theta_t.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite value in regression data".into()));
        }
        let scaled = DMatrix::from_fn(m, p, |j, i| theta.theta_t[(i, j)] / theta.column_scales[i]);
        let qr = scaled.qr();
        let k = m.min(p);
        let mut qty = targets.transpose();
        qr.q_tr_mul(&mut qty);
        let qty = qty.rows(0, k).into_owned();
        let r = qr.r();
        Ok(Self {
            r,
            qty,
            scales: theta.column_scales.clone(),
            fingerprint: theta.library_fingerprint.clone(),
        })
    }

    pub fn n_features(&self) -> usize {
        self.scales.len()
    }

    pub fn n_targets(&self) -> usize {
        self.qty.ncols()
    }

    /// Minimum-norm least squares in scaled units on the given columns.
    fn solve(&self, target: usize, support: &[usize], ridge: f64) -> (Vec<f64>, bool) {
        let k = self.r.nrows();
        let s = support.len();
        let extra = if ridge > 0.0 { s } else { 0 };
        let mut a = DMatrix::zeros(k + extra, s);
        for (c, &col) in support.iter().enumerate() {
            a.view_mut((0, c), (k, 1)).copy_from(&self.r.column(col));
            if extra > 0 {
                a[(k + c, c)] = ridge.sqrt();
            }
        }
        let mut b = DVector::zeros(k + extra);
        b.rows_mut(0, k).copy_from(&self.qty.column(target));
        let svd = a.svd(true, true);
        let max_sv = svd.singular_values.iter().fold(0.0f64, |acc, v| acc.max(*v));
        let tol = max_sv * (k + extra).max(s) as f64 * f64::EPSILON;
        let rank = svd.singular_values.iter().filter(|v| **v > tol).count();
        let sol = if max_sv > 0.0 {
            svd.solve(&b, tol).expect("u and v were computed")
        } else {
            DVector::zeros(s)
        };
        (sol.iter().copied().collect(), rank < s)
    }

    /// STLS with the initial support restricted to `allowed` (sorted, unique
    /// feature indices). Coefficients outside `allowed` are exactly zero.
    pub fn fit(&self, allowed: &[usize], cfg: &StlsConfig) -> Result<StlsFit> {
        cfg.validate()?;
        if let Some(&bad) = allowed.iter().find(|&&i| i >= self.n_features()) {
            return Err(Error::Dimension(format!("feature index {bad} out of range")));
        }
        let supports = vec![allowed.to_vec(); self.n_targets()];
        self.fit_rows(&supports, cfg)
    }

    /// STLS where each target row starts from its own support.
    pub fn fit_rows(&self, supports: &[Vec<usize>], cfg: &StlsConfig) -> Result<StlsFit> {
        cfg.validate()?;
        if supports.len() != self.n_targets() {
            return Err(Error::Dimension("one support per target row is required".into()));
        }
        let p = self.n_features();
        let mut xi = DMatrix::zeros(self.n_targets(), p);
        let mut diag = StlsDiagnostics::default();
        for (row, initial) in supports.iter().enumerate() {
            let mut support = initial.clone();
            let mut coef = Vec::new();
            let mut sweeps = 0;
            let mut converged = false;
            if !support.is_empty() {
                let (c, deficient) = self.solve(row, &support, cfg.ridge);
                diag.rank_deficient |= deficient;
                coef = c;
                while sweeps < cfg.max_sweeps {
                    sweeps += 1;
                    let keep: Vec<usize> = (0..support.len()).filter(|&i| coef[i].abs() >= cfg.lambda).collect();
                    if keep.len() == support.len() {
                        converged = true;
                        break;
                    }
                    support = keep.iter().map(|&i| support[i]).collect();
                    if support.is_empty() {
                        coef.clear();
                        converged = true;
                        break;
                    }
                    let (c, deficient) = self.solve(row, &support, cfg.ridge);
                    diag.rank_deficient |= deficient;
                    coef = c;
                }
                if !converged {
                    // cap reached: drop what is still under threshold
                    diag.unconverged_rows.push(row);
                    for c in coef.iter_mut() {
                        if c.abs() < cfg.lambda {
                            *c = 0.0;
                        }
                    }
                }
            }
            if coef.iter().all(|c| *c == 0.0) {
                diag.empty_rows.push(row);
            }
            if coef.iter().any(|c| !c.is_finite()) {
                return Err(Error::Numerical(format!("non-finite coefficient in row {row}")));
            }
            for (&col, c) in support.iter().zip(&coef) {
                xi[(row, col)] = c / self.scales[col];
            }
            diag.sweeps.push(sweeps);
        }
        Ok(StlsFit {
            coefficients: CoefficientMatrix::new(xi, self.fingerprint.clone()),
            diagnostics: diag,
        })
    }
}

/// STLS over the full library. `targets` is `n_e x m_s`.
pub fn stls_fit(theta: &FeatureMatrix, targets: &DMatrix<f64>, cfg: &StlsConfig) -> Result<StlsFit> {
    let system = LeastSquaresSystem::new(theta, targets)?;
    let all: Vec<usize> = (0..theta.n_features()).collect();
    system.fit(&all, cfg)
}

/// Sum of squared one-step residuals per target row.
pub fn one_step_residual(
    coefficients: &CoefficientMatrix,
    theta: &FeatureMatrix,
    targets: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let xi = coefficients.xi();
    if xi.ncols() != theta.n_features() || xi.nrows() != targets.nrows() || targets.ncols() != theta.n_samples() {
        return Err(Error::Dimension(format!(
            "coefficients {}x{}, features {}x{}, targets {}x{}",
            xi.nrows(),
            xi.ncols(),
            theta.n_features(),
            theta.n_samples(),
            targets.nrows(),
            targets.ncols()
        )));
    }
    let pred = xi * &theta.theta_t;
    Ok((0..targets.nrows())
        .map(|i| {
            targets
                .row(i)
                .iter()
                .zip(pred.row(i).iter())
                .map(|(y, p)| (y - p).powi(2))
                .sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{embed_delay, ChannelNames, TimeSeries};
    use crate::library::{build_polynomial_spec, evaluate_library, FeatureTerm, Operand};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn features(rows: DMatrix<f64>) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows)
    }

    /// Independent oracle: normal equations solved by Gaussian elimination
    /// with partial pivoting.
    fn normal_equations(theta_t: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
        let p = theta_t.nrows();
        let m = theta_t.ncols();
        let mut g = vec![vec![0.0; p + 1]; p];
        for i in 0..p {
            for k in 0..p {
                g[i][k] = (0..m).map(|j| theta_t[(i, j)] * theta_t[(k, j)]).sum();
            }
            g[i][p] = (0..m).map(|j| theta_t[(i, j)] * y[j]).sum();
        }
        for c in 0..p {
            let piv = (c..p).max_by(|a, b| g[*a][c].abs().total_cmp(&g[*b][c].abs())).unwrap();
            g.swap(c, piv);
            let pivot = g[c].clone();
            for row in g.iter_mut().skip(c + 1) {
                let f = row[c] / pivot[c];
                for (dst, src) in row[c..].iter_mut().zip(&pivot[c..]) {
                    *dst -= f * src;
                }
            }
        }
        let mut x = vec![0.0; p];
        for r in (0..p).rev() {
            let s: f64 = (r + 1..p).map(|k| g[r][k] * x[k]).sum();
            x[r] = (g[r][p] - s) / g[r][r];
        }
        x
    }

    fn residual(theta_t: &DMatrix<f64>, y: &[f64], beta: &[f64]) -> f64 {
        (0..theta_t.ncols())
            .map(|j| {
                let pred: f64 = (0..theta_t.nrows()).map(|i| theta_t[(i, j)] * beta[i]).sum();
                (y[j] - pred).powi(2)
            })
            .sum()
    }

    #[test]
    fn lambda_zero_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, m) = (6, 60);
        let theta_t = DMatrix::from_fn(p, m, |_, _| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets = DMatrix::from_row_slice(1, m, &y);
        let fit = stls_fit(&features(theta_t.clone()), &targets, &StlsConfig::with_lambda(0.0)).unwrap();
        let beta: Vec<f64> = fit.coefficients.xi().row(0).iter().copied().collect();
        let oracle = normal_equations(&theta_t, &y);
        let (r_fit, r_oracle) = (residual(&theta_t, &y, &beta), residual(&theta_t, &y, &oracle));
        assert!((r_fit - r_oracle).abs() <= 1e-8 * r_oracle);
        for (a, b) in beta.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
        }
    }

    /// x(t+1) = 0.9 x(t) + 0.1 u(t), noiseless.
    #[test]
    fn recovers_first_order_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 200;
        let u: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut x = vec![0.3; m];
        for t in 0..m - 1 {
            x[t + 1] = 0.9 * x[t] + 0.1 * u[t];
        }
        let ts = TimeSeries::new(
            DMatrix::from_row_slice(1, m, &x),
            DMatrix::from_row_slice(1, m, &u),
            DMatrix::zeros(0, m),
            0.1,
            ChannelNames::generic(1, 1, 0),
        )
        .unwrap();
        let snap = embed_delay(&ts, 0).unwrap();
        let spec = build_polynomial_spec(1, 1, 0, 2, false).unwrap();
        let theta = evaluate_library(&spec, &snap).unwrap();
        let fit = stls_fit(&theta, &snap.x_plus, &StlsConfig::with_lambda(0.05)).unwrap();
        let xi = fit.coefficients.xi();
        let ix = spec.position(&FeatureTerm::linear(Operand::state(0))).unwrap();
        let iu = spec.position(&FeatureTerm::linear(Operand::control(0))).unwrap();
        assert_eq!(fit.coefficients.row_support(0), vec![ix, iu]);
        assert!((xi[(0, ix)] - 0.9).abs() < 1e-8);
        assert!((xi[(0, iu)] - 0.1).abs() < 1e-8);
        assert_eq!(fit.coefficients.support_count(), 2);
    }

    #[test]
    fn zero_targets_give_zero_matrix() {
        let theta_t = DMatrix::from_fn(3, 10, |i, j| (i * j) as f64 + 1.0);
        let fit = stls_fit(
            &features(theta_t),
            &DMatrix::zeros(2, 10),
            &StlsConfig::with_lambda(0.1),
        )
        .unwrap();
        assert_eq!(fit.coefficients.support_count(), 0);
        assert!(fit.coefficients.xi().iter().all(|v| *v == 0.0));
        assert_eq!(fit.diagnostics.empty_rows, vec![0, 1]);
    }

    #[test]
    fn aggressive_lambda_gives_empty_row_not_error() {
        let theta_t = DMatrix::from_fn(2, 10, |i, j| ((i + 1) * j) as f64 * 0.1 + i as f64);
        let y = DMatrix::from_fn(1, 10, |_, j| j as f64 * 0.01);
        let fit = stls_fit(&features(theta_t), &y, &StlsConfig::with_lambda(1e6)).unwrap();
        assert_eq!(fit.coefficients.support_count(), 0);
        assert_eq!(fit.diagnostics.empty_rows, vec![0]);
    }

    #[test]
    fn non_finite_data_is_numerical_error() {
        let mut theta_t = DMatrix::from_element(2, 5, 1.0);
        theta_t[(1, 3)] = f64::NAN;
        let err = stls_fit(&features(theta_t), &DMatrix::zeros(1, 5), &StlsConfig::default());
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn rank_deficient_uses_minimum_norm() {
        // two identical feature rows: minimum-norm splits the weight evenly
        let row: Vec<f64> = (0..8).map(|j| j as f64 - 3.5).collect();
        let theta_t = DMatrix::from_fn(2, 8, |_, j| row[j]);
        let y = DMatrix::from_fn(1, 8, |_, j| 2.0 * row[j]);
        let fit = stls_fit(&features(theta_t), &y, &StlsConfig::with_lambda(0.0)).unwrap();
        assert!(fit.diagnostics.rank_deficient);
        let xi = fit.coefficients.xi();
        assert!((xi[(0, 0)] - 1.0).abs() < 1e-10 && (xi[(0, 1)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ridge_shrinks_coefficients() {
        let theta_t = DMatrix::from_fn(1, 20, |_, j| (j as f64).sin());
        let y = theta_t.clone() * 3.0;
        let plain = stls_fit(&features(theta_t.clone()), &y, &StlsConfig::with_lambda(0.0)).unwrap();
        let ridged = stls_fit(
            &features(theta_t),
            &y,
            &StlsConfig {
                lambda: 0.0,
                max_sweeps: 10,
                ridge: 1.0,
            },
        )
        .unwrap();
        assert!(ridged.coefficients.xi()[(0, 0)].abs() < plain.coefficients.xi()[(0, 0)].abs());
    }

    #[test]
    fn invalid_config_rejected() {
        let theta = features(DMatrix::from_element(1, 3, 1.0));
        let y = DMatrix::zeros(1, 3);
        assert!(stls_fit(
            &theta,
            &y,
            &StlsConfig {
                lambda: -1.0,
                ..Default::default()
            }
        )
        .is_err());
        assert!(stls_fit(
            &theta,
            &y,
            &StlsConfig {
                max_sweeps: 0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn residual_of_exact_and_zero_coefficients() {
        let theta_t = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 3.0, 4.0]);
        let targets = DMatrix::from_row_slice(1, 4, &[3.0, 5.0, 7.0, 9.0]);
        let theta = features(theta_t);
        let exact = CoefficientMatrix::new(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), "");
        assert!(one_step_residual(&exact, &theta, &targets).unwrap()[0] <= 1e-20);
        let zero = CoefficientMatrix::new(DMatrix::zeros(1, 2), "");
        assert_eq!(
            one_step_residual(&zero, &theta, &targets).unwrap()[0],
            9.0 + 25.0 + 49.0 + 81.0
        );
        let wrong = CoefficientMatrix::new(DMatrix::zeros(2, 2), "");
        assert!(one_step_residual(&wrong, &theta, &targets).is_err());
    }

    fn noisy_problem(seed: u64) -> (FeatureMatrix, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, m) = (8, 120);
        let theta_t = DMatrix::from_fn(p, m, |_, _| rng.random_range(-1.0..1.0));
        let true_coef = [2.0, 0.0, -1.0, 0.3, 0.0, 0.05, 0.0, 1.2];
        let y = DMatrix::from_fn(2, m, |r, j| {
            let s: f64 = (0..p).map(|i| true_coef[i] * theta_t[(i, j)]).sum();
            s * (1.0 + r as f64) + rng.random_range(-0.1..0.1)
        });
        (features(theta_t), y)
    }

    #[test]
    fn residual_monotone_in_lambda() {
        let (theta, y) = noisy_problem(21);
        let mut prev: Option<Vec<f64>> = None;
        // decreasing lambda from 1 to 0
        for step in (0..=100).rev() {
            let lambda = step as f64 * 0.01;
            let fit = stls_fit(&theta, &y, &StlsConfig::with_lambda(lambda)).unwrap();
            let res = one_step_residual(&fit.coefficients, &theta, &y).unwrap();
            if let Some(p) = &prev {
                for (a, b) in res.iter().zip(p) {
                    assert!(*a <= b * (1.0 + 1e-12), "lambda {lambda}: {a} > {b}");
                }
            }
            prev = Some(res);
        }
    }

    #[test]
    fn surviving_coefficients_clear_threshold() {
        let (theta, y) = noisy_problem(4);
        for lambda in [0.05, 0.2, 0.5, 1.0] {
            let fit = stls_fit(&theta, &y, &StlsConfig::with_lambda(lambda)).unwrap();
            for r in 0..2 {
                for c in fit.coefficients.row_support(r) {
                    let scaled = fit.coefficients.xi()[(r, c)] * theta.column_scales[c];
                    assert!(scaled.abs() >= lambda);
                }
            }
        }
    }

    #[test]
    fn refit_on_own_support_is_fixed_point() {
        let (theta, y) = noisy_problem(8);
        let system = LeastSquaresSystem::new(&theta, &y).unwrap();
        let cfg = StlsConfig::with_lambda(0.2);
        let all: Vec<usize> = (0..theta.n_features()).collect();
        let first = system.fit(&all, &cfg).unwrap();
        assert!(first.diagnostics.unconverged_rows.is_empty());
        let supports: Vec<Vec<usize>> = (0..2).map(|r| first.coefficients.row_support(r)).collect();
        let second = system.fit_rows(&supports, &cfg).unwrap();
        assert_eq!(first.coefficients, second.coefficients);
    }

    #[test]
    fn bag_restriction_zeroes_outside() {
        let (theta, y) = noisy_problem(5);
        let system = LeastSquaresSystem::new(&theta, &y).unwrap();
        let bag = [0, 2, 5];
        let fit = system.fit(&bag, &StlsConfig::with_lambda(0.0)).unwrap();
        for r in 0..2 {
            for c in 0..theta.n_features() {
                if !bag.contains(&c) {
                    assert_eq!(fit.coefficients.xi()[(r, c)], 0.0);
                }
            }
        }
        assert!(system.fit(&[99], &StlsConfig::default()).is_err());
    }

    #[test]
    fn underdetermined_problem_solves() {
        let theta_t = DMatrix::from_fn(5, 3, |i, j| ((i + 1) * (j + 2)) as f64 + (i * i) as f64);
        let y = DMatrix::from_fn(1, 3, |_, j| j as f64);
        let fit = stls_fit(&features(theta_t.clone()), &y, &StlsConfig::with_lambda(0.0)).unwrap();
        let res = one_step_residual(&fit.coefficients, &features(theta_t), &y).unwrap();
        assert!(res[0] < 1e-18);
        assert!(fit.diagnostics.rank_deficient);
    }
}
