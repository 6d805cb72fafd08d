//! Candidate-function library: declarative term lists and their evaluation
//! over snapshot data (matrix form) or a single time step (vector form).

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::SnapshotSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    State,
    Control,
    Exogenous,
}

/// One input channel of a term. Ordering is (block, index), which is the
/// canonical operand order inside product terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Operand {
    pub block: Block,
    pub index: usize,
}

impl Operand {
    pub const fn state(index: usize) -> Self {
        Self {
            block: Block::State,
            index,
        }
    }

    pub const fn control(index: usize) -> Self {
        Self {
            block: Block::Control,
            index,
        }
    }

    pub const fn exogenous(index: usize) -> Self {
        Self {
            block: Block::Exogenous,
            index,
        }
    }

    #[inline]
    fn value(&self, x: &[f64], u: &[f64], d: &[f64]) -> f64 {
        match self.block {
            Block::State => x[self.index],
            Block::Control => u[self.index],
            Block::Exogenous => d[self.index],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermKind {
    Constant,
    Linear,
    QuadraticCross,
    SineOfLinear,
    SineOfQuadratic,
}

impl TermKind {
    fn arity(self) -> usize {
        match self {
            TermKind::Constant => 0,
            TermKind::Linear | TermKind::SineOfLinear => 1,
            TermKind::QuadraticCross | TermKind::SineOfQuadratic => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureTerm {
    pub kind: TermKind,
    pub operands: Vec<Operand>,
}

impl FeatureTerm {
    pub fn constant() -> Self {
        Self {
            kind: TermKind::Constant,
            operands: vec![],
        }
    }

    pub fn linear(a: Operand) -> Self {
        Self {
            kind: TermKind::Linear,
            operands: vec![a],
        }
    }

    /// Product term; operands are put in canonical order.
    pub fn product(a: Operand, b: Operand) -> Self {
        Self {
            kind: TermKind::QuadraticCross,
            operands: vec![a.min(b), a.max(b)],
        }
    }

    pub fn sine(a: Operand) -> Self {
        Self {
            kind: TermKind::SineOfLinear,
            operands: vec![a],
        }
    }

    pub fn sine_product(a: Operand, b: Operand) -> Self {
        Self {
            kind: TermKind::SineOfQuadratic,
            operands: vec![a.min(b), a.max(b)],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.operands.len() != self.kind.arity() {
            return Err(Error::Config(format!(
                "{:?} term takes {} operands, got {}",
                self.kind,
                self.kind.arity(),
                self.operands.len()
            )));
        }
        if self.operands.len() == 2 && self.operands[0] > self.operands[1] {
            return Err(Error::Config(format!("operands of {self} are not in canonical order")));
        }
        Ok(())
    }

    /// Value of the term at one time step.
    #[inline]
    pub fn evaluate(&self, x: &[f64], u: &[f64], d: &[f64]) -> f64 {
        let v = |i: usize| self.operands[i].value(x, u, d);
        match self.kind {
            TermKind::Constant => 1.0,
            TermKind::Linear => v(0),
            TermKind::QuadraticCross => v(0) * v(1),
            TermKind::SineOfLinear => v(0).sin(),
            TermKind::SineOfQuadratic => (v(0) * v(1)).sin(),
        }
    }
}

/// Display name of an operand; embedded state rows are shown as lagged raw
/// channels when `raw_state_dim` is known.
fn operand_name(op: &Operand, raw_state_dim: Option<usize>) -> String {
    match (op.block, raw_state_dim) {
        (Block::State, Some(n)) if n > 0 => {
            let (lag, ch) = (op.index / n, op.index % n + 1);
            if lag == 0 {
                format!("x{ch}")
            } else {
                format!("x{ch}[t-{lag}]")
            }
        }
        (Block::State, _) => format!("x{}", op.index + 1),
        (Block::Control, _) => format!("u{}", op.index + 1),
        (Block::Exogenous, _) => format!("d{}", op.index + 1),
    }
}

impl FeatureTerm {
    pub fn name(&self, raw_state_dim: Option<usize>) -> String {
        let ops: Vec<String> = self.operands.iter().map(|o| operand_name(o, raw_state_dim)).collect();
        match self.kind {
            TermKind::Constant => "1".into(),
            TermKind::Linear => ops[0].clone(),
            TermKind::QuadraticCross if ops[0] == ops[1] => format!("{}^2", ops[0]),
            TermKind::QuadraticCross => format!("{}*{}", ops[0], ops[1]),
            TermKind::SineOfLinear => format!("sin({})", ops[0]),
            TermKind::SineOfQuadratic => format!("sin({}*{})", ops[0], ops[1]),
        }
    }
}

impl fmt::Display for FeatureTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name(None))
    }
}

/// Ordered candidate terms plus the block dimensions they index into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UncheckedSpec")]
pub struct LibrarySpec {
    state_dim: usize,
    control_dim: usize,
    exogenous_dim: usize,
    terms: Vec<FeatureTerm>,
}

#[derive(Deserialize)]
struct UncheckedSpec {
    state_dim: usize,
    control_dim: usize,
    exogenous_dim: usize,
    terms: Vec<FeatureTerm>,
}

impl TryFrom<UncheckedSpec> for LibrarySpec {
    type Error = Error;

    fn try_from(u: UncheckedSpec) -> Result<Self> {
        LibrarySpec::new(u.state_dim, u.control_dim, u.exogenous_dim, u.terms)
    }
}

impl LibrarySpec {
    pub fn new(state_dim: usize, control_dim: usize, exogenous_dim: usize, terms: Vec<FeatureTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Config("library needs at least one term".into()));
        }
        let mut seen = HashSet::with_capacity(terms.len());
        for term in &terms {
            term.validate()?;
            for op in &term.operands {
                let limit = match op.block {
                    Block::State => state_dim,
                    Block::Control => control_dim,
                    Block::Exogenous => exogenous_dim,
                };
                if op.index >= limit {
                    return Err(Error::Dimension(format!(
                        "term {term} indexes {:?} channel {} but only {limit} exist",
                        op.block, op.index
                    )));
                }
            }
            if !seen.insert(term) {
                return Err(Error::Config(format!("duplicate library term {term}")));
            }
        }
        Ok(Self {
            state_dim,
            control_dim,
            exogenous_dim,
            terms,
        })
    }

    pub fn terms(&self) -> &[FeatureTerm] {
        &self.terms
    }

    /// Feature count `p`.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn exogenous_dim(&self) -> usize {
        self.exogenous_dim
    }

    pub fn position(&self, term: &FeatureTerm) -> Option<usize> {
        self.terms.iter().position(|t| t == term)
    }

    /// Stable hash of the dimensions and term list.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("library spec serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn term_names(&self, raw_state_dim: Option<usize>) -> Vec<String> {
        self.terms.iter().map(|t| t.name(raw_state_dim)).collect()
    }

    fn check_lengths(&self, x: usize, u: usize, d: usize) -> Result<()> {
        if (x, u, d) != (self.state_dim, self.control_dim, self.exogenous_dim) {
            return Err(Error::Dimension(format!(
                "library expects (state, control, exogenous) = ({}, {}, {}), got ({x}, {u}, {d})",
                self.state_dim, self.control_dim, self.exogenous_dim
            )));
        }
        Ok(())
    }

    /// Feature vector at one time step.
    pub fn evaluate_row(&self, x: &[f64], u: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        self.check_lengths(x.len(), u.len(), d.len())?;
        let mut out = vec![0.0; self.len()];
        self.evaluate_row_into(x, u, d, &mut out);
        Ok(out)
    }

    /// Unchecked variant of [`Self::evaluate_row`] for hot loops.
    #[inline]
    pub(crate) fn evaluate_row_into(&self, x: &[f64], u: &[f64], d: &[f64], out: &mut [f64]) {
        for (o, term) in out.iter_mut().zip(&self.terms) {
            *o = term.evaluate(x, u, d);
        }
    }
}

/// Canonical polynomial library over embedded states, controls and exogenous
/// inputs: the constant, every linear term, and for degree 2 every distinct
/// product (upper-triangular over the concatenated channels). Sine families
/// follow when `include_sine` is set.
pub fn build_polynomial_spec(n_e: usize, l: usize, q: usize, degree: usize, include_sine: bool) -> Result<LibrarySpec> {
    if !(1..=2).contains(&degree) {
        return Err(Error::UnsupportedDegree(degree));
    }
    if n_e + l + q == 0 {
        return Err(Error::Config("library needs at least one channel".into()));
    }
    let vars: Vec<Operand> = (0..n_e)
        .map(Operand::state)
        .chain((0..l).map(Operand::control))
        .chain((0..q).map(Operand::exogenous))
        .collect();
    let pairs = || {
        vars.iter()
            .enumerate()
            .flat_map(|(i, a)| vars[i..].iter().map(move |b| (*a, *b)))
    };
    let mut terms = vec![FeatureTerm::constant()];
    terms.extend(vars.iter().copied().map(FeatureTerm::linear));
    if degree == 2 {
        terms.extend(pairs().map(|(a, b)| FeatureTerm::product(a, b)));
    }
    if include_sine {
        terms.extend(vars.iter().copied().map(FeatureTerm::sine));
        if degree == 2 {
            terms.extend(pairs().map(|(a, b)| FeatureTerm::sine_product(a, b)));
        }
    }
    LibrarySpec::new(n_e, l, q, terms)
}

/// Library evaluated over every snapshot column (`p x m_s`, one row per term)
/// with the per-term scale factors used by the sparse solver.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub theta_t: DMatrix<f64>,
    pub column_scales: Vec<f64>,
    /// Fingerprint of the spec that produced the rows, empty if unknown.
    pub library_fingerprint: String,
}

impl FeatureMatrix {
    pub fn from_rows(theta_t: DMatrix<f64>) -> Self {
        let column_scales = theta_t
            .row_iter()
            .map(|row| {
                let m = row.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                if m > 0.0 && m.is_finite() {
                    m
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            theta_t,
            column_scales,
            library_fingerprint: String::new(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.theta_t.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.theta_t.ncols()
    }
}

/// Evaluates `spec` on every column of `(X, Gamma, D)`.
pub fn evaluate_library(spec: &LibrarySpec, snap: &SnapshotSet) -> Result<FeatureMatrix> {
    spec.check_lengths(snap.x.nrows(), snap.gamma.nrows(), snap.d.nrows())?;
    let m = snap.len();
    let mut theta_t = DMatrix::zeros(spec.len(), m);
    let mut row = vec![0.0; spec.len()];
    for j in 0..m {
        let x = snap.x.column(j);
        let u = snap.gamma.column(j);
        let d = snap.d.column(j);
        spec.evaluate_row_into(x.as_slice(), u.as_slice(), d.as_slice(), &mut row);
        theta_t.column_mut(j).copy_from_slice(&row);
    }
    let mut fm = FeatureMatrix::from_rows(theta_t);
    fm.library_fingerprint = spec.fingerprint();
    Ok(fm)
}
