//! Fixed-design linear analysis of gated routing.
//!
//! Targets are `y = G* X w* + (I - G*) A v* + e` with `G*` a diagonal 0/1
//! mask (1 = clean row), `e ~ N(0, sigma^2 I)`. Two estimators of `w*` are
//! compared by their expected risk on the clean rows:
//!
//! * ordinary least squares on `X`;
//! * the routed estimator: least squares of `y` on `[G X, (I - G) A]`
//!   for a caller-supplied mask `G`, keeping the `X` block.
//!
//! Closed-form bias/variance decompositions are given for both, along with
//! a Monte-Carlo estimate of the same risk.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Largest accepted condition number of any matrix that gets factorized.
pub const MAX_CONDITION: f64 = 1e10;

const SETUP_RETRIES: usize = 32;
const MC_CHUNK: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearRiskSetup {
    x: DMatrix<f64>,
    a: DMatrix<f64>,
    w_star: DVector<f64>,
    v_star: DVector<f64>,
    gamma_star: Vec<bool>,
    sigma: f64,
    delta_star: DVector<f64>,
}

impl LinearRiskSetup {
    pub fn new(
        x: DMatrix<f64>,
        a: DMatrix<f64>,
        w_star: DVector<f64>,
        v_star: DVector<f64>,
        gamma_star: Vec<bool>,
        sigma: f64,
    ) -> Result<Self> {
        let n = x.nrows();
        if a.nrows() != n || gamma_star.len() != n {
            return Err(Error::Shape(format!(
                "X has {n} rows, A has {}, mask has {}",
                a.nrows(),
                gamma_star.len()
            )));
        }
        if w_star.len() != x.ncols() || v_star.len() != a.ncols() {
            return Err(Error::Shape("w*/v* lengths must match the X/A column counts".into()));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Setup("sigma must be finite and >= 0".into()));
        }
        if !gamma_star.iter().any(|&c| c) {
            return Err(Error::Setup("at least one clean row is required".into()));
        }
        let delta_star = &x * &w_star - &a * &v_star;
        Ok(LinearRiskSetup {
            x,
            a,
            w_star,
            v_star,
            gamma_star,
            sigma,
            delta_star,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn w_star(&self) -> &DVector<f64> {
        &self.w_star
    }

    pub fn v_star(&self) -> &DVector<f64> {
        &self.v_star
    }

    pub fn gamma_star(&self) -> &[bool] {
        &self.gamma_star
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `X w* - A v*`.
    pub fn delta_star(&self) -> &DVector<f64> {
        &self.delta_star
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn n1(&self) -> usize {
        self.gamma_star.iter().filter(|&&c| c).count()
    }

    pub fn n2(&self) -> usize {
        self.n() - self.n1()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.a.ncols()
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(
            self.x.clone(),
            self.a.clone(),
            self.w_star.clone(),
            self.v_star.clone(),
            self.gamma_star.clone(),
            sigma,
        )
    }

    /// Same setup with `delta* -> c delta*`, obtained by scaling `w*` and `v*`.
    pub fn with_scaled_signal(&self, c: f64) -> Result<Self> {
        Self::new(
            self.x.clone(),
            self.a.clone(),
            &self.w_star * c,
            &self.v_star * c,
            self.gamma_star.clone(),
            self.sigma,
        )
    }

    /// Noise-free targets `G* X w* + (I - G*) A v*`.
    pub fn mean_targets(&self) -> DVector<f64> {
        let xw = &self.x * &self.w_star;
        let av = &self.a * &self.v_star;
        DVector::from_fn(self.n(), |i, _| if self.gamma_star[i] { xw[i] } else { av[i] })
    }

    pub fn targets(&self, noise: &DVector<f64>) -> DVector<f64> {
        self.mean_targets() + noise
    }

    pub fn sample_targets<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let noise = DVector::from_fn(self.n(), |_, _| self.sigma * rng.sample::<f64, _>(StandardNormal));
        self.targets(&noise)
    }

    fn clean_rows(&self) -> DMatrix<f64> {
        masked_rows(&self.x, &self.gamma_star, true)
    }

    /// `Q1 = X1^T X1` over the clean rows.
    pub fn q1(&self) -> DMatrix<f64> {
        let x1 = self.clean_rows();
        x1.transpose() * x1
    }
}

fn masked_rows(m: &DMatrix<f64>, mask: &[bool], keep: bool) -> DMatrix<f64> {
    let rows: Vec<usize> = (0..m.nrows()).filter(|&i| mask[i] == keep).collect();
    m.select_rows(&rows)
}

/// Zeroes the rows where `mask[i] != keep`.
fn zero_rows(m: &DMatrix<f64>, mask: &[bool], keep: bool) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, &g) in mask.iter().enumerate() {
        if g != keep {
            out.row_mut(i).fill(0.0);
        }
    }
    out
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Cholesky factor of a symmetric positive-definite matrix, after the
/// condition-number guard.
fn guarded_cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let cond = condition(&m);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Numeric(format!(
            "{what} is ill-conditioned (condition estimate {cond:.3e})"
        )));
    }
    m.cholesky()
        .ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetupSpec {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    /// Number of noisy rows, chosen uniformly at random.
    pub n2: usize,
    /// Scale of `v*` relative to `w*`.
    pub pi_scale: f64,
    pub sigma: f64,
    /// Floor on the smallest singular value of `X / sqrt(n)` and of the
    /// noisy block of `A / sqrt(n2)`; designs below it are rescaled.
    pub min_singular_value: f64,
    /// Redraw the design while any checked matrix exceeds this condition.
    pub max_condition: f64,
    pub seed: u64,
}

impl Default for SetupSpec {
    fn default() -> Self {
        SetupSpec {
            n: 200,
            d: 8,
            m: 8,
            n2: 60,
            pi_scale: 3.0,
            sigma: 1.0,
            min_singular_value: 0.0,
            max_condition: 1e6,
            seed: 0,
        }
    }
}

impl SetupSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n <= self.d + self.m {
            return Err(Error::Setup(format!(
                "n = {} must exceed d + m = {}",
                self.n,
                self.d + self.m
            )));
        }
        if self.d == 0 {
            return Err(Error::Setup("d must be >= 1".into()));
        }
        if self.n2 >= self.n {
            return Err(Error::Setup("at least one clean row is required".into()));
        }
        if self.n - self.n2 < self.d {
            return Err(Error::Setup(format!(
                "{} clean rows cannot identify {} coefficients",
                self.n - self.n2,
                self.d
            )));
        }
        if self.n2 > 0 && self.n2 < self.m {
            return Err(Error::Setup(format!(
                "{} noisy rows cannot identify {} PI coefficients",
                self.n2, self.m
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Setup("sigma must be finite and >= 0".into()));
        }
        if !(self.max_condition >= 1.0 && self.max_condition <= MAX_CONDITION) {
            return Err(Error::Setup(format!("max_condition must lie in [1, {MAX_CONDITION:e}]")));
        }
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // Column-major fill; the draw order is part of the determinism contract.
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn rescale_to_floor(m: &mut DMatrix<f64>, rows: usize, floor: f64) {
    if floor <= 0.0 || m.ncols() == 0 || rows == 0 {
        return;
    }
    let smin = m.singular_values().min() / (rows as f64).sqrt();
    if smin > 0.0 && smin < floor {
        *m *= floor / smin;
    }
}

/// Gaussian design with a random noisy-row mask.
pub fn make_setup(spec: &SetupSpec) -> Result<LinearRiskSetup> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(spec.seed, stream::LINEAR_SETUP));
    for _ in 0..SETUP_RETRIES {
        let mut x = gaussian(spec.n, spec.d, &mut rng);
        let mut a = gaussian(spec.n, spec.m, &mut rng);
        let w_star = DVector::from_fn(spec.d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v_star = DVector::from_fn(spec.m, |_, _| spec.pi_scale * rng.sample::<f64, _>(StandardNormal));
        let mut order: Vec<usize> = (0..spec.n).collect();
        order.shuffle(&mut rng);
        let mut gamma_star = vec![true; spec.n];
        for &i in &order[..spec.n2] {
            gamma_star[i] = false;
        }

        rescale_to_floor(&mut x, spec.n, spec.min_singular_value);
        let a2 = masked_rows(&a, &gamma_star, false);
        if spec.n2 > 0 && spec.min_singular_value > 0.0 && spec.m > 0 {
            let smin = a2.singular_values().min() / (spec.n2 as f64).sqrt();
            if smin > 0.0 && smin < spec.min_singular_value {
                a *= spec.min_singular_value / smin;
            }
        }

        let setup = LinearRiskSetup::new(x, a, w_star, v_star, gamma_star, spec.sigma)?;
        if setup_is_well_conditioned(&setup, spec.max_condition) {
            return Ok(setup);
        }
    }
    Err(Error::Setup(format!(
        "no design met condition <= {:.3e} after {SETUP_RETRIES} draws",
        spec.max_condition
    )))
}

fn setup_is_well_conditioned(setup: &LinearRiskSetup, max_condition: f64) -> bool {
    let x = setup.x();
    let ok = |m: &DMatrix<f64>| m.nrows() == 0 || condition(m) <= max_condition;
    let q = x.transpose() * x;
    let q1 = setup.q1();
    let mut checks = vec![q, q1];
    if setup.n2() > 0 && setup.m() > 0 {
        let a2 = masked_rows(setup.a(), setup.gamma_star(), false);
        checks.push(a2.transpose() * &a2);
        let joint = joint_design(setup, setup.gamma_star());
        checks.push(joint.transpose() * joint);
    }
    checks.iter().all(ok)
}

/// `[G X, (I - G) A]`.
pub fn joint_design(setup: &LinearRiskSetup, gamma: &[bool]) -> DMatrix<f64> {
    let xb = zero_rows(setup.x(), gamma, true);
    let ab = zero_rows(setup.a(), gamma, false);
    let mut out = DMatrix::zeros(setup.n(), setup.d() + setup.m());
    out.columns_mut(0, setup.d()).copy_from(&xb);
    out.columns_mut(setup.d(), setup.m()).copy_from(&ab);
    out
}

/// Flips `flips` distinct, randomly chosen mask entries.
pub fn corrupt_mask(gamma: &[bool], flips: usize, seed: u64) -> Result<Vec<bool>> {
    if flips > gamma.len() {
        return Err(Error::Setup(format!(
            "cannot flip {flips} of {} mask entries",
            gamma.len()
        )));
    }
    let mut rng = seed::rng(seed::derive(seed, stream::MASK_CORRUPTION));
    let mut order: Vec<usize> = (0..gamma.len()).collect();
    order.shuffle(&mut rng);
    let mut out = gamma.to_vec();
    for &i in &order[..flips] {
        out[i] = !out[i];
    }
    Ok(out)
}

/// `(X^T X)^-1 X^T`, the linear map from targets to the OLS estimate.
pub fn ols_operator(setup: &LinearRiskSetup) -> Result<DMatrix<f64>> {
    let x = setup.x();
    let chol = guarded_cholesky(x.transpose() * x, "X^T X")?;
    Ok(chol.solve(&x.transpose()))
}

/// Least squares of `y` on `X`, solved through a QR factorization of `X`.
pub fn ols_fit(setup: &LinearRiskSetup, y: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != setup.n() {
        return Err(Error::Shape(format!("y has {} entries, expected {}", y.len(), setup.n())));
    }
    let x = setup.x();
    let cond = condition(&(x.transpose() * x));
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Numeric(format!(
            "X^T X is ill-conditioned (condition estimate {cond:.3e})"
        )));
    }
    let qr = x.clone().qr();
    let rhs = qr.q().transpose() * y;
    qr.r()
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::Numeric("X is rank deficient".into()))
}

/// Matrices of the routed estimator for a mask `gamma`.
#[derive(Clone, Debug)]
pub struct RoutedOperators {
    /// Projector onto the column span of `(I - G) A`, `n x n`.
    pub projector: DMatrix<f64>,
    /// `G X`.
    pub x_masked: DMatrix<f64>,
    /// `(I - projector) G X`.
    pub x_residual: DMatrix<f64>,
    /// `x_residual^T x_residual`.
    pub q_residual: DMatrix<f64>,
    /// `q_residual^-1 x_residual^T`; the estimate is `hat * y`.
    pub hat: DMatrix<f64>,
}

pub fn routed_operators(setup: &LinearRiskSetup, gamma: &[bool]) -> Result<RoutedOperators> {
    if gamma.len() != setup.n() {
        return Err(Error::Shape(format!(
            "mask has {} entries, expected {}",
            gamma.len(),
            setup.n()
        )));
    }
    let n = setup.n();
    let x_masked = zero_rows(setup.x(), gamma, true);
    let a_masked = zero_rows(setup.a(), gamma, false);
    let routed = gamma.iter().filter(|&&g| !g).count();

    let projector = if routed == 0 || setup.m() == 0 {
        DMatrix::zeros(n, n)
    } else {
        let chol = guarded_cholesky(a_masked.transpose() * &a_masked, "masked A^T A")?;
        &a_masked * chol.solve(&a_masked.transpose())
    };
    let x_residual = (DMatrix::identity(n, n) - &projector) * &x_masked;
    let q_residual = x_residual.transpose() * &x_residual;
    let chol = guarded_cholesky(q_residual.clone(), "masked X^T X")?;
    let hat = chol.solve(&x_residual.transpose());
    Ok(RoutedOperators {
        projector,
        x_masked,
        x_residual,
        q_residual,
        hat,
    })
}

/// The `w` block of least squares on `[G X, (I - G) A]`.
pub fn pidual_fit(setup: &LinearRiskSetup, y: &DVector<f64>, gamma: &[bool]) -> Result<DVector<f64>> {
    if y.len() != setup.n() {
        return Err(Error::Shape(format!("y has {} entries, expected {}", y.len(), setup.n())));
    }
    Ok(routed_operators(setup, gamma)?.hat * y)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskBreakdown {
    pub bias_term: f64,
    pub variance_term: f64,
    pub irreducible: f64,
    pub total: f64,
}

impl RiskBreakdown {
    fn new(bias_term: f64, variance_term: f64, irreducible: f64) -> Self {
        RiskBreakdown {
            bias_term,
            variance_term,
            irreducible,
            total: bias_term + variance_term + irreducible,
        }
    }
}

/// Expected clean-row risk of OLS:
/// `|G* P_x (I - G*) delta*|^2 / n1 + sigma^2 tr(Q^-1 Q1) / n1 + sigma^2`
/// with `P_x = X Q^-1 X^T`.
pub fn closed_form_risk_ols(setup: &LinearRiskSetup) -> Result<RiskBreakdown> {
    let x = setup.x();
    let n1 = setup.n1() as f64;
    let s2 = setup.sigma() * setup.sigma();
    let chol = guarded_cholesky(x.transpose() * x, "X^T X")?;
    let noisy_delta = zero_rows_vec(setup.delta_star(), setup.gamma_star(), false);
    let projected = x * chol.solve(&(x.transpose() * noisy_delta));
    let bias = zero_rows_vec(&projected, setup.gamma_star(), true).norm_squared() / n1;
    let variance = s2 * chol.solve(&setup.q1()).trace() / n1;
    Ok(RiskBreakdown::new(bias, variance, s2))
}

fn zero_rows_vec(v: &DVector<f64>, mask: &[bool], keep: bool) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| if mask[i] == keep { v[i] } else { 0.0 })
}

/// Expected clean-row risk of the routed estimator:
/// `|G* X H (G* - G) delta*|^2 / n1 + sigma^2 tr(Qa^-1 Q1) / n1 + sigma^2`.
pub fn closed_form_risk_pidual(setup: &LinearRiskSetup, gamma: &[bool]) -> Result<RiskBreakdown> {
    let ops = routed_operators(setup, gamma)?;
    let n1 = setup.n1() as f64;
    let s2 = setup.sigma() * setup.sigma();
    let mismatch = DVector::from_fn(setup.n(), |i, _| {
        let diff = setup.gamma_star()[i] as i32 - gamma[i] as i32;
        diff as f64 * setup.delta_star()[i]
    });
    let fitted = setup.x() * (&ops.hat * mismatch);
    let bias = zero_rows_vec(&fitted, setup.gamma_star(), true).norm_squared() / n1;
    let chol = guarded_cholesky(ops.q_residual.clone(), "masked X^T X")?;
    let variance = s2 * chol.solve(&setup.q1()).trace() / n1;
    Ok(RiskBreakdown::new(bias, variance, s2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "mask")]
pub enum Estimator {
    Ols,
    PiDual(Vec<bool>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub resamples: usize,
}

/// Mean over fresh training-noise draws of
/// `|G* X (theta(y) - w*)|^2 / n1 + sigma^2`.
///
/// Draws are split into fixed-size chunks, each with its own derived stream,
/// so the result does not depend on the number of threads.
pub fn monte_carlo_risk(
    setup: &LinearRiskSetup,
    estimator: &Estimator,
    resamples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    if resamples == 0 {
        return Err(Error::Setup("resamples must be >= 1".into()));
    }
    let operator = match estimator {
        Estimator::Ols => ols_operator(setup)?,
        Estimator::PiDual(gamma) => routed_operators(setup, gamma)?.hat,
    };
    let x1 = setup.clean_rows();
    let n = setup.n();
    let n1 = setup.n1() as f64;
    let sigma = setup.sigma();
    let s2 = sigma * sigma;
    let base = &operator * setup.mean_targets() - setup.w_star();
    let base_fit = &x1 * base;
    let mc_seed = seed::derive(seed, stream::MONTE_CARLO);

    let chunks = resamples.div_ceil(MC_CHUNK);
    let partials: Vec<Result<(f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed::rng(seed::derive(mc_seed, c as u64));
            let draws = MC_CHUNK.min(resamples - c * MC_CHUNK);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut noise = DVector::zeros(n);
            for k in 0..draws {
                noise
                    .iter_mut()
                    .for_each(|e| *e = sigma * rng.sample::<f64, _>(StandardNormal));
                let err = &base_fit + &x1 * (&operator * &noise);
                let risk = err.norm_squared() / n1 + s2;
                if !risk.is_finite() {
                    return Err(Error::Numeric(format!(
                        "draw {} produced a non-finite risk",
                        c * MC_CHUNK + k
                    )));
                }
                sum += risk;
                sum_sq += risk * risk;
            }
            Ok((sum, sum_sq))
        })
        .collect();

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for p in partials {
        let (s, q) = p?;
        sum += s;
        sum_sq += q;
    }
    let r = resamples as f64;
    let mean = sum / r;
    let var = if resamples > 1 {
        ((sum_sq - r * mean * mean) / (r - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(MonteCarloEstimate {
        mean,
        std_error: (var / r).sqrt(),
        resamples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskComparison {
    pub ols: RiskBreakdown,
    pub pidual: RiskBreakdown,
    /// `ols.total > pidual.total`.
    pub pidual_preferred: bool,
}

pub fn compare_risks(setup: &LinearRiskSetup, gamma: &[bool]) -> Result<RiskComparison> {
    let ols = closed_form_risk_ols(setup)?;
    let pidual = closed_form_risk_pidual(setup, gamma)?;
    Ok(RiskComparison {
        ols,
        pidual,
        pidual_preferred: ols.total > pidual.total,
    })
}

/// One line of the risk table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub setup_id: usize,
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    pub d: usize,
    pub m: usize,
    pub sigma: f64,
    pub ols_bias: f64,
    pub ols_var: f64,
    pub pidual_bias: f64,
    pub pidual_var: f64,
    pub ols_total: f64,
    pub pidual_total: f64,
    pub mc_ols: Option<f64>,
    pub mc_pidual: Option<f64>,
    /// Number of mask entries flipped relative to the true mask.
    pub flips: usize,
    pub mc_ols_se: Option<f64>,
    pub mc_pidual_se: Option<f64>,
}

impl RiskRow {
    pub fn new(
        setup_id: usize,
        setup: &LinearRiskSetup,
        flips: usize,
        cmp: &RiskComparison,
        mc: Option<(MonteCarloEstimate, MonteCarloEstimate)>,
    ) -> Self {
        RiskRow {
            setup_id,
            n: setup.n(),
            n1: setup.n1(),
            n2: setup.n2(),
            d: setup.d(),
            m: setup.m(),
            sigma: setup.sigma(),
            ols_bias: cmp.ols.bias_term,
            ols_var: cmp.ols.variance_term,
            pidual_bias: cmp.pidual.bias_term,
            pidual_var: cmp.pidual.variance_term,
            ols_total: cmp.ols.total,
            pidual_total: cmp.pidual.total,
            mc_ols: mc.map(|(o, _)| o.mean),
            mc_pidual: mc.map(|(_, p)| p.mean),
            flips,
            mc_ols_se: mc.map(|(o, _)| o.std_error),
            mc_pidual_se: mc.map(|(_, p)| p.std_error),
        }
    }
}

pub fn write_risk_csv(rows: &[RiskRow], path: &Path) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(err) => Error::io(path, err),
        other => Error::Numeric(format!("{other:?}")),
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(io)?;
    for row in rows {
        w.serialize(row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_risk_csv(path: &Path) -> Result<Vec<RiskRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        row: 0,
        message: e.to_string(),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                row: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SetupSpec {
        SetupSpec {
            n: 60,
            d: 3,
            m: 2,
            n2: 20,
            seed,
            ..SetupSpec::default()
        }
    }

    #[test]
    fn all_clean_mask() {
        let s = make_setup(&SetupSpec { n2: 0, ..spec(1) }).unwrap();
        assert_eq!(s.n2(), 0);
        assert!(s.gamma_star().iter().all(|&c| c));
    }

    #[test]
    fn underdetermined_rejected() {
        let err = make_setup(&SetupSpec { n: 5, ..spec(1) }).unwrap_err();
        assert!(matches!(err, Error::Setup(_)));
    }

    #[test]
    fn setup_is_deterministic() {
        assert_eq!(make_setup(&spec(4)).unwrap(), make_setup(&spec(4)).unwrap());
        assert_ne!(make_setup(&spec(4)).unwrap(), make_setup(&spec(5)).unwrap());
    }

    #[test]
    fn unreachable_conditioning_is_setup_error() {
        let err = make_setup(&SetupSpec {
            max_condition: 1.0,
            ..spec(1)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Setup(_)));
    }

    #[test]
    fn noiseless_ols_recovers_truth() {
        let s = make_setup(&SetupSpec {
            n2: 0,
            sigma: 0.0,
            ..spec(2)
        })
        .unwrap();
        let w = ols_fit(&s, &s.mean_targets()).unwrap();
        assert!((w - s.w_star()).amax() < 1e-8);
    }

    #[test]
    fn ols_of_zero_is_zero() {
        let s = make_setup(&spec(2)).unwrap();
        assert_eq!(ols_fit(&s, &DVector::zeros(s.n())).unwrap().amax(), 0.0);
    }

    #[test]
    fn ols_matches_normal_equations_by_lu() {
        let mut rng = seed::rng(17);
        let x = gaussian(5, 2, &mut rng);
        let y = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = LinearRiskSetup::new(
            x.clone(),
            DMatrix::zeros(5, 0),
            DVector::zeros(2),
            DVector::zeros(0),
            vec![true; 5],
            1.0,
        )
        .unwrap();
        let oracle = (x.transpose() * &x).lu().solve(&(x.transpose() * &y)).unwrap();
        assert!((ols_fit(&s, &y).unwrap() - oracle).amax() < 1e-12);
    }

    #[test]
    fn matched_mask_noiseless_recovers_truth() {
        let s = make_setup(&SetupSpec { sigma: 0.0, ..spec(3) }).unwrap();
        let w = pidual_fit(&s, &s.mean_targets(), s.gamma_star()).unwrap();
        assert!((w - s.w_star()).amax() < 1e-8);
    }

    #[test]
    fn identity_mask_reduces_to_ols() {
        let s = make_setup(&spec(3)).unwrap();
        let y = s.sample_targets(&mut seed::rng(1));
        let all = vec![true; s.n()];
        let a = pidual_fit(&s, &y, &all).unwrap();
        let b = ols_fit(&s, &y).unwrap();
        assert!((a - b).amax() < 1e-10);
    }

    #[test]
    fn routed_fit_matches_joint_svd_least_squares() {
        for seed in 0..5 {
            let s = make_setup(&spec(seed)).unwrap();
            let gamma = corrupt_mask(s.gamma_star(), 3, seed).unwrap();
            let y = s.sample_targets(&mut seed::rng(seed));
            let joint = joint_design(&s, &gamma);
            let theta = joint.svd(true, true).solve(&y, 1e-14).unwrap();
            let w = pidual_fit(&s, &y, &gamma).unwrap();
            assert!((w - theta.rows(0, s.d())).amax() < 1e-8);
        }
    }

    #[test]
    fn rank_deficient_mask_rejected() {
        let s = make_setup(&spec(3)).unwrap();
        // One routed row cannot determine two PI coefficients.
        let mut gamma = vec![true; s.n()];
        gamma[0] = false;
        assert!(matches!(pidual_fit(&s, &s.mean_targets(), &gamma), Err(Error::Numeric(_))));
    }

    #[test]
    fn projector_and_hat_identities() {
        let s = make_setup(&spec(6)).unwrap();
        let gamma = corrupt_mask(s.gamma_star(), 4, 6).unwrap();
        let ops = routed_operators(&s, &gamma).unwrap();
        let p = &ops.projector;
        assert!((p * p - p).amax() < 1e-10);
        let a_masked = zero_rows(s.a(), &gamma, false);
        assert!(((DMatrix::identity(s.n(), s.n()) - p) * a_masked).amax() < 1e-10);
        let hx = &ops.hat * &ops.x_masked;
        assert!((hx - DMatrix::identity(s.d(), s.d())).amax() < 1e-8);
    }

    #[test]
    fn ols_bias_vanishes_without_noisy_rows() {
        let s = make_setup(&SetupSpec { n2: 0, ..spec(7) }).unwrap();
        let r = closed_form_risk_ols(&s).unwrap();
        assert_eq!(r.bias_term, 0.0);
        let expected = s.sigma().powi(2) * (s.x().transpose() * s.x()).lu().solve(&s.q1()).unwrap().trace()
            / s.n1() as f64
            + s.sigma().powi(2);
        assert!((r.total - expected).abs() < 1e-12);
    }

    #[test]
    fn single_point_ols_risk() {
        let s = LinearRiskSetup::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 0),
            DVector::from_element(1, 0.7),
            DVector::zeros(0),
            vec![true],
            1.0,
        )
        .unwrap();
        let r = closed_form_risk_ols(&s).unwrap();
        assert_eq!((r.variance_term, r.irreducible, r.total), (1.0, 1.0, 2.0));
        let mc = monte_carlo_risk(&s, &Estimator::Ols, 20_000, 3).unwrap();
        assert!((mc.mean - 2.0).abs() < 4.0 * mc.std_error);
    }

    #[test]
    fn bias_is_quadratic_in_signal() {
        let s = make_setup(&spec(8)).unwrap();
        let gamma = corrupt_mask(s.gamma_star(), 5, 8).unwrap();
        let scaled = s.with_scaled_signal(3.0).unwrap();
        let a = compare_risks(&s, &gamma).unwrap();
        let b = compare_risks(&scaled, &gamma).unwrap();
        assert!((b.ols.bias_term - 9.0 * a.ols.bias_term).abs() < 1e-9 * b.ols.bias_term.max(1.0));
        assert!((b.pidual.bias_term - 9.0 * a.pidual.bias_term).abs() < 1e-9 * b.pidual.bias_term.max(1.0));
    }

    #[test]
    fn matched_mask_has_zero_bias() {
        let s = make_setup(&spec(9)).unwrap();
        let r = closed_form_risk_pidual(&s, s.gamma_star()).unwrap();
        assert_eq!(r.bias_term, 0.0);
    }

    #[test]
    fn single_flip_changes_bias_and_variance_only() {
        let s = make_setup(&spec(10)).unwrap();
        let base = closed_form_risk_pidual(&s, s.gamma_star()).unwrap();
        let noisy = s.gamma_star().iter().position(|&c| !c).unwrap();
        let clean = s.gamma_star().iter().position(|&c| c).unwrap();

        // A noisy row fed to the feature path biases the estimate.
        let mut gamma = s.gamma_star().to_vec();
        gamma[noisy] = true;
        let r = closed_form_risk_pidual(&s, &gamma).unwrap();
        assert_eq!(r.irreducible, base.irreducible);
        assert!(r.bias_term > 0.0);
        assert_ne!(r.variance_term, base.variance_term);
        assert_eq!(r.total, r.bias_term + r.variance_term + r.irreducible);

        // A clean row routed away only costs variance.
        let mut gamma = s.gamma_star().to_vec();
        gamma[clean] = false;
        let r = closed_form_risk_pidual(&s, &gamma).unwrap();
        assert!(r.bias_term < 1e-20);
        assert!(r.variance_term > base.variance_term);
    }

    #[test]
    fn noiseless_matched_monte_carlo_is_zero() {
        let s = make_setup(&SetupSpec { sigma: 0.0, ..spec(11) }).unwrap();
        let mc = monte_carlo_risk(&s, &Estimator::PiDual(s.gamma_star().to_vec()), 10, 1).unwrap();
        assert!(mc.mean < 1e-20);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let s = make_setup(&spec(12)).unwrap();
        let a = monte_carlo_risk(&s, &Estimator::Ols, 1, 5).unwrap();
        let b = monte_carlo_risk(&s, &Estimator::Ols, 1, 5).unwrap();
        assert_eq!(a, b);
        assert!(monte_carlo_risk(&s, &Estimator::Ols, 0, 5).is_err());
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        let s = make_setup(&SetupSpec {
            n: 200,
            d: 8,
            m: 8,
            n2: 60,
            ..spec(13)
        })
        .unwrap();
        let gamma = corrupt_mask(s.gamma_star(), 6, 13).unwrap();
        let cmp = compare_risks(&s, &gamma).unwrap();
        let mc_o = monte_carlo_risk(&s, &Estimator::Ols, 50_000, 1).unwrap();
        let mc_p = monte_carlo_risk(&s, &Estimator::PiDual(gamma), 50_000, 2).unwrap();
        assert!(((mc_o.mean - cmp.ols.total) / cmp.ols.total).abs() < 0.02);
        assert!(((mc_p.mean - cmp.pidual.total) / cmp.pidual.total).abs() < 0.02);
    }

    #[test]
    fn large_gap_prefers_routing() {
        let s = make_setup(&SetupSpec {
            n2: 30,
            pi_scale: 10.0,
            ..spec(14)
        })
        .unwrap();
        let cmp = compare_risks(&s, s.gamma_star()).unwrap();
        assert!(cmp.pidual_preferred);
        let mc_o = monte_carlo_risk(&s, &Estimator::Ols, 5_000, 1).unwrap();
        let mc_p = monte_carlo_risk(&s, &Estimator::PiDual(s.gamma_star().to_vec()), 5_000, 2).unwrap();
        assert!(mc_o.mean > mc_p.mean);
    }

    #[test]
    fn clean_data_never_prefers_routing() {
        let s = make_setup(&SetupSpec { n2: 0, ..spec(15) }).unwrap();
        let cmp = compare_risks(&s, &vec![true; s.n()]).unwrap();
        assert!(!cmp.pidual_preferred);
        assert!((cmp.ols.total - cmp.pidual.total).abs() < 1e-10);
    }

    #[test]
    fn variance_trace_ordering() {
        for seed in 0..5 {
            let s = make_setup(&SetupSpec {
                sigma: 100.0,
                ..spec(seed)
            })
            .unwrap()
            .with_scaled_signal(0.0)
            .unwrap();
            let cmp = compare_risks(&s, s.gamma_star()).unwrap();
            assert!(cmp.ols.variance_term <= cmp.pidual.variance_term);
            assert!(!cmp.pidual_preferred);
        }
    }

    #[test]
    fn risk_csv_round_trip() {
        let s = make_setup(&spec(16)).unwrap();
        let cmp = compare_risks(&s, s.gamma_star()).unwrap();
        let rows = vec![
            RiskRow::new(0, &s, 0, &cmp, None),
            RiskRow::new(
                1,
                &s,
                0,
                &cmp,
                Some((
                    monte_carlo_risk(&s, &Estimator::Ols, 10, 1).unwrap(),
                    monte_carlo_risk(&s, &Estimator::PiDual(s.gamma_star().to_vec()), 10, 1).unwrap(),
                )),
            ),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("risk.csv");
        write_risk_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("setup_id,n,n1,n2,d,m,sigma,ols_bias,ols_var,pidual_bias,pidual_var,ols_total,pidual_total,mc_ols,mc_pidual,"));
        assert_eq!(read_risk_csv(&path).unwrap(), rows);
    }
}
