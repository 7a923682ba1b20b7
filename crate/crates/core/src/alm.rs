//! Low-rank plus sparse-gradient decomposition of a log-domain stack.
//!
//! Solves
//!
//! ```text
//! min ||S1||_* + lambda ||S2||_1
//! s.t. S1 = L, S2 = P L, M = L + N, N.N - 9 sigma.sigma + eps = 0, eps >= 0
//! ```
//!
//! with an augmented Lagrangian. Each outer iteration takes proximal steps in
//! `S1` (singular value thresholding) and `S2` (soft thresholding), explicit
//! gradient steps in `L` and `N`, a closed-form clamped update of `eps`, then
//! updates the multipliers and grows the penalty `theta`.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{grad_adjoint_columns, grad_columns, ImageGrid, LogVolume, SigmaMap};

/// Scaling of the multiplier update `Y += step * G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiplierStep {
    /// `step = 1 / theta`.
    InverseTheta,
    /// `step = theta`, the usual ALM choice.
    Standard,
}

/// Which iterates the `N` and `eps` updates see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    /// `L`, `N` and `eps` are all computed from the previous iterate.
    Jacobi,
    /// `N` uses the new `L` and `eps` uses the new `N`.
    GaussSeidel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub lambda: f64,
    pub theta0: f64,
    pub rho: f64,
    pub theta_max: f64,
    pub step_l: f64,
    pub step_n: f64,
    pub max_iters: usize,
    /// Relative change of `L` below which the iteration stops, checked once
    /// `theta` has reached `theta_max`.
    pub tol: f64,
    pub multiplier_step: MultiplierStep,
    pub update_order: UpdateOrder,
    /// Gradient steps for `L` and for `N` per outer iteration.
    pub inner_steps: usize,
    /// Shrink the `N` step per element to `1 / curvature` where the quartic
    /// constraint term makes `step_n` unstable.
    pub cap_noise_step: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            lambda: 0.2,
            theta0: 1e-2,
            rho: 1.6,
            theta_max: 10.0,
            step_l: 1e-2,
            step_n: 5e-2,
            max_iters: 100,
            tol: 1e-4,
            multiplier_step: MultiplierStep::Standard,
            update_order: UpdateOrder::GaussSeidel,
            inner_steps: 1,
            cap_noise_step: true,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("theta0", self.theta0),
            ("theta_max", self.theta_max),
            ("step_l", self.step_l),
            ("step_n", self.step_n),
            ("tol", self.tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be positive and finite, got {v}")));
            }
        }
        if !(self.rho > 1.0 && self.rho.is_finite()) {
            return Err(Error::param("rho", format!("must exceed 1, got {}", self.rho)));
        }
        if self.theta0 > self.theta_max {
            return Err(Error::param(
                "theta0",
                format!("{} exceeds theta_max {}", self.theta0, self.theta_max),
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be at least 1"));
        }
        if self.inner_steps == 0 {
            return Err(Error::param("inner_steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// Iterates of the solver. `s2` and `y2` have twice the rows of the others.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub rows: usize,
    pub cols: usize,
    pub l: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub s1: DMatrix<f64>,
    pub s2: DMatrix<f64>,
    pub eps: DMatrix<f64>,
    pub y1: DMatrix<f64>,
    pub y2: DMatrix<f64>,
    pub y3: DMatrix<f64>,
    pub y4: DMatrix<f64>,
    pub theta: f64,
    pub iter: usize,
}

impl SolverState {
    /// `L` is the per-pixel frame mean of `M`, `N = M - L`, everything else 0.
    pub fn initial(m: &LogVolume, theta0: f64) -> Self {
        let mean = m.mean_frame();
        let k = m.frame_count();
        let col = DMatrix::from_column_slice(mean.as_slice().len(), 1, mean.as_slice());
        let l = DMatrix::from_fn(col.nrows(), k, |i, _| col[(i, 0)]);
        let n = m.data() - &l;
        Self::from_parts(m.rows(), m.cols(), l, n, theta0)
    }

    /// State with the given `L`, `N` and zero auxiliaries and multipliers.
    pub fn from_parts(rows: usize, cols: usize, l: DMatrix<f64>, n: DMatrix<f64>, theta: f64) -> Self {
        let (p, k) = l.shape();
        SolverState {
            rows,
            cols,
            s1: l.clone(),
            s2: grad_columns(rows, cols, &l),
            eps: DMatrix::zeros(p, k),
            y1: DMatrix::zeros(p, k),
            y2: DMatrix::zeros(2 * p, k),
            y3: DMatrix::zeros(p, k),
            y4: DMatrix::zeros(p, k),
            l,
            n,
            theta,
            iter: 0,
        }
    }

    fn check_shapes(&self, m: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<()> {
        let shape = (self.rows * self.cols, self.l.ncols());
        let double = (2 * shape.0, shape.1);
        let ok = [&self.l, &self.n, &self.s1, &self.eps, &self.y1, &self.y3, &self.y4, m, sigma]
            .iter()
            .all(|x| x.shape() == shape)
            && self.s2.shape() == double
            && self.y2.shape() == double;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "solver state, M and sigma must be {}x{} ({}x{} for S2, Y2)",
                shape.0, shape.1, double.0, double.1
            )))
        }
    }
}

/// `x - tau` above `tau`, `x + tau` below `-tau`, 0 in between.
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

pub fn soft_threshold_matrix(x: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    x.map(|v| soft_threshold(v, tau))
}

fn gram_eigen(v: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let gram = v.tr_mul(v);
    let eig = gram.try_symmetric_eigen(f64::EPSILON, 0).ok_or(Error::Eigen)?;
    if eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).all(|x| x.is_finite()) {
        Ok(eig)
    } else {
        Err(Error::Eigen)
    }
}

/// Singular values of a tall matrix from its Gram matrix, descending.
pub fn singular_values(v: &DMatrix<f64>) -> Result<Vec<f64>> {
    let eig = gram_eigen(v)?;
    let mut s: Vec<f64> = eig.eigenvalues.iter().map(|w| w.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub fn nuclear_norm(v: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(v)?.iter().sum())
}

/// Singular value thresholding `U s_tau(S) V'` through the eigenvectors `W`
/// of `V'V`: `V W diag(max(s - tau, 0) / s) W'`.
pub fn svt(v: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", "must be positive"));
    }
    let eig = gram_eigen(v)?;
    let w = &eig.eigenvectors;
    let shrink: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&e| {
            let s = e.max(0.0).sqrt();
            if s > tau {
                (s - tau) / s
            } else {
                0.0
            }
        })
        .collect();
    let mut scaled = w.clone();
    for (j, c) in shrink.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*c);
    }
    Ok(v * (scaled * w.transpose()))
}

/// Constraint residuals `G1..G4`.
pub fn residuals(state: &SolverState, m: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<[DMatrix<f64>; 4]> {
    state.check_shapes(m, sigma)?;
    let pl = grad_columns(state.rows, state.cols, &state.l);
    Ok([
        &state.s1 - &state.l,
        &state.s2 - pl,
        m - &state.l - &state.n,
        noise_residual(&state.n, sigma, &state.eps),
    ])
}

fn noise_residual(n: &DMatrix<f64>, sigma: &DMatrix<f64>, eps: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(n.nrows(), n.ncols(), |i, j| {
        let (x, s) = (n[(i, j)], sigma[(i, j)]);
        x * x - 9.0 * s * s + eps[(i, j)]
    })
}

/// Augmented Lagrangian
/// `||S1||_* + lambda ||S2||_1 + sum_j <Yj, Gj> + theta / 2 ||Gj||^2`.
pub fn objective(state: &SolverState, m: &DMatrix<f64>, sigma: &DMatrix<f64>, params: &SolverParams) -> Result<f64> {
    let g = residuals(state, m, sigma)?;
    let ys = [&state.y1, &state.y2, &state.y3, &state.y4];
    let mut f = nuclear_norm(&state.s1)? + params.lambda * state.s2.iter().map(|x| x.abs()).sum::<f64>();
    for (y, g) in ys.iter().zip(&g) {
        f += y.dot(g) + 0.5 * state.theta * g.norm_squared();
    }
    Ok(f)
}

/// Partial derivative of the augmented Lagrangian in `L`.
pub fn grad_l(state: &SolverState, m: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    state.check_shapes(m, sigma)?;
    Ok(grad_l_with(state, &state.l, &state.n, m))
}

/// Partial derivative of the augmented Lagrangian in `N`.
pub fn grad_n(state: &SolverState, m: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    state.check_shapes(m, sigma)?;
    Ok(grad_n_with(state, &state.l, &state.n, m, sigma))
}

// theta (L - S1 - Y1/theta) + theta P'(PL - S2 - Y2/theta) + theta (L - M + N - Y3/theta)
fn grad_l_with(s: &SolverState, l: &DMatrix<f64>, n: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let th = s.theta;
    let mut inner = grad_columns(s.rows, s.cols, l) - &s.s2;
    inner -= &s.y2 * (1.0 / th);
    let smooth = grad_adjoint_columns(s.rows, s.cols, &inner).expect("shape checked");
    DMatrix::from_fn(l.nrows(), l.ncols(), |i, j| {
        let x = l[(i, j)];
        th * (x - s.s1[(i, j)] + smooth[(i, j)] + x - m[(i, j)] + n[(i, j)]) - s.y1[(i, j)] - s.y3[(i, j)]
    })
}

// theta (N - M + L - Y3/theta) + theta (N.N - 9 sigma.sigma + eps + Y4/theta) . 2N
fn grad_n_with(s: &SolverState, l: &DMatrix<f64>, n: &DMatrix<f64>, m: &DMatrix<f64>, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let th = s.theta;
    DMatrix::from_fn(n.nrows(), n.ncols(), |i, j| {
        let x = n[(i, j)];
        let sg = sigma[(i, j)];
        let g4 = x * x - 9.0 * sg * sg + s.eps[(i, j)];
        th * (x - m[(i, j)] + l[(i, j)]) - s.y3[(i, j)] + (th * g4 + s.y4[(i, j)]) * 2.0 * x
    })
}

fn ensure_finite(x: &DMatrix<f64>, update: &'static str, iteration: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { update, iteration })
    }
}

/// `eps = max(9 sigma.sigma - N.N - Y4 / theta, 0)`.
pub fn eps_update(n: &DMatrix<f64>, sigma: &DMatrix<f64>, y4: &DMatrix<f64>, theta: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n.nrows(), n.ncols(), |i, j| {
        let s = sigma[(i, j)];
        (9.0 * s * s - n[(i, j)] * n[(i, j)] - y4[(i, j)] / theta).max(0.0)
    })
}

/// One outer iteration.
pub fn step(state: &SolverState, m: &DMatrix<f64>, sigma: &DMatrix<f64>, params: &SolverParams) -> Result<SolverState> {
    params.validate()?;
    state.check_shapes(m, sigma)?;
    let it = state.iter;
    let th = state.theta;
    let mut s = state.clone();

    let v = &s.l - &s.y1 / th;
    s.s1 = svt(&v, 1.0 / th).map_err(|e| match e {
        Error::Eigen => Error::Divergence { update: "S1", iteration: it },
        e => e,
    })?;
    ensure_finite(&s.s1, "S1", it)?;

    let mut pl = grad_columns(s.rows, s.cols, &s.l);
    pl -= &s.y2 * (1.0 / th);
    s.s2 = soft_threshold_matrix(&pl, params.lambda / th);
    ensure_finite(&s.s2, "S2", it)?;

    let (l_old, n_old) = (state.l.clone(), state.n.clone());
    for _ in 0..params.inner_steps {
        let g = grad_l_with(&s, &s.l, &n_old, m);
        s.l -= g * params.step_l;
    }
    ensure_finite(&s.l, "L", it)?;

    let l_for_n = match params.update_order {
        UpdateOrder::GaussSeidel => s.l.clone(),
        UpdateOrder::Jacobi => l_old,
    };
    for _ in 0..params.inner_steps {
        let g = grad_n_with(&s, &l_for_n, &s.n, m, sigma);
        for idx in 0..g.len() {
            let x = s.n[idx];
            let rate = if params.cap_noise_step {
                let sg = sigma[idx];
                let curvature = th * (1.0 + 2.0 * (3.0 * x * x - 9.0 * sg * sg + s.eps[idx] + s.y4[idx] / th).abs());
                params.step_n.min(1.0 / curvature)
            } else {
                params.step_n
            };
            s.n[idx] = x - rate * g[idx];
        }
    }
    ensure_finite(&s.n, "N", it)?;

    let n_for_eps = match params.update_order {
        UpdateOrder::GaussSeidel => &s.n,
        UpdateOrder::Jacobi => &n_old,
    };
    s.eps = eps_update(n_for_eps, sigma, &s.y4, th);
    ensure_finite(&s.eps, "eps", it)?;

    let g = residuals(&s, m, sigma)?;
    let rate = match params.multiplier_step {
        MultiplierStep::InverseTheta => 1.0 / th,
        MultiplierStep::Standard => th,
    };
    for (y, g) in [&mut s.y1, &mut s.y2, &mut s.y3, &mut s.y4].into_iter().zip(&g) {
        *y += g * rate;
    }
    for y in [&s.y1, &s.y2, &s.y3, &s.y4] {
        ensure_finite(y, "multipliers", it)?;
    }

    s.theta = (params.rho * th).min(params.theta_max);
    s.iter = it + 1;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub g4: f64,
    pub theta: f64,
    pub rel_change_l: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    /// Frobenius norms of `G1..G4` at the returned iterate.
    pub residuals: [f64; 4],
    pub theta: f64,
    pub records: Vec<IterationRecord>,
    pub wall_time: Duration,
}

impl SolveReport {
    /// One CSV row per iteration. Wall time is left out so reruns produce
    /// identical files.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Record(format!("{}: {e}", path.display())))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Record(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct Denoised {
    pub low_rank: LogVolume,
    pub noise: LogVolume,
    pub report: SolveReport,
}

impl Denoised {
    /// Per-pixel mean of the columns of `L`.
    pub fn image(&self) -> ImageGrid {
        self.low_rank.mean_frame()
    }
}

/// Runs the solver from the frame-mean initialization until the relative
/// change of `L` drops below `tol` (once `theta` is at `theta_max`) or
/// `max_iters` is reached.
pub fn denoise(m: &LogVolume, sigma: &SigmaMap, params: &SolverParams) -> Result<Denoised> {
    params.validate()?;
    if (sigma.rows(), sigma.cols(), sigma.frame_count()) != (m.rows(), m.cols(), m.frame_count()) {
        return Err(Error::Shape(format!(
            "sigma map {}x{}x{} does not match volume {}x{}x{}",
            sigma.rows(),
            sigma.cols(),
            sigma.frame_count(),
            m.rows(),
            m.cols(),
            m.frame_count()
        )));
    }
    let start = Instant::now();
    let (md, sd) = (m.data(), sigma.data());
    let mut state = SolverState::initial(m, params.theta0);
    let mut records = Vec::new();
    let mut converged = false;
    while state.iter < params.max_iters {
        let at_max = state.theta >= params.theta_max;
        let next = step(&state, md, sd, params)?;
        let base = state.l.norm();
        let diff = (&next.l - &state.l).norm();
        let rel = if base > 0.0 { diff / base } else { diff };
        state = next;
        let g = residuals(&state, md, sd)?;
        records.push(IterationRecord {
            iteration: state.iter,
            objective: objective(&state, md, sd, params)?,
            g1: g[0].norm(),
            g2: g[1].norm(),
            g3: g[2].norm(),
            g4: g[3].norm(),
            theta: state.theta,
            rel_change_l: rel,
        });
        if at_max && rel < params.tol {
            converged = true;
            break;
        }
    }
    let last = records.last().expect("at least one iteration");
    let report = SolveReport {
        iterations: state.iter,
        converged,
        residuals: [last.g1, last.g2, last.g3, last.g4],
        theta: state.theta,
        wall_time: start.elapsed(),
        records,
    };
    let (rows, cols) = (m.rows(), m.cols());
    Ok(Denoised {
        low_rank: LogVolume::from_matrix(rows, cols, state.l)?,
        noise: LogVolume::from_matrix(rows, cols, state.n)?,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn soft_threshold_units() {
        assert!((soft_threshold(1.2, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
        assert!((soft_threshold(-2.0, 0.5) + 1.5).abs() < 1e-15);
    }

    #[test]
    fn svt_units() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0, 0.2]));
        let out = svt(&d, 0.5).unwrap();
        let want = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.5, 0.5, 0.0]));
        assert!((out - want).abs().max() < 1e-12);
        assert_eq!(svt(&DMatrix::zeros(6, 3), 0.5).unwrap(), DMatrix::zeros(6, 3));
        assert!(svt(&d, 0.0).is_err());
    }

    #[test]
    fn svt_matches_full_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let v = random(&mut rng, 30, 5);
            let svd = v.clone().svd(true, true);
            let shrunk = svd.singular_values.map(|s| soft_threshold(s, 0.7));
            let want = svd.u.unwrap() * DMatrix::from_diagonal(&shrunk) * svd.v_t.unwrap();
            assert!((svt(&v, 0.7).unwrap() - want).abs().max() < 1e-10);
            let mut sv = svd.singular_values.iter().copied().collect::<Vec<_>>();
            sv.sort_by(|a, b| b.total_cmp(a));
            for (a, b) in singular_values(&v).unwrap().iter().zip(&sv) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    fn small_problem(seed: u64) -> (SolverState, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, cols, k) = (6, 6, 3);
        let p = rows * cols;
        let mut s = SolverState::from_parts(rows, cols, random(&mut rng, p, k), random(&mut rng, p, k), 0.7);
        s.s1 = random(&mut rng, p, k);
        s.s2 = random(&mut rng, 2 * p, k);
        s.eps = random(&mut rng, p, k).abs();
        s.y1 = random(&mut rng, p, k);
        s.y2 = random(&mut rng, 2 * p, k);
        s.y3 = random(&mut rng, p, k);
        s.y4 = random(&mut rng, p, k);
        let m = random(&mut rng, p, k);
        let sigma = random(&mut rng, p, k).abs();
        (s, m, sigma)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let params = SolverParams::default();
        for seed in 0..3 {
            let (s, m, sigma) = small_problem(seed);
            let gl = grad_l(&s, &m, &sigma).unwrap();
            let gn = grad_n(&s, &m, &sigma).unwrap();
            let h = 1e-5;
            for idx in [0, 7, 50, 107] {
                let fd = |which: usize| {
                    let mut plus = s.clone();
                    let mut minus = s.clone();
                    if which == 0 {
                        plus.l[idx] += h;
                        minus.l[idx] -= h;
                    } else {
                        plus.n[idx] += h;
                        minus.n[idx] -= h;
                    }
                    (objective(&plus, &m, &sigma, &params).unwrap() - objective(&minus, &m, &sigma, &params).unwrap()) / (2.0 * h)
                };
                for (analytic, which) in [(gl[idx], 0), (gn[idx], 1)] {
                    let numeric = fd(which);
                    assert!(
                        (analytic - numeric).abs() <= 1e-5 * analytic.abs().max(1.0),
                        "seed {seed} idx {idx}: {analytic} vs {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn objective_units() {
        let zero = SolverState::from_parts(3, 3, DMatrix::zeros(9, 2), DMatrix::zeros(9, 2), 1.0);
        let z = DMatrix::zeros(9, 2);
        assert_eq!(objective(&zero, &z, &z, &SolverParams::default()).unwrap(), 0.0);

        // rank one S1 = u v' with unit u, v and every residual zero; a
        // constant u keeps P L and hence S2 at zero
        let u = DMatrix::from_element(9, 1, 1.0 / 3.0);
        let v = DMatrix::from_row_slice(1, 2, &[0.6, 0.8]);
        let l = &u * &v;
        let s = SolverState::from_parts(3, 3, l.clone(), DMatrix::zeros(9, 2), 1.0);
        assert_eq!(s.s2.abs().max(), 0.0);
        let f = objective(&s, &l, &z, &SolverParams::default()).unwrap();
        assert!((f - 1.0).abs() < 1e-9, "{f}");
    }

    #[test]
    fn eps_update_units() {
        let n = DMatrix::zeros(4, 2);
        let sigma = DMatrix::from_element(4, 2, 0.1);
        let e = eps_update(&n, &sigma, &DMatrix::zeros(4, 2), 1.0);
        assert!(e.iter().all(|v| (v - 0.09).abs() < 1e-15));
        let e = eps_update(&DMatrix::from_element(4, 2, 1.0), &sigma, &DMatrix::zeros(4, 2), 1.0);
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_keeps_eps_nonnegative_and_grows_theta() {
        let (s, m, sigma) = small_problem(4);
        let params = SolverParams::default();
        let next = step(&s, &m, &sigma, &params).unwrap();
        assert!(next.eps.iter().all(|&v| v >= 0.0));
        assert!((next.theta - (0.7 * 1.6)).abs() < 1e-15);
        assert_eq!(next.iter, 1);
    }

    #[test]
    fn divergence_names_the_update() {
        let (s, m, sigma) = small_problem(5);
        let params = SolverParams {
            step_l: f64::MAX,
            ..Default::default()
        };
        let mut st = s;
        let err = loop {
            match step(&st, &m, &sigma, &params) {
                Ok(next) => st = next,
                Err(e) => break e,
            }
        };
        assert!(matches!(err, Error::Divergence { update: "L", .. }), "{err}");
    }

    fn smooth_stack(size: usize, k: usize) -> LogVolume {
        let frame = ImageGrid::from_fn(size, size, |i, j| (100.0 + 40.0 * (j as f64 / 20.0).sin() * (i as f64 / 25.0).cos()).ln()).unwrap();
        crate::volume::stack_frames(&vec![frame; k]).unwrap()
    }

    #[test]
    fn noiseless_identical_frames_stay_rank_one() {
        let m = smooth_stack(128, 8);
        let sigma = SigmaMap::constant(128, 128, 8, 0.0).unwrap();
        let out = denoise(&m, &sigma, &SolverParams::default()).unwrap();
        let sv = singular_values(out.low_rank.data()).unwrap();
        assert!(sv[1] <= 1e-3 * sv[0]);
        assert!((out.low_rank.data() - m.data()).norm() <= 1e-3 * m.data().norm());
        assert!(out.noise.data().norm() <= 1e-3 * m.data().norm());
    }

    #[test]
    fn solver_is_deterministic_and_reports_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = smooth_stack(24, 4);
        let noisy = base.data().map(|v| v + 0.2 * rng.gen_range(-1.0..1.0));
        let m = LogVolume::from_matrix(24, 24, noisy).unwrap();
        let sigma = SigmaMap::constant(24, 24, 4, 0.12).unwrap();
        let params = SolverParams {
            max_iters: 30,
            ..Default::default()
        };
        let a = denoise(&m, &sigma, &params).unwrap();
        let b = denoise(&m, &sigma, &params).unwrap();
        assert_eq!(a.low_rank, b.low_rank);
        assert_eq!(a.noise, b.noise);
        assert_eq!(a.report.records, b.report.records);
        assert_eq!(a.report.records.len(), a.report.iterations);
        assert!(a.report.residuals.iter().all(|r| *r >= 0.0));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        a.report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iteration,objective,g1,g2,g3,g4,theta,rel_change_l\n"));
        assert_eq!(text.lines().count(), a.report.iterations + 1);
    }

    #[test]
    fn inverse_theta_mode_runs_or_reports_divergence() {
        let m = smooth_stack(24, 3);
        let sigma = SigmaMap::constant(24, 24, 3, 0.1).unwrap();
        let params = SolverParams {
            multiplier_step: MultiplierStep::InverseTheta,
            max_iters: 20,
            ..Default::default()
        };
        match denoise(&m, &sigma, &params) {
            Ok(out) => assert_eq!(out.report.records.len(), out.report.iterations),
            Err(e) => assert_eq!(e.kind(), "divergence"),
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        for p in [
            SolverParams { rho: 1.0, ..Default::default() },
            SolverParams { theta0: 20.0, ..Default::default() },
            SolverParams { lambda: -1.0, ..Default::default() },
            SolverParams { max_iters: 0, ..Default::default() },
        ] {
            assert_eq!(p.validate().unwrap_err().kind(), "parameter");
        }
    }

    #[test]
    fn params_parse_from_toml() {
        let p: SolverParams = toml::from_str("lambda = 0.3\nmultiplier_step = \"inverse-theta\"\nupdate_order = \"jacobi\"").unwrap();
        assert_eq!(p.lambda, 0.3);
        assert_eq!(p.multiplier_step, MultiplierStep::InverseTheta);
        assert_eq!(p.update_order, UpdateOrder::Jacobi);
        assert_eq!(p.rho, 1.6);
    }
}
