//! Implicit-differentiation hypergradients for leader/follower problems.
//!
//! The follower minimises an inner loss `L^f(θ; ω)` over θ; the leader
//! scores the minimiser with an outer loss `L^s(θ*, ω)`. At a stationary
//! inner point the implicit function theorem gives
//!
//! `dL^s/dω = ∇_ω L^s − (∇²_{ωθ} L^f)·(∇²_{θθ} L^f)⁻¹·∇_θ L^s`.
//!
//! The inverse is applied matrix-free by conjugate gradients on
//! Hessian-vector products. Network training uses the joint loss instead
//! (see [`super::cooperative`]); this path is exercised on small problems
//! such as [`ToyQuadratic`].

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::gradcheck::rel_error;
use crate::tensor::{hvp, hvp_epsilon, Tape, Tensor, Var};

/// Inner solve must reach this gradient norm.
pub const INNER_TOL: f64 = 1e-5;
/// Tolerances checked by [`verify_hypergrad`].
pub const ANALYTIC_TOL: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;
pub const JOINT_TOL: f64 = 1e-3;
pub const DEFAULT_DAMPING: f64 = 1e-3;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Conjugate-gradient outcome. `residuals` are relative: the initial 1 and
/// one per iteration.
#[derive(Clone, Debug, Serialize)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iters: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
}

/// Solves `H·x = rhs` given `x ↦ H·x`. Stops when `‖r‖/‖rhs‖ < tol`; otherwise
/// returns the iterate with the smallest residual and `converged = false`.
pub fn cg_solve(
    mut hvp_fn: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    rhs: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<CgResult> {
    let n = rhs.len();
    let b_norm = norm(rhs);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgResult { x, iters: 0, residuals: vec![0.0], converged: true });
    }
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut residuals = vec![1.0];
    let (mut best, mut best_res) = (x.clone(), 1.0);
    for it in 0..max_iters {
        let hp = hvp_fn(&p)?;
        if hp.len() != n {
            return Err(Error::shape("cg_solve", &[hp.len()], &[n]));
        }
        let php = dot(&p, &hp);
        if !(php.is_finite() && php > 0.0) {
            // Curvature lost along p; the current iterate is the best available.
            return Ok(CgResult { x: best, iters: it, residuals, converged: false });
        }
        let alpha = rr / php;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        let rr_new = dot(&r, &r);
        let rel = rr_new.sqrt() / b_norm;
        residuals.push(rel);
        if rel < best_res {
            best_res = rel;
            best.clone_from(&x);
        }
        if rel < tol {
            return Ok(CgResult { x, iters: it + 1, residuals, converged: true });
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Ok(CgResult { x: best, iters: max_iters, residuals, converged: false })
}

/// A leader/follower problem over flat vectors θ ∈ ℝⁿ and ω ∈ ℝᵐ.
pub trait BilevelProblem {
    fn theta_dim(&self) -> usize;
    fn omega_dim(&self) -> usize;
    /// Follower objective `L^f(θ; ω)`.
    fn inner_loss(&self, tape: &mut Tape, theta: Var, omega: Var) -> Result<Var>;
    /// Leader objective `L^s(θ, ω)`.
    fn outer_loss(&self, tape: &mut Tape, theta: Var, omega: Var) -> Result<Var>;
    /// Residual `r` with `L^f = ½‖r‖² + c(ω)`, for Gauss–Newton curvature.
    fn inner_residual(&self, _tape: &mut Tape, _theta: Var, _omega: Var) -> Option<Result<Var>> {
        None
    }
    /// One differentiable follower update `θ ↦ θ'`, for unrolled gradients.
    fn inner_update(&self, _tape: &mut Tape, _theta: Var, _omega: Var) -> Option<Result<Var>> {
        None
    }
}

#[derive(Clone, Copy)]
enum Objective {
    Inner,
    Outer,
}

/// Value and gradients `(∇_θ, ∇_ω)` of one objective.
fn eval<P: BilevelProblem + ?Sized>(
    p: &P,
    which: Objective,
    theta: &[f64],
    omega: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let t = tape.param(Tensor::new(vec![theta.len()], theta.to_vec())?);
    let w = tape.param(Tensor::new(vec![omega.len()], omega.to_vec())?);
    let l = match which {
        Objective::Inner => p.inner_loss(&mut tape, t, w)?,
        Objective::Outer => p.outer_loss(&mut tape, t, w)?,
    };
    let g = tape.backward(l)?;
    Ok((tape.value(l).item(), g.tensor(t).into_data(), g.tensor(w).into_data()))
}

fn inner_grad_theta<P: BilevelProblem + ?Sized>(p: &P, theta: &[f64], omega: &[f64]) -> Result<Vec<f64>> {
    Ok(eval(p, Objective::Inner, theta, omega)?.1)
}

/// Which curvature operator stands in for `∇²_{θθ} L^f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Curvature {
    /// Central differences of the θ-gradient.
    Exact,
    /// `JᵀJ` of the inner residual.
    GaussNewton,
}

/// `∇²_{θθ} L^f · v`.
pub fn inner_hvp<P: BilevelProblem + ?Sized>(p: &P, theta: &[f64], omega: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    hvp(&|t: &[f64]| inner_grad_theta(p, t, omega), theta, v, "theta")
}

/// `∇²_{ωθ} L^f · v`: central difference of `∇_ω L^f` along θ + εv.
pub fn mixed_hvp<P: BilevelProblem + ?Sized>(p: &P, theta: &[f64], omega: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != theta.len() {
        return Err(Error::shape("mixed_hvp", &[v.len()], &[theta.len()]));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Ok(vec![0.0; omega.len()]);
    }
    let eps = hvp_epsilon(theta, v);
    let shifted = |s: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, d)| t + s * eps * d).collect() };
    let gp = eval(p, Objective::Inner, &shifted(1.0), omega)?.2;
    let gm = eval(p, Objective::Inner, &shifted(-1.0), omega)?.2;
    let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("mixed hessian-vector product for `omega`".into()));
    }
    Ok(out)
}

fn residual_value<P: BilevelProblem + ?Sized>(p: &P, theta: &[f64], omega: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::new(vec![theta.len()], theta.to_vec())?);
    let w = tape.constant(Tensor::new(vec![omega.len()], omega.to_vec())?);
    let r = p
        .inner_residual(&mut tape, t, w)
        .ok_or_else(|| Error::invalid("gauss_newton", "problem has no residual form"))??;
    Ok(tape.value(r).data().to_vec())
}

/// `JᵀJ·v` with `J = ∂r/∂θ`: `J·v` by central differences, then `Jᵀ` by
/// reverse mode.
pub fn gauss_newton_product<P: BilevelProblem + ?Sized>(
    p: &P,
    theta: &[f64],
    omega: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    let eps = hvp_epsilon(theta, v);
    let shifted = |s: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, d)| t + s * eps * d).collect() };
    let rp = residual_value(p, &shifted(1.0), omega)?;
    let rm = residual_value(p, &shifted(-1.0), omega)?;
    let jv: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();

    let mut tape = Tape::new();
    let t = tape.param(Tensor::new(vec![theta.len()], theta.to_vec())?);
    let w = tape.constant(Tensor::new(vec![omega.len()], omega.to_vec())?);
    let r = p
        .inner_residual(&mut tape, t, w)
        .ok_or_else(|| Error::invalid("gauss_newton", "problem has no residual form"))??;
    let u = tape.constant(Tensor::new(vec![jv.len()], jv)?);
    let flat = tape.reshape(r, &[tape.value(r).len()])?;
    let ru = tape.mul(flat, u)?;
    let s = tape.sum(ru);
    Ok(tape.backward(s)?.tensor(t).into_data())
}

fn curvature_product<P: BilevelProblem + ?Sized>(
    p: &P,
    mode: Curvature,
    theta: &[f64],
    omega: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    match mode {
        Curvature::Exact => inner_hvp(p, theta, omega, v),
        Curvature::GaussNewton => gauss_newton_product(p, theta, omega, v),
    }
}

/// Result of the follower solve.
#[derive(Clone, Debug, Serialize)]
pub struct InnerSolve {
    pub theta: Vec<f64>,
    pub grad_norm: f64,
    pub newton_steps: usize,
}

/// Newton-CG on `L^f(·; ω)` from `theta0`. Fails unless `‖∇_θ L^f‖ ≤ INNER_TOL`.
pub fn solve_inner<P: BilevelProblem + ?Sized>(p: &P, omega: &[f64], theta0: &[f64]) -> Result<InnerSolve> {
    let mut theta = theta0.to_vec();
    let mut g = inner_grad_theta(p, &theta, omega)?;
    let mut steps = 0;
    while steps < 20 && norm(&g) > 1e-11 {
        let d = cg_solve(|v| inner_hvp(p, &theta, omega, v), &g, 4 * theta.len() + 10, 1e-12)?;
        for (t, di) in theta.iter_mut().zip(&d.x) {
            *t -= di;
        }
        let g_new = inner_grad_theta(p, &theta, omega)?;
        steps += 1;
        if norm(&g_new) >= norm(&g) {
            g = g_new;
            break;
        }
        g = g_new;
    }
    let grad_norm = norm(&g);
    if !(grad_norm <= INNER_TOL) {
        return Err(Error::InnerNotConverged { grad_norm, tol: INNER_TOL });
    }
    Ok(InnerSolve { theta, grad_norm, newton_steps: steps })
}

/// Hutchinson estimate of `tr(H)` with Rademacher probes.
pub fn trace_estimate(
    mut hv: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    dim: usize,
    probes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut acc = 0.0;
    for _ in 0..probes {
        let z: Vec<f64> = (0..dim).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        acc += dot(&z, &hv(&z)?);
    }
    Ok(acc / probes.max(1) as f64)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ImplicitOptions {
    /// μ = damping · tr(H)/dim is added to the curvature in the CG solve.
    pub damping: f64,
    pub probes: usize,
    pub cg_max_iters: usize,
    pub cg_tol: f64,
    /// Iterative-refinement sweeps that remove the damping bias.
    pub refine_steps: usize,
    pub curvature: Curvature,
}

impl Default for ImplicitOptions {
    fn default() -> Self {
        ImplicitOptions {
            damping: DEFAULT_DAMPING,
            probes: 16,
            cg_max_iters: 50,
            cg_tol: 1e-6,
            refine_steps: 8,
            curvature: Curvature::Exact,
        }
    }
}

/// Implicit hypergradient and the diagnostics of its linear solve.
#[derive(Clone, Debug, Serialize)]
pub struct ImplicitResult {
    pub grad: Vec<f64>,
    pub theta: Vec<f64>,
    pub inner_grad_norm: f64,
    pub mu: f64,
    pub cg_iters: usize,
    /// CG relative residuals, concatenated over refinement sweeps.
    pub cg_residuals: Vec<f64>,
    /// `‖g − H·v‖/‖g‖` after each refinement sweep.
    pub solve_residuals: Vec<f64>,
}

/// Hypergradient of `L^s(θ*(ω), ω)` by implicit differentiation.
pub fn hypergradient_implicit<P: BilevelProblem + ?Sized>(
    p: &P,
    omega: &[f64],
    theta0: &[f64],
    opts: &ImplicitOptions,
    rng: &mut Rng,
) -> Result<ImplicitResult> {
    let inner = solve_inner(p, omega, theta0)?;
    let theta = inner.theta;
    let (_, g_theta, direct) = eval(p, Objective::Outer, &theta, omega)?;
    let hv = |v: &[f64]| curvature_product(p, opts.curvature, &theta, omega, v);
    let n = theta.len();
    let mu = opts.damping * trace_estimate(hv, n, opts.probes, rng)?.abs() / n as f64;

    // v solves H·v = g: damped CG sweeps on the running residual.
    let g_norm = norm(&g_theta);
    let mut v = vec![0.0; n];
    let mut r = g_theta.clone();
    let (mut cg_iters, mut cg_residuals, mut solve_residuals) = (0, Vec::new(), Vec::new());
    for _ in 0..opts.refine_steps {
        if g_norm == 0.0 || norm(&r) / g_norm < 1e-10 {
            break;
        }
        let sol = cg_solve(
            |d| Ok(hv(d)?.iter().zip(d).map(|(h, di)| h + mu * di).collect()),
            &r,
            opts.cg_max_iters,
            opts.cg_tol,
        )?;
        cg_iters += sol.iters;
        cg_residuals.extend(sol.residuals);
        for (vi, di) in v.iter_mut().zip(&sol.x) {
            *vi += di;
        }
        let hvv = hv(&v)?;
        r = g_theta.iter().zip(&hvv).map(|(g, h)| g - h).collect();
        solve_residuals.push(norm(&r) / g_norm);
    }

    let mixed = mixed_hvp(p, &theta, omega, &v)?;
    let grad: Vec<f64> = direct.iter().zip(&mixed).map(|(d, m)| d - m).collect();
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("implicit hypergradient".into()));
    }
    Ok(ImplicitResult { grad, theta, inner_grad_norm: inner.grad_norm, mu, cg_iters, cg_residuals, solve_residuals })
}

/// Gradient of `L^s(θ_K(ω), ω)` through `steps` recorded follower updates
/// from `theta0`: the joint-loss view in which θ is an explicit function of ω.
pub fn joint_grad<P: BilevelProblem + ?Sized>(p: &P, omega: &[f64], theta0: &[f64], steps: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::new(vec![omega.len()], omega.to_vec())?);
    let mut t = tape.constant(Tensor::new(vec![theta0.len()], theta0.to_vec())?);
    for _ in 0..steps {
        t = p
            .inner_update(&mut tape, t, w)
            .ok_or_else(|| Error::invalid("joint_grad", "problem has no explicit update"))??;
    }
    let l = p.outer_loss(&mut tape, t, w)?;
    Ok(tape.backward(l)?.tensor(w).into_data())
}

/// Central differences of `L^s(θ*(ω), ω)`, re-solving the follower at every
/// probe.
pub fn fd_hypergrad<P: BilevelProblem + ?Sized>(p: &P, omega: &[f64], theta0: &[f64], h: f64) -> Result<Vec<f64>> {
    let outer_at = |w: &[f64]| -> Result<f64> {
        let th = solve_inner(p, w, theta0)?.theta;
        Ok(eval(p, Objective::Outer, &th, w)?.0)
    };
    (0..omega.len())
        .map(|j| {
            let mut wp = omega.to_vec();
            let mut wm = omega.to_vec();
            wp[j] += h;
            wm[j] -= h;
            Ok((outer_at(&wp)? - outer_at(&wm)?) / (2.0 * h))
        })
        .collect()
}

/// `L^f = ½θᵀAθ − (Bω)ᵀθ`, `L^s = ½‖θ − t‖²` with `A = RᵀR`, `B = RᵀC`, so the
/// inner loss is also `½‖Rθ − Cω‖²` up to a θ-independent term.
#[derive(Clone, Debug)]
pub struct ToyQuadratic {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub target: DVector<f64>,
    /// Gradient-descent step for [`BilevelProblem::inner_update`]: `1/tr(A)`.
    pub step: f64,
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(&[m.nrows(), m.ncols()], |i| m[(i / m.ncols(), i % m.ncols())])
}

/// `M·x` for a tape vector `x`.
fn mat_vec(tape: &mut Tape, m: &DMatrix<f64>, x: Var) -> Result<Var> {
    let mv = tape.constant(to_tensor(m));
    let col = tape.reshape(x, &[m.ncols(), 1])?;
    let y = tape.matmul(mv, col)?;
    tape.reshape(y, &[m.nrows()])
}

impl ToyQuadratic {
    pub fn random(n: usize, m: usize, rng: &mut Rng) -> Self {
        let mut normal =
            |rows, cols, s: f64| DMatrix::from_fn(rows, cols, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        let r = DMatrix::identity(n, n) + normal(n, n, 0.3 / (n as f64).sqrt());
        let c = normal(n, m, 1.0);
        let target = DVector::from_column_slice(normal(n, 1, 1.0).as_slice());
        let a = r.transpose() * &r;
        let b = r.transpose() * &c;
        let step = 1.0 / a.trace();
        ToyQuadratic { a, b, r, c, target, step }
    }

    pub fn theta_star(&self, omega: &[f64]) -> Result<DVector<f64>> {
        let rhs = &self.b * DVector::from_column_slice(omega);
        self.a
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&rhs))
            .ok_or_else(|| Error::invalid("toy quadratic", "A is not positive definite"))
    }

    /// `BᵀA⁻¹(θ* − t)`.
    pub fn analytic_hypergrad(&self, omega: &[f64]) -> Result<Vec<f64>> {
        let ch =
            self.a.clone().cholesky().ok_or_else(|| Error::invalid("toy quadratic", "A is not positive definite"))?;
        let resid = self.theta_star(omega)? - &self.target;
        Ok((self.b.transpose() * ch.solve(&resid)).as_slice().to_vec())
    }
}

impl BilevelProblem for ToyQuadratic {
    fn theta_dim(&self) -> usize {
        self.a.nrows()
    }

    fn omega_dim(&self) -> usize {
        self.b.ncols()
    }

    fn inner_loss(&self, tape: &mut Tape, theta: Var, omega: Var) -> Result<Var> {
        let at = mat_vec(tape, &self.a, theta)?;
        let tat = tape.mul(theta, at)?;
        let quad = tape.sum(tat);
        let half = tape.mul_scalar(quad, 0.5);
        let bw = mat_vec(tape, &self.b, omega)?;
        let lin_v = tape.mul(bw, theta)?;
        let lin = tape.sum(lin_v);
        tape.sub(half, lin)
    }

    fn outer_loss(&self, tape: &mut Tape, theta: Var, _omega: Var) -> Result<Var> {
        let t = tape.constant(Tensor::new(vec![self.target.len()], self.target.as_slice().to_vec())?);
        let d = tape.sub(theta, t)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        Ok(tape.mul_scalar(s, 0.5))
    }

    fn inner_residual(&self, tape: &mut Tape, theta: Var, omega: Var) -> Option<Result<Var>> {
        let mut f = || {
            let rt = mat_vec(tape, &self.r, theta)?;
            let cw = mat_vec(tape, &self.c, omega)?;
            tape.sub(rt, cw)
        };
        Some(f())
    }

    fn inner_update(&self, tape: &mut Tape, theta: Var, omega: Var) -> Option<Result<Var>> {
        let mut f = || {
            let at = mat_vec(tape, &self.a, theta)?;
            let bw = mat_vec(tape, &self.b, omega)?;
            let g = tape.sub(at, bw)?;
            let sg = tape.mul_scalar(g, self.step);
            tape.sub(theta, sg)
        };
        Some(f())
    }
}

/// One comparison in a [`HypergradReport`].
#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub rel_error: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Comparison {
    fn new(a: &[f64], b: &[f64], tol: f64) -> Self {
        let rel_error = rel_error(a, b);
        Comparison { rel_error, tol, pass: rel_error < tol }
    }
}

/// Output of [`verify_hypergrad`].
#[derive(Clone, Debug, Serialize)]
pub struct HypergradReport {
    pub seed: u64,
    pub damping: f64,
    pub theta_dim: usize,
    pub omega_dim: usize,
    pub implicit_grad: Vec<f64>,
    pub gauss_newton_grad: Vec<f64>,
    pub joint_grad: Vec<f64>,
    pub fd_grad: Vec<f64>,
    pub analytic_grad: Vec<f64>,
    pub mu: f64,
    pub cg_iters: usize,
    pub cg_residuals: Vec<f64>,
    pub solve_residuals: Vec<f64>,
    pub inner_grad_norm: f64,
    pub implicit_vs_analytic: Comparison,
    pub gauss_newton_vs_analytic: Comparison,
    pub implicit_vs_fd: Comparison,
    pub implicit_vs_joint: Comparison,
    pub pass: bool,
}

impl HypergradReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Toy dimensions used by [`verify_hypergrad`].
pub const TOY_THETA_DIM: usize = 6;
pub const TOY_OMEGA_DIM: usize = 3;

/// Runs every hypergradient path on a seeded [`ToyQuadratic`] and compares
/// them with the closed form.
pub fn verify_hypergrad(seed: u64, damping: f64) -> Result<HypergradReport> {
    let mut prng = rng::stream(seed, "verify.problem");
    let problem = ToyQuadratic::random(TOY_THETA_DIM, TOY_OMEGA_DIM, &mut prng);
    let omega: Vec<f64> = (0..TOY_OMEGA_DIM).map(|_| prng.sample(StandardNormal)).collect();
    let theta0 = vec![0.0; TOY_THETA_DIM];

    let mut trng = rng::stream(seed, "verify.trace");
    let opts = ImplicitOptions { damping, ..ImplicitOptions::default() };
    let exact = hypergradient_implicit(&problem, &omega, &theta0, &opts, &mut trng)?;
    let gn_opts = ImplicitOptions { curvature: Curvature::GaussNewton, ..opts };
    let gn = hypergradient_implicit(&problem, &omega, &theta0, &gn_opts, &mut trng)?;
    let analytic = problem.analytic_hypergrad(&omega)?;
    let fd = fd_hypergrad(&problem, &omega, &theta0, 1e-3)?;
    let joint = joint_grad(&problem, &omega, &theta0, 1500)?;

    let implicit_vs_analytic = Comparison::new(&exact.grad, &analytic, ANALYTIC_TOL);
    let gauss_newton_vs_analytic = Comparison::new(&gn.grad, &analytic, ANALYTIC_TOL);
    let implicit_vs_fd = Comparison::new(&exact.grad, &fd, FD_TOL);
    let implicit_vs_joint = Comparison::new(&exact.grad, &joint, JOINT_TOL);
    let pass =
        implicit_vs_analytic.pass && gauss_newton_vs_analytic.pass && implicit_vs_fd.pass && implicit_vs_joint.pass;
    Ok(HypergradReport {
        seed,
        damping,
        theta_dim: TOY_THETA_DIM,
        omega_dim: TOY_OMEGA_DIM,
        implicit_grad: exact.grad,
        gauss_newton_grad: gn.grad,
        joint_grad: joint,
        fd_grad: fd,
        analytic_grad: analytic,
        mu: exact.mu,
        cg_iters: exact.cg_iters,
        cg_residuals: exact.cg_residuals,
        solve_residuals: exact.solve_residuals,
        inner_grad_norm: exact.inner_grad_norm,
        implicit_vs_analytic,
        gauss_newton_vs_analytic,
        implicit_vs_fd,
        implicit_vs_joint,
        pass,
    })
}
