//! ADMM outer loop and the conjugate-gradient inner solver for the
//! z-update.

use crate::error::{Error, Result};
use crate::imagery::{psnr, Image};
use crate::linops::LinearOperator;
use crate::priors::ProxOperator;
use crate::tensor::{dot_slices, norm_slice, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgParams {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for CgParams {
    fn default() -> Self {
        Self { tol: 1e-10, max_iters: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// `‖Mz − b‖ / ‖b‖` of the returned iterate, recomputed from scratch.
    pub relative_residual: f64,
    pub converged: bool,
}

/// Conjugate gradients for `M z = b` with `M` symmetric positive definite,
/// supplied matrix-free as `apply(v, out)` writing `out = M v`.
pub fn cg_solve<F>(apply: F, b: &[f64], initial: Option<&[f64]>, params: CgParams) -> Result<CgOutcome>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let b_norm = norm_slice(b);
    if !b_norm.is_finite() {
        return Err(Error::Numerical { iteration: 0, detail: "right-hand side is not finite".into() });
    }
    if b_norm == 0.0 {
        return Ok(CgOutcome { solution: vec![0.0; n], iterations: 0, relative_residual: 0.0, converged: true });
    }
    let mut x = match initial {
        Some(x0) if x0.len() == n => x0.to_vec(),
        Some(x0) => {
            return Err(Error::dim(format!("initial guess has length {}, expected {n}", x0.len())));
        }
        None => vec![0.0; n],
    };
    let mut mv = vec![0.0; n];
    apply(&x, &mut mv);
    let mut r: Vec<f64> = b.iter().zip(&mv).map(|(bi, mi)| bi - mi).collect();
    let mut p = r.clone();
    let mut rr = dot_slices(&r, &r);
    if !rr.is_finite() {
        return Err(Error::Numerical { iteration: 0, detail: "initial residual is not finite".into() });
    }
    let target = params.tol * b_norm;
    let mut iterations = 0;
    while rr.sqrt() > target && iterations < params.max_iters {
        apply(&p, &mut mv);
        let pmp = dot_slices(&p, &mv);
        let alpha = rr / pmp;
        if !alpha.is_finite() || pmp <= 0.0 {
            return Err(Error::Numerical {
                iteration: iterations,
                detail: format!("curvature pᵀMp = {pmp} is not positive"),
            });
        }
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * mv[i];
        }
        let rr_next = dot_slices(&r, &r);
        if !rr_next.is_finite() {
            return Err(Error::Numerical { iteration: iterations, detail: "residual became non-finite".into() });
        }
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
        iterations += 1;
    }
    apply(&x, &mut mv);
    let true_res = b.iter().zip(&mv).map(|(bi, mi)| (bi - mi).powi(2)).sum::<f64>().sqrt() / b_norm;
    Ok(CgOutcome { solution: x, iterations, relative_residual: true_res, converged: true_res <= params.tol })
}

/// Applies `(AᵀA + shift·I) v` into `out` using `scratch` (length `m`).
fn normal_apply(op: &dyn LinearOperator, shift: f64, v: &[f64], out: &mut [f64], scratch: &mut [f64]) {
    op.apply_into(v, scratch);
    op.adjoint_into(scratch, out);
    for (o, vi) in out.iter_mut().zip(v) {
        *o += shift * vi;
    }
}

fn solve_normal(
    op: &dyn LinearOperator,
    shift: f64,
    rhs: &[f64],
    initial: Option<&[f64]>,
    cg: CgParams,
) -> Result<CgOutcome> {
    let scratch = std::cell::RefCell::new(vec![0.0; op.out_dim()]);
    cg_solve(|v, out| normal_apply(op, shift, v, out, &mut scratch.borrow_mut()), rhs, initial, cg)
}

/// Minimizes `½‖y − Az‖² + ρ/2‖x − z + u‖²` by solving
/// `(AᵀA + ρI) z = Aᵀy + ρ(x + u)` with CG.
pub fn z_update(
    op: &dyn LinearOperator,
    y: &Tensor,
    x: &Tensor,
    u: &Tensor,
    rho: f64,
    cg: CgParams,
    warm_start: Option<&Tensor>,
) -> Result<CgOutcome> {
    let d = op.in_dim();
    if y.len() != op.out_dim() || x.len() != d || u.len() != d {
        return Err(Error::dim(format!(
            "z_update: A is {}x{d}, got y {}, x {}, u {}",
            op.out_dim(),
            y.len(),
            x.len(),
            u.len()
        )));
    }
    let mut rhs = vec![0.0; d];
    op.adjoint_into(y.data(), &mut rhs);
    for i in 0..d {
        rhs[i] += rho * (x.data()[i] + u.data()[i]);
    }
    solve_normal(op, rho, &rhs, warm_start.map(|t| t.data()), cg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub max_iters: usize,
    /// Stop once RMSE(x − z) falls below this.
    pub stop_tol: f64,
    pub cg: CgParams,
    /// Hard iteration cap for problems that need stopping early.
    pub early_stop_at: Option<usize>,
    /// Tikhonov shift of the least-squares initialization of z.
    pub init_epsilon: f64,
    /// Clip the returned x to `[-1, 1]`.
    pub clamp_output: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 0.3,
            max_iters: 300,
            stop_tol: 1e-4,
            cg: CgParams::default(),
            early_stop_at: None,
            init_epsilon: 1e-6,
            clamp_output: true,
        }
    }
}

impl AdmmConfig {
    /// Penalty used for denoising with noise level `sigma` given on the
    /// 0–255 scale: ρ = 3σ/255.
    pub fn denoise_rho(sigma: f64) -> f64 {
        3.0 * sigma / 255.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::param(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.stop_tol > 0.0 && self.cg.tol > 0.0 && self.init_epsilon > 0.0) {
            return Err(Error::param("ADMM tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub rmse_xz: f64,
    pub data_fidelity: f64,
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdmmTrace {
    pub records: Vec<TraceRecord>,
}

impl AdmmTrace {
    pub const CSV_HEADER: &'static str = "iteration,rmse_xz,data_fidelity,psnr";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let psnr = r.psnr.map(format_float).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.iteration,
                format_float(r.rmse_xz),
                format_float(r.data_fidelity),
                psnr
            ));
        }
        s
    }
}

pub fn format_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.9e}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub x: Tensor,
    pub z: Tensor,
    pub u: Tensor,
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    /// Final x, clipped to `[-1, 1]` when the config asks for it.
    pub x: Tensor,
    pub state: AdmmState,
    pub trace: AdmmTrace,
    pub converged: bool,
    pub initial_norm: f64,
    /// Largest norm of x, z or u seen over the run.
    pub max_iterate_norm: f64,
}

impl AdmmOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.records.len()
    }

    /// Whether any iterate left the ball of radius `10³‖z⁰‖`.
    pub fn diverged(&self) -> bool {
        self.max_iterate_norm > 1e3 * self.initial_norm.max(f64::MIN_POSITIVE)
    }
}

fn rmse(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

/// Runs ADMM with `prox` as the x-update. `truth`, when given, adds a PSNR
/// column to the trace and must have `A`'s input dimension.
pub fn admm_solve(
    op: &dyn LinearOperator,
    y: &Tensor,
    prox: &dyn ProxOperator,
    cfg: &AdmmConfig,
    truth: Option<&Image>,
) -> Result<AdmmOutcome> {
    cfg.validate()?;
    let d = op.in_dim();
    if y.len() != op.out_dim() {
        return Err(Error::dim(format!("measurement length {} but A has {} rows", y.len(), op.out_dim())));
    }
    if let Some(t) = truth {
        if t.pixel_count() != d {
            return Err(Error::dim(format!("ground truth has {} pixels, A has {d} columns", t.pixel_count())));
        }
    }

    let mut aty = vec![0.0; d];
    op.adjoint_into(y.data(), &mut aty);
    let init = solve_normal(op, cfg.init_epsilon, &aty, None, cfg.cg)?;
    let mut z = Tensor::from_parts_unchecked(vec![d], init.solution);
    let mut u = Tensor::zeros(vec![d]);
    let mut x = z.clone();
    let initial_norm = norm_slice(z.data());
    let mut max_norm = initial_norm;

    let cap = cfg.early_stop_at.map_or(cfg.max_iters, |e| e.min(cfg.max_iters));
    let mut trace = AdmmTrace::default();
    let mut converged = false;
    let mut ay = vec![0.0; op.out_dim()];
    for k in 0..cap {
        let v = z.sub(&u)?;
        x = prox.prox(&v, cfg.rho)?;
        if x.len() != d {
            return Err(Error::Contract(format!("prox {} returned length {}, expected {d}", prox.name(), x.len())));
        }
        let zu = z_update(op, y, &x, &u, cfg.rho, cfg.cg, Some(&z)).map_err(|e| match e {
            Error::Numerical { detail, .. } => {
                Error::Numerical { iteration: k, detail: format!("z-update CG: {detail}") }
            }
            other => other,
        })?;
        z = Tensor::from_parts_unchecked(vec![d], zu.solution);
        u = Tensor::from_parts_unchecked(
            vec![d],
            u.data().iter().zip(x.data()).zip(z.data()).map(|((ui, xi), zi)| ui + xi - zi).collect(),
        );
        if u.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { iteration: k, detail: "dual variable became non-finite".into() });
        }
        for t in [&x, &z, &u] {
            max_norm = max_norm.max(norm_slice(t.data()));
        }

        let r = rmse(&x, &z);
        op.apply_into(z.data(), &mut ay);
        let fidelity = 0.5 * ay.iter().zip(y.data()).map(|(a, b)| (b - a).powi(2)).sum::<f64>();
        let quality = match truth {
            Some(t) => {
                let est = Image::from_tensor(t.height(), t.width(), t.channels(), &x)?;
                Some(psnr(t, &crate::imagery::clamp_image(&est))?)
            }
            None => None,
        };
        trace.records.push(TraceRecord { iteration: k + 1, rmse_xz: r, data_fidelity: fidelity, psnr: quality });
        if r < cfg.stop_tol {
            converged = true;
            break;
        }
    }

    let out = if cfg.clamp_output { x.map(|v| v.clamp(-1.0, 1.0)) } else { x.clone() };
    Ok(AdmmOutcome { x: out, state: AdmmState { x, z, u }, trace, converged, initial_norm, max_iterate_norm: max_norm })
}
