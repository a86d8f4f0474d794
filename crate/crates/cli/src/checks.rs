//! Self-check suites exposed by `learnprox check` and the acceptance run.

use std::fmt;
use std::str::FromStr;

use learnprox::error::Result;
use learnprox::imagery::Image;
use learnprox::linops::{
    adjoint_check, box_downsample_op, gaussian_matrix_op, identity_op, mask_op, LinearOperator, MaskSpec,
};
use learnprox::neuralnet::gradcheck::{layer_suite, FD_TOLERANCE};
use learnprox::priors::{IdentityProx, PixelL1Prior};
use learnprox::solvers::{admm_solve, cg_solve, AdmmConfig, CgParams};
use learnprox::tensor::{uniform_sample, RngStream};
use learnprox::training::loss_gradient_suite;
use learnprox::wavelets::{default_levels, haar_forward, haar_inverse};

pub const ADJOINT_TOLERANCE: f64 = 1e-10;
pub const ADJOINT_TRIALS: usize = 100;
pub const CG_RESIDUAL: f64 = 1e-8;
pub const WAVELET_RECON_TOLERANCE: f64 = 1e-12;
pub const PARSEVAL_TOLERANCE: f64 = 1e-10;
pub const WAVELET_IMAGES: usize = 1000;
pub const ADMM_ORACLE_TOLERANCE: f64 = 1e-6;
pub const ADMM_ORACLE_MAX_ITERS: usize = 300;
const SQUARE_SYSTEMS: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Adjoint,
    Gradient,
    Wavelet,
    Cg,
    Admm,
}

impl FromStr for CheckKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "adjoint" => CheckKind::Adjoint,
            "gradient" => CheckKind::Gradient,
            "wavelet" => CheckKind::Wavelet,
            "cg" => CheckKind::Cg,
            "admm" => CheckKind::Admm,
            _ => return Err(format!("unknown check '{s}' (adjoint, gradient, wavelet, cg, admm)")),
        })
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckKind::Adjoint => "adjoint",
            CheckKind::Gradient => "gradient",
            CheckKind::Wavelet => "wavelet",
            CheckKind::Cg => "cg",
            CheckKind::Admm => "admm",
        })
    }
}

/// One measured quantity of a suite against its bound.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckItem {
    pub name: String,
    pub value: f64,
    pub bound: f64,
}

impl CheckItem {
    fn new(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound }
    }

    pub fn passed(&self) -> bool {
        self.value <= self.bound
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub kind: CheckKind,
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        !self.items.is_empty() && self.items.iter().all(CheckItem::passed)
    }

    /// The item with the largest value relative to its bound.
    pub fn worst(&self) -> Option<&CheckItem> {
        self.items.iter().max_by(|a, b| (a.value / a.bound).total_cmp(&(b.value / b.bound)))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for it in &self.items {
            let tag = if it.passed() { "ok  " } else { "FAIL" };
            s.push_str(&format!("{tag} {:<56} {:.3e} (bound {:.0e})\n", it.name, it.value, it.bound));
        }
        if let Some(w) = self.worst() {
            s.push_str(&format!(
                "{} suite: {} ({} items, worst {} = {:.3e})\n",
                self.kind,
                if self.passed() { "pass" } else { "fail" },
                self.items.len(),
                w.name,
                w.value
            ));
        }
        s
    }
}

pub fn run_check(kind: CheckKind, seed: u64) -> Result<CheckReport> {
    let items = match kind {
        CheckKind::Adjoint => adjoint_items(seed)?,
        CheckKind::Gradient => gradient_items(seed)?,
        CheckKind::Wavelet => wavelet_items(seed)?,
        CheckKind::Cg => cg_items(seed)?,
        CheckKind::Admm => admm_items(seed)?,
    };
    Ok(CheckReport { kind, items })
}

/// Every operator family at the geometries used by the tasks.
pub fn builtin_operators(seed: u64) -> Result<Vec<Box<dyn LinearOperator>>> {
    let mut ops: Vec<Box<dyn LinearOperator>> = vec![Box::new(identity_op(784))];
    for ratio in [0.1, 0.3, 1.0] {
        ops.push(Box::new(gaussian_matrix_op(784, ratio, seed)?));
    }
    for (h, w, c) in [(28, 28, 1), (32, 24, 3)] {
        ops.push(Box::new(mask_op(&MaskSpec::pixelwise(0.5, seed), h, w, c)?));
        ops.push(Box::new(mask_op(&MaskSpec::scattered(seed), h, w, c)?));
        ops.push(Box::new(mask_op(&MaskSpec::centered_block(), h, w, c)?));
        ops.push(Box::new(box_downsample_op(h, w, c, 2)?));
        ops.push(Box::new(box_downsample_op(h, w, c, 4)?));
    }
    Ok(ops)
}

fn adjoint_items(seed: u64) -> Result<Vec<CheckItem>> {
    builtin_operators(seed)?
        .iter()
        .enumerate()
        .map(|(i, op)| {
            let err = adjoint_check(op.as_ref(), ADJOINT_TRIALS, seed.wrapping_add(i as u64))?;
            Ok(CheckItem::new(format!("{} [{}→{}]", op.name(), op.in_dim(), op.out_dim()), err, ADJOINT_TOLERANCE))
        })
        .collect()
}

fn gradient_items(seed: u64) -> Result<Vec<CheckItem>> {
    let mut items: Vec<CheckItem> = layer_suite(seed)?
        .iter()
        .map(|g| CheckItem::new(format!("layer {}", g.name), g.worst(), FD_TOLERANCE))
        .collect();
    items.extend(
        loss_gradient_suite(seed)?.iter().map(|g| CheckItem::new(format!("loss {}", g.name), g.worst(), FD_TOLERANCE)),
    );
    Ok(items)
}

fn wavelet_items(seed: u64) -> Result<Vec<CheckItem>> {
    const SHAPES: [(usize, usize, usize); 5] = [(28, 28, 1), (32, 32, 3), (16, 24, 1), (8, 8, 3), (64, 48, 1)];
    let mut rng = RngStream::new(seed);
    let (mut recon, mut parseval) = (0.0f64, 0.0f64);
    for i in 0..WAVELET_IMAGES {
        let (h, w, c) = SHAPES[i % SHAPES.len()];
        let img = Image::from_tensor(h, w, c, &uniform_sample(&mut rng, -1.0, 1.0, h * w * c)?)?;
        let coeffs = haar_forward(&img, default_levels(h, w))?;
        let back = haar_inverse(&coeffs)?;
        let err = img.data().iter().zip(back.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        recon = recon.max(err);
        let e_img: f64 = img.data().iter().map(|v| v * v).sum();
        let e_coef: f64 = coeffs.to_vec().iter().map(|v| v * v).sum();
        parseval = parseval.max((e_img - e_coef).abs() / e_img);
    }
    Ok(vec![
        CheckItem::new(format!("reconstruction max abs ({WAVELET_IMAGES} images)"), recon, WAVELET_RECON_TOLERANCE),
        CheckItem::new(format!("energy relative gap ({WAVELET_IMAGES} images)"), parseval, PARSEVAL_TOLERANCE),
    ])
}

/// `BᵀB/n + 0.05 I` for Gaussian `B`.
fn random_spd(n: usize, rng: &mut RngStream) -> Vec<f64> {
    let b: Vec<f64> = (0..n * n).map(|_| rng.next_normal()).collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let s: f64 = (0..n).map(|k| b[k * n + i] * b[k * n + j]).sum();
            m[i * n + j] = s / n as f64 + if i == j { 0.05 } else { 0.0 };
        }
    }
    m
}

fn cg_items(seed: u64) -> Result<Vec<CheckItem>> {
    let mut rng = RngStream::new(seed);
    let mut items = Vec::new();
    for n in [1, 2, 5, 10, 25, 50, 75, 100] {
        let m = random_spd(n, &mut rng);
        let b: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let apply = |v: &[f64], out: &mut [f64]| {
            for (o, row) in out.iter_mut().zip(m.chunks_exact(n)) {
                *o = row.iter().zip(v).map(|(a, x)| a * x).sum();
            }
        };
        let out = cg_solve(apply, &b, None, CgParams { tol: CG_RESIDUAL, max_iters: 2 * n })?;
        items.push(CheckItem::new(format!("n={n} relative residual"), out.relative_residual, CG_RESIDUAL));
        items.push(CheckItem::new(format!("n={n} iterations"), out.iterations as f64, (2 * n) as f64));
    }
    Ok(items)
}

/// Gaussian elimination with partial pivoting on a row-major square matrix.
pub fn dense_solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs())).unwrap();
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i * n + k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i * n + i];
    }
    x
}

fn admm_items(seed: u64) -> Result<Vec<CheckItem>> {
    let mut rng = RngStream::new(seed);
    let mut items = Vec::new();

    let d = 784;
    let y = uniform_sample(&mut rng, -1.0, 1.0, d)?;
    let lambda = 0.2;
    let cfg = AdmmConfig { stop_tol: 1e-9, clamp_output: false, ..AdmmConfig::default() };
    let out = admm_solve(&identity_op(d), &y, &PixelL1Prior::new(lambda)?, &cfg, None)?;
    let err = out
        .x
        .data()
        .iter()
        .zip(y.data())
        .fold(0.0f64, |m, (x, v)| m.max((x - v.signum() * (v.abs() - lambda).max(0.0)).abs()));
    items.push(CheckItem::new("A=I, pixel l1: sup error vs soft threshold", err, ADMM_ORACLE_TOLERANCE));
    items.push(CheckItem::new("A=I, pixel l1: iterations", out.iterations() as f64, ADMM_ORACLE_MAX_ITERS as f64));

    let d = 16;
    let cfg = AdmmConfig {
        rho: 1e-6,
        max_iters: 50_000,
        stop_tol: 1e-15,
        cg: CgParams { tol: 1e-14, max_iters: 500 },
        clamp_output: false,
        ..AdmmConfig::default()
    };
    let mut err = 0.0f64;
    for k in 0..SQUARE_SYSTEMS {
        let a = gaussian_matrix_op(d, 1.0, seed.wrapping_add(k))?;
        let truth = uniform_sample(&mut rng, -0.9, 0.9, d)?;
        let y = a.forward(&truth)?;
        let direct = dense_solve(a.entries().to_vec(), y.data().to_vec());
        let out = admm_solve(&a, &y, &IdentityProx, &cfg, None)?;
        err = out.x.data().iter().zip(&direct).fold(err, |m, (x, o)| m.max((x - o).abs()));
    }
    items.push(CheckItem::new(
        format!("square Gaussian A ({SQUARE_SYSTEMS} draws), identity prox: sup error vs direct solve"),
        err,
        ADMM_ORACLE_TOLERANCE,
    ));
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in [CheckKind::Adjoint, CheckKind::Gradient, CheckKind::Wavelet, CheckKind::Cg, CheckKind::Admm] {
            assert_eq!(k.to_string().parse::<CheckKind>().unwrap(), k);
        }
        assert!("blur".parse::<CheckKind>().is_err());
    }

    #[test]
    fn dense_solve_inverts() {
        let a = vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let x = dense_solve(a.clone(), vec![5.0, 3.0, 6.0]);
        for (row, b) in a.chunks(3).zip([5.0, 3.0, 6.0]) {
            let s: f64 = row.iter().zip(&x).map(|(p, q)| p * q).sum();
            assert!((s - b).abs() < 1e-12);
        }
    }

    #[test]
    fn report_worst_and_failure() {
        let r = CheckReport {
            kind: CheckKind::Cg,
            items: vec![CheckItem::new("a", 1e-12, 1e-10), CheckItem::new("b", 2.0, 1.0)],
        };
        assert!(!r.passed());
        assert_eq!(r.worst().unwrap().name, "b");
        assert!(r.render().contains("FAIL"));
        assert!(!CheckReport { kind: CheckKind::Cg, items: vec![] }.passed());
    }

    #[test]
    fn quick_suites_pass() {
        for k in [CheckKind::Adjoint, CheckKind::Cg, CheckKind::Admm] {
            let r = run_check(k, 1).unwrap();
            assert!(r.passed(), "{}", r.render());
        }
    }
}
