//! Transpose-free QMR with optional left preconditioning, plus the
//! end-to-end scattering solve that ties geometry, compression, inversion and
//! the iterative solver together.

use crate::cluster::SplitStrategy;
use crate::error::{Error, Result};
use crate::hodbf::HodBfMatrix;
use crate::hodlr::HodLrMatrix;
use crate::kernels::KernelSystem;
use crate::oracle::dense_assemble;
use crate::types::{vec_norm, C64, CVec};

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Relative residual target.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 2000 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    pub breakdown: bool,
    /// System-operator products.
    pub matvec_count: usize,
    /// Preconditioner applications.
    pub precond_count: usize,
    /// Last quasi-residual estimate (preconditioned norm).
    pub est_residual: f64,
    /// ||b - A x|| / ||b|| with the unpreconditioned operator.
    pub true_residual: f64,
    pub solve_time_s: f64,
}

fn cdot(a: &CVec, b: &CVec) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * *y).sum()
}

/// TFQMR (Freund) on the left-preconditioned system M A x = M b. The
/// quasi-residual stopping estimate is confirmed against the true
/// unpreconditioned residual before the solve is declared converged.
pub fn tfqmr_solve(
    amul: &dyn Fn(&CVec) -> Result<CVec>,
    precond: Option<&dyn Fn(&CVec) -> Result<CVec>>,
    b: &CVec,
    x0: Option<&CVec>,
    cfg: &SolverConfig,
) -> Result<(CVec, SolveReport)> {
    let t0 = std::time::Instant::now();
    let n = b.len();
    let matvec_count = std::cell::Cell::new(0usize);
    let precond_count = std::cell::Cell::new(0usize);
    let op = |x: &CVec| -> Result<CVec> {
        matvec_count.set(matvec_count.get() + 1);
        let y = amul(x)?;
        if y.len() != n {
            return Err(Error::ShapeMismatch { expected: n, got: y.len() });
        }
        match precond {
            None => Ok(y),
            Some(m) => {
                precond_count.set(precond_count.get() + 1);
                m(&y)
            }
        }
    };
    let rhs = match precond {
        None => b.clone(),
        Some(m) => {
            precond_count.set(precond_count.get() + 1);
            m(b)?
        }
    };
    let b_norm = vec_norm(b.as_slice().unwrap());
    let rhs_norm = vec_norm(rhs.as_slice().unwrap());
    let finish = |x: CVec,
                  iterations: usize,
                  converged: bool,
                  breakdown: bool,
                  est: f64,
                  mv: usize,
                  pc: usize|
     -> Result<(CVec, SolveReport)> {
        let true_residual = if b_norm == 0.0 {
            0.0
        } else {
            let ax = amul(&x)?;
            vec_norm(&(b - &ax).to_vec()) / b_norm
        };
        Ok((
            x,
            SolveReport {
                iterations,
                converged,
                breakdown,
                matvec_count: mv + 1,
                precond_count: pc,
                est_residual: est,
                true_residual,
                solve_time_s: t0.elapsed().as_secs_f64(),
            },
        ))
    };

    let mut x = match x0 {
        Some(x0) => {
            if x0.len() != n {
                return Err(Error::ShapeMismatch { expected: n, got: x0.len() });
            }
            x0.clone()
        }
        None => CVec::zeros(n),
    };
    let r0 = if x0.is_some() { &rhs - &op(&x)? } else { rhs.clone() };
    let r0_norm = vec_norm(r0.as_slice().unwrap());
    if r0_norm == 0.0 || rhs_norm == 0.0 {
        let (mv, pc) = (matvec_count.get(), precond_count.get());
        return finish(x, 0, true, false, 0.0, mv, pc);
    }
    let target = cfg.tol * rhs_norm;

    // Freund's TFQMR with odd/even inner steps
    let rstar = r0.clone();
    let mut w = r0.clone();
    let mut y1 = r0.clone();
    let mut u1 = op(&y1)?;
    let mut v = u1.clone();
    let mut d = CVec::zeros(n);
    let mut tau = r0_norm;
    let mut theta = 0.0f64;
    let mut eta = C64::new(0.0, 0.0);
    let mut rho = cdot(&rstar, &r0);
    let mut iterations = 0usize;
    let tiny = 1e-300;

    for k in 1..=cfg.max_iter {
        iterations = k;
        let sigma = cdot(&rstar, &v);
        if sigma.norm() < tiny || rho.norm() < tiny {
            let (mv, pc) = (matvec_count.get(), precond_count.get());
            let est = tau / rhs_norm;
            let (x, mut rep) = finish(x, k, false, true, est, mv, pc)?;
            let converged = rep.true_residual <= cfg.tol;
            rep.converged = converged;
            return Ok((x, rep));
        }
        let alpha = rho / sigma;
        let mut y2 = CVec::zeros(n);
        let mut u2 = CVec::zeros(n);
        let mut stop = false;
        for j in 1..=2usize {
            let (yj, uj) = if j == 1 {
                (&y1, &u1)
            } else {
                y2 = &y1 - &(&v * alpha);
                u2 = op(&y2)?;
                (&y2, &u2)
            };
            w = &w - &(uj * alpha);
            let coeff = theta * theta * (eta / alpha);
            d = yj + &(&d * coeff);
            theta = vec_norm(w.as_slice().unwrap()) / tau;
            let c = 1.0 / (1.0 + theta * theta).sqrt();
            tau *= theta * c;
            eta = alpha * (c * c);
            x = &x + &(&d * eta);
            let m = 2 * (k - 1) + j;
            if tau * ((m + 1) as f64).sqrt() <= target {
                stop = true;
                break;
            }
        }
        if stop {
            let (mv, pc) = (matvec_count.get(), precond_count.get());
            let est = tau / rhs_norm;
            let (xr, mut rep) = finish(x.clone(), k, true, false, est, mv, pc)?;
            if rep.true_residual <= cfg.tol {
                return Ok((xr, rep));
            }
            // quasi-residual estimate was optimistic: keep iterating
            if k == cfg.max_iter {
                rep.converged = false;
                return Ok((xr, rep));
            }
        }
        let rho_new = cdot(&rstar, &w);
        let beta = rho_new / rho;
        rho = rho_new;
        y1 = &w + &(&y2 * beta);
        u1 = op(&y1)?;
        v = &u1 + &(&(&u2 + &(&v * beta)) * beta);
    }
    let (mv, pc) = (matvec_count.get(), precond_count.get());
    let est = tau / rhs_norm;
    let (x, mut rep) = finish(x, iterations, false, false, est, mv, pc)?;
    rep.converged = rep.true_residual <= cfg.tol;
    Ok((x, rep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveFormat {
    HodBf,
    HodLr,
    Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct ScatteringConfig {
    pub format: SolveFormat,
    pub chi_con: f64,
    pub chi_fact: f64,
    pub chi_sol: f64,
    pub leaf_size: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub use_precond: bool,
}

impl Default for ScatteringConfig {
    fn default() -> Self {
        Self {
            format: SolveFormat::HodBf,
            chi_con: 1e-4,
            chi_fact: 1e-3,
            chi_sol: 1e-5,
            leaf_size: 64,
            seed: 0,
            max_iter: 2000,
            use_precond: true,
        }
    }
}

pub struct ScatteringOutcome {
    /// Contrast-current coefficients in original point order.
    pub x: CVec,
    pub report: SolveReport,
    pub n: usize,
    pub construct_time_s: f64,
    pub invert_time_s: f64,
    pub storage_units: usize,
    pub max_rank: usize,
}

/// Builds the chosen operator format for `sys`, optionally factorizes the
/// HOD-BF preconditioner, and runs TFQMR on `rhs`.
pub fn solve_scattering(
    sys: &KernelSystem,
    rhs: &CVec,
    cfg: &ScatteringConfig,
) -> Result<ScatteringOutcome> {
    if cfg.chi_fact < cfg.chi_con {
        return Err(Error::ToleranceOrder { fact: cfg.chi_fact, con: cfg.chi_con });
    }
    let solver = SolverConfig { tol: cfg.chi_sol, max_iter: cfg.max_iter };
    match cfg.format {
        SolveFormat::HodBf => {
            let tree = sys.default_tree(cfg.leaf_size)?;
            let t0 = std::time::Instant::now();
            let hb = HodBfMatrix::construct(sys, &tree, cfg.chi_con, cfg.seed)?;
            let construct_time_s = t0.elapsed().as_secs_f64();
            let stats = hb.stats();
            let (inv, invert_time_s) = if cfg.use_precond {
                let t1 = std::time::Instant::now();
                let inv = hb.invert(cfg.chi_fact, cfg.seed.wrapping_add(1))?;
                (Some(inv), t1.elapsed().as_secs_f64())
            } else {
                (None, 0.0)
            };
            let amul = |x: &CVec| hb.matvec(x);
            let (x, report) = match &inv {
                Some(inv) => {
                    let pc = |r: &CVec| inv.apply_inverse(r);
                    tfqmr_solve(&amul, Some(&pc), rhs, None, &solver)?
                }
                None => tfqmr_solve(&amul, None, rhs, None, &solver)?,
            };
            let inv_storage = inv.as_ref().map(|i| i.stats().storage_units).unwrap_or(0);
            Ok(ScatteringOutcome {
                x,
                report,
                n: hb.n(),
                construct_time_s,
                invert_time_s,
                storage_units: stats.storage_units + inv_storage,
                max_rank: stats.max_rank,
            })
        }
        SolveFormat::HodLr => {
            if cfg.use_precond {
                return Err(Error::InvalidParameter(
                    "the low-rank baseline has no inversion path; disable the preconditioner".into(),
                ));
            }
            let tree = sys.default_tree(cfg.leaf_size)?;
            let t0 = std::time::Instant::now();
            let hl = HodLrMatrix::construct(sys, &tree, cfg.chi_con)?;
            let construct_time_s = t0.elapsed().as_secs_f64();
            let stats = hl.stats();
            let amul = |x: &CVec| hl.matvec(x);
            let (x, report) = tfqmr_solve(&amul, None, rhs, None, &solver)?;
            Ok(ScatteringOutcome {
                x,
                report,
                n: hl.n(),
                construct_time_s,
                invert_time_s: 0.0,
                storage_units: stats.storage_units,
                max_rank: stats.max_rank,
            })
        }
        SolveFormat::Dense => {
            let t0 = std::time::Instant::now();
            let dense = dense_assemble(sys, usize::MAX)?;
            let construct_time_s = t0.elapsed().as_secs_f64();
            let n = dense.matrix.shape()[0];
            let amul = |x: &CVec| -> Result<CVec> { Ok(dense.matrix.dot(x)) };
            let (x, report) = tfqmr_solve(&amul, None, rhs, None, &solver)?;
            Ok(ScatteringOutcome {
                x,
                report,
                n,
                construct_time_s,
                invert_time_s: 0.0,
                storage_units: n * n,
                max_rank: n,
            })
        }
    }
}

/// sqrt(mean |x - x_ref|^2) normalized by the largest reference magnitude.
pub fn relative_rmse(x: &CVec, x_ref: &CVec) -> Result<f64> {
    if x.len() != x_ref.len() {
        return Err(Error::ShapeMismatch { expected: x_ref.len(), got: x.len() });
    }
    let peak = x_ref.iter().map(|z| z.norm()).fold(0.0f64, f64::max);
    if peak == 0.0 {
        return Err(Error::ZeroReference);
    }
    let mse: f64 =
        x.iter().zip(x_ref.iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / x.len() as f64;
    Ok(mse.sqrt() / peak)
}

/// Scattered far-field amplitude F(d) = sum_n k0^2 kappa_n Vc x_n e^{+j k0 d.r_n}
/// for unit observation directions `directions`.
pub fn far_field_pattern(
    sys: &KernelSystem,
    x: &CVec,
    directions: &[[f64; 3]],
) -> Result<Vec<C64>> {
    let cloud = sys
        .cloud()
        .ok_or_else(|| Error::InvalidParameter("far field needs a physical system".into()))?;
    let params = sys.params().expect("physical system has parameters");
    if x.len() != cloud.len() {
        return Err(Error::ShapeMismatch { expected: cloud.len(), got: x.len() });
    }
    let k0 = params.k0;
    let vc = cloud.cell_volume;
    let mut out = Vec::with_capacity(directions.len());
    for d in directions {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::BadIncidence);
        }
        let mut f = C64::new(0.0, 0.0);
        for (n, r) in cloud.positions.iter().enumerate() {
            let kappa = crate::kernels::contrast(cloud.rel_permittivity[n])?;
            let phase = k0 * (d[0] * r[0] + d[1] * r[1] + d[2] * r[2]);
            f += C64::from_polar(1.0, phase) * x[n] * kappa;
        }
        out.push(f * (k0 * k0 * vc));
    }
    Ok(out)
}

/// Default cluster split strategy re-exported for callers configuring trees
/// directly.
pub const DEFAULT_SPLIT: SplitStrategy = SplitStrategy::LongestAxisMedian;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{shape_generator, Shape};
    use crate::kernels::PhysicalParams;
    use crate::oracle::DEFAULT_DENSE_CAP;
    use crate::types::CMat;

    fn spd_like_system(n: usize) -> CMat {
        // diagonally dominant complex system
        CMat::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                C64::new(4.0 + (i as f64 * 0.01), 0.5)
            } else {
                let d = (i as f64 - j as f64).abs();
                C64::new(0.3, -0.1) / C64::new(d * d + 1.0, 0.0)
            }
        })
    }

    #[test]
    fn converges_on_dense_system() {
        let n = 80;
        let a = spd_like_system(n);
        let x_true = CVec::from_shape_fn(n, |i| C64::new((i as f64 * 0.3).sin(), 0.1));
        let b = a.dot(&x_true);
        let amul = |x: &CVec| -> Result<CVec> { Ok(a.dot(x)) };
        let (x, rep) =
            tfqmr_solve(&amul, None, &b, None, &SolverConfig { tol: 1e-10, max_iter: 500 }).unwrap();
        assert!(rep.converged, "not converged: {rep:?}");
        assert!(rep.true_residual <= 1e-10);
        let err = vec_norm(&(&x - &x_true).to_vec()) / vec_norm(&x_true.to_vec());
        assert!(err <= 1e-8, "solution err {err}");
        assert!(rep.matvec_count >= rep.iterations);
        assert_eq!(rep.precond_count, 0);
    }

    #[test]
    fn preconditioning_reduces_iterations() {
        let n = 120;
        // badly scaled diagonal plus coupling
        let a = CMat::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                C64::new(1.0 + 100.0 * (i as f64 / n as f64), 0.0)
            } else if i.abs_diff(j) == 1 {
                C64::new(0.5, 0.05)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let b = CVec::from_elem(n, C64::new(1.0, 0.0));
        let amul = |x: &CVec| -> Result<CVec> { Ok(a.dot(x)) };
        let cfg = SolverConfig { tol: 1e-8, max_iter: 1000 };
        let (_, plain) = tfqmr_solve(&amul, None, &b, None, &cfg).unwrap();
        let diag: Vec<C64> = (0..n).map(|i| a[[i, i]]).collect();
        let pc = |r: &CVec| -> Result<CVec> {
            Ok(CVec::from_shape_fn(n, |i| r[i] / diag[i]))
        };
        let (_, prec) = tfqmr_solve(&amul, Some(&pc), &b, None, &cfg).unwrap();
        assert!(prec.converged && plain.converged);
        assert!(prec.iterations <= plain.iterations);
        assert!(prec.precond_count > 0);
    }

    #[test]
    fn zero_rhs_and_identity() {
        let n = 10;
        let eye = CMat::eye(n);
        let amul = |x: &CVec| -> Result<CVec> { Ok(eye.dot(x)) };
        let zero = CVec::zeros(n);
        let (x, rep) = tfqmr_solve(&amul, None, &zero, None, &SolverConfig::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(vec_norm(&x.to_vec()), 0.0);
        let b = CVec::from_shape_fn(n, |i| C64::new(i as f64, -1.0));
        let (x, rep) = tfqmr_solve(&amul, None, &b, None, &SolverConfig::default()).unwrap();
        assert!(rep.converged && rep.iterations <= 2);
        assert!(vec_norm(&(&x - &b).to_vec()) <= 1e-12 * vec_norm(&b.to_vec()));
    }

    #[test]
    fn breakdown_is_flagged() {
        // r* and A r0 orthogonal at the first step: sigma = 0
        let a = CMat::from_shape_fn((2, 2), |(i, j)| {
            if i != j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }
        });
        let amul = |x: &CVec| -> Result<CVec> { Ok(a.dot(x)) };
        let b = CVec::from_shape_fn(2, |i| if i == 0 { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) });
        let (_, rep) = tfqmr_solve(&amul, None, &b, None, &SolverConfig::default()).unwrap();
        assert!(rep.breakdown);
        assert!(!rep.converged);
    }

    #[test]
    fn scattering_solve_matches_dense_oracle() {
        let cloud =
            shape_generator(&Shape::Sphere { radius: 0.25, eps: C64::new(2.0, 0.0) }, 0.05).unwrap();
        let sys = KernelSystem::physical(PhysicalParams::new(3.0e8).unwrap(), cloud).unwrap();
        let rhs = sys.plane_wave_rhs([0.0, 0.0, -1.0], [1.0, 0.0, 0.0]).unwrap();
        let cfg = ScatteringConfig {
            chi_con: 1e-5,
            chi_fact: 1e-4,
            chi_sol: 1e-7,
            leaf_size: 32,
            ..ScatteringConfig::default()
        };
        let out = solve_scattering(&sys, &rhs, &cfg).unwrap();
        assert!(out.report.converged, "{:?}", out.report);
        let dense = dense_assemble(&sys, DEFAULT_DENSE_CAP).unwrap();
        let x_ref = dense.solve(&rhs).unwrap();
        let rmse = relative_rmse(&out.x, &x_ref).unwrap();
        assert!(rmse <= 1e-5, "rmse {rmse}");
        // the preconditioned solve should need very few iterations
        assert!(out.report.iterations <= 10, "iterations {}", out.report.iterations);
    }

    #[test]
    fn hodlr_format_solves_unpreconditioned() {
        let cloud =
            shape_generator(&Shape::Sphere { radius: 0.2, eps: C64::new(2.0, 0.0) }, 0.05).unwrap();
        let sys = KernelSystem::physical(PhysicalParams::new(3.0e8).unwrap(), cloud).unwrap();
        let rhs = sys.plane_wave_rhs([0.0, 0.0, -1.0], [1.0, 0.0, 0.0]).unwrap();
        let cfg = ScatteringConfig {
            format: SolveFormat::HodLr,
            use_precond: false,
            chi_con: 1e-6,
            chi_sol: 1e-6,
            leaf_size: 32,
            ..ScatteringConfig::default()
        };
        let out = solve_scattering(&sys, &rhs, &cfg).unwrap();
        assert!(out.report.converged);
        let dense = dense_assemble(&sys, DEFAULT_DENSE_CAP).unwrap();
        let x_ref = dense.solve(&rhs).unwrap();
        assert!(relative_rmse(&out.x, &x_ref).unwrap() <= 1e-4);
        // requesting a preconditioner with the baseline is an error
        let bad = ScatteringConfig { format: SolveFormat::HodLr, use_precond: true, ..cfg };
        assert!(solve_scattering(&sys, &rhs, &bad).is_err());
    }

    #[test]
    fn rmse_definition() {
        let x_ref = CVec::from_shape_fn(4, |i| C64::new(i as f64, 0.0)); // peak 3
        let x = CVec::from_shape_fn(4, |i| C64::new(i as f64, 0.0) + C64::new(0.3, 0.0));
        // mse = 0.09, rmse = 0.3, normalized by 3
        let r = relative_rmse(&x, &x_ref).unwrap();
        assert!((r - 0.1).abs() <= 1e-12);
        assert!(matches!(relative_rmse(&x, &CVec::zeros(4)), Err(Error::ZeroReference)));
    }

    #[test]
    fn far_field_single_point() {
        let cloud =
            shape_generator(&Shape::Sphere { radius: 0.01, eps: C64::new(4.0, 0.0) }, 0.1).unwrap();
        assert_eq!(cloud.len(), 1);
        let vc = cloud.cell_volume;
        let sys = KernelSystem::physical(PhysicalParams::new(3.0e8).unwrap(), cloud).unwrap();
        let k0 = sys.params().unwrap().k0;
        let x = CVec::from_elem(1, C64::new(2.0, -1.0));
        let dirs = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let f = far_field_pattern(&sys, &x, &dirs).unwrap();
        // the single scatterer sits at the origin: no phase, same value both ways
        let kappa = crate::kernels::contrast(C64::new(4.0, 0.0)).unwrap();
        let expect = x[0] * kappa * k0 * k0 * vc;
        assert!((f[0] - expect).norm() <= 1e-12 * expect.norm());
        assert!((f[1] - expect).norm() <= 1e-12 * expect.norm());
        // non-unit direction rejected
        assert!(far_field_pattern(&sys, &x, &[[0.0, 0.0, 2.0]]).is_err());
    }
}
