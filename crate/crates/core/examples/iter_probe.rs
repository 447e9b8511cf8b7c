//! Quick probe: preconditioned vs unpreconditioned iteration counts for a
//! given sphere configuration.
use hodbf::geometry::{shape_generator, Shape};
use hodbf::kernels::{KernelSystem, PhysicalParams};
use hodbf::krylov::{solve_scattering, ScatteringConfig, SolveFormat};
use hodbf::types::C64;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let radius: f64 = args[1].parse().unwrap();
    let eps_re: f64 = args[2].parse().unwrap();
    let eps_im: f64 = args[3].parse().unwrap();
    let spacing: f64 = args[4].parse().unwrap();
    let freq: f64 = args[5].parse().unwrap();
    let cloud = shape_generator(&Shape::Sphere { radius, eps: C64::new(eps_re, eps_im) }, spacing).unwrap();
    let sys = KernelSystem::physical(PhysicalParams::new(freq).unwrap(), cloud).unwrap();
    let rhs = sys.plane_wave_rhs([0.0, 0.0, -1.0], [1.0, 0.0, 0.0]).unwrap();
    let base = ScatteringConfig {
        format: SolveFormat::HodBf,
        chi_con: 1e-4,
        chi_fact: 1e-3,
        chi_sol: 1e-5,
        leaf_size: 64,
        seed: 3,
        max_iter: 3000,
        use_precond: true,
    };
    let w = solve_scattering(&sys, &rhs, &base).unwrap();
    let wo = solve_scattering(&sys, &rhs, &ScatteringConfig { use_precond: false, ..base }).unwrap();
    println!(
        "n={} precond: {} its (conv {}) | unprecond: {} its (conv {})",
        sys.len(), w.report.iterations, w.report.converged, wo.report.iterations, wo.report.converged
    );
}
