//! Rough wall-clock probe for the scaling sweeps: construction, inversion
//! and baseline storage at a few problem sizes. Run with --release.

use hodbf::cluster::{ClusterTree, SplitStrategy};
use hodbf::geometry::{shape_generator, Shape};
use hodbf::hodbf::HodBfMatrix;
use hodbf::hodlr::HodLrMatrix;
use hodbf::kernels::{KernelSystem, PhysicalParams};
use hodbf::types::C64;

fn sphere_of_size(target_n: usize, spacing: f64, freq: f64) -> KernelSystem {
    let radius = spacing * (3.0 * target_n as f64 / (4.0 * std::f64::consts::PI)).cbrt();
    let cloud =
        shape_generator(&Shape::Sphere { radius, eps: C64::new(2.0, 0.0) }, spacing).unwrap();
    KernelSystem::physical(PhysicalParams::new(freq).unwrap(), cloud).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("construct");
    let sizes: Vec<usize> = args[2..].iter().map(|s| s.parse().unwrap()).collect();
    let chi_con = 1e-3;
    for target in sizes {
        let sys = sphere_of_size(target, 0.05, 6.0e8);
        let n = sys.len();
        let tree: ClusterTree = sys.default_tree(64).unwrap();
        match mode {
            "construct" => {
                let t0 = std::time::Instant::now();
                let hb = HodBfMatrix::construct(&sys, &tree, chi_con, 1).unwrap();
                let dt = t0.elapsed().as_secs_f64();
                let st = hb.stats();
                println!(
                    "construct n={n} time={dt:.2}s storage={} max_rank={}",
                    st.storage_units, st.max_rank
                );
            }
            "invert" => {
                let hb = HodBfMatrix::construct(&sys, &tree, chi_con, 1).unwrap();
                let t0 = std::time::Instant::now();
                let inv = hb.invert(1e-2, 2).unwrap();
                let dt = t0.elapsed().as_secs_f64();
                println!("invert n={n} time={dt:.2}s inv_storage={}", inv.stats().storage_units);
            }
            "hodlr" => {
                let t0 = std::time::Instant::now();
                let hl = HodLrMatrix::construct(&sys, &tree, chi_con).unwrap();
                let dt = t0.elapsed().as_secs_f64();
                println!(
                    "hodlr n={n} time={dt:.2}s storage={} max_rank={}",
                    hl.stats().storage_units,
                    hl.stats().max_rank
                );
            }
            "ranks" => {
                let hb = HodBfMatrix::construct(&sys, &tree, chi_con, 1).unwrap();
                for (len, r) in hb.offdiag_level_ranks() {
                    println!("ranks n={n} block_len={len} max_rank={r}");
                }
            }
            "cobble" => {
                let cloud = sys.cloud().unwrap();
                let t = ClusterTree::build(cloud, 64, SplitStrategy::Cobblestone).unwrap();
                println!("cobblestone tree n={} depth={}", t.len(), t.depth());
            }
            other => panic!("unknown mode {other}"),
        }
    }
}
