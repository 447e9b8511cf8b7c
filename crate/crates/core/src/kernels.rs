//! Entry-evaluable system matrices: the scalar volumetric scattering kernel
//! (point collocation on a voxel lattice) and synthetic kernels for tests.

use crate::cluster::ClusterTree;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::types::{C64, CMat, CVec};
use ndarray::Array1;

pub const EPS0: f64 = 8.854_187_812_8e-12;
pub const MU0: f64 = 1.256_637_062_12e-6;

#[derive(Debug, Clone, Copy)]
pub struct PhysicalParams {
    pub frequency: f64,
    pub k0: f64,
    pub lambda0: f64,
    pub eta0: f64,
}

impl PhysicalParams {
    pub fn new(frequency: f64) -> Result<Self> {
        if !(frequency > 0.0) {
            return Err(Error::InvalidParameter("frequency must be positive".into()));
        }
        let k0 = 2.0 * std::f64::consts::PI * frequency * (MU0 * EPS0).sqrt();
        Ok(Self {
            frequency,
            k0,
            lambda0: 2.0 * std::f64::consts::PI / k0,
            eta0: (MU0 / EPS0).sqrt(),
        })
    }

    pub fn from_wavenumber(k0: f64) -> Self {
        let c0 = 1.0 / (MU0 * EPS0).sqrt();
        Self {
            frequency: k0 * c0 / (2.0 * std::f64::consts::PI),
            k0,
            lambda0: 2.0 * std::f64::consts::PI / k0,
            eta0: (MU0 / EPS0).sqrt(),
        }
    }
}

/// Dielectric contrast kappa = (eps - eps0)/eps in relative-permittivity form.
pub fn contrast(eps_rel: C64) -> Result<C64> {
    if eps_rel.norm() == 0.0 {
        return Err(Error::SingularContrast);
    }
    Ok((eps_rel - 1.0) / eps_rel)
}

/// Scalar free-space Green's function e^{-j k0 R} / (4 pi R).
pub fn greens(r: [f64; 3], rp: [f64; 3], k0: f64) -> Result<C64> {
    let dist = distance(r, rp);
    if dist == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    Ok(greens_unchecked(dist, k0))
}

#[inline]
pub(crate) fn greens_unchecked(dist: f64, k0: f64) -> C64 {
    C64::from_polar(1.0 / (4.0 * std::f64::consts::PI * dist), -k0 * dist)
}

#[inline]
fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Analytic integral of the Green's function over the equal-volume sphere of
/// radius a = (3 Vc / 4 pi)^{1/3}:  S = (e^{-j k a}(1 + j k a) - 1) / k^2,
/// which tends to a^2/2 as k a -> 0.
pub fn self_term(cell_volume: f64, k0: f64) -> C64 {
    let a = (3.0 * cell_volume / (4.0 * std::f64::consts::PI)).cbrt();
    let jka = C64::new(0.0, k0 * a);
    (C64::from_polar(1.0, -k0 * a) * (C64::new(1.0, 0.0) + jka) - 1.0) / (k0 * k0)
}

/// Anything that can evaluate matrix entries on demand. Evaluation must be
/// deterministic and reentrant; indices are unchecked here (the public
/// `KernelSystem::entry` validates).
pub trait EntryEval: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn eval(&self, i: usize, j: usize) -> C64;

    fn fill_block(&self, rows: &[usize], cols: &[usize]) -> CMat {
        CMat::from_shape_fn((rows.len(), cols.len()), |(a, b)| self.eval(rows[a], cols[b]))
    }
}

/// An entry source composed with a cluster-tree permutation on both sides,
/// so hierarchical formats see contiguous node ranges.
pub struct PermutedEval<'a, E: EntryEval + ?Sized> {
    pub inner: &'a E,
    pub perm: &'a [usize],
}

impl<E: EntryEval + ?Sized> EntryEval for PermutedEval<'_, E> {
    fn nrows(&self) -> usize {
        self.inner.nrows()
    }
    fn ncols(&self) -> usize {
        self.inner.ncols()
    }
    fn eval(&self, i: usize, j: usize) -> C64 {
        self.inner.eval(self.perm[i], self.perm[j])
    }
}

impl EntryEval for CMat {
    fn nrows(&self) -> usize {
        self.shape()[0]
    }
    fn ncols(&self) -> usize {
        self.shape()[1]
    }
    fn eval(&self, i: usize, j: usize) -> C64 {
        self[[i, j]]
    }
}

/// An entry source whose local (0-based) indices are exposed at a global
/// offset, e.g. a dense block standing in for a sub-range of a tree.
pub struct OffsetEval<'a, E: EntryEval + ?Sized> {
    inner: &'a E,
    row_off: usize,
    col_off: usize,
}

impl<'a, E: EntryEval + ?Sized> OffsetEval<'a, E> {
    pub fn new(inner: &'a E, row_off: usize, col_off: usize) -> Self {
        Self { inner, row_off, col_off }
    }
}

impl<E: EntryEval + ?Sized> EntryEval for OffsetEval<'_, E> {
    fn nrows(&self) -> usize {
        self.inner.nrows()
    }
    fn ncols(&self) -> usize {
        self.inner.ncols()
    }
    fn eval(&self, i: usize, j: usize) -> C64 {
        self.inner.eval(i - self.row_off, j - self.col_off)
    }
}

#[derive(Debug, Clone)]
pub enum KernelKind {
    Physical,
    SyntheticOscillatory,
    SyntheticLowRank,
}

/// An entry-evaluable discrete system Z(m, n).
pub enum KernelSystem {
    Physical {
        params: PhysicalParams,
        cloud: PointCloud,
        /// kappa_m, precomputed from rel_permittivity.
        contrast: Vec<C64>,
        /// Equal-volume-sphere self integral of g.
        self_term: C64,
    },
    /// e^{-j k0 |x_m - y_n|} / (4 pi |x_m - y_n|) on two separated clouds.
    SyntheticOscillatory {
        targets: Vec<[f64; 3]>,
        sources: Vec<[f64; 3]>,
        k0: f64,
    },
    /// Deterministically seeded fixed-rank outer-product sum.
    SyntheticLowRank { m: usize, n: usize, rank: usize, seed: u64 },
}

impl KernelSystem {
    pub fn physical(params: PhysicalParams, cloud: PointCloud) -> Result<Self> {
        let contrast: Vec<C64> =
            cloud.rel_permittivity.iter().map(|&e| contrast(e)).collect::<Result<_>>()?;
        let self_term = self_term(cloud.cell_volume, params.k0);
        Ok(Self::Physical { params, cloud, contrast, self_term })
    }

    pub fn synthetic_oscillatory(targets: Vec<[f64; 3]>, sources: Vec<[f64; 3]>, k0: f64) -> Self {
        Self::SyntheticOscillatory { targets, sources, k0 }
    }

    pub fn synthetic_lowrank(m: usize, n: usize, rank: usize, seed: u64) -> Self {
        Self::SyntheticLowRank { m, n, rank, seed }
    }

    pub fn kind(&self) -> KernelKind {
        match self {
            Self::Physical { .. } => KernelKind::Physical,
            Self::SyntheticOscillatory { .. } => KernelKind::SyntheticOscillatory,
            Self::SyntheticLowRank { .. } => KernelKind::SyntheticLowRank,
        }
    }

    pub fn len(&self) -> usize {
        self.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.nrows() == 0
    }

    pub fn cloud(&self) -> Option<&PointCloud> {
        match self {
            Self::Physical { cloud, .. } => Some(cloud),
            _ => None,
        }
    }

    pub fn params(&self) -> Option<&PhysicalParams> {
        match self {
            Self::Physical { params, .. } => Some(params),
            _ => None,
        }
    }

    /// Bounds-checked entry evaluation.
    pub fn entry(&self, m: usize, n: usize) -> Result<C64> {
        if m >= self.nrows() {
            return Err(Error::IndexOutOfRange { index: m, size: self.nrows() });
        }
        if n >= self.ncols() {
            return Err(Error::IndexOutOfRange { index: n, size: self.ncols() });
        }
        Ok(self.eval(m, n))
    }

    /// Plane-wave excitation sampled at the points: V(m) = e^{-j k0 d.r_m}.
    pub fn plane_wave_rhs(&self, direction: [f64; 3], polarization: [f64; 3]) -> Result<CVec> {
        let (params, cloud) = match self {
            Self::Physical { params, cloud, .. } => (params, cloud),
            _ => return Err(Error::InvalidParameter("plane wave needs a physical kernel".into())),
        };
        let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let dot = direction[0] * polarization[0]
            + direction[1] * polarization[1]
            + direction[2] * polarization[2];
        if (norm(direction) - 1.0).abs() > 1e-9 || (norm(polarization) - 1.0).abs() > 1e-9 || dot.abs() > 1e-9 {
            return Err(Error::BadIncidence);
        }
        let k0 = params.k0;
        Ok(Array1::from_iter(cloud.positions.iter().map(|r| {
            let phase = -k0 * (direction[0] * r[0] + direction[1] * r[1] + direction[2] * r[2]);
            C64::from_polar(1.0, phase)
        })))
    }

    /// Builds the default cluster tree over the system's unknowns. Synthetic
    /// kernels get a uniform index split (they carry no geometry to sort).
    pub fn default_tree(&self, leaf_size: usize) -> Result<ClusterTree> {
        match self {
            Self::Physical { cloud, .. } => {
                ClusterTree::build(cloud, leaf_size, crate::cluster::SplitStrategy::LongestAxisMedian)
            }
            _ => Err(Error::InvalidParameter("synthetic kernels use explicit block trees".into())),
        }
    }
}

impl EntryEval for KernelSystem {
    fn nrows(&self) -> usize {
        match self {
            Self::Physical { cloud, .. } => cloud.len(),
            Self::SyntheticOscillatory { targets, .. } => targets.len(),
            Self::SyntheticLowRank { m, .. } => *m,
        }
    }

    fn ncols(&self) -> usize {
        match self {
            Self::Physical { cloud, .. } => cloud.len(),
            Self::SyntheticOscillatory { sources, .. } => sources.len(),
            Self::SyntheticLowRank { n, .. } => *n,
        }
    }

    fn eval(&self, m: usize, n: usize) -> C64 {
        match self {
            Self::Physical { params, cloud, contrast, self_term } => {
                let k2 = params.k0 * params.k0;
                if m == n {
                    1.0 / cloud.rel_permittivity[m] - k2 * contrast[m] * *self_term
                } else {
                    let g = greens_unchecked(
                        distance(cloud.positions[m], cloud.positions[n]),
                        params.k0,
                    );
                    -k2 * contrast[n] * cloud.cell_volume * g
                }
            }
            Self::SyntheticOscillatory { targets, sources, k0 } => {
                greens_unchecked(distance(targets[m], sources[n]), *k0)
            }
            Self::SyntheticLowRank { rank, seed, .. } => {
                let mut z = C64::new(0.0, 0.0);
                for p in 0..*rank {
                    z += hash_unit(*seed, p as u64, m as u64, 0)
                        * hash_unit(*seed, p as u64, n as u64, 1);
                }
                z / *rank as f64
            }
        }
    }
}

/// splitmix64-based deterministic complex value in the unit square, giving
/// random-access entries without a stateful generator.
fn hash_unit(seed: u64, p: u64, i: u64, side: u64) -> C64 {
    let mix = |mut x: u64| -> u64 {
        x = x.wrapping_add(0x9e3779b97f4a7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^ (x >> 31)
    };
    let h = mix(seed ^ mix(p ^ mix(i ^ mix(side << 17))));
    let re = ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0;
    let h2 = mix(h);
    let im = ((h2 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0;
    C64::new(re, im)
}

/// Two axis-separated cubic lattices, used by oscillatory-kernel tests:
/// unit cubes of pitch `spacing` whose centers are `gap` apart along x.
pub fn separated_clouds(side: usize, spacing: f64, gap: f64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..side {
        for j in 0..side {
            for k in 0..side {
                let p = [i as f64 * spacing, j as f64 * spacing, k as f64 * spacing];
                a.push(p);
                b.push([p[0] + gap, p[1], p[2]]);
            }
        }
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{shape_generator, Shape};
    use approx::assert_relative_eq;

    #[test]
    fn contrast_values() {
        assert_eq!(contrast(C64::new(4.0, 0.0)).unwrap(), C64::new(0.75, 0.0));
        assert_eq!(contrast(C64::new(1.0, 0.0)).unwrap(), C64::new(0.0, 0.0));
        // complex-arithmetic oracle: (-5 - 0.2j) / (-4 - 0.2j)
        let num = C64::new(-5.0, -0.2);
        let den = C64::new(-4.0, -0.2);
        let expect = num / den;
        let got = contrast(C64::new(-4.0, -0.2)).unwrap();
        assert_relative_eq!(got.re, expect.re, max_relative = 1e-14);
        assert_relative_eq!(got.im, expect.im, max_relative = 1e-14);
        assert_relative_eq!(got.re, 1.24938, epsilon = 1e-5);
        assert_relative_eq!(got.im, -0.01247, epsilon = 1e-5);
        assert!(matches!(contrast(C64::new(0.0, 0.0)), Err(Error::SingularContrast)));
    }

    #[test]
    fn greens_phases() {
        let params = PhysicalParams::from_wavenumber(2.0 * std::f64::consts::PI); // lambda0 = 1
        let l = params.lambda0;
        let g = greens([0.0; 3], [l, 0.0, 0.0], params.k0).unwrap();
        assert_relative_eq!(g.re, 1.0 / (4.0 * std::f64::consts::PI * l), max_relative = 1e-12);
        assert!(g.im.abs() < 1e-12);
        let g = greens([0.0; 3], [l / 2.0, 0.0, 0.0], params.k0).unwrap();
        assert_relative_eq!(g.re, -1.0 / (2.0 * std::f64::consts::PI * l), max_relative = 1e-12);
        assert!(g.im.abs() < 1e-9);
        // independent scalar evaluation at k0 = 2 pi, R = 0.1
        let r = 0.1;
        let expect = C64::from_polar(1.0, -params.k0 * r) / (4.0 * std::f64::consts::PI * r);
        let got = greens([0.0; 3], [0.0, r, 0.0], params.k0).unwrap();
        assert_relative_eq!(got.re, expect.re, max_relative = 1e-14);
        assert_relative_eq!(got.im, expect.im, max_relative = 1e-14);
        assert!(matches!(greens([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 1.0), Err(Error::CoincidentPoints)));
    }

    #[test]
    fn greens_reciprocity() {
        let a = [0.13, -0.4, 2.2];
        let b = [1.0, 0.33, -0.7];
        assert_eq!(greens(a, b, 5.0).unwrap(), greens(b, a, 5.0).unwrap());
    }

    #[test]
    fn self_term_static_limit() {
        // Taylor-expansion oracle: S -> a^2/2 as k0 a -> 0
        let a: f64 = 0.01;
        let vol = 4.0 / 3.0 * std::f64::consts::PI * a.powi(3);
        let k0 = 0.1 / a; // k0 a = 0.1
        let s = self_term(vol, k0);
        assert!((s - a * a / 2.0).norm() / (a * a) <= 0.05, "S = {s}");
    }

    #[test]
    fn background_system_is_identity() {
        let cloud = PointCloud::new(
            vec![[0.0; 3], [0.0, 0.0, 0.1], [0.0, 0.1, 0.0]],
            vec![C64::new(1.0, 0.0); 3],
            1e-3,
        )
        .unwrap();
        let sys = KernelSystem::physical(PhysicalParams::new(3e8).unwrap(), cloud).unwrap();
        for m in 0..3 {
            for n in 0..3 {
                let z = sys.entry(m, n).unwrap();
                let expect = if m == n { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
                assert_relative_eq!((z - expect).norm(), 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn offdiagonal_matches_direct_formula() {
        let params = PhysicalParams::from_wavenumber(2.0 * std::f64::consts::PI);
        let d = params.lambda0 / 10.0;
        let cloud = PointCloud::new(
            vec![[0.0; 3], [d, 0.0, 0.0]],
            vec![C64::new(4.0, 0.0); 2],
            d.powi(3),
        )
        .unwrap();
        let sys = KernelSystem::physical(params, cloud).unwrap();
        let g = greens([0.0; 3], [d, 0.0, 0.0], params.k0).unwrap();
        let expect = -params.k0 * params.k0 * C64::new(0.75, 0.0) * d.powi(3) * g;
        let got = sys.entry(0, 1).unwrap();
        assert_relative_eq!((got - expect).norm(), 0.0, epsilon = 1e-15);
        assert!(sys.entry(0, 5).is_err());
    }

    #[test]
    fn entry_decays_with_distance() {
        let params = PhysicalParams::from_wavenumber(1.0);
        let cloud = PointCloud::new(
            vec![[0.0; 3], [0.5, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![C64::new(4.0, 0.0); 3],
            1e-3,
        )
        .unwrap();
        let sys = KernelSystem::physical(params, cloud).unwrap();
        assert!(sys.entry(0, 2).unwrap().norm() < sys.entry(0, 1).unwrap().norm());
    }

    #[test]
    fn entry_is_deterministic() {
        let cloud =
            shape_generator(&Shape::Sphere { radius: 0.2, eps: C64::new(-4.0, -0.2) }, 0.05).unwrap();
        let sys = KernelSystem::physical(PhysicalParams::new(8e8).unwrap(), cloud).unwrap();
        for (m, n) in [(0, 0), (1, 7), (3, 3), (5, 2)] {
            assert_eq!(sys.entry(m, n).unwrap(), sys.entry(m, n).unwrap());
        }
    }

    #[test]
    fn plane_wave_values() {
        let params = PhysicalParams::from_wavenumber(2.0 * std::f64::consts::PI);
        let l = params.lambda0;
        let cloud = PointCloud::new(
            vec![[0.0; 3], [0.0, 0.0, l / 2.0], [0.3, -0.2, 0.7]],
            vec![C64::new(4.0, 0.0); 3],
            1e-3,
        )
        .unwrap();
        let sys = KernelSystem::physical(params, cloud).unwrap();
        let v = sys.plane_wave_rhs([0.0, 0.0, -1.0], [1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!((v[0] - C64::new(1.0, 0.0)).norm(), 0.0, epsilon = 1e-14);
        assert_relative_eq!((v[1] - C64::new(-1.0, 0.0)).norm(), 0.0, epsilon = 1e-12);
        // direct exponential oracle for an arbitrary point
        let expect = C64::from_polar(1.0, params.k0 * 0.7);
        assert_relative_eq!((v[2] - expect).norm(), 0.0, epsilon = 1e-12);
        assert!(sys.plane_wave_rhs([0.0, 0.0, -2.0], [1.0, 0.0, 0.0]).is_err());
        assert!(sys.plane_wave_rhs([0.0, 0.0, -1.0], [0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn synthetic_kernels() {
        let (a, b) = separated_clouds(4, 0.1, 2.0);
        let osc = KernelSystem::synthetic_oscillatory(a.clone(), b.clone(), 0.0);
        // static kernel: real positive entries
        for m in [0usize, 5, 17] {
            for n in [0usize, 3, 60] {
                let z = osc.eval(m, n);
                assert!(z.re > 0.0 && z.im == 0.0);
            }
        }
        // oscillatory sample vs direct evaluation
        let osc = KernelSystem::synthetic_oscillatory(a.clone(), b.clone(), 7.0);
        let dx = [a[5][0] - b[9][0], a[5][1] - b[9][1], a[5][2] - b[9][2]];
        let dist = (dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2]).sqrt();
        let expect = C64::from_polar(1.0 / (4.0 * std::f64::consts::PI * dist), -7.0 * dist);
        assert_relative_eq!((osc.eval(5, 9) - expect).norm(), 0.0, epsilon = 1e-14);

        let lr = KernelSystem::synthetic_lowrank(32, 32, 3, 42);
        assert_eq!(lr.eval(3, 7), lr.eval(3, 7));
    }
}
