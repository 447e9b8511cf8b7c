//! Point clouds, voxel-lattice shape generators and geometry file I/O.
//!
//! The scatterer is represented as a cubic lattice of point scatterers, one
//! complex relative permittivity per point, each point standing for a voxel
//! of volume `cell_volume`.

use crate::error::{Error, Result};
use crate::types::C64;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub rel_permittivity: Vec<C64>,
    pub cell_volume: f64,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, rel_permittivity: Vec<C64>, cell_volume: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyGeometry);
        }
        if positions.len() != rel_permittivity.len() {
            return Err(Error::ShapeMismatch {
                expected: positions.len(),
                got: rel_permittivity.len(),
            });
        }
        if !(cell_volume > 0.0) {
            return Err(Error::InvalidParameter("cell_volume must be positive".into()));
        }
        if rel_permittivity.iter().any(|e| e.im > 1e-12) {
            return Err(Error::InvalidParameter(
                "relative permittivity must have non-positive imaginary part (e^{+jwt} convention)".into(),
            ));
        }
        Ok(Self { positions, rel_permittivity, cell_volume })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }
}

/// Shapes supported by the voxel-lattice generator. Layer permittivities are
/// listed outer-to-inner.
#[derive(Debug, Clone)]
pub enum Shape {
    Sphere { radius: f64, eps: C64 },
    LayeredSphere { layer_thickness: f64, eps_layers: Vec<C64> },
    /// Concentric spherical shells with a hollow core. `thicknesses[i]` and
    /// `eps[i]` describe the i-th shell counted from the outside.
    Shell { outer_radius: f64, thicknesses: Vec<f64>, eps: Vec<C64> },
    Ellipsoid { semi_axes: [f64; 3], eps: C64 },
}

impl Shape {
    fn extent(&self) -> f64 {
        match self {
            Shape::Sphere { radius, .. } => *radius,
            Shape::LayeredSphere { layer_thickness, eps_layers } => {
                *layer_thickness * eps_layers.len() as f64
            }
            Shape::Shell { outer_radius, .. } => *outer_radius,
            Shape::Ellipsoid { semi_axes, .. } => semi_axes.iter().cloned().fold(0.0, f64::max),
        }
    }

    /// Permittivity at a point, or None when the point lies outside.
    fn eps_at(&self, p: [f64; 3]) -> Option<C64> {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        match self {
            Shape::Sphere { radius, eps } => (r <= *radius).then_some(*eps),
            Shape::LayeredSphere { layer_thickness, eps_layers } => {
                let outer = *layer_thickness * eps_layers.len() as f64;
                if r > outer {
                    return None;
                }
                let idx = ((outer - r) / layer_thickness) as usize;
                Some(eps_layers[idx.min(eps_layers.len() - 1)])
            }
            Shape::Shell { outer_radius, thicknesses, eps } => {
                if r > *outer_radius {
                    return None;
                }
                let mut top = *outer_radius;
                for (t, e) in thicknesses.iter().zip(eps.iter()) {
                    if r > top - t {
                        return Some(*e);
                    }
                    top -= t;
                }
                None // hollow core
            }
            Shape::Ellipsoid { semi_axes, eps } => {
                let q = (p[0] / semi_axes[0]).powi(2)
                    + (p[1] / semi_axes[1]).powi(2)
                    + (p[2] / semi_axes[2]).powi(2);
                (q <= 1.0).then_some(*eps)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        match self {
            Shape::Sphere { radius, .. } if !(radius > &0.0) => bad("sphere radius must be positive"),
            Shape::LayeredSphere { layer_thickness, eps_layers } => {
                if !(*layer_thickness > 0.0) || eps_layers.is_empty() {
                    bad("layered sphere needs positive thickness and at least one layer")
                } else {
                    Ok(())
                }
            }
            Shape::Shell { outer_radius, thicknesses, eps } => {
                if !(*outer_radius > 0.0)
                    || thicknesses.is_empty()
                    || thicknesses.len() != eps.len()
                    || thicknesses.iter().any(|t| !(*t > 0.0))
                {
                    bad("shell needs positive radius and matching thickness/eps lists")
                } else {
                    Ok(())
                }
            }
            Shape::Ellipsoid { semi_axes, .. } if semi_axes.iter().any(|a| !(*a > 0.0)) => {
                bad("ellipsoid semi-axes must be positive")
            }
            _ => Ok(()),
        }
    }
}

/// Generates a point cloud on a cubic lattice of pitch `spacing`. Lattice
/// points are integer multiples of the spacing so the origin is always a
/// lattice site; points whose centers fall inside the shape are kept and
/// `cell_volume = spacing^3`.
pub fn shape_generator(shape: &Shape, spacing: f64) -> Result<PointCloud> {
    if !(spacing > 0.0) {
        return Err(Error::InvalidParameter("spacing must be positive".into()));
    }
    shape.validate()?;
    let ext = shape.extent();
    let kmax = (ext / spacing).ceil() as i64;
    let mut positions = Vec::new();
    let mut eps = Vec::new();
    for i in -kmax..=kmax {
        for j in -kmax..=kmax {
            for k in -kmax..=kmax {
                let p = [i as f64 * spacing, j as f64 * spacing, k as f64 * spacing];
                if let Some(e) = shape.eps_at(p) {
                    positions.push(p);
                    eps.push(e);
                }
            }
        }
    }
    if positions.is_empty() {
        return Err(Error::ZeroInterior);
    }
    PointCloud::new(positions, eps, spacing.powi(3))
}

/// Loads a point cloud from CSV rows `x,y,z,eps_re,eps_im`.
pub fn load_cloud_csv<P: AsRef<Path>>(path: P, cell_volume: f64) -> Result<PointCloud> {
    let file = std::fs::File::open(path)?;
    let mut positions = Vec::new();
    let mut eps = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with('x') {
            continue;
        }
        let fields: Vec<f64> = t
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {}", lineno + 1, e)))?;
        if fields.len() != 5 {
            return Err(Error::Format(format!("line {}: expected 5 fields", lineno + 1)));
        }
        positions.push([fields[0], fields[1], fields[2]]);
        eps.push(C64::new(fields[3], fields[4]));
    }
    PointCloud::new(positions, eps, cell_volume)
}

/// Loads a point cloud from JSON: `{"cell_volume": v, "points": [[x,y,z,re,im], ...]}`.
pub fn load_cloud_json<P: AsRef<Path>>(path: P) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    let val: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let vol = val["cell_volume"]
        .as_f64()
        .ok_or_else(|| Error::Format("missing cell_volume".into()))?;
    let pts = val["points"]
        .as_array()
        .ok_or_else(|| Error::Format("missing points array".into()))?;
    let mut positions = Vec::new();
    let mut eps = Vec::new();
    for p in pts {
        let row = p.as_array().filter(|r| r.len() == 5).ok_or_else(|| {
            Error::Format("each point must be [x, y, z, eps_re, eps_im]".into())
        })?;
        let f: Vec<f64> = row
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| Error::Format("non-numeric point field".into())))
            .collect::<Result<_>>()?;
        positions.push([f[0], f[1], f[2]]);
        eps.push(C64::new(f[3], f[4]));
    }
    PointCloud::new(positions, eps, vol)
}

pub fn save_cloud_csv<P: AsRef<Path>>(cloud: &PointCloud, path: P) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "x,y,z,eps_re,eps_im")?;
    for (p, e) in cloud.positions.iter().zip(&cloud.rel_permittivity) {
        writeln!(f, "{},{},{},{},{}", p[0], p[1], p[2], e.re, e.im)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_half_spacing_is_single_point() {
        let c = shape_generator(&Shape::Sphere { radius: 0.05, eps: C64::new(4.0, 0.0) }, 0.1).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.positions[0], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn sphere_count_matches_volume_fraction() {
        // volume-fraction oracle: count ~ (4/3) pi r^3 / h^3 within 15% for r/h >= 5
        let h = 0.1;
        let r = 0.55;
        let c = shape_generator(&Shape::Sphere { radius: r, eps: C64::new(2.0, 0.0) }, h).unwrap();
        let expect = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3) / h.powi(3);
        let ratio = c.len() as f64 / expect;
        assert!((ratio - 1.0).abs() < 0.15, "ratio {ratio}");
    }

    #[test]
    fn layered_sphere_assigns_layers_outer_to_inner() {
        // five layers of thickness 0.06 m, permittivities 2..6 outer-to-inner
        let eps: Vec<C64> = (2..=6).map(|k| C64::new(k as f64, 0.0)).collect();
        let c = shape_generator(
            &Shape::LayeredSphere { layer_thickness: 0.06, eps_layers: eps },
            0.03,
        )
        .unwrap();
        // center point belongs to the innermost layer (eps = 6)
        let center = c.positions.iter().position(|p| *p == [0.0, 0.0, 0.0]).unwrap();
        assert_eq!(c.rel_permittivity[center], C64::new(6.0, 0.0));
        // a point just inside the outer surface gets eps = 2
        let (far_idx, _) = c
            .positions
            .iter()
            .enumerate()
            .max_by(|a, b| {
                let ra: f64 = a.1.iter().map(|x| x * x).sum();
                let rb: f64 = b.1.iter().map(|x| x * x).sum();
                ra.partial_cmp(&rb).unwrap()
            })
            .unwrap();
        assert_eq!(c.rel_permittivity[far_idx], C64::new(2.0, 0.0));
    }

    #[test]
    fn shell_is_hollow() {
        let c = shape_generator(
            &Shape::Shell {
                outer_radius: 1.0,
                thicknesses: vec![0.1, 0.1],
                eps: vec![C64::new(2.0, 0.0), C64::new(4.0, 0.0)],
            },
            0.05,
        )
        .unwrap();
        assert!(c.positions.iter().all(|p| {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            r > 0.8 - 1e-12
        }));
    }

    #[test]
    fn zero_interior_errors() {
        let r = shape_generator(&Shape::Sphere { radius: 1e-9, eps: C64::new(4.0, 0.0) }, 1.0);
        assert!(matches!(r, Ok(ref c) if c.len() == 1) || matches!(r, Err(Error::ZeroInterior)));
        // an off-center hollow shell thinner than the lattice pitch has no sites
        let r = shape_generator(
            &Shape::Shell {
                outer_radius: 0.4,
                thicknesses: vec![0.01],
                eps: vec![C64::new(2.0, 0.0)],
            },
            0.3,
        );
        assert!(matches!(r, Err(Error::ZeroInterior)));
    }

    #[test]
    fn csv_roundtrip() {
        let c = shape_generator(&Shape::Sphere { radius: 0.3, eps: C64::new(4.0, -0.2) }, 0.1).unwrap();
        let dir = std::env::temp_dir().join("hodbf_geom_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("cloud.csv");
        save_cloud_csv(&c, &p).unwrap();
        let c2 = load_cloud_csv(&p, c.cell_volume).unwrap();
        assert_eq!(c.len(), c2.len());
        assert_eq!(c.positions, c2.positions);
        assert_eq!(c.rel_permittivity, c2.rel_permittivity);
    }
}
