//! Equirectangular plane ↔ unit sphere mapping and positional encodings.
//!
//! An ER frame of width `W` (height `W/2`) maps pixel `(u, v)` to the unit
//! sphere via `x = sin(v/R)cos(u/R)`, `y = sin(v/R)sin(u/R)`, `z = cos(v/R)`
//! with `R = W/2π`, so `v/R` sweeps colatitude 0..π and `u/R` longitude
//! 0..2π. The spherical positional encoding (SPE) applies the sinusoidal
//! recipe to the 3-d coordinates instead of the raster position, which makes
//! it continuous across the longitude seam and degenerate at the poles —
//! exactly the distortions of the ER raster it compensates for.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Equirectangular pixel grid. Construction enforces the 2:1 aspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErGrid {
    width: usize,
    height: usize,
}

impl ErGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height * 2 != width {
            return Err(Error::invalid(
                "er_grid",
                format!("need H == W/2 with W > 0, got {width}x{height}"),
            ));
        }
        Ok(ErGrid { width, height })
    }

    pub fn from_width(width: usize) -> Result<Self> {
        Self::new(width, width / 2)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Sphere radius in pixel units: `R = W / 2π`.
    pub fn radius(&self) -> f64 {
        self.width as f64 / std::f64::consts::TAU
    }
}

/// Map continuous ER coordinates to the unit sphere.
/// `u` in `[0, W]` (wrap allowed at exactly `W`), `v` in `[0, H]`.
pub fn er_to_sphere(grid: ErGrid, u: f64, v: f64) -> Result<[f64; 3]> {
    let (w, h) = (grid.width as f64, grid.height as f64);
    if !(0.0..=w).contains(&u) || !(0.0..=h).contains(&v) {
        return Err(Error::invalid(
            "er_to_sphere",
            format!("({u}, {v}) outside [0,{w}]x[0,{h}]"),
        ));
    }
    let r = grid.radius();
    let (colat, lon) = (v / r, u / r);
    Ok([
        colat.sin() * lon.cos(),
        colat.sin() * lon.sin(),
        colat.cos(),
    ])
}

/// Sphere direction of the pixel center `(u + 0.5, v + 0.5)`.
pub fn pixel_to_sphere(grid: ErGrid, u: usize, v: usize) -> Result<[f64; 3]> {
    er_to_sphere(grid, u as f64 + 0.5, v as f64 + 0.5)
}

/// Sinusoidal encoding of a 3-d coordinate: `d/3` dims per coordinate,
/// laid out as the x block, then y, then z. Within a block, index pair
/// `(2i, 2i+1)` holds `(sin, cos)` of `pos / 10000^(2i/(d/3))`.
pub fn spe(coord: [f64; 3], d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 6 != 0 {
        return Err(Error::invalid("spe", format!("d must be divisible by 6, got {d}")));
    }
    let d3 = d / 3;
    let mut out = Vec::with_capacity(d);
    for &pos in &coord {
        for i in 0..d3 / 2 {
            let div = 10000f64.powf(2.0 * i as f64 / d3 as f64);
            out.push((pos / div).sin());
            out.push((pos / div).cos());
        }
    }
    Ok(out)
}

/// Standard transformer sinusoidal table over positions `0..length`.
pub fn sinusoidal_pe_1d(length: usize, d: usize) -> Result<Tensor<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::invalid("sinusoidal_pe_1d", format!("d must be even, got {d}")));
    }
    let mut data = Vec::with_capacity(length * d);
    for pos in 0..length {
        for i in 0..d / 2 {
            let div = 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push((pos as f64 / div).sin());
            data.push((pos as f64 / div).cos());
        }
    }
    Tensor::new(vec![length, d], data)
}

/// Per-pixel SPE for a whole grid: `H x W x d`, pixel centers sampled.
#[derive(Debug, Clone)]
pub struct SpeTable {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl SpeTable {
    pub fn at(&self, v: usize, u: usize) -> &[f64] {
        let off = (v * self.width + u) * self.dim;
        &self.data[off..off + self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.height, self.width, self.dim], self.data.clone())
            .expect("table shape consistent")
    }
}

pub fn build_spe_table(grid: ErGrid, d: usize) -> Result<SpeTable> {
    if d % 6 != 0 || d == 0 {
        return Err(Error::invalid("build_spe_table", format!("d must be divisible by 6, got {d}")));
    }
    let (w, h) = (grid.width, grid.height);
    let mut data = Vec::with_capacity(h * w * d);
    for v in 0..h {
        for u in 0..w {
            let coord = pixel_to_sphere(grid, u, v)?;
            data.extend(spe(coord, d)?);
        }
    }
    Ok(SpeTable {
        height: h,
        width: w,
        dim: d,
        data,
    })
}

/// Process-wide cache: one table per `(W, H, d)`.
pub fn spe_table_cached(grid: ErGrid, d: usize) -> Result<Arc<SpeTable>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, usize), Arc<SpeTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (grid.width, grid.height, d);
    let mut map = cache.lock().expect("spe cache poisoned");
    if let Some(t) = map.get(&key) {
        return Ok(t.clone());
    }
    let t = Arc::new(build_spe_table(grid, d)?);
    map.insert(key, t.clone());
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn aspect_ratio_enforced() {
        assert!(ErGrid::new(64, 32).is_ok());
        assert!(ErGrid::new(64, 31).is_err());
        assert!(ErGrid::new(0, 0).is_err());
    }

    #[test]
    fn poles_and_equator() {
        let grid = ErGrid::from_width(64).unwrap();
        // v = 0 is the north pole regardless of u.
        for u in [0.0, 10.0, 40.0] {
            let p = er_to_sphere(grid, u, 0.0).unwrap();
            assert!(l2(&p, &[0.0, 0.0, 1.0]) < 1e-12);
        }
        // u = 0, v = H/2 = 16: colatitude π/2 on the prime meridian.
        let p = er_to_sphere(grid, 0.0, 16.0).unwrap();
        assert!(l2(&p, &[1.0, 0.0, 0.0]) < 1e-12);
    }

    #[test]
    fn unit_norm_everywhere() {
        for w in [32, 64, 128] {
            let grid = ErGrid::from_width(w).unwrap();
            for v in 0..grid.height() {
                for u in 0..grid.width() {
                    let p = pixel_to_sphere(grid, u, v).unwrap();
                    let n = p.iter().map(|c| c * c).sum::<f64>();
                    assert!((n - 1.0).abs() < 1e-9, "pixel ({u},{v}) norm {n}");
                }
            }
        }
    }

    #[test]
    fn wrap_column_matches_zero_column() {
        let grid = ErGrid::from_width(64).unwrap();
        for v in [0.0, 3.5, 16.0, 31.0] {
            let a = er_to_sphere(grid, 0.0, v).unwrap();
            let b = er_to_sphere(grid, 64.0, v).unwrap();
            assert!(l2(&a, &b) < 1e-12);
        }
        assert!(er_to_sphere(grid, 64.5, 1.0).is_err());
        assert!(er_to_sphere(grid, -0.1, 1.0).is_err());
        assert!(er_to_sphere(grid, 1.0, 33.0).is_err());
    }

    #[test]
    fn spe_zero_coord_gives_sin0_cos1() {
        let e = spe([0.0, 0.0, 0.0], 12).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn spe_d6_closed_form() {
        let e = spe([1.0, 0.0, 0.0], 6).unwrap();
        assert!((e[0] - 1f64.sin()).abs() < 1e-15);
        assert!((e[1] - 1f64.cos()).abs() < 1e-15);
        assert_eq!(&e[2..], &[0.0, 1.0, 0.0, 1.0]);
        assert!(spe([0.0; 3], 7).is_err());
        assert!(spe([0.0; 3], 0).is_err());
    }

    #[test]
    fn spe_periodic_across_seam() {
        let grid = ErGrid::from_width(64).unwrap();
        for v in [0.5, 10.5, 31.5] {
            let a = spe(er_to_sphere(grid, 0.0, v).unwrap(), 12).unwrap();
            let b = spe(er_to_sphere(grid, 64.0, v).unwrap(), 12).unwrap();
            assert!(l2(&a, &b) < 1e-12);
        }
    }

    #[test]
    fn spe_formula_matches_direct_scalar_evaluation() {
        // Monotone frequency decay: block entry (2i, 2i+1) must reproduce
        // sin/cos(pos / 10000^(2i/(d/3))) exactly.
        let coord = [0.3, -0.7, 0.64];
        let d = 24;
        let e = spe(coord, d).unwrap();
        let d3 = d / 3;
        for (c, &pos) in coord.iter().enumerate() {
            for i in 0..d3 / 2 {
                let scale = 10000f64.powf(2.0 * i as f64 / d3 as f64);
                assert_eq!(e[c * d3 + 2 * i], (pos / scale).sin());
                assert_eq!(e[c * d3 + 2 * i + 1], (pos / scale).cos());
            }
        }
    }

    #[test]
    fn pe_1d_examples() {
        let pe = sinusoidal_pe_1d(4, 2).unwrap();
        assert_eq!(pe.at(&[0, 0]), 0.0);
        assert_eq!(pe.at(&[0, 1]), 1.0);
        assert!((pe.at(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.at(&[1, 1]) - 1f64.cos()).abs() < 1e-15);
        let pe = sinusoidal_pe_1d(50, 16).unwrap();
        assert!(pe.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(sinusoidal_pe_1d(4, 3).is_err());
    }

    #[test]
    fn table_shape_and_range() {
        let grid = ErGrid::from_width(32).unwrap();
        let t = build_spe_table(grid, 12).unwrap();
        assert_eq!((t.height, t.width, t.dim), (16, 32, 12));
        assert_eq!(t.data().len(), 16 * 32 * 12);
        assert!(t.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let tt = t.to_tensor();
        assert_eq!(tt.shape(), &[16, 32, 12]);
    }

    fn pole_row_spread(t: &SpeTable) -> f64 {
        let mut max_pole = 0.0f64;
        for u in 0..t.width {
            for u2 in u + 1..t.width {
                max_pole = max_pole.max(l2(t.at(0, u), t.at(0, u2)));
            }
        }
        max_pole
    }

    #[test]
    fn top_row_nearly_degenerate_vs_equator_neighbors() {
        // With pixel-center sampling the top-row diameter chord 2*sin(0.5/R)
        // equals the equator step chord up to the half-pixel row offset, so
        // the comparison carries the same 1% slack as the seam invariant.
        let grid = ErGrid::from_width(64).unwrap();
        let t = build_spe_table(grid, 12).unwrap();
        let max_pole = pole_row_spread(&t);
        let ve = t.height / 2;
        let equator_adjacent = l2(t.at(ve, 0), t.at(ve, 1));
        assert!(
            max_pole <= equator_adjacent * 1.01,
            "pole spread {max_pole} should not exceed equator step {equator_adjacent}"
        );
    }

    #[test]
    fn pole_encodings_converge_with_resolution() {
        let mut last = f64::INFINITY;
        for w in [32, 64, 128] {
            let grid = ErGrid::from_width(w).unwrap();
            let t = build_spe_table(grid, 12).unwrap();
            let spread = pole_row_spread(&t);
            assert!(spread < last, "W={w}: spread {spread} should shrink (was {last})");
            last = spread;
        }
    }

    #[test]
    fn seam_continuity_of_table() {
        for w in [32, 64, 128] {
            let grid = ErGrid::from_width(w).unwrap();
            let t = build_spe_table(grid, 12).unwrap();
            let mut max_seam = 0.0f64;
            let mut max_interior = 0.0f64;
            for v in 0..t.height {
                max_seam = max_seam.max(l2(t.at(v, 0), t.at(v, t.width - 1)));
                for u in 0..t.width - 1 {
                    max_interior = max_interior.max(l2(t.at(v, u), t.at(v, u + 1)));
                }
            }
            assert!(
                max_seam <= max_interior * 1.01,
                "W={w}: seam {max_seam} vs interior {max_interior}"
            );
        }
    }

    #[test]
    fn cache_returns_same_table() {
        let grid = ErGrid::from_width(32).unwrap();
        let a = spe_table_cached(grid, 6).unwrap();
        let b = spe_table_cached(grid, 6).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }
}
