//! Antenna array geometry, steering vectors, per-antenna gain vectors and
//! synthesized beampatterns.

use crate::error::{Error, Result};
use crate::harmonics::{pattern_gain, PatternCoefficients};
use num_complex::Complex64;
use std::f64::consts::PI;
use std::io::Write;

/// Element positions (meters) plus the carrier wavelength.
#[derive(Debug, Clone)]
pub struct ArrayGeometry {
    /// One [x, y, z] triple per element.
    pub positions: Vec<[f64; 3]>,
    pub wavelength: f64,
}

impl ArrayGeometry {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Propagation direction as angles plus the matching unit vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub theta: f64,
    pub phi: f64,
    pub u: [f64; 3],
}

impl Direction {
    pub fn from_angles(theta: f64, phi: f64) -> Result<Self> {
        if !(0.0..=PI).contains(&theta) || !(-PI..=PI).contains(&phi) {
            return Err(Error::Domain(format!(
                "direction angles out of domain: theta={theta}, phi={phi}"
            )));
        }
        Ok(Direction {
            theta,
            phi,
            u: [
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            ],
        })
    }

    /// Direction of the unit vector `v` (need not be normalized).
    pub fn from_vector(v: [f64; 3]) -> Result<Self> {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n <= 0.0 {
            return Err(Error::Domain("zero direction vector".into()));
        }
        let u = [v[0] / n, v[1] / n, v[2] / n];
        let theta = u[2].clamp(-1.0, 1.0).acos();
        let phi = if u[0] == 0.0 && u[1] == 0.0 {
            0.0
        } else {
            u[1].atan2(u[0])
        };
        Ok(Direction { theta, phi, u })
    }

    pub fn negated(&self) -> Direction {
        Direction::from_vector([-self.u[0], -self.u[1], -self.u[2]]).unwrap()
    }
}

/// Uniform planar array on the z = 0 plane, centered at the origin, row-major
/// element order.
pub fn upa_geometry(
    n_x: usize,
    n_y: usize,
    spacing_wavelengths: f64,
    wavelength: f64,
) -> Result<ArrayGeometry> {
    if n_x < 1 || n_y < 1 {
        return Err(Error::Config(format!("invalid UPA dims {n_x}x{n_y}")));
    }
    if spacing_wavelengths <= 0.0 || wavelength <= 0.0 {
        return Err(Error::Config("spacing and wavelength must be positive".into()));
    }
    let s = spacing_wavelengths * wavelength;
    let mut positions = Vec::with_capacity(n_x * n_y);
    for j in 0..n_y {
        for i in 0..n_x {
            positions.push([
                (i as f64 - (n_x as f64 - 1.0) / 2.0) * s,
                (j as f64 - (n_y as f64 - 1.0) / 2.0) * s,
                0.0,
            ]);
        }
    }
    Ok(ArrayGeometry {
        positions,
        wavelength,
    })
}

/// Steering vector a(u): entry n = exp(j 2 pi / lambda * r_n . u).
pub fn steering_vector(geom: &ArrayGeometry, dir: &Direction) -> Vec<Complex64> {
    let k = 2.0 * PI / geom.wavelength;
    geom.positions
        .iter()
        .map(|r| {
            let phase = k * (r[0] * dir.u[0] + r[1] * dir.u[1] + r[2] * dir.u[2]);
            Complex64::from_polar(1.0, phase)
        })
        .collect()
}

/// Per-antenna pattern gains toward one direction: the diagonal of D(theta, phi).
pub fn gain_matrix(coeffs: &[PatternCoefficients], dir: &Direction) -> Result<Vec<f64>> {
    coeffs
        .iter()
        .map(|c| pattern_gain(c, dir.theta, dir.phi))
        .collect()
}

/// Synthesized power pattern B(theta, phi) = |w^H D(theta, phi) a(u)|^2 for
/// one substage coefficient set.
pub fn beampattern_single(
    w: &[Complex64],
    coeffs: &[PatternCoefficients],
    geom: &ArrayGeometry,
    grid: &[Direction],
) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::Config("empty beampattern grid".into()));
    }
    if w.len() != geom.len() || coeffs.len() != geom.len() {
        return Err(Error::Shape(format!(
            "combiner/coefficient count {} / {} does not match array size {}",
            w.len(),
            coeffs.len(),
            geom.len()
        )));
    }
    grid.iter()
        .map(|dir| {
            let a = steering_vector(geom, dir);
            let g = gain_matrix(coeffs, dir)?;
            let mut acc = Complex64::new(0.0, 0.0);
            for n in 0..w.len() {
                acc += w[n].conj() * g[n] * a[n];
            }
            Ok(acc.norm_sqr())
        })
        .collect()
}

/// Stage beampattern: the average of the substage patterns under a shared
/// combiner. `substage_coeffs` holds one coefficient set per substage.
pub fn beampattern(
    w: &[Complex64],
    substage_coeffs: &[Vec<PatternCoefficients>],
    geom: &ArrayGeometry,
    grid: &[Direction],
) -> Result<Vec<f64>> {
    if substage_coeffs.is_empty() {
        return Err(Error::Config("no substage coefficient sets".into()));
    }
    let mut acc = vec![0.0; grid.len()];
    for coeffs in substage_coeffs {
        let b = beampattern_single(w, coeffs, geom, grid)?;
        for (a, v) in acc.iter_mut().zip(b) {
            *a += v;
        }
    }
    let scale = 1.0 / substage_coeffs.len() as f64;
    for a in &mut acc {
        *a *= scale;
    }
    Ok(acc)
}

/// Writes a beampattern as CSV: `theta_rad,phi_rad,power`, 9 significant digits.
pub fn write_beampattern_csv<W: Write>(
    mut out: W,
    grid: &[Direction],
    power: &[f64],
    db_relative_to_peak: bool,
) -> Result<()> {
    writeln!(out, "theta_rad,phi_rad,power")?;
    let peak = power.iter().cloned().fold(f64::MIN, f64::max);
    for (dir, &p) in grid.iter().zip(power) {
        let v = if db_relative_to_peak {
            10.0 * (p / peak).max(1e-300).log10()
        } else {
            p
        };
        writeln!(out, "{:.8e},{:.8e},{:.8e}", dir.theta, dir.phi, v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonics::project_unit;
    use rand::prelude::*;

    const Y00: f64 = 0.28209479177387814;

    #[test]
    fn single_element_upa_sits_at_origin() {
        let g = upa_geometry(1, 1, 0.5, 0.01).unwrap();
        assert_eq!(g.positions, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn two_element_upa_is_centered() {
        let lam = 0.01;
        let g = upa_geometry(2, 1, 0.5, lam).unwrap();
        assert!((g.positions[0][0] + lam / 4.0).abs() < 1e-15);
        assert!((g.positions[1][0] - lam / 4.0).abs() < 1e-15);
    }

    #[test]
    fn five_by_five_upa_aperture() {
        let lam = 0.01;
        let g = upa_geometry(5, 5, 0.5, lam).unwrap();
        assert_eq!(g.len(), 25);
        let xs: Vec<f64> = g.positions.iter().map(|p| p[0]).collect();
        let span = xs.iter().cloned().fold(f64::MIN, f64::max)
            - xs.iter().cloned().fold(f64::MAX, f64::min);
        assert!((span - 2.0 * lam).abs() < 1e-12);
    }

    #[test]
    fn zero_sized_upa_rejected() {
        assert!(upa_geometry(0, 3, 0.5, 0.01).is_err());
    }

    #[test]
    fn broadside_steering_is_all_ones() {
        let g = upa_geometry(3, 3, 0.5, 0.01).unwrap();
        let dir = Direction::from_angles(0.0, 0.0).unwrap();
        for a in steering_vector(&g, &dir) {
            assert!((a - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn half_wavelength_endfire_phase() {
        let lam = 0.01;
        let geom = ArrayGeometry {
            positions: vec![[lam / 2.0, 0.0, 0.0]],
            wavelength: lam,
        };
        let dir = Direction::from_vector([1.0, 0.0, 0.0]).unwrap();
        let a = steering_vector(&geom, &dir);
        assert!((a[0] - Complex64::new(-1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn steering_entries_have_unit_modulus() {
        let g = upa_geometry(4, 2, 0.5, 0.01).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let dir = Direction::from_angles(
                rng.gen_range(0.0..PI),
                rng.gen_range(-PI..PI),
            )
            .unwrap();
            for a in steering_vector(&g, &dir) {
                assert!((a.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn steering_conjugate_symmetry() {
        let g = upa_geometry(3, 2, 0.5, 0.01).unwrap();
        let dir = Direction::from_angles(1.2, 0.4).unwrap();
        let a = steering_vector(&g, &dir);
        let b = steering_vector(&g, &dir.negated());
        for (x, y) in a.iter().zip(b) {
            assert!((x.conj() - y).norm() < 1e-12);
        }
    }

    #[test]
    fn isotropic_gain_matrix_is_constant() {
        let coeffs = vec![PatternCoefficients::isotropic(9); 3];
        let dir = Direction::from_angles(0.7, -1.1).unwrap();
        for g in gain_matrix(&coeffs, &dir).unwrap() {
            assert!((g - Y00).abs() < 1e-13);
        }
    }

    #[test]
    fn dipole_antenna_nulls_on_equator() {
        let mut raw = vec![0.0; 4];
        raw[2] = 1.0;
        let coeffs = vec![
            PatternCoefficients::isotropic(4),
            project_unit(&raw).unwrap(),
        ];
        let dir = Direction::from_angles(PI / 2.0, 0.3).unwrap();
        let g = gain_matrix(&coeffs, &dir).unwrap();
        assert!((g[0] - Y00).abs() < 1e-13);
        assert!(g[1].abs() < 1e-15);
    }

    #[test]
    fn isotropic_single_element_beampattern_is_flat() {
        let geom = upa_geometry(1, 1, 0.5, 0.01).unwrap();
        let coeffs = vec![PatternCoefficients::isotropic(4)];
        let w = vec![Complex64::new(1.0, 0.0)];
        let grid: Vec<Direction> = (0..10)
            .map(|i| Direction::from_angles(0.1 + 0.28 * i as f64, 0.5).unwrap())
            .collect();
        let b = beampattern_single(&w, &coeffs, &geom, &grid).unwrap();
        for v in b {
            assert!((v - 1.0 / (4.0 * PI)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_combiner_gives_zero_pattern() {
        let geom = upa_geometry(2, 2, 0.5, 0.01).unwrap();
        let coeffs = vec![PatternCoefficients::isotropic(4); 4];
        let w = vec![Complex64::new(0.0, 0.0); 4];
        let grid = vec![Direction::from_angles(1.0, 1.0).unwrap()];
        let b = beampattern_single(&w, &coeffs, &geom, &grid).unwrap();
        assert_eq!(b, vec![0.0]);
    }

    #[test]
    fn scaling_combiner_scales_pattern_quadratically() {
        let geom = upa_geometry(2, 2, 0.5, 0.01).unwrap();
        let coeffs = vec![PatternCoefficients::isotropic(4); 4];
        let mut rng = StdRng::seed_from_u64(9);
        let w: Vec<Complex64> = (0..4)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let w3: Vec<Complex64> = w.iter().map(|x| x * 3.0).collect();
        let grid: Vec<Direction> = (0..20)
            .map(|i| Direction::from_angles(0.05 + 0.15 * i as f64, -1.0 + 0.1 * i as f64).unwrap())
            .collect();
        let b1 = beampattern_single(&w, &coeffs, &geom, &grid).unwrap();
        let b9 = beampattern_single(&w3, &coeffs, &geom, &grid).unwrap();
        for (a, b) in b1.iter().zip(&b9) {
            assert!((9.0 * a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn empty_grid_rejected() {
        let geom = upa_geometry(1, 1, 0.5, 0.01).unwrap();
        let coeffs = vec![PatternCoefficients::isotropic(4)];
        let w = vec![Complex64::new(1.0, 0.0)];
        assert!(beampattern_single(&w, &coeffs, &geom, &[]).is_err());
    }

    #[test]
    fn matched_combiner_maximizes_single_path_pattern() {
        let geom = upa_geometry(3, 3, 0.5, 0.01).unwrap();
        let n = geom.len();
        let coeffs = vec![PatternCoefficients::isotropic(4); n];
        let target = Direction::from_angles(2.0, 0.8).unwrap();
        let a = steering_vector(&geom, &target);
        let scale = 1.0 / (n as f64).sqrt();
        let w_matched: Vec<Complex64> = a.iter().map(|x| x * scale).collect();
        let grid = vec![target];
        let best = beampattern_single(&w_matched, &coeffs, &geom, &grid).unwrap()[0];
        let mut rng = StdRng::seed_from_u64(100);
        for _ in 0..1000 {
            let mut w: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let norm: f64 = w.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            for x in &mut w {
                *x /= norm;
            }
            let b = beampattern_single(&w, &coeffs, &geom, &grid).unwrap()[0];
            assert!(b <= best + 1e-12);
        }
    }

    #[test]
    fn csv_export_shape() {
        let grid = vec![
            Direction::from_angles(0.5, 0.1).unwrap(),
            Direction::from_angles(1.5, -0.2).unwrap(),
        ];
        let mut buf = Vec::new();
        write_beampattern_csv(&mut buf, &grid, &[2.0, 1.0], false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.trim().lines().collect();
        assert_eq!(lines[0], "theta_rad,phi_rad,power");
        assert_eq!(lines.len(), 3);
    }
}
