//! Real spherical-harmonic basis evaluation, radiated-energy computation and
//! unit-energy projection for programmable radiation patterns.
//!
//! Conventions: orthonormal (unit L2 over the sphere) real harmonics, no
//! Condon-Shortley phase. Basis ordering is degree-major, order-minor:
//! index k(l,m) = l^2 + l + m for l in 0..=U, m in -l..=l. Components with
//! m > 0 carry cos(m*phi), components with m < 0 carry sin(|m|*phi).

use crate::error::{Error, Result};
use std::f64::consts::PI;

/// Truncated basis up to degree `max_degree`, with `size = (U+1)^2` functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisSpec {
    pub max_degree: usize,
}

impl BasisSpec {
    pub fn new(max_degree: usize) -> Self {
        BasisSpec { max_degree }
    }

    /// Number of basis functions K = (U+1)^2.
    pub fn size(&self) -> usize {
        (self.max_degree + 1) * (self.max_degree + 1)
    }

    /// Flat index of the (l, m) harmonic: k(l, m) = l^2 + l + m.
    pub fn index(l: usize, m: i64) -> usize {
        ((l * l + l) as i64 + m) as usize
    }
}

/// Unit-norm coefficient vector describing one antenna's radiation pattern
/// during one substage.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternCoefficients {
    coeffs: Vec<f64>,
}

impl PatternCoefficients {
    /// Wraps a coefficient vector without projecting; the caller asserts unit norm.
    pub fn from_unit(coeffs: Vec<f64>) -> Result<Self> {
        let n: f64 = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-12 {
            return Err(Error::Constraint(format!(
                "coefficient vector norm {n} is not 1 within 1e-12"
            )));
        }
        Ok(PatternCoefficients { coeffs })
    }

    /// Isotropic pattern: all energy in the degree-0 harmonic.
    pub fn isotropic(k: usize) -> Self {
        let mut coeffs = vec![0.0; k];
        coeffs[0] = 1.0;
        PatternCoefficients { coeffs }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// Projects a raw vector onto the unit sphere: raw / ||raw||.
///
/// Rejects near-zero inputs (norm <= 1e-9) instead of silently falling back;
/// training must never feed exact zeros.
pub fn project_unit(raw: &[f64]) -> Result<PatternCoefficients> {
    let norm: f64 = raw.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm <= 1e-9 {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {norm:e}"
        )));
    }
    Ok(PatternCoefficients {
        coeffs: raw.iter().map(|c| c / norm).collect(),
    })
}

/// Gauss-Legendre nodes in cos(theta) crossed with uniform azimuthal nodes.
#[derive(Debug, Clone)]
pub struct SphereQuadrature {
    /// Polar angles theta_i (radians).
    pub polar_nodes: Vec<f64>,
    /// Gauss-Legendre weights for the cos(theta) integral (sum to 2).
    pub polar_weights: Vec<f64>,
    /// Uniform azimuthal nodes in [-pi, pi).
    pub azimuth_nodes: Vec<f64>,
}

impl SphereQuadrature {
    /// Quadrature exact for products of two harmonics up to degree `max_degree`:
    /// 2(U+1) Gauss-Legendre nodes in cos(theta), 4U+4 uniform nodes in phi.
    pub fn for_degree(max_degree: usize) -> Self {
        Self::new(2 * (max_degree + 1), 4 * max_degree + 4)
    }

    pub fn new(n_theta: usize, n_phi: usize) -> Self {
        let (x, w) = gauss_legendre(n_theta);
        let polar_nodes = x.iter().map(|xi| xi.acos()).collect();
        let azimuth_nodes = (0..n_phi)
            .map(|j| -PI + 2.0 * PI * j as f64 / n_phi as f64)
            .collect();
        SphereQuadrature {
            polar_nodes,
            polar_weights: w,
            azimuth_nodes,
        }
    }

    pub fn n_theta(&self) -> usize {
        self.polar_nodes.len()
    }

    pub fn n_phi(&self) -> usize {
        self.azimuth_nodes.len()
    }

    /// Solid-angle weight attached to grid point (i, j).
    pub fn weight(&self, i: usize) -> f64 {
        self.polar_weights[i] * 2.0 * PI / self.n_phi() as f64
    }

    fn check_resolution(&self, spec: BasisSpec) -> Result<()> {
        if self.n_theta() < spec.max_degree + 1 || self.n_phi() < 4 * spec.max_degree + 1 {
            return Err(Error::Config(format!(
                "quadrature {}x{} too coarse for degree {}",
                self.n_theta(),
                self.n_phi(),
                spec.max_degree
            )));
        }
        Ok(())
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1], Newton iteration on P_n.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Tricomi initial guess, refined by Newton.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_pair(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_pair(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Recompute weights in sorted order.
    for i in 0..n {
        let (_, dp) = legendre_pair(n, nodes[i]);
        weights[i] = 2.0 / ((1.0 - nodes[i] * nodes[i]) * dp * dp);
    }
    (nodes, weights)
}

/// (P_n(x), P_n'(x)) by the three-term recurrence.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Associated Legendre values P_l^m(x) for all l in m..=max_degree, without
/// the Condon-Shortley phase, by stable upward recurrence.
fn assoc_legendre_column(max_degree: usize, m: usize, x: f64) -> Vec<f64> {
    let somx2 = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    // P_m^m = (2m-1)!! (1-x^2)^{m/2}
    let mut pmm = 1.0;
    let mut fact = 1.0;
    for _ in 0..m {
        pmm *= fact * somx2;
        fact += 2.0;
    }
    let mut out = Vec::with_capacity(max_degree + 1 - m);
    out.push(pmm);
    if max_degree == m {
        return out;
    }
    let mut pm1 = pmm;
    let mut pm2 = x * (2.0 * m as f64 + 1.0) * pmm;
    out.push(pm2);
    for l in (m + 2)..=max_degree {
        let lf = l as f64;
        let mf = m as f64;
        let p = ((2.0 * lf - 1.0) * x * pm2 - (lf + mf - 1.0) * pm1) / (lf - mf);
        pm1 = pm2;
        pm2 = p;
        out.push(p);
    }
    out
}

/// Evaluates the full basis vector gamma(theta, phi) of length (U+1)^2.
pub fn eval_basis(theta: f64, phi: f64, spec: BasisSpec) -> Result<Vec<f64>> {
    if !(0.0..=PI).contains(&theta) || !(-PI..=PI).contains(&phi) {
        return Err(Error::Domain(format!(
            "angles out of domain: theta={theta}, phi={phi}"
        )));
    }
    let u = spec.max_degree;
    let x = theta.cos();
    let mut out = vec![0.0; spec.size()];
    for m in 0..=u {
        let col = assoc_legendre_column(u, m, x);
        for (li, &plm) in col.iter().enumerate() {
            let l = m + li;
            // Orthonormal scaling: sqrt((2l+1)/(4pi) * (l-m)!/(l+m)!), with an
            // extra sqrt(2) for m != 0 real harmonics.
            let mut ratio = 1.0;
            for j in (l as i64 - m as i64 + 1)..=(l as i64 + m as i64) {
                ratio *= j as f64;
            }
            let mut norm = ((2.0 * l as f64 + 1.0) / (4.0 * PI) / ratio).sqrt();
            if m > 0 {
                norm *= std::f64::consts::SQRT_2;
            }
            let base = norm * plm;
            if m == 0 {
                out[l * l + l] = base;
            } else {
                out[l * l + l + m] = base * (m as f64 * phi).cos();
                out[l * l + l - m] = base * (m as f64 * phi).sin();
            }
        }
    }
    Ok(out)
}

/// Signed directional amplitude gain G(theta, phi) = gamma^T c.
pub fn pattern_gain(c: &PatternCoefficients, theta: f64, phi: f64) -> Result<f64> {
    pattern_gain_raw(c.as_slice(), theta, phi)
}

/// Same as [`pattern_gain`] for a raw (not necessarily unit-norm) vector.
pub fn pattern_gain_raw(coeffs: &[f64], theta: f64, phi: f64) -> Result<f64> {
    let k = coeffs.len();
    let u = (k as f64).sqrt() as usize;
    if u * u != k || u == 0 {
        return Err(Error::Shape(format!(
            "coefficient length {k} is not a perfect square (U+1)^2"
        )));
    }
    let gamma = eval_basis(theta, phi, BasisSpec::new(u - 1))?;
    Ok(gamma.iter().zip(coeffs).map(|(g, c)| g * c).sum())
}

/// Radiated energy: the quadrature of G^2 over the sphere. Equals ||c||^2
/// exactly (to rounding) at the stated quadrature resolutions.
pub fn pattern_energy_raw(coeffs: &[f64], quad: &SphereQuadrature) -> Result<f64> {
    let k = coeffs.len();
    let u = (k as f64).sqrt() as usize;
    if u * u != k || u == 0 {
        return Err(Error::Shape(format!(
            "coefficient length {k} is not a perfect square (U+1)^2"
        )));
    }
    let spec = BasisSpec::new(u - 1);
    quad.check_resolution(spec)?;
    let mut total = 0.0;
    for (i, &theta) in quad.polar_nodes.iter().enumerate() {
        let wi = quad.weight(i);
        for &phi in &quad.azimuth_nodes {
            let g = pattern_gain_raw(coeffs, theta, phi)?;
            total += wi * g * g;
        }
    }
    Ok(total)
}

pub fn pattern_energy(c: &PatternCoefficients, quad: &SphereQuadrature) -> Result<f64> {
    pattern_energy_raw(c.as_slice(), quad)
}

/// Gram matrix of the basis under the quadrature; the orthonormality oracle.
pub fn gram_matrix(spec: BasisSpec, quad: &SphereQuadrature) -> Result<Vec<Vec<f64>>> {
    quad.check_resolution(spec)?;
    let k = spec.size();
    let mut gram = vec![vec![0.0; k]; k];
    for (i, &theta) in quad.polar_nodes.iter().enumerate() {
        let wi = quad.weight(i);
        for &phi in &quad.azimuth_nodes {
            let gamma = eval_basis(theta, phi, spec)?;
            for a in 0..k {
                let wg = wi * gamma[a];
                for b in 0..k {
                    gram[a][b] += wg * gamma[b];
                }
            }
        }
    }
    Ok(gram)
}
