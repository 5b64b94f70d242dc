//! Scene generation, wideband frequency-domain channel synthesis and noisy
//! combined observations.

use crate::array::{steering_vector, ArrayGeometry, Direction};
use crate::error::{Error, Result};
use crate::harmonics::{pattern_gain, PatternCoefficients};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{BufRead, Write};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Reference distance for the d_ref/d amplitude normalization (meters).
pub const REFERENCE_DISTANCE: f64 = 30.0;
/// NLoS amplitude attenuation relative to the LoS normalization.
pub const NLOS_ATTENUATION: f64 = 0.3;
/// Scatterer region: [-40,40]^2 in x/y, [0,10] in z (meters).
pub const SCATTERER_XY: f64 = 40.0;
pub const SCATTERER_Z: f64 = 10.0;

/// OFDM numerology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfdmGrid {
    /// Subcarrier count M.
    pub subcarriers: usize,
    /// Subcarrier spacing (Hz).
    pub delta_f: f64,
    /// Carrier frequency (Hz).
    pub f_c: f64,
}

impl OfdmGrid {
    pub fn new(subcarriers: usize, delta_f: f64, f_c: f64) -> Result<Self> {
        if subcarriers < 1 || delta_f <= 0.0 || f_c <= 0.0 {
            return Err(Error::Config(format!(
                "invalid OFDM grid: M={subcarriers}, delta_f={delta_f}, f_c={f_c}"
            )));
        }
        Ok(OfdmGrid {
            subcarriers,
            delta_f,
            f_c,
        })
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.f_c
    }
}

/// One propagation path: complex gain, delay and arrival direction at the AP.
#[derive(Debug, Clone)]
pub struct PathParams {
    pub alpha: Complex64,
    pub tau: f64,
    pub dir: Direction,
}

/// User position plus the derived multipath parameters. Path 0 is line of sight.
#[derive(Debug, Clone)]
pub struct MultipathScene {
    /// UE position on the z = 0 plane (meters).
    pub ue_position: [f64; 2],
    pub ap_position: [f64; 3],
    pub scatterers: Vec<[f64; 3]>,
    pub paths: Vec<PathParams>,
}

/// Stage observation matrix: column l holds the substage-l observation.
#[derive(Debug, Clone)]
pub struct ObservationMatrix {
    pub subcarriers: usize,
    pub substages: usize,
    /// Column-major: entry (m, l) at index l * subcarriers + m.
    pub data: Vec<Complex64>,
}

impl ObservationMatrix {
    pub fn column(&self, l: usize) -> &[Complex64] {
        &self.data[l * self.subcarriers..(l + 1) * self.subcarriers]
    }
}

/// Complex AWGN with per-sample variance sigma^2, derived from the transmit SNR.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModel {
    pub sigma2: f64,
    pub snr_db: f64,
}

impl NoiseModel {
    /// SNR convention: snr = p_max / sigma^2.
    pub fn from_snr_db(snr_db: f64, p_max: f64) -> Self {
        NoiseModel {
            sigma2: p_max * 10f64.powf(-snr_db / 10.0),
            snr_db,
        }
    }

    pub fn noiseless() -> Self {
        NoiseModel {
            sigma2: 0.0,
            snr_db: f64::INFINITY,
        }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Builds the multipath scene for a UE at `p`. The LoS path arrives from the
/// UE direction with amplitude d_ref/d; each NLoS path reflects off a random
/// scatterer with an extra 0.3 attenuation. Paths are sorted by delay.
pub fn scene_from_position<R: Rng>(
    p: [f64; 2],
    ap: [f64; 3],
    n_paths: usize,
    rng: &mut R,
) -> Result<MultipathScene> {
    if n_paths < 1 {
        return Err(Error::Config("need at least one path".into()));
    }
    let ue = [p[0], p[1], 0.0];
    let los_vec = sub(ue, ap);
    let d = norm3(los_vec);
    if d < 1e-6 {
        return Err(Error::Generation("UE coincides with the AP".into()));
    }
    let psi: f64 = rng.gen_range(0.0..2.0 * PI);
    let mut paths = vec![PathParams {
        alpha: Complex64::from_polar(REFERENCE_DISTANCE / d, psi),
        tau: d / SPEED_OF_LIGHT,
        dir: Direction::from_vector(los_vec)?,
    }];
    let mut scatterers = Vec::new();
    for _ in 1..n_paths {
        let q = [
            rng.gen_range(-SCATTERER_XY..SCATTERER_XY),
            rng.gen_range(-SCATTERER_XY..SCATTERER_XY),
            rng.gen_range(0.0..SCATTERER_Z),
        ];
        let d_total = norm3(sub(q, ap)) + norm3(sub(q, ue));
        let tau = d_total / SPEED_OF_LIGHT;
        let psi: f64 = rng.gen_range(0.0..2.0 * PI);
        paths.push(PathParams {
            alpha: Complex64::from_polar(
                NLOS_ATTENUATION * REFERENCE_DISTANCE / (SPEED_OF_LIGHT * tau),
                psi,
            ),
            tau,
            dir: Direction::from_vector(sub(q, ap))?,
        });
        scatterers.push(q);
    }
    paths.sort_by(|a, b| a.tau.partial_cmp(&b.tau).unwrap());
    Ok(MultipathScene {
        ue_position: p,
        ap_position: ap,
        scatterers,
        paths,
    })
}

/// Frequency-domain channel matrix: column m is the N-vector
/// sum_p alpha_p D(dir_p) a(u_p) exp(-j 2 pi tau_p (m-1) delta_f).
pub fn channel_matrix(
    scene: &MultipathScene,
    coeffs: &[PatternCoefficients],
    grid: &OfdmGrid,
    geom: &ArrayGeometry,
) -> Result<Vec<Vec<Complex64>>> {
    let n = geom.len();
    if coeffs.len() != n {
        return Err(Error::Shape(format!(
            "{} coefficient vectors for {} antennas",
            coeffs.len(),
            n
        )));
    }
    let m_count = grid.subcarriers;
    let mut h = vec![vec![Complex64::new(0.0, 0.0); m_count]; n];
    for path in &scene.paths {
        let a = steering_vector(geom, &path.dir);
        let gains: Vec<f64> = coeffs
            .iter()
            .map(|c| pattern_gain(c, path.dir.theta, path.dir.phi))
            .collect::<Result<_>>()?;
        let base = Complex64::from_polar(1.0, -2.0 * PI * path.tau * grid.delta_f);
        let mut phasor = Complex64::new(1.0, 0.0);
        for m in 0..m_count {
            let common = path.alpha * phasor;
            for i in 0..n {
                h[i][m] += common * gains[i] * a[i];
            }
            phasor *= base;
        }
    }
    Ok(h)
}

/// Reference implementation of [`channel_matrix`]: a naive scalar triple loop.
/// Kept as an independent oracle for tests.
pub fn channel_matrix_naive(
    scene: &MultipathScene,
    coeffs: &[PatternCoefficients],
    grid: &OfdmGrid,
    geom: &ArrayGeometry,
) -> Result<Vec<Vec<Complex64>>> {
    let n = geom.len();
    let mut h = vec![vec![Complex64::new(0.0, 0.0); grid.subcarriers]; n];
    for i in 0..n {
        for m in 0..grid.subcarriers {
            for path in &scene.paths {
                let a = steering_vector(geom, &path.dir)[i];
                let g = pattern_gain(&coeffs[i], path.dir.theta, path.dir.phi)?;
                let phase = -2.0 * PI * path.tau * m as f64 * grid.delta_f;
                h[i][m] += path.alpha * g * a * Complex64::from_polar(1.0, phase);
            }
        }
    }
    Ok(h)
}

/// Draws one standard complex-normal M-vector (unit variance per sample).
pub fn standard_complex_noise<R: Rng>(m: usize, rng: &mut R) -> Vec<Complex64> {
    (0..m)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
        })
        .collect()
}

/// One combined observation: y_m = w^H h_m s_m + n_m.
///
/// The noise realization is drawn independently of the configuration
/// (reparameterized: standard draws scaled by sigma at apply time).
pub fn observe<R: Rng>(
    w: &[Complex64],
    h: &[Vec<Complex64>],
    pilot: &[Complex64],
    noise: &NoiseModel,
    p_max: f64,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    let power: f64 = w.iter().map(|x| x.norm_sqr()).sum();
    if power > p_max + 1e-9 {
        return Err(Error::Constraint(format!(
            "combiner power {power} exceeds budget {p_max}"
        )));
    }
    let n = h.len();
    if w.len() != n {
        return Err(Error::Shape(format!(
            "combiner length {} vs {} antennas",
            w.len(),
            n
        )));
    }
    let m_count = if n > 0 { h[0].len() } else { 0 };
    if pilot.len() != m_count {
        return Err(Error::Shape(format!(
            "pilot length {} vs {} subcarriers",
            pilot.len(),
            m_count
        )));
    }
    let eps = standard_complex_noise(m_count, rng);
    let sigma = noise.sigma2.sqrt();
    let mut y = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..n {
            acc += w[i].conj() * h[i][m];
        }
        y.push(acc * pilot[m] + sigma * eps[m]);
    }
    Ok(y)
}

/// Collects one stage: column l is the observation under the substage-l
/// pattern coefficients. The channel is recomputed per substage.
#[allow(clippy::too_many_arguments)]
pub fn collect_stage<R: Rng>(
    scene: &MultipathScene,
    w: &[Complex64],
    substage_coeffs: &[Vec<PatternCoefficients>],
    grid: &OfdmGrid,
    geom: &ArrayGeometry,
    pilots: &[Vec<Complex64>],
    noise: &NoiseModel,
    p_max: f64,
    rng: &mut R,
) -> Result<ObservationMatrix> {
    let l_count = substage_coeffs.len();
    if pilots.len() != l_count {
        return Err(Error::Shape(format!(
            "{} pilots for {} substages",
            pilots.len(),
            l_count
        )));
    }
    let mut data = Vec::with_capacity(l_count * grid.subcarriers);
    for l in 0..l_count {
        let h = channel_matrix(scene, &substage_coeffs[l], grid, geom)?;
        data.extend(observe(w, &h, &pilots[l], noise, p_max, rng)?);
    }
    Ok(ObservationMatrix {
        subcarriers: grid.subcarriers,
        substages: l_count,
        data,
    })
}

/// One dataset record, serialized as a JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub ue: [f64; 2],
    pub paths: Vec<PathRecord>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathRecord {
    pub alpha_re: f64,
    pub alpha_im: f64,
    pub tau: f64,
    pub theta: f64,
    pub phi: f64,
}

impl SceneRecord {
    pub fn from_scene(scene: &MultipathScene, seed: u64) -> Self {
        SceneRecord {
            ue: scene.ue_position,
            paths: scene
                .paths
                .iter()
                .map(|p| PathRecord {
                    alpha_re: p.alpha.re,
                    alpha_im: p.alpha.im,
                    tau: p.tau,
                    theta: p.dir.theta,
                    phi: p.dir.phi,
                })
                .collect(),
            seed,
        }
    }

    pub fn to_scene(&self, ap_position: [f64; 3]) -> Result<MultipathScene> {
        Ok(MultipathScene {
            ue_position: self.ue,
            ap_position,
            scatterers: Vec::new(),
            paths: self
                .paths
                .iter()
                .map(|p| {
                    Ok(PathParams {
                        alpha: Complex64::new(p.alpha_re, p.alpha_im),
                        tau: p.tau,
                        dir: Direction::from_angles(p.theta, p.phi)?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }
}

pub fn write_dataset<W: Write>(mut out: W, records: &[SceneRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<SceneRecord>> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}
