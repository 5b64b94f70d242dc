//! Baselines, metric sweeps, and figure-data export: per-stage RMSE, SNR and
//! pilot-budget sweeps with paired noise across methods, and per-stage
//! beampattern CSVs.

use crate::array::{beampattern, write_beampattern_csv, Direction};
use crate::channel::{MultipathScene, NoiseModel, SceneRecord};
use crate::config::{RunConfig, SystemConfig};
use crate::error::{Error, Result};
use crate::policy::{EpisodeBatch, Policy};
use crate::substream;
use crate::training::{assemble_noise, rmse_per_stage, train};
use serde::Serialize;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

const STREAM_EVAL_NOISE: u64 = 5 << 48;
const STREAM_BEAM_NOISE: u64 = 6 << 48;

/// Seed-averaged evaluation summary for one method.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub method: String,
    /// Per-stage RMSE in meters, averaged over `seeds`.
    pub stage_rmse: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// Naive RMSE from raw estimates, the oracle the batched path must match.
pub fn rmse_point(estimates: &[[f64; 2]], truth: &[[f64; 2]]) -> f64 {
    let sum: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2))
        .sum();
    (sum / truth.len() as f64).sqrt()
}

/// Per-stage RMSE over `records`, averaged over `eval_seeds`. The noise of a
/// sample depends only on (eval seed, record seed), so every method sees the
/// same draws on the same scenes (paired evaluation) and the result is
/// independent of sample order.
pub fn eval_rmse(
    policy: &Policy,
    system: &SystemConfig,
    records: &[SceneRecord],
    sigma2: f64,
    eval_seeds: &[u64],
    batch_size: usize,
) -> Result<Vec<f64>> {
    if eval_seeds.is_empty() {
        return Err(Error::Config("no evaluation seeds".into()));
    }
    let scenes: Vec<MultipathScene> = records
        .iter()
        .map(|r| r.to_scene(system.ap_position()))
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0; policy.cfg.stages];
    for &es in eval_seeds {
        let rmse = rmse_per_stage(policy, &scenes, system, sigma2, batch_size, |i| {
            substream(es, STREAM_EVAL_NOISE + records[i].seed)
        })?;
        for (a, r) in acc.iter_mut().zip(rmse) {
            *a += r;
        }
    }
    Ok(acc.iter().map(|a| a / eval_seeds.len() as f64).collect())
}

/// Same pipeline with every pattern frozen isotropic; the configuration head
/// shrinks to the 2N combiner outputs.
pub fn digital_only_config(cfg: &RunConfig) -> RunConfig {
    let mut out = cfg.clone();
    out.model.variant = "digital_only".into();
    out
}

/// Single-stage digital-only baseline spending the whole pilot budget at once.
pub fn one_shot_config(cfg: &RunConfig) -> RunConfig {
    let mut out = digital_only_config(cfg);
    out.system.substages = cfg.system.stages * cfg.system.substages;
    out.system.stages = 1;
    if let Some(w) = &mut out.train.stage_weights {
        *w = vec![w.iter().sum()];
    }
    out
}

/// One trained model per training seed, all tagged with one method name.
pub struct MethodGroup {
    pub method: String,
    pub models: Vec<(Policy, SystemConfig)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnrRow {
    pub snr_db: f64,
    pub method: String,
    pub rmse: f64,
}

/// Final-stage RMSE per (SNR, method); only the noise variance is rescaled.
pub fn sweep_snr(
    groups: &[MethodGroup],
    records: &[SceneRecord],
    snr_db_list: &[f64],
    eval_seeds: &[u64],
    batch_size: usize,
) -> Result<Vec<SnrRow>> {
    let mut rows = Vec::with_capacity(snr_db_list.len() * groups.len());
    for &snr in snr_db_list {
        for group in groups {
            let mut sum = 0.0;
            for (policy, system) in &group.models {
                let sigma2 = NoiseModel::from_snr_db(snr, system.p_max).sigma2;
                let rmse = eval_rmse(policy, system, records, sigma2, eval_seeds, batch_size)?;
                sum += rmse.last().copied().expect("at least one stage");
            }
            rows.push(SnrRow {
                snr_db: snr,
                method: group.method.clone(),
                rmse: sum / group.models.len() as f64,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetRow {
    pub stages: usize,
    pub pilots_per_stage: usize,
    pub method: String,
    pub rmse: f64,
}

/// Trains one model per (allocation, method, training seed) under a fixed
/// total pilot budget and reports the seed-mean final RMSE per allocation.
#[allow(clippy::too_many_arguments)]
pub fn sweep_budget(
    cfg: &RunConfig,
    train_records: &[SceneRecord],
    eval_records: &[SceneRecord],
    methods: &[&str],
    train_seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<BudgetRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &(stages, pilots) in &cfg.eval.budget_allocations {
        if stages * pilots != cfg.eval.budget_total {
            return Err(Error::Config(format!(
                "allocation ({stages}, {pilots}) does not meet budget {}",
                cfg.eval.budget_total
            )));
        }
        for &method in methods {
            let mut alloc_cfg = match method {
                "proposed" => cfg.clone(),
                "digital_only" => digital_only_config(cfg),
                other => {
                    return Err(Error::Config(format!(
                        "unknown method {other:?} (expected \"proposed\" or \"digital_only\")"
                    )))
                }
            };
            alloc_cfg.system.stages = stages;
            alloc_cfg.system.substages = pilots;
            alloc_cfg.train.stage_weights = None;
            let mut sum = 0.0;
            for &seed in train_seeds {
                let run_dir = out_dir.join(format!("alloc_{stages}x{pilots}_{method}_s{seed}"));
                let outcome = train(&alloc_cfg, train_records, seed, &run_dir)?;
                let (policy, system) = Policy::load(&outcome.checkpoint)?;
                let sigma2 = NoiseModel::from_snr_db(system.snr_db, system.p_max).sigma2;
                let rmse = eval_rmse(
                    &policy,
                    &system,
                    eval_records,
                    sigma2,
                    &cfg.eval.eval_seeds,
                    cfg.train.batch_size,
                )?;
                sum += rmse.last().copied().expect("at least one stage");
            }
            rows.push(BudgetRow {
                stages,
                pilots_per_stage: pilots,
                method: method.to_string(),
                rmse: sum / train_seeds.len() as f64,
            });
        }
    }
    Ok(rows)
}

fn table_header<W: Write>(out: &mut W, config_hash: &str, seeds: &[u64]) -> Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    let list: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
    writeln!(out, "# seeds={}", list.join(";"))?;
    Ok(())
}

pub fn write_stage_table<W: Write>(
    mut out: W,
    results: &[EvalResult],
    config_hash: &str,
    seeds: &[u64],
) -> Result<()> {
    table_header(&mut out, config_hash, seeds)?;
    writeln!(out, "stage,method,rmse")?;
    for res in results {
        for (t, rmse) in res.stage_rmse.iter().enumerate() {
            writeln!(out, "{},{},{rmse:.9e}", t + 1, res.method)?;
        }
    }
    Ok(())
}

pub fn write_snr_table<W: Write>(
    mut out: W,
    rows: &[SnrRow],
    config_hash: &str,
    seeds: &[u64],
) -> Result<()> {
    table_header(&mut out, config_hash, seeds)?;
    writeln!(out, "snr_db,method,rmse")?;
    for row in rows {
        writeln!(out, "{},{},{:.9e}", row.snr_db, row.method, row.rmse)?;
    }
    Ok(())
}

pub fn write_budget_table<W: Write>(
    mut out: W,
    rows: &[BudgetRow],
    config_hash: &str,
    seeds: &[u64],
) -> Result<()> {
    table_header(&mut out, config_hash, seeds)?;
    writeln!(out, "stages,pilots_per_stage,method,rmse")?;
    for row in rows {
        writeln!(
            out,
            "{},{},{},{:.9e}",
            row.stages, row.pilots_per_stage, row.method, row.rmse
        )?;
    }
    Ok(())
}

/// Midpoint grid over the full sphere: n_theta colatitude bands by n_phi
/// azimuth cells, each cell carrying solid angle proportional to sin(theta).
pub fn sphere_grid(n_theta: usize, n_phi: usize) -> Result<Vec<Direction>> {
    if n_theta < 2 || n_phi < 2 {
        return Err(Error::Config("beampattern grid must be at least 2x2".into()));
    }
    let mut grid = Vec::with_capacity(n_theta * n_phi);
    for i in 0..n_theta {
        let theta = PI * (i as f64 + 0.5) / n_theta as f64;
        for j in 0..n_phi {
            let phi = -PI + 2.0 * PI * (j as f64 + 0.5) / n_phi as f64;
            grid.push(Direction::from_angles(theta, phi)?);
        }
    }
    Ok(grid)
}

/// Fraction of the sphere's solid angle where the pattern stays within 3 dB
/// of its peak — a scalar proxy for beam concentration.
pub fn solid_angle_fraction_3db(power: &[f64], grid: &[Direction]) -> Result<f64> {
    if power.len() != grid.len() || grid.is_empty() {
        return Err(Error::Shape(format!(
            "{} power values on a {}-point grid",
            power.len(),
            grid.len()
        )));
    }
    let peak = power.iter().cloned().fold(f64::MIN, f64::max);
    if peak <= 0.0 {
        return Err(Error::Degenerate("beampattern is identically zero".into()));
    }
    let threshold = peak * 10f64.powf(-0.3);
    let mut above = 0.0;
    let mut total = 0.0;
    for (dir, &p) in grid.iter().zip(power) {
        let w = dir.theta.sin();
        total += w;
        if p >= threshold {
            above += w;
        }
    }
    Ok(above / total)
}

#[derive(Serialize)]
struct SceneSidecar {
    ue: [f64; 2],
    paths: Vec<PathDirection>,
}

#[derive(Serialize)]
struct PathDirection {
    theta: f64,
    phi: f64,
    tau: f64,
}

/// Runs one recorded episode on `scene` and writes each stage's synthesized
/// beampattern as `beampattern_stage_<t>.csv`, plus a `scene.json` sidecar
/// with the true path directions. Returns the per-stage power grids.
pub fn export_beampatterns(
    policy: &Policy,
    system: &SystemConfig,
    scene: &MultipathScene,
    n_theta: usize,
    n_phi: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<Vec<f64>>> {
    let geom = system.geometry()?;
    let grid_freq = system.ofdm()?;
    let basis = crate::harmonics::BasisSpec::new(system.max_degree);
    let batch = EpisodeBatch::prepare(std::slice::from_ref(scene), &geom, &grid_freq, basis)?;
    let noise = assemble_noise(&[0], system.subcarriers, system.stages, system.substages, |i| {
        substream(seed, STREAM_BEAM_NOISE + i as u64)
    });
    let sigma2 = NoiseModel::from_snr_db(system.snr_db, system.p_max).sigma2;
    let mut tape = crate::autodiff::Tape::new();
    let bound = policy.bind(&mut tape);
    let out = policy.run_episode(&mut tape, &bound, &batch, sigma2, &noise, true)?;
    let configs = out.configs.expect("recorded episode");
    let grid = sphere_grid(n_theta, n_phi)?;
    std::fs::create_dir_all(out_dir)?;
    let mut patterns = Vec::with_capacity(configs.len());
    for (t, per_item) in configs.iter().enumerate() {
        let sc = &per_item[0];
        let power = beampattern(&sc.w, &sc.coeffs, &geom, &grid)?;
        let file = std::fs::File::create(out_dir.join(format!("beampattern_stage_{}.csv", t + 1)))?;
        write_beampattern_csv(std::io::BufWriter::new(file), &grid, &power, false)?;
        patterns.push(power);
    }
    let sidecar = SceneSidecar {
        ue: scene.ue_position,
        paths: scene
            .paths
            .iter()
            .map(|p| PathDirection {
                theta: p.dir.theta,
                phi: p.dir.phi,
                tau: p.tau,
            })
            .collect(),
    };
    std::fs::write(
        out_dir.join("scene.json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(patterns)
}

/// Paths of the files written by [`export_beampatterns`].
pub fn beampattern_files(out_dir: &Path, stages: usize) -> Vec<PathBuf> {
    (1..=stages)
        .map(|t| out_dir.join(format!("beampattern_stage_{t}.csv")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EvalSection, ModelConfig, TrainSection};
    use crate::policy::PolicyConfig;
    use crate::training::generate_dataset;

    fn tiny_run_config() -> RunConfig {
        RunConfig {
            system: SystemConfig {
                n_x: 2,
                n_y: 2,
                spacing_wavelengths: 0.5,
                max_degree: 1,
                subcarriers: 4,
                subcarrier_spacing_hz: 960e3,
                carrier_hz: 30e9,
                paths: 2,
                stages: 2,
                substages: 2,
                p_max: 1.0,
                snr_db: 10.0,
                region_half_width_m: 30.0,
                ap_height_m: 10.0,
            },
            model: ModelConfig {
                d_model: 8,
                heads: 2,
                embed_dim: 6,
                lstm_hidden: 8,
                head_hidden: 8,
                variant: "proposed".into(),
            },
            train: TrainSection {
                samples: 24,
                train_fraction: 2.0 / 3.0,
                batch_size: 8,
                learning_rate: 1e-3,
                epochs: 1,
                stage_weights: None,
                grad_clip: 1.0,
            },
            eval: EvalSection {
                snr_db_list: vec![0.0, 10.0],
                eval_seeds: vec![0, 1],
                beam_grid_theta: 8,
                beam_grid_phi: 16,
                budget_total: 4,
                budget_allocations: vec![(2, 2), (1, 4)],
            },
        }
    }

    fn tiny_policy(cfg: &RunConfig, seed: u64) -> Policy {
        Policy::new(
            PolicyConfig::from_configs(&cfg.system, &cfg.model).unwrap(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn rmse_point_three_four_five() {
        let rmse = rmse_point(&[[3.0, 4.0]], &[[0.0, 0.0]]);
        assert!((rmse - 5.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_estimates_give_zero_rmse() {
        let pts = [[1.0, 2.0], [-3.0, 0.5]];
        assert_eq!(rmse_point(&pts, &pts), 0.0);
    }

    #[test]
    fn eval_rmse_is_sample_order_invariant() {
        let cfg = tiny_run_config();
        let policy = tiny_policy(&cfg, 3);
        let records = generate_dataset(&cfg.system, 12, 5).unwrap();
        let forward = eval_rmse(&policy, &cfg.system, &records, 0.1, &[0], 4).unwrap();
        let mut reversed = records.clone();
        reversed.reverse();
        let backward = eval_rmse(&policy, &cfg.system, &reversed, 0.1, &[0], 4).unwrap();
        for (a, b) in forward.iter().zip(&backward) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn eval_rmse_matches_naive_recomputation() {
        let cfg = tiny_run_config();
        let policy = tiny_policy(&cfg, 7);
        let records = generate_dataset(&cfg.system, 6, 9).unwrap();
        let batched = eval_rmse(&policy, &cfg.system, &records, 0.2, &[4], 6).unwrap();
        // Naive path: one episode per sample, raw estimates, explicit RMSE.
        let geom = cfg.system.geometry().unwrap();
        let grid = cfg.system.ofdm().unwrap();
        let basis = crate::harmonics::BasisSpec::new(cfg.system.max_degree);
        let mut per_stage: Vec<Vec<[f64; 2]>> = vec![Vec::new(); 2];
        let mut truth = Vec::new();
        for rec in &records {
            let scene = rec.to_scene(cfg.system.ap_position()).unwrap();
            let batch =
                EpisodeBatch::prepare(std::slice::from_ref(&scene), &geom, &grid, basis).unwrap();
            let noise = assemble_noise(&[0], 4, 2, 2, |_| {
                substream(4, STREAM_EVAL_NOISE + rec.seed)
            });
            let mut tape = crate::autodiff::Tape::new();
            let bound = policy.bind(&mut tape);
            let out = policy
                .run_episode(&mut tape, &bound, &batch, 0.2, &noise, false)
                .unwrap();
            for (t, est) in out.estimates.iter().enumerate() {
                let d = tape.value(*est).data();
                per_stage[t].push([d[0], d[1]]);
            }
            truth.push(scene.ue_position);
        }
        for t in 0..2 {
            let naive = rmse_point(&per_stage[t], &truth);
            assert!(
                (naive - batched[t]).abs() < 1e-12,
                "stage {t}: naive {naive} vs batched {}",
                batched[t]
            );
        }
    }

    #[test]
    fn digital_only_and_one_shot_configs() {
        let cfg = tiny_run_config();
        let dig = digital_only_config(&cfg);
        assert_eq!(dig.model.variant, "digital_only");
        assert_eq!(dig.system.stages, 2);
        let pcfg = PolicyConfig::from_configs(&dig.system, &dig.model).unwrap();
        assert_eq!(pcfg.config_dim(), 2 * 4, "head shrinks to the combiner");
        let one = one_shot_config(&cfg);
        assert_eq!(one.system.stages, 1);
        assert_eq!(one.system.substages, 4, "budget spent in a single stage");
        assert_eq!(one.model.variant, "digital_only");
        one.validate().unwrap();
    }

    #[test]
    fn one_shot_runs_a_single_stage_with_full_budget() {
        let one = one_shot_config(&tiny_run_config());
        let policy = tiny_policy(&one, 11);
        let records = generate_dataset(&one.system, 4, 13).unwrap();
        let rmse = eval_rmse(&policy, &one.system, &records, 0.1, &[0], 4).unwrap();
        assert_eq!(rmse.len(), 1);
    }

    #[test]
    fn sweep_snr_rows_and_determinism() {
        let cfg = tiny_run_config();
        let groups = [
            MethodGroup {
                method: "proposed".into(),
                models: vec![(tiny_policy(&cfg, 17), cfg.system.clone())],
            },
            MethodGroup {
                method: "digital_only".into(),
                models: vec![(
                    tiny_policy(&digital_only_config(&cfg), 19),
                    cfg.system.clone(),
                )],
            },
        ];
        let records = generate_dataset(&cfg.system, 8, 21).unwrap();
        let a = sweep_snr(&groups, &records, &cfg.eval.snr_db_list, &[0, 1], 8).unwrap();
        let b = sweep_snr(&groups, &records, &cfg.eval.snr_db_list, &[0, 1], 8).unwrap();
        assert_eq!(a.len(), 2 * 2, "|snr list| x |methods| rows");
        assert_eq!(a, b);
    }

    #[test]
    fn budget_sweep_trains_and_reports_each_allocation() {
        let mut cfg = tiny_run_config();
        cfg.train.samples = 12;
        cfg.train.train_fraction = 0.75;
        let train_records = generate_dataset(&cfg.system, 12, 23).unwrap();
        let eval_records = generate_dataset(&cfg.system, 6, 29).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rows = sweep_budget(
            &cfg,
            &train_records,
            &eval_records,
            &["proposed"],
            &[1],
            dir.path(),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert_eq!(row.stages * row.pilots_per_stage, 4);
            assert!(row.rmse.is_finite() && row.rmse > 0.0);
        }
        assert!(sweep_budget(
            &cfg,
            &train_records,
            &eval_records,
            &["mystery"],
            &[1],
            dir.path()
        )
        .is_err());
    }

    #[test]
    fn tables_carry_hash_and_seeds() {
        let mut buf = Vec::new();
        write_snr_table(
            &mut buf,
            &[SnrRow {
                snr_db: 10.0,
                method: "proposed".into(),
                rmse: 1.5,
            }],
            "abc123",
            &[0, 1, 2],
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# config_hash=abc123\n# seeds=0;1;2\n"));
        assert!(text.contains("snr_db,method,rmse"));
        let mut buf2 = Vec::new();
        write_budget_table(
            &mut buf2,
            &[BudgetRow {
                stages: 3,
                pilots_per_stage: 4,
                method: "proposed".into(),
                rmse: 2.0,
            }],
            "def",
            &[7],
        )
        .unwrap();
        assert!(String::from_utf8(buf2).unwrap().contains("3,4,proposed,"));
        let mut buf3 = Vec::new();
        write_stage_table(
            &mut buf3,
            &[EvalResult {
                method: "proposed".into(),
                stage_rmse: vec![3.0, 1.0],
                seeds: vec![0],
            }],
            "fed",
            &[0],
        )
        .unwrap();
        let text3 = String::from_utf8(buf3).unwrap();
        assert!(text3.contains("1,proposed,") && text3.contains("2,proposed,"));
    }

    #[test]
    fn flat_pattern_fills_the_sphere_and_a_spike_does_not() {
        let grid = sphere_grid(16, 32).unwrap();
        let flat = vec![1.0; grid.len()];
        assert!((solid_angle_fraction_3db(&flat, &grid).unwrap() - 1.0).abs() < 1e-15);
        let mut spike = vec![1e-6; grid.len()];
        spike[grid.len() / 2] = 1.0;
        let frac = solid_angle_fraction_3db(&spike, &grid).unwrap();
        assert!(frac < 0.01, "spike fraction {frac}");
    }

    #[test]
    fn beampattern_export_emits_one_file_per_stage() {
        let cfg = tiny_run_config();
        let policy = tiny_policy(&cfg, 31);
        let mut rng = substream(33, 0);
        let scene =
            crate::channel::scene_from_position([12.0, -7.0], [0.0, 0.0, 10.0], 2, &mut rng)
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let patterns =
            export_beampatterns(&policy, &cfg.system, &scene, 8, 16, 1, dir.path()).unwrap();
        assert_eq!(patterns.len(), 2);
        for (file, power) in beampattern_files(dir.path(), 2).iter().zip(&patterns) {
            assert!(file.exists(), "{}", file.display());
            assert!(power.iter().all(|p| *p >= 0.0));
            let text = std::fs::read_to_string(file).unwrap();
            assert!(text.starts_with("theta_rad,phi_rad,power\n"));
            assert_eq!(text.lines().count(), 1 + 8 * 16);
        }
        let sidecar = std::fs::read_to_string(dir.path().join("scene.json")).unwrap();
        let json: serde_json::Value = serde_json::from_str(&sidecar).unwrap();
        assert_eq!(json["paths"].as_array().unwrap().len(), 2);
    }
}
