//! Dataset generation and supervised training of the sensing policy with a
//! stage-weighted localization loss.

use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::channel::{scene_from_position, MultipathScene, NoiseModel, SceneRecord};
use crate::config::RunConfig;
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::policy::{EpisodeBatch, Policy, PolicyConfig};
use crate::substream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

// Substream index offsets, spaced to keep the RNG families disjoint.
const STREAM_MODEL_INIT: u64 = 1 << 48;
const STREAM_SHUFFLE: u64 = 2 << 48;
const STREAM_TRAIN_NOISE: u64 = 3 << 48;
const STREAM_VAL_NOISE: u64 = 4 << 48;

/// Draws `samples` i.i.d. scenes with the UE uniform over the square region.
/// Sample i depends only on (seed, i), so any prefix of a larger dataset is
/// reproducible.
pub fn generate_dataset(
    system: &SystemConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<SceneRecord>> {
    system.validate()?;
    let r = system.region_half_width_m;
    let ap = system.ap_position();
    (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            for _ in 0..100 {
                let p = [rng.gen_range(-r..r), rng.gen_range(-r..r)];
                match scene_from_position(p, ap, system.paths, &mut rng) {
                    Ok(scene) => return Ok(SceneRecord::from_scene(&scene, i as u64)),
                    Err(Error::Generation(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Generation(format!(
                "no valid scene after 100 draws for sample {i}"
            )))
        })
        .collect()
}

pub fn scenes_from_records(
    records: &[SceneRecord],
    ap_position: [f64; 3],
) -> Result<Vec<MultipathScene>> {
    records.iter().map(|r| r.to_scene(ap_position)).collect()
}

/// Stage-weighted localization loss: sum_t beta_t * mean_b ||p_hat_t - p||^2.
pub fn weighted_mse(
    tape: &mut Tape,
    estimates: &[Var],
    truth: &[[f64; 2]],
    betas: &[f64],
) -> Result<Var> {
    if estimates.len() != betas.len() {
        return Err(Error::Shape(format!(
            "{} estimates, {} stage weights",
            estimates.len(),
            betas.len()
        )));
    }
    let b = truth.len();
    let neg_truth = Tensor::new(
        vec![b, 2],
        truth.iter().flatten().map(|v| -v).collect(),
    );
    let mut loss: Option<Var> = None;
    for (est, beta) in estimates.iter().zip(betas) {
        let err = tape.add_const(*est, &neg_truth);
        let sq = tape.mul(err, err);
        let s = tape.sum_all(sq);
        let term = tape.scale(s, beta / b as f64);
        loss = Some(match loss {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    Ok(loss.expect("at least one stage"))
}

/// One [b, 2M] standard-normal tensor per (stage, substage), where the rows of
/// sample `indices[bi]` come entirely from `rng_for(indices[bi])`. Noise is
/// therefore tied to sample identity, not to shuffle order.
pub fn assemble_noise(
    indices: &[usize],
    subcarriers: usize,
    stages: usize,
    substages: usize,
    mut rng_for: impl FnMut(usize) -> ChaCha8Rng,
) -> Vec<Tensor> {
    let b = indices.len();
    let width = 2 * subcarriers;
    let mut out = vec![Tensor::zeros(vec![b, width]); stages * substages];
    for (bi, &idx) in indices.iter().enumerate() {
        let mut rng = rng_for(idx);
        for t in out.iter_mut() {
            for v in &mut t.data_mut()[bi * width..(bi + 1) * width] {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    out
}

/// Root-mean-square localization error per stage over `scenes`, with the noise
/// of sample i drawn from `rng_for(i)`.
pub fn rmse_per_stage(
    policy: &Policy,
    scenes: &[MultipathScene],
    system: &SystemConfig,
    sigma2: f64,
    batch_size: usize,
    rng_for: impl Fn(usize) -> ChaCha8Rng + Sync,
) -> Result<Vec<f64>> {
    let geom = system.geometry()?;
    let grid = system.ofdm()?;
    let basis = crate::harmonics::BasisSpec::new(system.max_degree);
    let stages = policy.cfg.stages;
    let indices: Vec<usize> = (0..scenes.len()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(batch_size).collect();
    let partial: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|chunk| -> Result<Vec<f64>> {
            let batch_scenes: Vec<MultipathScene> =
                chunk.iter().map(|&i| scenes[i].clone()).collect();
            let batch = EpisodeBatch::prepare(&batch_scenes, &geom, &grid, basis)?;
            let noise = assemble_noise(
                chunk,
                system.subcarriers,
                stages,
                system.substages,
                |i| rng_for(i),
            );
            let mut tape = Tape::new();
            let bound = policy.bind(&mut tape);
            let out = policy.run_episode(&mut tape, &bound, &batch, sigma2, &noise, false)?;
            let mut sums = vec![0.0; stages];
            for (t, est) in out.estimates.iter().enumerate() {
                let data = tape.value(*est).data();
                for (bi, truth) in batch.truth.iter().enumerate() {
                    let dx = data[2 * bi] - truth[0];
                    let dy = data[2 * bi + 1] - truth[1];
                    sums[t] += dx * dx + dy * dy;
                }
            }
            Ok(sums)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; stages];
    for sums in partial {
        for (t, s) in sums.iter().enumerate() {
            total[t] += s;
        }
    }
    Ok(total
        .iter()
        .map(|s| (s / scenes.len() as f64).sqrt())
        .collect())
}

/// Finite-difference check of the full unrolled episode (N=4, M=4, L=2, T=2,
/// K=4, hidden 8, noiseless), covering the initial-configuration and
/// pattern-coefficient gradient paths.
pub fn episode_grad_check(
    samples: usize,
    coords_per_param: usize,
    seed: u64,
) -> Result<crate::autodiff::GradCheckReport> {
    use crate::autodiff::grad_check;
    let system = SystemConfig {
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
    };
    let model = crate::config::ModelConfig {
        d_model: 8,
        heads: 2,
        embed_dim: 6,
        lstm_hidden: 8,
        head_hidden: 8,
        variant: "proposed".into(),
    };
    let pcfg = PolicyConfig::from_configs(&system, &model)?;
    let policy = Policy::new(pcfg, substream_seed(seed, STREAM_MODEL_INIT))?;
    let records = generate_dataset(&system, samples, seed)?;
    let scenes = scenes_from_records(&records, system.ap_position())?;
    let geom = system.geometry()?;
    let grid = system.ofdm()?;
    let basis = crate::harmonics::BasisSpec::new(system.max_degree);
    let batch = EpisodeBatch::prepare(&scenes, &geom, &grid, basis)?;
    let betas = vec![0.5, 0.5];
    let noise = assemble_noise(
        &(0..samples).collect::<Vec<_>>(),
        system.subcarriers,
        system.stages,
        system.substages,
        |i| substream(seed, STREAM_VAL_NOISE + i as u64),
    );
    let loss_fn = |ps: &crate::autodiff::ParamSet| {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let out = policy
            .run_episode(&mut tape, &bound, &batch, 0.0, &noise, false)
            .expect("episode");
        let loss = weighted_mse(&mut tape, &out.estimates, &batch.truth, &betas).expect("loss");
        // Scale down so finite differences stay in a well-conditioned range.
        let loss = tape.scale(loss, 1e-2);
        let grads = tape.backward(loss);
        let analytic = ps.grads_for(&bound, &grads);
        (tape.value(loss).item(), analytic)
    };
    let mut rng = substream(seed, STREAM_SHUFFLE);
    Ok(grad_check(&policy.params, loss_fn, coords_per_param, &mut rng))
}

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_rmse: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains a fresh policy on `records`, checkpointing the epoch with the best
/// validation final-stage RMSE into `out_dir/checkpoint`, and writes
/// `report.csv` plus a `config.json` echo next to it.
pub fn train(
    cfg: &RunConfig,
    records: &[SceneRecord],
    seed: u64,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let system = &cfg.system;
    let pcfg = PolicyConfig::from_configs(system, &cfg.model)?;
    let mut policy = Policy::new(pcfg, substream_seed(seed, STREAM_MODEL_INIT))?;
    let scenes = scenes_from_records(records, system.ap_position())?;
    let n_train = ((records.len() as f64) * cfg.train.train_fraction).round() as usize;
    if n_train == 0 || n_train >= scenes.len() {
        return Err(Error::Config(format!(
            "train/validation split {n_train}/{} is degenerate",
            scenes.len() - n_train
        )));
    }
    let (train_scenes, val_scenes) = scenes.split_at(n_train);
    let geom = system.geometry()?;
    let grid = system.ofdm()?;
    let basis = crate::harmonics::BasisSpec::new(system.max_degree);
    let betas = cfg.train.betas(system.stages);
    let sigma2 = NoiseModel::from_snr_db(system.snr_db, system.p_max).sigma2;
    let mut adam = Adam::with_defaults(cfg.train.learning_rate);
    std::fs::create_dir_all(out_dir)?;
    let ckpt_dir = out_dir.join("checkpoint");
    let samples = records.len() as u64;

    let mut rows = Vec::with_capacity(cfg.train.epochs);
    let mut best_epoch = 0;
    let mut best_final = f64::INFINITY;
    let mut best_val = Vec::new();
    for epoch in 0..cfg.train.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        shuffle(&mut order, &mut substream(seed, STREAM_SHUFFLE + epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch_scenes: Vec<MultipathScene> =
                chunk.iter().map(|&i| train_scenes[i].clone()).collect();
            let batch = EpisodeBatch::prepare(&batch_scenes, &geom, &grid, basis)?;
            // Fresh noise every epoch, keyed by (epoch, sample).
            let noise = assemble_noise(
                chunk,
                system.subcarriers,
                system.stages,
                system.substages,
                |i| substream(seed, STREAM_TRAIN_NOISE + epoch as u64 * samples + i as u64),
            );
            let step = catch_unwind(AssertUnwindSafe(|| -> Result<(f64, Vec<Tensor>, _)> {
                let mut tape = Tape::new();
                let bound = policy.bind(&mut tape);
                let out = policy.run_episode(&mut tape, &bound, &batch, sigma2, &noise, false)?;
                let loss = weighted_mse(&mut tape, &out.estimates, &batch.truth, &betas)?;
                let grads = tape.backward(loss);
                Ok((tape.value(loss).item(), grads, bound))
            }));
            let (loss, grads, bound) = match step {
                Ok(r) => r?,
                Err(payload) => {
                    let msg = payload
                        .downcast_ref::<String>()
                        .map(String::as_str)
                        .or_else(|| payload.downcast_ref::<&str>().copied())
                        .unwrap_or("unknown panic");
                    return Err(Error::Degenerate(format!(
                        "training diverged at epoch {epoch} (first sample {}): {msg}",
                        chunk[0]
                    )));
                }
            };
            policy.params.zero_grads();
            policy.params.accumulate_grads(&bound, &grads);
            policy.params.clip_grad_norm(cfg.train.grad_clip);
            adam.step(&mut policy.params)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_scenes.len() as f64;
        let val_rmse = rmse_per_stage(
            &policy,
            val_scenes,
            system,
            sigma2,
            cfg.train.batch_size,
            |i| substream(seed, STREAM_VAL_NOISE + i as u64),
        )?;
        let final_rmse = *val_rmse.last().expect("at least one stage");
        if final_rmse < best_final {
            best_final = final_rmse;
            best_epoch = epoch;
            best_val = val_rmse.clone();
            policy.save(&ckpt_dir, system, Some(&adam))?;
        }
        rows.push(EpochRow {
            epoch,
            train_loss,
            val_rmse,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    write_report(&out_dir.join("report.csv"), &rows, system.stages)?;
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    Ok(TrainOutcome {
        rows,
        best_epoch,
        best_val_rmse: best_val,
        checkpoint: ckpt_dir,
    })
}

fn write_report(path: &Path, rows: &[EpochRow], stages: usize) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "epoch,train_loss")?;
    for t in 1..=stages {
        write!(out, ",val_rmse_stage_{t}")?;
    }
    writeln!(out, ",seconds")?;
    for row in rows {
        write!(out, "{},{:.9e}", row.epoch, row.train_loss)?;
        for v in &row.val_rmse {
            write!(out, ",{v:.9e}")?;
        }
        writeln!(out, ",{:.3}", row.seconds)?;
    }
    Ok(())
}

/// Fisher-Yates with our own RNG so shuffles stay identical across platforms.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

fn substream_seed(seed: u64, index: u64) -> u64 {
    use rand::RngCore;
    substream(seed, index).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::write_dataset;
    use crate::config::{EvalSection, ModelConfig, TrainSection};

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
                epochs: 2,
                stage_weights: None,
                grad_clip: 1.0,
            },
            eval: EvalSection {
                snr_db_list: vec![10.0],
                eval_seeds: vec![0],
                beam_grid_theta: 8,
                beam_grid_phi: 16,
                budget_total: 4,
                budget_allocations: vec![(2, 2)],
            },
        }
    }

    #[test]
    fn weighted_mse_hand_value() {
        let mut tape = Tape::new();
        // Two stages, one sample: squared errors 1 and 4, weights 1/3 and 2/3.
        let e1 = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]));
        let e2 = tape.leaf(Tensor::new(vec![1, 2], vec![2.0, 0.0]));
        let loss = weighted_mse(
            &mut tape,
            &[e1, e2],
            &[[0.0, 0.0]],
            &[1.0 / 3.0, 2.0 / 3.0],
        )
        .unwrap();
        assert!((tape.value(loss).item() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn dataset_generation_is_deterministic_and_prefix_stable() {
        let cfg = tiny_run_config();
        let a = generate_dataset(&cfg.system, 20, 7).unwrap();
        let b = generate_dataset(&cfg.system, 20, 7).unwrap();
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_dataset(&mut buf_a, &a).unwrap();
        write_dataset(&mut buf_b, &b).unwrap();
        assert_eq!(buf_a, buf_b, "same seed must give identical bytes");
        let longer = generate_dataset(&cfg.system, 30, 7).unwrap();
        let mut buf_c = Vec::new();
        write_dataset(&mut buf_c, &longer[..20]).unwrap();
        assert_eq!(buf_a, buf_c, "prefix of a longer dataset must match");
        let other = generate_dataset(&cfg.system, 20, 8).unwrap();
        assert_ne!(a[0].ue, other[0].ue);
    }

    #[test]
    fn dataset_positions_cover_the_region() {
        let cfg = tiny_run_config();
        let records = generate_dataset(&cfg.system, 10_000, 3).unwrap();
        let (mut mx, mut my) = (0.0, 0.0);
        for r in &records {
            assert!(r.ue[0].abs() <= 30.0 && r.ue[1].abs() <= 30.0);
            assert_eq!(r.paths.len(), 2);
            mx += r.ue[0];
            my += r.ue[1];
        }
        mx /= 10_000.0;
        my /= 10_000.0;
        assert!(mx.abs() < 0.6 && my.abs() < 0.6, "mean ({mx}, {my})");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut cfg = tiny_run_config();
        cfg.train.learning_rate = 0.0;
        cfg.train.epochs = 1;
        let records = generate_dataset(&cfg.system, cfg.train.samples, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        train(&cfg, &records, 5, dir.path()).unwrap();
        let (trained, _) = Policy::load(&dir.path().join("checkpoint")).unwrap();
        let fresh = Policy::new(
            PolicyConfig::from_configs(&cfg.system, &cfg.model).unwrap(),
            substream_seed(5, STREAM_MODEL_INIT),
        )
        .unwrap();
        assert_eq!(trained.params.value_hash(), fresh.params.value_hash());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = tiny_run_config();
        let records = generate_dataset(&cfg.system, cfg.train.samples, 13).unwrap();
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            train(&cfg, &records, 17, dir.path()).unwrap()
        };
        let a = run();
        let b = run();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            let rel = (ra.train_loss - rb.train_loss).abs() / ra.train_loss.abs().max(1e-12);
            assert!(rel < 1e-9, "epoch {}: {} vs {}", ra.epoch, ra.train_loss, rb.train_loss);
            assert_eq!(ra.val_rmse, rb.val_rmse);
        }
    }

    #[test]
    fn training_reduces_the_loss() {
        let mut cfg = tiny_run_config();
        cfg.train.epochs = 8;
        cfg.train.samples = 48;
        cfg.train.learning_rate = 3e-3;
        let records = generate_dataset(&cfg.system, cfg.train.samples, 19).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &records, 23, dir.path()).unwrap();
        let first = out.rows.first().unwrap().train_loss;
        let last = out.rows.last().unwrap().train_loss;
        assert!(
            last < first,
            "loss should fall over 8 epochs: {first} -> {last}"
        );
        assert!(dir.path().join("report.csv").exists());
        assert!(dir.path().join("config.json").exists());
        assert!(out.checkpoint.join("manifest.json").exists());
    }

    #[test]
    fn initial_configuration_receives_gradient() {
        let cfg = tiny_run_config();
        let records = generate_dataset(&cfg.system, 8, 29).unwrap();
        let scenes = scenes_from_records(&records, cfg.system.ap_position()).unwrap();
        let pcfg = PolicyConfig::from_configs(&cfg.system, &cfg.model).unwrap();
        let mut policy = Policy::new(pcfg, 31).unwrap();
        let geom = cfg.system.geometry().unwrap();
        let grid = cfg.system.ofdm().unwrap();
        let basis = crate::harmonics::BasisSpec::new(cfg.system.max_degree);
        let batch = EpisodeBatch::prepare(&scenes, &geom, &grid, basis).unwrap();
        let noise = assemble_noise(&(0..8).collect::<Vec<_>>(), 4, 2, 2, |i| {
            substream(0, i as u64)
        });
        let mut tape = Tape::new();
        let bound = policy.bind(&mut tape);
        let out = policy
            .run_episode(&mut tape, &bound, &batch, 0.1, &noise, false)
            .unwrap();
        let loss = weighted_mse(&mut tape, &out.estimates, &batch.truth, &[0.5, 0.5]).unwrap();
        let grads = tape.backward(loss);
        policy.params.zero_grads();
        policy.params.accumulate_grads(&bound, &grads);
        let g = policy
            .params
            .by_name("init_config")
            .unwrap()
            .grad
            .norm();
        assert!(g > 1e-12, "stage-1 configuration gradient is {g}");
    }

    #[test]
    fn validation_does_not_mutate_the_model() {
        let cfg = tiny_run_config();
        let records = generate_dataset(&cfg.system, 16, 37).unwrap();
        let scenes = scenes_from_records(&records, cfg.system.ap_position()).unwrap();
        let pcfg = PolicyConfig::from_configs(&cfg.system, &cfg.model).unwrap();
        let policy = Policy::new(pcfg, 41).unwrap();
        let before = policy.params.value_hash();
        let rmse = rmse_per_stage(&policy, &scenes, &cfg.system, 0.1, 8, |i| {
            substream(1, i as u64)
        })
        .unwrap();
        assert_eq!(rmse.len(), 2);
        assert!(rmse.iter().all(|v| v.is_finite() && *v > 0.0));
        assert_eq!(policy.params.value_hash(), before);
    }
}
