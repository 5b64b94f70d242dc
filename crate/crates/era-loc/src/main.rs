use clap::{Args, Parser, Subcommand};
use era_loc::channel::{read_dataset, write_dataset, NoiseModel};
use era_loc::config::RunConfig;
use era_loc::evaluation::{
    digital_only_config, eval_rmse, export_beampatterns, one_shot_config, sweep_budget, sweep_snr,
    write_budget_table, write_snr_table, write_stage_table, EvalResult, MethodGroup,
};
use era_loc::policy::Policy;
use era_loc::training::{episode_grad_check, generate_dataset, train};
use era_loc::{substream, Error};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "era-loc",
    about = "Simulator and learning framework for user localization with \
             pattern-reconfigurable antenna arrays"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Global seed; every random choice derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; all files are written beneath it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene dataset as JSON lines.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a policy on an existing dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset produced by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint: per-stage RMSE on a fresh evaluation set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory produced by train.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Final RMSE versus SNR for proposed and baseline methods.
    SweepSnr {
        #[command(flatten)]
        common: Common,
    },
    /// Final RMSE versus (stages, pilots-per-stage) at a fixed pilot budget.
    SweepBudget {
        #[command(flatten)]
        common: Common,
    },
    /// Export per-stage synthesized beampatterns for one random scene.
    Beampattern {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory produced by train.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Finite-difference gradient check of the full unrolled episode.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Fast internal consistency checks (basis, channel oracle, gradients).
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

// Substream indices for CLI-level derived seeds.
const STREAM_TRAIN_DATA: u64 = 10 << 48;
const STREAM_EVAL_DATA: u64 = 11 << 48;
const STREAM_SCENE: u64 = 12 << 48;

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { common } => cmd_gen_data(common),
        Command::Train { common, data } => cmd_train(common, data),
        Command::Eval { common, ckpt } => cmd_eval(common, ckpt),
        Command::SweepSnr { common } => cmd_sweep_snr(common),
        Command::SweepBudget { common } => cmd_sweep_budget(common),
        Command::Beampattern { common, ckpt } => cmd_beampattern(common, ckpt),
        Command::Gradcheck { common } => cmd_gradcheck(common),
        Command::Selftest { common } => cmd_selftest(common),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Shape(_) | Error::Constraint(_) | Error::Domain(_) => {
                    ExitCode::from(1)
                }
                _ => ExitCode::from(2),
            }
        }
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("ERA_LOC_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    RunConfig::load(&common.config)
}

fn ensure_out(common: &Common) -> Result<(), Error> {
    std::fs::create_dir_all(&common.out)?;
    Ok(())
}

fn eval_sample_count(cfg: &RunConfig) -> usize {
    let n = ((cfg.train.samples as f64) * (1.0 - cfg.train.train_fraction)).round() as usize;
    n.max(1)
}

fn cmd_gen_data(common: &Common) -> Result<ExitCode, Error> {
    let cfg = load_config(common)?;
    ensure_out(common)?;
    let records = generate_dataset(&cfg.system, cfg.train.samples, common.seed)?;
    let path = common.out.join("dataset.jsonl");
    let file = std::fs::File::create(&path)?;
    write_dataset(std::io::BufWriter::new(file), &records)?;
    println!("wrote {} scenes to {}", records.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(common: &Common, data: &Path) -> Result<ExitCode, Error> {
    let cfg = load_config(common)?;
    ensure_out(common)?;
    let file = std::fs::File::open(data)?;
    let records = read_dataset(std::io::BufReader::new(file))?;
    let outcome = train(&cfg, &records, common.seed, &common.out)?;
    let best = &outcome.best_val_rmse;
    println!(
        "best epoch {}: validation RMSE per stage [{}], checkpoint {}",
        outcome.best_epoch,
        best.iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(", "),
        outcome.checkpoint.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(common: &Common, ckpt: &Path) -> Result<ExitCode, Error> {
    let cfg = load_config(common)?;
    ensure_out(common)?;
    let (policy, system) = Policy::load(ckpt)?;
    let records = generate_dataset(
        &system,
        eval_sample_count(&cfg),
        derived_seed(common.seed, STREAM_EVAL_DATA),
    )?;
    let sigma2 = NoiseModel::from_snr_db(system.snr_db, system.p_max).sigma2;
    let rmse = eval_rmse(
        &policy,
        &system,
        &records,
        sigma2,
        &cfg.eval.eval_seeds,
        cfg.train.batch_size,
    )?;
    let result = EvalResult {
        method: cfg.model.variant.clone(),
        stage_rmse: rmse.clone(),
        seeds: cfg.eval.eval_seeds.clone(),
    };
    let path = common.out.join("stage_rmse.csv");
    let file = std::fs::File::create(&path)?;
    write_stage_table(
        std::io::BufWriter::new(file),
        &[result],
        &cfg.hash(),
        &cfg.eval.eval_seeds,
    )?;
    for (t, v) in rmse.iter().enumerate() {
        println!("stage {} RMSE {v:.4} m", t + 1);
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep_snr(common: &Common) -> Result<ExitCode, Error> {
    let cfg = load_config(common)?;
    ensure_out(common)?;
    let train_records = generate_dataset(
        &cfg.system,
        cfg.train.samples,
        derived_seed(common.seed, STREAM_TRAIN_DATA),
    )?;
    let eval_records = generate_dataset(
        &cfg.system,
        eval_sample_count(&cfg),
        derived_seed(common.seed, STREAM_EVAL_DATA),
    )?;
    let mut groups = Vec::new();
    for (method, method_cfg) in [
        ("proposed", cfg.clone()),
        ("digital_only", digital_only_config(&cfg)),
        ("one_shot", one_shot_config(&cfg)),
    ] {
        let run_dir = common.out.join(format!("train_{method}"));
        let outcome = train(&method_cfg, &train_records, common.seed, &run_dir)?;
        let (policy, system) = Policy::load(&outcome.checkpoint)?;
        groups.push(MethodGroup {
            method: method.to_string(),
            models: vec![(policy, system)],
        });
        println!("trained {method}");
    }
    let rows = sweep_snr(
        &groups,
        &eval_records,
        &cfg.eval.snr_db_list,
        &cfg.eval.eval_seeds,
        cfg.train.batch_size,
    )?;
    let path = common.out.join("snr_rmse.csv");
    let file = std::fs::File::create(&path)?;
    write_snr_table(
        std::io::BufWriter::new(file),
        &rows,
        &cfg.hash(),
        &cfg.eval.eval_seeds,
    )?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep_budget(common: &Common) -> Result<ExitCode, Error> {
    let cfg = load_config(common)?;
    ensure_out(common)?;
    let train_records = generate_dataset(
        &cfg.system,
        cfg.train.samples,
        derived_seed(common.seed, STREAM_TRAIN_DATA),
    )?;
    let eval_records = generate_dataset(
        &cfg.system,
        eval_sample_count(&cfg),
        derived_seed(common.seed, STREAM_EVAL_DATA),
    )?;
    let rows = sweep_budget(
        &cfg,
        &train_records,
        &eval_records,
        &["proposed", "digital_only"],
        &[common.seed],
        &common.out,
    )?;
    let path = common.out.join("budget_rmse.csv");
    let file = std::fs::File::create(&path)?;
    write_budget_table(
        std::io::BufWriter::new(file),
        &rows,
        &cfg.hash(),
        &cfg.eval.eval_seeds,
    )?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_beampattern(common: &Common, ckpt: &Path) -> Result<ExitCode, Error> {
    let cfg = load_config(common)?;
    ensure_out(common)?;
    let (policy, system) = Policy::load(ckpt)?;
    let mut rng = substream(common.seed, STREAM_SCENE);
    let r = system.region_half_width_m;
    use rand::Rng;
    let p = [rng.gen_range(-r..r), rng.gen_range(-r..r)];
    let scene =
        era_loc::channel::scene_from_position(p, system.ap_position(), system.paths, &mut rng)?;
    export_beampatterns(
        &policy,
        &system,
        &scene,
        cfg.eval.beam_grid_theta,
        cfg.eval.beam_grid_phi,
        common.seed,
        &common.out,
    )?;
    println!(
        "wrote {} stage beampatterns for UE ({:.2}, {:.2}) to {}",
        system.stages,
        p[0],
        p[1],
        common.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(common: &Common) -> Result<ExitCode, Error> {
    ensure_out(common)?;
    let report = episode_grad_check(2, 4, common.seed)?;
    println!(
        "gradcheck: max relative error {:.3e} (worst parameter {}, {} coordinates)",
        report.max_rel_err, report.worst_param, report.checked
    );
    std::fs::write(
        common.out.join("gradcheck.txt"),
        format!(
            "max_rel_err={:.6e}\nworst_param={}\nchecked={}\n",
            report.max_rel_err, report.worst_param, report.checked
        ),
    )?;
    if report.max_rel_err < 1e-4 {
        println!("PASS gradcheck");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL gradcheck");
        Ok(ExitCode::from(2))
    }
}

fn cmd_selftest(common: &Common) -> Result<ExitCode, Error> {
    ensure_out(common)?;
    let mut all_ok = true;
    all_ok &= report("harmonics gram", selftest_gram());
    all_ok &= report("channel oracle", selftest_channel_oracle(common.seed));
    all_ok &= report("gradcheck", selftest_gradcheck(common.seed));
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn report(name: &str, result: Result<(), String>) -> bool {
    match result {
        Ok(()) => {
            println!("PASS {name}");
            true
        }
        Err(msg) => {
            println!("FAIL {name}: {msg}");
            false
        }
    }
}

fn selftest_gram() -> Result<(), String> {
    use era_loc::harmonics::{gram_matrix, BasisSpec, SphereQuadrature};
    for u in 0..=6 {
        let spec = BasisSpec::new(u);
        let quad = SphereQuadrature::for_degree(u);
        let gram = gram_matrix(spec, &quad).map_err(|e| e.to_string())?;
        let k = spec.size();
        let mut worst = 0.0_f64;
        for (i, row) in gram.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        if worst >= 1e-8 {
            return Err(format!("degree {u} (K={k}): gram deviation {worst:e}"));
        }
    }
    Ok(())
}

fn selftest_channel_oracle(seed: u64) -> Result<(), String> {
    use era_loc::array::upa_geometry;
    use era_loc::channel::{channel_matrix, channel_matrix_naive, scene_from_position, OfdmGrid};
    use era_loc::harmonics::project_unit;
    use rand::Rng;
    let mut rng = substream(seed, 13 << 48);
    for trial in 0..200 {
        let nx = rng.gen_range(1..=2usize);
        let ny = rng.gen_range(1..=4usize);
        let m = rng.gen_range(1..=16usize);
        let p = rng.gen_range(1..=4usize);
        let grid = OfdmGrid::new(m, 960e3, 30e9).map_err(|e| e.to_string())?;
        let geom =
            upa_geometry(nx, ny, 0.5, grid.wavelength()).map_err(|e| e.to_string())?;
        let ue = [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)];
        let scene = scene_from_position(ue, [0.0, 0.0, 10.0], p, &mut rng)
            .map_err(|e| e.to_string())?;
        let coeffs: Vec<_> = (0..geom.len())
            .map(|_| {
                let raw: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
                project_unit(&raw).map_err(|e| e.to_string())
            })
            .collect::<Result<_, _>>()?;
        let fast = channel_matrix(&scene, &coeffs, &grid, &geom).map_err(|e| e.to_string())?;
        let naive =
            channel_matrix_naive(&scene, &coeffs, &grid, &geom).map_err(|e| e.to_string())?;
        let scale = naive
            .iter()
            .flatten()
            .map(|v| v.norm())
            .fold(0.0_f64, f64::max);
        for (a, b) in fast.iter().flatten().zip(naive.iter().flatten()) {
            if (a - b).norm() >= 1e-12 * scale.max(1e-300) {
                return Err(format!(
                    "trial {trial}: vectorized {a} vs naive {b} at scale {scale:e}"
                ));
            }
        }
    }
    Ok(())
}

fn selftest_gradcheck(seed: u64) -> Result<(), String> {
    let report = episode_grad_check(2, 3, seed).map_err(|e| e.to_string())?;
    if report.max_rel_err < 1e-4 {
        Ok(())
    } else {
        Err(format!(
            "max relative error {:.3e} at {}",
            report.max_rel_err, report.worst_param
        ))
    }
}

fn derived_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    substream(seed, stream).next_u64()
}
