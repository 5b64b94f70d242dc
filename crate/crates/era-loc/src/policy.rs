//! The active-sensing model: attention feature extractor, recurrent state
//! update, configuration head with constraint projections, and localization
//! head. Episodes run batched on one gradient tape so training can
//! backpropagate through the observation model.

use crate::array::ArrayGeometry;
use crate::autodiff::{
    load_checkpoint, save_checkpoint, Adam, BoundParams, Linear, LstmCell, MultiHeadAttention,
    ParamSet, Tape, Tensor, Var,
};
use crate::channel::{MultipathScene, ObservationMatrix, OfdmGrid};
use crate::config::{ModelConfig, SystemConfig};
use crate::error::{Error, Result};
use crate::harmonics::{eval_basis, BasisSpec, PatternCoefficients};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    /// Combiner and per-substage pattern coefficients are both emitted.
    Proposed,
    /// Patterns frozen isotropic; only the combiner is emitted.
    DigitalOnly,
}

/// Full model hyperparameters plus the system dimensions the model is wired for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
    pub n_antennas: usize,
    pub subcarriers: usize,
    pub substages: usize,
    pub basis_size: usize,
    pub stages: usize,
    pub p_max: f64,
    pub variant: PolicyVariant,
}

impl PolicyConfig {
    pub fn from_configs(system: &SystemConfig, model: &ModelConfig) -> Result<Self> {
        model.validate(system)?;
        Ok(PolicyConfig {
            d_model: model.d_model,
            heads: model.heads,
            embed_dim: model.embed_dim,
            lstm_hidden: model.lstm_hidden,
            head_hidden: model.head_hidden,
            n_antennas: system.n_antennas(),
            subcarriers: system.subcarriers,
            substages: system.substages,
            basis_size: system.basis_size(),
            stages: system.stages,
            p_max: system.p_max,
            variant: if model.variant == "proposed" {
                PolicyVariant::Proposed
            } else {
                PolicyVariant::DigitalOnly
            },
        })
    }

    /// Length of one raw configuration vector before projection.
    pub fn config_dim(&self) -> usize {
        match self.variant {
            PolicyVariant::Proposed => {
                2 * self.n_antennas
                    + self.n_antennas * self.substages * self.basis_size
            }
            PolicyVariant::DigitalOnly => 2 * self.n_antennas,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.embed_dim >= 2 * self.subcarriers * self.substages {
            return Err(Error::Config(format!(
                "embed_dim {} must be < 2*M*L = {}",
                self.embed_dim,
                2 * self.subcarriers * self.substages
            )));
        }
        Ok(())
    }
}

/// A constraint-satisfying sensing configuration for one stage.
#[derive(Debug, Clone)]
pub struct SensingConfig {
    pub w: Vec<Complex64>,
    /// coeffs[l][n] is the pattern for antenna n during substage l.
    pub coeffs: Vec<Vec<PatternCoefficients>>,
    pub stage_index: usize,
}

/// Recurrent memory carried across stages (tape handles).
#[derive(Debug, Clone, Copy)]
pub struct PolicyState {
    pub h: Var,
    pub c: Var,
}

/// Tape handles of one projected configuration.
#[derive(Debug, Clone, Copy)]
pub struct ConfigVars {
    /// [b, 2N], real/imag interleaved, rescaled to ||w||^2 = P_max.
    pub w: Var,
    /// [b, L*N*K] with every (l, n) slice unit-norm; None for digital-only.
    pub coeffs: Option<Var>,
}

pub struct Policy {
    pub cfg: PolicyConfig,
    pub params: ParamSet,
    token_proj: Linear,
    pos_embed: usize,
    ln1_gain: usize,
    ln1_bias: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    attn: MultiHeadAttention,
    ff1: Linear,
    ff2: Linear,
    pool_query: usize,
    embed_out: Linear,
    lstm: LstmCell,
    cfg_head: [Linear; 3],
    loc_head: [Linear; 3],
    init_config: usize,
}

impl Policy {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::substream(seed, 0xE7A);
        let mut params = ParamSet::new();
        let dm = cfg.d_model;
        let token_proj = Linear::new(&mut params, "enc.token", 2 * cfg.subcarriers, dm, &mut rng);
        let bound = (1.0 / dm as f64).sqrt();
        let pos = Tensor::new(
            vec![cfg.substages * dm],
            (0..cfg.substages * dm)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        );
        let pos_embed = params.add("enc.pos", pos);
        let ln1_gain = params.add("enc.ln1.gain", ones(dm));
        let ln1_bias = params.add("enc.ln1.bias", Tensor::zeros(vec![dm]));
        let attn = MultiHeadAttention::new(&mut params, "enc.attn", dm, cfg.heads, &mut rng)?;
        let ln2_gain = params.add("enc.ln2.gain", ones(dm));
        let ln2_bias = params.add("enc.ln2.bias", Tensor::zeros(vec![dm]));
        let ff1 = Linear::new(&mut params, "enc.ff1", dm, 2 * dm, &mut rng);
        let ff2 = Linear::new(&mut params, "enc.ff2", 2 * dm, dm, &mut rng);
        let pool_query = params.add(
            "enc.pool",
            Tensor::new(vec![dm, 1], (0..dm).map(|_| rng.gen_range(-bound..bound)).collect()),
        );
        let embed_out = Linear::new(&mut params, "enc.out", dm, cfg.embed_dim, &mut rng);
        let lstm = LstmCell::new(&mut params, "lstm", cfg.embed_dim, cfg.lstm_hidden, &mut rng);
        let cfg_head = [
            Linear::new(&mut params, "cfg.0", cfg.lstm_hidden, cfg.head_hidden, &mut rng),
            Linear::new(&mut params, "cfg.1", cfg.head_hidden, cfg.head_hidden, &mut rng),
            Linear::new(&mut params, "cfg.2", cfg.head_hidden, cfg.config_dim(), &mut rng),
        ];
        let loc_head = [
            Linear::new(&mut params, "loc.0", cfg.lstm_hidden, cfg.head_hidden, &mut rng),
            Linear::new(&mut params, "loc.1", cfg.head_hidden, cfg.head_hidden, &mut rng),
            Linear::new(&mut params, "loc.2", cfg.head_hidden, 2, &mut rng),
        ];
        let init = Tensor::new(
            vec![cfg.config_dim()],
            (0..cfg.config_dim())
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect(),
        );
        let init_config = params.add("init_config", init);
        Ok(Policy {
            cfg,
            params,
            token_proj,
            pos_embed,
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
            attn,
            ff1,
            ff2,
            pool_query,
            embed_out,
            lstm,
            cfg_head,
            loc_head,
            init_config,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.params.bind(tape)
    }

    /// Initial recurrent state: zeros.
    pub fn initial_state(&self, tape: &mut Tape, batch: usize) -> PolicyState {
        PolicyState {
            h: tape.leaf(Tensor::zeros(vec![batch, self.cfg.lstm_hidden])),
            c: tape.leaf(Tensor::zeros(vec![batch, self.cfg.lstm_hidden])),
        }
    }

    /// Embeds one stage's observation tokens. `tokens` holds L tensors of
    /// shape [b, 2M] (real/imag concatenation of each substage observation).
    pub fn encode_stage(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: &[Var],
    ) -> Result<Var> {
        if tokens.len() != self.cfg.substages {
            return Err(Error::Shape(format!(
                "{} tokens for {} substages",
                tokens.len(),
                self.cfg.substages
            )));
        }
        let b = tape.value(tokens[0]).shape()[0];
        let (l_count, dm) = (self.cfg.substages, self.cfg.d_model);
        for t in tokens {
            if tape.value(*t).shape() != [b, 2 * self.cfg.subcarriers] {
                return Err(Error::Shape(format!(
                    "token shape {:?}, expected [{b}, {}]",
                    tape.value(*t).shape(),
                    2 * self.cfg.subcarriers
                )));
            }
        }
        let stacked = tape.stack_rows(tokens);
        let proj = self.token_proj.forward(tape, bound, stacked)?;
        // Learned per-substage position embedding.
        let flat = tape.reshape(proj, vec![b, l_count * dm]);
        let with_pos = tape.add_row(flat, bound.var(self.pos_embed));
        let x = tape.reshape(with_pos, vec![b, l_count, dm]);
        // Pre-norm encoder block.
        let n1 = tape.layer_norm(x, bound.var(self.ln1_gain), bound.var(self.ln1_bias));
        let att = self.attn.forward_core(tape, bound, n1)?;
        let x1 = tape.add(x, att);
        let n2 = tape.layer_norm(x1, bound.var(self.ln2_gain), bound.var(self.ln2_bias));
        let f1 = self.ff1.forward(tape, bound, n2)?;
        let f1 = tape.tanh(f1);
        let f2 = self.ff2.forward(tape, bound, f1)?;
        let x2 = tape.add(x1, f2);
        // Attention pooling with a learned query.
        let flat2 = tape.reshape(x2, vec![b * l_count, dm]);
        let scores = tape.matmul(flat2, bound.var(self.pool_query));
        let scores = tape.reshape(scores, vec![b, l_count]);
        let scores = tape.scale(scores, 1.0 / (dm as f64).sqrt());
        let attw = tape.softmax_last(scores);
        let attw = tape.reshape(attw, vec![b, 1, l_count]);
        let pooled = tape.bmm(attw, x2, false);
        let pooled = tape.reshape(pooled, vec![b, dm]);
        self.embed_out.forward(tape, bound, pooled)
    }

    /// One LSTM step: s_t = L(z_t, s_{t-1}).
    pub fn update_state(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        z: Var,
        prev: PolicyState,
    ) -> Result<PolicyState> {
        let (h, c) = self.lstm.forward(tape, bound, z, prev.h, prev.c)?;
        Ok(PolicyState { h, c })
    }

    fn mlp3(&self, tape: &mut Tape, bound: &BoundParams, layers: &[Linear; 3], x: Var) -> Result<Var> {
        let h1 = layers[0].forward(tape, bound, x)?;
        let h1 = tape.tanh(h1);
        let h2 = layers[1].forward(tape, bound, h1)?;
        let h2 = tape.tanh(h2);
        layers[2].forward(tape, bound, h2)
    }

    /// Projects a raw [b, config_dim] vector onto the constraint set:
    /// ||w||^2 = P_max exactly, every (l, n) coefficient slice unit-norm.
    fn project_config(&self, tape: &mut Tape, raw: Var) -> Result<ConfigVars> {
        let b = tape.value(raw).shape()[0];
        let two_n = 2 * self.cfg.n_antennas;
        let w_raw = tape.slice_last(raw, 0, two_n);
        for row in tape.value(w_raw).data().chunks(two_n) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                return Err(Error::Degenerate(format!(
                    "combiner output norm {norm:e} below 1e-9"
                )));
            }
        }
        let w = tape.normalize_last(w_raw, self.cfg.p_max.sqrt());
        let coeffs = match self.cfg.variant {
            PolicyVariant::DigitalOnly => None,
            PolicyVariant::Proposed => {
                let (n, l, k) = (self.cfg.n_antennas, self.cfg.substages, self.cfg.basis_size);
                let c_raw = tape.slice_last(raw, two_n, n * l * k);
                for row in tape.value(c_raw).data().chunks(k) {
                    let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-9 {
                        return Err(Error::Degenerate(format!(
                            "pattern coefficient slice norm {norm:e} below 1e-9"
                        )));
                    }
                }
                let slices = tape.reshape(c_raw, vec![b * l * n, k]);
                let unit = tape.normalize_last(slices, 1.0);
                Some(tape.reshape(unit, vec![b, l * n * k]))
            }
        };
        Ok(ConfigVars { w, coeffs })
    }

    /// Configuration for the next stage from the current state.
    pub fn next_config(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        state: PolicyState,
    ) -> Result<ConfigVars> {
        let raw = self.mlp3(tape, bound, &self.cfg_head, state.h)?;
        self.project_config(tape, raw)
    }

    /// The learned stage-1 configuration (no observations exist yet).
    pub fn initial_config(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: usize,
    ) -> Result<ConfigVars> {
        let raw = tape.broadcast_rows(bound.var(self.init_config), batch);
        self.project_config(tape, raw)
    }

    /// Position estimate from the current state.
    pub fn estimate_position(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        state: PolicyState,
    ) -> Result<Var> {
        self.mlp3(tape, bound, &self.loc_head, state.h)
    }

    /// Extracts the plain configuration of batch item `bi` from tape values.
    pub fn extract_config(
        &self,
        tape: &Tape,
        config: &ConfigVars,
        bi: usize,
        stage_index: usize,
    ) -> Result<SensingConfig> {
        let (n, l, k) = (self.cfg.n_antennas, self.cfg.substages, self.cfg.basis_size);
        let wdata = tape.value(config.w).data();
        let w: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new(wdata[bi * 2 * n + 2 * i], wdata[bi * 2 * n + 2 * i + 1]))
            .collect();
        let coeffs = match config.coeffs {
            None => vec![vec![PatternCoefficients::isotropic(k); n]; l],
            Some(cv) => {
                let cdata = tape.value(cv).data();
                let mut out = Vec::with_capacity(l);
                for li in 0..l {
                    let mut per_antenna = Vec::with_capacity(n);
                    for ni in 0..n {
                        let start = bi * l * n * k + (li * n + ni) * k;
                        per_antenna.push(PatternCoefficients::from_unit(
                            cdata[start..start + k].to_vec(),
                        )?);
                    }
                    out.push(per_antenna);
                }
                out
            }
        };
        Ok(SensingConfig {
            w,
            coeffs,
            stage_index,
        })
    }
}

fn ones(d: usize) -> Tensor {
    Tensor::new(vec![d], vec![1.0; d])
}

impl MultiHeadAttention {
    /// Attention without the residual addition (used by the pre-norm encoder,
    /// which adds the un-normalized input instead).
    pub fn forward_core(&self, tape: &mut Tape, bound: &BoundParams, tokens: Var) -> Result<Var> {
        let with_residual = self.forward(tape, bound, tokens)?;
        Ok(tape.sub(with_residual, tokens))
    }
}

/// Precomputed per-batch constants of the differentiable observation model.
pub struct EpisodeBatch {
    pub batch: usize,
    pub truth: Vec<[f64; 2]>,
    /// [b, P, K]: harmonic basis at each path arrival direction.
    pub gamma: Tensor,
    /// [b, P, N, M]: real part of alpha_p a_n(u_p) exp(-j 2 pi tau_p m df).
    pub s_re: Tensor,
    /// Imaginary counterpart of `s_re`.
    pub s_im: Tensor,
}

impl EpisodeBatch {
    pub fn prepare(
        scenes: &[MultipathScene],
        geom: &ArrayGeometry,
        grid: &OfdmGrid,
        basis: BasisSpec,
    ) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Config("empty episode batch".into()));
        }
        let b = scenes.len();
        let p = scenes[0].paths.len();
        let n = geom.len();
        let m = grid.subcarriers;
        let k = basis.size();
        let mut gamma = vec![0.0; b * p * k];
        let mut s_re = vec![0.0; b * p * n * m];
        let mut s_im = vec![0.0; b * p * n * m];
        for (bi, scene) in scenes.iter().enumerate() {
            if scene.paths.len() != p {
                return Err(Error::Shape(
                    "scenes in a batch must share the path count".into(),
                ));
            }
            for (pi, path) in scene.paths.iter().enumerate() {
                let g = eval_basis(path.dir.theta, path.dir.phi, basis)?;
                gamma[(bi * p + pi) * k..(bi * p + pi) * k + k].copy_from_slice(&g);
                let steer = crate::array::steering_vector(geom, &path.dir);
                let base = Complex64::from_polar(1.0, -2.0 * PI * path.tau * grid.delta_f);
                for (ni, a) in steer.iter().enumerate() {
                    let head = path.alpha * a;
                    let mut phasor = Complex64::new(1.0, 0.0);
                    for mi in 0..m {
                        let v = head * phasor;
                        let idx = ((bi * p + pi) * n + ni) * m + mi;
                        s_re[idx] = v.re;
                        s_im[idx] = v.im;
                        phasor *= base;
                    }
                }
            }
        }
        Ok(EpisodeBatch {
            batch: b,
            truth: scenes.iter().map(|s| s.ue_position).collect(),
            gamma: Tensor::new(vec![b, p, k], gamma),
            s_re: Tensor::new(vec![b, p, n, m], s_re),
            s_im: Tensor::new(vec![b, p, n, m], s_im),
        })
    }
}

/// Standard-normal noise draws for a whole episode: one [b, 2M] tensor per
/// (stage, substage), in protocol order.
pub fn sample_episode_noise<R: Rng>(
    batch: usize,
    subcarriers: usize,
    stages: usize,
    substages: usize,
    rng: &mut R,
) -> Vec<Tensor> {
    (0..stages * substages)
        .map(|_| {
            Tensor::new(
                vec![batch, 2 * subcarriers],
                (0..batch * 2 * subcarriers)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
        })
        .collect()
}

pub struct EpisodeResult {
    /// Per-stage position estimates, each [b, 2].
    pub estimates: Vec<Var>,
    /// Recorded per-stage configurations (outer: stage, inner: batch item).
    pub configs: Option<Vec<Vec<SensingConfig>>>,
    /// Recorded per-stage observations (outer: stage, inner: batch item).
    pub observations: Option<Vec<Vec<ObservationMatrix>>>,
}

impl Policy {
    /// Runs the closed sensing loop for all stages on one tape.
    ///
    /// `noise` must hold stages*substages standard-normal tensors (see
    /// [`sample_episode_noise`]); the observation adds sigma-scaled draws so
    /// the episode stays differentiable with the noise held fixed.
    pub fn run_episode(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &EpisodeBatch,
        sigma2: f64,
        noise: &[Tensor],
        record: bool,
    ) -> Result<EpisodeResult> {
        let cfg = &self.cfg;
        let (b, n, m, l_count, k) = (
            batch.batch,
            cfg.n_antennas,
            cfg.subcarriers,
            cfg.substages,
            cfg.basis_size,
        );
        if batch.s_re.shape()[2] != n || batch.s_re.shape()[3] != m {
            return Err(Error::Shape(format!(
                "episode batch built for N={}, M={}, model expects N={n}, M={m}",
                batch.s_re.shape()[2],
                batch.s_re.shape()[3]
            )));
        }
        if noise.len() != cfg.stages * l_count {
            return Err(Error::Shape(format!(
                "{} noise draws for {} substage observations",
                noise.len(),
                cfg.stages * l_count
            )));
        }
        let gamma = tape.leaf(batch.gamma.clone());
        let iso = match cfg.variant {
            PolicyVariant::Proposed => None,
            PolicyVariant::DigitalOnly => {
                let mut data = vec![0.0; b * n * k];
                for row in data.chunks_mut(k) {
                    row[0] = 1.0;
                }
                Some(tape.leaf(Tensor::new(vec![b, n, k], data)))
            }
        };
        let sigma_scale = (sigma2 / 2.0).sqrt();
        let mut state = self.initial_state(tape, b);
        let mut config = self.initial_config(tape, bound, b)?;
        let mut estimates = Vec::with_capacity(cfg.stages);
        let mut rec_configs = if record { Some(Vec::new()) } else { None };
        let mut rec_obs = if record { Some(Vec::new()) } else { None };
        for t in 0..cfg.stages {
            if let Some(rc) = rec_configs.as_mut() {
                let per_item: Vec<SensingConfig> = (0..b)
                    .map(|bi| self.extract_config(tape, &config, bi, t))
                    .collect::<Result<_>>()?;
                rc.push(per_item);
            }
            // Split the interleaved combiner into re/im rows [b, 1, N].
            let w_pairs = tape.reshape(config.w, vec![b, n, 2]);
            let w_re = tape.slice_last(w_pairs, 0, 1);
            let w_re = tape.reshape(w_re, vec![b, 1, n]);
            let w_im = tape.slice_last(w_pairs, 1, 1);
            let w_im = tape.reshape(w_im, vec![b, 1, n]);
            let mut tokens = Vec::with_capacity(l_count);
            for l in 0..l_count {
                let c_l = match (cfg.variant, config.coeffs) {
                    (PolicyVariant::DigitalOnly, _) => iso.unwrap(),
                    (PolicyVariant::Proposed, Some(cv)) => {
                        let slice = tape.slice_last(cv, l * n * k, n * k);
                        tape.reshape(slice, vec![b, n, k])
                    }
                    (PolicyVariant::Proposed, None) => unreachable!(),
                };
                let gains = tape.bmm(gamma, c_l, true);
                let h_re = tape.path_mix(gains, batch.s_re.clone());
                let h_im = tape.path_mix(gains, batch.s_im.clone());
                // y = w^H h (all-ones pilot): re = wre.hre + wim.him,
                // im = wre.him - wim.hre.
                let rr = tape.bmm(w_re, h_re, false);
                let ii = tape.bmm(w_im, h_im, false);
                let y_re = tape.add(rr, ii);
                let ri = tape.bmm(w_re, h_im, false);
                let ir = tape.bmm(w_im, h_re, false);
                let y_im = tape.sub(ri, ir);
                let y_re = tape.reshape(y_re, vec![b, m]);
                let y_im = tape.reshape(y_im, vec![b, m]);
                let mut tok = tape.concat_last(y_re, y_im);
                if sigma2 > 0.0 {
                    let mut scaled = noise[t * l_count + l].clone();
                    for v in scaled.data_mut() {
                        *v *= sigma_scale;
                    }
                    tok = tape.add_const(tok, &scaled);
                }
                tokens.push(tok);
            }
            if let Some(ro) = rec_obs.as_mut() {
                ro.push(tokens_to_observations(tape, &tokens, m));
            }
            let z = self.encode_stage(tape, bound, &tokens)?;
            state = self.update_state(tape, bound, z, state)?;
            estimates.push(self.estimate_position(tape, bound, state)?);
            if t + 1 < cfg.stages {
                config = self.next_config(tape, bound, state)?;
            }
        }
        Ok(EpisodeResult {
            estimates,
            configs: rec_configs,
            observations: rec_obs,
        })
    }

    /// Saves the model with its config (self-describing checkpoint).
    pub fn save(&self, dir: &Path, system: &SystemConfig, optimizer: Option<&Adam>) -> Result<()> {
        let config = serde_json::json!({
            "policy": self.cfg,
            "system": system,
        });
        save_checkpoint(dir, &self.params, &config, optimizer)
    }

    /// Loads a checkpoint saved by [`Policy::save`].
    pub fn load(dir: &Path) -> Result<(Self, SystemConfig)> {
        let (loaded, config, _) = load_checkpoint(dir)?;
        let cfg: PolicyConfig = serde_json::from_value(config["policy"].clone())?;
        let system: SystemConfig = serde_json::from_value(config["system"].clone())?;
        let mut policy = Policy::new(cfg, 0)?;
        if policy.params.len() != loaded.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                policy.params.len()
            )));
        }
        for i in 0..loaded.len() {
            let src = loaded.get(i);
            let dst = policy.params.get_mut(i);
            if src.name != dst.name || src.value.shape() != dst.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} does not match model parameter {}",
                    src.name, dst.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok((policy, system))
    }
}

/// Converts stage tokens back into per-item observation matrices.
fn tokens_to_observations(tape: &Tape, tokens: &[Var], m: usize) -> Vec<ObservationMatrix> {
    let b = tape.value(tokens[0]).shape()[0];
    let l_count = tokens.len();
    (0..b)
        .map(|bi| {
            let mut data = Vec::with_capacity(l_count * m);
            for tok in tokens {
                let row = &tape.value(*tok).data()[bi * 2 * m..(bi + 1) * 2 * m];
                for mi in 0..m {
                    data.push(Complex64::new(row[mi], row[m + mi]));
                }
            }
            ObservationMatrix {
                subcarriers: m,
                substages: l_count,
                data,
            }
        })
        .collect()
}

/// Real/imag concatenated tokens of a plain observation matrix, for feeding
/// recorded measurements through the encoder.
pub fn observation_tokens(tape: &mut Tape, obs: &ObservationMatrix) -> Vec<Var> {
    (0..obs.substages)
        .map(|l| {
            let col = obs.column(l);
            let mut data = Vec::with_capacity(2 * obs.subcarriers);
            data.extend(col.iter().map(|c| c.re));
            data.extend(col.iter().map(|c| c.im));
            tape.leaf(Tensor::new(vec![1, 2 * obs.subcarriers], data))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::upa_geometry;
    use crate::autodiff::grad_check;
    use crate::channel::scene_from_position;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(variant: PolicyVariant) -> PolicyConfig {
        PolicyConfig {
            d_model: 8,
            heads: 2,
            embed_dim: 6,
            lstm_hidden: 8,
            head_hidden: 8,
            n_antennas: 4,
            subcarriers: 4,
            substages: 2,
            basis_size: 4,
            stages: 2,
            p_max: 1.0,
            variant,
        }
    }

    fn tiny_context() -> (ArrayGeometry, OfdmGrid, BasisSpec) {
        let grid = OfdmGrid::new(4, 960e3, 30e9).unwrap();
        let geom = upa_geometry(2, 2, 0.5, grid.wavelength()).unwrap();
        (geom, grid, BasisSpec::new(1))
    }

    fn tiny_batch(b: usize, seed: u64) -> EpisodeBatch {
        let (geom, grid, basis) = tiny_context();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenes: Vec<_> = (0..b)
            .map(|_| {
                let p = [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)];
                scene_from_position(p, [0.0, 0.0, 10.0], 2, &mut rng).unwrap()
            })
            .collect();
        EpisodeBatch::prepare(&scenes, &geom, &grid, basis).unwrap()
    }

    #[test]
    fn encode_stage_output_has_embed_dim() {
        let policy = Policy::new(tiny_cfg(PolicyVariant::Proposed), 1).unwrap();
        let mut tape = Tape::new();
        let bound = policy.bind(&mut tape);
        let mut rng = StdRng::seed_from_u64(2);
        let tokens: Vec<Var> = (0..2)
            .map(|_| {
                tape.leaf(Tensor::new(
                    vec![3, 8],
                    (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                ))
            })
            .collect();
        let z = policy.encode_stage(&mut tape, &bound, &tokens).unwrap();
        assert_eq!(tape.value(z).shape(), [3, 6]);
    }

    #[test]
    fn encode_stage_is_substage_order_sensitive() {
        let policy = Policy::new(tiny_cfg(PolicyVariant::Proposed), 3).unwrap();
        let mut rng = StdRng::seed_from_u64(4);
        let a = Tensor::new(vec![1, 8], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = Tensor::new(vec![1, 8], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let run = |first: &Tensor, second: &Tensor| {
            let mut tape = Tape::new();
            let bound = policy.bind(&mut tape);
            let t1 = tape.leaf(first.clone());
            let t2 = tape.leaf(second.clone());
            let z = policy.encode_stage(&mut tape, &bound, &[t1, t2]).unwrap();
            tape.value(z).data().to_vec()
        };
        let z_ab = run(&a, &b);
        let z_ba = run(&b, &a);
        let diff: f64 = z_ab
            .iter()
            .zip(&z_ba)
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-8, "position embeddings should break symmetry");
    }

    #[test]
    fn update_state_keeps_dimension_and_distinguishes_inputs() {
        let policy = Policy::new(tiny_cfg(PolicyVariant::Proposed), 5).unwrap();
        let mut rng = StdRng::seed_from_u64(6);
        let mut distinct = 0;
        for _ in 0..100 {
            let mut tape = Tape::new();
            let bound = policy.bind(&mut tape);
            let s0 = policy.initial_state(&mut tape, 1);
            let z1 = tape.leaf(Tensor::new(
                vec![1, 6],
                (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ));
            let z2 = tape.leaf(Tensor::new(
                vec![1, 6],
                (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ));
            let s1 = policy.update_state(&mut tape, &bound, z1, s0).unwrap();
            let s2 = policy.update_state(&mut tape, &bound, z2, s0).unwrap();
            assert_eq!(tape.value(s1.h).shape(), [1, 8]);
            assert_eq!(tape.value(s2.h).shape(), [1, 8]);
            if tape.value(s1.h).data() != tape.value(s2.h).data() {
                distinct += 1;
            }
        }
        assert_eq!(distinct, 100);
    }

    #[test]
    fn emitted_configs_satisfy_constraints() {
        let policy = Policy::new(tiny_cfg(PolicyVariant::Proposed), 7).unwrap();
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..100 {
            let mut tape = Tape::new();
            let bound = policy.bind(&mut tape);
            let state = PolicyState {
                h: tape.leaf(Tensor::new(
                    vec![2, 8],
                    (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                )),
                c: tape.leaf(Tensor::zeros(vec![2, 8])),
            };
            let config = policy.next_config(&mut tape, &bound, state).unwrap();
            for bi in 0..2 {
                let sc = policy.extract_config(&tape, &config, bi, 1).unwrap();
                let power: f64 = sc.w.iter().map(|x| x.norm_sqr()).sum();
                assert!((power - 1.0).abs() <= 1e-12);
                for per_l in &sc.coeffs {
                    for c in per_l {
                        let n: f64 = c.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
                        assert!((n - 1.0).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn radial_projection_preserves_direction() {
        let policy = Policy::new(tiny_cfg(PolicyVariant::DigitalOnly), 9).unwrap();
        let mut tape = Tape::new();
        let raw_data: Vec<f64> = vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let raw = tape.leaf(Tensor::new(vec![1, 8], raw_data));
        let config = policy.project_config(&mut tape, raw).unwrap();
        let w = tape.value(config.w).data();
        assert!((w[0] - 1.0).abs() < 1e-15);
        assert!(w[1..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn initial_config_satisfies_constraints_and_is_deterministic() {
        let policy = Policy::new(tiny_cfg(PolicyVariant::Proposed), 10).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let bound = policy.bind(&mut tape);
            let config = policy.initial_config(&mut tape, &bound, 1).unwrap();
            policy.extract_config(&tape, &config, 0, 0).unwrap()
        };
        let a = run();
        let b = run();
        let power: f64 = a.w.iter().map(|x| x.norm_sqr()).sum();
        assert!((power - 1.0).abs() <= 1e-12);
        assert_eq!(a.w, b.w);
    }

    #[test]
    fn estimate_position_is_two_dimensional_and_zero_for_zero_params() {
        let mut policy = Policy::new(tiny_cfg(PolicyVariant::Proposed), 11).unwrap();
        for i in 0..policy.params.len() {
            let name = policy.params.get(i).name.clone();
            if name.starts_with("loc.") {
                policy.params.get_mut(i).value.data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let bound = policy.bind(&mut tape);
        let state = PolicyState {
            h: tape.leaf(Tensor::new(vec![1, 8], vec![0.5; 8])),
            c: tape.leaf(Tensor::zeros(vec![1, 8])),
        };
        let p = policy.estimate_position(&mut tape, &bound, state).unwrap();
        assert_eq!(tape.value(p).shape(), [1, 2]);
        assert_eq!(tape.value(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn episode_produces_one_estimate_per_stage() {
        for variant in [PolicyVariant::Proposed, PolicyVariant::DigitalOnly] {
            let policy = Policy::new(tiny_cfg(variant), 12).unwrap();
            let batch = tiny_batch(3, 13);
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let noise = sample_episode_noise(3, 4, 2, 2, &mut rng);
            let mut tape = Tape::new();
            let bound = policy.bind(&mut tape);
            let out = policy
                .run_episode(&mut tape, &bound, &batch, 0.1, &noise, true)
                .unwrap();
            assert_eq!(out.estimates.len(), 2);
            for est in &out.estimates {
                assert_eq!(tape.value(*est).shape(), [3, 2]);
            }
            let configs = out.configs.unwrap();
            assert_eq!(configs.len(), 2);
            assert_eq!(configs[0].len(), 3);
        }
    }

    #[test]
    fn single_stage_episode_never_calls_next_config() {
        let mut cfg = tiny_cfg(PolicyVariant::Proposed);
        cfg.stages = 1;
        let policy = Policy::new(cfg, 15).unwrap();
        let batch = tiny_batch(2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = sample_episode_noise(2, 4, 1, 2, &mut rng);
        let mut tape = Tape::new();
        let bound = policy.bind(&mut tape);
        let out = policy
            .run_episode(&mut tape, &bound, &batch, 0.0, &noise, false)
            .unwrap();
        assert_eq!(out.estimates.len(), 1);
    }

    #[test]
    fn noiseless_episode_is_bit_deterministic() {
        let policy = Policy::new(tiny_cfg(PolicyVariant::Proposed), 18).unwrap();
        let batch = tiny_batch(2, 19);
        let noise = sample_episode_noise(2, 4, 2, 2, &mut ChaCha8Rng::seed_from_u64(20));
        let run = || {
            let mut tape = Tape::new();
            let bound = policy.bind(&mut tape);
            let out = policy
                .run_episode(&mut tape, &bound, &batch, 0.0, &noise, false)
                .unwrap();
            out.estimates
                .iter()
                .map(|e| tape.value(*e).data().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn estimates_are_causal_in_the_noise() {
        let policy = Policy::new(tiny_cfg(PolicyVariant::Proposed), 21).unwrap();
        let batch = tiny_batch(2, 22);
        let noise = sample_episode_noise(2, 4, 2, 2, &mut ChaCha8Rng::seed_from_u64(23));
        let mut tampered = noise.clone();
        // Perturb only the final stage's noise.
        for t in tampered.iter_mut().skip(2) {
            for v in t.data_mut() {
                *v += 1.0;
            }
        }
        let run = |nz: &[Tensor]| {
            let mut tape = Tape::new();
            let bound = policy.bind(&mut tape);
            let out = policy
                .run_episode(&mut tape, &bound, &batch, 0.5, nz, false)
                .unwrap();
            out.estimates
                .iter()
                .map(|e| tape.value(*e).data().to_vec())
                .collect::<Vec<_>>()
        };
        let a = run(&noise);
        let b = run(&tampered);
        assert_eq!(a[0], b[0], "stage-1 estimate must ignore future noise");
        assert_ne!(a[1], b[1], "stage-2 estimate should see its own noise");
    }

    #[test]
    fn episode_gradients_match_finite_differences() {
        let policy = Policy::new(tiny_cfg(PolicyVariant::Proposed), 24).unwrap();
        let batch = tiny_batch(2, 25);
        let noise = sample_episode_noise(2, 4, 2, 2, &mut ChaCha8Rng::seed_from_u64(26));
        let betas = [0.5, 0.5];
        let loss_fn = |ps: &ParamSet| {
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape);
            let out = policy
                .run_episode(&mut tape, &bound, &batch, 0.0, &noise, false)
                .unwrap();
            let mut loss: Option<Var> = None;
            for (t, est) in out.estimates.iter().enumerate() {
                let truth = Tensor::new(
                    vec![2, 2],
                    batch.truth.iter().flatten().cloned().collect(),
                );
                let neg = {
                    let mut t2 = truth.clone();
                    for v in t2.data_mut() {
                        *v = -*v;
                    }
                    t2
                };
                let err = tape.add_const(*est, &neg);
                let sq = tape.mul(err, err);
                let s = tape.sum_all(sq);
                let term = tape.scale(s, betas[t] / 2.0 / 100.0);
                loss = Some(match loss {
                    None => term,
                    Some(acc) => tape.add(acc, term),
                });
            }
            let loss = loss.unwrap();
            let grads = tape.backward(loss);
            let analytic: Vec<Tensor> = (0..ps.len())
                .map(|i| grads[bound.var(i).index()].clone())
                .collect();
            (tape.value(loss).item(), analytic)
        };
        let mut rng = StdRng::seed_from_u64(27);
        let report = grad_check(&policy.params, loss_fn, 4, &mut rng);
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn episode_agrees_with_plain_channel_pipeline() {
        use crate::channel::{collect_stage, NoiseModel};
        let policy = Policy::new(tiny_cfg(PolicyVariant::Proposed), 28).unwrap();
        let (geom, grid, basis) = tiny_context();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let scene = scene_from_position([8.0, -14.0], [0.0, 0.0, 10.0], 2, &mut rng).unwrap();
        let batch = EpisodeBatch::prepare(
            std::slice::from_ref(&scene),
            &geom,
            &grid,
            basis,
        )
        .unwrap();
        let noise = sample_episode_noise(1, 4, 2, 2, &mut ChaCha8Rng::seed_from_u64(30));
        let mut tape = Tape::new();
        let bound = policy.bind(&mut tape);
        let out = policy
            .run_episode(&mut tape, &bound, &batch, 0.0, &noise, true)
            .unwrap();
        let configs = out.configs.unwrap();
        let observations = out.observations.unwrap();
        let pilots = vec![vec![Complex64::new(1.0, 0.0); 4]; 2];
        for t in 0..2 {
            let sc = &configs[t][0];
            let expected = collect_stage(
                &scene,
                &sc.w,
                &sc.coeffs,
                &grid,
                &geom,
                &pilots,
                &NoiseModel::noiseless(),
                1.0,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
            let got = &observations[t][0];
            for (a, b) in got.data.iter().zip(&expected.data) {
                assert!((a - b).norm() < 1e-10, "stage {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior() {
        let policy = Policy::new(tiny_cfg(PolicyVariant::Proposed), 31).unwrap();
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
        let dir = tempfile::tempdir().unwrap();
        policy.save(dir.path(), &system, None).unwrap();
        let (loaded, sys2) = Policy::load(dir.path()).unwrap();
        assert_eq!(sys2.subcarriers, 4);
        let batch = tiny_batch(1, 32);
        let noise = sample_episode_noise(1, 4, 2, 2, &mut ChaCha8Rng::seed_from_u64(33));
        let run = |p: &Policy| {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let out = p
                .run_episode(&mut tape, &bound, &batch, 0.0, &noise, false)
                .unwrap();
            tape.value(out.estimates[1]).data().to_vec()
        };
        assert_eq!(run(&policy), run(&loaded));
    }
}
