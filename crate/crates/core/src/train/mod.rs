//! The bidirectional training loop: mask, reconstruct across populations,
//! cycle back, discriminate at three granularities, and maintain codebooks
//! and memory banks — alternating discriminator/generator updates with
//! deterministic replay.
//!
//! Randomness discipline: every draw comes from a stream keyed by
//! `(config.seed, purpose, epoch, step, slot)`, so resuming from a
//! checkpoint needs only the epoch counter to reproduce an uninterrupted
//! run bit for bit.

mod checkpoint;
mod optim;

pub use checkpoint::{inspect_checkpoint, load_checkpoint, save_checkpoint, TensorInfo};
pub use optim::AdamState;

use ndarray::{Array1, Array4, ArrayD};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::cdc::{self, Codebook, PositionalTable};
use crate::error::{Error, Result};
use crate::nets::{
    self, decode, disc_forward, encode, insert_params, DiscParams, GeneratorParams, ParamWalk,
    PatchGrid, TapeParams,
};
use crate::syndata::{sample_and_augment, AugmentConfig, ClipClass, Dataset, VideoClip};
use crate::tensor::{Scalar, Tape, Var};
use crate::transport::{self, bank_push, MemoryBank};
use crate::util::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OtSolver {
    Sort,
    Sinkhorn,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    // optimizer and schedule
    pub lr: f64,
    pub weight_decay: f64,
    /// First-moment coefficient (the paper's momentum).
    pub momentum: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub lr_decay_period: usize,
    pub lr_decay_factor: f64,
    /// Clips per step, half normal and half abnormal.
    pub batch_size: usize,
    // loss weights
    pub mask_ratio: f64,
    /// Commitment weight on the encoder-side term.
    pub lambda: f64,
    /// Codebook EMA weight.
    pub omega: f64,
    /// Bank centroid EMA weight.
    pub omega_bank: f64,
    pub w_ot: f64,
    /// Separation hinge margin.
    pub margin: f64,
    pub w_adv: f64,
    // codebook / bank / net dimensions
    pub codebook_size: usize,
    pub feature_dim: usize,
    pub n_max: usize,
    pub bank_size: usize,
    pub patch_size: usize,
    /// Bypass quantization, positional encoding, banks, and transport
    /// losses entirely (ablation switch).
    pub cdc_enabled: bool,
    pub ot_solver: OtSolver,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    // run control
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2.25e-4,
            weight_decay: 1e-3,
            momentum: 0.9,
            beta2: 0.999,
            epochs: 60,
            lr_decay_period: 25,
            lr_decay_factor: 0.1,
            batch_size: 2,
            mask_ratio: 0.4,
            lambda: 0.25,
            omega: 0.01,
            omega_bank: 0.01,
            w_ot: 1.0,
            margin: 10.0,
            w_adv: 0.1,
            codebook_size: 128,
            feature_dim: 32,
            n_max: 64,
            bank_size: 64,
            patch_size: 16,
            cdc_enabled: true,
            ot_solver: OtSolver::Sort,
            sinkhorn_epsilon: 0.05,
            sinkhorn_iters: 200,
            sinkhorn_tol: 1e-6,
            seed: 7,
            checkpoint_interval: 1,
            augment: AugmentConfig::desk_default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.lr_decay_factor <= 0.0 {
            return Err(Error::Config("rates must be positive".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size {} must be even and at least 2 (one clip per class)",
                self.batch_size
            )));
        }
        if self.lr_decay_period == 0 {
            return Err(Error::Config("lr_decay_period must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn pairs_per_step(&self) -> usize {
        self.batch_size / 2
    }
}

/// Learning rate at `epoch`: lr * factor^floor(epoch / period).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_period) as i32)
}

/// Per-step (and per-epoch, averaged) named losses. Transport terms are
/// absent until the memory banks hold enough rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub recon_x: f64,
    pub recon_y: f64,
    pub q_a: f64,
    pub q_b: f64,
    pub dis_a: Option<f64>,
    pub dis_b: Option<f64>,
    pub ot: Option<f64>,
    pub adv_a: f64,
    pub adv_b: f64,
    pub disc_a: f64,
    pub disc_b: f64,
    pub total: f64,
}

impl LossReport {
    pub const KEYS: [&'static str; 12] = [
        "recon_x", "recon_y", "q_a", "q_b", "dis_a", "dis_b", "ot", "adv_a", "adv_b", "disc_a",
        "disc_b", "total",
    ];

    pub fn values(&self) -> [Option<f64>; 12] {
        [
            Some(self.recon_x),
            Some(self.recon_y),
            Some(self.q_a),
            Some(self.q_b),
            self.dis_a,
            self.dis_b,
            self.ot,
            Some(self.adv_a),
            Some(self.adv_b),
            Some(self.disc_a),
            Some(self.disc_b),
            Some(self.total),
        ]
    }

    /// Recompose the total from the reported parts under the declared
    /// weighting; used by the composition invariant.
    pub fn recompose_total(&self, cfg: &TrainConfig) -> f64 {
        let mut total = self.recon_x + self.recon_y;
        if cfg.cdc_enabled {
            total += self.q_a + self.q_b;
            total += self.dis_a.unwrap_or(0.0) + self.dis_b.unwrap_or(0.0);
            if let Some(ot) = self.ot {
                total += cfg.w_ot * transport::ot_hinge(ot, cfg.margin);
            }
        }
        total + cfg.w_adv * (self.adv_a + self.adv_b)
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct ModelState<T: Scalar> {
    pub config: TrainConfig,
    pub phi_a: GeneratorParams<T>,
    pub phi_b: GeneratorParams<T>,
    pub pos_a: PositionalTable<T>,
    pub pos_b: PositionalTable<T>,
    pub codebook_a: Codebook<T>,
    pub codebook_b: Codebook<T>,
    pub disc_spatial: DiscParams<T>,
    pub disc_temporal: DiscParams<T>,
    pub disc_patch: DiscParams<T>,
    pub bank_a: MemoryBank<T>,
    pub bank_b: MemoryBank<T>,
    pub opt_gen: AdamState<T>,
    pub opt_disc: AdamState<T>,
    /// Next epoch to run.
    pub epoch: usize,
}

pub const CHANNELS: usize = 1;

impl<T: Scalar> ModelState<T> {
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let seed = config.seed;
        let phi_a = GeneratorParams::init(&mut rng_for(seed, "init-phi-a", &[]), CHANNELS, d);
        let phi_b = GeneratorParams::init(&mut rng_for(seed, "init-phi-b", &[]), CHANNELS, d);
        let pos_a = PositionalTable::init(config.n_max, d, &mut rng_for(seed, "init-pos-a", &[]));
        let pos_b = PositionalTable::init(config.n_max, d, &mut rng_for(seed, "init-pos-b", &[]));
        let codebook_a = Codebook::init(
            config.codebook_size,
            d,
            &mut rng_for(seed, "init-cb-a", &[]),
        );
        let codebook_b = Codebook::init(
            config.codebook_size,
            d,
            &mut rng_for(seed, "init-cb-b", &[]),
        );
        let disc_spatial =
            DiscParams::init(&mut rng_for(seed, "init-disc-s", &[]), CHANNELS, false);
        let disc_temporal =
            DiscParams::init(&mut rng_for(seed, "init-disc-t", &[]), CHANNELS, true);
        let disc_patch = DiscParams::init(&mut rng_for(seed, "init-disc-p", &[]), CHANNELS, true);
        let bank_a = MemoryBank::new(config.bank_size, d);
        let bank_b = MemoryBank::new(config.bank_size, d);
        let opt_gen = AdamState::new(&gen_param_shapes(&phi_a, &phi_b, &pos_a, &pos_b));
        let opt_disc = AdamState::new(&disc_param_shapes(
            &disc_spatial,
            &disc_temporal,
            &disc_patch,
        ));
        Ok(ModelState {
            config,
            phi_a,
            phi_b,
            pos_a,
            pos_b,
            codebook_a,
            codebook_b,
            disc_spatial,
            disc_temporal,
            disc_patch,
            bank_a,
            bank_b,
            opt_gen,
            opt_disc,
            epoch: 0,
        })
    }

    /// FNV hash over the raw bits of a parameter group; used by the
    /// update-isolation checks.
    pub fn hash_group(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bits: u64| {
            for b in bits.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let mut eat_tensor = |t: &ArrayD<T>| {
            for v in t.iter() {
                eat(v.as_f64().to_bits());
            }
        };
        match group {
            ParamGroup::Generator => {
                self.phi_a.walk("phi_a", &mut |_, t| eat_tensor(t));
                self.phi_b.walk("phi_b", &mut |_, t| eat_tensor(t));
                eat_tensor(&self.pos_a.table);
                eat_tensor(&self.pos_b.table);
            }
            ParamGroup::Discriminators => {
                self.disc_spatial.walk("s", &mut |_, t| eat_tensor(t));
                self.disc_temporal.walk("t", &mut |_, t| eat_tensor(t));
                self.disc_patch.walk("p", &mut |_, t| eat_tensor(t));
            }
            ParamGroup::Codebooks => {
                for cb in [&self.codebook_a, &self.codebook_b] {
                    for v in cb.entries.iter() {
                        eat(v.as_f64().to_bits());
                    }
                    for v in cb.usage_counts.iter() {
                        eat(v.as_f64().to_bits());
                    }
                }
            }
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Generator,
    Discriminators,
    Codebooks,
}

fn gen_param_shapes<T: Scalar>(
    phi_a: &GeneratorParams<T>,
    phi_b: &GeneratorParams<T>,
    pos_a: &PositionalTable<T>,
    pos_b: &PositionalTable<T>,
) -> Vec<ndarray::IxDyn> {
    let mut shapes = Vec::new();
    phi_a.walk("", &mut |_, t| shapes.push(t.raw_dim()));
    phi_b.walk("", &mut |_, t| shapes.push(t.raw_dim()));
    shapes.push(pos_a.table.raw_dim());
    shapes.push(pos_b.table.raw_dim());
    shapes
}

fn disc_param_shapes<T: Scalar>(
    s: &DiscParams<T>,
    t: &DiscParams<T>,
    p: &DiscParams<T>,
) -> Vec<ndarray::IxDyn> {
    let mut shapes = Vec::new();
    s.walk("", &mut |_, x| shapes.push(x.raw_dim()));
    t.walk("", &mut |_, x| shapes.push(x.raw_dim()));
    p.walk("", &mut |_, x| shapes.push(x.raw_dim()));
    shapes
}

// ---- losses ------------------------------------------------------------------

/// Mean absolute difference over all elements.
pub fn recon_loss<T: Scalar>(
    x: &ndarray::ArrayViewD<T>,
    x_r: &ndarray::ArrayViewD<T>,
) -> Result<f64> {
    if x.shape() != x_r.shape() {
        return Err(Error::Shape(format!(
            "recon shapes {:?} vs {:?}",
            x.shape(),
            x_r.shape()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(x_r.iter()) {
        acc += (a.as_f64() - b.as_f64()).abs();
    }
    Ok(acc / x.len() as f64)
}

fn l1_mean_var<T: Scalar>(tape: &mut Tape<T>, target: Var, recon: Var) -> Var {
    let diff = tape.sub(recon, target);
    let a = tape.abs(diff);
    tape.mean_all(a)
}

/// Discriminator probabilities of one clip at the three granularities.
struct ClipScores {
    whole: Var,
    /// (N,) per-frame probabilities.
    frames: Var,
    tubes: Vec<Var>,
}

struct DiscHandles<'a, T: Scalar> {
    spatial: (&'a DiscParams<T>, TapeParams),
    temporal: (&'a DiscParams<T>, TapeParams),
    patch: (&'a DiscParams<T>, TapeParams),
}

fn insert_discs<'a, T: Scalar>(
    tape: &mut Tape<T>,
    spatial: &'a DiscParams<T>,
    temporal: &'a DiscParams<T>,
    patch: &'a DiscParams<T>,
    trainable: bool,
) -> DiscHandles<'a, T> {
    DiscHandles {
        spatial: (
            spatial,
            insert_params(tape, spatial, "disc_spatial", trainable),
        ),
        temporal: (
            temporal,
            insert_params(tape, temporal, "disc_temporal", trainable),
        ),
        patch: (patch, insert_params(tape, patch, "disc_patch", trainable)),
    }
}

fn score_clip<T: Scalar>(
    tape: &mut Tape<T>,
    clip: Var,
    grid: &PatchGrid,
    discs: &DiscHandles<'_, T>,
) -> Result<ClipScores> {
    let whole = disc_forward(tape, clip, discs.temporal.0, &discs.temporal.1)?;
    let frames = nets::disc_forward_per_frame(tape, clip, discs.spatial.0, &discs.spatial.1)?;
    let mut tubes = Vec::with_capacity(grid.tiles());
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            let tube = tape.slice_patch_tube(
                clip,
                gy * grid.patch_h,
                gx * grid.patch_w,
                grid.patch_h,
                grid.patch_w,
            );
            tubes.push(disc_forward(tape, tube, discs.patch.0, &discs.patch.1)?);
        }
    }
    Ok(ClipScores {
        whole,
        frames,
        tubes,
    })
}

/// Sum of log(p) over a score set.
fn sum_log<T: Scalar>(tape: &mut Tape<T>, s: &ClipScores) -> Var {
    let lw = tape.ln(s.whole);
    let lf = tape.ln(s.frames);
    let mut acc = tape.sum_all(lf);
    acc = tape.add(acc, lw);
    for &t in &s.tubes {
        let lt = tape.ln(t);
        acc = tape.add(acc, lt);
    }
    acc
}

/// Sum of log(1 - p) over a score set.
fn sum_log_one_minus<T: Scalar>(tape: &mut Tape<T>, s: &ClipScores) -> Var {
    let one_minus = |tape: &mut Tape<T>, v: Var| {
        let n = tape.neg(v);
        tape.add_scalar(n, T::one())
    };
    let w = one_minus(tape, s.whole);
    let lw = tape.ln(w);
    let f = one_minus(tape, s.frames);
    let lf = tape.ln(f);
    let mut acc = tape.sum_all(lf);
    acc = tape.add(acc, lw);
    for &t in &s.tubes {
        let o = one_minus(tape, t);
        let lt = tape.ln(o);
        acc = tape.add(acc, lt);
    }
    acc
}

/// Non-saturating adversarial pair on a fresh tape, without touching any
/// state: discriminator loss -[log D(real) + log(1 - D(fake))] and generator
/// loss -log D(fake), each summed over whole clip, frames, and patch tubes.
pub fn adv_losses<T: Scalar>(
    fake: &Array4<T>,
    real: &Array4<T>,
    grid: &PatchGrid,
    spatial: &DiscParams<T>,
    temporal: &DiscParams<T>,
    patch: &DiscParams<T>,
) -> Result<(f64, f64)> {
    if fake.dim() != real.dim() {
        return Err(Error::Shape(format!(
            "adversarial shapes {:?} vs {:?}",
            fake.dim(),
            real.dim()
        )));
    }
    let mut tape = Tape::<T>::new(false);
    let discs = insert_discs(&mut tape, spatial, temporal, patch, false);
    let fv = tape.constant(fake.clone().into_dyn());
    let rv = tape.constant(real.clone().into_dyn());
    let fs = score_clip(&mut tape, fv, grid, &discs)?;
    let rs = score_clip(&mut tape, rv, grid, &discs)?;
    let log_real = sum_log(&mut tape, &rs);
    let log_not_fake = sum_log_one_minus(&mut tape, &fs);
    let d_sum = tape.add(log_real, log_not_fake);
    let d_loss = tape.neg(d_sum);
    let g_sum = sum_log(&mut tape, &fs);
    let g_loss = tape.neg(g_sum);
    Ok((
        tape.scalar_value(g_loss).as_f64(),
        tape.scalar_value(d_loss).as_f64(),
    ))
}

// ---- the step -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default)]
pub struct StepOptions {
    pub skip_disc_update: bool,
    pub skip_gen_update: bool,
}

struct PairTrace {
    x_orig: Array4<f32>,
    y_orig: Array4<f32>,
    x_hat: Var,
    y_hat: Var,
    recon_x: Var,
    recon_y: Var,
    q_a: Option<Var>,
    q_b: Option<Var>,
    pooled_a: Option<Var>,
    pooled_b: Option<Var>,
    dis_a: Option<Var>,
    dis_b: Option<Var>,
    ot: Option<Var>,
    ot_raw: Option<f64>,
    indices_a: Option<ndarray::Array3<usize>>,
    indices_b: Option<ndarray::Array3<usize>>,
    shifted_a: Option<Array4<f32>>,
    shifted_b: Option<Array4<f32>>,
}

/// One training step over paired (normal, abnormal) clips.
pub fn train_step(
    state: &mut ModelState<f32>,
    xs: &[Array4<f32>],
    ys: &[Array4<f32>],
    epoch: usize,
    step: usize,
    parallel: bool,
) -> Result<LossReport> {
    train_step_with(state, xs, ys, epoch, step, parallel, StepOptions::default())
}

pub fn train_step_with(
    state: &mut ModelState<f32>,
    xs: &[Array4<f32>],
    ys: &[Array4<f32>],
    epoch: usize,
    step: usize,
    parallel: bool,
    opts: StepOptions,
) -> Result<LossReport> {
    if xs.is_empty() || ys.is_empty() || xs.len() != ys.len() {
        return Err(Error::State(
            "each step needs the same positive number of normal and abnormal clips".into(),
        ));
    }
    let cfg = state.config.clone();
    let pairs = xs.len();
    let seed = cfg.seed;
    let (h, w) = (xs[0].dim().1, xs[0].dim().2);
    let grid = PatchGrid::new(h, w, cfg.patch_size.min(h), cfg.patch_size.min(w))?;

    // phase 1: generator forwards (both directions plus the cycle)
    let mut tape = Tape::<f32>::new(parallel);
    let enc_a = insert_params(&mut tape, &state.phi_a.encoder, "phi_a.encoder", true);
    let dec_a = insert_params(&mut tape, &state.phi_a.decoder, "phi_a.decoder", true);
    let enc_b = insert_params(&mut tape, &state.phi_b.encoder, "phi_b.encoder", true);
    let dec_b = insert_params(&mut tape, &state.phi_b.decoder, "phi_b.decoder", true);
    let pos_a_var = tape.leaf(state.pos_a.table.clone(), cfg.cdc_enabled);
    let pos_b_var = tape.leaf(state.pos_b.table.clone(), cfg.cdc_enabled);

    let mut traces: Vec<PairTrace> = Vec::with_capacity(pairs);
    for p in 0..pairs {
        let x = &xs[p];
        let y = &ys[p];
        let (masked_x, _) = nets::mask_patches(
            x,
            &grid,
            cfg.mask_ratio,
            &mut rng_for(seed, "mask-x", &[epoch as u64, step as u64, p as u64]),
        )?;
        let (masked_y, _) = nets::mask_patches(
            y,
            &grid,
            cfg.mask_ratio,
            &mut rng_for(seed, "mask-y", &[epoch as u64, step as u64, p as u64]),
        )?;

        // first pass: masked input through its own network
        let forward_first = |tape: &mut Tape<f32>,
                             masked: &Array4<f32>,
                             enc: &TapeParams,
                             dec: &TapeParams,
                             enc_p: &nets::EncoderParams<f32>,
                             dec_p: &nets::DecoderParams<f32>,
                             pos_var: Var,
                             cb: &Codebook<f32>|
         -> Result<(Var, Option<(Var, Var, ndarray::Array3<usize>, Array4<f32>)>)> {
            let mv = tape.constant(masked.clone().into_dyn());
            let f = encode(tape, mv, enc_p, enc)?;
            if cfg.cdc_enabled {
                let g = tape.add_temporal_pos(f, pos_var);
                let shifted: Array4<f32> =
                    tape.value(g).clone().into_dimensionality().expect("4-d");
                let q = cdc::quantize_shifted(&shifted.view(), cb)?;
                let fq = tape.straight_through(g, q.quantized.clone().into_dyn());
                // commitment: both terms share one value; only the
                // lambda-weighted encoder side carries gradient
                let qc = tape.constant(q.quantized.into_dyn());
                let diff = tape.sub(g, qc);
                let sq = tape.mul(diff, diff);
                let msq = tape.mean_all(sq);
                let per_pos = tape.scale(msq, cfg.feature_dim as f32);
                let t2 = tape.scale(per_pos, cfg.lambda as f32);
                let t1 = tape.scalar(tape.scalar_value(per_pos));
                let q_loss = tape.add(t1, t2);
                let pooled = tape.mean_positions(fq);
                let out = decode(tape, fq, dec_p, dec)?;
                Ok((out, Some((q_loss, pooled, q.indices, shifted))))
            } else {
                let out = decode(tape, f, dec_p, dec)?;
                Ok((out, None))
            }
        };

        let (x_hat, info_a) = forward_first(
            &mut tape,
            &masked_x,
            &enc_a,
            &dec_a,
            &state.phi_a.encoder,
            &state.phi_a.decoder,
            pos_a_var,
            &state.codebook_a,
        )?;
        let (y_hat, info_b) = forward_first(
            &mut tape,
            &masked_y,
            &enc_b,
            &dec_b,
            &state.phi_b.encoder,
            &state.phi_b.decoder,
            pos_b_var,
            &state.codebook_b,
        )?;

        // cycle: reconstructed clip through the opposite network, unmasked
        let forward_cycle = |tape: &mut Tape<f32>,
                             input: Var,
                             enc: &TapeParams,
                             dec: &TapeParams,
                             enc_p: &nets::EncoderParams<f32>,
                             dec_p: &nets::DecoderParams<f32>,
                             pos_var: Var,
                             cb: &Codebook<f32>|
         -> Result<Var> {
            let f = encode(tape, input, enc_p, enc)?;
            if cfg.cdc_enabled {
                let g = tape.add_temporal_pos(f, pos_var);
                let shifted: Array4<f32> =
                    tape.value(g).clone().into_dimensionality().expect("4-d");
                let q = cdc::quantize_shifted(&shifted.view(), cb)?;
                let fq = tape.straight_through(g, q.quantized.into_dyn());
                decode(tape, fq, dec_p, dec)
            } else {
                decode(tape, f, dec_p, dec)
            }
        };
        let x_r = forward_cycle(
            &mut tape,
            x_hat,
            &enc_b,
            &dec_b,
            &state.phi_b.encoder,
            &state.phi_b.decoder,
            pos_b_var,
            &state.codebook_b,
        )?;
        let y_r = forward_cycle(
            &mut tape,
            y_hat,
            &enc_a,
            &dec_a,
            &state.phi_a.encoder,
            &state.phi_a.decoder,
            pos_a_var,
            &state.codebook_a,
        )?;

        let xo = tape.constant(x.clone().into_dyn());
        let yo = tape.constant(y.clone().into_dyn());
        let recon_x = l1_mean_var(&mut tape, xo, x_r);
        let recon_y = l1_mean_var(&mut tape, yo, y_r);

        // transport terms against the pre-push banks
        let mut trace = PairTrace {
            x_orig: x.clone(),
            y_orig: y.clone(),
            x_hat,
            y_hat,
            recon_x,
            recon_y,
            q_a: None,
            q_b: None,
            pooled_a: None,
            pooled_b: None,
            dis_a: None,
            dis_b: None,
            ot: None,
            ot_raw: None,
            indices_a: None,
            indices_b: None,
            shifted_a: None,
            shifted_b: None,
        };
        if let (Some((qa, pa, idx_a, sh_a)), Some((qb, pb, idx_b, sh_b))) = (info_a, info_b) {
            trace.q_a = Some(qa);
            trace.q_b = Some(qb);
            trace.pooled_a = Some(pa);
            trace.pooled_b = Some(pb);
            trace.indices_a = Some(idx_a);
            trace.indices_b = Some(idx_b);
            trace.shifted_a = Some(sh_a);
            trace.shifted_b = Some(sh_b);
            if state.bank_a.fill >= 1 {
                let c = tape.constant(state.bank_a.centroid.clone().into_dyn());
                let diff = tape.sub(pa, c);
                let sq = tape.mul(diff, diff);
                trace.dis_a = Some(tape.sum_all(sq));
            }
            if state.bank_b.fill >= 1 {
                let c = tape.constant(state.bank_b.centroid.clone().into_dyn());
                let diff = tape.sub(pb, c);
                let sq = tape.mul(diff, diff);
                trace.dis_b = Some(tape.sum_all(sq));
            }
            if state.bank_a.fill >= 2 && state.bank_a.fill == state.bank_b.fill {
                let cur_a: Array1<f32> = tape
                    .value(pa)
                    .clone()
                    .into_dimensionality()
                    .expect("pooled");
                let cur_b: Array1<f32> = tape
                    .value(pb)
                    .clone()
                    .into_dimensionality()
                    .expect("pooled");
                let ot = match cfg.ot_solver {
                    OtSolver::Sort => transport::ot_loss(
                        &state.bank_a,
                        &state.bank_b,
                        &cur_a.view(),
                        &cur_b.view(),
                    )?,
                    OtSolver::Sinkhorn => transport::ot_loss_sinkhorn(
                        &state.bank_a,
                        &state.bank_b,
                        &cur_a.view(),
                        &cur_b.view(),
                        cfg.sinkhorn_epsilon,
                        cfg.sinkhorn_iters,
                        cfg.sinkhorn_tol,
                    )?,
                };
                let ga = ot.grad_current_a.mapv(|v| v as f32).into_dyn();
                let gb = ot.grad_current_b.mapv(|v| v as f32).into_dyn();
                let ot_var =
                    tape.custom_scalar(ot.cost as f32, vec![pa, pb], vec![ga, gb]);
                trace.ot_raw = Some(ot.cost);
                trace.ot = Some(ot_var);
            }
        }
        traces.push(trace);
    }

    // phase 2: discriminator update on detached reconstructions
    let mut disc_a_sum = 0.0;
    let mut disc_b_sum = 0.0;
    {
        let mut dtape = Tape::<f32>::new(parallel);
        let discs = insert_discs(
            &mut dtape,
            &state.disc_spatial,
            &state.disc_temporal,
            &state.disc_patch,
            true,
        );
        let mut total_parts = Vec::new();
        for trace in &traces {
            let fake_x = tape.value(trace.x_hat).clone();
            let fake_y = tape.value(trace.y_hat).clone();
            let fx = dtape.constant(fake_x);
            let fy = dtape.constant(fake_y);
            let ry = dtape.constant(trace.y_orig.clone().into_dyn());
            let rx = dtape.constant(trace.x_orig.clone().into_dyn());
            // direction A: reconstructed abnormal vs real abnormal
            let fs = score_clip(&mut dtape, fx, &grid, &discs)?;
            let rs = score_clip(&mut dtape, ry, &grid, &discs)?;
            let lr_ = sum_log(&mut dtape, &rs);
            let lf = sum_log_one_minus(&mut dtape, &fs);
            let s = dtape.add(lr_, lf);
            let da = dtape.neg(s);
            // direction B: reconstructed normal vs real normal
            let fs = score_clip(&mut dtape, fy, &grid, &discs)?;
            let rs = score_clip(&mut dtape, rx, &grid, &discs)?;
            let lr_ = sum_log(&mut dtape, &rs);
            let lf = sum_log_one_minus(&mut dtape, &fs);
            let s = dtape.add(lr_, lf);
            let db = dtape.neg(s);
            disc_a_sum += dtape.scalar_value(da) as f64;
            disc_b_sum += dtape.scalar_value(db) as f64;
            total_parts.push(dtape.add(da, db));
        }
        if !opts.skip_disc_update {
            let mut total = total_parts[0];
            for &t in &total_parts[1..] {
                total = dtape.add(total, t);
            }
            let total = dtape.scale(total, 1.0 / pairs as f32);
            dtape.backward(total);
            let mut grads = Vec::new();
            grads.extend(nets::collect_grads(&dtape, discs.spatial.0, &discs.spatial.1));
            grads.extend(nets::collect_grads(&dtape, discs.temporal.0, &discs.temporal.1));
            grads.extend(nets::collect_grads(&dtape, discs.patch.0, &discs.patch.1));
            let lr_now = lr_at(epoch, &cfg);
            let mut slots: Vec<&mut ArrayD<f32>> = Vec::new();
            collect_disc_mut(
                &mut state.disc_spatial,
                &mut state.disc_temporal,
                &mut state.disc_patch,
                &mut slots,
            );
            state.opt_disc.apply(
                &mut slots,
                &grads,
                lr_now,
                cfg.momentum,
                cfg.beta2,
                cfg.weight_decay,
            );
        }
    }

    // phase 3: generator objective with the updated discriminators frozen
    let discs_g = insert_discs(
        &mut tape,
        &state.disc_spatial,
        &state.disc_temporal,
        &state.disc_patch,
        false,
    );
    let mut report = LossReport::default();
    let mut gen_total: Option<Var> = None;
    let mut dis_a_acc: Option<f64> = None;
    let mut dis_b_acc: Option<f64> = None;
    let mut ot_acc: Option<f64> = None;
    for trace in &traces {
        let fs_x = score_clip(&mut tape, trace.x_hat, &grid, &discs_g)?;
        let fs_y = score_clip(&mut tape, trace.y_hat, &grid, &discs_g)?;
        let ga_sum = sum_log(&mut tape, &fs_x);
        let adv_a = tape.neg(ga_sum);
        let gb_sum = sum_log(&mut tape, &fs_y);
        let adv_b = tape.neg(gb_sum);

        let mut pair_total = tape.add(trace.recon_x, trace.recon_y);
        if let (Some(qa), Some(qb)) = (trace.q_a, trace.q_b) {
            pair_total = tape.add(pair_total, qa);
            pair_total = tape.add(pair_total, qb);
        }
        if let Some(da) = trace.dis_a {
            pair_total = tape.add(pair_total, da);
        }
        if let Some(db) = trace.dis_b {
            pair_total = tape.add(pair_total, db);
        }
        if let Some(ot) = trace.ot {
            // hinge: w_ot * max(0, margin - ot)
            let n = tape.neg(ot);
            let shifted = tape.add_scalar(n, cfg.margin as f32);
            let hinge = tape.clamp(shifted, 0.0, f32::INFINITY);
            let weighted = tape.scale(hinge, cfg.w_ot as f32);
            pair_total = tape.add(pair_total, weighted);
        }
        let adv_sum = tape.add(adv_a, adv_b);
        let adv_weighted = tape.scale(adv_sum, cfg.w_adv as f32);
        pair_total = tape.add(pair_total, adv_weighted);

        gen_total = Some(match gen_total {
            Some(t) => tape.add(t, pair_total),
            None => pair_total,
        });

        report.recon_x += tape.scalar_value(trace.recon_x) as f64;
        report.recon_y += tape.scalar_value(trace.recon_y) as f64;
        if let Some(qa) = trace.q_a {
            report.q_a += tape.scalar_value(qa) as f64;
        }
        if let Some(qb) = trace.q_b {
            report.q_b += tape.scalar_value(qb) as f64;
        }
        if let Some(da) = trace.dis_a {
            *dis_a_acc.get_or_insert(0.0) += tape.scalar_value(da) as f64;
        }
        if let Some(db) = trace.dis_b {
            *dis_b_acc.get_or_insert(0.0) += tape.scalar_value(db) as f64;
        }
        if let Some(raw) = trace.ot_raw {
            *ot_acc.get_or_insert(0.0) += raw;
        }
        report.adv_a += tape.scalar_value(adv_a) as f64;
        report.adv_b += tape.scalar_value(adv_b) as f64;
    }
    let inv_pairs = 1.0 / pairs as f64;
    report.recon_x *= inv_pairs;
    report.recon_y *= inv_pairs;
    report.q_a *= inv_pairs;
    report.q_b *= inv_pairs;
    report.adv_a *= inv_pairs;
    report.adv_b *= inv_pairs;
    report.dis_a = dis_a_acc.map(|v| v * inv_pairs);
    report.dis_b = dis_b_acc.map(|v| v * inv_pairs);
    report.ot = ot_acc.map(|v| v * inv_pairs);
    report.disc_a = disc_a_sum * inv_pairs;
    report.disc_b = disc_b_sum * inv_pairs;
    // the reported total is the loss composition in f64; the f32 tape value
    // drives gradients only
    report.total = report.recompose_total(&cfg);

    if !opts.skip_gen_update {
        let total = gen_total.expect("at least one pair");
        let total = tape.scale(total, 1.0 / pairs as f32);
        tape.backward(total);
        let mut grads = Vec::new();
        grads.extend(nets::collect_grads(&tape, &state.phi_a.encoder, &enc_a));
        grads.extend(nets::collect_grads(&tape, &state.phi_a.decoder, &dec_a));
        grads.extend(nets::collect_grads(&tape, &state.phi_b.encoder, &enc_b));
        grads.extend(nets::collect_grads(&tape, &state.phi_b.decoder, &dec_b));
        grads.push(match tape.grad(pos_a_var) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(state.pos_a.table.raw_dim()),
        });
        grads.push(match tape.grad(pos_b_var) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(state.pos_b.table.raw_dim()),
        });
        let lr_now = lr_at(epoch, &cfg);
        let mut slots: Vec<&mut ArrayD<f32>> = Vec::new();
        collect_gen_mut(
            &mut state.phi_a,
            &mut state.phi_b,
            &mut state.pos_a,
            &mut state.pos_b,
            &mut slots,
        );
        state.opt_gen.apply(
            &mut slots,
            &grads,
            lr_now,
            cfg.momentum,
            cfg.beta2,
            cfg.weight_decay,
        );
    }

    // phase 4: EMA codebook maintenance, revival, and bank pushes
    if cfg.cdc_enabled {
        for (p, trace) in traces.iter().enumerate() {
            let (idx_a, sh_a) = (
                trace.indices_a.as_ref().expect("cdc"),
                trace.shifted_a.as_ref().expect("cdc"),
            );
            let (idx_b, sh_b) = (
                trace.indices_b.as_ref().expect("cdc"),
                trace.shifted_b.as_ref().expect("cdc"),
            );
            cdc::ema_update(&mut state.codebook_a, idx_a, &sh_a.view(), cfg.omega as f32)?;
            cdc::ema_update(&mut state.codebook_b, idx_b, &sh_b.view(), cfg.omega as f32)?;
            let d = cfg.feature_dim;
            let pool_a = sh_a.to_shape((sh_a.len() / d, d)).expect("reshape");
            let pool_b = sh_b.to_shape((sh_b.len() / d, d)).expect("reshape");
            cdc::revive_dead_entries(
                &mut state.codebook_a,
                &pool_a.view(),
                &mut rng_for(seed, "revive-a", &[epoch as u64, step as u64, p as u64]),
            );
            cdc::revive_dead_entries(
                &mut state.codebook_b,
                &pool_b.view(),
                &mut rng_for(seed, "revive-b", &[epoch as u64, step as u64, p as u64]),
            );
        }
        for trace in &traces {
            let pa: Array1<f32> = tape
                .value(trace.pooled_a.expect("cdc"))
                .clone()
                .into_dimensionality()
                .expect("pooled");
            let pb: Array1<f32> = tape
                .value(trace.pooled_b.expect("cdc"))
                .clone()
                .into_dimensionality()
                .expect("pooled");
            bank_push(&mut state.bank_a, &pa.view(), cfg.omega_bank as f32)?;
            bank_push(&mut state.bank_b, &pb.view(), cfg.omega_bank as f32)?;
        }
    }

    Ok(report)
}

fn collect_gen_mut<'a>(
    phi_a: &'a mut GeneratorParams<f32>,
    phi_b: &'a mut GeneratorParams<f32>,
    pos_a: &'a mut PositionalTable<f32>,
    pos_b: &'a mut PositionalTable<f32>,
    out: &mut Vec<&'a mut ArrayD<f32>>,
) {
    let mut push = |t: &mut ArrayD<f32>| {
        // SAFETY: each tensor is visited exactly once; the walker hands out
        // disjoint &mut borrows that live as long as 'a.
        let ptr: *mut ArrayD<f32> = t;
        out.push(unsafe { &mut *ptr });
    };
    phi_a.walk_mut("", &mut |_, t| push(t));
    phi_b.walk_mut("", &mut |_, t| push(t));
    push(&mut pos_a.table);
    push(&mut pos_b.table);
}

fn collect_disc_mut<'a>(
    s: &'a mut DiscParams<f32>,
    t: &'a mut DiscParams<f32>,
    p: &'a mut DiscParams<f32>,
    out: &mut Vec<&'a mut ArrayD<f32>>,
) {
    let mut push = |x: &mut ArrayD<f32>| {
        let ptr: *mut ArrayD<f32> = x;
        out.push(unsafe { &mut *ptr });
    };
    s.walk_mut("", &mut |_, x| push(x));
    t.walk_mut("", &mut |_, x| push(x));
    p.walk_mut("", &mut |_, x| push(x));
}

// ---- the loop -------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub losses_csv: PathBuf,
    pub final_checkpoint: PathBuf,
    pub epoch_reports: Vec<LossReport>,
}

fn shuffled(indices: &[usize], rng: &mut rand_chacha::ChaCha12Rng) -> Vec<usize> {
    use rand::Rng;
    let mut v = indices.to_vec();
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=(i as u64)) as usize;
        v.swap(i, j);
    }
    v
}

fn format_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.12e}"),
        None => String::new(),
    }
}

/// Train (or resume) on a dataset directory's train split and write
/// `losses.csv` plus periodic checkpoints to `out_dir`.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
    parallel: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let normals = dataset.indices("train", Some(ClipClass::Normal));
    let abnormal_class = match dataset.manifest.config.anomaly {
        crate::syndata::AnomalyKind::Structural => ClipClass::Structural,
        crate::syndata::AnomalyKind::Motion => ClipClass::Motion,
    };
    let abnormals = dataset.indices("train", Some(abnormal_class));
    if normals.is_empty() || abnormals.is_empty() {
        return Err(Error::Config(
            "train split must contain both normal and abnormal clips".into(),
        ));
    }

    let mut state = match resume {
        Some(path) => load_checkpoint(path)?,
        None => ModelState::init(config.clone())?,
    };
    if resume.is_some() {
        // run-length fields may change on resume; everything that affects
        // the replayed computation must not
        let mut comparable = state.config.clone();
        comparable.epochs = config.epochs;
        comparable.checkpoint_interval = config.checkpoint_interval;
        if comparable != *config {
            return Err(Error::Config(
                "resume checkpoint was written with a different configuration".into(),
            ));
        }
        state.config = config.clone();
    }

    let pairs = config.pairs_per_step();
    let steps_per_epoch = normals.len().max(abnormals.len()).div_ceil(pairs);
    let seed = config.seed;

    let csv_path = out_dir.join("losses.csv");
    let mut csv = if state.epoch == 0 {
        let mut s = String::from("epoch,");
        s.push_str(&LossReport::KEYS.join(","));
        s.push('\n');
        s
    } else {
        std::fs::read_to_string(&csv_path)?
    };

    let mut epoch_reports = Vec::new();
    let mut final_ckpt = out_dir.join(format!("checkpoint_ep{:04}.eckp", state.epoch));
    for epoch in state.epoch..config.epochs {
        let order_x = shuffled(&normals, &mut rng_for(seed, "order-x", &[epoch as u64]));
        let order_y = shuffled(&abnormals, &mut rng_for(seed, "order-y", &[epoch as u64]));
        let mut sums = vec![0.0f64; 12];
        let mut counts = vec![0usize; 12];
        for step in 0..steps_per_epoch {
            let mut xs = Vec::with_capacity(pairs);
            let mut ys = Vec::with_capacity(pairs);
            for slot in 0..pairs {
                let xi = order_x[(step * pairs + slot) % order_x.len()];
                let yi = order_y[(step * pairs + slot) % order_y.len()];
                let xa = sample_and_augment(
                    dataset.clip(xi),
                    &config.augment,
                    &mut rng_for(seed, "aug-x", &[epoch as u64, step as u64, slot as u64]),
                    true,
                )?;
                let ya = sample_and_augment(
                    dataset.clip(yi),
                    &config.augment,
                    &mut rng_for(seed, "aug-y", &[epoch as u64, step as u64, slot as u64]),
                    true,
                )?;
                xs.push(xa.frames);
                ys.push(ya.frames);
            }
            let report = train_step(&mut state, &xs, &ys, epoch, step, parallel)?;
            for (i, v) in report.values().into_iter().enumerate() {
                if let Some(v) = v {
                    sums[i] += v;
                    counts[i] += 1;
                }
            }
        }
        let mean = |i: usize| -> Option<f64> {
            (counts[i] > 0).then(|| sums[i] / counts[i] as f64)
        };
        let epoch_report = LossReport {
            recon_x: mean(0).unwrap_or(0.0),
            recon_y: mean(1).unwrap_or(0.0),
            q_a: mean(2).unwrap_or(0.0),
            q_b: mean(3).unwrap_or(0.0),
            dis_a: mean(4),
            dis_b: mean(5),
            ot: mean(6),
            adv_a: mean(7).unwrap_or(0.0),
            adv_b: mean(8).unwrap_or(0.0),
            disc_a: mean(9).unwrap_or(0.0),
            disc_b: mean(10).unwrap_or(0.0),
            total: mean(11).unwrap_or(0.0),
        };
        let cells: Vec<String> = (0..12).map(|i| format_cell(mean(i))).collect();
        csv.push_str(&format!("{},{}\n", epoch, cells.join(",")));
        std::fs::write(&csv_path, &csv)?;
        epoch_reports.push(epoch_report);

        state.epoch = epoch + 1;
        let is_last = epoch + 1 == config.epochs;
        if (epoch + 1) % config.checkpoint_interval == 0 || is_last {
            let path = out_dir.join(format!("checkpoint_ep{:04}.eckp", epoch + 1));
            save_checkpoint(&state, &path)?;
            final_ckpt = path;
        }
    }
    let final_path = out_dir.join("checkpoint_final.eckp");
    std::fs::copy(&final_ckpt, &final_path)?;
    Ok(TrainOutcome {
        losses_csv: csv_path,
        final_checkpoint: final_path,
        epoch_reports,
    })
}

// ---- inference-style forward (shared by eval) -------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Normal-to-abnormal network (phi_a).
    AtoB,
    /// Abnormal-to-normal network (phi_b).
    BtoA,
}

pub struct ForwardOut {
    pub recon: Array4<f32>,
    /// Mean-pooled quantized feature (pooled raw feature if the codebook is
    /// bypassed).
    pub pooled: Array1<f32>,
}

/// Unmasked single-clip forward through one direction's network.
pub fn forward_generator(
    state: &ModelState<f32>,
    clip: &VideoClip,
    direction: Direction,
    parallel: bool,
) -> Result<ForwardOut> {
    let (gen, pos, cb) = match direction {
        Direction::AtoB => (&state.phi_a, &state.pos_a, &state.codebook_a),
        Direction::BtoA => (&state.phi_b, &state.pos_b, &state.codebook_b),
    };
    let mut tape = Tape::<f32>::new(parallel);
    let enc = insert_params(&mut tape, &gen.encoder, "enc", false);
    let dec = insert_params(&mut tape, &gen.decoder, "dec", false);
    let cv = tape.constant(clip.frames.clone().into_dyn());
    let f = encode(&mut tape, cv, &gen.encoder, &enc)?;
    let (latent, pooled) = if state.config.cdc_enabled {
        let pv = tape.constant(pos.table.clone());
        let g = tape.add_temporal_pos(f, pv);
        let shifted: Array4<f32> = tape.value(g).clone().into_dimensionality().expect("4-d");
        let q = cdc::quantize_shifted(&shifted.view(), cb)?;
        let fq = tape.straight_through(g, q.quantized.into_dyn());
        let pooled = tape.mean_positions(fq);
        (fq, pooled)
    } else {
        let pooled = tape.mean_positions(f);
        (f, pooled)
    };
    let out = decode(&mut tape, latent, &gen.decoder, &dec)?;
    let recon: Array4<f32> = tape
        .value(out)
        .clone()
        .into_dimensionality()
        .expect("clip");
    let pooled: Array1<f32> = tape
        .value(pooled)
        .clone()
        .into_dimensionality()
        .expect("pooled");
    Ok(ForwardOut { recon, pooled })
}

/// Raw separation loss between the stored banks, no substitution; used for
/// tracking how far apart the populations have moved.
pub fn bank_separation(state: &ModelState<f32>) -> Option<f64> {
    if state.bank_a.fill < 2 || state.bank_a.fill != state.bank_b.fill {
        return None;
    }
    let a = state.bank_a.valid_rows().mapv(|v| v as f64);
    let b = state.bank_b.valid_rows().mapv(|v| v as f64);
    transport::sort_match(&a.view(), &b.view())
        .ok()
        .map(|m| m.cost)
}
