//! Desk-scale networks: a three-stage spatiotemporal encoder (stride-2
//! spatial conv, temporal mixing conv along the frame axis, leaky ReLU), a
//! mirrored decoder with nearest-neighbor upsampling and a sigmoid output
//! head, and three discriminators — per-frame spatial, whole-clip temporal,
//! and patch-tube temporal (a separate parameter set sharing the temporal
//! architecture).
//!
//! All parameters are stored as dynamic-dim arrays so one walker drives
//! initialization, the optimizer, and checkpoint serialization.

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Discriminator probabilities are clamped inside the open unit interval so
/// every log term stays finite.
pub const PROB_CLAMP: f64 = 1e-7;
/// Spatial downsampling factor of the encoder (three stride-2 stages).
pub const DOWNSAMPLE: usize = 8;

// ---- parameter containers --------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConvLayer<T: Scalar> {
    /// (kh, kw, cin, cout)
    pub weight: ArrayD<T>,
    /// (cout,)
    pub bias: ArrayD<T>,
}

#[derive(Clone, Debug)]
pub struct TemporalLayer<T: Scalar> {
    /// (3, din, dout)
    pub weight: ArrayD<T>,
    /// (dout,)
    pub bias: ArrayD<T>,
}

#[derive(Clone, Debug)]
pub struct Stage<T: Scalar> {
    pub conv: ConvLayer<T>,
    pub temporal: Option<TemporalLayer<T>>,
}

#[derive(Clone, Debug)]
pub struct EncoderParams<T: Scalar> {
    pub stages: Vec<Stage<T>>,
}

#[derive(Clone, Debug)]
pub struct DecoderParams<T: Scalar> {
    pub stages: Vec<Stage<T>>,
    pub head: ConvLayer<T>,
}

#[derive(Clone, Debug)]
pub struct GeneratorParams<T: Scalar> {
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
}

#[derive(Clone, Debug)]
pub struct DiscParams<T: Scalar> {
    pub stages: Vec<Stage<T>>,
    pub head: ConvLayer<T>,
}

fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn init_conv<T: Scalar>(
    rng: &mut ChaCha12Rng,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
) -> ConvLayer<T> {
    let std = (2.0 / (kh * kw * cin) as f64).sqrt();
    let weight = ArrayD::from_shape_fn(IxDyn(&[kh, kw, cin, cout]), |_| {
        T::cast_from(gaussian(rng) * std)
    });
    ConvLayer {
        weight,
        bias: ArrayD::zeros(IxDyn(&[cout])),
    }
}

fn init_temporal<T: Scalar>(rng: &mut ChaCha12Rng, din: usize, dout: usize) -> TemporalLayer<T> {
    let std = (2.0 / (3 * din) as f64).sqrt();
    let weight = ArrayD::from_shape_fn(IxDyn(&[3, din, dout]), |_| {
        T::cast_from(gaussian(rng) * std)
    });
    TemporalLayer {
        weight,
        bias: ArrayD::zeros(IxDyn(&[dout])),
    }
}

impl<T: Scalar> EncoderParams<T> {
    /// Channels in -> 16 -> 32 -> feature_dim, each stage halving H and W.
    pub fn init(rng: &mut ChaCha12Rng, in_channels: usize, feature_dim: usize) -> Self {
        let widths = [in_channels, 16, 32, feature_dim];
        let stages = (0..3)
            .map(|i| Stage {
                conv: init_conv(rng, 3, 3, widths[i], widths[i + 1]),
                temporal: Some(init_temporal(rng, widths[i + 1], widths[i + 1])),
            })
            .collect();
        EncoderParams { stages }
    }
}

impl<T: Scalar> DecoderParams<T> {
    pub fn init(rng: &mut ChaCha12Rng, feature_dim: usize, out_channels: usize) -> Self {
        let widths = [feature_dim, 32, 16, 8];
        let stages = (0..3)
            .map(|i| Stage {
                conv: init_conv(rng, 3, 3, widths[i], widths[i + 1]),
                temporal: Some(init_temporal(rng, widths[i + 1], widths[i + 1])),
            })
            .collect();
        DecoderParams {
            stages,
            head: init_conv(rng, 3, 3, 8, out_channels),
        }
    }
}

impl<T: Scalar> GeneratorParams<T> {
    pub fn init(rng: &mut ChaCha12Rng, channels: usize, feature_dim: usize) -> Self {
        GeneratorParams {
            encoder: EncoderParams::init(rng, channels, feature_dim),
            decoder: DecoderParams::init(rng, feature_dim, channels),
        }
    }
}

impl<T: Scalar> DiscParams<T> {
    /// `temporal = true` builds the spatiotemporal variant (whole clips and
    /// patch tubes); `false` the per-frame spatial one.
    pub fn init(rng: &mut ChaCha12Rng, in_channels: usize, temporal: bool) -> Self {
        let widths = [in_channels, 8, 16, 16];
        let stages = (0..3)
            .map(|i| Stage {
                conv: init_conv(rng, 3, 3, widths[i], widths[i + 1]),
                temporal: temporal.then(|| init_temporal(rng, widths[i + 1], widths[i + 1])),
            })
            .collect();
        DiscParams {
            stages,
            head: init_conv(rng, 1, 1, 16, 1),
        }
    }

    /// Pin the output to exactly 0.5 by zeroing every tensor (zero logits
    /// through the sigmoid).
    pub fn zero(&mut self) {
        for stage in &mut self.stages {
            stage.conv.weight.fill(T::zero());
            stage.conv.bias.fill(T::zero());
            if let Some(t) = stage.temporal.as_mut() {
                t.weight.fill(T::zero());
                t.bias.fill(T::zero());
            }
        }
        self.head.weight.fill(T::zero());
        self.head.bias.fill(T::zero());
    }
}

// ---- parameter walking ------------------------------------------------------

/// Visit every tensor with a stable hierarchical name; the visit order is
/// the serialization and optimizer-slot order.
pub trait ParamWalk<T: Scalar> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<T>));
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<T>));
}

impl<T: Scalar> ParamWalk<T> for ConvLayer<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T: Scalar> ParamWalk<T> for TemporalLayer<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T: Scalar> ParamWalk<T> for Stage<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<T>)) {
        self.conv.walk(&format!("{prefix}.conv"), f);
        if let Some(t) = &self.temporal {
            t.walk(&format!("{prefix}.temporal"), f);
        }
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<T>)) {
        self.conv.walk_mut(&format!("{prefix}.conv"), f);
        if let Some(t) = &mut self.temporal {
            t.walk_mut(&format!("{prefix}.temporal"), f);
        }
    }
}

macro_rules! walk_stages {
    ($ty:ident) => {
        impl<T: Scalar> ParamWalk<T> for $ty<T> {
            fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<T>)) {
                for (i, s) in self.stages.iter().enumerate() {
                    s.walk(&format!("{prefix}.stage{i}"), f);
                }
                $ty::<T>::walk_extra(self, prefix, f);
            }
            fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<T>)) {
                for (i, s) in self.stages.iter_mut().enumerate() {
                    s.walk_mut(&format!("{prefix}.stage{i}"), f);
                }
                $ty::<T>::walk_extra_mut(self, prefix, f);
            }
        }
    };
}

impl<T: Scalar> EncoderParams<T> {
    fn walk_extra(&self, _prefix: &str, _f: &mut dyn FnMut(String, &ArrayD<T>)) {}
    fn walk_extra_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut ArrayD<T>)) {}
}
impl<T: Scalar> DecoderParams<T> {
    fn walk_extra(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<T>)) {
        self.head.walk(&format!("{prefix}.head"), f);
    }
    fn walk_extra_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<T>)) {
        self.head.walk_mut(&format!("{prefix}.head"), f);
    }
}
impl<T: Scalar> DiscParams<T> {
    fn walk_extra(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<T>)) {
        self.head.walk(&format!("{prefix}.head"), f);
    }
    fn walk_extra_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<T>)) {
        self.head.walk_mut(&format!("{prefix}.head"), f);
    }
}

walk_stages!(EncoderParams);
walk_stages!(DecoderParams);
walk_stages!(DiscParams);

impl<T: Scalar> ParamWalk<T> for GeneratorParams<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<T>)) {
        self.encoder.walk(&format!("{prefix}.encoder"), f);
        self.decoder.walk(&format!("{prefix}.decoder"), f);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<T>)) {
        self.encoder.walk_mut(&format!("{prefix}.encoder"), f);
        self.decoder.walk_mut(&format!("{prefix}.decoder"), f);
    }
}

// ---- tape insertion ---------------------------------------------------------

/// Tape handles for one parameter set, in walk order.
pub struct TapeParams {
    pub vars: Vec<Var>,
    pub names: Vec<String>,
}

/// Insert every tensor of `params` into the tape as leaves.
pub fn insert_params<T: Scalar, P: ParamWalk<T>>(
    tape: &mut Tape<T>,
    params: &P,
    prefix: &str,
    trainable: bool,
) -> TapeParams {
    let mut vars = Vec::new();
    let mut names = Vec::new();
    params.walk(prefix, &mut |name, tensor| {
        vars.push(tape.leaf(tensor.clone(), trainable));
        names.push(name);
    });
    TapeParams { vars, names }
}

/// Collect gradients in the same order as [`insert_params`]; zero where a
/// parameter did not participate.
pub fn collect_grads<T: Scalar, P: ParamWalk<T>>(
    tape: &Tape<T>,
    params: &P,
    handles: &TapeParams,
) -> Vec<ArrayD<T>> {
    let mut shapes = Vec::new();
    params.walk("", &mut |_, tensor| shapes.push(tensor.raw_dim()));
    handles
        .vars
        .iter()
        .zip(shapes)
        .map(|(&v, shape)| match tape.grad(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(shape),
        })
        .collect()
}

// ---- forward passes ---------------------------------------------------------

struct StageVars {
    conv_w: Var,
    conv_b: Var,
    temporal: Option<(Var, Var)>,
}

fn stage_vars(handles: &TapeParams, cursor: &mut usize, has_temporal: bool) -> StageVars {
    let conv_w = handles.vars[*cursor];
    let conv_b = handles.vars[*cursor + 1];
    *cursor += 2;
    let temporal = has_temporal.then(|| {
        let t = (handles.vars[*cursor], handles.vars[*cursor + 1]);
        *cursor += 2;
        t
    });
    StageVars {
        conv_w,
        conv_b,
        temporal,
    }
}

fn run_stage<T: Scalar>(tape: &mut Tape<T>, x: Var, sv: &StageVars, stride: usize) -> Var {
    let mut x = tape.conv2d(x, sv.conv_w, stride, 1);
    x = tape.add_channel_bias(x, sv.conv_b);
    if let Some((tw, tb)) = sv.temporal {
        x = tape.temporal_conv(x, tw);
        x = tape.add_channel_bias(x, tb);
    }
    tape.leaky_relu(x, T::cast_from(LEAKY_SLOPE))
}

/// Encoder forward: (N, H, W, C) -> (N, H/8, W/8, d).
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    clip: Var,
    params: &EncoderParams<T>,
    handles: &TapeParams,
) -> Result<Var> {
    let shape = tape.value(clip).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("encode expects NHWC, got {shape:?}")));
    }
    if shape[1] % DOWNSAMPLE != 0 || shape[2] % DOWNSAMPLE != 0 {
        return Err(Error::Shape(format!(
            "frame size {}x{} not divisible by the downsampling factor {DOWNSAMPLE}",
            shape[1], shape[2]
        )));
    }
    let mut cursor = 0;
    let mut x = clip;
    for stage in &params.stages {
        let sv = stage_vars(handles, &mut cursor, stage.temporal.is_some());
        x = run_stage(tape, x, &sv, 2);
    }
    Ok(x)
}

/// Decoder forward: (N, h, w, d) -> (N, 8h, 8w, C), values in [0, 1].
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    params: &DecoderParams<T>,
    handles: &TapeParams,
) -> Result<Var> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("decode expects NHWC, got {shape:?}")));
    }
    let mut cursor = 0;
    let mut x = features;
    for stage in &params.stages {
        let sv = stage_vars(handles, &mut cursor, stage.temporal.is_some());
        x = run_stage(tape, x, &sv, 1);
        x = tape.upsample2x(x);
    }
    let head_w = handles.vars[cursor];
    let head_b = handles.vars[cursor + 1];
    let mut out = tape.conv2d(x, head_w, 1, 1);
    out = tape.add_channel_bias(out, head_b);
    Ok(tape.sigmoid(out))
}

/// Offset of decoder handles when a full generator was inserted as one
/// parameter set: the encoder occupies the first `encoder_len` vars.
pub fn generator_split(params: &GeneratorParams<impl Scalar>) -> usize {
    let mut count = 0;
    params.encoder.walk("", &mut |_, _| count += 1);
    count
}

/// Shared discriminator trunk: conv stack, optional temporal mixing, 1x1
/// head, global average pooling, sigmoid, clamp into the open interval.
pub fn disc_forward<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    params: &DiscParams<T>,
    handles: &TapeParams,
) -> Result<Var> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "discriminator expects NHWC, got {shape:?}"
        )));
    }
    let mut cursor = 0;
    let mut x = input;
    for stage in &params.stages {
        let sv = stage_vars(handles, &mut cursor, stage.temporal.is_some());
        x = run_stage(tape, x, &sv, 2);
    }
    let head_w = handles.vars[cursor];
    let head_b = handles.vars[cursor + 1];
    let mut out = tape.conv2d(x, head_w, 1, 0);
    out = tape.add_channel_bias(out, head_b);
    let logit = tape.mean_all(out);
    let prob = tape.sigmoid(logit);
    let clamp = T::cast_from(PROB_CLAMP);
    Ok(tape.clamp(prob, clamp, T::one() - clamp))
}

/// Per-frame spatial discrimination, batched: same trunk as
/// [`disc_forward`] but pooled per frame, returning an (N,) probability
/// vector. The parameter set must have no temporal layers, so frames stay
/// independent and the result matches N separate single-frame passes.
pub fn disc_forward_per_frame<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    params: &DiscParams<T>,
    handles: &TapeParams,
) -> Result<Var> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "discriminator expects NHWC, got {shape:?}"
        )));
    }
    debug_assert!(
        params.stages.iter().all(|s| s.temporal.is_none()),
        "per-frame scoring requires a frame-independent trunk"
    );
    let mut cursor = 0;
    let mut x = input;
    for stage in &params.stages {
        let sv = stage_vars(handles, &mut cursor, stage.temporal.is_some());
        x = run_stage(tape, x, &sv, 2);
    }
    let head_w = handles.vars[cursor];
    let head_b = handles.vars[cursor + 1];
    let mut out = tape.conv2d(x, head_w, 1, 0);
    out = tape.add_channel_bias(out, head_b);
    let logits = tape.mean_per_frame(out);
    let probs = tape.sigmoid(logits);
    let clamp = T::cast_from(PROB_CLAMP);
    Ok(tape.clamp(probs, clamp, T::one() - clamp))
}

// ---- patches and masking ----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_h: usize,
    pub patch_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_h: usize, patch_w: usize) -> Result<Self> {
        if patch_h == 0 || patch_w == 0 || height % patch_h != 0 || width % patch_w != 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} frames cannot be tiled exactly by {patch_h}x{patch_w} patches"
            )));
        }
        Ok(PatchGrid {
            patch_h,
            patch_w,
            grid_h: height / patch_h,
            grid_w: width / patch_w,
        })
    }

    pub fn tiles(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Row-major non-overlapping patch tubes; concatenating them reconstructs
/// the clip exactly.
pub fn extract_patch_tubes(frames: &Array4<f32>, grid: &PatchGrid) -> Vec<Array4<f32>> {
    let mut tubes = Vec::with_capacity(grid.tiles());
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            let y0 = gy * grid.patch_h;
            let x0 = gx * grid.patch_w;
            tubes.push(
                frames
                    .slice(ndarray::s![
                        ..,
                        y0..y0 + grid.patch_h,
                        x0..x0 + grid.patch_w,
                        ..
                    ])
                    .to_owned(),
            );
        }
    }
    tubes
}

/// Zero out `floor(ratio * tiles)` patches chosen uniformly without
/// replacement; the same patch set is masked in every frame. Returns the
/// masked clip and the grid bitmap of masked tiles.
pub fn mask_patches(
    frames: &Array4<f32>,
    grid: &PatchGrid,
    ratio: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(Array4<f32>, ndarray::Array2<u8>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Param(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let tiles = grid.tiles();
    let k = (ratio * tiles as f64).floor() as usize;
    // partial Fisher-Yates over tile indices
    let mut order: Vec<usize> = (0..tiles).collect();
    for i in 0..k {
        let j = i + rng.gen_range(0..(tiles - i) as u64) as usize;
        order.swap(i, j);
    }
    let mut bitmap = ndarray::Array2::<u8>::zeros((grid.grid_h, grid.grid_w));
    let mut out = frames.clone();
    for &tile in order.iter().take(k) {
        let gy = tile / grid.grid_w;
        let gx = tile % grid.grid_w;
        bitmap[[gy, gx]] = 1;
        out.slice_mut(ndarray::s![
            ..,
            gy * grid.patch_h..(gy + 1) * grid.patch_h,
            gx * grid.patch_w..(gx + 1) * grid.patch_w,
            ..
        ])
        .fill(0.0);
    }
    Ok((out, bitmap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use ndarray::Array4;

    fn clip_of(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = rng_for(seed, "nets-test", &[]);
        Array4::from_shape_fn(shape, |_| rng.gen_range(0.0..1.0f32))
    }

    fn forward_encode(
        params: &EncoderParams<f32>,
        clip: &Array4<f32>,
    ) -> Result<ndarray::ArrayD<f32>> {
        let mut tape = Tape::<f32>::new(false);
        let cv = tape.constant(clip.clone().into_dyn());
        let h = insert_params(&mut tape, params, "enc", false);
        let f = encode(&mut tape, cv, params, &h)?;
        Ok(tape.value(f).clone())
    }

    #[test]
    fn encoder_shape_contract() {
        let mut rng = rng_for(1, "nets-test", &[]);
        let params = EncoderParams::<f32>::init(&mut rng, 1, 32);
        let clip = clip_of((16, 64, 64, 1), 2);
        let f = forward_encode(&params, &clip).unwrap();
        assert_eq!(f.shape(), &[16, 8, 8, 32]);
    }

    #[test]
    fn encoder_rejects_indivisible_input() {
        let mut rng = rng_for(3, "nets-test", &[]);
        let params = EncoderParams::<f32>::init(&mut rng, 1, 8);
        let clip = clip_of((2, 60, 64, 1), 4);
        assert!(matches!(
            forward_encode(&params, &clip),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let mut rng = rng_for(5, "nets-test", &[]);
        let params = EncoderParams::<f32>::init(&mut rng, 1, 8);
        let clip = Array4::<f32>::zeros((2, 16, 16, 1));
        let f = forward_encode(&params, &clip).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_deterministic() {
        let mut rng = rng_for(6, "nets-test", &[]);
        let params = EncoderParams::<f32>::init(&mut rng, 1, 16);
        let clip = clip_of((4, 32, 32, 1), 7);
        let a = forward_encode(&params, &clip).unwrap();
        let b = forward_encode(&params, &clip).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decoder_round_trip_shape_and_range() {
        let mut rng = rng_for(8, "nets-test", &[]);
        let gen = GeneratorParams::<f32>::init(&mut rng, 1, 16);
        let clip = clip_of((4, 32, 32, 1), 9);
        let mut tape = Tape::<f32>::new(false);
        let cv = tape.constant(clip.clone().into_dyn());
        let eh = insert_params(&mut tape, &gen.encoder, "enc", false);
        let f = encode(&mut tape, cv, &gen.encoder, &eh).unwrap();
        let dh = insert_params(&mut tape, &gen.decoder, "dec", false);
        let out = decode(&mut tape, f, &gen.decoder, &dh).unwrap();
        let val = tape.value(out);
        assert_eq!(val.shape(), clip.shape());
        assert!(val.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn gradient_reaches_input_through_decode_quantize_encode() {
        // tiny f64 model; straight-through bridges the quantizer
        let mut rng = rng_for(10, "nets-test", &[]);
        let gen = GeneratorParams::<f64>::init(&mut rng, 1, 4);
        let cb = crate::cdc::Codebook::<f64>::init(4, 4, &mut rng);
        let pos = crate::cdc::PositionalTable::<f64>::init(2, 4, &mut rng);
        let clip = Array4::from_shape_fn((2, 8, 8, 1), |_| rng.gen_range(0.2..0.8));

        // base pass: real quantization wrapped in the straight-through node
        let mut tape = Tape::<f64>::new(false);
        let cv = tape.leaf(clip.clone().into_dyn(), true);
        let eh = insert_params(&mut tape, &gen.encoder, "enc", false);
        let f = encode(&mut tape, cv, &gen.encoder, &eh).unwrap();
        let pv = tape.constant(pos.table.clone());
        let g = tape.add_temporal_pos(f, pv);
        let f4: ndarray::Array4<f64> = tape.value(f).clone().into_dimensionality().unwrap();
        let q = crate::cdc::quantize(&f4.view(), &cb, &pos).unwrap();
        let qv = tape.straight_through(g, q.quantized.clone().into_dyn());
        let dh = insert_params(&mut tape, &gen.decoder, "dec", false);
        let out = decode(&mut tape, qv, &gen.decoder, &dh).unwrap();
        let loss = tape.mean_all(out);
        tape.backward(loss);
        let grad = tape.grad(cv).cloned().expect("input gradient");

        // finite differences through the declared contract: the quantizer
        // behaves as (F + P) plus the frozen offset captured at the base
        let offset = &q.quantized.into_dyn() - tape.value(g);
        let surrogate = |c: &Array4<f64>| -> f64 {
            let mut t = Tape::<f64>::new(false);
            let cv = t.constant(c.clone().into_dyn());
            let eh = insert_params(&mut t, &gen.encoder, "enc", false);
            let f = encode(&mut t, cv, &gen.encoder, &eh).unwrap();
            let pv = t.constant(pos.table.clone());
            let g = t.add_temporal_pos(f, pv);
            let off = t.constant(offset.clone());
            let qv = t.add(g, off);
            let dh = insert_params(&mut t, &gen.decoder, "dec", false);
            let out = decode(&mut t, qv, &gen.decoder, &dh).unwrap();
            let loss = t.mean_all(out);
            t.scalar_value(loss)
        };
        // small step: leaky-ReLU kinks inside the decoder bound FD accuracy
        let flat: Vec<f64> = clip.iter().copied().collect();
        for idx in [5usize, 37, 100] {
            let fd = crate::util::central_diff(
                |x| {
                    let c = Array4::from_shape_vec(clip.dim(), x.to_vec()).unwrap();
                    surrogate(&c)
                },
                &flat,
                idx,
                1e-5,
            );
            let got = grad.as_slice().unwrap()[idx];
            assert!(
                crate::util::rel_err(got, fd) <= 1e-3,
                "idx {idx}: fd {fd} vs {got}"
            );
        }
    }

    #[test]
    fn disc_outputs_live_in_clamped_interval() {
        let mut rng = rng_for(11, "nets-test", &[]);
        let disc = DiscParams::<f32>::init(&mut rng, 1, true);
        let clip = clip_of((4, 16, 16, 1), 12);
        let mut tape = Tape::<f32>::new(false);
        let cv = tape.constant(clip.into_dyn());
        let h = insert_params(&mut tape, &disc, "d", false);
        let p = disc_forward(&mut tape, cv, &disc, &h).unwrap();
        let v = tape.scalar_value(p);
        assert!(v > 0.0 && v < 1.0);
        // saturated logits stay inside the clamp
        let mut big = disc;
        big.head.bias.fill(1e9);
        let mut tape = Tape::<f32>::new(false);
        let cv = tape.constant(clip_of((4, 16, 16, 1), 13).into_dyn());
        let h = insert_params(&mut tape, &big, "d", false);
        let p = disc_forward(&mut tape, cv, &big, &h).unwrap();
        let v = tape.scalar_value(p);
        assert!(v <= 1.0 - PROB_CLAMP as f32 && v >= PROB_CLAMP as f32);
    }

    #[test]
    fn zeroed_disc_scores_half_exactly() {
        let mut rng = rng_for(14, "nets-test", &[]);
        let mut disc = DiscParams::<f64>::init(&mut rng, 1, false);
        disc.zero();
        let frame = Array4::from_shape_fn((1, 16, 16, 1), |_| rng.gen_range(0.0..1.0));
        let mut tape = Tape::<f64>::new(false);
        let cv = tape.constant(frame.into_dyn());
        let h = insert_params(&mut tape, &disc, "d", false);
        let p = disc_forward(&mut tape, cv, &disc, &h).unwrap();
        assert_eq!(tape.scalar_value(p), 0.5);
    }

    #[test]
    fn one_by_one_grid_tube_scores_like_the_clip() {
        let mut rng = rng_for(15, "nets-test", &[]);
        let disc = DiscParams::<f32>::init(&mut rng, 1, true);
        let clip = clip_of((4, 16, 16, 1), 16);
        let grid = PatchGrid::new(16, 16, 16, 16).unwrap();
        let tubes = extract_patch_tubes(&clip, &grid);
        assert_eq!(tubes.len(), 1);
        let score = |frames: &Array4<f32>| {
            let mut tape = Tape::<f32>::new(false);
            let cv = tape.constant(frames.clone().into_dyn());
            let h = insert_params(&mut tape, &disc, "d", false);
            let p = disc_forward(&mut tape, cv, &disc, &h).unwrap();
            tape.scalar_value(p)
        };
        assert_eq!(score(&clip), score(&tubes[0]));
    }

    #[test]
    fn patch_partition_reassembles_exactly() {
        let clip = clip_of((3, 16, 24, 1), 17);
        let grid = PatchGrid::new(16, 24, 8, 8).unwrap();
        assert_eq!(grid.tiles(), 6);
        let tubes = extract_patch_tubes(&clip, &grid);
        let mut rebuilt = Array4::<f32>::zeros(clip.dim());
        for (t, tube) in tubes.iter().enumerate() {
            let gy = t / grid.grid_w;
            let gx = t % grid.grid_w;
            rebuilt
                .slice_mut(ndarray::s![
                    ..,
                    gy * 8..(gy + 1) * 8,
                    gx * 8..(gx + 1) * 8,
                    ..
                ])
                .assign(tube);
        }
        assert_eq!(rebuilt, clip);
    }

    #[test]
    fn grid_arithmetic_112_by_16() {
        let grid = PatchGrid::new(112, 112, 16, 16).unwrap();
        assert_eq!(grid.tiles(), 49);
        assert!(PatchGrid::new(112, 112, 15, 15).is_err());
    }

    #[test]
    fn masking_counts_and_invariance_across_frames() {
        let clip = clip_of((4, 32, 32, 1), 18);
        let grid = PatchGrid::new(32, 32, 8, 8).unwrap(); // 4x4 = 16 tiles
        let (masked, bitmap) = mask_patches(&clip, &grid, 0.4, &mut rng_for(9, "mask", &[])).unwrap();
        assert_eq!(bitmap.iter().filter(|&&b| b == 1).count(), 6); // floor(0.4*16)
        for gy in 0..4 {
            for gx in 0..4 {
                let region = masked.slice(ndarray::s![
                    ..,
                    gy * 8..(gy + 1) * 8,
                    gx * 8..(gx + 1) * 8,
                    ..
                ]);
                if bitmap[[gy, gx]] == 1 {
                    assert!(region.iter().all(|&v| v == 0.0));
                } else {
                    let orig = clip.slice(ndarray::s![
                        ..,
                        gy * 8..(gy + 1) * 8,
                        gx * 8..(gx + 1) * 8,
                        ..
                    ]);
                    assert_eq!(region, orig);
                }
            }
        }
    }

    #[test]
    fn zero_ratio_is_identity() {
        let clip = clip_of((2, 16, 16, 1), 19);
        let grid = PatchGrid::new(16, 16, 8, 8).unwrap();
        let (masked, bitmap) =
            mask_patches(&clip, &grid, 0.0, &mut rng_for(10, "mask", &[])).unwrap();
        assert_eq!(masked, clip);
        assert!(bitmap.iter().all(|&b| b == 0));
    }

    #[test]
    fn mask_selection_is_seeded() {
        let clip = clip_of((2, 32, 32, 1), 20);
        let grid = PatchGrid::new(32, 32, 8, 8).unwrap();
        let (_, a) = mask_patches(&clip, &grid, 0.4, &mut rng_for(3, "mask", &[7])).unwrap();
        let (_, b) = mask_patches(&clip, &grid, 0.4, &mut rng_for(3, "mask", &[7])).unwrap();
        assert_eq!(a, b);
        let (_, c) = mask_patches(&clip, &grid, 0.4, &mut rng_for(3, "mask", &[8])).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_mask_ratio_rejected() {
        let clip = clip_of((2, 16, 16, 1), 21);
        let grid = PatchGrid::new(16, 16, 8, 8).unwrap();
        assert!(matches!(
            mask_patches(&clip, &grid, 1.0, &mut rng_for(0, "mask", &[])),
            Err(Error::Param(_))
        ));
    }
}
