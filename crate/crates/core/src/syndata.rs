//! Synthetic echo-like video: four bright-walled elliptical chambers beating
//! over a dark background, an atrial septum that may carry a hole
//! (structural anomaly), and optionally weakened right-chamber contraction
//! (motion anomaly). Every clip ships with per-structure interior masks and
//! a contraction-fraction scalar derived from them.
//!
//! Rendering is at 2x supersampling with a box downsample so thin septum
//! walls do not alias, and is a pure function of the clip parameters.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::util::rng_for;

pub const CAVITY: f64 = 0.05;
pub const WALL: f64 = 0.90;
pub const BACKGROUND: f64 = 0.15;
/// Wall band thickness relative to the chamber radius.
const WALL_REL: f64 = 0.16;
/// Septum strip half-width, normalized.
const SEPTUM_HALF_WIDTH: f64 = 0.012;
const VENT_SEPTUM_Y: (f64, f64) = (0.12, 0.48);
const ATRIAL_SEPTUM_Y: (f64, f64) = (0.56, 0.90);
const SEPTUM_X: f64 = 0.5;

/// Chamber order: left ventricle, right ventricle, left atrium, right atrium.
pub const CHAMBER_NAMES: [&str; 4] = ["lv", "rv", "la", "ra"];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClipParams {
    /// Normalized (x, y) centers.
    pub chamber_centers: [(f64, f64); 4],
    /// Normalized semi-axes (rx, ry), each in [0.05, 0.3].
    pub chamber_radii: [(f64, f64); 4],
    /// Frames per cardiac cycle.
    pub beat_period: usize,
    /// Fractional radius modulation per chamber, in [0, 0.5].
    pub contraction_amplitude: [f64; 4],
    /// Per-chamber phase in [0, 2*pi).
    pub phase_offsets: [f64; 4],
    /// Atrial septum gap half-height; 0 means intact.
    pub septum_gap: f64,
    /// Speckle strength in [0, 0.2].
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ClipParams {
    /// Pairwise clearance at maximum dilation, including wall bands and the
    /// septum strip. Must be positive for a renderable clip.
    pub fn validate(&self) -> Result<()> {
        if self.beat_period == 0 {
            return Err(Error::Param("beat_period must be positive".into()));
        }
        for (i, &(rx, ry)) in self.chamber_radii.iter().enumerate() {
            if !(0.05..=0.3).contains(&rx) || !(0.05..=0.3).contains(&ry) {
                return Err(Error::Param(format!(
                    "chamber {i} radii ({rx:.3}, {ry:.3}) outside [0.05, 0.3]"
                )));
            }
        }
        for (i, &a) in self.contraction_amplitude.iter().enumerate() {
            if !(0.0..=0.5).contains(&a) {
                return Err(Error::Param(format!("chamber {i} amplitude {a} outside [0, 0.5]")));
            }
        }
        if !(0.0..=0.2).contains(&self.noise_sigma) {
            return Err(Error::Param(format!(
                "noise_sigma {} outside [0, 0.2]",
                self.noise_sigma
            )));
        }
        // separating-hyperplane bound along the center line: ellipses
        // (including wall bands) are disjoint if the sum of their support
        // extents in that direction stays below the center distance
        let support = |i: usize, ux: f64, uy: f64| {
            let (rx, ry) = self.chamber_radii[i];
            ((rx * ux).powi(2) + (ry * uy).powi(2)).sqrt() * (1.0 + WALL_REL)
        };
        for i in 0..4 {
            for j in i + 1..4 {
                let (xi, yi) = self.chamber_centers[i];
                let (xj, yj) = self.chamber_centers[j];
                let dist = ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
                if dist <= 1e-9 {
                    return Err(Error::Param(format!(
                        "chambers {i} and {j} overlap at maximum dilation"
                    )));
                }
                let (ux, uy) = ((xj - xi) / dist, (yj - yi) / dist);
                if dist - support(i, ux, uy) - support(j, ux, uy) <= 0.0 {
                    return Err(Error::Param(format!(
                        "chambers {i} and {j} overlap at maximum dilation"
                    )));
                }
            }
            // keep chambers clear of the septum strip (x extent only)
            let (cx, _) = self.chamber_centers[i];
            let x_extent = self.chamber_radii[i].0 * (1.0 + WALL_REL);
            if (cx - SEPTUM_X).abs() <= x_extent + SEPTUM_HALF_WIDTH {
                return Err(Error::Param(format!("chamber {i} intersects the septum strip")));
            }
        }
        Ok(())
    }

    /// Radius scale of chamber `c` at frame `t`: 1 at peak dilation,
    /// 1 - amplitude at peak contraction.
    pub fn radius_scale(&self, c: usize, t: usize) -> f64 {
        let theta = 2.0 * std::f64::consts::PI * t as f64 / self.beat_period as f64
            + self.phase_offsets[c];
        1.0 - self.contraction_amplitude[c] * (1.0 - theta.cos()) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipClass {
    Normal,
    Structural,
    Motion,
}

impl std::fmt::Display for ClipClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClipClass::Normal => write!(f, "normal"),
            ClipClass::Structural => write!(f, "structural"),
            ClipClass::Motion => write!(f, "motion"),
        }
    }
}

/// Frame stack in [0, 1], stored (N, H, W, C).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Array4<f32>,
}

impl VideoClip {
    pub fn n_frames(&self) -> usize {
        self.frames.dim().0
    }
    pub fn height(&self) -> usize {
        self.frames.dim().1
    }
    pub fn width(&self) -> usize {
        self.frames.dim().2
    }
    pub fn channels(&self) -> usize {
        self.frames.dim().3
    }
}

#[derive(Clone, Debug)]
pub struct ClipLabel {
    pub class: ClipClass,
    /// Mean fractional area change of the LV mask over complete cycles.
    pub ef_analog: f64,
    /// Per-structure interior masks, (4, N, H, W), disjoint per pixel.
    pub masks: Array4<u8>,
}

/// Fractional area change of the LV analog, recomputed from stored masks:
/// per complete cycle, 1 - min_area / max_area, averaged over cycles.
pub fn ef_from_masks(masks: &Array4<u8>, beat_period: usize) -> f64 {
    let (_, n, _, _) = masks.dim();
    let areas: Vec<f64> = (0..n)
        .map(|t| {
            masks
                .index_axis(ndarray::Axis(0), 0)
                .index_axis(ndarray::Axis(0), t)
                .iter()
                .map(|&v| v as f64)
                .sum()
        })
        .collect();
    let cycles = n / beat_period;
    if cycles == 0 {
        let max = areas.iter().cloned().fold(f64::MIN, f64::max);
        let min = areas.iter().cloned().fold(f64::MAX, f64::min);
        return if max > 0.0 { 1.0 - min / max } else { 0.0 };
    }
    let mut acc = 0.0;
    for k in 0..cycles {
        let window = &areas[k * beat_period..(k + 1) * beat_period];
        let max = window.iter().cloned().fold(f64::MIN, f64::max);
        let min = window.iter().cloned().fold(f64::MAX, f64::min);
        acc += if max > 0.0 { 1.0 - min / max } else { 0.0 };
    }
    acc / cycles as f64
}

/// Render one clip. Frames are (N, H, W, 1) grayscale in [0, 1];
/// deterministic in `params.seed`.
pub fn render_clip(
    params: &ClipParams,
    n_frames: usize,
    size: (usize, usize),
) -> Result<(VideoClip, ClipLabel)> {
    let (h, w) = size;
    if !(32..=256).contains(&h) || !(32..=256).contains(&w) {
        return Err(Error::Param(format!("frame size {h}x{w} outside [32, 256]")));
    }
    if n_frames < params.beat_period {
        return Err(Error::Param(format!(
            "n_frames {} below beat_period {}",
            n_frames, params.beat_period
        )));
    }
    params.validate()?;

    let (h2, w2) = (2 * h, 2 * w);
    let mut frames = Array4::<f32>::zeros((n_frames, h, w, 1));
    let mut masks = Array4::<u8>::zeros((4, n_frames, h, w));
    let mut noise_rng = rng_for(params.seed, "speckle", &[]);

    let gap_center = (ATRIAL_SEPTUM_Y.0 + ATRIAL_SEPTUM_Y.1) / 2.0;
    for t in 0..n_frames {
        let scales: Vec<f64> = (0..4).map(|c| params.radius_scale(c, t)).collect();
        // supersampled luminance
        let mut hi = vec![0.0f64; h2 * w2];
        for (py, row) in hi.chunks_mut(w2).enumerate() {
            let ny = (py as f64 + 0.5) / h2 as f64;
            for (px, out) in row.iter_mut().enumerate() {
                let nx = (px as f64 + 0.5) / w2 as f64;
                *out = shade(params, &scales, nx, ny, gap_center);
            }
        }
        // box downsample + speckle
        for py in 0..h {
            for px in 0..w {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += hi[(2 * py + dy) * w2 + 2 * px + dx];
                    }
                }
                let mut val = acc / 4.0;
                if params.noise_sigma > 0.0 {
                    let g: f64 = gaussian(&mut noise_rng).clamp(-3.0, 3.0);
                    val *= 1.0 + params.noise_sigma * g;
                }
                frames[[t, py, px, 0]] = val.clamp(0.0, 1.0) as f32;
            }
        }
        // interior masks at target resolution
        for c in 0..4 {
            let (cx, cy) = params.chamber_centers[c];
            let (rx, ry) = params.chamber_radii[c];
            let (sx, sy) = (rx * scales[c], ry * scales[c]);
            for py in 0..h {
                let ny = (py as f64 + 0.5) / h as f64;
                for px in 0..w {
                    let nx = (px as f64 + 0.5) / w as f64;
                    let u = (((nx - cx) / sx).powi(2) + ((ny - cy) / sy).powi(2)).sqrt();
                    if u <= 1.0 {
                        masks[[c, t, py, px]] = 1;
                    }
                }
            }
        }
    }

    let ef_analog = ef_from_masks(&masks, params.beat_period);
    let class = classify(params);
    Ok((
        VideoClip { frames },
        ClipLabel {
            class,
            ef_analog,
            masks,
        },
    ))
}

fn shade(params: &ClipParams, scales: &[f64], nx: f64, ny: f64, gap_center: f64) -> f64 {
    // chambers first: interiors and wall bands never overlap across chambers
    for c in 0..4 {
        let (cx, cy) = params.chamber_centers[c];
        let (rx, ry) = params.chamber_radii[c];
        let (sx, sy) = (rx * scales[c], ry * scales[c]);
        let u = (((nx - cx) / sx).powi(2) + ((ny - cy) / sy).powi(2)).sqrt();
        if u <= 1.0 {
            return CAVITY;
        }
        if u <= 1.0 + WALL_REL {
            return WALL;
        }
    }
    if (nx - SEPTUM_X).abs() <= SEPTUM_HALF_WIDTH {
        if (VENT_SEPTUM_Y.0..=VENT_SEPTUM_Y.1).contains(&ny) {
            return WALL;
        }
        if (ATRIAL_SEPTUM_Y.0..=ATRIAL_SEPTUM_Y.1).contains(&ny) {
            if params.septum_gap > 0.0 && (ny - gap_center).abs() <= params.septum_gap {
                return CAVITY; // the hole: blood where wall should be
            }
            return WALL;
        }
    }
    BACKGROUND
}

fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---- generator configuration and labeling --------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Structural,
    Motion,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub anomaly: AnomalyKind,
    pub frames: usize,
    pub size: usize,
    pub beat_period: usize,
    pub seed: u64,
    /// Structural label threshold on the septum gap (normalized units).
    pub structural_gap_threshold: f64,
    /// Motion label threshold: right-chamber amplitude at or below this
    /// fraction of the normal-population mean amplitude.
    pub motion_amp_ratio: f64,
    /// Mean contraction amplitude of the normal population (used with
    /// `motion_amp_ratio` to place the labeling threshold).
    pub normal_amp_mean: f64,
}

impl GeneratorConfig {
    pub fn desk_default(anomaly: AnomalyKind) -> Self {
        GeneratorConfig {
            n_normal: 125,
            n_abnormal: 125,
            anomaly,
            frames: 16,
            size: 64,
            beat_period: 16,
            seed: 11,
            structural_gap_threshold: 0.02,
            motion_amp_ratio: 0.5,
            normal_amp_mean: 0.25,
        }
    }

    pub fn motion_threshold(&self) -> f64 {
        self.motion_amp_ratio * self.normal_amp_mean
    }
}

/// Class from parameters, mirroring the generator thresholds: a positive
/// septum gap at or above the structural threshold is structural; weakened
/// right-chamber contraction is motion; otherwise normal.
fn classify(params: &ClipParams) -> ClipClass {
    if params.septum_gap > 0.0 {
        return ClipClass::Structural;
    }
    // right chambers are indices 1 (RV) and 3 (RA)
    let desk = GeneratorConfig::desk_default(AnomalyKind::Motion);
    let thr = desk.motion_threshold();
    if params.contraction_amplitude[1] <= thr || params.contraction_amplitude[3] <= thr {
        return ClipClass::Motion;
    }
    ClipClass::Normal
}

/// Draw clip parameters for one class. Base layout is the four-chamber view:
/// ventricles on top, atria below, septa on the midline.
pub fn sample_params(
    config: &GeneratorConfig,
    class: ClipClass,
    rng: &mut ChaCha12Rng,
) -> ClipParams {
    let jitter = |rng: &mut ChaCha12Rng, r: f64| rng.gen_range(-r..r);
    let centers_base = [(0.30, 0.28), (0.70, 0.28), (0.33, 0.73), (0.67, 0.73)];
    let radii_base = [(0.120, 0.160), (0.100, 0.140), (0.100, 0.100), (0.100, 0.100)];
    let mut centers = [(0.0, 0.0); 4];
    let mut radii = [(0.0, 0.0); 4];
    for c in 0..4 {
        centers[c] = (
            centers_base[c].0 + jitter(rng, 0.012),
            centers_base[c].1 + jitter(rng, 0.012),
        );
        // wide radius jitter: per-clip size is a nuisance variable, so
        // time-averaged shape alone does not identify the class
        radii[c] = (
            (radii_base[c].0 + jitter(rng, 0.018)).clamp(0.05, 0.3),
            (radii_base[c].1 + jitter(rng, 0.018)).clamp(0.05, 0.3),
        );
    }
    let normal_amp = |rng: &mut ChaCha12Rng| rng.gen_range(0.18..0.32);
    let mut amplitude = [0.0; 4];
    for a in amplitude.iter_mut() {
        *a = normal_amp(rng);
    }
    let mut septum_gap = 0.0;
    match (class, config.anomaly) {
        (ClipClass::Structural, _) => {
            septum_gap = rng.gen_range(0.035..0.080);
        }
        (ClipClass::Motion, _) => {
            let hi = config.motion_threshold().min(0.09);
            amplitude[1] = rng.gen_range(0.03..hi);
            amplitude[3] = rng.gen_range(0.03..hi);
        }
        (ClipClass::Normal, _) => {}
    }
    let mut phases = [0.0; 4];
    for p in phases.iter_mut() {
        *p = rng.gen_range(0.0..0.35);
    }
    ClipParams {
        chamber_centers: centers,
        chamber_radii: radii,
        beat_period: config.beat_period,
        contraction_amplitude: amplitude,
        phase_offsets: phases,
        septum_gap,
        noise_sigma: rng.gen_range(0.01..0.05),
        seed: rng.gen(),
    }
}

// ---- dataset on disk ------------------------------------------------------

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub class: ClipClass,
    pub ef_analog: f64,
    pub split: String,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub clips: Vec<ManifestEntry>,
    pub config: GeneratorConfig,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Vec<&ManifestEntry> {
        self.clips.iter().filter(|c| c.split == name).collect()
    }
}

/// Generate, render, and persist a labeled dataset. The split is a
/// stratified 8:1:1 over a seeded shuffle, so counts are exact on the total
/// and balanced per class to within one clip.
pub fn generate_dataset(config: &GeneratorConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if config.n_normal < 1 || config.n_abnormal < 1 {
        return Err(Error::Config("need at least one clip per class".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let abnormal_class = match config.anomaly {
        AnomalyKind::Structural => ClipClass::Structural,
        AnomalyKind::Motion => ClipClass::Motion,
    };
    // interleave the two shuffled class streams, then cut 8:1:1
    let mut order: Vec<ClipClass> = Vec::with_capacity(config.n_normal + config.n_abnormal);
    {
        let (mut remaining_n, mut remaining_a) = (config.n_normal, config.n_abnormal);
        while remaining_n > 0 || remaining_a > 0 {
            if remaining_n > 0 {
                order.push(ClipClass::Normal);
                remaining_n -= 1;
            }
            if remaining_a > 0 {
                order.push(abnormal_class);
                remaining_a -= 1;
            }
        }
    }
    let total = order.len();
    let n_train = (total * 8) / 10;
    let n_val = total / 10;
    let mut clips = Vec::with_capacity(total);
    for (idx, &class) in order.iter().enumerate() {
        let mut rng = rng_for(config.seed, "clip-params", &[idx as u64]);
        let params = sample_params(config, class, &mut rng);
        let (clip, label) = render_clip(&params, config.frames, (config.size, config.size))?;
        debug_assert_eq!(label.class, class);
        let id = format!("clip_{idx:05}");
        let file = format!("{id}.echoclip");
        write_clip(&out_dir.join(&file), &clip, &label.masks)?;
        let split = if idx < n_train {
            "train"
        } else if idx < n_train + n_val {
            "val"
        } else {
            "test"
        };
        clips.push(ManifestEntry {
            id,
            class: label.class,
            ef_analog: label.ef_analog,
            split: split.to_string(),
            file,
        });
    }
    let manifest = DatasetManifest {
        clips,
        config: config.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest decode: {e}")))
}

/// Binary clip format: magic "ECH1", little-endian u32 N,H,W,C, then
/// N*H*W*C float32 frames, then 4*N*H*W u8 masks.
pub fn write_clip(path: &Path, clip: &VideoClip, masks: &Array4<u8>) -> Result<()> {
    let (n, h, w, c) = clip.frames.dim();
    if masks.dim() != (4, n, h, w) {
        return Err(Error::Shape(format!(
            "masks shape {:?} does not match frames {:?}",
            masks.dim(),
            clip.frames.dim()
        )));
    }
    let mut buf = Vec::with_capacity(16 + n * h * w * c * 4 + 4 * n * h * w);
    buf.extend_from_slice(b"ECH1");
    for v in [n, h, w, c] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in clip.frames.as_slice().expect("layout") {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(masks.as_slice().expect("layout"));
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<(VideoClip, Array4<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != b"ECH1" {
        return Err(Error::Format(format!(
            "{} is not an echoclip file",
            path.display()
        )));
    }
    let dim = |at: usize| -> usize {
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("slice")) as usize
    };
    let (n, h, w, c) = (dim(4), dim(8), dim(12), dim(16));
    let frames_len = n * h * w * c * 4;
    let masks_len = 4 * n * h * w;
    if bytes.len() != 20 + frames_len + masks_len {
        return Err(Error::Format(format!(
            "echoclip payload length {} does not match header {}x{}x{}x{}",
            bytes.len() - 20,
            n,
            h,
            w,
            c
        )));
    }
    let mut frames = Vec::with_capacity(n * h * w * c);
    for chunk in bytes[20..20 + frames_len].chunks_exact(4) {
        frames.push(f32::from_le_bytes(chunk.try_into().expect("chunk")));
    }
    let frames = Array4::from_shape_vec((n, h, w, c), frames)
        .map_err(|e| Error::Format(format!("frame reshape: {e}")))?;
    let masks = Array4::from_shape_vec(
        (4, n, h, w),
        bytes[20 + frames_len..].to_vec(),
    )
    .map_err(|e| Error::Format(format!("mask reshape: {e}")))?;
    Ok((VideoClip { frames }, masks))
}

// ---- sampling and augmentation --------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Frames fed to the model.
    pub n_frames: usize,
    /// Contiguous window sampled in train mode.
    pub train_window: usize,
    /// Fixed frame stride in eval mode.
    pub eval_stride: usize,
    /// Optional square resize applied before cropping.
    pub resize: Option<usize>,
    /// Optional square crop (random in train mode, centered in eval).
    pub crop: Option<usize>,
    /// Random horizontal/vertical flips in train mode.
    pub flips: bool,
}

impl AugmentConfig {
    /// Native-resolution settings for 16-frame desk clips.
    pub fn desk_default() -> Self {
        AugmentConfig {
            n_frames: 16,
            train_window: 16,
            eval_stride: 1,
            resize: None,
            crop: None,
            flips: true,
        }
    }

    /// The full-scale recipe: 48-frame window, 16 equidistant frames,
    /// resize 144, crop 112, stride 4 at eval.
    pub fn full_scale() -> Self {
        AugmentConfig {
            n_frames: 16,
            train_window: 48,
            eval_stride: 4,
            resize: Some(144),
            crop: Some(112),
            flips: true,
        }
    }
}

/// Temporal sampling + spatial augmentation. Train mode: random contiguous
/// window, equidistant subsample, resize, random crop, random flips. Eval
/// mode: fixed-stride frames from the start, resize, center crop.
///
/// The RNG is always advanced by the same five draws so replay stays aligned
/// whether or not individual augmentations are enabled.
pub fn sample_and_augment(
    clip: &VideoClip,
    cfg: &AugmentConfig,
    rng: &mut ChaCha12Rng,
    train_mode: bool,
) -> Result<VideoClip> {
    let n = clip.n_frames();
    let indices: Vec<usize> = if train_mode {
        if n < cfg.train_window {
            return Err(Error::Data(format!(
                "clip has {n} frames, train window needs {}",
                cfg.train_window
            )));
        }
        let start = rng.gen_range(0..=(n - cfg.train_window) as u64) as usize;
        (0..cfg.n_frames)
            .map(|i| start + i * cfg.train_window / cfg.n_frames)
            .collect()
    } else {
        let needed = (cfg.n_frames - 1) * cfg.eval_stride + 1;
        if n < needed {
            return Err(Error::Data(format!(
                "clip has {n} frames, eval sampling needs {needed}"
            )));
        }
        let _ = rng.gen_range(0..=0u64); // keep stream consumption fixed
        (0..cfg.n_frames).map(|i| i * cfg.eval_stride).collect()
    };

    let mut frames = select_frames(&clip.frames, &indices);
    if let Some(r) = cfg.resize {
        frames = resize_bilinear(&frames, r, r);
    }
    let (crop_y, crop_x) = if let Some(cs) = cfg.crop {
        let (h, w) = (frames.dim().1, frames.dim().2);
        if cs > h || cs > w {
            return Err(Error::Data(format!("crop {cs} exceeds frame {h}x{w}")));
        }
        if train_mode {
            (
                rng.gen_range(0..=(h - cs) as u64) as usize,
                rng.gen_range(0..=(w - cs) as u64) as usize,
            )
        } else {
            let _ = rng.gen_range(0..=0u64);
            let _ = rng.gen_range(0..=0u64);
            ((h - cs) / 2, (w - cs) / 2)
        }
    } else {
        let _ = rng.gen_range(0..=0u64);
        let _ = rng.gen_range(0..=0u64);
        (0, 0)
    };
    if let Some(cs) = cfg.crop {
        frames = frames
            .slice(ndarray::s![.., crop_y..crop_y + cs, crop_x..crop_x + cs, ..])
            .to_owned();
    }
    let hflip = rng.gen_range(0..2u32) == 1;
    let vflip = rng.gen_range(0..2u32) == 1;
    if train_mode && cfg.flips {
        if hflip {
            frames = frames.slice(ndarray::s![.., .., ..;-1, ..]).to_owned();
        }
        if vflip {
            frames = frames.slice(ndarray::s![.., ..;-1, .., ..]).to_owned();
        }
    }
    Ok(VideoClip {
        frames: frames.as_standard_layout().to_owned(),
    })
}

fn select_frames(frames: &Array4<f32>, indices: &[usize]) -> Array4<f32> {
    let (_, h, w, c) = frames.dim();
    let mut out = Array4::zeros((indices.len(), h, w, c));
    for (i, &t) in indices.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&frames.index_axis(ndarray::Axis(0), t));
    }
    out
}

fn resize_bilinear(frames: &Array4<f32>, oh: usize, ow: usize) -> Array4<f32> {
    let (n, h, w, c) = frames.dim();
    let mut out = Array4::zeros((n, oh, ow, c));
    for t in 0..n {
        for oy in 0..oh {
            let fy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..ow {
                let fx =
                    ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                for ch in 0..c {
                    let v00 = frames[[t, y0, x0, ch]] as f64;
                    let v01 = frames[[t, y0, x1, ch]] as f64;
                    let v10 = frames[[t, y1, x0, ch]] as f64;
                    let v11 = frames[[t, y1, x1, ch]] as f64;
                    let v = v00 * (1.0 - wy) * (1.0 - wx)
                        + v01 * (1.0 - wy) * wx
                        + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
                    out[[t, oy, ox, ch]] = v as f32;
                }
            }
        }
    }
    out
}

/// In-memory dataset with frames cached for training.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub dir: PathBuf,
    clips: Vec<VideoClip>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let mut clips = Vec::with_capacity(manifest.clips.len());
        for entry in &manifest.clips {
            let (clip, _) = read_clip(&dir.join(&entry.file))?;
            clips.push(clip);
        }
        Ok(Dataset {
            manifest,
            dir: dir.to_path_buf(),
            clips,
        })
    }

    pub fn clip(&self, idx: usize) -> &VideoClip {
        &self.clips[idx]
    }

    pub fn masks(&self, idx: usize) -> Result<Array4<u8>> {
        let entry = &self.manifest.clips[idx];
        Ok(read_clip(&self.dir.join(&entry.file))?.1)
    }

    /// Indices of clips in `split`, optionally restricted to one class.
    pub fn indices(&self, split: &str, class: Option<ClipClass>) -> Vec<usize> {
        self.manifest
            .clips
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split && class.map_or(true, |c| e.class == c))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Run profile of the septum strip at frame `t`: for each row of the atrial
/// septum's y-range, whether the wall is present (bright). Used to verify
/// that structural clips show exactly one connected gap.
pub fn septum_wall_profile(clip: &VideoClip, t: usize) -> Vec<bool> {
    let (h, w) = (clip.height(), clip.width());
    let x = (SEPTUM_X * w as f64) as usize;
    let y0 = (ATRIAL_SEPTUM_Y.0 * h as f64).ceil() as usize;
    let y1 = (ATRIAL_SEPTUM_Y.1 * h as f64).floor() as usize;
    (y0..y1)
        .map(|y| clip.frames[[t, y, x, 0]] > 0.5)
        .collect()
}
