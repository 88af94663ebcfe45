//! Deformation codebook: element-wise vector quantization of encoder
//! features with a learnable temporal positional table, the two-term
//! commitment loss, and exponential-moving-average codebook maintenance.
//!
//! Gradient contract: quantization itself is a pure array function; the
//! training tape wraps it in a straight-through node so downstream gradients
//! reach the pre-quantization features unchanged and never touch the
//! entries. Entries move only through [`ema_update`].

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView4};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Usage-EMA floor below which an entry is reseeded from the current batch.
pub const REVIVAL_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Codebook<T: Scalar> {
    /// K x d entries.
    pub entries: Array2<T>,
    /// EMA cluster sizes, one per entry.
    pub usage_counts: Array1<T>,
}

impl<T: Scalar> Codebook<T> {
    pub fn init(k: usize, dim: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!(k >= 2, "codebook needs at least two entries");
        let entries = Array2::from_shape_fn((k, dim), |_| {
            T::cast_from(sample_gaussian(rng) * 0.02)
        });
        Codebook {
            entries,
            usage_counts: Array1::zeros(k),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct PositionalTable<T: Scalar> {
    /// N_max x d learnable rows; row n is added to features of frame n.
    /// Stored dynamic-dim so the optimizer and checkpoint walkers can treat
    /// it like any other parameter tensor.
    pub table: ndarray::ArrayD<T>,
}

impl<T: Scalar> PositionalTable<T> {
    pub fn init(n_max: usize, dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let table = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[n_max, dim]), |_| {
            T::cast_from(sample_gaussian(rng) * 0.02)
        });
        PositionalTable { table }
    }

    pub fn n_max(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }
}

/// Box-Muller; two uniforms per draw keeps the stream consumption fixed.
fn sample_gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Clone, Debug)]
pub struct QuantizeResult<T: Scalar> {
    /// Entry copies, position by position: quantized[n,i,j] = Z[indices[n,i,j]].
    pub quantized: Array4<T>,
    pub indices: Array3<usize>,
    /// Mean over positions of the squared residual norm.
    pub q_error: T,
}

/// Add the positional row to every site of its frame.
pub fn add_positional<T: Scalar>(
    features: &ArrayView4<T>,
    pos: &PositionalTable<T>,
) -> Result<Array4<T>> {
    let (n, _, _, d) = features.dim();
    if n > pos.n_max() {
        return Err(Error::Shape(format!(
            "temporal length {} exceeds positional table capacity {}",
            n,
            pos.n_max()
        )));
    }
    if d != pos.dim() {
        return Err(Error::Shape(format!(
            "feature dim {} vs positional dim {}",
            d,
            pos.dim()
        )));
    }
    let (_, h, w, _) = features.dim();
    let mut out = features.to_owned();
    {
        let flat = out.as_slice_mut().expect("layout");
        let tab = pos.table.as_slice().expect("layout");
        for fi in 0..n {
            for site in 0..h * w {
                let base = (fi * h * w + site) * d;
                for k in 0..d {
                    flat[base + k] += tab[fi * d + k];
                }
            }
        }
    }
    Ok(out)
}

/// Nearest codebook entry for every position of `features` after the
/// positional add. Ties break to the lowest entry index.
pub fn quantize<T: Scalar>(
    features: &ArrayView4<T>,
    cb: &Codebook<T>,
    pos: &PositionalTable<T>,
) -> Result<QuantizeResult<T>> {
    if features.dim().0 > pos.n_max() {
        return Err(Error::Shape(format!(
            "temporal length {} exceeds positional table capacity {}",
            features.dim().0,
            pos.n_max()
        )));
    }
    let shifted = add_positional(features, pos)?;
    quantize_shifted(&shifted.view(), cb)
}

/// Quantize features that already carry the positional rows.
pub fn quantize_shifted<T: Scalar>(
    shifted: &ArrayView4<T>,
    cb: &Codebook<T>,
) -> Result<QuantizeResult<T>> {
    let (n, h, w, d) = shifted.dim();
    if d != cb.dim() {
        return Err(Error::Shape(format!(
            "feature dim {} vs codebook dim {}",
            d,
            cb.dim()
        )));
    }
    if shifted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature input".into()));
    }
    let flat = shifted.to_shape((n * h * w, d)).expect("reshape");
    let mut indices = Array3::zeros((n, h, w));
    let mut quantized = Array4::zeros((n, h, w, d));
    let mut err_sum = T::zero();
    let idx_flat = indices.as_slice_mut().expect("layout");
    {
        let qflat = quantized.as_slice_mut().expect("layout");
        for (p, site) in flat.rows().into_iter().enumerate() {
            let (best, dist) =
                nearest_entry(site.as_slice().expect("contiguous row"), &cb.entries.view());
            idx_flat[p] = best;
            err_sum += dist;
            qflat[p * d..(p + 1) * d]
                .copy_from_slice(cb.entries.row(best).as_slice().expect("row"));
        }
    }
    let q_error = err_sum / T::from_usize(n * h * w).expect("count");
    Ok(QuantizeResult {
        quantized,
        indices,
        q_error,
    })
}

fn nearest_entry<T: Scalar>(site: &[T], entries: &ArrayView2<T>) -> (usize, T) {
    let mut best = 0usize;
    let mut best_dist = T::infinity();
    for (k, entry) in entries.rows().into_iter().enumerate() {
        let es = entry.as_slice().expect("row");
        let mut dist = T::zero();
        for i in 0..site.len() {
            let diff = site[i] - es[i];
            dist += diff * diff;
        }
        if dist < best_dist {
            best_dist = dist;
            best = k;
        }
    }
    (best, best_dist)
}

/// Two-term commitment loss of the quantizer, reduced as the mean over
/// positions of the per-position squared norm. The first term is the
/// codebook-side residual (monitoring only under EMA maintenance), the
/// second — weighted by `lambda` — is the encoder-side pull.
pub fn commitment_loss<T: Scalar>(
    features_plus_pos: &ArrayView4<T>,
    quantized: &ArrayView4<T>,
    lambda: T,
) -> Result<T> {
    if features_plus_pos.dim() != quantized.dim() {
        return Err(Error::Shape(format!(
            "commitment shapes {:?} vs {:?}",
            features_plus_pos.dim(),
            quantized.dim()
        )));
    }
    let (n, h, w, _) = features_plus_pos.dim();
    let positions = T::from_usize(n * h * w).expect("count");
    let mut sq = T::zero();
    ndarray::Zip::from(features_plus_pos)
        .and(quantized)
        .for_each(|&f, &q| {
            let d = f - q;
            sq += d * d;
        });
    let per_position = sq / positions;
    Ok(per_position + lambda * per_position)
}

/// EMA codebook update. Entries with assignments move toward the mean of
/// their assigned `(F + P)` vectors; entries without assignments are
/// untouched, bit for bit. Usage counts track assignment counts under the
/// same EMA weight.
pub fn ema_update<T: Scalar>(
    cb: &mut Codebook<T>,
    indices: &Array3<usize>,
    features_plus_pos: &ArrayView4<T>,
    omega: T,
) -> Result<()> {
    if !(omega > T::zero() && omega <= T::one()) {
        return Err(Error::Param(format!("omega {} outside (0, 1]", omega)));
    }
    let (n, h, w, d) = features_plus_pos.dim();
    if indices.dim() != (n, h, w) {
        return Err(Error::Shape("indices shape mismatch".into()));
    }
    let k = cb.len();
    let flat = features_plus_pos.to_shape((n * h * w, d)).expect("reshape");
    let idx = indices.as_slice().expect("layout");
    let mut sums = Array2::<T>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (p, site) in flat.rows().into_iter().enumerate() {
        let ki = idx[p];
        counts[ki] += 1;
        let mut row = sums.row_mut(ki);
        row += &site;
    }
    let one_minus = T::one() - omega;
    for ki in 0..k {
        let c = counts[ki];
        cb.usage_counts[ki] =
            one_minus * cb.usage_counts[ki] + omega * T::from_usize(c).expect("count");
        if c > 0 {
            let inv = T::one() / T::from_usize(c).expect("count");
            let mut entry = cb.entries.row_mut(ki);
            for (e, &s) in entry.iter_mut().zip(sums.row(ki).iter()) {
                *e = one_minus * *e + omega * (s * inv);
            }
        }
    }
    Ok(())
}

/// Reseed entries whose usage EMA fell below the revival floor to random
/// rows of the current batch's `(F + P)` pool. Returns how many moved.
pub fn revive_dead_entries<T: Scalar>(
    cb: &mut Codebook<T>,
    pool: &ArrayView2<T>,
    rng: &mut ChaCha12Rng,
) -> usize {
    let threshold = T::cast_from(REVIVAL_THRESHOLD);
    let rows = pool.nrows();
    if rows == 0 {
        return 0;
    }
    let mut revived = 0;
    for ki in 0..cb.len() {
        if cb.usage_counts[ki] < threshold {
            let pick = rng.gen_range(0..rows);
            cb.entries.row_mut(ki).assign(&pool.row(pick));
            revived += 1;
        }
    }
    revived
}
