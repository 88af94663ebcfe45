//! Dense kernels behind the tape ops: im2col convolution, temporal
//! (frame-axis) convolution, and nearest-neighbor upsampling.
//!
//! Every kernel is bitwise deterministic regardless of thread count: work is
//! split into a fixed number of chunks (independent of the rayon pool size),
//! chunk outputs are disjoint, and reductions combine partial results in
//! chunk order. `parallel = false` runs the identical chunk schedule on the
//! calling thread.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rayon::prelude::*;

use super::Scalar;

/// Fixed chunk count for all parallel decompositions. Must not depend on the
/// machine or pool size, or results would differ between runs.
const CHUNKS: usize = 8;

/// Work below this many multiply-accumulates is not worth scheduling on the
/// pool. Gates only the schedule — the chunk decomposition is unchanged, so
/// results are bitwise identical either way.
const PAR_MIN_MACS: usize = 1 << 20;

fn chunk_ranges(len: usize) -> Vec<(usize, usize)> {
    if len == 0 {
        return vec![];
    }
    let step = len.div_ceil(CHUNKS);
    (0..len)
        .step_by(step)
        .map(|lo| (lo, (lo + step).min(len)))
        .collect()
}

fn run_chunks<F: Fn(usize, usize) + Sync>(len: usize, parallel: bool, f: F) {
    let ranges = chunk_ranges(len);
    if parallel {
        ranges.par_iter().for_each(|&(lo, hi)| f(lo, hi));
    } else {
        for (lo, hi) in ranges {
            f(lo, hi);
        }
    }
}

/// `a @ b` with rows of `a` processed in fixed chunks.
pub fn matmul<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>, parallel: bool) -> Array2<T> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    let parallel = parallel && m * k * n >= PAR_MIN_MACS;
    let mut out = Array2::zeros((m, n));
    let ranges = chunk_ranges(m);
    let a = &a;
    let b = &b;
    if parallel {
        let mut views: Vec<_> = Vec::new();
        let mut rest = out.view_mut();
        let mut prev = 0usize;
        for &(lo, hi) in &ranges {
            let (head, tail) = rest.split_at(Axis(0), hi - prev);
            views.push((lo, hi, head));
            rest = tail;
            prev = hi;
        }
        views.into_par_iter().for_each(|(lo, hi, mut dst)| {
            general_mat_mul(T::one(), &a.slice(s![lo..hi, ..]), b, T::zero(), &mut dst);
        });
    } else {
        for (lo, hi) in ranges {
            let mut dst = out.slice_mut(s![lo..hi, ..]);
            general_mat_mul(T::one(), &a.slice(s![lo..hi, ..]), b, T::zero(), &mut dst);
        }
    }
    out
}

/// `a^T @ b` reduced over rows: per-chunk partials are summed in chunk order
/// so the result does not depend on the execution schedule.
pub fn matmul_t<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>, parallel: bool) -> Array2<T> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    let parallel = parallel && m * k * n >= PAR_MIN_MACS;
    let ranges = chunk_ranges(m);
    let compute = |&(lo, hi): &(usize, usize)| -> Array2<T> {
        let mut part = Array2::zeros((k, n));
        general_mat_mul(
            T::one(),
            &a.slice(s![lo..hi, ..]).t(),
            &b.slice(s![lo..hi, ..]),
            T::zero(),
            &mut part,
        );
        part
    };
    let partials: Vec<Array2<T>> = if parallel {
        ranges.par_iter().map(compute).collect()
    } else {
        ranges.iter().map(compute).collect()
    };
    let mut out = Array2::zeros((k, n));
    for part in partials {
        out += &part;
    }
    out
}

pub fn conv2d_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn im2col<T: Scalar>(
    input: &ArrayView4<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    parallel: bool,
) -> Array2<T> {
    let (n, h, w, c) = input.dim();
    let ho = conv2d_out_dim(h, kh, stride, pad);
    let wo = conv2d_out_dim(w, kw, stride, pad);
    let rows = n * ho * wo;
    let parallel = parallel && rows * kh * kw * c >= PAR_MIN_MACS;
    let mut cols = Array2::zeros((rows, kh * kw * c));
    let in_slice = input
        .as_slice()
        .expect("im2col expects standard-layout input");
    let out_ptr: SendPtr<T> = SendPtr(cols.as_mut_ptr());
    run_chunks(rows, parallel, |lo, hi| {
        let out_ptr = &out_ptr;
        for row in lo..hi {
            let wi0 = row % wo;
            let hi0 = (row / wo) % ho;
            let ni = row / (wo * ho);
            for ki in 0..kh {
                let y = (hi0 * stride + ki) as isize - pad as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kj in 0..kw {
                    let x = (wi0 * stride + kj) as isize - pad as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let src = ((ni * h + y as usize) * w + x as usize) * c;
                    let dst = row * (kh * kw * c) + (ki * kw + kj) * c;
                    unsafe {
                        std::ptr::copy_nonoverlapping(
                            in_slice.as_ptr().add(src),
                            out_ptr.0.add(dst),
                            c,
                        );
                    }
                }
            }
        }
    });
    cols
}

/// Raw pointer wrapper so disjoint chunk writes can cross the rayon boundary.
struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// Forward convolution. `input` is NHWC, `kernel` is (kh, kw, cin, cout).
pub fn conv2d<T: Scalar>(
    input: &ArrayView4<T>,
    kernel: &ArrayView4<T>,
    stride: usize,
    pad: usize,
    parallel: bool,
) -> Array4<T> {
    let (n, h, w, cin) = input.dim();
    let (kh, kw, kcin, cout) = kernel.dim();
    assert_eq!(cin, kcin, "conv2d channel mismatch");
    let ho = conv2d_out_dim(h, kh, stride, pad);
    let wo = conv2d_out_dim(w, kw, stride, pad);
    let cols = im2col(input, kh, kw, stride, pad, parallel);
    let kmat = kernel
        .to_shape((kh * kw * cin, cout))
        .expect("kernel reshape");
    let out = matmul(cols.view(), kmat.view(), parallel);
    out.into_shape_with_order((n, ho, wo, cout))
        .expect("conv2d output reshape")
}

/// Gradient of conv2d with respect to the kernel.
pub fn conv2d_grad_kernel<T: Scalar>(
    input: &ArrayView4<T>,
    grad_out: &ArrayView4<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    parallel: bool,
) -> Array4<T> {
    let (_, _, _, cin) = input.dim();
    let (n, ho, wo, cout) = grad_out.dim();
    let cols = im2col(input, kh, kw, stride, pad, parallel);
    let gmat = grad_out
        .to_shape((n * ho * wo, cout))
        .expect("grad reshape");
    let gk = matmul_t(cols.view(), gmat.view(), parallel);
    gk.into_shape_with_order((kh, kw, cin, cout))
        .expect("kernel grad reshape")
}

/// Gradient of conv2d with respect to the input.
pub fn conv2d_grad_input<T: Scalar>(
    grad_out: &ArrayView4<T>,
    kernel: &ArrayView4<T>,
    input_dim: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    parallel: bool,
) -> Array4<T> {
    let (n, h, w, cin) = input_dim;
    let (kh, kw, _, cout) = kernel.dim();
    let (gn, ho, wo, _) = grad_out.dim();
    assert_eq!(n, gn);
    let gmat = grad_out
        .to_shape((n * ho * wo, cout))
        .expect("grad reshape");
    let kmat = kernel
        .to_shape((kh * kw * cin, cout))
        .expect("kernel reshape");
    // (rows, cout) @ (cout, kh*kw*cin)
    let cols = matmul(gmat.view(), kmat.t(), parallel);
    let mut gi = Array4::zeros((n, h, w, cin));
    let cols_slice = cols.as_slice().expect("col grad layout");
    let gi_ptr: SendPtr<T> = SendPtr(gi.as_mut_ptr());
    // Scatter per sample: all rows of one sample touch only that sample's
    // slab, so parallelizing over n keeps writes disjoint.
    run_chunks(n, parallel, |nlo, nhi| {
        let gi_ptr = &gi_ptr;
        for ni in nlo..nhi {
            for hi0 in 0..ho {
                for wi0 in 0..wo {
                    let row = (ni * ho + hi0) * wo + wi0;
                    for ki in 0..kh {
                        let y = (hi0 * stride + ki) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let x = (wi0 * stride + kj) as isize - pad as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let src = row * (kh * kw * cin) + (ki * kw + kj) * cin;
                            let dst = ((ni * h + y as usize) * w + x as usize) * cin;
                            unsafe {
                                for c in 0..cin {
                                    *gi_ptr.0.add(dst + c) =
                                        *gi_ptr.0.add(dst + c) + cols_slice[src + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gi
}

/// Temporal mixing convolution along the frame axis: kernel (3, din, dout),
/// zero padding of one frame at each end. Input is (N, h, w, din).
pub fn temporal_conv<T: Scalar>(
    input: &ArrayView4<T>,
    kernel: &ndarray::ArrayView3<T>,
    parallel: bool,
) -> Array4<T> {
    let (n, h, w, din) = input.dim();
    let (kt, kdin, dout) = kernel.dim();
    assert_eq!(kt, 3, "temporal kernel size is fixed at 3");
    assert_eq!(din, kdin, "temporal conv channel mismatch");
    let in2 = input.to_shape((n * h * w, din)).expect("reshape");
    let mut out = Array2::<T>::zeros((n * h * w, dout));
    let hw = h * w;
    for tau in 0..3usize {
        // out[t] += in[t + tau - 1] * K[tau]
        let (out_lo, out_hi) = match tau {
            0 => (1, n),
            1 => (0, n),
            _ => (0, n - 1),
        };
        if out_hi <= out_lo {
            continue;
        }
        let in_lo = out_lo + tau - 1;
        let ktau = kernel.index_axis(Axis(0), tau);
        let rows = (out_hi - out_lo) * hw;
        let par_here = parallel && rows * din * dout >= PAR_MIN_MACS;
        let ranges = chunk_ranges(rows);
        let apply = |lo: usize, hi: usize, mut dst: ndarray::ArrayViewMut2<T>| {
            let src = in2.slice(s![in_lo * hw + lo..in_lo * hw + hi, ..]);
            general_mat_mul(T::one(), &src, &ktau, T::one(), &mut dst);
        };
        if par_here {
            let mut views: Vec<_> = Vec::new();
            let mut rest = out.slice_mut(s![out_lo * hw..out_hi * hw, ..]);
            let mut prev = 0usize;
            for &(lo, hi) in &ranges {
                let (head, tail) = rest.split_at(Axis(0), hi - prev);
                views.push((lo, hi, head));
                rest = tail;
                prev = hi;
            }
            views
                .into_par_iter()
                .for_each(|(lo, hi, dst)| apply(lo, hi, dst));
        } else {
            for (lo, hi) in ranges {
                let dst = out.slice_mut(s![out_lo * hw + lo..out_lo * hw + hi, ..]);
                apply(lo, hi, dst);
            }
        }
    }
    out.into_shape_with_order((n, h, w, dout)).expect("reshape")
}

/// Gradients of [`temporal_conv`]: returns (grad_input, grad_kernel).
pub fn temporal_conv_grad<T: Scalar>(
    input: &ArrayView4<T>,
    kernel: &ndarray::ArrayView3<T>,
    grad_out: &ArrayView4<T>,
    need_input: bool,
    need_kernel: bool,
    parallel: bool,
) -> (Option<Array4<T>>, Option<ndarray::Array3<T>>) {
    let (n, h, w, din) = input.dim();
    let (_, _, dout) = kernel.dim();
    let hw = h * w;
    let in2 = input.to_shape((n * hw, din)).expect("reshape");
    let g2 = grad_out.to_shape((n * hw, dout)).expect("reshape");
    let mut gi = need_input.then(|| Array2::<T>::zeros((n * hw, din)));
    let mut gk = need_kernel.then(|| ndarray::Array3::<T>::zeros((3, din, dout)));
    for tau in 0..3usize {
        let (out_lo, out_hi) = match tau {
            0 => (1, n),
            1 => (0, n),
            _ => (0, n - 1),
        };
        if out_hi <= out_lo {
            continue;
        }
        let in_lo = out_lo + tau - 1;
        let rows = (out_hi - out_lo) * hw;
        if let Some(gi) = gi.as_mut() {
            // grad_in[t + tau - 1] += grad_out[t] * K[tau]^T
            let ktau = kernel.index_axis(Axis(0), tau);
            let par_here = parallel && rows * din * dout >= PAR_MIN_MACS;
            let ranges = chunk_ranges(rows);
            let apply = |lo: usize, hi: usize, mut dst: ndarray::ArrayViewMut2<T>| {
                let src = g2.slice(s![out_lo * hw + lo..out_lo * hw + hi, ..]);
                general_mat_mul(T::one(), &src, &ktau.t(), T::one(), &mut dst);
            };
            if par_here {
                let mut views: Vec<_> = Vec::new();
                let mut rest = gi.slice_mut(s![in_lo * hw..in_lo * hw + rows, ..]);
                let mut prev = 0usize;
                for &(lo, hi) in &ranges {
                    let (head, tail) = rest.split_at(Axis(0), hi - prev);
                    views.push((lo, hi, head));
                    rest = tail;
                    prev = hi;
                }
                views
                    .into_par_iter()
                    .for_each(|(lo, hi, dst)| apply(lo, hi, dst));
            } else {
                for (lo, hi) in ranges {
                    let dst = gi.slice_mut(s![in_lo * hw + lo..in_lo * hw + hi, ..]);
                    apply(lo, hi, dst);
                }
            }
        }
        if let Some(gk) = gk.as_mut() {
            let part = matmul_t(
                in2.slice(s![in_lo * hw..in_lo * hw + rows, ..]),
                g2.slice(s![out_lo * hw..out_lo * hw + rows, ..]),
                parallel,
            );
            gk.index_axis_mut(Axis(0), tau).assign(&part);
        }
    }
    (
        gi.map(|g| g.into_shape_with_order((n, h, w, din)).expect("reshape")),
        gk,
    )
}

/// Nearest-neighbor 2x spatial upsampling of an NHWC stack.
pub fn upsample2x<T: Scalar>(input: &ArrayView4<T>, parallel: bool) -> Array4<T> {
    let (n, h, w, c) = input.dim();
    let mut out = Array4::zeros((n, 2 * h, 2 * w, c));
    let in_slice = input.as_slice().expect("layout");
    let out_ptr: SendPtr<T> = SendPtr(out.as_mut_ptr());
    run_chunks(n, parallel, |nlo, nhi| {
        let out_ptr = &out_ptr;
        for ni in nlo..nhi {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let src = ((ni * h + y / 2) * w + x / 2) * c;
                    let dst = ((ni * 2 * h + y) * 2 * w + x) * c;
                    unsafe {
                        std::ptr::copy_nonoverlapping(
                            in_slice.as_ptr().add(src),
                            out_ptr.0.add(dst),
                            c,
                        );
                    }
                }
            }
        }
    });
    out
}

/// Backward of [`upsample2x`]: each input cell collects its four children in
/// a fixed (row-major) order.
pub fn upsample2x_grad<T: Scalar>(grad_out: &ArrayView4<T>, parallel: bool) -> Array4<T> {
    let (n, h2, w2, c) = grad_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gi = Array4::zeros((n, h, w, c));
    let g_slice = grad_out.as_slice().expect("layout");
    let gi_ptr: SendPtr<T> = SendPtr(gi.as_mut_ptr());
    run_chunks(n, parallel, |nlo, nhi| {
        let gi_ptr = &gi_ptr;
        for ni in nlo..nhi {
            for y in 0..h {
                for x in 0..w {
                    let dst = ((ni * h + y) * w + x) * c;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let src = ((ni * h2 + 2 * y + dy) * w2 + 2 * x + dx) * c;
                            unsafe {
                                for ch in 0..c {
                                    *gi_ptr.0.add(dst + ch) =
                                        *gi_ptr.0.add(dst + ch) + g_slice[src + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gi
}

/// Channel-bias gradient: sum over every axis except the last.
pub fn bias_grad<T: Scalar>(grad_out: &ndarray::ArrayViewD<T>) -> Array1<T> {
    let c = *grad_out.shape().last().expect("non-empty shape");
    let flat = grad_out.to_shape((grad_out.len() / c, c)).expect("reshape");
    let mut out = Array1::zeros(c);
    for row in flat.rows() {
        out += &row;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand4(rng: &mut ChaCha12Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    /// Reference convolution with explicit loops.
    fn conv2d_naive(
        input: &Array4<f64>,
        kernel: &Array4<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, h, w, cin) = input.dim();
        let (kh, kw, _, cout) = kernel.dim();
        let ho = conv2d_out_dim(h, kh, stride, pad);
        let wo = conv2d_out_dim(w, kw, stride, pad);
        let mut out = Array4::zeros((n, ho, wo, cout));
        for ni in 0..n {
            for i in 0..ho {
                for j in 0..wo {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let y = (i * stride + ki) as isize - pad as isize;
                                let x = (j * stride + kj) as isize - pad as isize;
                                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += input[[ni, y as usize, x as usize, ci]]
                                        * kernel[[ki, kj, ci, co]];
                                }
                            }
                        }
                        out[[ni, i, j, co]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let input = rand4(&mut rng, (2, 9, 7, 3));
        let kernel = rand4(&mut rng, (3, 3, 3, 4));
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let fast = conv2d(&input.view(), &kernel.view(), stride, pad, false);
            let slow = conv2d_naive(&input, &kernel, stride, pad);
            let diff = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "stride={stride} pad={pad} diff={diff}");
        }
    }

    #[test]
    fn conv2d_parallel_is_bitwise_identical() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let input = rand4(&mut rng, (3, 16, 16, 4));
        let kernel = rand4(&mut rng, (3, 3, 4, 8));
        let a = conv2d(&input.view(), &kernel.view(), 2, 1, false);
        let b = conv2d(&input.view(), &kernel.view(), 2, 1, true);
        assert_eq!(a, b);
        let ga = conv2d_grad_kernel(&input.view(), &a.view(), 3, 3, 2, 1, false);
        let gb = conv2d_grad_kernel(&input.view(), &a.view(), 3, 3, 2, 1, true);
        assert_eq!(ga, gb);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let input = rand4(&mut rng, (1, 6, 6, 2));
        let kernel = rand4(&mut rng, (3, 3, 2, 3));
        let grad_out_shape = {
            let out = conv2d(&input.view(), &kernel.view(), 2, 1, false);
            out.dim()
        };
        let grad_out = rand4(&mut rng, grad_out_shape);
        // loss = sum(conv * grad_out): its input/kernel gradients are what
        // the backward kernels return.
        let loss = |inp: &Array4<f64>, ker: &Array4<f64>| -> f64 {
            (&conv2d(&inp.view(), &ker.view(), 2, 1, false) * &grad_out).sum()
        };
        let gk = conv2d_grad_kernel(&input.view(), &grad_out.view(), 3, 3, 2, 1, false);
        let gi = conv2d_grad_input(&grad_out.view(), &kernel.view(), input.dim(), 2, 1, false);
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 2, 1, 2], [2, 1, 0, 1]] {
            let mut kp = kernel.clone();
            kp[idx] += eps;
            let mut km = kernel.clone();
            km[idx] -= eps;
            let fd = (loss(&input, &kp) - loss(&input, &km)) / (2.0 * eps);
            assert!((fd - gk[idx]).abs() < 1e-6, "kernel fd {fd} vs {}", gk[idx]);
        }
        for idx in [[0, 0, 0, 0], [0, 3, 2, 1], [0, 5, 5, 0]] {
            let mut ip = input.clone();
            ip[idx] += eps;
            let mut im = input.clone();
            im[idx] -= eps;
            let fd = (loss(&ip, &kernel) - loss(&im, &kernel)) / (2.0 * eps);
            assert!((fd - gi[idx]).abs() < 1e-6, "input fd {fd} vs {}", gi[idx]);
        }
    }

    #[test]
    fn temporal_conv_matches_naive_and_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let input = rand4(&mut rng, (5, 3, 2, 3));
        let kernel = Array3::from_shape_fn((3, 3, 4), |_| rng.gen_range(-1.0..1.0f64));
        let out = temporal_conv(&input.view(), &kernel.view(), false);
        let (n, h, w, _) = input.dim();
        // naive
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for co in 0..4 {
                        let mut acc = 0.0;
                        for tau in 0..3 {
                            let t = ni as isize + tau as isize - 1;
                            if t < 0 || t >= n as isize {
                                continue;
                            }
                            for ci in 0..3 {
                                acc += input[[t as usize, y, x, ci]] * kernel[[tau, ci, co]];
                            }
                        }
                        let got = out[[ni, y, x, co]];
                        assert!((acc - got).abs() < 1e-12, "{acc} vs {got}");
                    }
                }
            }
        }
        let grad_out = rand4(&mut rng, out.dim());
        let (gi, gk) = temporal_conv_grad(
            &input.view(),
            &kernel.view(),
            &grad_out.view(),
            true,
            true,
            false,
        );
        let (gi, gk) = (gi.unwrap(), gk.unwrap());
        let loss = |inp: &Array4<f64>, ker: &Array3<f64>| -> f64 {
            (&temporal_conv(&inp.view(), &ker.view(), false) * &grad_out).sum()
        };
        let eps = 1e-6;
        let idx = [2, 1, 1, 2];
        let mut ip = input.clone();
        ip[idx] += eps;
        let mut im = input.clone();
        im[idx] -= eps;
        let fd = (loss(&ip, &kernel) - loss(&im, &kernel)) / (2.0 * eps);
        assert!((fd - gi[idx]).abs() < 1e-6);
        let kidx = [0, 2, 3];
        let mut kp = kernel.clone();
        kp[kidx] += eps;
        let mut km = kernel.clone();
        km[kidx] -= eps;
        let fd = (loss(&input, &kp) - loss(&input, &km)) / (2.0 * eps);
        assert!((fd - gk[kidx]).abs() < 1e-6);
    }

    #[test]
    fn upsample_roundtrip_grad() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let input = rand4(&mut rng, (2, 3, 4, 2));
        let up = upsample2x(&input.view(), false);
        assert_eq!(up.dim(), (2, 6, 8, 2));
        assert_eq!(up[[1, 5, 7, 0]], input[[1, 2, 3, 0]]);
        let g = upsample2x_grad(&up.view(), false);
        // each cell's gradient is the sum of its four copies
        assert!((g[[1, 2, 3, 0]] - 4.0 * input[[1, 2, 3, 0]]).abs() < 1e-12);
    }
}
