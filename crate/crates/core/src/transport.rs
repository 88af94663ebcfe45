//! Feature-population transport: ring-buffer memory banks with EMA
//! centroids, the exact per-dimension sort matcher, an entropic Sinkhorn
//! solver in the log domain, and the separation/consistency losses built on
//! them.
//!
//! The matcher pairs the ascending order of each dimension's column across
//! banks — the exact minimizer of the per-dimension transport objective —
//! and the pairing is treated as a constant when gradients are taken.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct MemoryBank<T: Scalar> {
    /// J x d stored pooled features (detached).
    pub rows: Array2<T>,
    /// Next ring slot to overwrite.
    pub write_cursor: usize,
    /// EMA centroid of everything pushed so far.
    pub centroid: Array1<T>,
    /// Number of valid rows, saturating at J.
    pub fill: usize,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        MemoryBank {
            rows: Array2::zeros((capacity, dim)),
            write_cursor: 0,
            centroid: Array1::zeros(dim),
            fill: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Index of the most recently written row, if any.
    pub fn latest(&self) -> Option<usize> {
        if self.fill == 0 {
            None
        } else {
            Some((self.write_cursor + self.capacity() - 1) % self.capacity())
        }
    }

    /// Valid rows in ring-age order is not needed anywhere; validity is just
    /// the first `fill` slots until the ring wraps, then all of them.
    pub fn valid_rows(&self) -> ArrayView2<'_, T> {
        self.rows.slice(ndarray::s![..self.fill, ..])
    }
}

/// Replace the oldest slot with `pooled` and fold it into the EMA centroid.
/// The very first push initializes the centroid to the pushed vector.
pub fn bank_push<T: Scalar>(
    bank: &mut MemoryBank<T>,
    pooled: &ArrayView1<T>,
    omega_bank: T,
) -> Result<()> {
    if pooled.len() != bank.dim() {
        return Err(Error::Shape(format!(
            "pooled dim {} vs bank dim {}",
            pooled.len(),
            bank.dim()
        )));
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite pooled feature".into()));
    }
    bank.rows.row_mut(bank.write_cursor).assign(pooled);
    if bank.fill == 0 {
        bank.centroid.assign(pooled);
    } else {
        let keep = T::one() - omega_bank;
        ndarray::Zip::from(&mut bank.centroid)
            .and(pooled)
            .for_each(|c, &p| *c = keep * *c + omega_bank * p);
    }
    bank.write_cursor = (bank.write_cursor + 1) % bank.capacity();
    bank.fill = (bank.fill + 1).min(bank.capacity());
    Ok(())
}

/// Per-dimension assignments and the total matched squared-difference cost.
#[derive(Clone, Debug)]
pub struct SortMatch {
    /// `perm[i][j]` = row of B matched to row j of A in dimension i.
    pub perm: Vec<Vec<usize>>,
    pub cost: f64,
}

/// Exact per-dimension matcher: dimension by dimension, ascending order of
/// A's column pairs with ascending order of B's column.
pub fn sort_match<T: Scalar>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Result<SortMatch> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "bank shapes {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (j, d) = a.dim();
    let mut perm = vec![vec![0usize; j]; d];
    let mut cost = 0.0f64;
    for i in 0..d {
        let mut ord_a: Vec<usize> = (0..j).collect();
        let mut ord_b: Vec<usize> = (0..j).collect();
        // stable sorts keep equal values in index order, so the pairing is
        // deterministic for replay
        ord_a.sort_by(|&p, &q| a[[p, i]].partial_cmp(&a[[q, i]]).expect("finite"));
        ord_b.sort_by(|&p, &q| b[[p, i]].partial_cmp(&b[[q, i]]).expect("finite"));
        for r in 0..j {
            let ja = ord_a[r];
            let jb = ord_b[r];
            perm[i][ja] = jb;
            let diff = (a[[ja, i]] - b[[jb, i]]).as_f64();
            cost += diff * diff;
        }
    }
    Ok(SortMatch { perm, cost })
}

#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    /// Transport part of the entropic objective: sum(plan * cost).
    pub cost: f64,
    /// Max absolute row/column marginal violation.
    pub marginal_error: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn validate_marginal(name: &str, marg: &ArrayView1<f64>) -> Result<()> {
    if marg.iter().any(|&v| v <= 0.0) {
        return Err(Error::Param(format!("{name} marginal has non-positive mass")));
    }
    let total: f64 = marg.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!(
            "{name} marginal sums to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Entropy-regularized optimal transport by alternating log-domain scaling.
pub fn sinkhorn(
    cost_matrix: &ArrayView2<f64>,
    row_marginal: &ArrayView1<f64>,
    col_marginal: &ArrayView1<f64>,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let (n, m) = cost_matrix.dim();
    if row_marginal.len() != n || col_marginal.len() != m {
        return Err(Error::Shape("marginal lengths do not match cost matrix".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::Param(format!("epsilon {epsilon} must be positive")));
    }
    if cost_matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite cost matrix".into()));
    }
    validate_marginal("row", row_marginal)?;
    validate_marginal("col", col_marginal)?;
    let log_a = row_marginal.mapv(f64::ln);
    let log_b = col_marginal.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let logsumexp = |v: &mut dyn Iterator<Item = f64>| -> f64 {
        let vals: Vec<f64> = v.collect();
        let mx = vals.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if mx == f64::NEG_INFINITY {
            return mx;
        }
        mx + vals.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
    };
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    while iterations < max_iters {
        iterations += 1;
        for i in 0..n {
            let lse = logsumexp(&mut (0..m).map(|jj| (g[jj] - cost_matrix[[i, jj]]) / epsilon));
            f[i] = epsilon * (log_a[i] - lse);
        }
        for jj in 0..m {
            let lse = logsumexp(&mut (0..n).map(|i| (f[i] - cost_matrix[[i, jj]]) / epsilon));
            g[jj] = epsilon * (log_b[jj] - lse);
        }
        // marginal check on the implied plan
        err = 0.0f64;
        for i in 0..n {
            let mut row_sum = 0.0;
            for jj in 0..m {
                row_sum += ((f[i] + g[jj] - cost_matrix[[i, jj]]) / epsilon).exp();
            }
            err = err.max((row_sum - row_marginal[i]).abs());
        }
        for jj in 0..m {
            let mut col_sum = 0.0;
            for i in 0..n {
                col_sum += ((f[i] + g[jj] - cost_matrix[[i, jj]]) / epsilon).exp();
            }
            err = err.max((col_sum - col_marginal[jj]).abs());
        }
        if err <= tol {
            break;
        }
    }
    let mut plan = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        for jj in 0..m {
            plan[[i, jj]] = ((f[i] + g[jj] - cost_matrix[[i, jj]]) / epsilon).exp();
        }
    }
    if plan.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sinkhorn scaling produced non-finite mass".into()));
    }
    let cost = (&plan * cost_matrix).sum();
    Ok(TransportPlan {
        plan,
        cost,
        marginal_error: err,
        converged: err <= tol,
        iterations,
    })
}

/// Separation loss between banks with the current pooled features
/// substituted for each bank's most recent stored row. Returns the cost and
/// the gradients with respect to the two current vectors (the matching is a
/// constant for differentiation).
pub struct OtLoss {
    pub cost: f64,
    pub grad_current_a: Array1<f64>,
    pub grad_current_b: Array1<f64>,
}

pub fn ot_loss<T: Scalar>(
    bank_a: &MemoryBank<T>,
    bank_b: &MemoryBank<T>,
    current_a: &ArrayView1<T>,
    current_b: &ArrayView1<T>,
) -> Result<OtLoss> {
    if bank_a.fill != bank_b.fill {
        return Err(Error::State(format!(
            "bank fills differ: {} vs {}",
            bank_a.fill, bank_b.fill
        )));
    }
    if bank_a.fill < 2 {
        return Err(Error::State(format!(
            "banks need at least 2 rows, have {}",
            bank_a.fill
        )));
    }
    let d = bank_a.dim();
    if current_a.len() != d || current_b.len() != d {
        return Err(Error::Shape("current feature dim mismatch".into()));
    }
    let ja = bank_a.latest().expect("non-empty");
    let jb = bank_b.latest().expect("non-empty");
    let mut a: Array2<f64> = bank_a.valid_rows().mapv(|v| v.as_f64());
    let mut b: Array2<f64> = bank_b.valid_rows().mapv(|v| v.as_f64());
    for i in 0..d {
        a[[ja, i]] = current_a[i].as_f64();
        b[[jb, i]] = current_b[i].as_f64();
    }
    let m = sort_match(&a.view(), &b.view())?;
    let mut grad_a = Array1::<f64>::zeros(d);
    let mut grad_b = Array1::<f64>::zeros(d);
    for i in 0..d {
        // row ja of A participates in exactly one matched pair per dimension
        let partner = m.perm[i][ja];
        grad_a[i] = 2.0 * (a[[ja, i]] - b[[partner, i]]);
        // row jb of B likewise, via the inverse assignment
        let inv = m.perm[i]
            .iter()
            .position(|&p| p == jb)
            .expect("permutation covers every row");
        grad_b[i] = -2.0 * (a[[inv, i]] - b[[jb, i]]);
    }
    Ok(OtLoss {
        cost: m.cost,
        grad_current_a: grad_a,
        grad_current_b: grad_b,
    })
}

/// Entropic variant of [`ot_loss`]: dimension by dimension, a Sinkhorn plan
/// over the squared-difference cost replaces the hard sort pairing. Costs
/// and gradients are scaled by J so the value is comparable to the
/// unnormalized sum the matcher reports; the plan is a constant for
/// gradient purposes.
pub fn ot_loss_sinkhorn<T: Scalar>(
    bank_a: &MemoryBank<T>,
    bank_b: &MemoryBank<T>,
    current_a: &ArrayView1<T>,
    current_b: &ArrayView1<T>,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<OtLoss> {
    if bank_a.fill != bank_b.fill {
        return Err(Error::State(format!(
            "bank fills differ: {} vs {}",
            bank_a.fill, bank_b.fill
        )));
    }
    if bank_a.fill < 2 {
        return Err(Error::State(format!(
            "banks need at least 2 rows, have {}",
            bank_a.fill
        )));
    }
    let d = bank_a.dim();
    let ja = bank_a.latest().expect("non-empty");
    let jb = bank_b.latest().expect("non-empty");
    let mut a: Array2<f64> = bank_a.valid_rows().mapv(|v| v.as_f64());
    let mut b: Array2<f64> = bank_b.valid_rows().mapv(|v| v.as_f64());
    for i in 0..d {
        a[[ja, i]] = current_a[i].as_f64();
        b[[jb, i]] = current_b[i].as_f64();
    }
    let j = bank_a.fill;
    let marg = Array1::from_elem(j, 1.0 / j as f64);
    let mut cost = 0.0;
    let mut grad_a = Array1::<f64>::zeros(d);
    let mut grad_b = Array1::<f64>::zeros(d);
    let scale = j as f64;
    for i in 0..d {
        let c = Array2::from_shape_fn((j, j), |(r, q)| {
            let diff = a[[r, i]] - b[[q, i]];
            diff * diff
        });
        let plan = sinkhorn(&c.view(), &marg.view(), &marg.view(), epsilon, max_iters, tol)?;
        cost += scale * plan.cost;
        for q in 0..j {
            grad_a[i] += scale * plan.plan[[ja, q]] * 2.0 * (a[[ja, i]] - b[[q, i]]);
        }
        for r in 0..j {
            grad_b[i] -= scale * plan.plan[[r, jb]] * 2.0 * (a[[r, i]] - b[[jb, i]]);
        }
    }
    Ok(OtLoss {
        cost,
        grad_current_a: grad_a,
        grad_current_b: grad_b,
    })
}

/// Squared Euclidean distance between a pooled feature and a (detached)
/// bank centroid, with its gradient in the pooled feature.
pub fn dis_loss<T: Scalar>(pooled: &ArrayView1<T>, centroid: &ArrayView1<T>) -> Result<(f64, Array1<f64>)> {
    if pooled.len() != centroid.len() {
        return Err(Error::Shape(format!(
            "pooled dim {} vs centroid dim {}",
            pooled.len(),
            centroid.len()
        )));
    }
    let mut cost = 0.0;
    let mut grad = Array1::<f64>::zeros(pooled.len());
    for i in 0..pooled.len() {
        let diff = pooled[i].as_f64() - centroid[i].as_f64();
        cost += diff * diff;
        grad[i] = 2.0 * diff;
    }
    Ok((cost, grad))
}

/// Hinge used by the trained objective: max(0, margin - raw_ot).
pub fn ot_hinge(raw: f64, margin: f64) -> f64 {
    (margin - raw).max(0.0)
}
