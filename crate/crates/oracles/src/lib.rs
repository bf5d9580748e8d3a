//! Reference computations written directly from the definitions, on plain
//! `Vec<Vec<f64>>` rows, with no shared code with the library under test.
//! Everything here favours obviousness over speed.

#![allow(clippy::needless_range_loop)]

pub type Rows = Vec<Vec<f64>>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn cosine_matrix(x: &Rows) -> Rows {
    let n = x.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            s[i][j] = cosine(&x[i], &x[j]);
        }
    }
    s
}

/// Anchor indices by repeated selection of the remaining row with the lowest
/// off-diagonal sum, lower index first on ties.
pub fn anchors_by_selection(sim: &Rows, k: usize) -> Vec<usize> {
    let n = sim.len();
    let mut sums = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sums[i] += sim[i][j];
            }
        }
    }
    let mut taken = vec![false; n];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if sums[i] < sums[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.expect("k <= n");
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Squared Euclidean distance between every row of `a` and every row of `b`.
pub fn sq_dist(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .map(|x| {
            b.iter()
                .map(|y| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
                .collect()
        })
        .collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Optimal transport cost between uniform marginals on a square cost matrix.
/// The vertices of the transport polytope are scaled permutation matrices,
/// so the LP optimum is the best assignment divided by `n`.
pub fn uniform_ot_optimum(cost: &Rows) -> f64 {
    let n = cost.len();
    permutations(n)
        .iter()
        .map(|p| (0..n).map(|i| cost[i][p[i]]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        / n as f64
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Plain log-domain Sinkhorn with uniform marginals: alternating exact
/// dual updates for `iters` rounds. Returns the plan.
pub fn log_sinkhorn(cost: &Rows, eps: f64, iters: usize) -> Rows {
    let n = cost.len();
    let m = cost[0].len();
    let (la, lb) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for _ in 0..iters {
        for i in 0..n {
            let t: Vec<f64> = (0..m).map(|j| (g[j] - cost[i][j]) / eps).collect();
            f[i] = eps * (la - log_sum_exp(&t));
        }
        for j in 0..m {
            let t: Vec<f64> = (0..n).map(|i| (f[i] - cost[i][j]) / eps).collect();
            g[j] = eps * (lb - log_sum_exp(&t));
        }
    }
    (0..n)
        .map(|i| (0..m).map(|j| ((f[i] + g[j] - cost[i][j]) / eps).exp()).collect())
        .collect()
}

pub fn frobenius(a: &Rows, b: &Rows) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        for j in 0..a[i].len() {
            s += a[i][j] * b[i][j];
        }
    }
    s
}

fn column(x: &Rows, j: usize) -> Vec<f64> {
    x.iter().map(|r| r[j]).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Concordance correlation coefficient, population moments, no floor.
pub fn ccc(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for i in 0..x.len() {
        vx += (x[i] - mx) * (x[i] - mx);
        vy += (y[i] - my) * (y[i] - my);
        cov += (x[i] - mx) * (y[i] - my);
    }
    let n = x.len() as f64;
    let (vx, vy, cov) = (vx / n, vy / n, cov / n);
    2.0 * cov / (vx + vy + (mx - my) * (mx - my))
}

/// `1 − mean over columns of CCC(pred_j, target_j)`.
pub fn ccc_loss(pred: &Rows, target: &Rows) -> f64 {
    let d = pred[0].len();
    let mut total = 0.0;
    for j in 0..d {
        total += ccc(&column(pred, j), &column(target, j));
    }
    1.0 - total / d as f64
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean negative log-likelihood of `labels` under softmax(logits).
pub fn cross_entropy(logits: &Rows, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (z, &c) in logits.iter().zip(labels) {
        total -= softmax(z)[c].ln();
    }
    total / logits.len() as f64
}

/// `‖mean(teacher) − mean(student)‖²` over rows.
pub fn centroid_loss(teacher: &Rows, student: &Rows) -> f64 {
    let d = teacher[0].len();
    let mut s = 0.0;
    for j in 0..d {
        let diff = mean(&column(teacher, j)) - mean(&column(student, j));
        s += diff * diff;
    }
    s
}

/// Batch mean of `1 − cos(a_i, b_i)`.
pub fn cosine_distance(a: &Rows, b: &Rows) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += 1.0 - cosine(&a[i], &b[i]);
    }
    s / a.len() as f64
}

/// Sum over adapted backbones of their cosine distance to the joint rows.
pub fn alignment_loss(adapted: &[Rows], joint: &Rows) -> f64 {
    adapted.iter().map(|a| cosine_distance(a, joint)).sum()
}

/// Mean over all entries of `(t − s)²`.
pub fn mse(t: &Rows, s: &Rows) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..t.len() {
        for j in 0..t[i].len() {
            total += (t[i][j] - s[i][j]) * (t[i][j] - s[i][j]);
            count += 1.0;
        }
    }
    total / count
}

/// Batch mean of `KL(softmax(t_i) ‖ softmax(s_i))`.
pub fn kl(t: &Rows, s: &Rows) -> f64 {
    let mut total = 0.0;
    for i in 0..t.len() {
        let p = softmax(&t[i]);
        let q = softmax(&s[i]);
        for k in 0..p.len() {
            total += p[k] * (p[k].ln() - q[k].ln());
        }
    }
    total / t.len() as f64
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Rows, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    x
}

/// Ordinary least squares with an intercept. Returns `[intercept, w...]`.
pub fn least_squares(x: &Rows, y: &[f64]) -> Vec<f64> {
    let d = x[0].len() + 1;
    let mut xtx = vec![vec![0.0; d]; d];
    let mut xty = vec![0.0; d];
    for (row, &t) in x.iter().zip(y) {
        let mut z = vec![1.0];
        z.extend_from_slice(row);
        for i in 0..d {
            xty[i] += z[i] * t;
            for j in 0..d {
                xtx[i][j] += z[i] * z[j];
            }
        }
    }
    // A whisker of ridge keeps exactly collinear designs solvable.
    for (i, r) in xtx.iter_mut().enumerate() {
        r[i] += 1e-9;
    }
    solve(xtx, xty)
}

pub fn predict(w: &[f64], x: &Rows) -> Vec<f64> {
    x.iter().map(|r| w[0] + dot(&w[1..], r)).collect()
}

/// Coefficient of determination.
pub fn r_squared(pred: &[f64], y: &[f64]) -> f64 {
    let my = mean(y);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..y.len() {
        ss_res += (y[i] - pred[i]) * (y[i] - pred[i]);
        ss_tot += (y[i] - my) * (y[i] - my);
    }
    1.0 - ss_res / ss_tot
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_are_complete() {
        let p = permutations(4);
        assert_eq!(p.len(), 24);
        let mut sorted = p.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 24);
    }

    #[test]
    fn assignment_example() {
        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        // Best assignment 1 + 2 + 2 = 5.
        assert!((uniform_ot_optimum(&c) - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn least_squares_recovers_a_plane() {
        let x: Rows = (0..20).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 1.5 - 2.0 * r[0] + 0.25 * r[1]).collect();
        let w = least_squares(&x, &y);
        for (a, b) in w.iter().zip([1.5, -2.0, 0.25]) {
            assert!((a - b).abs() < 1e-6, "{w:?}");
        }
        assert!((r_squared(&predict(&w, &x), &y) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn log_sinkhorn_marginals() {
        let c = vec![vec![0.3, 1.0], vec![0.7, 0.1], vec![0.0, 0.5]];
        let p = log_sinkhorn(&c, 0.1, 500);
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0 / 3.0).abs() < 1e-9);
        }
    }
}
