//! Reference implementations used only by tests. Nothing here calls into the
//! library's linear algebra; inputs and outputs are plain row-major buffers.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Dense {
        let mut t = Dense::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.at(r, c);
            }
        }
        t
    }

    pub fn matmul(&self, b: &Dense) -> Dense {
        assert_eq!(self.cols, b.rows);
        let mut out = Dense::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..b.cols {
                    out.data[i * b.cols + j] += a * b.at(k, j);
                }
            }
        }
        out
    }

    pub fn zip(&self, b: &Dense, f: impl Fn(f64, f64) -> f64) -> Dense {
        assert_eq!((self.rows, self.cols), (b.rows, b.cols));
        Dense::new(
            self.rows,
            self.cols,
            self.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Dense {
    let data = (0..rows * cols)
        .map(|_| {
            // Box-Muller, so the oracle side owns its sampling too
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Dense::new(rows, cols, data)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
pub struct JacobiSvd {
    /// Descending.
    pub sigma: Vec<f64>,
    /// Right-singular vectors, one per entry of `sigma`.
    pub v: Vec<Vec<f64>>,
    /// Left-singular vectors; zero vectors where `sigma` is zero.
    pub u: Vec<Vec<f64>>,
}

/// Orthogonalizes the columns of `cols` in place, applying the same
/// rotations to `acc`.
fn hestenes(cols: &mut [Vec<f64>], acc: &mut [Vec<f64>]) {
    let n = cols.len();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for vecs in [&mut *cols, &mut *acc] {
                    let (lo, hi) = vecs.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (a, b) = (*x, *y);
                        *x = c * a - s * b;
                        *y = s * a + c * b;
                    }
                }
            }
        }
        if !rotated {
            return;
        }
    }
    panic!("jacobi svd did not converge");
}

pub fn jacobi_svd(a: &Dense) -> JacobiSvd {
    let tall = a.rows >= a.cols;
    let b = if tall { a.clone() } else { a.transpose() };
    let (m, n) = (b.rows, b.cols);
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| b.at(i, j)).collect()).collect();
    let mut acc: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    hestenes(&mut cols, &mut acc);

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut sigma = Vec::new();
    let mut left = Vec::new();
    let mut right = Vec::new();
    for &j in &order {
        let s = norms[j];
        let unit: Vec<f64> = if s > 0.0 {
            cols[j].iter().map(|x| x / s).collect()
        } else {
            vec![0.0; m]
        };
        sigma.push(s);
        left.push(unit);
        right.push(acc[j].clone());
    }
    if tall {
        JacobiSvd { sigma, v: right, u: left }
    } else {
        JacobiSvd { sigma, v: left, u: right }
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &Dense) -> Vec<f64> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut m = a.data.clone();
    let idx = |r: usize, c: usize| r * n + c;
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| m[idx(r, c)].powi(2))
            .sum();
        let diag: f64 = (0..n).map(|i| m[idx(i, i)].powi(2)).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[idx(q, q)] - m[idx(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[idx(k, p)], m[idx(k, q)]);
                    m[idx(k, p)] = c * akp - s * akq;
                    m[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[idx(p, k)], m[idx(q, k)]);
                    m[idx(p, k)] = c * apk - s * aqk;
                    m[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| m[idx(i, i)]).collect()
}

/// `Σ √λᵢ(AᵀA)` over the smaller Gram matrix.
pub fn nuclear_norm_eig(a: &Dense) -> f64 {
    let at = a.transpose();
    let gram = if a.rows >= a.cols { at.matmul(a) } else { a.matmul(&at) };
    jacobi_eigenvalues(&gram).iter().map(|l| l.max(0.0).sqrt()).sum()
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn spectral_norm_power(a: &Dense, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut x: Vec<f64> = (0..a.cols).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut estimate = 0.0;
    for _ in 0..20_000 {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= norm);
        let ax: Vec<f64> = (0..a.rows)
            .map(|i| (0..a.cols).map(|j| a.at(i, j) * x[j]).sum())
            .collect();
        let next = ax.iter().map(|v| v * v).sum::<f64>().sqrt();
        x = (0..a.cols)
            .map(|j| (0..a.rows).map(|i| a.at(i, j) * ax[i]).sum())
            .collect();
        if (next - estimate).abs() <= 1e-15 * next {
            return next;
        }
        estimate = next;
    }
    estimate
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gains {
    Raw,
    MaxNorm,
    Ones,
}

/// One layer of subspace-projected merging, written out step by step:
/// decompose both deltas, score corresponding right-singular directions,
/// gate on the first score, rescale to the target's nuclear norm, weight
/// the target's right subspace by softmax importance and project.
/// Returns `None` when the donor is not selected.
pub fn ip_layer_script(
    w0: &Dense,
    w_mllm: &Dense,
    w_llms: &[&Dense],
    threshold: f64,
    gains: Gains,
) -> Option<Dense> {
    let dm = w_mllm.zip(w0, |a, b| a - b);
    let svd_m = jacobi_svd(&dm);
    let k = dm.rows.min(dm.cols);
    let n = dm.cols;
    let mut out = w_mllm.clone();
    let mut any = false;
    for w_llm in w_llms {
        let dv = w_llm.zip(w0, |a, b| a - b);
        let svd_v = jacobi_svd(&dv);

        let mut s = Vec::with_capacity(k);
        for i in 0..k {
            let (a, b) = (&svd_m.v[i], &svd_v.v[i]);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            s.push((dot.abs() / (na * nb)).min(1.0));
        }
        if s[0] < threshold {
            continue;
        }
        any = true;

        let nuc_m: f64 = svd_m.sigma.iter().sum();
        let nuc_v: f64 = svd_v.sigma.iter().sum();
        let lambda = nuc_m / nuc_v;

        let exps: Vec<f64> = s.iter().map(|x| x.exp()).collect();
        let total: f64 = exps.iter().sum();
        let gamma: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let top = gamma.iter().cloned().fold(0.0, f64::max);
        let g: Vec<f64> = match gains {
            Gains::Raw => gamma,
            Gains::MaxNorm => gamma.iter().map(|x| x / top).collect(),
            Gains::Ones => vec![1.0; k],
        };

        let mut p = Dense::zeros(n, n);
        for i in 0..k {
            let w = g[i] * g[i];
            for r in 0..n {
                for c in 0..n {
                    p.data[r * n + c] += w * svd_m.v[i][r] * svd_m.v[i][c];
                }
            }
        }
        let update = dv.matmul(&p);
        out = out.zip(&update, |a, b| a + lambda * b);
    }
    any.then_some(out)
}

pub fn task_arithmetic_script(w0: &Dense, w_mllm: &Dense, w_llms: &[&Dense], alphas: &[f64]) -> Dense {
    let mut out = w_mllm.clone();
    for (w, a) in w_llms.iter().zip(alphas) {
        let d = w.zip(w0, |x, y| x - y);
        out = out.zip(&d, |x, y| x + a * y);
    }
    out
}

fn sign_of_first_nonzero(vals: &[f64]) -> f64 {
    for v in vals {
        if *v > 0.0 {
            return 1.0;
        }
        if *v < 0.0 {
            return -1.0;
        }
    }
    0.0
}

fn elected(vals: &[f64]) -> f64 {
    let total: f64 = vals.iter().sum();
    if total > 0.0 {
        1.0
    } else if total < 0.0 {
        -1.0
    } else {
        sign_of_first_nonzero(vals)
    }
}

/// Ties over `[ΔW_MLLM, ΔW_donor…]`: keep the top `ceil(n·retain)` entries by
/// magnitude (earlier index first on equal magnitude), elect signs, average
/// the agreeing entries, scale by `alpha`.
pub fn ties_script(w0: &Dense, w_mllm: &Dense, w_llms: &[&Dense], retain: f64, alpha: f64) -> Dense {
    let mut tasks = vec![w_mllm.zip(w0, |a, b| a - b)];
    tasks.extend(w_llms.iter().map(|w| w.zip(w0, |a, b| a - b)));
    let n = w0.data.len();
    let keep = ((n as f64 * retain) - 1e-9).ceil() as usize;
    let trimmed: Vec<Vec<f64>> = tasks
        .iter()
        .map(|t| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| {
                t.data[j].abs().partial_cmp(&t.data[i].abs()).unwrap().then(i.cmp(&j))
            });
            let mut out = vec![0.0; n];
            for &i in order.iter().take(keep) {
                out[i] = t.data[i];
            }
            out
        })
        .collect();
    let mut out = w0.clone();
    for j in 0..n {
        let column: Vec<f64> = trimmed.iter().map(|t| t[j]).collect();
        let sign = elected(&column);
        let agreeing: Vec<f64> = column
            .iter()
            .copied()
            .filter(|v| (*v > 0.0 && sign > 0.0) || (*v < 0.0 && sign < 0.0))
            .collect();
        let mean = if agreeing.is_empty() {
            0.0
        } else {
            agreeing.iter().sum::<f64>() / agreeing.len() as f64
        };
        out.data[j] += alpha * mean;
    }
    out
}

/// EMR for the MLLM: unified vector from elected signs and the largest
/// agreeing magnitude, masked by the MLLM's signs, rescaled to the MLLM's
/// total absolute value.
pub fn emr_script(w0: &Dense, w_mllm: &Dense, w_llms: &[&Dense]) -> Dense {
    let target = w_mllm.zip(w0, |a, b| a - b);
    let mut tasks = vec![target.clone()];
    tasks.extend(w_llms.iter().map(|w| w.zip(w0, |a, b| a - b)));
    let n = w0.data.len();
    let mut masked = vec![0.0; n];
    for j in 0..n {
        let column: Vec<f64> = tasks.iter().map(|t| t.data[j]).collect();
        let sign = elected(&column);
        let mut mag: f64 = 0.0;
        for v in &column {
            if (*v > 0.0 && sign > 0.0) || (*v < 0.0 && sign < 0.0) {
                mag = mag.max(v.abs());
            }
        }
        let uni = sign * mag;
        if target.data[j] * uni > 0.0 {
            masked[j] = uni;
        }
    }
    let num: f64 = target.data.iter().map(|v| v.abs()).sum();
    let den: f64 = masked.iter().map(|v| v.abs()).sum();
    let scale = if den == 0.0 { 0.0 } else { num / den };
    let mut out = w0.clone();
    for j in 0..n {
        out.data[j] += scale * masked[j];
    }
    out
}
