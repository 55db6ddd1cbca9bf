use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LinalgError, Matrix};

/// Singular values below this fraction of `σ_max` are set to exactly zero.
pub const SIGMA_CLAMP_RELATIVE: f64 = 1e-12;

const OVERSAMPLE: usize = 10;
const POWER_ITERATIONS: usize = 6;
const SKETCH_SEED: u64 = 0x1f0e_3a7c_5b2d_9e41;

/// Thin SVD `A = U · diag(σ) · Vᵀ` with `σ` sorted descending.
///
/// Each right-singular vector is sign-normalized so that its
/// largest-magnitude entry (first one on ties) is positive; the matching
/// left vector is flipped with it.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `rows × k`
    pub u: Matrix,
    pub sigma: Vec<f64>,
    /// `k × cols`; row `i` is the i-th right-singular vector.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// The i-th right-singular vector.
    pub fn right_vector(&self, i: usize) -> &[f64] {
        self.vt.row(i)
    }

    pub fn left_vector(&self, i: usize) -> Vec<f64> {
        (0..self.u.rows()).map(|r| self.u.get(r, i)).collect()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.sigma.iter().enumerate() {
                us.set(r, c, us.get(r, c) * s);
            }
        }
        us.matmul(&self.vt).expect("svd factors are conformant")
    }
}

/// Full thin SVD, or the top-`rank_limit` singular triples when a limit is
/// given. Limits well below `min(rows, cols)` use a seeded randomized range
/// finder with power iterations; otherwise the full decomposition is
/// truncated.
pub fn svd(a: &Matrix, rank_limit: Option<usize>) -> Result<SvdResult, LinalgError> {
    a.check_finite()?;
    let (rows, cols) = a.shape();
    let k = rows.min(cols);
    if let Some(r) = rank_limit {
        if r > k {
            return Err(LinalgError::RankTooLarge {
                requested: r,
                max: k,
            });
        }
    }
    if k == 0 {
        return Ok(SvdResult {
            u: Matrix::zeros(rows, 0),
            sigma: Vec::new(),
            vt: Matrix::zeros(0, cols),
        });
    }

    let mut result = match rank_limit {
        Some(r) if r + OVERSAMPLE < k => randomized(a, r)?,
        Some(r) => truncate(full(&a.to_nalgebra())?, r),
        None => full(&a.to_nalgebra())?,
    };
    normalize_signs(&mut result);
    clamp_small(&mut result.sigma);
    Ok(result)
}

fn full(a: &DMatrix<f64>) -> Result<SvdResult, LinalgError> {
    let (rows, cols) = a.shape();
    let svd = a
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or(LinalgError::NoConvergence { rows, cols })?;
    let u = svd.u.ok_or(LinalgError::NoConvergence { rows, cols })?;
    let vt = svd.v_t.ok_or(LinalgError::NoConvergence { rows, cols })?;
    Ok(sorted(&u, svd.singular_values.as_slice(), &vt))
}

fn sorted(u: &DMatrix<f64>, sigma: &[f64], vt: &DMatrix<f64>) -> SvdResult {
    let k = sigma.len();
    let mut order: Vec<usize> = (0..k).collect();
    // stable sort keeps index order for exactly equal values
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let u_out = Matrix::from_fn(u.nrows(), k, |r, c| u[(r, order[c])]);
    let vt_out = Matrix::from_fn(k, vt.ncols(), |r, c| vt[(order[r], c)]);
    let sigma_out = order.iter().map(|&i| sigma[i].max(0.0)).collect();
    SvdResult {
        u: u_out,
        sigma: sigma_out,
        vt: vt_out,
    }
}

fn truncate(full: SvdResult, r: usize) -> SvdResult {
    SvdResult {
        u: Matrix::from_fn(full.u.rows(), r, |row, c| full.u.get(row, c)),
        sigma: full.sigma[..r].to_vec(),
        vt: Matrix::from_fn(r, full.vt.cols(), |row, c| full.vt.get(row, c)),
    }
}

fn randomized(a: &Matrix, r: usize) -> Result<SvdResult, LinalgError> {
    let (rows, cols) = a.shape();
    let l = r + OVERSAMPLE;
    let a_na = a.to_nalgebra();
    let mut rng = ChaCha8Rng::seed_from_u64(SKETCH_SEED);
    let omega = DMatrix::<f64>::from_fn(cols, l, |_, _| StandardNormal.sample(&mut rng));

    let mut q = (&a_na * omega).qr().q();
    for _ in 0..POWER_ITERATIONS {
        let z = (a_na.transpose() * &q).qr().q();
        q = (&a_na * z).qr().q();
    }
    let b = q.transpose() * &a_na;
    let small = full(&b)?;
    let u = &q * small.u.to_nalgebra();
    let approx = SvdResult {
        u: Matrix::from_nalgebra(&u),
        sigma: small.sigma,
        vt: small.vt,
    };
    debug_assert_eq!(approx.u.rows(), rows);
    Ok(truncate(approx, r))
}

fn normalize_signs(s: &mut SvdResult) {
    for i in 0..s.vt.rows() {
        let row = s.vt.row(i);
        let mut pivot = 0;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > row[pivot].abs() {
                pivot = j;
            }
        }
        if row[pivot] < 0.0 {
            for j in 0..s.vt.cols() {
                s.vt.set(i, j, -s.vt.get(i, j));
            }
            for r in 0..s.u.rows() {
                s.u.set(r, i, -s.u.get(r, i));
            }
        }
    }
}

fn clamp_small(sigma: &mut [f64]) {
    let max = sigma.first().copied().unwrap_or(0.0);
    let floor = max * SIGMA_CLAMP_RELATIVE;
    for s in sigma.iter_mut() {
        if *s < floor {
            *s = 0.0;
        }
    }
}
