//! Multi-head attention with an exact backward pass.
//!
//! Per head `h` the score and value paths collapse into two `d x d` forms,
//! `A_h = Wq_h^T Wk_h` and `B_h = Wo_h Wv_h`, so that
//!
//! ```text
//! score_ij = x_i^T A_h s_j / sqrt(e)
//! out_i    = sum_h B_h sum_j softmax_j(score_ij) s_j
//! ```
//!
//! which is the usual Q/K/V/O attention. Products are associated toward
//! whichever side (queries or sources) is smaller, which keeps the cost
//! linear in the number of image cells.

use crate::math::{axpy, dot};

#[derive(Clone, Copy)]
pub(crate) struct AttnParams<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
}

pub(crate) struct AttnGrads<'a> {
    pub wq: &'a mut [f64],
    pub wk: &'a mut [f64],
    pub wv: &'a mut [f64],
    pub wo: &'a mut [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    /// Few queries: precompute per-query vectors.
    Queries,
    /// Few sources: precompute per-source vectors.
    Sources,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    n: usize,
    m: usize,
    side: Side,
    /// `H x d x d`
    a_forms: Vec<f64>,
    /// `H x d x d`
    b_forms: Vec<f64>,
    /// `H x n x m`
    probs: Vec<f64>,
    /// `U_h = A_h^T x_i` (`H x n x d`) or `R_h = A_h s_j` (`H x m x d`).
    proj: Vec<f64>,
    /// `C_h = sum_j a_ij s_j` (`H x n x d`) or `Z_h = B_h s_j` (`H x m x d`).
    mix: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub d: usize,
    pub heads: usize,
}

impl Dims {
    fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

fn forms(p: &AttnParams, dims: Dims) -> (Vec<f64>, Vec<f64>) {
    let Dims { d, heads } = dims;
    let e = dims.head_dim();
    let mut a = vec![0.0; heads * d * d];
    let mut b = vec![0.0; heads * d * d];
    for h in 0..heads {
        let ah = &mut a[h * d * d..(h + 1) * d * d];
        let bh = &mut b[h * d * d..(h + 1) * d * d];
        for k in h * e..(h + 1) * e {
            let wq_k = &p.wq[k * d..(k + 1) * d];
            let wk_k = &p.wk[k * d..(k + 1) * d];
            let wv_k = &p.wv[k * d..(k + 1) * d];
            for r in 0..d {
                axpy(wq_k[r], wk_k, &mut ah[r * d..(r + 1) * d]);
                axpy(p.wo[r * d + k], wv_k, &mut bh[r * d..(r + 1) * d]);
            }
        }
    }
    (a, b)
}

/// `out[c] = sum_r v[r] * mat[r][c]`
fn vec_mat(v: &[f64], mat: &[f64], d: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (r, &vr) in v.iter().enumerate() {
        if vr != 0.0 {
            axpy(vr, &mat[r * d..(r + 1) * d], out);
        }
    }
}

/// `out[r] += sum_c mat[r][c] * v[c]`
fn mat_vec_add(mat: &[f64], v: &[f64], d: usize, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&mat[r * d..(r + 1) * d], v);
    }
}

/// `mat[r][c] += u[r] * v[c]`
fn outer_add(u: &[f64], v: &[f64], d: usize, mat: &mut [f64]) {
    for (r, &ur) in u.iter().enumerate() {
        if ur != 0.0 {
            axpy(ur, v, &mut mat[r * d..(r + 1) * d]);
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Attention of `n` queries `x` over `m` sources `s`, both `d`-dimensional
/// row-major. Returns the `n x d` update (no residual).
pub(crate) fn forward(
    x: &[f64],
    n: usize,
    s: &[f64],
    m: usize,
    dims: Dims,
    p: &AttnParams,
) -> (Vec<f64>, AttnCache) {
    let Dims { d, heads } = dims;
    let scale = 1.0 / (dims.head_dim() as f64).sqrt();
    let (a_forms, b_forms) = forms(p, dims);
    let side = if n <= m { Side::Queries } else { Side::Sources };
    let mut probs = vec![0.0; heads * n * m];
    let mut out = vec![0.0; n * d];
    let mut proj;
    let mut mix;

    match side {
        Side::Queries => {
            proj = vec![0.0; heads * n * d];
            mix = vec![0.0; heads * n * d];
            for h in 0..heads {
                let ah = &a_forms[h * d * d..(h + 1) * d * d];
                let bh = &b_forms[h * d * d..(h + 1) * d * d];
                for i in 0..n {
                    let u = &mut proj[(h * n + i) * d..(h * n + i + 1) * d];
                    vec_mat(&x[i * d..(i + 1) * d], ah, d, u);
                    let row = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = scale * dot(u, &s[j * d..(j + 1) * d]);
                    }
                    softmax_in_place(row);
                    let c = &mut mix[(h * n + i) * d..(h * n + i + 1) * d];
                    for (j, &a) in row.iter().enumerate() {
                        axpy(a, &s[j * d..(j + 1) * d], c);
                    }
                    mat_vec_add(bh, c, d, &mut out[i * d..(i + 1) * d]);
                }
            }
        }
        Side::Sources => {
            proj = vec![0.0; heads * m * d];
            mix = vec![0.0; heads * m * d];
            for h in 0..heads {
                let ah = &a_forms[h * d * d..(h + 1) * d * d];
                let bh = &b_forms[h * d * d..(h + 1) * d * d];
                for j in 0..m {
                    let sj = &s[j * d..(j + 1) * d];
                    mat_vec_add(ah, sj, d, &mut proj[(h * m + j) * d..(h * m + j + 1) * d]);
                    mat_vec_add(bh, sj, d, &mut mix[(h * m + j) * d..(h * m + j + 1) * d]);
                }
                for i in 0..n {
                    let xi = &x[i * d..(i + 1) * d];
                    let row = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = scale * dot(xi, &proj[(h * m + j) * d..(h * m + j + 1) * d]);
                    }
                    softmax_in_place(row);
                    let oi = &mut out[i * d..(i + 1) * d];
                    for (j, &a) in row.iter().enumerate() {
                        axpy(a, &mix[(h * m + j) * d..(h * m + j + 1) * d], oi);
                    }
                }
            }
        }
    }

    let cache = AttnCache {
        n,
        m,
        side,
        a_forms,
        b_forms,
        probs,
        proj,
        mix,
    };
    (out, cache)
}

/// Backpropagates `dout` (`n x d`). Weight gradients are accumulated into
/// `grads`; input gradients are accumulated into `dx` and `ds`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    x: &[f64],
    s: &[f64],
    cache: &AttnCache,
    dims: Dims,
    p: &AttnParams,
    dout: &[f64],
    grads: &mut AttnGrads,
    dx: &mut [f64],
    ds: &mut [f64],
) {
    let Dims { d, heads } = dims;
    let e = dims.head_dim();
    let scale = 1.0 / (e as f64).sqrt();
    let (n, m) = (cache.n, cache.m);
    let mut da_form = vec![0.0; d * d];
    let mut db_form = vec![0.0; d * d];
    let mut da_row = vec![0.0; m];
    let mut tmp = vec![0.0; d];

    for h in 0..heads {
        let ah = &cache.a_forms[h * d * d..(h + 1) * d * d];
        let bh = &cache.b_forms[h * d * d..(h + 1) * d * d];
        da_form.iter_mut().for_each(|v| *v = 0.0);
        db_form.iter_mut().for_each(|v| *v = 0.0);

        match cache.side {
            Side::Queries => {
                let mut v_h = vec![0.0; d];
                let mut g_h = vec![0.0; d];
                for i in 0..n {
                    let di = &dout[i * d..(i + 1) * d];
                    let xi = &x[i * d..(i + 1) * d];
                    let probs = &cache.probs[(h * n + i) * m..(h * n + i + 1) * m];
                    let u = &cache.proj[(h * n + i) * d..(h * n + i + 1) * d];
                    let c = &cache.mix[(h * n + i) * d..(h * n + i + 1) * d];
                    vec_mat(di, bh, d, &mut v_h);
                    for (j, da) in da_row.iter_mut().enumerate() {
                        *da = dot(&v_h, &s[j * d..(j + 1) * d]);
                    }
                    let mean: f64 = probs.iter().zip(&da_row).map(|(a, g)| a * g).sum();
                    g_h.iter_mut().for_each(|v| *v = 0.0);
                    for j in 0..m {
                        let a = probs[j];
                        let g = scale * a * (da_row[j] - mean);
                        let sj = &s[j * d..(j + 1) * d];
                        axpy(g, sj, &mut g_h);
                        let dsj = &mut ds[j * d..(j + 1) * d];
                        axpy(g, u, dsj);
                        axpy(a, &v_h, dsj);
                    }
                    outer_add(di, c, d, &mut db_form);
                    outer_add(xi, &g_h, d, &mut da_form);
                    mat_vec_add(ah, &g_h, d, &mut dx[i * d..(i + 1) * d]);
                }
            }
            Side::Sources => {
                let mut k_h = vec![0.0; m * d];
                let mut q_h = vec![0.0; m * d];
                for i in 0..n {
                    let di = &dout[i * d..(i + 1) * d];
                    let xi = &x[i * d..(i + 1) * d];
                    let probs = &cache.probs[(h * n + i) * m..(h * n + i + 1) * m];
                    for (j, da) in da_row.iter_mut().enumerate() {
                        *da = dot(di, &cache.mix[(h * m + j) * d..(h * m + j + 1) * d]);
                    }
                    let mean: f64 = probs.iter().zip(&da_row).map(|(a, g)| a * g).sum();
                    let dxi = &mut dx[i * d..(i + 1) * d];
                    for j in 0..m {
                        let a = probs[j];
                        let g = scale * a * (da_row[j] - mean);
                        axpy(g, &cache.proj[(h * m + j) * d..(h * m + j + 1) * d], dxi);
                        axpy(g, xi, &mut k_h[j * d..(j + 1) * d]);
                        axpy(a, di, &mut q_h[j * d..(j + 1) * d]);
                    }
                }
                for j in 0..m {
                    let sj = &s[j * d..(j + 1) * d];
                    let kj = &k_h[j * d..(j + 1) * d];
                    let qj = &q_h[j * d..(j + 1) * d];
                    outer_add(kj, sj, d, &mut da_form);
                    outer_add(qj, sj, d, &mut db_form);
                    let dsj = &mut ds[j * d..(j + 1) * d];
                    vec_mat(kj, ah, d, &mut tmp);
                    axpy(1.0, &tmp, dsj);
                    vec_mat(qj, bh, d, &mut tmp);
                    axpy(1.0, &tmp, dsj);
                }
            }
        }

        // A_h = Wq_h^T Wk_h, B_h = Wo_h Wv_h
        for k in h * e..(h + 1) * e {
            let wq_k = &p.wq[k * d..(k + 1) * d];
            let wk_k = &p.wk[k * d..(k + 1) * d];
            let wv_k = &p.wv[k * d..(k + 1) * d];
            for r in 0..d {
                grads.wq[k * d + r] += dot(wk_k, &da_form[r * d..(r + 1) * d]);
                let dwk = &mut grads.wk[k * d..(k + 1) * d];
                axpy(wq_k[r], &da_form[r * d..(r + 1) * d], dwk);
                grads.wo[r * d + k] += dot(&db_form[r * d..(r + 1) * d], wv_k);
                let dwv = &mut grads.wv[k * d..(k + 1) * d];
                axpy(p.wo[r * d + k], &db_form[r * d..(r + 1) * d], dwv);
            }
        }
    }
}
