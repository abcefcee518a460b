//! Independent reference implementations used as test oracles. Nothing here
//! calls into the code paths it is used to check.

#![allow(dead_code)]

use dcg_core::matrix::Matrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    })
}

/// Small integers, so exact similarity ties show up often.
pub fn lattice(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2i32..=2) as f32)
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&v| v as f64).collect()).collect()
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|a| a / n).collect()
}

fn project_rows(x: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d_out = w[0].len();
    x.iter()
        .map(|row| {
            let out = (0..d_out).map(|c| row.iter().zip(w).map(|(a, wr)| a * wr[c]).sum()).collect();
            normalize(out)
        })
        .collect()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Symmetric CLIP loss computed from scratch in `f64`.
pub fn clip_loss_f64(x: &[Vec<f64>], y: &[Vec<f64>], wi: &[Vec<f64>], wt: &[Vec<f64>], log_scale: f64) -> f64 {
    let s = log_scale.exp().min(100.0);
    let u = project_rows(x, wi);
    let v = project_rows(y, wt);
    let b = u.len();
    let l: Vec<Vec<f64>> = u
        .iter()
        .map(|ui| v.iter().map(|vj| s * ui.iter().zip(vj).map(|(a, c)| a * c).sum::<f64>()).collect())
        .collect();
    let rows: f64 = (0..b).map(|i| log_sum_exp(l[i].iter().copied()) - l[i][i]).sum::<f64>() / b as f64;
    let cols: f64 = (0..b).map(|j| log_sum_exp((0..b).map(|i| l[i][j])) - l[j][j]).sum::<f64>() / b as f64;
    0.5 * (rows + cols)
}

/// Central differences of [`clip_loss_f64`] for every weight and the log scale.
pub struct FdGrads {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub log_scale: f64,
}

pub fn clip_fd_grads(x: &Matrix, y: &Matrix, wi: &Matrix, wt: &Matrix, log_scale: f64, h: f64) -> FdGrads {
    let (xr, yr) = (to_rows(x), to_rows(y));
    let (wi0, wt0) = (to_rows(wi), to_rows(wt));
    let d_out = wi.cols();
    let mut image = Vec::new();
    for r in 0..wi0.len() {
        for c in 0..d_out {
            let (mut p, mut m) = (wi0.clone(), wi0.clone());
            p[r][c] += h;
            m[r][c] -= h;
            image.push((clip_loss_f64(&xr, &yr, &p, &wt0, log_scale) - clip_loss_f64(&xr, &yr, &m, &wt0, log_scale)) / (2.0 * h));
        }
    }
    let mut text = Vec::new();
    for r in 0..wt0.len() {
        for c in 0..d_out {
            let (mut p, mut m) = (wt0.clone(), wt0.clone());
            p[r][c] += h;
            m[r][c] -= h;
            text.push((clip_loss_f64(&xr, &yr, &wi0, &p, log_scale) - clip_loss_f64(&xr, &yr, &wi0, &m, log_scale)) / (2.0 * h));
        }
    }
    let ls = (clip_loss_f64(&xr, &yr, &wi0, &wt0, log_scale + h) - clip_loss_f64(&xr, &yr, &wi0, &wt0, log_scale - h)) / (2.0 * h);
    FdGrads { image, text, log_scale: ls }
}

pub fn rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Position of candidate `i` in row `i` after a full stable sort, best first.
pub fn brute_rank(row: &[f32], i: usize) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    order.iter().position(|&j| j == i).unwrap()
}

pub fn brute_recall(sim: &Matrix, ks: &[usize]) -> Vec<f64> {
    let n = sim.rows();
    ks.iter()
        .map(|&k| (0..n).filter(|&i| brute_rank(sim.row(i), i) < k).count() as f64 / n as f64)
        .collect()
}

/// Gap over a full similarity matrix, summed in natural order.
pub fn brute_gap(sim: &Matrix) -> f64 {
    let n = sim.rows();
    let mut total = 0.0;
    for i in 0..n {
        let mut off = 0.0;
        for j in 0..n {
            if j != i {
                off += sim.get(i, j) as f64;
            }
        }
        total += sim.get(i, i) as f64 - off / (n - 1) as f64;
    }
    total / n as f64
}

/// Adam on one scalar with a constant gradient, written out longhand.
pub fn adam_scalar_reference(w0: f64, g: f64, lr: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut m, mut v, mut w) = (0.0f64, 0.0f64, w0);
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powf(t as f64));
        let v_hat = v / (1.0 - b2.powf(t as f64));
        w -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(w);
    }
    out
}
