//! Dual linear projection heads and the symmetric contrastive loss.
//!
//! Both heads are bias-free `d_in x d_out` maps followed by row
//! normalisation, so logits are scaled cosine similarities. The logit
//! scale is learned in log space and clamped at [`MAX_LOGIT_SCALE`] when
//! read.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{l2_normalize_rows, matmul, Mat64, Matrix, NORM_EPS};
use crate::rng;

pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// `ln(1 / 0.07)`, the usual CLIP starting temperature.
pub fn initial_log_logit_scale() -> f32 {
    (1.0f64 / 0.07).ln() as f32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub weight: Matrix,
}

impl ProjectionHead {
    pub fn new(weight: Matrix) -> Self {
        Self { weight }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    /// `l2_normalize_rows(x * W)`.
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in() {
            return Err(Error::shape("project", x.shape(), self.weight.shape()));
        }
        Ok(l2_normalize_rows(&matmul(x, &self.weight)?))
    }
}

pub fn project(head: &ProjectionHead, x: &Matrix) -> Result<Matrix> {
    head.project(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualProjector {
    pub image_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub log_logit_scale: f32,
}

impl DualProjector {
    pub fn new(image_head: ProjectionHead, text_head: ProjectionHead, log_logit_scale: f32) -> Result<Self> {
        if image_head.d_out() != text_head.d_out() {
            return Err(Error::shape("DualProjector::new", image_head.weight.shape(), text_head.weight.shape()));
        }
        Ok(Self {
            image_head,
            text_head,
            log_logit_scale,
        })
    }

    /// Identity heads of width `dim`, mostly useful as an untrained reference.
    pub fn identity(dim: usize) -> Self {
        Self {
            image_head: ProjectionHead::new(Matrix::identity(dim)),
            text_head: ProjectionHead::new(Matrix::identity(dim)),
            log_logit_scale: initial_log_logit_scale(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.image_head.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.image_head.d_out()
    }

    /// `exp(log_logit_scale)` clamped to `(0, 100]`.
    pub fn logit_scale(&self) -> f64 {
        (self.log_logit_scale as f64).exp().min(MAX_LOGIT_SCALE)
    }

    fn scale_is_clamped(&self) -> bool {
        (self.log_logit_scale as f64).exp() > MAX_LOGIT_SCALE
    }

    pub fn project_images(&self, x: &Matrix) -> Result<Matrix> {
        self.image_head.project(x)
    }

    pub fn project_texts(&self, y: &Matrix) -> Result<Matrix> {
        self.text_head.project(y)
    }

    /// Same projector with the two heads exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            image_head: self.text_head.clone(),
            text_head: self.image_head.clone(),
            log_logit_scale: self.log_logit_scale,
        }
    }
}

/// Xavier-uniform heads and the standard initial temperature.
pub fn init_projector(d_in: usize, d_out: usize, seed: u64) -> Result<DualProjector> {
    if d_in == 0 || d_out == 0 {
        return Err(Error::Argument(format!(
            "projection dimensions must be positive, got {d_in}x{d_out}"
        )));
    }
    let bound = xavier_bound(d_in, d_out) as f32;
    let mut rng = rng::seeded(seed, rng::STREAM_INIT);
    let mut head = || {
        let w = Matrix::from_fn(d_in, d_out, |_, _| rng.random_range(-bound..=bound));
        ProjectionHead::new(w)
    };
    let image_head = head();
    let text_head = head();
    Ok(DualProjector {
        image_head,
        text_head,
        log_logit_scale: initial_log_logit_scale(),
    })
}

pub fn xavier_bound(d_in: usize, d_out: usize) -> f64 {
    (6.0 / (d_in + d_out) as f64).sqrt()
}

/// Forward intermediates kept for inspection and the backward pass.
#[derive(Debug, Clone)]
pub struct ClipCache {
    /// Normalised image projections, `B x d_out`.
    pub image_proj: Matrix,
    /// Normalised text projections, `B x d_out`.
    pub text_proj: Matrix,
    /// `s * U * V^T`, image rows against text columns.
    pub logits: Matrix,
    pub logit_scale: f64,
}

#[derive(Debug, Clone)]
pub struct ClipGrads {
    pub loss: f64,
    pub image_weight: Matrix,
    pub text_weight: Matrix,
    pub log_logit_scale: f64,
}

struct Forward {
    x: Mat64,
    y: Mat64,
    u: Mat64,
    v: Mat64,
    u_norms: Vec<f64>,
    v_norms: Vec<f64>,
    logits: Mat64,
    scale: f64,
    loss: f64,
    grad_logits: Mat64,
}

fn check_batch(p: &DualProjector, x_img: &Matrix, y_txt: &Matrix) -> Result<()> {
    if x_img.rows() != y_txt.rows() {
        return Err(Error::Shape {
            op: "clip_loss",
            left: format!("{} image rows", x_img.rows()),
            right: format!("{} text rows", y_txt.rows()),
        });
    }
    if x_img.cols() != p.image_head.d_in() {
        return Err(Error::shape("clip_loss image", x_img.shape(), p.image_head.weight.shape()));
    }
    if y_txt.cols() != p.text_head.d_in() {
        return Err(Error::shape("clip_loss text", y_txt.shape(), p.text_head.weight.shape()));
    }
    if x_img.rows() < 2 {
        return Err(Error::DegenerateBatch(x_img.rows()));
    }
    Ok(())
}

fn forward(p: &DualProjector, x_img: &Matrix, y_txt: &Matrix) -> Result<Forward> {
    check_batch(p, x_img, y_txt)?;
    let x = Mat64::from_f32(x_img);
    let y = Mat64::from_f32(y_txt);
    let mut u = x.matmul(&Mat64::from_f32(&p.image_head.weight));
    let mut v = y.matmul(&Mat64::from_f32(&p.text_head.weight));
    let u_norms = u.normalize_rows();
    let v_norms = v.normalize_rows();
    let scale = p.logit_scale();
    let mut logits = u.matmul_t(&v);
    logits.scale(scale);

    let (loss_i2t, g_rows) = logits.cross_entropy_diag();
    let (loss_t2i, g_cols) = logits.transpose().cross_entropy_diag();
    let loss = 0.5 * (loss_i2t + loss_t2i);
    // d loss / d logits = (G_rows + G_cols^T) / 2
    let g_cols_t = g_cols.transpose();
    let mut grad_logits = g_rows;
    for (g, c) in grad_logits.data.iter_mut().zip(&g_cols_t.data) {
        *g = 0.5 * (*g + c);
    }
    Ok(Forward {
        x,
        y,
        u,
        v,
        u_norms,
        v_norms,
        logits,
        scale,
        loss,
        grad_logits,
    })
}

/// Symmetric CLIP loss `(CE(L) + CE(L^T)) / 2` with diagonal targets.
pub fn clip_loss(p: &DualProjector, x_img: &Matrix, y_txt: &Matrix) -> Result<(f64, ClipCache)> {
    let f = forward(p, x_img, y_txt)?;
    Ok((
        f.loss,
        ClipCache {
            image_proj: f.u.to_f32(),
            text_proj: f.v.to_f32(),
            logits: f.logits.to_f32(),
            logit_scale: f.scale,
        },
    ))
}

/// Back-propagates `d/du` through `u = a / max(|a|, eps)`.
fn normalize_backward(normalized: &Mat64, norms: &[f64], grad: &Mat64) -> Mat64 {
    let mut out = grad.clone();
    for (i, &n) in norms.iter().enumerate() {
        let u = normalized.row(i);
        let g = out.row_mut(i);
        if n > NORM_EPS {
            let proj: f64 = u.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            for (gv, &uv) in g.iter_mut().zip(u) {
                *gv = (*gv - uv * proj) / n;
            }
        } else {
            g.iter_mut().for_each(|gv| *gv /= NORM_EPS);
        }
    }
    out
}

/// Loss and exact gradients for both head weights and the log logit scale.
pub fn clip_loss_grad(p: &DualProjector, x_img: &Matrix, y_txt: &Matrix) -> Result<ClipGrads> {
    let f = forward(p, x_img, y_txt)?;
    let s = f.scale;

    // L = s U V^T
    let mut grad_u = f.grad_logits.matmul(&f.v);
    grad_u.scale(s);
    let mut grad_v = f.grad_logits.t_matmul(&f.u);
    grad_v.scale(s);

    let grad_log_scale = if p.scale_is_clamped() {
        0.0
    } else {
        // dL/d(log s) = L
        f.grad_logits.data.iter().zip(&f.logits.data).map(|(g, l)| g * l).sum()
    };

    let grad_a = normalize_backward(&f.u, &f.u_norms, &grad_u);
    let grad_c = normalize_backward(&f.v, &f.v_norms, &grad_v);

    Ok(ClipGrads {
        loss: f.loss,
        image_weight: f.x.t_matmul(&grad_a).to_f32(),
        text_weight: f.y.t_matmul(&grad_c).to_f32(),
        log_logit_scale: grad_log_scale,
    })
}
