//! Feature fusion: raw region and OCR features are projected into the shared
//! width, padded to fixed row capacities, and passed through a joint
//! self-attention stage. Padded rows are structurally invisible: they cannot be
//! attended to and leave the stage as exact zero rows.

use backbone::{concat_rows, AttnMask, Session, Tensor, Val};

use crate::model::Model;
use crate::scene::Scene;

pub struct Fused<'g> {
    /// All fused rows, regions then tokens.
    pub all: Val<'g>,
    /// Region rows, `n_objects` tall.
    pub v: Val<'g>,
    /// Token rows, `m_tokens` tall.
    pub t: Val<'g>,
    pub v_real: Vec<bool>,
    pub t_real: Vec<bool>,
}

impl<'g> Fused<'g> {
    pub fn n_real(&self) -> usize {
        self.v_real.iter().filter(|&&b| b).count()
    }

    pub fn m_real(&self) -> usize {
        self.t_real.iter().filter(|&&b| b).count()
    }
}

/// Region input matrix: appearance and box geometry, zero rows past the real
/// count. Callers must have checked capacity via `Model::check_scene`.
pub fn visual_inputs(model: &Model, scene: &Scene) -> Tensor {
    let c = &model.config;
    let width = c.dims.d_app + 4;
    let mut x = Tensor::zeros(c.n_objects, width);
    for (i, obj) in scene.objects.iter().enumerate() {
        for (j, v) in obj.app.iter().chain(obj.bbox.iter()).enumerate() {
            *x.at_mut(i, j) = *v;
        }
    }
    x
}

/// Token input matrix: appearance, box geometry, word and character features.
pub fn token_inputs(model: &Model, scene: &Scene) -> Tensor {
    let c = &model.config;
    let width = c.dims.d_app + 4 + c.dims.d_ft + c.dims.d_phoc;
    let mut x = Tensor::zeros(c.m_tokens, width);
    for (i, tok) in scene.ocr.iter().enumerate() {
        let vals = tok
            .app
            .iter()
            .chain(tok.bbox.iter())
            .chain(tok.word_emb.iter())
            .chain(tok.char_emb.iter());
        for (j, v) in vals.enumerate() {
            *x.at_mut(i, j) = *v;
        }
    }
    x
}

fn row_keep_mask(rows: usize, cols: usize, keep: &[bool]) -> Tensor {
    let mut m = Tensor::zeros(rows, cols);
    for (r, &k) in keep.iter().enumerate() {
        if k {
            for c in 0..cols {
                *m.at_mut(r, c) = 1.0;
            }
        }
    }
    m
}

/// Project raw features to the shared width and run the joint fusion stage.
pub fn fuse<'g>(model: &Model, sess: &Session<'g>, scene: &Scene) -> Fused<'g> {
    let c = &model.config;
    let n = c.n_objects;
    let m = c.m_tokens;
    let v_real: Vec<bool> = (0..n).map(|i| i < scene.objects.len()).collect();
    let t_real: Vec<bool> = (0..m).map(|i| i < scene.ocr.len()).collect();

    // the affine+norm projections turn zero rows into bias rows, so pad rows
    // are re-zeroed before entering attention
    let xv = sess.constant(visual_inputs(model, scene));
    let v0 = model.f1.forward(sess, xv).mul_mask(row_keep_mask(n, c.d, &v_real));
    let xt = sess.constant(token_inputs(model, scene));
    let t0 = model.f2.forward(sess, xt).mul_mask(row_keep_mask(m, c.d, &t_real));

    let mut keep = v_real.clone();
    keep.extend_from_slice(&t_real);
    let joint = concat_rows(&[v0, t0]);
    let all = model.fuse.forward(sess, joint, &AttnMask::full(n + m), Some(&keep));
    let v = all.slice_rows(0, n);
    let t = all.slice_rows(n, n + m);
    Fused { all, v, t, v_real, t_real }
}
