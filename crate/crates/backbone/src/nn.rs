//! Transformer-style encoder blocks (post-norm, GELU feed-forward) plus the
//! boolean attention masks the captioner composes them with.

use rand::Rng;

use crate::graph::{Session, Val};
use crate::ops::{concat_cols, linear};
use crate::store::ParamStore;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Boolean attention pattern over an SxS grid; `allow(i, j)` means position i
/// may read position j.
#[derive(Clone)]
pub struct AttnMask {
    pub s: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    pub fn full(s: usize) -> Self {
        AttnMask { s, allow: vec![true; s * s] }
    }

    /// Context rows see only each other; decode rows see all context plus
    /// decode rows up to and including themselves.
    pub fn prefix_lm(ctx: usize, dec: usize) -> Self {
        let s = ctx + dec;
        let mut m = AttnMask { s, allow: vec![false; s * s] };
        for i in 0..s {
            for j in 0..s {
                let ok = if i < ctx { j < ctx } else { j < ctx || j <= i };
                m.allow[i * s + j] = ok;
            }
        }
        m
    }

    pub fn from_fn(s: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = vec![false; s * s];
        for i in 0..s {
            for j in 0..s {
                allow[i * s + j] = f(i, j);
            }
        }
        AttnMask { s, allow }
    }

    /// Forbid reading any column whose `keep` flag is false (padding).
    pub fn and_cols(mut self, keep: &[bool]) -> Self {
        assert_eq!(keep.len(), self.s, "and_cols: flag count {} for s={}", keep.len(), self.s);
        for i in 0..self.s {
            for j in 0..self.s {
                self.allow[i * self.s + j] &= keep[j];
            }
        }
        self
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.s + j]
    }

    pub(crate) fn flags(&self) -> &[bool] {
        &self.allow
    }
}

/// Linear projection followed by layer norm; the embedders for raw features.
pub struct AffineNorm {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl AffineNorm {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        AffineNorm { prefix: prefix.to_string(), in_dim, out_dim }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert_xavier(&format!("{}.w", self.prefix), self.in_dim, self.out_dim, rng);
        store.insert_zeros(&format!("{}.b", self.prefix), 1, self.out_dim);
        store.insert_filled(&format!("{}.ln.g", self.prefix), 1, self.out_dim, 1.0);
        store.insert_zeros(&format!("{}.ln.b", self.prefix), 1, self.out_dim);
    }

    pub fn forward<'g>(&self, sess: &Session<'g>, x: Val<'g>) -> Val<'g> {
        assert_eq!(x.cols(), self.in_dim, "{}: input width {} != {}", self.prefix, x.cols(), self.in_dim);
        let w = sess.param(&format!("{}.w", self.prefix));
        let b = sess.param(&format!("{}.b", self.prefix));
        let g = sess.param(&format!("{}.ln.g", self.prefix));
        let be = sess.param(&format!("{}.ln.b", self.prefix));
        linear(x, w, b).layer_norm(g, be, LN_EPS)
    }
}

/// Stack of identical self-attention blocks sharing one mask.
pub struct EncoderStack {
    pub prefix: String,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
}

impl EncoderStack {
    pub fn new(prefix: &str, layers: usize, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "{prefix}: dim {dim} not divisible by heads {heads}");
        EncoderStack { prefix: prefix.to_string(), layers, dim, heads }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.dim;
        for l in 0..self.layers {
            let p = format!("{}.{}", self.prefix, l);
            for nm in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                store.insert_xavier(&format!("{p}.{nm}"), d, d, rng);
            }
            for nm in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
                store.insert_zeros(&format!("{p}.{nm}"), 1, d);
            }
            store.insert_filled(&format!("{p}.ln1.g"), 1, d, 1.0);
            store.insert_zeros(&format!("{p}.ln1.b"), 1, d);
            store.insert_xavier(&format!("{p}.ffn.w1"), d, 4 * d, rng);
            store.insert_zeros(&format!("{p}.ffn.b1"), 1, 4 * d);
            store.insert_xavier(&format!("{p}.ffn.w2"), 4 * d, d, rng);
            store.insert_zeros(&format!("{p}.ffn.b2"), 1, d);
            store.insert_filled(&format!("{p}.ln2.g"), 1, d, 1.0);
            store.insert_zeros(&format!("{p}.ln2.b"), 1, d);
        }
    }

    /// Run the stack. `pad_rows`, when given, marks real rows; padded columns are
    /// unreadable through the mask and padded rows are zeroed on the way out.
    pub fn forward<'g>(
        &self,
        sess: &Session<'g>,
        x: Val<'g>,
        mask: &AttnMask,
        pad_rows: Option<&[bool]>,
    ) -> Val<'g> {
        let s = x.rows();
        assert_eq!(x.cols(), self.dim, "{}: input width {} != {}", self.prefix, x.cols(), self.dim);
        assert_eq!(mask.s, s, "{}: mask is {}x{} for {} rows", self.prefix, mask.s, mask.s, s);
        let mask = match pad_rows {
            Some(keep) => mask.clone().and_cols(keep),
            None => mask.clone(),
        };
        let mut h = x;
        for l in 0..self.layers {
            h = self.layer(sess, l, h, &mask);
        }
        if let Some(keep) = pad_rows {
            let mut row_mask = Tensor::zeros(s, self.dim);
            for (r, &k) in keep.iter().enumerate() {
                if k {
                    for c in 0..self.dim {
                        *row_mask.at_mut(r, c) = 1.0;
                    }
                }
            }
            h = h.mul_mask(row_mask);
        }
        h
    }

    fn layer<'g>(&self, sess: &Session<'g>, l: usize, x: Val<'g>, mask: &AttnMask) -> Val<'g> {
        let p = format!("{}.{}", self.prefix, l);
        let pm = |nm: &str| sess.param(&format!("{p}.{nm}"));
        let s = x.rows();
        let dh = self.dim / self.heads;

        let q = linear(x, pm("attn.wq"), pm("attn.bq"));
        let k = linear(x, pm("attn.wk"), pm("attn.bk"));
        let v = linear(x, pm("attn.wv"), pm("attn.bv"));

        // per-head scaled dot-product attention over the boolean mask
        let mut heads = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let (c0, c1) = (hd * dh, (hd + 1) * dh);
            let qh = q.slice_cols(c0, c1);
            let kh = k.slice_cols(c0, c1);
            let vh = v.slice_cols(c0, c1);
            let scores = qh.matmul(kh.transpose()).scale(1.0 / (dh as f64).sqrt());
            debug_assert_eq!(scores.shape(), (s, s));
            let attn = scores.masked_softmax_rows(mask.flags());
            heads.push(attn.matmul(vh));
        }
        let ctx = concat_cols(&heads);
        let attn_out = linear(ctx, pm("attn.wo"), pm("attn.bo"));
        let x1 = x.add(attn_out).layer_norm(pm("ln1.g"), pm("ln1.b"), LN_EPS);
        let f = linear(x1, pm("ffn.w1"), pm("ffn.b1")).gelu();
        let f = linear(f, pm("ffn.w2"), pm("ffn.b2"));
        x1.add(f).layer_norm(pm("ln2.g"), pm("ln2.b"), LN_EPS)
    }
}
