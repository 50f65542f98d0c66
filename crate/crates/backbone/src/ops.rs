//! Differentiable ops on [`Val`]. Shape violations are contract bugs and panic
//! with the op name; numeric failures surface later as backward errors.

use crate::graph::{Node, Val};
use crate::tensor::Tensor;

const PROB_EPS: f64 = 1e-12;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

impl<'g> Val<'g> {
    pub fn add(self, rhs: Val<'g>) -> Val<'g> {
        let out = self.with_value(|a| rhs.with_value(|b| a.zip_map(b, |x, y| x + y)));
        self.g.push(Node {
            op: "add",
            value: out,
            parents: vec![self.id, rhs.id],
            back: Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
            param: None,
        })
    }

    pub fn sub(self, rhs: Val<'g>) -> Val<'g> {
        let out = self.with_value(|a| rhs.with_value(|b| a.zip_map(b, |x, y| x - y)));
        self.g.push(Node {
            op: "sub",
            value: out,
            parents: vec![self.id, rhs.id],
            back: Some(Box::new(|g, _, _| vec![g.clone(), g.map(|x| -x)])),
            param: None,
        })
    }

    pub fn mul(self, rhs: Val<'g>) -> Val<'g> {
        let out = self.with_value(|a| rhs.with_value(|b| a.zip_map(b, |x, y| x * y)));
        self.g.push(Node {
            op: "mul",
            value: out,
            parents: vec![self.id, rhs.id],
            back: Some(Box::new(|g, p, _| vec![g.zip_map(p[1], |gv, b| gv * b), g.zip_map(p[0], |gv, a| gv * a)])),
            param: None,
        })
    }

    pub fn scale(self, k: f64) -> Val<'g> {
        let out = self.with_value(|a| a.map(|x| x * k));
        self.g.push(Node {
            op: "scale",
            value: out,
            parents: vec![self.id],
            back: Some(Box::new(move |g, _, _| vec![g.map(|x| x * k)])),
            param: None,
        })
    }

    /// Elementwise product with a non-trainable mask or weight matrix.
    pub fn mul_mask(self, mask: Tensor) -> Val<'g> {
        let out = self.with_value(|a| a.zip_map(&mask, |x, m| x * m));
        self.g.push(Node {
            op: "mul_mask",
            value: out,
            parents: vec![self.id],
            back: Some(Box::new(move |g, _, _| vec![g.zip_map(&mask, |gv, m| gv * m)])),
            param: None,
        })
    }

    /// Broadcast-add a 1xK row (bias) to every row of an SxK tensor.
    pub fn add_row(self, bias: Val<'g>) -> Val<'g> {
        let out = self.with_value(|a| {
            bias.with_value(|b| {
                assert_eq!(b.rows, 1, "add_row: bias must be 1xK");
                assert_eq!(a.cols, b.cols, "add_row: {} cols vs bias {}", a.cols, b.cols);
                let mut o = a.clone();
                for r in 0..o.rows {
                    for c in 0..o.cols {
                        *o.at_mut(r, c) += b.at(0, c);
                    }
                }
                o
            })
        });
        self.g.push(Node {
            op: "add_row",
            value: out,
            parents: vec![self.id, bias.id],
            back: Some(Box::new(|g, _, _| {
                let mut db = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        *db.at_mut(0, c) += g.at(r, c);
                    }
                }
                vec![g.clone(), db]
            })),
            param: None,
        })
    }

    pub fn matmul(self, rhs: Val<'g>) -> Val<'g> {
        let out = self.with_value(|a| rhs.with_value(|b| a.matmul(b)));
        self.g.push(Node {
            op: "matmul",
            value: out,
            parents: vec![self.id, rhs.id],
            back: Some(Box::new(|g, p, _| {
                let da = g.matmul(&p[1].transpose());
                let db = p[0].transpose().matmul(g);
                vec![da, db]
            })),
            param: None,
        })
    }

    pub fn transpose(self) -> Val<'g> {
        let out = self.with_value(|a| a.transpose());
        self.g.push(Node {
            op: "transpose",
            value: out,
            parents: vec![self.id],
            back: Some(Box::new(|g, _, _| vec![g.transpose()])),
            param: None,
        })
    }

    pub fn sigmoid(self) -> Val<'g> {
        let out = self.with_value(|a| a.map(|x| 1.0 / (1.0 + (-x).exp())));
        self.g.push(Node {
            op: "sigmoid",
            value: out,
            parents: vec![self.id],
            back: Some(Box::new(|g, _, y| vec![g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))])),
            param: None,
        })
    }

    pub fn tanh(self) -> Val<'g> {
        let out = self.with_value(|a| a.map(f64::tanh));
        self.g.push(Node {
            op: "tanh",
            value: out,
            parents: vec![self.id],
            back: Some(Box::new(|g, _, y| vec![g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))])),
            param: None,
        })
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(self) -> Val<'g> {
        const A: f64 = 0.797884560802865; // sqrt(2/pi)
        const B: f64 = 0.044715;
        let out = self.with_value(|x| x.map(|v| 0.5 * v * (1.0 + (A * (v + B * v * v * v)).tanh())));
        self.g.push(Node {
            op: "gelu",
            value: out,
            parents: vec![self.id],
            back: Some(Box::new(|g, p, _| {
                vec![g.zip_map(p[0], |gv, v| {
                    let u = A * (v + B * v * v * v);
                    let t = u.tanh();
                    let du = A * (1.0 + 3.0 * B * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                })]
            })),
            param: None,
        })
    }

    pub fn slice_rows(self, r0: usize, r1: usize) -> Val<'g> {
        let (rows, cols) = self.shape();
        assert!(r0 <= r1 && r1 <= rows, "slice_rows: {r0}..{r1} out of {rows}");
        let out = self.with_value(|a| {
            Tensor::from_vec(r1 - r0, cols, a.data[r0 * cols..r1 * cols].to_vec())
        });
        self.g.push(Node {
            op: "slice_rows",
            value: out,
            parents: vec![self.id],
            back: Some(Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(rows, cols);
                dx.data[r0 * cols..r1 * cols].copy_from_slice(&g.data);
                vec![dx]
            })),
            param: None,
        })
    }

    pub fn slice_cols(self, c0: usize, c1: usize) -> Val<'g> {
        let (rows, cols) = self.shape();
        assert!(c0 <= c1 && c1 <= cols, "slice_cols: {c0}..{c1} out of {cols}");
        let out = self.with_value(|a| {
            let mut o = Tensor::zeros(rows, c1 - c0);
            for r in 0..rows {
                o.data[r * (c1 - c0)..(r + 1) * (c1 - c0)].copy_from_slice(&a.row_slice(r)[c0..c1]);
            }
            o
        });
        self.g.push(Node {
            op: "slice_cols",
            value: out,
            parents: vec![self.id],
            back: Some(Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    dx.data[r * cols + c0..r * cols + c1].copy_from_slice(g.row_slice(r));
                }
                vec![dx]
            })),
            param: None,
        })
    }

    /// Gather rows of a table by index; indices may repeat (grads scatter-add).
    pub fn gather_rows(self, idxs: &[usize]) -> Val<'g> {
        let (rows, cols) = self.shape();
        for &i in idxs {
            assert!(i < rows, "gather_rows: index {i} out of {rows}");
        }
        let idxs = idxs.to_vec();
        let out = self.with_value(|a| {
            let mut o = Tensor::zeros(idxs.len(), cols);
            for (r, &i) in idxs.iter().enumerate() {
                o.data[r * cols..(r + 1) * cols].copy_from_slice(a.row_slice(i));
            }
            o
        });
        self.g.push(Node {
            op: "gather_rows",
            value: out,
            parents: vec![self.id],
            back: Some(Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(rows, cols);
                for (r, &i) in idxs.iter().enumerate() {
                    for c in 0..cols {
                        dx.data[i * cols + c] += g.at(r, c);
                    }
                }
                vec![dx]
            })),
            param: None,
        })
    }

    /// Row-wise softmax restricted to `allow`ed entries. Disallowed entries get
    /// weight exactly 0.0 (not a large negative bias), so masked positions can
    /// never leak into outputs or gradients. A fully disallowed row is all zeros.
    pub fn masked_softmax_rows(self, allow: &[bool]) -> Val<'g> {
        let (rows, cols) = self.shape();
        assert_eq!(allow.len(), rows * cols, "masked_softmax_rows: mask len {} for {}x{}", allow.len(), rows, cols);
        let allow = allow.to_vec();
        let allow_b = allow.clone();
        let out = self.with_value(|a| {
            let mut o = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let row = a.row_slice(r);
                let am = &allow[r * cols..(r + 1) * cols];
                let mut m = f64::NEG_INFINITY;
                for (x, &ok) in row.iter().zip(am) {
                    if ok && *x > m {
                        m = *x;
                    }
                }
                if m == f64::NEG_INFINITY {
                    continue;
                }
                let mut s = 0.0;
                for c in 0..cols {
                    if am[c] {
                        let e = (row[c] - m).exp();
                        o.data[r * cols + c] = e;
                        s += e;
                    }
                }
                for c in 0..cols {
                    o.data[r * cols + c] /= s;
                }
            }
            o
        });
        self.g.push(Node {
            op: "masked_softmax_rows",
            value: out,
            parents: vec![self.id],
            back: Some(Box::new(move |g, _, y| {
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        if allow_b[r * cols + c] {
                            dx.data[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                }
                vec![dx]
            })),
            param: None,
        })
    }

    /// Row layer norm: zero-mean unit-variance per row, then gamma/beta.
    pub fn layer_norm(self, gamma: Val<'g>, beta: Val<'g>, eps: f64) -> Val<'g> {
        let (rows, cols) = self.shape();
        assert_eq!(gamma.shape(), (1, cols), "layer_norm: gamma shape");
        assert_eq!(beta.shape(), (1, cols), "layer_norm: beta shape");
        let out = self.with_value(|x| {
            gamma.with_value(|ga| {
                beta.with_value(|be| {
                    let mut o = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let row = x.row_slice(r);
                        let mu = row.iter().sum::<f64>() / cols as f64;
                        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for c in 0..cols {
                            o.data[r * cols + c] = (row[c] - mu) * inv * ga.at(0, c) + be.at(0, c);
                        }
                    }
                    o
                })
            })
        });
        self.g.push(Node {
            op: "layer_norm",
            value: out,
            parents: vec![self.id, gamma.id, beta.id],
            back: Some(Box::new(move |g, p, _| {
                let (x, ga) = (p[0], p[1]);
                let mut dx = Tensor::zeros(rows, cols);
                let mut dga = Tensor::zeros(1, cols);
                let mut dbe = Tensor::zeros(1, cols);
                for r in 0..rows {
                    let row = x.row_slice(r);
                    let mu = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * inv).collect();
                    let gr = g.row_slice(r);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for c in 0..cols {
                        let dxh = gr[c] * ga.at(0, c);
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[c];
                        *dga.at_mut(0, c) += gr[c] * xhat[c];
                        *dbe.at_mut(0, c) += gr[c];
                    }
                    mean_dxhat /= cols as f64;
                    mean_dxhat_xhat /= cols as f64;
                    for c in 0..cols {
                        let dxh = gr[c] * ga.at(0, c);
                        dx.data[r * cols + c] = inv * (dxh - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                    }
                }
                vec![dx, dga, dbe]
            })),
            param: None,
        })
    }

    /// Binary cross-entropy against fixed targets, on logits, summed over
    /// unmasked entries and divided by `denom`. Stable for large |x|.
    pub fn bce_with_logits(self, targets: &Tensor, entry_mask: &[bool], denom: f64) -> Val<'g> {
        let (rows, cols) = self.shape();
        assert_eq!(targets.shape(), (rows, cols), "bce_with_logits: target shape");
        assert_eq!(entry_mask.len(), rows * cols, "bce_with_logits: mask len");
        assert!(denom > 0.0, "bce_with_logits: denom must be positive");
        let t = targets.clone();
        let mask = entry_mask.to_vec();
        let out = self.with_value(|x| {
            let mut s = 0.0;
            for i in 0..x.data.len() {
                if mask[i] {
                    let xv = x.data[i];
                    let tv = t.data[i];
                    s += xv.max(0.0) - xv * tv + (-xv.abs()).exp().ln_1p();
                }
            }
            Tensor::scalar(s / denom)
        });
        self.g.push(Node {
            op: "bce_with_logits",
            value: out,
            parents: vec![self.id],
            back: Some(Box::new(move |g, p, _| {
                let gv = g.item() / denom;
                let x = p[0];
                let mut dx = Tensor::zeros(rows, cols);
                for i in 0..x.data.len() {
                    if mask[i] {
                        let sig = 1.0 / (1.0 + (-x.data[i]).exp());
                        dx.data[i] = gv * (sig - t.data[i]);
                    }
                }
                vec![dx]
            })),
            param: None,
        })
    }

    /// Binary cross-entropy on probabilities (inputs already in (0,1), e.g. from
    /// a softmax). Probabilities are clamped away from 0/1 inside the log only.
    pub fn bce_on_probs(self, targets: &Tensor, entry_mask: &[bool], denom: f64) -> Val<'g> {
        let (rows, cols) = self.shape();
        assert_eq!(targets.shape(), (rows, cols), "bce_on_probs: target shape");
        assert_eq!(entry_mask.len(), rows * cols, "bce_on_probs: mask len");
        assert!(denom > 0.0, "bce_on_probs: denom must be positive");
        let t = targets.clone();
        let mask = entry_mask.to_vec();
        let out = self.with_value(|p| {
            let mut s = 0.0;
            for i in 0..p.data.len() {
                if mask[i] {
                    let pv = clamp_prob(p.data[i]);
                    let tv = t.data[i];
                    s += -tv * pv.ln() - (1.0 - tv) * (1.0 - pv).ln();
                }
            }
            Tensor::scalar(s / denom)
        });
        self.g.push(Node {
            op: "bce_on_probs",
            value: out,
            parents: vec![self.id],
            back: Some(Box::new(move |g, p, _| {
                let gv = g.item() / denom;
                let x = p[0];
                let mut dx = Tensor::zeros(rows, cols);
                for i in 0..x.data.len() {
                    if mask[i] {
                        let pv = clamp_prob(x.data[i]);
                        dx.data[i] = gv * (pv - t.data[i]) / (pv * (1.0 - pv));
                    }
                }
                vec![dx]
            })),
            param: None,
        })
    }

    /// Negative log of one probability entry: -ln p[idx]. Categorical NLL over a
    /// softmax row.
    pub fn pick_neg_log(self, idx: usize) -> Val<'g> {
        let (rows, cols) = self.shape();
        assert_eq!(rows, 1, "pick_neg_log: expects a 1xK probability row");
        assert!(idx < cols, "pick_neg_log: index {idx} out of {cols}");
        let out = self.with_value(|p| Tensor::scalar(-clamp_prob(p.data[idx]).ln()));
        self.g.push(Node {
            op: "pick_neg_log",
            value: out,
            parents: vec![self.id],
            back: Some(Box::new(move |g, p, _| {
                let mut dx = Tensor::zeros(rows, cols);
                dx.data[idx] = -g.item() / clamp_prob(p[0].data[idx]);
                vec![dx]
            })),
            param: None,
        })
    }
}

/// Stack parts vertically. All parts must share a column count.
pub fn concat_rows<'g>(parts: &[Val<'g>]) -> Val<'g> {
    assert!(!parts.is_empty(), "concat_rows: no parts");
    let g = parts[0].g;
    let cols = parts[0].cols();
    let mut data = Vec::new();
    let mut row_counts = Vec::with_capacity(parts.len());
    for p in parts {
        assert_eq!(p.cols(), cols, "concat_rows: column mismatch");
        p.with_value(|t| data.extend_from_slice(&t.data));
        row_counts.push(p.rows());
    }
    let rows: usize = row_counts.iter().sum();
    g.push(Node {
        op: "concat_rows",
        value: Tensor::from_vec(rows, cols, data),
        parents: parts.iter().map(|p| p.id).collect(),
        back: Some(Box::new(move |gr, _, _| {
            let mut out = Vec::with_capacity(row_counts.len());
            let mut r = 0;
            for &n in &row_counts {
                out.push(Tensor::from_vec(n, cols, gr.data[r * cols..(r + n) * cols].to_vec()));
                r += n;
            }
            out
        })),
        param: None,
    })
}

/// Stack parts horizontally. All parts must share a row count.
pub fn concat_cols<'g>(parts: &[Val<'g>]) -> Val<'g> {
    assert!(!parts.is_empty(), "concat_cols: no parts");
    let g = parts[0].g;
    let rows = parts[0].rows();
    let col_counts: Vec<usize> = parts
        .iter()
        .map(|p| {
            assert_eq!(p.rows(), rows, "concat_cols: row mismatch");
            p.cols()
        })
        .collect();
    let cols: usize = col_counts.iter().sum();
    let mut value = Tensor::zeros(rows, cols);
    {
        let mut c0 = 0;
        for p in parts {
            p.with_value(|t| {
                for r in 0..rows {
                    value.data[r * cols + c0..r * cols + c0 + t.cols].copy_from_slice(t.row_slice(r));
                }
            });
            c0 += p.cols();
        }
    }
    g.push(Node {
        op: "concat_cols",
        value,
        parents: parts.iter().map(|p| p.id).collect(),
        back: Some(Box::new(move |gr, _, _| {
            let mut out = Vec::with_capacity(col_counts.len());
            let mut c0 = 0;
            for &n in &col_counts {
                let mut t = Tensor::zeros(rows, n);
                for r in 0..rows {
                    t.data[r * n..(r + 1) * n].copy_from_slice(&gr.row_slice(r)[c0..c0 + n]);
                }
                out.push(t);
                c0 += n;
            }
            out
        })),
        param: None,
    })
}

/// x @ w + b with b broadcast across rows.
pub fn linear<'g>(x: Val<'g>, w: Val<'g>, b: Val<'g>) -> Val<'g> {
    x.matmul(w).add_row(b)
}
