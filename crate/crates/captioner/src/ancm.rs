//! The two captioning heads. The visual captioner writes a global caption over
//! fused region features with scene words hidden behind UNK. The text
//! captioner rewrites that caption for one anchor group: it reads the group
//! rows plus the visual decode states, and at each step scores every
//! vocabulary word alongside every group row it could copy.

use backbone::{concat_cols, concat_rows, linear, AttnMask, Session, Tensor, Val};

use crate::model::Model;
use crate::vocab::{EncodedCaption, BOS, UNK};

/// Decode states and vocabulary logits from the visual captioner.
pub struct VisualDecode<'g> {
    /// Final-layer states at the decode positions, steps x d.
    pub h: Val<'g>,
    /// Vocabulary logits per step, steps x vocab.
    pub logits: Val<'g>,
}

/// One teacher-forcing or decoding input: a vocabulary word, or a row of the
/// group context (for words that were copied from scene text).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrevTok {
    Word(u32),
    Slot(usize),
}

/// Run the visual captioner over fused region rows with the given word inputs
/// (framing marker first). Decode positions see all regions and earlier
/// positions only.
pub fn visual_caption_forward<'g>(
    model: &Model,
    sess: &Session<'g>,
    v: Val<'g>,
    v_real: &[bool],
    input_ids: &[u32],
) -> VisualDecode<'g> {
    let n = v.rows();
    let steps = input_ids.len();
    assert!(steps >= 1 && steps <= model.config.max_steps(), "decode length {steps} out of range");

    let wemb = sess.param("wemb");
    let pos = sess.param("vcap.pos");
    let idxs: Vec<usize> = input_ids.iter().map(|&id| id as usize).collect();
    let step_rows: Vec<usize> = (0..steps).collect();
    let dec = wemb.gather_rows(&idxs).add(pos.gather_rows(&step_rows));

    let seq = concat_rows(&[v, dec]);
    let mut keep = v_real.to_vec();
    keep.extend(std::iter::repeat(true).take(steps));
    let mask = AttnMask::prefix_lm(n, steps);
    let out = model.vcap.forward(sess, seq, &mask, Some(&keep));
    let h = out.slice_rows(n, n + steps);
    let logits = linear(h, sess.param("f4.w"), sess.param("f4.b"));
    VisualDecode { h, logits }
}

/// Per-step scores from the text captioner: vocabulary logits concatenated
/// with one pointer score per group row.
pub struct TextDecode<'g> {
    /// Updated group rows, group_rows x d.
    pub g_hat: Val<'g>,
    /// Decode states, steps x d.
    pub y_hat: Val<'g>,
    /// steps x (vocab + group_rows).
    pub scores: Val<'g>,
    pub group_rows: usize,
}

/// Run the text captioner. Context rows (group embedding, then visual decode
/// states) are mutually visible; decode rows additionally see earlier decode
/// rows only.
pub fn text_caption_forward<'g>(
    model: &Model,
    sess: &Session<'g>,
    g_emb: Val<'g>,
    h: Val<'g>,
    inputs: &[PrevTok],
) -> TextDecode<'g> {
    let g_rows = g_emb.rows();
    let ctx = g_rows + h.rows();
    let steps = inputs.len();
    assert!(steps >= 1 && steps <= model.config.max_steps(), "decode length {steps} out of range");

    let wemb = sess.param("wemb");
    let pos = sess.param("tcap.pos");
    let parts: Vec<Val<'g>> = inputs
        .iter()
        .map(|tok| match *tok {
            PrevTok::Word(id) => wemb.gather_rows(&[id as usize]),
            PrevTok::Slot(s) => g_emb.slice_rows(s, s + 1),
        })
        .collect();
    let step_rows: Vec<usize> = (0..steps).collect();
    let dec = concat_rows(&parts).add(pos.gather_rows(&step_rows));

    let seq = concat_rows(&[g_emb, h, dec]);
    let mask = AttnMask::prefix_lm(ctx, steps);
    let out = model.tcap.forward(sess, seq, &mask, None);
    let g_hat = out.slice_rows(0, g_rows);
    let y_hat = out.slice_rows(ctx, ctx + steps);

    let vocab_logits = linear(y_hat, sess.param("f4.w"), sess.param("f4.b"));
    let gp = linear(g_hat, sess.param("fdp.wg"), sess.param("fdp.bg"));
    let yp = linear(y_hat, sess.param("fdp.wy"), sess.param("fdp.by"));
    let pointer = yp.matmul(gp.transpose());
    let scores = concat_cols(&[vocab_logits, pointer]);
    TextDecode { g_hat, y_hat, scores, group_rows: g_rows }
}

/// One-hot next-word targets for the visual captioner: row c is the target for
/// predicting position c+1 of the masked id stream.
pub fn vcap_targets(vocab_len: usize, ids_masked: &[u32]) -> Tensor {
    assert!(ids_masked.len() >= 2, "need at least framing markers");
    let steps = ids_masked.len() - 1;
    let mut t = Tensor::zeros(steps, vocab_len);
    for c in 0..steps {
        *t.at_mut(c, ids_masked[c + 1] as usize) = 1.0;
    }
    t
}

/// Multi-hot targets for the text captioner over vocabulary plus group-row
/// columns. A copyable word lights its group rows; its vocabulary id is also
/// lit when the word genuinely belongs to the vocabulary. UNK is a target only
/// when neither applies.
pub fn tcap_targets(
    vocab_len: usize,
    enc: &EncodedCaption,
    slot_of_ocr: &[Option<usize>],
    group_rows: usize,
) -> Tensor {
    let steps = enc.len() - 1;
    let mut t = Tensor::zeros(steps, vocab_len + group_rows);
    for c in 0..steps {
        let id = enc.ids_full[c + 1];
        let mut any_copy = false;
        for &k in &enc.copy_flags[c + 1] {
            if let Some(slot) = slot_of_ocr[k] {
                assert!(slot < group_rows);
                *t.at_mut(c, vocab_len + slot) = 1.0;
                any_copy = true;
            }
        }
        if id != UNK {
            *t.at_mut(c, id as usize) = 1.0;
        } else if !any_copy {
            *t.at_mut(c, UNK as usize) = 1.0;
        }
    }
    t
}

/// Teacher-forcing inputs for the text captioner: position c of the full id
/// stream, preferring the group row when the word was copied from scene text.
pub fn tcap_teacher_inputs(enc: &EncodedCaption, slot_of_ocr: &[Option<usize>]) -> Vec<PrevTok> {
    let steps = enc.len() - 1;
    let mut out = Vec::with_capacity(steps);
    for c in 0..steps {
        if c == 0 {
            out.push(PrevTok::Word(BOS));
            continue;
        }
        let slot = enc.copy_flags[c].iter().find_map(|&k| slot_of_ocr[k]);
        match slot {
            Some(s) => out.push(PrevTok::Slot(s)),
            None => out.push(PrevTok::Word(enc.ids_full[c])),
        }
    }
    out
}

/// Index of the best-scoring column in one row of a score matrix.
pub fn row_argmax(t: &Tensor, row: usize) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for c in 0..t.cols {
        let v = t.at(row, c);
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    best
}
