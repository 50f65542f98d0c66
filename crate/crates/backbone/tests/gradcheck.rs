//! Analytic gradients of every op family checked against central finite
//! differences. The numeric side never touches the graph machinery: it clones
//! the store, nudges one coordinate, and reruns the forward closure.

use backbone::ops::{concat_cols, concat_rows, linear};
use backbone::{central_difference, relative_error, AttnMask, EncoderStack, Graph, GruCell, ParamStore, Session, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn rand_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Funnel so closures unify with the higher-ranked builder signature.
fn hr<F: for<'g> Fn(&Session<'g>) -> backbone::Val<'g>>(f: F) -> F {
    f
}

/// Every coordinate of every registered parameter is compared against the
/// central difference of the same forward closure.
macro_rules! gradcheck {
    ($store:expr, $build:expr) => {{
        let store = &$store;
        let build = hr($build);
        let g = Graph::new();
        let sess = Session::new(&g, store);
        let loss = build(&sess);
        let grads = g.backward(loss).expect("backward failed");
        let eval = |s: &ParamStore| {
            let g2 = Graph::new();
            let sess2 = Session::new(&g2, s);
            build(&sess2).item()
        };
        let mut checked = 0usize;
        for (name, gt) in grads.iter() {
            for idx in 0..gt.data.len() {
                let numeric = central_difference(store, name, idx, H, eval);
                let err = relative_error(gt.data[idx], numeric);
                assert!(
                    err <= TOL,
                    "{name}[{idx}]: analytic {} vs numeric {} (rel err {err:.2e})",
                    gt.data[idx],
                    numeric
                );
                checked += 1;
            }
        }
        assert!(checked > 0, "no parameters were checked");
    }};
}

#[test]
fn affine_chain_with_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    store.insert_xavier("w1", 5, 4, &mut rng);
    store.insert_uniform("b1", 1, 4, 0.3, &mut rng);
    store.insert_xavier("w2", 4, 3, &mut rng);
    store.insert_uniform("b2", 1, 3, 0.3, &mut rng);
    let x = rand_tensor(6, 5, &mut rng);
    let t = Tensor::from_vec(6, 3, (0..18).map(|i| f64::from((i % 2) as u8)).collect());
    gradcheck!(store, |sess| {
        let xv = sess.constant(x.clone());
        let h = linear(xv, sess.param("w1"), sess.param("b1")).gelu();
        let h = h.tanh().sigmoid();
        let logits = linear(h, sess.param("w2"), sess.param("b2"));
        logits.bce_with_logits(&t, &vec![true; 18], 6.0)
    });
}

#[test]
fn layer_norm_full_coverage() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut store = ParamStore::new();
    store.insert_xavier("w", 4, 6, &mut rng);
    store.insert_uniform("g", 1, 6, 0.5, &mut rng);
    store.insert_uniform("b", 1, 6, 0.5, &mut rng);
    let x = rand_tensor(3, 4, &mut rng);
    let t = rand_tensor(3, 6, &mut rng).map(|v| f64::from((v > 0.0) as u8));
    gradcheck!(store, |sess| {
        let xv = sess.constant(x.clone());
        let h = xv.matmul(sess.param("w")).layer_norm(sess.param("g"), sess.param("b"), 1e-5);
        h.bce_with_logits(&t, &vec![true; 18], 3.0)
    });
}

#[test]
fn masked_softmax_with_prob_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut store = ParamStore::new();
    store.insert_xavier("w", 3, 5, &mut rng);
    let x = rand_tensor(1, 3, &mut rng);
    let mask = vec![true, true, false, true, false];
    let mut t = Tensor::zeros(1, 5);
    t.data[1] = 1.0;
    gradcheck!(store, |sess| {
        let logits = sess.constant(x.clone()).matmul(sess.param("w"));
        let probs = logits.masked_softmax_rows(&mask);
        probs.bce_on_probs(&t, &mask, 3.0)
    });
}

#[test]
fn categorical_pick_through_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut store = ParamStore::new();
    store.insert_xavier("w", 4, 6, &mut rng);
    let x = rand_tensor(1, 4, &mut rng);
    let mask = vec![true; 6];
    gradcheck!(store, |sess| {
        let probs = sess.constant(x.clone()).matmul(sess.param("w")).masked_softmax_rows(&mask);
        probs.pick_neg_log(2)
    });
}

#[test]
fn attention_stack_prefix_mask_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let mut store = ParamStore::new();
    let stack = EncoderStack::new("enc", 2, 6, 2);
    stack.register(&mut store, &mut rng);
    let x = rand_tensor(5, 6, &mut rng);
    let t = rand_tensor(5, 6, &mut rng).map(|v| f64::from((v > 0.2) as u8));
    let keep = [true, true, false, true, true];
    let mask = AttnMask::prefix_lm(3, 2);
    let entry_mask: Vec<bool> = keep.iter().flat_map(|&k| std::iter::repeat(k).take(6)).collect();
    gradcheck!(store, |sess| {
        let out = stack.forward(sess, sess.constant(x.clone()), &mask, Some(&keep));
        out.bce_with_logits(&t, &entry_mask, 4.0)
    });
}

#[test]
fn gru_scan_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let mut store = ParamStore::new();
    let cell = GruCell::new("g", 5);
    cell.register(&mut store, &mut rng);
    store.insert_xavier("head", 5, 2, &mut rng);
    let xs = rand_tensor(4, 5, &mut rng);
    let h0 = rand_tensor(1, 5, &mut rng);
    let t = Tensor::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    gradcheck!(store, |sess| {
        let states = cell.scan(sess, sess.constant(xs.clone()), sess.constant(h0.clone()));
        let logits = states.matmul(sess.param("head"));
        logits.bce_with_logits(&t, &vec![true; 8], 4.0)
    });
}

#[test]
fn gather_concat_slice_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut store = ParamStore::new();
    store.insert_uniform("table", 7, 4, 0.8, &mut rng);
    store.insert_xavier("w", 8, 2, &mut rng);
    let t = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    gradcheck!(store, |sess| {
        // repeated index 2 exercises scatter-add in the gather backward
        let emb = sess.param("table").gather_rows(&[2, 5, 2]);
        let left = emb.slice_cols(0, 2);
        let right = emb.slice_cols(2, 4);
        let wide = concat_cols(&[right, emb.slice_cols(0, 2), left, right.scale(0.5)]);
        let rows = concat_rows(&[wide.slice_rows(0, 2), wide.slice_rows(2, 3)]);
        rows.matmul(sess.param("w")).bce_with_logits(&t, &vec![true; 6], 3.0)
    });
}

#[test]
fn bilinear_pointer_shape_gradients() {
    // the (W_g G + b_g) . (W_y y + b_y) pattern used by the copy scorer
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let mut store = ParamStore::new();
    store.insert_xavier("wg", 4, 4, &mut rng);
    store.insert_uniform("bg", 1, 4, 0.2, &mut rng);
    store.insert_xavier("wy", 4, 4, &mut rng);
    store.insert_uniform("by", 1, 4, 0.2, &mut rng);
    let gmat = rand_tensor(3, 4, &mut rng);
    let y = rand_tensor(2, 4, &mut rng);
    let t = Tensor::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    gradcheck!(store, |sess| {
        let gp = linear(sess.constant(gmat.clone()), sess.param("wg"), sess.param("bg"));
        let yp = linear(sess.constant(y.clone()), sess.param("wy"), sess.param("by"));
        let scores = yp.matmul(gp.transpose());
        scores.bce_with_logits(&t, &vec![true; 6], 2.0)
    });
}

#[test]
fn mul_mask_and_scale_compose() {
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    let mut store = ParamStore::new();
    store.insert_xavier("w", 3, 3, &mut rng);
    let x = rand_tensor(2, 3, &mut rng);
    let mask = Tensor::from_vec(2, 3, vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
    let t = Tensor::from_vec(2, 3, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    gradcheck!(store, |sess| {
        let h = sess.constant(x.clone()).matmul(sess.param("w")).mul_mask(mask.clone());
        let h = h.scale(1.7).sub(sess.constant(Tensor::filled(2, 3, 0.1)));
        h.bce_with_logits(&t, &vec![true; 6], 2.0)
    });
}
