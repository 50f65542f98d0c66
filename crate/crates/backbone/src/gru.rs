//! Gated recurrent cell used to walk token rows in sequence, carrying the
//! anchor embedding as the initial hidden state.

use rand::Rng;

use crate::graph::{Session, Val};
use crate::ops::concat_rows;
use crate::store::ParamStore;

pub struct GruCell {
    pub prefix: String,
    pub dim: usize,
}

impl GruCell {
    pub fn new(prefix: &str, dim: usize) -> Self {
        GruCell { prefix: prefix.to_string(), dim }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.dim;
        for nm in ["wz", "uz", "wr", "ur", "wh", "uh"] {
            store.insert_xavier(&format!("{}.{nm}", self.prefix), d, d, rng);
        }
        for nm in ["bz", "br", "bh"] {
            store.insert_zeros(&format!("{}.{nm}", self.prefix), 1, d);
        }
    }

    /// One step: x and h are 1xd, returns the next hidden state.
    pub fn step<'g>(&self, sess: &Session<'g>, x: Val<'g>, h: Val<'g>) -> Val<'g> {
        assert_eq!(x.shape(), (1, self.dim), "{}: x shape", self.prefix);
        assert_eq!(h.shape(), (1, self.dim), "{}: h shape", self.prefix);
        let p = |nm: &str| sess.param(&format!("{}.{nm}", self.prefix));
        let z = x.matmul(p("wz")).add(h.matmul(p("uz"))).add_row(p("bz")).sigmoid();
        let r = x.matmul(p("wr")).add(h.matmul(p("ur"))).add_row(p("br")).sigmoid();
        let cand = x.matmul(p("wh")).add(r.mul(h).matmul(p("uh"))).add_row(p("bh")).tanh();
        // h' = (1 - z) * h + z * cand
        h.sub(z.mul(h)).add(z.mul(cand))
    }

    /// Run over the rows of `xs` in order, starting from `h0`; returns the SxD
    /// matrix of hidden states, one row per input row.
    pub fn scan<'g>(&self, sess: &Session<'g>, xs: Val<'g>, h0: Val<'g>) -> Val<'g> {
        let s = xs.rows();
        assert!(s > 0, "{}: scan over empty sequence", self.prefix);
        let mut h = h0;
        let mut states = Vec::with_capacity(s);
        for r in 0..s {
            let x = xs.slice_rows(r, r + 1);
            h = self.step(sess, x, h);
            states.push(h);
        }
        concat_rows(&states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (GruCell, ParamStore) {
        let cell = GruCell::new("g", 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        cell.register(&mut store, &mut rng);
        (cell, store)
    }

    #[test]
    fn zero_params_follow_closed_form() {
        // with all weights zero: z = r = 0.5, cand = 0, so h' = 0.5 * h
        let cell = GruCell::new("g", 3);
        let mut store = ParamStore::new();
        for nm in ["wz", "uz", "wr", "ur", "wh", "uh"] {
            store.insert_zeros(&format!("g.{nm}"), 3, 3);
        }
        for nm in ["bz", "br", "bh"] {
            store.insert_zeros(&format!("g.{nm}"), 1, 3);
        }
        let g = Graph::new();
        let sess = Session::new(&g, &store);
        let h0 = g.constant(Tensor::row(&[1.0, -2.0, 4.0]));
        let x = g.constant(Tensor::row(&[3.0, 3.0, 3.0]));
        let h1 = cell.step(&sess, x, h0).value();
        assert_eq!(h1.data, vec![0.5, -1.0, 2.0]);
        // zero input and zero initial state stay exactly zero
        let z = g.constant(Tensor::zeros(1, 3));
        let h = cell.step(&sess, z, z).value();
        assert_eq!(h.data, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn scan_is_causal_in_input_rows() {
        let (cell, store) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        use rand::Rng;
        let base = Tensor::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut bumped = base.clone();
        *bumped.at_mut(3, 1) += 5.0;
        let run = |inp: Tensor| {
            let g = Graph::new();
            let sess = Session::new(&g, &store);
            let h0 = g.constant(Tensor::zeros(1, 4));
            cell.scan(&sess, g.constant(inp), h0).value()
        };
        let a = run(base);
        let b = run(bumped);
        for r in 0..3 {
            assert_eq!(a.row_slice(r), b.row_slice(r), "state {r} depends on a later input");
        }
        assert_ne!(a.row_slice(3), b.row_slice(3));
        assert_ne!(a.row_slice(4), b.row_slice(4), "perturbation must carry forward");
    }

    #[test]
    fn single_step_scan_matches_step() {
        let (cell, store) = fixture();
        let g = Graph::new();
        let sess = Session::new(&g, &store);
        let x = g.constant(Tensor::row(&[0.3, -0.1, 0.8, 0.0]));
        let h0 = g.constant(Tensor::row(&[0.1, 0.2, 0.3, 0.4]));
        let scan = cell.scan(&sess, x, h0).value();
        let step = cell.step(&sess, x, h0).value();
        assert_eq!(scan, step);
    }
}
