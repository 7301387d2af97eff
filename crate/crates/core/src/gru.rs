//! Gated recurrent unit encoder with an exact reverse-mode pass.
//!
//! Gate rows are stacked as `[z; r; n]` (update, reset, candidate):
//!
//! ```text
//! z = σ(W_iz x + b_iz + W_hz h + b_hz)
//! r = σ(W_ir x + b_ir + W_hr h + b_hr)
//! n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```
//!
//! The recurrence starts from a zero hidden state.

use rand::Rng;

use crate::tensor::{sigmoid, tanh, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_ih: Matrix,
    pub b_ih: Matrix,
    pub w_hh: Matrix,
    pub b_hh: Matrix,
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub x: Matrix,
    /// Hidden states, one row per step.
    pub h: Matrix,
    /// Post-activation gates `[z; r; n]`, one row per step.
    gates: Matrix,
    /// `W_hn h_prev + b_hn`, needed for the reset-gate gradient.
    hn: Matrix,
}

impl GruParams {
    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        GruParams {
            w_ih: Matrix::zeros(3 * hidden, d_in),
            b_ih: Matrix::zeros(3 * hidden, 1),
            w_hh: Matrix::zeros(3 * hidden, hidden),
            b_hh: Matrix::zeros(3 * hidden, 1),
        }
    }

    /// U(−1/√fan_in, 1/√fan_in) per matrix; each bias shares its matrix's bound.
    pub fn init<R: Rng + ?Sized>(d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let bi = 1.0 / (d_in as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        GruParams {
            w_ih: Matrix::uniform(3 * hidden, d_in, bi, rng),
            b_ih: Matrix::uniform(3 * hidden, 1, bi, rng),
            w_hh: Matrix::uniform(3 * hidden, hidden, bh, rng),
            b_hh: Matrix::uniform(3 * hidden, 1, bh, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 4] {
        [
            ("w_ih", &self.w_ih),
            ("b_ih", &self.b_ih),
            ("w_hh", &self.w_hh),
            ("b_hh", &self.b_hh),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 4] {
        [
            ("w_ih", &mut self.w_ih),
            ("b_ih", &mut self.b_ih),
            ("w_hh", &mut self.w_hh),
            ("b_hh", &mut self.b_hh),
        ]
    }

    /// Runs the recurrence over the rows of `x` (L × d_in).
    pub fn forward(&self, x: Matrix) -> GruCache {
        let d = self.hidden_dim();
        let steps = x.rows();
        assert_eq!(x.cols(), self.input_dim(), "GRU input width");
        assert!(steps >= 1, "GRU needs at least one step");

        let mut h = Matrix::zeros(steps, d);
        let mut gates = Matrix::zeros(steps, 3 * d);
        let mut hn = Matrix::zeros(steps, d);
        let mut gi = vec![0.0; 3 * d];
        let mut gh = vec![0.0; 3 * d];
        let mut h_prev = vec![0.0; d];
        // Inputs are only a few features wide, so the input projection is
        // cheaper as a sum of weight columns than as 3·d short dot products.
        let w_ih_t = self.w_ih.transpose();

        for t in 0..steps {
            gi.copy_from_slice(self.b_ih.as_slice());
            w_ih_t.t_matvec_add(x.row(t), &mut gi);
            self.w_hh.matvec(&h_prev, &mut gh);
            add(&mut gh, self.b_hh.as_slice());

            let g = gates.row_mut(t);
            for j in 0..d {
                let z = sigmoid(gi[j] + gh[j]);
                let r = sigmoid(gi[d + j] + gh[d + j]);
                let n = tanh(gi[2 * d + j] + r * gh[2 * d + j]);
                g[j] = z;
                g[d + j] = r;
                g[2 * d + j] = n;
                h_prev[j] = (1.0 - z) * n + z * h_prev[j];
            }
            hn.row_mut(t).copy_from_slice(&gh[2 * d..]);
            h.row_mut(t).copy_from_slice(&h_prev);
        }
        GruCache { x, h, gates, hn }
    }

    /// Accumulates parameter gradients into `grads` given `d_h`, the loss
    /// gradient with respect to every hidden state. Returns the gradient with
    /// respect to the inputs when `want_dx` is set.
    pub fn backward(
        &self,
        cache: &GruCache,
        d_h: &Matrix,
        grads: &mut GruParams,
        want_dx: bool,
    ) -> Option<Matrix> {
        let d = self.hidden_dim();
        let steps = cache.h.rows();
        assert_eq!((d_h.rows(), d_h.cols()), (steps, d), "GRU output gradient");

        let mut d_x = want_dx.then(|| Matrix::zeros(steps, self.input_dim()));
        let mut carry = vec![0.0; d];
        let mut dh = vec![0.0; d];
        let mut dgi = vec![0.0; 3 * d];
        let mut dgh = vec![0.0; 3 * d];
        let zero = vec![0.0; d];

        for t in (0..steps).rev() {
            let h_prev = if t == 0 { &zero[..] } else { cache.h.row(t - 1) };
            let g = cache.gates.row(t);
            let hn = cache.hn.row(t);
            for j in 0..d {
                dh[j] = d_h.get(t, j) + carry[j];
            }
            if dh.iter().all(|&v| v == 0.0) {
                continue;
            }
            for j in 0..d {
                let (z, r, n) = (g[j], g[d + j], g[2 * d + j]);
                let dn = dh[j] * (1.0 - z);
                let dz = dh[j] * (h_prev[j] - n);
                let dan = dn * (1.0 - n * n);
                let dr = dan * hn[j];
                let daz = dz * z * (1.0 - z);
                let dar = dr * r * (1.0 - r);
                dgi[j] = daz;
                dgi[d + j] = dar;
                dgi[2 * d + j] = dan;
                dgh[j] = daz;
                dgh[d + j] = dar;
                dgh[2 * d + j] = dan * r;
                carry[j] = dh[j] * z;
            }
            grads.w_ih.add_outer(&dgi, cache.x.row(t));
            add(grads.b_ih.as_mut_slice(), &dgi);
            grads.w_hh.add_outer(&dgh, h_prev);
            add(grads.b_hh.as_mut_slice(), &dgh);
            self.w_hh.t_matvec_add(&dgh, &mut carry);
            if let Some(dx) = d_x.as_mut() {
                self.w_ih.t_matvec_add(&dgi, dx.row_mut(t));
            }
        }
        d_x
    }
}

impl GruCache {
    pub fn last(&self) -> &[f64] {
        self.h.row(self.h.rows() - 1)
    }
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}
