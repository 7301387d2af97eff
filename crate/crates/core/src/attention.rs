//! Multi-head scaled dot-product cross-attention.
//!
//! A single query vector attends over a sequence that provides both keys and
//! values. Per-head projections are stored as the row blocks of full `D × D`
//! matrices: rows `i·d_h .. (i+1)·d_h` of `w_q` are head `i`'s query map.

use rand::Rng;

use crate::tensor::{axpy, dot, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Vec<f64>,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention weights, one row per head over the sequence positions.
    pub alpha: Matrix,
    /// Concatenated head outputs `[a_1; …; a_h]`.
    pub concat: Vec<f64>,
    pub out: Vec<f64>,
}

impl AttentionParams {
    pub fn zeros(latent: usize, heads: usize) -> Self {
        assert!(heads > 0 && latent.is_multiple_of(heads), "latent must split across heads");
        AttentionParams {
            heads,
            w_q: Matrix::zeros(latent, latent),
            w_k: Matrix::zeros(latent, latent),
            w_v: Matrix::zeros(latent, latent),
            w_o: Matrix::zeros(latent, latent),
        }
    }

    pub fn init<R: Rng + ?Sized>(latent: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && latent.is_multiple_of(heads), "latent must split across heads");
        let b = 1.0 / (latent as f64).sqrt();
        AttentionParams {
            heads,
            w_q: Matrix::uniform(latent, latent, b, rng),
            w_k: Matrix::uniform(latent, latent, b, rng),
            w_v: Matrix::uniform(latent, latent, b, rng),
            w_o: Matrix::uniform(latent, latent, b, rng),
        }
    }

    pub fn latent(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.latent() / self.heads
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 4] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 4] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
        ]
    }

    /// Fuses `query` (D) with `seq` (L × D).
    pub fn forward(&self, query: &[f64], seq: &Matrix) -> AttentionCache {
        let d = self.latent();
        let dh = self.head_dim();
        let steps = seq.rows();
        assert_eq!(query.len(), d, "attention query width");
        assert_eq!(seq.cols(), d, "attention sequence width");

        let mut q = vec![0.0; d];
        self.w_q.matvec(query, &mut q);
        let mut k = Matrix::zeros(steps, d);
        let mut v = Matrix::zeros(steps, d);
        for t in 0..steps {
            self.w_k.matvec(seq.row(t), k.row_mut(t));
            self.w_v.matvec(seq.row(t), v.row_mut(t));
        }

        let scale = 1.0 / (dh as f64).sqrt();
        let mut alpha = Matrix::zeros(self.heads, steps);
        let mut concat = vec![0.0; d];
        for i in 0..self.heads {
            let block = i * dh..(i + 1) * dh;
            let qi = &q[block.clone()];
            let a = alpha.row_mut(i);
            for (t, at) in a.iter_mut().enumerate() {
                *at = dot(&k.row(t)[block.clone()], qi) * scale;
            }
            softmax_in_place(a);
            let out = &mut concat[block.clone()];
            for (t, &at) in a.iter().enumerate() {
                axpy(at, &v.row(t)[block.clone()], out);
            }
        }
        let mut out = vec![0.0; d];
        self.w_o.matvec(&concat, &mut out);
        AttentionCache {
            q,
            k,
            v,
            alpha,
            concat,
            out,
        }
    }

    /// Output of [`forward`](Self::forward) without the cache.
    ///
    /// With a single query the key and value projections can be moved off
    /// the sequence: scores are `(W_kᵀ q_i) · s_t` and the head output is
    /// `W_v (Σ_t α_t s_t)`, which costs O(L·D) instead of O(L·D²).
    pub fn apply(&self, query: &[f64], seq: &Matrix) -> Vec<f64> {
        let d = self.latent();
        let dh = self.head_dim();
        let steps = seq.rows();
        assert_eq!(query.len(), d, "attention query width");
        assert_eq!(seq.cols(), d, "attention sequence width");

        let mut q = vec![0.0; d];
        self.w_q.matvec(query, &mut q);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut key = vec![0.0; d];
        let mut context = vec![0.0; d];
        let mut alpha = vec![0.0; steps];
        let mut concat = vec![0.0; d];
        for i in 0..self.heads {
            let block = i * dh..(i + 1) * dh;
            key.fill(0.0);
            for (&qj, row) in q[block.clone()].iter().zip(self.w_k.as_slice()[i * dh * d..].chunks_exact(d)) {
                axpy(qj, row, &mut key);
            }
            for (t, at) in alpha.iter_mut().enumerate() {
                *at = dot(seq.row(t), &key) * scale;
            }
            softmax_in_place(&mut alpha);
            context.fill(0.0);
            for (t, &at) in alpha.iter().enumerate() {
                axpy(at, seq.row(t), &mut context);
            }
            for (c, row) in concat[block].iter_mut().zip(self.w_v.as_slice()[i * dh * d..].chunks_exact(d)) {
                *c = dot(row, &context);
            }
        }
        let mut out = vec![0.0; d];
        self.w_o.matvec(&concat, &mut out);
        out
    }

    /// Accumulates parameter gradients and returns `(d_query, d_seq)`.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        query: &[f64],
        seq: &Matrix,
        d_out: &[f64],
        grads: &mut AttentionParams,
    ) -> (Vec<f64>, Matrix) {
        let d = self.latent();
        let dh = self.head_dim();
        let steps = seq.rows();
        let scale = 1.0 / (dh as f64).sqrt();

        grads.w_o.add_outer(d_out, &cache.concat);
        let mut d_concat = vec![0.0; d];
        self.w_o.t_matvec_add(d_out, &mut d_concat);

        let mut d_q = vec![0.0; d];
        let mut d_k = Matrix::zeros(steps, d);
        let mut d_v = Matrix::zeros(steps, d);
        let mut d_alpha = vec![0.0; steps];
        for i in 0..self.heads {
            let block = i * dh..(i + 1) * dh;
            let dc = &d_concat[block.clone()];
            let a = cache.alpha.row(i);
            for t in 0..steps {
                d_alpha[t] = dot(dc, &cache.v.row(t)[block.clone()]);
                axpy(a[t], dc, &mut d_v.row_mut(t)[block.clone()]);
            }
            let mean: f64 = a.iter().zip(&d_alpha).map(|(x, y)| x * y).sum();
            let qi = &cache.q[block.clone()];
            for t in 0..steps {
                let ds = a[t] * (d_alpha[t] - mean) * scale;
                axpy(ds, &cache.k.row(t)[block.clone()], &mut d_q[block.clone()]);
                axpy(ds, qi, &mut d_k.row_mut(t)[block.clone()]);
            }
        }

        grads.w_q.add_outer(&d_q, query);
        let mut d_query = vec![0.0; d];
        self.w_q.t_matvec_add(&d_q, &mut d_query);

        let mut d_seq = Matrix::zeros(steps, d);
        for t in 0..steps {
            grads.w_k.add_outer(d_k.row(t), seq.row(t));
            grads.w_v.add_outer(d_v.row(t), seq.row(t));
            let row = d_seq.row_mut(t);
            self.w_k.t_matvec_add(d_k.row(t), row);
            self.w_v.t_matvec_add(d_v.row(t), row);
        }
        (d_query, d_seq)
    }
}

fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(latent: usize, heads: usize, steps: usize, seed: u64) -> (AttentionParams, Vec<f64>, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionParams::init(latent, heads, &mut rng);
        let q = Matrix::uniform(1, latent, 1.0, &mut rng).as_slice().to_vec();
        let s = Matrix::uniform(steps, latent, 1.0, &mut rng);
        (p, q, s)
    }

    #[test]
    fn apply_matches_cached_forward() {
        let (p, q, s) = setup(16, 4, 12, 4);
        let cached = p.forward(&q, &s).out;
        let fast = p.apply(&q, &s);
        for (x, y) in cached.iter().zip(&fast) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn weights_form_a_distribution() {
        let (p, q, s) = setup(16, 4, 10, 1);
        let c = p.forward(&q, &s);
        for i in 0..4 {
            let row = c.alpha.row(i);
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_make_weights_irrelevant() {
        let (p, q, s) = setup(8, 2, 6, 2);
        let same = Matrix::from_vec(6, 8, s.row(0).repeat(6));
        let single = Matrix::from_vec(1, 8, s.row(0).to_vec());
        let a = p.forward(&q, &same).out;
        let b = p.forward(&q, &single).out;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_sequence_returns_projected_value() {
        let (p, q, s) = setup(8, 2, 1, 3);
        let c = p.forward(&q, &s);
        assert_eq!(c.alpha.as_slice(), &[1.0, 1.0]);
        let mut v = vec![0.0; 8];
        p.w_v.matvec(s.row(0), &mut v);
        let mut expect = vec![0.0; 8];
        p.w_o.matvec(&v, &mut expect);
        for (x, y) in c.out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn permuting_rows_permutes_weights() {
        let (p, q, s) = setup(8, 2, 4, 4);
        let perm = [2usize, 0, 3, 1];
        let mut shuffled = Matrix::zeros(4, 8);
        for (dst, &src) in perm.iter().enumerate() {
            shuffled.row_mut(dst).copy_from_slice(s.row(src));
        }
        let a = p.forward(&q, &s);
        let b = p.forward(&q, &shuffled);
        for i in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                assert!((a.alpha.get(i, src) - b.alpha.get(i, dst)).abs() < 1e-14);
            }
        }
        // the fused output is a permutation-invariant weighted sum
        for (x, y) in a.out.iter().zip(&b.out) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (p, q, s) = setup(6, 3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Matrix::uniform(1, 6, 1.0, &mut rng).as_slice().to_vec();
        let loss = |p: &AttentionParams, q: &[f64], s: &Matrix| -> f64 {
            p.forward(q, s).out.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let cache = p.forward(&q, &s);
        let mut grads = AttentionParams::zeros(6, 3);
        let (dq, ds) = p.backward(&cache, &q, &s, &w, &mut grads);
        let eps = 1e-6;

        let mut probe = p.clone();
        for k in 0..4 {
            for i in 0..36 {
                let orig = probe.tensors()[k].1.as_slice()[i];
                probe.tensors_mut()[k].1.as_mut_slice()[i] = orig + eps;
                let up = loss(&probe, &q, &s);
                probe.tensors_mut()[k].1.as_mut_slice()[i] = orig - eps;
                let down = loss(&probe, &q, &s);
                probe.tensors_mut()[k].1.as_mut_slice()[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                assert!((fd - grads.tensors()[k].1.as_slice()[i]).abs() < 1e-8);
            }
        }
        for i in 0..6 {
            let mut qp = q.clone();
            qp[i] += eps;
            let mut qm = q.clone();
            qm[i] -= eps;
            let fd = (loss(&p, &qp, &s) - loss(&p, &qm, &s)) / (2.0 * eps);
            assert!((fd - dq[i]).abs() < 1e-8);
        }
        for i in 0..s.len() {
            let mut sp = s.clone();
            sp.as_mut_slice()[i] += eps;
            let mut sm = s.clone();
            sm.as_mut_slice()[i] -= eps;
            let fd = (loss(&p, &q, &sp) - loss(&p, &q, &sm)) / (2.0 * eps);
            assert!((fd - ds.as_slice()[i]).abs() < 1e-8);
        }
    }
}
