//! Positive-definite affine layer `y = (W W^T + e^phi I) x + mu`.
//!
//! `W` is `d x q`. The effective matrix is symmetric positive-definite for
//! every parameter value, so the layer is always invertible and
//! orientation-preserving. Inverse and log-determinant go through the
//! `q x q` capacitance matrix `C = e^phi I_q + W^T W`.

use nalgebra::DMatrix;
use smallvec::SmallVec;

#[derive(Clone, Debug)]
pub struct AffineLayer {
    dim: usize,
    rank: usize,
    /// Row-major `dim x rank`.
    w: Vec<f64>,
    varphi: f64,
    mu: Vec<f64>,
    cache: AffineCache,
}

#[derive(Clone, Debug, Default)]
struct AffineCache {
    /// Dense `W W^T + e^phi I`, row-major.
    m: Vec<f64>,
    scale: f64,
    /// `C^{-1}`, row-major `rank x rank`.
    c_inv: Vec<f64>,
    log_det: f64,
    /// `tr(C^{-1} W^T W)`.
    trace_term: f64,
}

/// Accumulated adjoints for one affine layer.
#[derive(Clone, Debug)]
pub struct AffineGrad {
    /// Adjoint of the dense matrix `M`, row-major.
    pub m_bar: Vec<f64>,
    pub mu_bar: Vec<f64>,
    /// Total weight on this layer's log-determinant.
    pub log_det_weight: f64,
}

impl AffineGrad {
    pub fn zeros(dim: usize) -> Self {
        AffineGrad {
            m_bar: vec![0.0; dim * dim],
            mu_bar: vec![0.0; dim],
            log_det_weight: 0.0,
        }
    }

    pub fn add(&mut self, other: &AffineGrad) {
        self.m_bar.iter_mut().zip(&other.m_bar).for_each(|(a, b)| *a += b);
        self.mu_bar.iter_mut().zip(&other.mu_bar).for_each(|(a, b)| *a += b);
        self.log_det_weight += other.log_det_weight;
    }
}

impl AffineLayer {
    pub fn new(dim: usize, rank: usize, w: Vec<f64>, varphi: f64, mu: Vec<f64>) -> Self {
        assert_eq!(w.len(), dim * rank, "W must be dim x rank");
        assert_eq!(mu.len(), dim, "mu must have length dim");
        let mut layer = AffineLayer {
            dim,
            rank,
            w,
            varphi,
            mu,
            cache: AffineCache::default(),
        };
        layer.refresh();
        layer
    }

    pub fn identity(dim: usize, rank: usize) -> Self {
        Self::new(dim, rank, vec![0.0; dim * rank], 0.0, vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn varphi(&self) -> f64 {
        self.varphi
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Dense effective matrix, row-major.
    pub fn matrix(&self) -> &[f64] {
        &self.cache.m
    }

    pub fn num_params(&self) -> usize {
        self.dim * self.rank + 1 + self.dim
    }

    pub fn write_params(&self, out: &mut [f64]) {
        let nw = self.w.len();
        out[..nw].copy_from_slice(&self.w);
        out[nw] = self.varphi;
        out[nw + 1..nw + 1 + self.dim].copy_from_slice(&self.mu);
    }

    pub fn read_params(&mut self, src: &[f64]) {
        let nw = self.w.len();
        self.w.copy_from_slice(&src[..nw]);
        self.varphi = src[nw];
        self.mu.copy_from_slice(&src[nw + 1..nw + 1 + self.dim]);
        self.refresh();
    }

    fn refresh(&mut self) {
        let (d, q) = (self.dim, self.rank);
        let scale = self.varphi.exp();
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..q {
                    acc += self.w[i * q + k] * self.w[j * q + k];
                }
                m[i * d + j] = acc;
            }
            m[i * d + i] += scale;
        }
        let wtw = DMatrix::from_fn(q, q, |a, b| (0..d).map(|i| self.w[i * q + a] * self.w[i * q + b]).sum::<f64>());
        let cap = &wtw + DMatrix::identity(q, q) * scale;
        let (c_inv, log_det_c) = match cap.clone().cholesky() {
            Some(ch) => {
                let log_det_c = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                (ch.inverse(), log_det_c)
            }
            // Only reachable with non-finite parameters.
            None => (DMatrix::from_element(q, q, f64::NAN), f64::NAN),
        };
        let trace_term = (&c_inv * &wtw).trace();
        self.cache = AffineCache {
            m,
            scale,
            c_inv: (0..q * q).map(|k| c_inv[(k / q, k % q)]).collect(),
            log_det: (d - q) as f64 * self.varphi + log_det_c,
            trace_term,
        };
    }

    #[inline]
    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let m = &self.cache.m;
        for i in 0..d {
            let row = &m[i * d..(i + 1) * d];
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `M^{-1} r` by the Woodbury identity.
    pub fn solve(&self, r: &[f64], out: &mut [f64]) {
        let (d, q) = (self.dim, self.rank);
        let t: SmallVec<[f64; 16]> = (0..q).map(|k| (0..d).map(|i| self.w[i * q + k] * r[i]).sum()).collect();
        let s: SmallVec<[f64; 16]> = (0..q)
            .map(|a| (0..q).map(|b| self.cache.c_inv[a * q + b] * t[b]).sum())
            .collect();
        let inv_scale = 1.0 / self.cache.scale;
        for i in 0..d {
            let ws: f64 = (0..q).map(|k| self.w[i * q + k] * s[k]).sum();
            out[i] = inv_scale * (r[i] - ws);
        }
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y);
        y.iter_mut().zip(&self.mu).for_each(|(y, m)| *y += m);
    }

    pub fn forward_tangent(&self, x: &[f64], v: &[f64], y: &mut [f64], w: &mut [f64]) {
        self.forward(x, y);
        self.matvec(v, w);
    }

    pub fn inverse(&self, y: &[f64], x: &mut [f64]) {
        let r: SmallVec<[f64; 16]> = y.iter().zip(&self.mu).map(|(y, m)| y - m).collect();
        self.solve(&r, x);
    }

    pub fn log_det(&self) -> f64 {
        self.cache.log_det
    }

    /// Reverse pass through `forward_tangent`: writes `x_bar`, `v_bar`.
    pub fn backward(
        &self,
        x: &[f64],
        v: &[f64],
        y_bar: &[f64],
        w_bar: &[f64],
        x_bar: &mut [f64],
        v_bar: &mut [f64],
        grad: &mut AffineGrad,
    ) {
        let d = self.dim;
        self.matvec(y_bar, x_bar);
        self.matvec(w_bar, v_bar);
        for i in 0..d {
            let (yb, wb) = (y_bar[i], w_bar[i]);
            let row = &mut grad.m_bar[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] += yb * x[j] + wb * v[j];
            }
            grad.mu_bar[i] += yb;
        }
    }

    /// Reverse pass through `forward` alone.
    pub fn backward_primal(&self, x: &[f64], y_bar: &[f64], x_bar: &mut [f64], grad: &mut AffineGrad) {
        let d = self.dim;
        self.matvec(y_bar, x_bar);
        for i in 0..d {
            let yb = y_bar[i];
            let row = &mut grad.m_bar[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] += yb * x[j];
            }
            grad.mu_bar[i] += yb;
        }
    }

    /// Reverse pass through `inverse`; `x` is the inverse's output.
    pub fn backward_inverse(&self, x: &[f64], x_bar: &[f64], y_bar: &mut [f64], grad: &mut AffineGrad) {
        let d = self.dim;
        self.solve(x_bar, y_bar);
        for i in 0..d {
            let a = y_bar[i];
            let row = &mut grad.m_bar[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] -= a * x[j];
            }
            grad.mu_bar[i] -= a;
        }
    }

    /// Converts accumulated adjoints into the flat `(W, phi, mu)` gradient.
    pub fn finalize_grad(&self, grad: &AffineGrad, out: &mut [f64]) {
        let (d, q) = (self.dim, self.rank);
        let m_bar = &grad.m_bar;
        // M = W W^T + e^phi I  =>  W_bar = (M_bar + M_bar^T) W, phi_bar = e^phi tr(M_bar)
        for i in 0..d {
            for k in 0..q {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += (m_bar[i * d + j] + m_bar[j * d + i]) * self.w[j * q + k];
                }
                out[i * q + k] = acc;
            }
        }
        let trace: f64 = (0..d).map(|i| m_bar[i * d + i]).sum();
        let mut phi_bar = self.cache.scale * trace;
        if grad.log_det_weight != 0.0 {
            // d log det M = tr(M^{-1} dM);  M^{-1} W = W C^{-1}
            let lw = grad.log_det_weight;
            for i in 0..d {
                for k in 0..q {
                    let wc: f64 = (0..q).map(|b| self.w[i * q + b] * self.cache.c_inv[b * q + k]).sum();
                    out[i * q + k] += lw * 2.0 * wc;
                }
            }
            phi_bar += lw * (d as f64 - self.cache.trace_term);
        }
        out[d * q] = phi_bar;
        out[d * q + 1..d * q + 1 + d].copy_from_slice(&grad.mu_bar);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_layer(d: usize, q: usize, seed: u64) -> AffineLayer {
        let mut rng = crate::rng::rng_from_seed(seed);
        let w = (0..d * q).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mu = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        AffineLayer::new(d, q, w, rng.random_range(-1.0..1.0), mu)
    }

    #[test]
    fn shift_only() {
        let layer = AffineLayer::new(2, 2, vec![0.0; 4], 0.0, vec![1.0, 1.0]);
        let mut y = [0.0; 2];
        layer.forward(&[0.0, 0.0], &mut y);
        assert_eq!(y, [1.0, 1.0]);
    }

    #[test]
    fn scalar_log_det() {
        let layer = AffineLayer::new(2, 2, vec![0.0; 4], 2f64.ln(), vec![0.0; 2]);
        assert!((layer.log_det() - 2.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn woodbury_matches_dense_solve() {
        for (d, q, seed) in [(2, 2, 1), (6, 2, 2), (10, 10, 3), (5, 3, 4)] {
            let layer = random_layer(d, q, seed);
            let m = DMatrix::from_row_slice(d, d, layer.matrix());
            let r: Vec<f64> = (0..d).map(|i| (i as f64 * 0.7).sin()).collect();
            let dense = m.lu().solve(&nalgebra::DVector::from_vec(r.clone())).unwrap();
            let mut x = vec![0.0; d];
            layer.solve(&r, &mut x);
            for i in 0..d {
                assert!((x[i] - dense[i]).abs() < 1e-10, "d={d} q={q}");
            }
        }
    }

    #[test]
    fn log_det_matches_dense() {
        for (d, q, seed) in [(2, 2, 5), (6, 2, 6), (10, 10, 7)] {
            let layer = random_layer(d, q, seed);
            let m = DMatrix::from_row_slice(d, d, layer.matrix());
            let dense = m.determinant().ln();
            assert!((layer.log_det() - dense).abs() < 1e-10 * dense.abs().max(1.0));
        }
    }

    #[test]
    fn inverse_round_trip() {
        let layer = random_layer(6, 2, 9);
        let x = [0.3, -1.0, 2.0, 0.5, -0.1, 4.0];
        let mut y = [0.0; 6];
        let mut back = [0.0; 6];
        layer.forward(&x, &mut y);
        layer.inverse(&y, &mut back);
        for i in 0..6 {
            assert!((back[i] - x[i]).abs() < 1e-12);
        }
    }
}
