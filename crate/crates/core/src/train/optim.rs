/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-parameter step counts; frozen entries do not advance.
    t: Vec<u32>,
    decay: Vec<bool>,
}

impl AdamW {
    /// `decay[i]` selects which parameters receive weight decay.
    pub fn new(lr: f64, weight_decay: f64, decay: Vec<bool>) -> Self {
        let n = decay.len();
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: vec![0; n],
            decay,
        }
    }

    /// One update. Entries with `active[i] == false` are left untouched,
    /// moments included.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], active: &[bool]) {
        for i in 0..params.len() {
            if !active[i] {
                continue;
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            if self.decay[i] {
                params[i] *= 1.0 - self.lr * self.weight_decay;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / (1.0 - self.beta1.powi(t));
            let v_hat = self.v[i] / (1.0 - self.beta2.powi(t));
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first step exactly lr * sign(g)
        let mut opt = AdamW::new(0.1, 0.0, vec![true; 2]);
        let mut p = vec![1.0, 1.0];
        opt.step(&mut p, &[3.0, -0.5], &[true, true]);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled_and_masked() {
        let mut opt = AdamW::new(1e-3, 1e-3, vec![true, false]);
        let mut p = vec![2.0, 2.0];
        opt.step(&mut p, &[0.0, 0.0], &[true, true]);
        assert_eq!(p[0], 2.0 * (1.0 - 1e-6));
        assert_eq!(p[1], 2.0);
    }

    #[test]
    fn frozen_entries_untouched() {
        let mut opt = AdamW::new(1e-2, 1e-2, vec![true; 2]);
        let mut p = vec![1.0, 1.0];
        for _ in 0..10 {
            opt.step(&mut p, &[1.0, 1.0], &[true, false]);
        }
        assert_eq!(p[1], 1.0);
        assert!(p[0] < 1.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::new(0.05, 0.0, vec![true; 3]);
        let target = [1.0, -2.0, 0.5];
        let mut p = vec![0.0; 3];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            opt.step(&mut p, &g, &[true; 3]);
        }
        for (a, b) in p.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
