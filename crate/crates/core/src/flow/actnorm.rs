/// Per-coordinate standardization, frozen after initialization from data.
#[derive(Clone, Debug, PartialEq)]
pub struct ActNorm {
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// Smallest admissible standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

impl ActNorm {
    /// Panics if any `std` entry is not strictly positive.
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), std.len());
        assert!(std.iter().all(|s| *s > 0.0), "ActNorm std must be > 0");
        ActNorm { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        ActNorm {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics of the given positions, with degenerate coordinates floored.
    pub fn from_stats(mean: Vec<f64>, std: Vec<f64>) -> Self {
        let std = std
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                if s < STD_FLOOR || !s.is_finite() {
                    log::warn!("coordinate {i} has std {s}; flooring to {STD_FLOOR}");
                    STD_FLOOR
                } else {
                    s
                }
            })
            .collect();
        ActNorm::new(mean, std)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..x.len() {
            y[i] = (x[i] - self.mean[i]) / self.std[i];
        }
    }

    pub fn forward_tangent(&self, x: &[f64], v: &[f64], y: &mut [f64], w: &mut [f64]) {
        self.forward(x, y);
        for i in 0..v.len() {
            w[i] = v[i] / self.std[i];
        }
    }

    pub fn inverse(&self, y: &[f64], x: &mut [f64]) {
        for i in 0..y.len() {
            x[i] = y[i] * self.std[i] + self.mean[i];
        }
    }

    pub fn log_det(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }

    pub fn backward(&self, y_bar: &[f64], w_bar: &[f64], x_bar: &mut [f64], v_bar: &mut [f64]) {
        for i in 0..y_bar.len() {
            x_bar[i] = y_bar[i] / self.std[i];
            v_bar[i] = w_bar[i] / self.std[i];
        }
    }

    pub fn backward_primal(&self, y_bar: &[f64], x_bar: &mut [f64]) {
        for i in 0..y_bar.len() {
            x_bar[i] = y_bar[i] / self.std[i];
        }
    }

    pub fn backward_inverse(&self, x_bar: &[f64], y_bar: &mut [f64]) {
        for i in 0..x_bar.len() {
            y_bar[i] = x_bar[i] * self.std[i];
        }
    }
}
