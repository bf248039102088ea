use place_autograd::{Real, Tensor};

use super::DiffusionError;

/// Linear-β DDPM noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

pub const DEFAULT_TIMESTEPS: usize = 1000;

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, 1e-4, 0.02)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 2 && 0.0 < beta_start && beta_start < beta_end && beta_end < 1.0);
        let betas: Vec<f64> = (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alphas_cumprod }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    /// `z_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
    pub fn q_sample<T: Real>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>, DiffusionError> {
        if t >= self.len() {
            return Err(DiffusionError::TimestepOutOfRange { t, steps: self.len() });
        }
        if x0.shape() != eps.shape() {
            return Err(DiffusionError::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
        }
        let a = T::lit(self.alphas_cumprod[t].sqrt());
        let s = T::lit((1.0 - self.alphas_cumprod[t]).sqrt());
        Ok(x0.zip_map(eps, |x, e| a * x + s * e))
    }

    /// `x̂_0 = (z_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t`.
    pub fn predicted_clean<T: Real>(&self, z_t: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Tensor<T> {
        let a = self.alphas_cumprod[t];
        let (inv, s) = (T::lit(1.0 / a.sqrt()), T::lit((1.0 - a).sqrt()));
        z_t.zip_map(eps, |z, e| (z - s * e) * inv)
    }
}

/// Sinusoidal features of a timestep: `sin(t ω_k)` then `cos(t ω_k)` with
/// `ω_k = 10000^(−k / (D/2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    values: Vec<f64>,
}

impl TimeEmbedding {
    pub fn new(t: usize, dim: usize) -> Self {
        assert!(dim >= 2 && dim.is_multiple_of(2), "time embedding width must be even");
        let half = dim / 2;
        let mut values = vec![0.0; dim];
        for k in 0..half {
            let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
            values[k] = (t as f64 * freq).sin();
            values[half + k] = (t as f64 * freq).cos();
        }
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.values.len()], &self.values).expect("1-d")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 1000);
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        assert!(s.alphas_cumprod().windows(2).all(|w| w[0] > w[1]));
        assert!(s.alphas_cumprod().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn q_sample_endpoints() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::<f64>::from_f64(&[4], &[0.5, -0.25, 1.0, -1.0]).unwrap();
        let eps = Tensor::<f64>::from_f64(&[4], &[1.0, -2.0, 0.3, 0.7]).unwrap();
        let z = s.q_sample(&x0, 0, &eps).unwrap();
        let bound = (1.0 - s.alpha_bar(0)).sqrt() * 2.0;
        assert!(z.max_abs_diff(&x0) < bound + 1e-12);
        let z = s.q_sample(&x0, 500, &Tensor::zeros(&[4])).unwrap();
        let want = x0.map(|v| v * s.alpha_bar(500).sqrt());
        assert_eq!(z, want);
        assert!(matches!(s.q_sample(&x0, 1000, &eps), Err(DiffusionError::TimestepOutOfRange { .. })));
    }

    #[test]
    fn q_sample_variance_monte_carlo() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in [10usize, 300, 999] {
            let n = 10_000;
            let x0 = Tensor::<f64>::zeros(&[n]);
            let eps = Tensor::new(&[n], (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
            let z = s.q_sample(&x0, t, &eps).unwrap();
            let mean = z.sum() / n as f64;
            let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let want = 1.0 - s.alpha_bar(t);
            assert!((var / want - 1.0).abs() < 0.05, "t={t}: {var} vs {want}");
        }
    }

    #[test]
    fn predicted_clean_inverts_q_sample() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::<f64>::from_f64(&[3], &[0.1, 0.2, -0.3]).unwrap();
        let eps = Tensor::<f64>::from_f64(&[3], &[1.0, 0.0, -1.0]).unwrap();
        let z = s.q_sample(&x0, 640, &eps).unwrap();
        assert!(s.predicted_clean(&z, 640, &eps).max_abs_diff(&x0) < 1e-12);
    }

    #[test]
    fn time_embedding_is_deterministic_and_bounded() {
        let a = TimeEmbedding::new(123, 16);
        assert_eq!(a, TimeEmbedding::new(123, 16));
        assert!(a.values().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(TimeEmbedding::new(0, 4).values(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
