use rand::Rng;

use super::{Mode, NnError, Real, Tensor};

/// Inverted dropout: survivors are scaled by 1/(1-p) during training.
#[derive(Debug, Clone)]
pub struct Dropout<T: Real> {
    p: f64,
    mask: Option<Vec<T>>,
}

impl<T: Real> Dropout<T> {
    pub fn new(p: f64) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::BadProbability(p));
        }
        Ok(Self { p, mask: None })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut impl Rng) -> Tensor<T> {
        if mode == Mode::Eval || self.p == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = T::lit(1.0 / (1.0 - self.p));
        let mask: Vec<T> = (0..x.len()).map(|_| if rng.gen::<f64>() < self.p { T::zero() } else { keep }).collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        self.mask = Some(mask);
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }

    /// Reuses the forward mask; identity when the forward pass was.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        match self.mask.take() {
            Some(mask) => {
                let data = grad_out.data().iter().zip(&mask).map(|(g, m)| *g * *m).collect();
                Tensor::from_vec(grad_out.shape(), data).expect("same shape")
            }
            None => grad_out.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_and_zero_p_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Dropout::new(0.3).unwrap().forward(&x, Mode::Eval, &mut rng), x);
        let mut d = Dropout::new(0.0).unwrap();
        assert_eq!(d.forward(&x, Mode::Train, &mut rng), x);
        assert_eq!(d.backward(&x), x);
    }

    #[test]
    fn bad_probability() {
        assert_eq!(Dropout::<f64>::new(1.0).unwrap_err(), NnError::BadProbability(1.0));
        assert!(Dropout::<f64>::new(-0.1).is_err());
    }

    #[test]
    fn survival_rate_and_mean() {
        let n = 100_000;
        let x = Tensor::from_vec(&[n], vec![1.0f64; n]).unwrap();
        let mut means = Vec::new();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut d = Dropout::new(0.3).unwrap();
            let y = d.forward(&x, Mode::Train, &mut rng);
            let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
            assert!((kept - 0.7).abs() < 0.01, "kept {kept}");
            means.push(y.data().iter().sum::<f64>() / n as f64);
            // backward applies the same mask
            let g = d.backward(&x);
            assert_eq!(g.data(), y.data());
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        assert!((mean - 1.0).abs() < 0.02);
    }

    #[test]
    fn seeded_masks_repeat() {
        let x = Tensor::from_vec(&[64], vec![1.0f32; 64]).unwrap();
        let run = || Dropout::new(0.3).unwrap().forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(run(), run());
    }
}
