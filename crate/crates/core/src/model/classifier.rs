use rand::Rng;

use super::ModelError;
use crate::nncore::{Dense, Dropout, Mode, Real, Relu, Tensor};

pub const DROPOUT_P: f64 = 0.3;
pub const HIDDEN_UNITS: usize = 8;

/// dropout → dense(L→8) → ReLU → [append sex] → dense(→2).
#[derive(Debug, Clone)]
pub struct Classifier<T: Real> {
    dropout: Dropout<T>,
    pub dense1: Dense<T>,
    relu: Relu,
    pub dense2: Dense<T>,
    use_sex: bool,
}

impl<T: Real> Classifier<T> {
    pub fn new(input_len: usize, use_sex: bool, rng: &mut impl Rng) -> Self {
        Self {
            dropout: Dropout::new(DROPOUT_P).expect("valid probability"),
            dense1: Dense::new(input_len, HIDDEN_UNITS, rng),
            relu: Relu::new(),
            dense2: Dense::new(HIDDEN_UNITS + usize::from(use_sex), 2, rng),
            use_sex,
        }
    }

    pub fn input_len(&self) -> usize {
        self.dense1.inputs()
    }

    pub fn uses_sex(&self) -> bool {
        self.use_sex
    }

    /// Returns N×2 logits.
    pub fn forward(
        &mut self,
        rep: &Tensor<T>,
        sex: Option<&[T]>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>, ModelError> {
        let n = rep.shape()[0];
        let h = self.dropout.forward(rep, mode, rng);
        let h = self.dense1.forward(&h)?;
        let h = self.relu.forward(&h);
        let h = match (self.use_sex, sex) {
            (false, None) => h,
            (true, Some(s)) => {
                if s.len() != n {
                    return Err(ModelError::ShapeMismatch(format!("{} sex values for batch of {n}", s.len())));
                }
                let mut data = Vec::with_capacity(n * (HIDDEN_UNITS + 1));
                for (row, &sv) in h.data().chunks_exact(HIDDEN_UNITS).zip(s) {
                    data.extend_from_slice(row);
                    data.push(sv);
                }
                Tensor::from_vec(&[n, HIDDEN_UNITS + 1], data)?
            }
            (true, None) => return Err(ModelError::SexMissing),
            (false, Some(_)) => return Err(ModelError::SexUnexpected),
        };
        Ok(self.dense2.forward(&h)?)
    }

    /// Gradient w.r.t. the fused representation.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let g = self.dense2.backward(grad_logits)?;
        let g = if self.use_sex {
            let n = g.shape()[0];
            let data = g.data().chunks_exact(HIDDEN_UNITS + 1).flat_map(|r| r[..HIDDEN_UNITS].iter().copied()).collect();
            Tensor::from_vec(&[n, HIDDEN_UNITS], data)?
        } else {
            g
        };
        let g = self.relu.backward(&g)?;
        let g = self.dense1.backward(&g)?;
        Ok(self.dropout.backward(&g))
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let [w1, b1] = self.dense1.params_mut();
        let [w2, b2] = self.dense2.params_mut();
        vec![("dense1.weight", w1), ("dense1.bias", b1), ("dense2.weight", w2), ("dense2.bias", b2)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::softmax_ce;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rep(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Tensor<f64> {
        Tensor::from_vec(&[n, len], (0..n * len).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn sex_widens_second_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(Classifier::<f64>::new(16, true, &mut rng).dense2.inputs(), 9);
        assert_eq!(Classifier::<f64>::new(16, false, &mut rng).dense2.inputs(), 8);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Classifier::new(289, true, &mut rng);
        let x = rep(&mut rng, 6, 289);
        let logits = c.forward(&x, Some(&[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]), Mode::Train, &mut rng).unwrap();
        let (_, p) = softmax_ce(&logits, &[0; 6]).unwrap();
        for row in p.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Classifier::new(16, false, &mut rng);
        let x = rep(&mut rng, 4, 16);
        let a = c.forward(&x, None, Mode::Eval, &mut rng).unwrap();
        let b = c.forward(&x, None, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sex_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rep(&mut rng, 1, 16);
        let mut with = Classifier::new(16, true, &mut rng);
        assert!(matches!(with.forward(&x, None, Mode::Eval, &mut rng), Err(ModelError::SexMissing)));
        let mut without = Classifier::new(16, false, &mut rng);
        assert!(matches!(without.forward(&x, Some(&[1.0]), Mode::Eval, &mut rng), Err(ModelError::SexUnexpected)));
    }
}
