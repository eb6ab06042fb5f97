use rand::Rng;

use super::{gemm, NnError, Real, Tensor, Transpose};

/// Fully connected layer `y = x Wᵀ + b` with W stored out×in.
#[derive(Debug, Clone)]
pub struct Dense<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    cached_input: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect() };
        let weight = Tensor::param(&[outputs, inputs], draw(outputs * inputs)).expect("shape");
        let bias = Tensor::param(&[outputs], draw(outputs)).expect("shape");
        Self { weight, bias, cached_input: None }
    }

    pub fn from_params(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self, NnError> {
        weight.expect_rank(2)?;
        bias.expect_shape(&[weight.shape()[0]])?;
        let (mut weight, mut bias) = (weight, bias);
        weight.requires_grad = true;
        bias.requires_grad = true;
        weight.zero_grad();
        bias.zero_grad();
        Ok(Self { weight, bias, cached_input: None })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        x.expect_rank(2)?;
        let n = x.shape()[0];
        let (din, dout) = (self.inputs(), self.outputs());
        if x.shape()[1] != din {
            return Err(NnError::ShapeMismatch { expected: vec![n, din], got: x.shape().to_vec() });
        }
        let mut out = Tensor::zeros(&[n, dout]);
        for row in out.data_mut().chunks_exact_mut(dout) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(Transpose::No, Transpose::Yes, n, dout, din, T::one(), x.data(), self.weight.data(), T::one(), out.data_mut());
        self.cached_input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let x = self.cached_input.take().ok_or(NnError::NoForwardCache)?;
        let n = x.shape()[0];
        let (din, dout) = (self.inputs(), self.outputs());
        grad_out.expect_shape(&[n, dout])?;
        gemm(Transpose::Yes, Transpose::No, dout, din, n, T::one(), grad_out.data(), x.data(), T::one(), self.weight.grad_mut());
        let db = self.bias.grad_mut();
        for row in grad_out.data().chunks_exact(dout) {
            for (b, g) in db.iter_mut().zip(row) {
                *b = *b + *g;
            }
        }
        let mut dx = Tensor::zeros(&[n, din]);
        gemm(Transpose::No, Transpose::No, n, din, dout, T::one(), grad_out.data(), self.weight.data(), T::zero(), dx.data_mut());
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::tests::check_layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights() {
        let mut d = Dense::from_params(
            Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(&[3]),
        )
        .unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        assert_eq!(d.forward(&x).unwrap(), x);
    }

    #[test]
    fn dot_product() {
        let mut d = Dense::from_params(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap(), Tensor::zeros(&[1])).unwrap();
        let y = d.forward(&Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = Dense::<f64>::new(4, 3, &mut rng);
        d.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let z = Tensor::from_vec(&[1, 4], vec![-3.0, 0.0, 2.0, 1.0]).unwrap();
        let m = Tensor::from_vec(&[1, 4], x.data().iter().zip(z.data()).map(|(a, b)| 2.0 * a - 0.5 * b).collect()).unwrap();
        let (fx, fz, fm) = (d.forward(&x).unwrap(), d.forward(&z).unwrap(), d.forward(&m).unwrap());
        for i in 0..3 {
            assert!((fm.data()[i] - (2.0 * fx.data()[i] - 0.5 * fz.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut d = Dense::<f64>::new(4, 2, &mut rng);
        assert!(matches!(d.forward(&Tensor::zeros(&[2, 3])), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Dense::<f64>::new(4, 2, &mut rng);
        let err = check_layer(
            d,
            &[3, 4],
            13,
            |l, x| l.forward(x).unwrap(),
            |l, g| l.backward(g).unwrap(),
            |l| l.params_mut().into_iter().collect(),
        );
        assert!(err < 1e-6, "max relative error {err}");
    }
}
