use super::{NnError, Real, Tensor};

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<(Vec<usize>, Vec<bool>)>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mask: Vec<bool> = x.data().iter().map(|v| *v > T::zero()).collect();
        let data = x.data().iter().zip(&mask).map(|(v, &m)| if m { *v } else { T::zero() }).collect();
        self.mask = Some((x.shape().to_vec(), mask));
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }

    /// Passes gradient where the input was strictly positive.
    pub fn backward<T: Real>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (shape, mask) = self.mask.take().ok_or(NnError::NoForwardCache)?;
        grad_out.expect_shape(&shape)?;
        let data = grad_out.data().iter().zip(&mask).map(|(g, &m)| if m { *g } else { T::zero() }).collect();
        Tensor::from_vec(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::tests::check_layer;

    #[test]
    fn definition() {
        let mut r = Relu::new();
        let y = r.forward(&Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = r.backward(&Tensor::from_vec(&[3], vec![5.0, 5.0, 5.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn identity_on_non_negative() {
        let x = Tensor::from_vec(&[4], vec![0.0, 0.5, 3.0, 1e-9]).unwrap();
        assert_eq!(Relu::new().forward(&x), x);
    }

    #[test]
    fn gradient_check_away_from_zero() {
        // check_layer draws inputs from (-2, 3); push them away from the kink
        let err = check_layer(
            Relu::new(),
            &[2, 3, 4],
            9,
            |l, x| {
                let shifted: Vec<f64> = x.data().iter().map(|v| if v.abs() < 0.1 { v + 0.5 } else { *v }).collect();
                l.forward(&Tensor::from_vec(x.shape(), shifted).unwrap())
            },
            |l, g| l.backward(g).unwrap(),
            |_| Vec::new(),
        );
        assert!(err < 1e-10, "max relative error {err}");
    }
}
