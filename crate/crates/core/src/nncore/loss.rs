use super::{NnError, Real, Tensor};

/// Row-wise softmax and mean cross-entropy against class indices.
pub fn softmax_ce<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>), NnError> {
    logits.expect_rank(2)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n {
        return Err(NnError::ShapeMismatch { expected: vec![n], got: vec![targets.len()] });
    }
    let mut probs = Tensor::zeros(&[n, k]);
    let mut total = 0.0f64;
    for ((row, out), &t) in logits.data().chunks_exact(k).zip(probs.data_mut().chunks_exact_mut(k)).zip(targets) {
        if t >= k {
            return Err(NnError::BadTarget { target: t, classes: k });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            z = z + *o;
        }
        out.iter_mut().for_each(|o| *o = *o / z);
        // log p_t = (x_t - max) - log z, stable even when p_t underflows
        total -= (row[t] - max).f64() - z.f64().ln();
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    Ok((T::lit(loss), probs))
}

/// Gradient of the mean cross-entropy w.r.t. the logits: (p - onehot) / N.
pub fn softmax_ce_backward<T: Real>(probs: &Tensor<T>, targets: &[usize]) -> Tensor<T> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let inv = T::lit(1.0 / n as f64);
    let mut g = probs.clone();
    for (row, &t) in g.data_mut().chunks_exact_mut(k).zip(targets) {
        row[t] = row[t] - T::one();
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::{gradient_check, Objective};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_logits() {
        let (loss, p) = softmax_ce(&Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap(), &[0]).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn large_logits_are_stable() {
        let (loss, p) = softmax_ce(&Tensor::from_vec(&[1, 2], vec![1000.0f32, 0.0]).unwrap(), &[1]).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
        assert!((loss - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn bad_target() {
        let r = softmax_ce(&Tensor::<f64>::zeros(&[1, 2]), &[2]);
        assert_eq!(r.unwrap_err(), NnError::BadTarget { target: 2, classes: 2 });
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits: Vec<f64> = (0..200).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let (_, p) = softmax_ce(&Tensor::from_vec(&[100, 2], logits).unwrap(), &[0; 100]).unwrap();
        for row in p.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    struct Logits {
        logits: Tensor<f64>,
        targets: Vec<usize>,
    }

    impl Objective<f64> for Logits {
        fn loss(&mut self) -> Result<f64, NnError> {
            Ok(softmax_ce(&self.logits, &self.targets)?.0)
        }
        fn loss_and_grad(&mut self) -> Result<f64, NnError> {
            let (l, p) = softmax_ce(&self.logits, &self.targets)?;
            self.logits.grad = Some(softmax_ce_backward(&p, &self.targets).into_data());
            Ok(l)
        }
        fn num_params(&self) -> usize {
            1
        }
        fn param_name(&self, _: usize) -> String {
            "logits".into()
        }
        fn param_mut(&mut self, _: usize) -> &mut Tensor<f64> {
            &mut self.logits
        }
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::from_vec(&[5, 2], (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let mut obj = Logits { logits, targets: vec![0, 1, 1, 0, 1] };
        let report = gradient_check(&mut obj, 1e-5, 200, 0).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
