use rand::Rng;

use super::FEATURE_DIM;
use crate::nncore::{gemm, NnError, Real, Tensor, Transpose};

/// Contextual attention: `u = tanh(W f + b)`, `α = softmax(u ⊙ u_c)`,
/// output `α ⊙ f`, applied row-wise to an N×16 batch.
#[derive(Debug, Clone)]
pub struct Attention<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub context: Tensor<T>,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    f: Vec<T>,
    u: Vec<T>,
    alpha: Vec<T>,
}

impl<T: Real> Attention<T> {
    /// Entries drawn from U(±1/4), i.e. ±1/sqrt(16).
    pub fn new(rng: &mut impl Rng) -> Self {
        let d = FEATURE_DIM;
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect() };
        Self {
            weight: Tensor::param(&[d, d], draw(d * d)).expect("shape"),
            bias: Tensor::param(&[d], draw(d)).expect("shape"),
            context: Tensor::param(&[d], draw(d)).expect("shape"),
            cache: None,
        }
    }

    /// Attention weights α for the last forward batch.
    pub fn last_weights(&self) -> Option<&[T]> {
        self.cache.as_ref().map(|c| c.alpha.as_slice())
    }

    pub fn forward(&mut self, f: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let d = FEATURE_DIM;
        f.expect_rank(2)?;
        let n = f.shape()[0];
        f.expect_shape(&[n, d])?;
        let mut u = vec![T::zero(); n * d];
        for row in u.chunks_exact_mut(d) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(Transpose::No, Transpose::Yes, n, d, d, T::one(), f.data(), self.weight.data(), T::one(), &mut u);
        u.iter_mut().for_each(|v| *v = v.tanh());
        let mut alpha = vec![T::zero(); n * d];
        for (a, ur) in alpha.chunks_exact_mut(d).zip(u.chunks_exact(d)) {
            for ((ai, ui), ci) in a.iter_mut().zip(ur).zip(self.context.data()) {
                *ai = *ui * *ci;
            }
            let max = a.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in a.iter_mut() {
                *v = (*v - max).exp();
                z = z + *v;
            }
            a.iter_mut().for_each(|v| *v = *v / z);
        }
        let out = f.data().iter().zip(&alpha).map(|(x, a)| *x * *a).collect();
        self.cache = Some(Cache { f: f.data().to_vec(), u, alpha });
        Tensor::from_vec(&[n, d], out)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let d = FEATURE_DIM;
        let Cache { f, u, alpha } = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let n = f.len() / d;
        grad.expect_shape(&[n, d])?;
        let g = grad.data();
        let mut df: Vec<T> = g.iter().zip(&alpha).map(|(a, b)| *a * *b).collect();
        let mut dz = vec![T::zero(); n * d];
        let ctx = self.context.data().to_vec();
        {
            let dc = self.context.grad_mut();
            for r in 0..n {
                let (gr, fr, ar, ur) = (&g[r * d..][..d], &f[r * d..][..d], &alpha[r * d..][..d], &u[r * d..][..d]);
                let dalpha: Vec<T> = gr.iter().zip(fr).map(|(a, b)| *a * *b).collect();
                let dot = dalpha.iter().zip(ar).fold(T::zero(), |s, (x, y)| s + *x * *y);
                for i in 0..d {
                    let dl = ar[i] * (dalpha[i] - dot);
                    dc[i] = dc[i] + dl * ur[i];
                    let du = dl * ctx[i];
                    dz[r * d + i] = du * (T::one() - ur[i] * ur[i]);
                }
            }
        }
        gemm(Transpose::Yes, Transpose::No, d, d, n, T::one(), &dz, &f, T::one(), self.weight.grad_mut());
        let db = self.bias.grad_mut();
        for row in dz.chunks_exact(d) {
            for (b, v) in db.iter_mut().zip(row) {
                *b = *b + *v;
            }
        }
        gemm(Transpose::No, Transpose::No, n, d, d, T::one(), &dz, self.weight.data(), T::one(), &mut df);
        Tensor::from_vec(&[n, d], df)
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias), ("context", &mut self.context)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{gradient_check, Objective};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
        Tensor::from_vec(&[n, FEATURE_DIM], (0..n * FEATURE_DIM).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn zero_context_divides_by_sixteen() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = Attention::<f64>::new(&mut rng);
        a.context.data_mut().fill(0.0);
        let f = random(&mut rng, 3);
        let out = a.forward(&f).unwrap();
        for (o, x) in out.data().iter().zip(f.data()) {
            assert_eq!(*o, x / 16.0);
        }
    }

    #[test]
    fn zero_features_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = Attention::<f64>::new(&mut rng);
        let out = a.forward(&Tensor::zeros(&[2, FEATURE_DIM])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weights_form_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = Attention::<f64>::new(&mut rng);
        a.forward(&random(&mut rng, 5)).unwrap();
        for row in a.last_weights().unwrap().chunks(FEATURE_DIM) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    struct Obj {
        att: Attention<f64>,
        f: Tensor<f64>,
        r: Vec<f64>,
    }

    impl Objective<f64> for Obj {
        fn loss(&mut self) -> Result<f64, NnError> {
            let out = self.att.forward(&self.f)?;
            Ok(out.data().iter().zip(&self.r).map(|(a, b)| a * b).sum())
        }
        fn loss_and_grad(&mut self) -> Result<f64, NnError> {
            for (_, p) in self.att.params_mut() {
                p.zero_grad();
            }
            let l = self.loss()?;
            let g = Tensor::from_vec(self.f.shape(), self.r.clone())?;
            self.f.grad = Some(self.att.backward(&g)?.into_data());
            Ok(l)
        }
        fn num_params(&self) -> usize {
            4
        }
        fn param_name(&self, i: usize) -> String {
            ["f", "weight", "bias", "context"][i].into()
        }
        fn param_mut(&mut self, i: usize) -> &mut Tensor<f64> {
            match i {
                0 => &mut self.f,
                1 => &mut self.att.weight,
                2 => &mut self.att.bias,
                _ => &mut self.att.context,
            }
        }
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let att = Attention::new(&mut rng);
        let f = random(&mut rng, 3);
        let r = (0..3 * FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = gradient_check(&mut Obj { att, f, r }, 1e-5, 400, 3).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
