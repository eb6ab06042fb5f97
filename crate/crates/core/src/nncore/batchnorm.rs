use super::{Mode, NnError, Real, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch normalization over N, H and W with affine γ, β.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    mode: Mode,
    shape: Vec<usize>,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::param(&[channels], vec![T::one(); channels]).expect("shape"),
            beta: Tensor::param(&[channels], vec![T::zero(); channels]).expect("shape"),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![T::one(); channels]).expect("shape"),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        x.expect_rank(4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c != self.channels() {
            return Err(NnError::ShapeMismatch { expected: vec![n, self.channels(), h, w], got: x.shape().to_vec() });
        }
        let hw = h * w;
        let m = n * hw;
        if mode == Mode::Train && m < 2 {
            return Err(NnError::DegenerateBatch);
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let sum: f64 = (0..n).map(|i| super::sum_f64(&x.data()[(i * c + ch) * hw..][..hw])).sum();
                    let mu = sum / m as f64;
                    let sq: f64 = (0..n)
                        .map(|i| {
                            x.data()[(i * c + ch) * hw..][..hw]
                                .iter()
                                .map(|v| {
                                    let d = v.f64() - mu;
                                    d * d
                                })
                                .sum::<f64>()
                        })
                        .sum();
                    mean[ch] = mu;
                    var[ch] = sq / m as f64;
                }
                let unbias = m as f64 / (m as f64 - 1.0);
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = T::lit((1.0 - BN_MOMENTUM) * rm.f64() + BN_MOMENTUM * mean[ch]);
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = T::lit((1.0 - BN_MOMENTUM) * rv.f64() + BN_MOMENTUM * var[ch] * unbias);
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().iter().map(|v| v.f64()).collect(),
                self.running_var.data().iter().map(|v| v.f64()).collect(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::lit(1.0 / (v + BN_EPS).sqrt())).collect();
        let mut x_hat = vec![T::zero(); x.len()];
        let mut out = Tensor::zeros(x.shape());
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let (mu, is) = (T::lit(mean[ch]), inv_std[ch]);
                let (g, b) = (self.gamma.data()[ch], self.beta.data()[ch]);
                let src = &x.data()[off..off + hw];
                let xh = &mut x_hat[off..off + hw];
                let dst = &mut out.data_mut()[off..off + hw];
                for ((s, xh), d) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
                    *xh = (*s - mu) * is;
                    *d = g * *xh + b;
                }
            }
        }
        self.cache = Some(Cache { mode, shape: x.shape().to_vec(), x_hat, inv_std });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let cache = self.cache.take().ok_or(NnError::NoForwardCache)?;
        grad_out.expect_shape(&cache.shape)?;
        let (n, c, h, w) = (cache.shape[0], cache.shape[1], cache.shape[2], cache.shape[3]);
        let hw = h * w;
        let m = (n * hw) as f64;
        let g = grad_out.data();
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let (gs, xs) = (&g[off..off + hw], &cache.x_hat[off..off + hw]);
                dbeta[ch] += super::sum_f64(gs);
                dgamma[ch] += gs.iter().zip(xs).map(|(a, b)| a.f64() * b.f64()).sum::<f64>();
            }
        }
        for ch in 0..c {
            let gg = &mut self.gamma.grad_mut()[ch];
            *gg = *gg + T::lit(dgamma[ch]);
            let bg = &mut self.beta.grad_mut()[ch];
            *bg = *bg + T::lit(dbeta[ch]);
        }
        let mut dx = Tensor::zeros(&cache.shape);
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let scale = self.gamma.data()[ch] * cache.inv_std[ch];
                let gs = &g[off..off + hw];
                let dst = &mut dx.data_mut()[off..off + hw];
                match cache.mode {
                    Mode::Eval => {
                        for (d, gv) in dst.iter_mut().zip(gs) {
                            *d = *gv * scale;
                        }
                    }
                    Mode::Train => {
                        let xs = &cache.x_hat[off..off + hw];
                        let mb = T::lit(dbeta[ch] / m);
                        let mg = T::lit(dgamma[ch] / m);
                        for ((d, gv), xh) in dst.iter_mut().zip(gs).zip(xs) {
                            *d = scale * (*gv - mb - *xh * mg);
                        }
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}
