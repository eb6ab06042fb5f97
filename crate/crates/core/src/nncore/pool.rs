use super::{NnError, Real, Tensor};

/// 2×2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    /// Input shape and, per output cell, the winning offset (0..4) in its window.
    cache: Option<(Vec<usize>, Vec<u8>)>,
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        x.expect_rank(4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::OddSpatialDims(h, w));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut arg = vec![0u8; n * c * oh * ow];
        let src = x.data();
        for (p, (plane_out, plane_arg)) in out.data_mut().chunks_exact_mut(oh * ow).zip(arg.chunks_exact_mut(oh * ow)).enumerate()
        {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
                let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
                for ox in 0..ow {
                    let cands = [r0[2 * ox], r0[2 * ox + 1], r1[2 * ox], r1[2 * ox + 1]];
                    let mut best = 0u8;
                    for k in 1..4u8 {
                        if cands[k as usize] > cands[best as usize] {
                            best = k;
                        }
                    }
                    plane_out[oy * ow + ox] = cands[best as usize];
                    plane_arg[oy * ow + ox] = best;
                }
            }
        }
        self.cache = Some((x.shape().to_vec(), arg));
        Ok(out)
    }

    /// Routes each output gradient to its window's maximum (first on ties).
    pub fn backward<T: Real>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (shape, arg) = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        grad_out.expect_shape(&[n, c, oh, ow])?;
        let mut dx = Tensor::zeros(&shape);
        for (p, (g, a)) in grad_out.data().chunks_exact(oh * ow).zip(arg.chunks_exact(oh * ow)).enumerate() {
            let plane = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let k = a[oy * ow + ox] as usize;
                    plane[(2 * oy + k / 2) * w + 2 * ox + k % 2] = g[oy * ow + ox];
                }
            }
        }
        Ok(dx)
    }
}

/// Adaptive average pooling to a fixed 2×2 output.
#[derive(Debug, Clone, Default)]
pub struct AdaptiveAvgPool2d {
    input_shape: Option<Vec<usize>>,
}

pub const ADAPTIVE_OUT: usize = 2;

/// Region `[floor(i·len/out), ceil((i+1)·len/out))`.
pub(crate) fn region(i: usize, len: usize) -> (usize, usize) {
    (i * len / ADAPTIVE_OUT, ((i + 1) * len).div_ceil(ADAPTIVE_OUT))
}

impl AdaptiveAvgPool2d {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        x.expect_rank(4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if h < ADAPTIVE_OUT || w < ADAPTIVE_OUT {
            return Err(NnError::TooSmall(h, w));
        }
        let mut out = Tensor::zeros(&[n, c, ADAPTIVE_OUT, ADAPTIVE_OUT]);
        for (p, o) in out.data_mut().chunks_exact_mut(ADAPTIVE_OUT * ADAPTIVE_OUT).enumerate() {
            let plane = &x.data()[p * h * w..(p + 1) * h * w];
            for i in 0..ADAPTIVE_OUT {
                let (y0, y1) = region(i, h);
                for j in 0..ADAPTIVE_OUT {
                    let (x0, x1) = region(j, w);
                    let mut acc = 0.0f64;
                    for y in y0..y1 {
                        acc += super::sum_f64(&plane[y * w + x0..y * w + x1]);
                    }
                    o[i * ADAPTIVE_OUT + j] = T::lit(acc / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        self.input_shape = Some(x.shape().to_vec());
        Ok(out)
    }

    pub fn backward<T: Real>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let shape = self.input_shape.take().ok_or(NnError::NoForwardCache)?;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        grad_out.expect_shape(&[n, c, ADAPTIVE_OUT, ADAPTIVE_OUT])?;
        let mut dx = Tensor::zeros(&shape);
        for (p, g) in grad_out.data().chunks_exact(ADAPTIVE_OUT * ADAPTIVE_OUT).enumerate() {
            let plane = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
            for i in 0..ADAPTIVE_OUT {
                let (y0, y1) = region(i, h);
                for j in 0..ADAPTIVE_OUT {
                    let (x0, x1) = region(j, w);
                    let share = g[i * ADAPTIVE_OUT + j] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                    // regions overlap when the size is odd
                    for y in y0..y1 {
                        for v in &mut plane[y * w + x0..y * w + x1] {
                            *v = *v + share;
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::tests::{check_layer, check_layer_on};

    #[test]
    fn max_of_window() {
        let mut p = MaxPool2d::new();
        let y = p.forward(&Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = p.backward(&Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_go_to_top_left() {
        let mut p = MaxPool2d::new();
        let y = p.forward(&Tensor::from_vec(&[1, 1, 4, 4], vec![7.0f64; 16]).unwrap()).unwrap();
        assert_eq!(y.data(), &[7.0; 4]);
        let g = p.backward(&Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let want = [1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(g.data(), &want);
    }

    #[test]
    fn odd_dims_rejected() {
        assert_eq!(MaxPool2d::new().forward(&Tensor::<f64>::zeros(&[1, 1, 3, 4])).unwrap_err(), NnError::OddSpatialDims(3, 4));
    }

    #[test]
    fn max_gradient_check() {
        use rand::{seq::SliceRandom, SeedableRng};
        // distinct values 0.1 apart: no window has a near-tie
        let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.1 - 1.6).collect();
        vals.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(11));
        let x = Tensor::from_vec(&[1, 2, 4, 4], vals).unwrap();
        let err =
            check_layer_on(MaxPool2d::new(), x, 11, |l, x| l.forward(x).unwrap(), |l, g| l.backward(g).unwrap(), |_| Vec::new());
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn quadrant_means() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let mut x = vec![0.0; 16];
        for y in 0..4 {
            for xx in 0..4 {
                x[y * 4 + xx] = match (y < 2, xx < 2) {
                    (true, true) => a,
                    (true, false) => b,
                    (false, true) => c,
                    (false, false) => d,
                };
            }
        }
        let y = AdaptiveAvgPool2d::new().forward(&Tensor::from_vec(&[1, 1, 4, 4], x).unwrap()).unwrap();
        assert_eq!(y.data(), &[a, b, c, d]);
    }

    #[test]
    fn two_by_two_is_identity() {
        let x = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0, -2.0, 3.5, 0.25, 9.0, 8.0, 7.0, 6.0]).unwrap();
        assert_eq!(AdaptiveAvgPool2d::new().forward(&x).unwrap(), x);
    }

    #[test]
    fn uneven_regions_overlap() {
        // 5 wide: regions [0,3) and [2,5)
        assert_eq!(region(0, 5), (0, 3));
        assert_eq!(region(1, 5), (2, 5));
        assert_eq!(AdaptiveAvgPool2d::new().forward(&Tensor::<f64>::zeros(&[1, 1, 1, 4])).unwrap_err(), NnError::TooSmall(1, 4));
    }

    #[test]
    fn avg_gradient_check() {
        let err = check_layer(
            AdaptiveAvgPool2d::new(),
            &[2, 2, 5, 5],
            12,
            |l, x| l.forward(x).unwrap(),
            |l, g| l.backward(g).unwrap(),
            |_| Vec::new(),
        );
        assert!(err < 1e-6, "max relative error {err}");
    }
}
