//! 3×3, stride 1, zero-padding 1 convolution via im2col + GEMM.

use rand::Rng;

use super::{gemm, NnError, Real, Tensor, Transpose};

const K: usize = 3;

#[derive(Debug, Clone)]
pub struct Conv2d<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// When false, `backward` skips the input gradient (first layer).
    pub propagate_input_grad: bool,
    cached_input: Option<Tensor<T>>,
}

/// Unrolls one C×H×W image into a (C·9)×(H·W) patch matrix.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut col[((ch * K + ky) * K + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    x.iter_mut().for_each(|v| *v = T::zero());
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &col[((ch * K + ky) * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d = *d + *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d = *d + *s),
                    }
                }
            }
        }
    }
}

impl<T: Real> Conv2d<T> {
    /// Uniform initialization in ±1/sqrt(fan_in) for weights and biases.
    pub fn new(in_channels: usize, filters: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * K * K;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect() };
        let weight = Tensor::param(&[filters, in_channels, K, K], draw(filters * fan_in)).expect("shape");
        let bias = Tensor::param(&[filters], draw(filters)).expect("shape");
        Self { weight, bias, propagate_input_grad: true, cached_input: None }
    }

    pub fn from_params(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self, NnError> {
        weight.expect_rank(4)?;
        let f = weight.shape()[0];
        if weight.shape()[2..] != [K, K] {
            return Err(NnError::ShapeMismatch { expected: vec![f, weight.shape()[1], K, K], got: weight.shape().to_vec() });
        }
        bias.expect_shape(&[f])?;
        let mut weight = weight;
        let mut bias = bias;
        weight.requires_grad = true;
        bias.requires_grad = true;
        weight.zero_grad();
        bias.zero_grad();
        Ok(Self { weight, bias, propagate_input_grad: true, cached_input: None })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn filters(&self) -> usize {
        self.weight.shape()[0]
    }

    /// N×C×H×W → N×F×H×W.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        x.expect_rank(4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c != self.in_channels() {
            return Err(NnError::ShapeMismatch { expected: vec![n, self.in_channels(), h, w], got: x.shape().to_vec() });
        }
        let f = self.filters();
        let (hw, ck) = (h * w, c * K * K);
        let mut out = Tensor::zeros(&[n, f, h, w]);
        let mut col = vec![T::zero(); ck * hw];
        for (xi, oi) in x.data().chunks_exact(c * hw).zip(out.data_mut().chunks_exact_mut(f * hw)) {
            im2col(xi, c, h, w, &mut col);
            for (row, &b) in oi.chunks_exact_mut(hw).zip(self.bias.data()) {
                row.iter_mut().for_each(|v| *v = b);
            }
            gemm(Transpose::No, Transpose::No, f, hw, ck, T::one(), self.weight.data(), &col, T::one(), oi);
        }
        self.cached_input = Some(x.clone());
        Ok(out)
    }

    /// Accumulates weight/bias gradients; returns the input gradient unless
    /// `propagate_input_grad` is off.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Option<Tensor<T>>, NnError> {
        let x = self.cached_input.take().ok_or(NnError::NoForwardCache)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let f = self.filters();
        grad_out.expect_shape(&[n, f, h, w])?;
        let (hw, ck) = (h * w, c * K * K);
        let mut col = vec![T::zero(); ck * hw];
        let mut dcol = if self.propagate_input_grad { vec![T::zero(); ck * hw] } else { Vec::new() };
        let mut dx = if self.propagate_input_grad { Some(Tensor::zeros(x.shape())) } else { None };
        let weight = self.weight.data().to_vec();
        for (i, (xi, gi)) in x.data().chunks_exact(c * hw).zip(grad_out.data().chunks_exact(f * hw)).enumerate() {
            im2col(xi, c, h, w, &mut col);
            gemm(Transpose::No, Transpose::Yes, f, ck, hw, T::one(), gi, &col, T::one(), self.weight.grad_mut());
            let db = self.bias.grad_mut();
            for (b, row) in db.iter_mut().zip(gi.chunks_exact(hw)) {
                *b = *b + T::lit(super::sum_f64(row));
            }
            if let Some(dx) = dx.as_mut() {
                gemm(Transpose::Yes, Transpose::No, ck, hw, f, T::one(), &weight, gi, T::zero(), &mut dcol);
                col2im(&dcol, c, h, w, &mut dx.data_mut()[i * c * hw..(i + 1) * c * hw]);
            }
        }
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}
