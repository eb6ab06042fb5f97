//! Per-sound-type CNN: conv(3→16) → BN → ReLU → maxpool → conv(16→4) → BN
//! → ReLU → adaptive average pool to 2×2, flattened to 16 features.
//!
//! Batch norm, ReLU and pooling are fused into single passes over each
//! conv output plane, and all large buffers live in a workspace reused
//! across batches. The layer-by-layer composition in `nncore` serves as the
//! reference implementation in the tests.

use std::fmt;

use rand::Rng;

use super::FEATURE_DIM;
use crate::nncore::{
    dot_f64, gemm, im2col, moments_f64, region, sum_f64, Mode, NnError, Real, Tensor, Transpose, ADAPTIVE_OUT, BN_EPS,
    BN_MOMENTUM,
};

pub const IN_CHANNELS: usize = 3;
pub const CONV1_FILTERS: usize = 16;
pub const CONV2_FILTERS: usize = 4;
const TAPS: usize = 9;

/// Affine batch-norm parameters and running statistics of one block.
#[derive(Debug, Clone)]
pub struct Norm<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Real> Norm<T> {
    fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::param(&[channels], vec![T::one(); channels]).expect("shape"),
            beta: Tensor::param(&[channels], vec![T::zero(); channels]).expect("shape"),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![T::one(); channels]).expect("shape"),
        }
    }

    /// Batch (train) or running (eval) mean and inverse standard deviation.
    fn statistics(&mut self, sum: &[f64], sq: &[f64], m: usize, mode: Mode) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(NnError::DegenerateBatch);
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
                let var: Vec<f64> = sq.iter().zip(&mean).map(|(q, mu)| (q / m as f64 - mu * mu).max(0.0)).collect();
                let unbias = m as f64 / (m as f64 - 1.0);
                for (c, (mu, v)) in mean.iter().zip(&var).enumerate() {
                    let rm = &mut self.running_mean.data_mut()[c];
                    *rm = T::lit((1.0 - BN_MOMENTUM) * rm.f64() + BN_MOMENTUM * mu);
                    let rv = &mut self.running_var.data_mut()[c];
                    *rv = T::lit((1.0 - BN_MOMENTUM) * rv.f64() + BN_MOMENTUM * v * unbias);
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().iter().map(|v| v.f64()).collect(),
                self.running_var.data().iter().map(|v| v.f64()).collect(),
            ),
        };
        Ok((mean, var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect()))
    }

    /// Folds normalization and the affine map into `y = a·scale + shift`.
    fn fold(&self, mean: &[f64], inv_std: &[f64]) -> (Vec<T>, Vec<T>) {
        let mut scale = Vec::with_capacity(mean.len());
        let mut shift = Vec::with_capacity(mean.len());
        for c in 0..mean.len() {
            let s = self.gamma.data()[c].f64() * inv_std[c];
            scale.push(T::lit(s));
            shift.push(T::lit(self.beta.data()[c].f64() - mean[c] * s));
        }
        (scale, shift)
    }
}

#[derive(Clone, Default)]
struct Workspace<T> {
    input: Vec<T>,
    a1: Vec<T>,
    p1: Vec<T>,
    arg1: Vec<u8>,
    a2: Vec<T>,
    g1: Vec<T>,
    g2: Vec<T>,
    col: Vec<T>,
    plane: Vec<T>,
    win: Vec<T>,
}

#[derive(Debug, Clone)]
struct Cache {
    mode: Mode,
    n: usize,
    h: usize,
    w: usize,
    mean1: Vec<f64>,
    inv1: Vec<f64>,
    mean2: Vec<f64>,
    inv2: Vec<f64>,
}

pub struct Extractor<T: Real> {
    pub conv1_weight: Tensor<T>,
    pub conv1_bias: Tensor<T>,
    pub bn1: Norm<T>,
    pub conv2_weight: Tensor<T>,
    pub conv2_bias: Tensor<T>,
    pub bn2: Norm<T>,
    ws: Workspace<T>,
    cache: Option<Cache>,
}

/// Clones parameters only; scratch buffers and the forward cache are not copied.
impl<T: Real> Clone for Extractor<T> {
    fn clone(&self) -> Self {
        Self {
            conv1_weight: self.conv1_weight.clone(),
            conv1_bias: self.conv1_bias.clone(),
            bn1: self.bn1.clone(),
            conv2_weight: self.conv2_weight.clone(),
            conv2_bias: self.conv2_bias.clone(),
            bn2: self.bn2.clone(),
            ws: Workspace::default(),
            cache: None,
        }
    }
}

impl<T: Real> fmt::Debug for Extractor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Extractor")
            .field("conv1_weight", &self.conv1_weight.shape())
            .field("conv2_weight", &self.conv2_weight.shape())
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

fn uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()).expect("shape")
}

/// One image through a 3×3 same-padding convolution.
#[allow(clippy::too_many_arguments)]
fn conv_sample<T: Real>(x: &[T], c: usize, h: usize, w: usize, weight: &[T], bias: &[T], col: &mut Vec<T>, out: &mut [T]) {
    let hw = h * w;
    col.resize(c * TAPS * hw, T::zero());
    im2col(x, c, h, w, col);
    for (row, &b) in out.chunks_exact_mut(hw).zip(bias) {
        row.fill(b);
    }
    gemm(Transpose::No, Transpose::No, bias.len(), hw, c * TAPS, T::one(), weight, col, T::one(), out);
}

#[inline(always)]
fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + a * *s;
    }
}

#[inline(always)]
fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (*x * *y).f64()).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] = lanes[k] + x[k] * y[k];
        }
    }
    tail + lanes.iter().map(|v| v.f64()).sum::<f64>()
}

/// Tap (ky, kx) of a 3×3 same-padding kernel over a flattened h×w plane:
/// output positions `span` read input positions `span + offset`, except the
/// positions in `wrapped`, whose source lies in the neighbouring row.
struct Tap {
    span: std::ops::Range<usize>,
    src: usize,
    wrapped: Vec<usize>,
}

impl Tap {
    fn new(ky: usize, kx: usize, h: usize, w: usize) -> Self {
        let hw = h * w;
        let mut lo = if ky == 0 { w } else { 0 };
        let mut hi = if ky == 2 { hw - w } else { hw };
        match kx {
            0 => lo += 1,
            2 => hi -= 1,
            _ => {}
        }
        let offset = (ky * w + kx) as isize - (w + 1) as isize;
        let wrapped = match kx {
            0 => (lo.div_ceil(w)..h).map(|y| y * w).filter(|p| *p < hi).collect(),
            2 => (0..h).map(|y| y * w + w - 1).filter(|p| (lo..hi).contains(p)).collect(),
            _ => Vec::new(),
        };
        Self { src: (lo as isize + offset) as usize, span: lo..hi, wrapped }
    }

    fn offset(&self) -> usize {
        self.src.wrapping_sub(self.span.start)
    }

    fn all(h: usize, w: usize) -> Vec<Tap> {
        (0..TAPS).map(|t| Tap::new(t / 3, t % 3, h, w)).collect()
    }
}

/// `dst[span] += a·src[span + offset]`, leaving wrapped positions untouched.
#[inline(always)]
fn tap_axpy<T: Real>(tap: &Tap, dst: &mut [T], src: &[T], a: T, saved: &mut Vec<T>) {
    saved.clear();
    saved.extend(tap.wrapped.iter().map(|&p| dst[p]));
    let len = tap.span.len();
    axpy(&mut dst[tap.span.clone()], &src[tap.src..][..len], a);
    for (&p, &v) in tap.wrapped.iter().zip(saved.iter()) {
        dst[p] = v;
    }
}

/// Adjoint of [`tap_axpy`] with respect to `src`.
#[inline(always)]
fn tap_axpy_adjoint<T: Real>(tap: &Tap, dst: &mut [T], src: &[T], a: T, saved: &mut Vec<T>) {
    let off = tap.offset();
    saved.clear();
    saved.extend(tap.wrapped.iter().map(|&p| dst[p.wrapping_add(off)]));
    let len = tap.span.len();
    axpy(&mut dst[tap.src..][..len], &src[tap.span.clone()], a);
    for (&p, &v) in tap.wrapped.iter().zip(saved.iter()) {
        dst[p.wrapping_add(off)] = v;
    }
}

/// `Σ g[p]·x[p + offset]` over the valid positions of the tap.
#[inline(always)]
fn tap_dot<T: Real>(tap: &Tap, g: &[T], x: &[T]) -> f64 {
    let off = tap.offset();
    let full = dot(&g[tap.span.clone()], &x[tap.src..][..tap.span.len()]);
    full - tap.wrapped.iter().map(|&p| (g[p] * x[p.wrapping_add(off)]).f64()).sum::<f64>()
}

/// Direct 3×3 same-padding convolution of one image, for layers with few
/// output channels.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn conv_direct<T: Real>(x: &[T], c: usize, h: usize, w: usize, weight: &[T], bias: &[T], taps: &[Tap], out: &mut [T]) {
    let hw = h * w;
    let mut saved = Vec::with_capacity(h);
    for (f, (plane, &b)) in out.chunks_exact_mut(hw).zip(bias).enumerate() {
        plane.fill(b);
        for ch in 0..c {
            let src = &x[ch * hw..][..hw];
            for (tap, &k) in taps.iter().zip(&weight[(f * c + ch) * TAPS..][..TAPS]) {
                tap_axpy(tap, plane, src, k, &mut saved);
            }
        }
    }
}

/// Gradients of [`conv_direct`]: accumulates weight and bias gradients and
/// overwrites `grad_x` with the input gradient.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn conv_direct_backward<T: Real>(
    x: &[T],
    c: usize,
    hw: usize,
    weight: &[T],
    taps: &[Tap],
    grad_out: &[T],
    dw: &mut [f64],
    db: &mut [f64],
    grad_x: &mut [T],
) {
    let mut saved = Vec::new();
    grad_x.fill(T::zero());
    for (f, g) in grad_out.chunks_exact(hw).enumerate() {
        db[f] += sum_f64(g);
        for ch in 0..c {
            let src = &x[ch * hw..][..hw];
            let gx = &mut grad_x[ch * hw..][..hw];
            for (t, tap) in taps.iter().enumerate() {
                let i = (f * c + ch) * TAPS + t;
                dw[i] += tap_dot(tap, g, src);
                tap_axpy_adjoint(tap, gx, g, weight[i], &mut saved);
            }
        }
    }
}

#[inline(always)]
fn accumulate_stats<T: Real>(out: &[T], hw: usize, sum: &mut [f64], sq: &mut [f64]) {
    for (c, row) in out.chunks_exact(hw).enumerate() {
        let (s, q) = moments_f64(row);
        sum[c] += s;
        sq[c] += q;
    }
}

/// Visits each pooled cell of one plane with the flat index of its winner.
#[inline(always)]
fn for_each_winner(arg: &[u8], w: usize, mut f: impl FnMut(usize, usize)) {
    let pw = w / 2;
    for (oy, row) in arg.chunks_exact(pw).enumerate() {
        let base = 2 * oy * w;
        for (ox, &k) in row.iter().enumerate() {
            f(oy * pw + ox, base + (k as usize / 2) * w + 2 * ox + k as usize % 2);
        }
    }
}

/// `relu(a·scale + shift)` followed by 2×2 max pooling; records the window
/// offset of each maximum (first on ties).
#[inline(always)]
fn bn_relu_maxpool<T: Real>(a: &[T], h: usize, w: usize, scale: T, shift: T, out: &mut [T], arg: &mut [u8]) {
    let pw = w / 2;
    for (oy, (o, g)) in out.chunks_exact_mut(pw).zip(arg.chunks_exact_mut(pw)).enumerate().take(h / 2) {
        let r0 = &a[2 * oy * w..][..w];
        let r1 = &a[(2 * oy + 1) * w..][..w];
        for (((o, g), p0), p1) in o.iter_mut().zip(g.iter_mut()).zip(r0.chunks_exact(2)).zip(r1.chunks_exact(2)) {
            let c = [p0[0] * scale + shift, p0[1] * scale + shift, p1[0] * scale + shift, p1[1] * scale + shift];
            let (mut best, mut k) = (c[0], 0u8);
            if c[1] > best {
                best = c[1];
                k = 1;
            }
            if c[2] > best {
                best = c[2];
                k = 2;
            }
            if c[3] > best {
                best = c[3];
                k = 3;
            }
            *o = best.max(T::zero());
            *g = k;
        }
    }
}

/// `relu(a·scale + shift)` averaged over the four adaptive regions.
#[inline(always)]
fn bn_relu_avgpool<T: Real>(a: &[T], h: usize, w: usize, scale: T, shift: T, out: &mut [T]) {
    for i in 0..ADAPTIVE_OUT {
        let (y0, y1) = region(i, h);
        for j in 0..ADAPTIVE_OUT {
            let (x0, x1) = region(j, w);
            let mut acc = 0.0f64;
            for y in y0..y1 {
                for v in &a[y * w + x0..y * w + x1] {
                    acc += (*v * scale + shift).max(T::zero()).f64();
                }
            }
            out[i * ADAPTIVE_OUT + j] = T::lit(acc / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
}

fn add_grad<T: Real>(t: &mut Tensor<T>, values: &[f64]) {
    for (g, v) in t.grad_mut().iter_mut().zip(values) {
        *g = *g + T::lit(*v);
    }
}

impl<T: Real> Extractor<T> {
    /// Conv weights and biases from U(±1/sqrt(fan_in)); BN γ = 1, β = 0.
    pub fn new(rng: &mut impl Rng) -> Self {
        let fan1 = IN_CHANNELS * TAPS;
        let conv1_weight = uniform(&[CONV1_FILTERS, IN_CHANNELS, 3, 3], fan1, rng);
        let conv1_bias = uniform(&[CONV1_FILTERS], fan1, rng);
        let fan2 = CONV1_FILTERS * TAPS;
        let conv2_weight = uniform(&[CONV2_FILTERS, CONV1_FILTERS, 3, 3], fan2, rng);
        let conv2_bias = uniform(&[CONV2_FILTERS], fan2, rng);
        Self {
            conv1_weight,
            conv1_bias,
            bn1: Norm::new(CONV1_FILTERS),
            conv2_weight,
            conv2_bias,
            bn2: Norm::new(CONV2_FILTERS),
            ws: Workspace::default(),
            cache: None,
        }
    }

    fn check_input(x: &Tensor<T>) -> Result<(usize, usize, usize), NnError> {
        x.expect_rank(4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c != IN_CHANNELS {
            return Err(NnError::ShapeMismatch { expected: vec![n, IN_CHANNELS, h, w], got: x.shape().to_vec() });
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::OddSpatialDims(h, w));
        }
        if h / 2 < ADAPTIVE_OUT || w / 2 < ADAPTIVE_OUT {
            return Err(NnError::TooSmall(h / 2, w / 2));
        }
        Ok((n, h, w))
    }

    /// N×3×H×W → N×16, keeping what `backward` needs.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe { self.forward_avx2(x, mode) };
        }
        self.forward_impl(x, mode)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn forward_avx2(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        self.forward_impl(x, mode)
    }

    #[inline(always)]
    fn forward_impl(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let (n, h, w) = Self::check_input(x)?;
        self.cache = None;
        let (hw, ph, pw) = (h * w, h / 2, w / 2);
        let phw = ph * pw;
        let ws = &mut self.ws;
        ws.input.clear();
        ws.input.extend_from_slice(x.data());

        ws.a1.resize(n * CONV1_FILTERS * hw, T::zero());
        let (mut sum, mut sq) = (vec![0.0; CONV1_FILTERS], vec![0.0; CONV1_FILTERS]);
        for (xi, a1) in x.data().chunks_exact(IN_CHANNELS * hw).zip(ws.a1.chunks_exact_mut(CONV1_FILTERS * hw)) {
            conv_sample(xi, IN_CHANNELS, h, w, self.conv1_weight.data(), self.conv1_bias.data(), &mut ws.col, a1);
            if mode == Mode::Train {
                accumulate_stats(a1, hw, &mut sum, &mut sq);
            }
        }
        let (mean1, inv1) = self.bn1.statistics(&sum, &sq, n * hw, mode)?;
        let (s1, t1) = self.bn1.fold(&mean1, &inv1);

        ws.p1.resize(n * CONV1_FILTERS * phw, T::zero());
        ws.arg1.resize(n * CONV1_FILTERS * phw, 0);
        for (p, ((a, o), g)) in
            ws.a1.chunks_exact(hw).zip(ws.p1.chunks_exact_mut(phw)).zip(ws.arg1.chunks_exact_mut(phw)).enumerate()
        {
            let c = p % CONV1_FILTERS;
            bn_relu_maxpool(a, h, w, s1[c], t1[c], o, g);
        }

        ws.a2.resize(n * CONV2_FILTERS * phw, T::zero());
        let taps = Tap::all(ph, pw);
        let (mut sum, mut sq) = (vec![0.0; CONV2_FILTERS], vec![0.0; CONV2_FILTERS]);
        for (pi, a2) in ws.p1.chunks_exact(CONV1_FILTERS * phw).zip(ws.a2.chunks_exact_mut(CONV2_FILTERS * phw)) {
            conv_direct(pi, CONV1_FILTERS, ph, pw, self.conv2_weight.data(), self.conv2_bias.data(), &taps, a2);
            if mode == Mode::Train {
                accumulate_stats(a2, phw, &mut sum, &mut sq);
            }
        }
        let (mean2, inv2) = self.bn2.statistics(&sum, &sq, n * phw, mode)?;
        let (s2, t2) = self.bn2.fold(&mean2, &inv2);

        let mut out = Tensor::zeros(&[n, FEATURE_DIM]);
        for (p, (a, o)) in ws.a2.chunks_exact(phw).zip(out.data_mut().chunks_exact_mut(ADAPTIVE_OUT * ADAPTIVE_OUT)).enumerate() {
            let c = p % CONV2_FILTERS;
            bn_relu_avgpool(a, ph, pw, s2[c], t2[c], o);
        }
        self.cache = Some(Cache { mode, n, h, w, mean1, inv1, mean2, inv2 });
        Ok(out)
    }

    /// Evaluation-mode features computed one sample at a time, without
    /// keeping anything for a backward pass.
    pub fn infer(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe { self.infer_avx2(x) };
        }
        self.infer_impl(x)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn infer_avx2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.infer_impl(x)
    }

    #[inline(always)]
    fn infer_impl(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (n, h, w) = Self::check_input(x)?;
        self.cache = None;
        let (hw, ph, pw) = (h * w, h / 2, w / 2);
        let phw = ph * pw;
        let none = [0.0; CONV1_FILTERS];
        let (mean1, inv1) = self.bn1.statistics(&none, &none, 0, Mode::Eval)?;
        let (s1, t1) = self.bn1.fold(&mean1, &inv1);
        let (mean2, inv2) = self.bn2.statistics(&none[..CONV2_FILTERS], &none[..CONV2_FILTERS], 0, Mode::Eval)?;
        let (s2, t2) = self.bn2.fold(&mean2, &inv2);
        let ws = &mut self.ws;
        ws.a1.resize(CONV1_FILTERS * hw, T::zero());
        ws.p1.resize(CONV1_FILTERS * phw, T::zero());
        ws.arg1.resize(CONV1_FILTERS * phw, 0);
        ws.a2.resize(CONV2_FILTERS * phw, T::zero());
        let taps = Tap::all(ph, pw);
        let mut out = Tensor::zeros(&[n, FEATURE_DIM]);
        for (xi, oi) in x.data().chunks_exact(IN_CHANNELS * hw).zip(out.data_mut().chunks_exact_mut(FEATURE_DIM)) {
            let a1 = &mut ws.a1[..CONV1_FILTERS * hw];
            conv_sample(xi, IN_CHANNELS, h, w, self.conv1_weight.data(), self.conv1_bias.data(), &mut ws.col, a1);
            let (p1, arg1) = (&mut ws.p1[..CONV1_FILTERS * phw], &mut ws.arg1[..CONV1_FILTERS * phw]);
            for (c, ((a, o), g)) in a1.chunks_exact(hw).zip(p1.chunks_exact_mut(phw)).zip(arg1.chunks_exact_mut(phw)).enumerate()
            {
                bn_relu_maxpool(a, h, w, s1[c], t1[c], o, g);
            }
            let a2 = &mut ws.a2[..CONV2_FILTERS * phw];
            conv_direct(p1, CONV1_FILTERS, ph, pw, self.conv2_weight.data(), self.conv2_bias.data(), &taps, a2);
            for (c, (a, o)) in a2.chunks_exact(phw).zip(oi.chunks_exact_mut(ADAPTIVE_OUT * ADAPTIVE_OUT)).enumerate() {
                bn_relu_avgpool(a, ph, pw, s2[c], t2[c], o);
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients from the N×16 feature gradient.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<(), NnError> {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe { self.backward_avx2(grad) };
        }
        self.backward_impl(grad)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn backward_avx2(&mut self, grad: &Tensor<T>) -> Result<(), NnError> {
        self.backward_impl(grad)
    }

    #[inline(always)]
    fn backward_impl(&mut self, grad: &Tensor<T>) -> Result<(), NnError> {
        let cache = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let Cache { mode, n, h, w, mean1, inv1, mean2, inv2 } = cache;
        grad.expect_shape(&[n, FEATURE_DIM])?;
        let (hw, ph, pw) = (h * w, h / 2, w / 2);
        let phw = ph * pw;
        let (s1, _) = self.bn1.fold(&mean1, &inv1);
        let (s2, t2) = self.bn2.fold(&mean2, &inv2);
        let ws = &mut self.ws;

        // Adaptive pool, ReLU and batch norm of the second block.
        ws.g2.resize(n * CONV2_FILTERS * phw, T::zero());
        let (mut dgamma, mut dbeta) = (vec![0.0f64; CONV2_FILTERS], vec![0.0f64; CONV2_FILTERS]);
        for (p, (a, g)) in ws.a2.chunks_exact(phw).zip(ws.g2.chunks_exact_mut(phw)).enumerate() {
            let c = p % CONV2_FILTERS;
            let gf = &grad.data()[p * ADAPTIVE_OUT * ADAPTIVE_OUT..][..ADAPTIVE_OUT * ADAPTIVE_OUT];
            g.fill(T::zero());
            for i in 0..ADAPTIVE_OUT {
                let (y0, y1) = region(i, ph);
                for j in 0..ADAPTIVE_OUT {
                    let (x0, x1) = region(j, pw);
                    let share = gf[i * ADAPTIVE_OUT + j] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                    for y in y0..y1 {
                        for v in &mut g[y * pw + x0..y * pw + x1] {
                            *v = *v + share;
                        }
                    }
                }
            }
            for (gv, av) in g.iter_mut().zip(a) {
                if *av * s2[c] + t2[c] <= T::zero() {
                    *gv = T::zero();
                }
            }
            let sg = sum_f64(g);
            dgamma[c] += (dot_f64(g, a) - mean2[c] * sg) * inv2[c];
            dbeta[c] += sg;
        }
        add_grad(&mut self.bn2.gamma, &dgamma);
        add_grad(&mut self.bn2.beta, &dbeta);
        let m2 = (n * phw) as f64;
        for (p, (a, g)) in ws.a2.chunks_exact(phw).zip(ws.g2.chunks_exact_mut(phw)).enumerate() {
            let c = p % CONV2_FILTERS;
            let (k0, k1) = input_grad_coefficients(mode, s2[c].f64(), mean2[c], inv2[c], dbeta[c] / m2, dgamma[c] / m2);
            let (s, k0, k1) = (s2[c], T::lit(k0), T::lit(k1));
            for (gv, av) in g.iter_mut().zip(a) {
                *gv = s * *gv + k0 + k1 * *av;
            }
        }

        // Second convolution.
        ws.g1.resize(n * CONV1_FILTERS * phw, T::zero());
        let taps = Tap::all(ph, pw);
        let mut dw = vec![0.0f64; CONV2_FILTERS * CONV1_FILTERS * TAPS];
        let mut db = vec![0.0f64; CONV2_FILTERS];
        for ((pi, gi), g1) in ws
            .p1
            .chunks_exact(CONV1_FILTERS * phw)
            .zip(ws.g2.chunks_exact(CONV2_FILTERS * phw))
            .zip(ws.g1.chunks_exact_mut(CONV1_FILTERS * phw))
        {
            conv_direct_backward(pi, CONV1_FILTERS, phw, self.conv2_weight.data(), &taps, gi, &mut dw, &mut db, g1);
            for (gv, pv) in g1.iter_mut().zip(pi) {
                if *pv <= T::zero() {
                    *gv = T::zero();
                }
            }
        }
        add_grad(&mut self.conv2_weight, &dw);
        add_grad(&mut self.conv2_bias, &db);

        // Max pool, ReLU and batch norm of the first block.
        let (mut dgamma, mut dbeta) = (vec![0.0f64; CONV1_FILTERS], vec![0.0f64; CONV1_FILTERS]);
        for (p, (g, arg)) in ws.g1.chunks_exact(phw).zip(ws.arg1.chunks_exact(phw)).enumerate() {
            let c = p % CONV1_FILTERS;
            let a = &ws.a1[p * hw..][..hw];
            let win = &mut ws.win;
            win.resize(phw, T::zero());
            for_each_winner(arg, w, |q, pos| win[q] = a[pos]);
            let sg = sum_f64(g);
            dgamma[c] += (dot_f64(g, win) - mean1[c] * sg) * inv1[c];
            dbeta[c] += sg;
        }
        add_grad(&mut self.bn1.gamma, &dgamma);
        add_grad(&mut self.bn1.beta, &dbeta);

        // First convolution: weight and bias gradients only.
        let m1 = (n * hw) as f64;
        ws.plane.resize(CONV1_FILTERS * hw, T::zero());
        let mut db = vec![0.0f64; CONV1_FILTERS];
        for i in 0..n {
            let dx = &mut ws.plane;
            for c in 0..CONV1_FILTERS {
                let p = i * CONV1_FILTERS + c;
                let (k0, k1) = input_grad_coefficients(mode, s1[c].f64(), mean1[c], inv1[c], dbeta[c] / m1, dgamma[c] / m1);
                let (k0, k1) = (T::lit(k0), T::lit(k1));
                let row = &mut dx[c * hw..][..hw];
                for (d, av) in row.iter_mut().zip(&ws.a1[p * hw..][..hw]) {
                    *d = k0 + k1 * *av;
                }
                let g = &ws.g1[p * phw..][..phw];
                for_each_winner(&ws.arg1[p * phw..][..phw], w, |q, pos| row[pos] = row[pos] + s1[c] * g[q]);
                db[c] += sum_f64(row);
            }
            let col = &mut ws.col;
            col.resize(IN_CHANNELS * TAPS * hw, T::zero());
            im2col(&ws.input[i * IN_CHANNELS * hw..][..IN_CHANNELS * hw], IN_CHANNELS, h, w, col);
            gemm(
                Transpose::No,
                Transpose::Yes,
                CONV1_FILTERS,
                IN_CHANNELS * TAPS,
                hw,
                T::one(),
                dx,
                col,
                T::one(),
                self.conv1_weight.grad_mut(),
            );
        }
        add_grad(&mut self.conv1_bias, &db);
        Ok(())
    }

    /// Trainable tensors with their names relative to the extractor.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        self.state_mut().0
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        self.state_mut().1
    }

    /// Trainable tensors and batch-norm running statistics, borrowed together.
    #[allow(clippy::type_complexity)]
    pub fn state_mut(&mut self) -> (Vec<(&'static str, &mut Tensor<T>)>, Vec<(&'static str, &mut Tensor<T>)>) {
        let (bn1, bn2) = (&mut self.bn1, &mut self.bn2);
        let params = vec![
            ("conv1.weight", &mut self.conv1_weight),
            ("conv1.bias", &mut self.conv1_bias),
            ("bn1.gamma", &mut bn1.gamma),
            ("bn1.beta", &mut bn1.beta),
            ("conv2.weight", &mut self.conv2_weight),
            ("conv2.bias", &mut self.conv2_bias),
            ("bn2.gamma", &mut bn2.gamma),
            ("bn2.beta", &mut bn2.beta),
        ];
        let buffers = vec![
            ("bn1.running_mean", &mut bn1.running_mean),
            ("bn1.running_var", &mut bn1.running_var),
            ("bn2.running_mean", &mut bn2.running_mean),
            ("bn2.running_var", &mut bn2.running_var),
        ];
        (params, buffers)
    }
}

/// Batch-norm input gradient as `scale·g + k0 + k1·a` for pre-norm value
/// `a`; in training mode the batch mean and variance depend on every input.
fn input_grad_coefficients(mode: Mode, scale: f64, mean: f64, inv_std: f64, mean_g: f64, mean_gx: f64) -> (f64, f64) {
    match mode {
        Mode::Eval => (0.0, 0.0),
        // scale·(g − mean_g − x̂·mean_gx) with x̂ = (a − mean)·inv_std
        Mode::Train => (scale * (-mean_g + mean * inv_std * mean_gx), -scale * inv_std * mean_gx),
    }
}
