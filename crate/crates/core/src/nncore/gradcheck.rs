//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NnError, Real, Tensor};

/// A scalar function of a set of parameter tensors with an analytic gradient.
pub trait Objective<T: Real> {
    fn loss(&mut self) -> Result<T, NnError>;
    /// Evaluates the loss and leaves fresh (not accumulated) gradients in
    /// every parameter's `grad` buffer.
    fn loss_and_grad(&mut self) -> Result<T, NnError>;
    fn num_params(&self) -> usize;
    fn param_name(&self, i: usize) -> String;
    fn param_mut(&mut self, i: usize) -> &mut Tensor<T>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub checked: usize,
    /// Coordinates left out because the loss is not smooth within `h`.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }
}

/// Default denominator floor of [`relative_error_floored`].
pub const RELATIVE_FLOOR: f64 = 1e-12;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, RELATIVE_FLOOR)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Tensors with more entries are checked on a seeded random subset
    /// of this size.
    pub max_coords: usize,
    pub seed: u64,
    /// Denominator floor of the relative error. Central differences cannot
    /// resolve gradients much below `ε·|L|/h`; deep stacks have coordinates
    /// whose gradients cancel to that level.
    pub floor: f64,
    /// When set, each coordinate is also differenced with step `h/2`, and
    /// coordinates whose two estimates differ by more than this relative
    /// amount are skipped: a ReLU kink or max-pool switch lies within `h`
    /// and neither estimate is a derivative. The decision never looks at
    /// the analytic gradient.
    pub kink_threshold: Option<f64>,
}

impl CheckOptions {
    pub fn new(h: f64, max_coords: usize, seed: u64) -> Self {
        Self { h, max_coords, seed, floor: RELATIVE_FLOOR, kink_threshold: None }
    }
}

/// Compares analytic gradients against central differences.
pub fn gradient_check<T: Real, O: Objective<T> + ?Sized>(
    obj: &mut O,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, NnError> {
    gradient_check_with(obj, &CheckOptions::new(h, max_coords, seed))
}

/// [`gradient_check`] with a larger relative-error floor.
pub fn gradient_check_floored<T: Real, O: Objective<T> + ?Sized>(
    obj: &mut O,
    h: f64,
    max_coords: usize,
    seed: u64,
    floor: f64,
) -> Result<GradCheckReport, NnError> {
    gradient_check_with(obj, &CheckOptions { floor, ..CheckOptions::new(h, max_coords, seed) })
}

fn central<T: Real, O: Objective<T> + ?Sized>(obj: &mut O, i: usize, j: usize, h: f64) -> Result<f64, NnError> {
    let original = obj.param_mut(i).data()[j];
    obj.param_mut(i).data_mut()[j] = original + T::lit(h);
    let plus = obj.loss()?.f64();
    obj.param_mut(i).data_mut()[j] = original - T::lit(h);
    let minus = obj.loss()?.f64();
    obj.param_mut(i).data_mut()[j] = original;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    Ok((plus - minus) / (2.0 * h))
}

pub fn gradient_check_with<T: Real, O: Objective<T> + ?Sized>(
    obj: &mut O,
    opts: &CheckOptions,
) -> Result<GradCheckReport, NnError> {
    let loss = obj.loss_and_grad()?;
    if !loss.f64().is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    let analytic: Vec<Vec<T>> = (0..obj.num_params())
        .map(|i| {
            let p = obj.param_mut(i);
            let n = p.len();
            p.grad.clone().unwrap_or_else(|| vec![T::zero(); n])
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = Vec::new();
    let mut overall = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> =
            if n <= opts.max_coords { (0..n).collect() } else { sample(&mut rng, n, opts.max_coords).into_vec() };
        let (mut worst, mut skipped) = (0.0f64, 0);
        for &j in &coords {
            let numeric = central(obj, i, j, opts.h)?;
            if let Some(t) = opts.kink_threshold {
                let half = central(obj, i, j, opts.h / 2.0)?;
                if relative_error_floored(numeric, half, opts.floor) > t {
                    skipped += 1;
                    continue;
                }
            }
            worst = worst.max(relative_error_floored(grad[j].f64(), numeric, opts.floor));
        }
        overall = overall.max(worst);
        params.push(ParamError { name: obj.param_name(i), checked: coords.len() - skipped, skipped, max_rel_error: worst });
    }
    Ok(GradCheckReport { params, max_rel_error: overall })
}

/// Layer signatures used by [`LayerObjective`].
pub type Forward<L> = fn(&mut L, &Tensor<f64>) -> Tensor<f64>;
pub type Backward<L> = fn(&mut L, &Tensor<f64>) -> Tensor<f64>;
pub type Params<L> = fn(&mut L) -> Vec<&mut Tensor<f64>>;

/// Compensated `Σ a_i b_i`, so finite differences of linear layers stay
/// accurate far below the 1e-10 level.
pub fn weighted_sum(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        let v = x * y;
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Loss `Σ R ⊙ layer(x)` for a fixed random `R`; the input is checked
/// as parameter 0, followed by the layer's own parameters.
pub struct LayerObjective<L> {
    layer: L,
    input: Tensor<f64>,
    weights: Option<Tensor<f64>>,
    seed: u64,
    layer_params: usize,
    fwd: Forward<L>,
    bwd: Backward<L>,
    params: Params<L>,
}

impl<L> LayerObjective<L> {
    pub fn new(mut layer: L, input: Tensor<f64>, seed: u64, fwd: Forward<L>, bwd: Backward<L>, params: Params<L>) -> Self {
        let layer_params = params(&mut layer).len();
        Self { layer, input, weights: None, seed, layer_params, fwd, bwd, params }
    }

    /// Inputs drawn uniformly from (-2, 3).
    pub fn random(layer: L, input_shape: &[usize], seed: u64, fwd: Forward<L>, bwd: Backward<L>, params: Params<L>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = input_shape.iter().product();
        let input = Tensor::from_vec(input_shape, (0..n).map(|_| rng.gen_range(-2.0..3.0)).collect()).expect("shape");
        Self::new(layer, input, seed, fwd, bwd, params)
    }

    fn weights_for(&mut self, out: &Tensor<f64>) -> Tensor<f64> {
        self.weights
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
                Tensor::from_vec(
                    out.shape(),
                    (0..out.len()).map(|_| rng.gen_range(0.5..1.5) * if rng.gen() { 1.0 } else { -1.0 }).collect(),
                )
                .unwrap()
            })
            .clone()
    }
}

impl<L> Objective<f64> for LayerObjective<L> {
    fn loss(&mut self) -> Result<f64, NnError> {
        let out = (self.fwd)(&mut self.layer, &self.input);
        let r = self.weights_for(&out);
        Ok(weighted_sum(&out, &r))
    }

    fn loss_and_grad(&mut self) -> Result<f64, NnError> {
        for p in (self.params)(&mut self.layer) {
            p.zero_grad();
        }
        let out = (self.fwd)(&mut self.layer, &self.input);
        let r = self.weights_for(&out);
        let loss = weighted_sum(&out, &r);
        let dx = (self.bwd)(&mut self.layer, &r);
        self.input.grad = Some(dx.into_data());
        Ok(loss)
    }

    fn num_params(&self) -> usize {
        1 + self.layer_params
    }

    fn param_name(&self, i: usize) -> String {
        if i == 0 {
            "input".into()
        } else {
            format!("param{}", i - 1)
        }
    }

    fn param_mut(&mut self, i: usize) -> &mut Tensor<f64> {
        if i == 0 {
            &mut self.input
        } else {
            (self.params)(&mut self.layer).swap_remove(i - 1)
        }
    }
}
