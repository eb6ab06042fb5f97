//! Double-precision gradient checks over every layer and the assembled
//! network, at input sizes small enough to finish in seconds.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ingest::SoundType;
use crate::model::{outer_fuse, outer_fuse_backward, Attention, Classifier, Extractor, ModelConfig, Network, FEATURE_DIM};
use crate::nncore::{
    gradient_check_with, softmax_ce, softmax_ce_backward, AdaptiveAvgPool2d, BatchNorm2d, CheckOptions, Conv2d, Dense, Dropout,
    LayerObjective, MaxPool2d, Mode, NnError, Objective, Relu, Tensor,
};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-6;
/// Tolerance for the extractor and the full network.
pub const STACK_TOLERANCE: f64 = 1e-4;
/// Relative-error floor for the deep checks (see [`CheckOptions::floor`]).
pub const STACK_FLOOR: f64 = 1e-6;
/// Largest share of coordinates the deep checks may skip as non-smooth.
pub const MAX_SKIPPED_FRACTION: f64 = 0.05;
const MAX_COORDS: usize = 200;

/// Every check, in run order.
pub const CHECKS: [&str; 14] = [
    "conv2d",
    "batchnorm_train",
    "batchnorm_eval",
    "relu",
    "maxpool2d",
    "adaptive_avgpool2d",
    "dense",
    "dropout",
    "softmax_ce",
    "attention",
    "fusion",
    "classifier",
    "extractor",
    "full_stack",
];

#[derive(Debug, Error)]
pub enum SelfCheckError {
    #[error("unknown check {0:?}; expected one of {list}", list = CHECKS.join(", "))]
    UnknownCheck(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Coordinates skipped because a kink lies within the step.
    pub skipped: usize,
    /// The analytic gradients were deliberately scaled before comparison.
    pub corrupted: bool,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.skipped as f64 <= MAX_SKIPPED_FRACTION * (self.checked + self.skipped) as f64
    }
}

/// Runs every check; `corrupt` names one whose analytic gradients are
/// scaled by 1.5 to confirm the checker notices.
pub fn run_all(corrupt: Option<&str>) -> Result<Vec<CheckResult>, SelfCheckError> {
    if let Some(c) = corrupt {
        lookup(c)?;
    }
    CHECKS.iter().map(|name| run_check(name, corrupt == Some(*name))).collect()
}

pub fn run_check(name: &str, corrupt: bool) -> Result<CheckResult, SelfCheckError> {
    let name = lookup(name)?;
    let (obj, tolerance, floor) = objective(name);
    let mut obj: Box<dyn Objective<f64>> = if corrupt { Box::new(Corrupted(obj)) } else { obj };
    let report = gradient_check_with(obj.as_mut(), &options(tolerance, floor))?;
    Ok(CheckResult {
        name,
        max_rel_error: report.max_rel_error,
        tolerance,
        checked: report.checked(),
        skipped: report.skipped(),
        corrupted: corrupt,
    })
}

/// Deep checks get the floor and kink detection; single layers neither.
fn options(tolerance: f64, floor: f64) -> CheckOptions {
    let base = CheckOptions::new(STEP, MAX_COORDS, 17);
    if floor > 0.0 {
        CheckOptions { floor, kink_threshold: Some(tolerance), ..base }
    } else {
        base
    }
}

fn lookup(name: &str) -> Result<&'static str, SelfCheckError> {
    CHECKS.iter().copied().find(|c| *c == name).ok_or_else(|| SelfCheckError::UnknownCheck(name.into()))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).expect("shape")
}

const SEX: [f64; 4] = [0.0, 1.0, 1.0, 0.0];

type Boxed = Box<dyn Objective<f64>>;

fn objective(name: &str) -> (Boxed, f64, f64) {
    let layer = |o: Boxed| (o, LAYER_TOLERANCE, 0.0);
    match name {
        "conv2d" => {
            let conv = Conv2d::<f64>::new(3, 2, &mut rng(1));
            layer(Box::new(LayerObjective::random(
                conv,
                &[2, 3, 5, 6],
                1,
                |l, x| l.forward(x).unwrap(),
                |l, g| l.backward(g).unwrap().unwrap(),
                |l| l.params_mut().into_iter().collect(),
            )))
        }
        "batchnorm_train" => {
            let mut bn = BatchNorm2d::<f64>::new(3);
            bn.gamma.data_mut().copy_from_slice(&[0.5, 1.5, -1.0]);
            bn.beta.data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
            layer(Box::new(LayerObjective::random(
                bn,
                &[2, 3, 4, 4],
                2,
                |l, x| l.forward(x, Mode::Train).unwrap(),
                |l, g| l.backward(g).unwrap(),
                |l| l.params_mut().into_iter().collect(),
            )))
        }
        "batchnorm_eval" => {
            let mut bn = BatchNorm2d::<f64>::new(2);
            bn.running_mean.data_mut().copy_from_slice(&[0.3, -0.4]);
            bn.running_var.data_mut().copy_from_slice(&[1.7, 0.6]);
            bn.gamma.data_mut().copy_from_slice(&[0.5, 1.5]);
            layer(Box::new(LayerObjective::random(
                bn,
                &[2, 2, 3, 3],
                3,
                |l, x| l.forward(x, Mode::Eval).unwrap(),
                |l, g| l.backward(g).unwrap(),
                |l| l.params_mut().into_iter().collect(),
            )))
        }
        "relu" => {
            // keep every input at least 0.1 from the kink
            let mut x = uniform(&[2, 3, 4, 4], -2.0, 3.0, 4);
            x.data_mut().iter_mut().filter(|v| v.abs() < 0.1).for_each(|v| *v += 0.5);
            layer(Box::new(LayerObjective::new(
                Relu::new(),
                x,
                4,
                |l, x| l.forward(x),
                |l, g| l.backward(g).unwrap(),
                |_| Vec::new(),
            )))
        }
        "maxpool2d" => {
            // values 0.1 apart: no window holds a near-tie
            let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.1 - 1.6).collect();
            vals.shuffle(&mut rng(5));
            let x = Tensor::from_vec(&[1, 2, 4, 4], vals).expect("shape");
            layer(Box::new(LayerObjective::new(
                MaxPool2d::new(),
                x,
                5,
                |l, x| l.forward(x).unwrap(),
                |l, g| l.backward(g).unwrap(),
                |_| Vec::new(),
            )))
        }
        "adaptive_avgpool2d" => layer(Box::new(LayerObjective::random(
            AdaptiveAvgPool2d::new(),
            &[2, 2, 5, 5],
            6,
            |l, x| l.forward(x).unwrap(),
            |l, g| l.backward(g).unwrap(),
            |_| Vec::new(),
        ))),
        "dense" => {
            let d = Dense::<f64>::new(4, 2, &mut rng(7));
            layer(Box::new(LayerObjective::random(
                d,
                &[3, 4],
                7,
                |l, x| l.forward(x).unwrap(),
                |l, g| l.backward(g).unwrap(),
                |l| l.params_mut().into_iter().collect(),
            )))
        }
        "dropout" => {
            let d = Dropout::<f64>::new(0.3).expect("valid probability");
            // the same seed on every call freezes the mask
            layer(Box::new(LayerObjective::random(
                d,
                &[4, 6],
                8,
                |l, x| l.forward(x, Mode::Train, &mut rng(8)),
                |l, g| l.backward(g),
                |_| Vec::new(),
            )))
        }
        "softmax_ce" => {
            let logits = uniform(&[5, 2], -3.0, 3.0, 9);
            layer(Box::new(CrossEntropy { logits, targets: vec![0, 1, 1, 0, 1] }))
        }
        "attention" => {
            let att = Attention::<f64>::new(&mut rng(10));
            layer(Box::new(LayerObjective::random(
                att,
                &[3, FEATURE_DIM],
                10,
                |l, x| l.forward(x).unwrap(),
                |l, g| l.backward(g).unwrap(),
                |l| l.params_mut().into_iter().map(|(_, t)| t).collect(),
            )))
        }
        "fusion" => layer(Box::new(LayerObjective::random(
            Fusion::default(),
            &[5, FEATURE_DIM],
            11,
            |l, x| l.forward(x),
            |l, g| l.backward(g),
            |_| Vec::new(),
        ))),
        "classifier" => {
            let c = Classifier::<f64>::new(FEATURE_DIM, true, &mut rng(12));
            layer(Box::new(LayerObjective::random(
                c,
                &[4, FEATURE_DIM],
                12,
                |l, x| l.forward(x, Some(&SEX), Mode::Train, &mut rng(12)).unwrap(),
                |l, g| l.backward(g).unwrap(),
                |l| l.params_mut().into_iter().map(|(_, t)| t).collect(),
            )))
        }
        "extractor" => {
            let mut ext = Extractor::<f64>::new(&mut rng(13));
            condition(ext.params_mut().into_iter().map(|(n, t)| (n.to_string(), t)), 13);
            let x = uniform(&[4, 3, 16, 16], -2.0, 2.0, 13);
            for _ in 0..WARMUP {
                ext.forward(&x, Mode::Train).expect("forward");
            }
            let obj = LayerObjective::new(
                ext,
                x,
                13,
                |l, x| l.forward(x, Mode::Eval).unwrap(),
                |l, g| {
                    l.backward(g).unwrap();
                    Tensor::zeros(&[4, 3, 16, 16])
                },
                |l| l.params_mut().into_iter().map(|(_, t)| t).collect(),
            );
            (Box::new(SkipInput(obj)), STACK_TOLERANCE, STACK_FLOOR)
        }
        "full_stack" => {
            let config = ModelConfig::new(&SoundType::ALL, true, true, 14).expect("valid config");
            (Box::new(StackObjective::conditioned(&config, 16, 14)), STACK_TOLERANCE, STACK_FLOOR)
        }
        _ => unreachable!("names are validated by lookup"),
    }
}

/// Training-mode passes that bring the running statistics to the check
/// batch's own statistics.
const WARMUP: usize = 200;

/// Batch-norm affine parameters that leave a pre-activation negative only
/// when it lies three standard deviations below the batch mean, so central
/// differences rarely straddle a ReLU kink.
fn condition<'a>(tensors: impl Iterator<Item = (String, &'a mut Tensor<f64>)>, seed: u64) {
    let mut r = rng(seed ^ 0xc0de);
    for (name, t) in tensors {
        let range = if name.ends_with("gamma") {
            0.5..1.0
        } else if name.ends_with("beta") {
            3.0..3.5
        } else {
            continue;
        };
        t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(range.clone()));
    }
}

/// Rows 0–1 fused as a pair and rows 2–4 as a triple, concatenated.
#[derive(Default)]
struct Fusion {
    input: Option<Tensor<f64>>,
}

impl Fusion {
    fn rows(x: &Tensor<f64>) -> Vec<&[f64]> {
        x.data().chunks_exact(FEATURE_DIM).collect()
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
        let rows = Self::rows(x);
        let mut out = outer_fuse(&rows[..2]).expect("pair").values;
        out.extend(outer_fuse(&rows[2..]).expect("triple").values);
        self.input = Some(x.clone());
        let n = out.len();
        Tensor::from_vec(&[n], out).expect("shape")
    }

    fn backward(&mut self, g: &Tensor<f64>) -> Tensor<f64> {
        let x = self.input.take().expect("forward first");
        let rows = Self::rows(&x);
        let split = (FEATURE_DIM + 1).pow(2);
        let mut grads = outer_fuse_backward(&rows[..2], &g.data()[..split]).expect("pair");
        grads.extend(outer_fuse_backward(&rows[2..], &g.data()[split..]).expect("triple"));
        Tensor::from_vec(x.shape(), grads.concat()).expect("shape")
    }
}

/// `mean CE(network(inputs), targets)` in evaluation mode, over every
/// trainable parameter of the network.
pub struct StackObjective {
    pub net: Network<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub sex: Option<Vec<f64>>,
    pub targets: Vec<usize>,
    names: Vec<String>,
}

impl StackObjective {
    /// A batch of four random `size`×`size` samples and a network whose
    /// batch-norm state is conditioned as for the extractor check.
    pub fn conditioned(config: &ModelConfig, size: usize, seed: u64) -> Self {
        let mut net = Network::<f64>::new(config).expect("valid config");
        condition(net.params_mut().into_iter(), seed);
        let names = net.params_mut().into_iter().map(|(n, _)| n).collect();
        let n = SEX.len();
        let inputs: Vec<_> = (0..config.arity()).map(|m| uniform(&[n, 3, size, size], -2.0, 2.0, seed + m as u64)).collect();
        let sex = config.use_sex.then(|| SEX.to_vec());
        let mut r = rng(seed);
        for _ in 0..WARMUP {
            net.forward(&inputs, sex.as_deref(), Mode::Train, &mut r).expect("forward");
        }
        Self { net, inputs, sex, targets: vec![0, 1, 1, 0], names }
    }

    fn logits(&mut self) -> Tensor<f64> {
        let mut r = rng(0);
        self.net.forward(&self.inputs, self.sex.as_deref(), Mode::Eval, &mut r).expect("forward")
    }
}

impl Objective<f64> for StackObjective {
    fn loss(&mut self) -> Result<f64, NnError> {
        let logits = self.logits();
        Ok(softmax_ce(&logits, &self.targets)?.0)
    }
    fn loss_and_grad(&mut self) -> Result<f64, NnError> {
        self.net.zero_grad();
        let logits = self.logits();
        let (loss, probs) = softmax_ce(&logits, &self.targets)?;
        self.net.backward(&softmax_ce_backward(&probs, &self.targets)).expect("backward");
        Ok(loss)
    }
    fn num_params(&self) -> usize {
        self.names.len()
    }
    fn param_name(&self, i: usize) -> String {
        self.names[i].clone()
    }
    fn param_mut(&mut self, i: usize) -> &mut Tensor<f64> {
        self.net.params_mut().swap_remove(i).1
    }
}

/// Scales every analytic gradient by 1.5.
struct Corrupted(Boxed);

impl Objective<f64> for Corrupted {
    fn loss(&mut self) -> Result<f64, NnError> {
        self.0.loss()
    }
    fn loss_and_grad(&mut self) -> Result<f64, NnError> {
        let loss = self.0.loss_and_grad()?;
        for i in 0..self.0.num_params() {
            if let Some(g) = self.0.param_mut(i).grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
        }
        Ok(loss)
    }
    fn num_params(&self) -> usize {
        self.0.num_params()
    }
    fn param_name(&self, i: usize) -> String {
        self.0.param_name(i)
    }
    fn param_mut(&mut self, i: usize) -> &mut Tensor<f64> {
        self.0.param_mut(i)
    }
}

/// Checks only a layer's parameters, not its input.
struct SkipInput<L>(LayerObjective<L>);

impl<L> Objective<f64> for SkipInput<L> {
    fn loss(&mut self) -> Result<f64, NnError> {
        self.0.loss()
    }
    fn loss_and_grad(&mut self) -> Result<f64, NnError> {
        self.0.loss_and_grad()
    }
    fn num_params(&self) -> usize {
        self.0.num_params() - 1
    }
    fn param_name(&self, i: usize) -> String {
        self.0.param_name(i + 1)
    }
    fn param_mut(&mut self, i: usize) -> &mut Tensor<f64> {
        self.0.param_mut(i + 1)
    }
}

struct CrossEntropy {
    logits: Tensor<f64>,
    targets: Vec<usize>,
}

impl Objective<f64> for CrossEntropy {
    fn loss(&mut self) -> Result<f64, NnError> {
        Ok(softmax_ce(&self.logits, &self.targets)?.0)
    }
    fn loss_and_grad(&mut self) -> Result<f64, NnError> {
        let (loss, probs) = softmax_ce(&self.logits, &self.targets)?;
        self.logits.grad = Some(softmax_ce_backward(&probs, &self.targets).into_data());
        Ok(loss)
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for r in run_all(None).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn corruption_is_caught_for_every_check() {
        for name in CHECKS {
            let r = run_check(name, true).unwrap();
            assert!(r.max_rel_error > 1e-2, "{r:?}");
            assert!(!r.passed());
        }
    }

    #[test]
    fn unknown_check_rejected() {
        assert!(matches!(run_all(Some("conv3d")), Err(SelfCheckError::UnknownCheck(_))));
    }

    #[test]
    fn mono_and_pair_stacks() {
        for (m, att) in [(&[SoundType::Cough][..], false), (&[SoundType::Breath, SoundType::Speech][..], true)] {
            let c = ModelConfig::new(m, att, true, 11).unwrap();
            let mut obj = StackObjective::conditioned(&c, 16, 5);
            let r = gradient_check_with(&mut obj, &options(STACK_TOLERANCE, STACK_FLOOR)).unwrap();
            assert!(r.max_rel_error < STACK_TOLERANCE, "{m:?}: {r:?}");
            assert!(r.skipped() * 20 <= r.checked() + r.skipped(), "{m:?}: {r:?}");
        }
    }
}
