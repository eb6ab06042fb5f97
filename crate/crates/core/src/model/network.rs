use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{outer_fuse, outer_fuse_backward, Attention, Classifier, Extractor, ModelConfig, ModelError, FEATURE_DIM};
use crate::dsp::{SpectrogramFrame, FRAME_CHANNELS, IMAGE_SIZE};
use crate::nncore::{softmax_ce, softmax_ce_backward, Mode, Real, Tensor};

/// Full model for one configuration. Class 1 is the positive class.
#[derive(Debug, Clone)]
pub struct Network<T: Real> {
    config: ModelConfig,
    pub extractors: Vec<Extractor<T>>,
    pub attention: Vec<Attention<T>>,
    pub classifier: Classifier<T>,
    fused_inputs: Option<Vec<Tensor<T>>>,
}

impl<T: Real> Network<T> {
    /// Initializes every parameter from `config.seed`: extractors in
    /// canonical modality order, then attention blocks, then the classifier.
    pub fn new(config: &ModelConfig) -> Result<Self, ModelError> {
        if !config.is_valid() {
            return Err(ModelError::InvalidConfig(format!("modalities {:?}", config.modalities)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let extractors = config.modalities.iter().map(|_| Extractor::new(&mut rng)).collect();
        let attention =
            if config.use_attention { config.modalities.iter().map(|_| Attention::new(&mut rng)).collect() } else { Vec::new() };
        let classifier = Classifier::new(config.classifier_input_len(), config.use_sex, &mut rng);
        assert_eq!(classifier.input_len(), [16, 289, 4913][config.arity() - 1]);
        Ok(Self { config: config.clone(), extractors, attention, classifier, fused_inputs: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// One N×3×H×W tensor per modality (canonical order) → N×2 logits.
    pub fn forward(
        &mut self,
        inputs: &[Tensor<T>],
        sex: Option<&[T]>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>, ModelError> {
        self.run(inputs, sex, mode, false, rng)
    }

    fn run(
        &mut self,
        inputs: &[Tensor<T>],
        sex: Option<&[T]>,
        mode: Mode,
        streaming: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>, ModelError> {
        if inputs.len() != self.extractors.len() {
            return Err(ModelError::ShapeMismatch(format!("{} inputs for {} modalities", inputs.len(), self.extractors.len())));
        }
        let n = inputs[0].shape().first().copied().unwrap_or(0);
        if inputs.iter().any(|x| x.shape().first() != Some(&n)) {
            return Err(ModelError::MisalignedFrames("batch sizes differ across modalities".into()));
        }
        let mut features = Vec::with_capacity(inputs.len());
        for (ext, x) in self.extractors.iter_mut().zip(inputs) {
            features.push(if streaming { ext.infer(x)? } else { ext.forward(x, mode)? });
        }
        self.head(features, n, sex, mode, rng)
    }

    /// Attention, fusion and classifier on top of the per-modality features.
    fn head(
        &mut self,
        mut features: Vec<Tensor<T>>,
        n: usize,
        sex: Option<&[T]>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>, ModelError> {
        for (m, f) in features.iter_mut().enumerate() {
            if let Some(att) = self.attention.get_mut(m) {
                *f = att.forward(f)?;
            }
        }
        let rep = if features.len() == 1 {
            self.fused_inputs = None;
            features.pop().expect("one modality")
        } else {
            let len = self.config.classifier_input_len();
            let mut data = Vec::with_capacity(n * len);
            for r in 0..n {
                let rows: Vec<&[T]> = features.iter().map(|f| &f.data()[r * FEATURE_DIM..][..FEATURE_DIM]).collect();
                data.extend(outer_fuse(&rows)?.values);
            }
            self.fused_inputs = Some(features);
            Tensor::from_vec(&[n, len], data)?
        };
        self.classifier.forward(&rep, sex, mode, rng)
    }

    /// Backpropagates from the logits, accumulating parameter gradients.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<(), ModelError> {
        let g = self.classifier.backward(grad_logits)?;
        let n = g.shape()[0];
        let grads: Vec<Tensor<T>> = match self.fused_inputs.take() {
            None => vec![g],
            Some(features) => {
                let len = g.shape()[1];
                let mut per: Vec<Vec<T>> = vec![Vec::with_capacity(n * FEATURE_DIM); features.len()];
                for r in 0..n {
                    let rows: Vec<&[T]> = features.iter().map(|f| &f.data()[r * FEATURE_DIM..][..FEATURE_DIM]).collect();
                    for (dst, src) in per.iter_mut().zip(outer_fuse_backward(&rows, &g.data()[r * len..][..len])?) {
                        dst.extend(src);
                    }
                }
                per.into_iter().map(|d| Tensor::from_vec(&[n, FEATURE_DIM], d)).collect::<Result<_, _>>()?
            }
        };
        for (m, g) in grads.into_iter().enumerate() {
            let g = match self.attention.get_mut(m) {
                Some(att) => att.backward(&g)?,
                None => g,
            };
            self.extractors[m].backward(&g)?;
        }
        Ok(())
    }

    /// Forward in training mode, mean cross-entropy, backward. Gradients
    /// accumulate; callers clear them between steps.
    pub fn train_step(
        &mut self,
        inputs: &[Tensor<T>],
        sex: Option<&[T]>,
        targets: &[usize],
        rng: &mut impl Rng,
    ) -> Result<T, ModelError> {
        let logits = self.forward(inputs, sex, Mode::Train, rng)?;
        let (loss, probs) = softmax_ce(&logits, targets)?;
        self.backward(&softmax_ce_backward(&probs, targets))?;
        Ok(loss)
    }

    /// Positive-class probabilities in evaluation mode.
    pub fn predict(&mut self, inputs: &[Tensor<T>], sex: Option<&[T]>) -> Result<Vec<T>, ModelError> {
        // eval mode draws nothing from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.run(inputs, sex, Mode::Eval, true, &mut rng)?;
        self.fused_inputs = None;
        let n = logits.shape()[0];
        let (_, probs) = softmax_ce(&logits, &vec![0; n])?;
        Ok(probs.data().chunks_exact(2).map(|r| r[1]).collect())
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Trainable tensors in a fixed order with qualified names.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.state_mut().0
    }

    /// Batch-norm running statistics.
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.state_mut().1
    }

    /// Parameters and buffers, borrowed together.
    #[allow(clippy::type_complexity)]
    pub fn state_mut(&mut self) -> (Vec<(String, &mut Tensor<T>)>, Vec<(String, &mut Tensor<T>)>) {
        let (mut params, mut buffers) = (Vec::new(), Vec::new());
        for (ext, m) in self.extractors.iter_mut().zip(&self.config.modalities) {
            let (p, b) = ext.state_mut();
            params.extend(p.into_iter().map(|(n, t)| (format!("{m}.{n}"), t)));
            buffers.extend(b.into_iter().map(|(n, t)| (format!("{m}.{n}"), t)));
        }
        for (att, m) in self.attention.iter_mut().zip(&self.config.modalities) {
            params.extend(att.params_mut().into_iter().map(|(n, t)| (format!("{m}.attention.{n}"), t)));
        }
        params.extend(self.classifier.params_mut().into_iter().map(|(n, t)| (format!("classifier.{n}"), t)));
        (params, buffers)
    }

    pub fn param_sizes(&mut self) -> Vec<usize> {
        self.params_mut().iter().map(|(_, t)| t.len()).collect()
    }
}

/// Stacks aligned frames into one batch tensor per modality. Each sample
/// lists its frames in the configuration's modality order.
pub fn stack_frames(config: &ModelConfig, samples: &[Vec<&SpectrogramFrame>]) -> Result<Vec<Tensor<f32>>, ModelError> {
    let k = config.arity();
    let per = FRAME_CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
    let mut data: Vec<Vec<f32>> = vec![Vec::with_capacity(samples.len() * per); k];
    for sample in samples {
        if sample.len() != k {
            return Err(ModelError::MisalignedFrames(format!("{} frames for {k} modalities", sample.len())));
        }
        let first = sample[0];
        for ((frame, &sound), buf) in sample.iter().zip(&config.modalities).zip(&mut data) {
            if !frame.standardized {
                return Err(ModelError::UnstandardizedInput);
            }
            if frame.sound_type != sound {
                return Err(ModelError::MisalignedFrames(format!("expected {sound} frame, got {}", frame.sound_type)));
            }
            if frame.patient_id != first.patient_id || frame.frame_index != first.frame_index {
                return Err(ModelError::MisalignedFrames(format!(
                    "{}#{} vs {}#{}",
                    first.patient_id, first.frame_index, frame.patient_id, frame.frame_index
                )));
            }
            if frame.pixels.len() != per {
                return Err(ModelError::ShapeMismatch(format!("frame with {} values", frame.pixels.len())));
            }
            buf.extend_from_slice(&frame.pixels);
        }
    }
    let n = samples.len();
    data.into_iter()
        .map(|d| Tensor::from_vec(&[n, FRAME_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], d).map_err(ModelError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SoundType::{self, *};

    fn config(m: &[SoundType], att: bool, sex: bool) -> ModelConfig {
        ModelConfig::new(m, att, sex, 11).unwrap()
    }

    fn inputs(k: usize, n: usize, size: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| {
                Tensor::from_vec(&[n, 3, size, size], (0..n * 3 * size * size).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn classifier_input_lengths() {
        assert_eq!(Network::<f32>::new(&config(&[Cough], false, false)).unwrap().classifier.input_len(), 16);
        assert_eq!(Network::<f32>::new(&config(&[Breath, Speech], false, false)).unwrap().classifier.input_len(), 289);
    }

    #[test]
    fn same_seed_same_parameters() {
        let c = config(&[Breath, Speech], true, true);
        let mut a = Network::<f32>::new(&c).unwrap();
        let mut b = Network::<f32>::new(&c).unwrap();
        let pa: Vec<Vec<f32>> = a.params_mut().into_iter().map(|(_, t)| t.data().to_vec()).collect();
        let pb: Vec<Vec<f32>> = b.params_mut().into_iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn misaligned_frames_rejected() {
        let c = config(&[Breath, Speech], false, false);
        let frame = |id: &str, s: SoundType, idx: usize| SpectrogramFrame {
            pixels: vec![0.0; FRAME_CHANNELS * IMAGE_SIZE * IMAGE_SIZE],
            patient_id: id.into(),
            sound_type: s,
            frame_index: idx,
            standardized: true,
        };
        let (b, s) = (frame("p1", Breath, 0), frame("p1", Speech, 1));
        assert!(matches!(stack_frames(&c, &[vec![&b, &s]]), Err(ModelError::MisalignedFrames(_))));
        let s0 = frame("p1", Speech, 0);
        assert_eq!(stack_frames(&c, &[vec![&b, &s0]]).unwrap().len(), 2);
        let mut raw = frame("p1", Speech, 0);
        raw.standardized = false;
        assert!(matches!(stack_frames(&c, &[vec![&b, &raw]]), Err(ModelError::UnstandardizedInput)));
    }

    #[test]
    fn training_reduces_loss() {
        let c = config(&[Breath], false, false);
        let mut net = Network::<f64>::new(&c).unwrap();
        let x = inputs(1, 8, 16, 3);
        let targets = vec![0, 1, 0, 1, 0, 1, 0, 1];
        // make the label visible in the input
        let mut shifted = x[0].clone();
        for (i, chunk) in shifted.data_mut().chunks_mut(3 * 16 * 16).enumerate() {
            chunk.iter_mut().for_each(|v| *v += targets[i] as f64 * 2.0);
        }
        let batch = vec![shifted];
        let mut adam = crate::nncore::AdamState::new(Default::default(), &net.param_sizes());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let first = net.train_step(&batch, None, &targets, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..60 {
            net.zero_grad();
            last = net.train_step(&batch, None, &targets, &mut rng).unwrap();
            let mut ps: Vec<&mut Tensor<f64>> = net.params_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut ps).unwrap();
        }
        assert!(last < first * 0.5, "{first} -> {last}");
    }
}
