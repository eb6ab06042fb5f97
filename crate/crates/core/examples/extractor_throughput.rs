use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use respfuse::ingest::SoundType;
use respfuse::model::{ModelConfig, Network};
use respfuse::nncore::{AdamConfig, AdamState, Tensor};

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let config = ModelConfig::new(&[SoundType::Breath], false, false, 1).unwrap();
    let mut net = Network::<f32>::new(&config).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), &net.param_sizes());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_vec(&[n, 3, 224, 224], (0..n * 3 * 224 * 224).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let targets: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for _ in 0..3 {
        let t = Instant::now();
        net.zero_grad();
        net.train_step(std::slice::from_ref(&x), None, &targets, &mut rng).unwrap();
        let mut ps: Vec<&mut Tensor<f32>> = net.params_mut().into_iter().map(|(_, t)| t).collect();
        adam.step(&mut ps).unwrap();
        let train = t.elapsed();
        let t = Instant::now();
        net.predict(std::slice::from_ref(&x), None).unwrap();
        println!(
            "batch {n}: train {:.1} ms/sample, predict {:.1} ms/sample",
            train.as_secs_f64() * 1e3 / n as f64,
            t.elapsed().as_secs_f64() * 1e3 / n as f64
        );
    }
}
