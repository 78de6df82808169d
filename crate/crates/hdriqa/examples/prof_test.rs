// quick hot-path micro benchmark
use hdriqa::model::{ModelBundle, ModelConfig, noise_forward_with, noise_backward_into, resist_forward_with, resist_backward_into};
use hdriqa::nn::optim::GradBuffer;
use hdriqa::nn::Tensor;
use hdriqa::preprocess::feature_stack;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default();
    let bundle = ModelBundle::init(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let patch: Vec<f64> = (0..1024).map(|_| rng.gen::<f64>()).collect();
    let input = Tensor::from_vec(&[1, 32, 32], patch.clone()).unwrap();
    let stack = feature_stack(&patch, 32).to_tensor();

    let n = 50;
    let t = Instant::now();
    for _ in 0..n { let _ = noise_forward_with(&cfg, &bundle.params, &input).unwrap(); }
    println!("noise fwd: {:.2} ms", t.elapsed().as_secs_f64()*1000.0/n as f64);

    let (_, cache) = noise_forward_with(&cfg, &bundle.params, &input).unwrap();
    let mut grads = GradBuffer::zeros_for_prefix(&bundle.params, "noise.");
    let t = Instant::now();
    for _ in 0..n { noise_backward_into(&cfg, &bundle.params, &cache, 1.0, &mut grads).unwrap(); }
    println!("noise bwd: {:.2} ms", t.elapsed().as_secs_f64()*1000.0/n as f64);

    let t = Instant::now();
    for _ in 0..n { let _ = resist_forward_with(&cfg, &bundle.params, &stack).unwrap(); }
    println!("resist fwd: {:.2} ms", t.elapsed().as_secs_f64()*1000.0/n as f64);

    let (_, rcache) = resist_forward_with(&cfg, &bundle.params, &stack).unwrap();
    let mut rgrads = GradBuffer::zeros_for_prefix(&bundle.params, "resist.");
    let t = Instant::now();
    for _ in 0..n { resist_backward_into(&cfg, &bundle.params, &rcache, 1.0, &mut rgrads).unwrap(); }
    println!("resist bwd: {:.2} ms", t.elapsed().as_secs_f64()*1000.0/n as f64);

    let t = Instant::now();
    for _ in 0..n { let _ = feature_stack(&patch, 32); }
    println!("feature_stack: {:.2} ms", t.elapsed().as_secs_f64()*1000.0/n as f64);
}
