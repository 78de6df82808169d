// conv stage micro-benchmark
use hdriqa::nn::layers::{conv2d_valid, conv2d_valid_backward};
use hdriqa::nn::tensor::{matmul_acc, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn bench_conv(c: usize, h: usize, k: usize, f: usize, n: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_vec(&[c, h, h], (0..c*h*h).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let ker = Tensor::from_vec(&[k, c, f, f], (0..k*c*f*f).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let b = Tensor::zeros(&[k]);
    let t = Instant::now();
    for _ in 0..n { let _ = conv2d_valid(&x, &ker, &b).unwrap(); }
    let fwd = t.elapsed().as_secs_f64()*1000.0/n as f64;
    let (out, cache) = conv2d_valid(&x, &ker, &b).unwrap();
    let g = Tensor::from_vec(out.shape(), (0..out.numel()).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let t = Instant::now();
    for _ in 0..n { let _ = conv2d_valid_backward(&cache, &ker, &g).unwrap(); }
    let bwd = t.elapsed().as_secs_f64()*1000.0/n as f64;
    let ho = h - f + 1;
    let mflops = (k*c*f*f*ho*ho) as f64 * 2.0 / 1e6;
    println!("conv {c}x{h}x{h} k{k} f{f}: fwd {fwd:.2} ms ({:.1} GF/s), bwd {bwd:.2} ms ({:.1} GF/s)",
        mflops/fwd, 2.0*mflops/bwd);
}

fn main() {
    bench_conv(1, 32, 64, 7, 200);   // noise conv0
    bench_conv(64, 13, 128, 5, 50);  // noise conv1 (hot)
    bench_conv(128, 4, 256, 3, 200); // noise conv2
    bench_conv(256, 1, 512, 1, 200); // noise conv3
    bench_conv(64, 15, 128, 3, 50);  // resist conv1

    // raw matmul at conv1 shape
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, k, n) = (128usize, 1600usize, 81usize);
    let a: Vec<f64> = (0..m*k).map(|_| rng.gen()).collect();
    let b: Vec<f64> = (0..k*n).map(|_| rng.gen()).collect();
    let mut out = vec![0.0; m*n];
    let t = Instant::now();
    let reps = 100;
    for _ in 0..reps { matmul_acc(&a, &b, &mut out, m, k, n); }
    let ms = t.elapsed().as_secs_f64()*1000.0/reps as f64;
    println!("raw matmul {m}x{k}x{n}: {ms:.2} ms ({:.1} GF/s)", (m*k*n) as f64*2.0/1e6/ms);
}
