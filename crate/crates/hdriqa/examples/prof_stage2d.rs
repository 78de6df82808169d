// manual stage-by-stage trace of the noise forward
use hdriqa::model::train::{train_stage1, TrainConfig};
use hdriqa::model::ModelBundle;
use hdriqa::nn::layers::{conv2d_valid, maxpool2, Activation};
use hdriqa::nn::Tensor;
use hdriqa::preprocess::extract_patches;
use hdriqa::hdr_io::{luminance, read_image};
use hdriqa::load_manifest;

fn stats(t: &Tensor) -> String {
    let mn = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
    format!("shape {:?} min {mn:.3e} mean {mean:.3e} max {mx:.3e}", t.shape())
}

fn trace(bundle: &ModelBundle, input: &Tensor) {
    let act = Activation::Relu;
    let mut x = input.clone();
    println!("input: {}", stats(&x));
    for i in 0..4 {
        let (y, _) = conv2d_valid(&x,
            bundle.params.value(&format!("noise.conv{i}.w")),
            bundle.params.value(&format!("noise.conv{i}.b"))).unwrap();
        println!("conv{i} pre: {}", stats(&y));
        x = act.apply(&y);
        if i < 3 {
            let (p, _) = maxpool2(&x).unwrap();
            x = p;
            println!("pool{i}: {}", stats(&x));
        }
    }
    let flat = x.reshaped(&[512]).unwrap();
    let w = bundle.params.value("noise.fc.w");
    let b = bundle.params.value("noise.fc.b");
    let pre: f64 = w.data().iter().zip(flat.data()).map(|(a, b)| a * b).sum::<f64>() + b.data()[0];
    println!("fc pre: {pre:.4e}");
}

fn main() {
    let manifest = load_manifest("/tmp/synth_default/manifest.json").unwrap();
    let e = &manifest.entries[3];
    let dl = luminance(&read_image(&e.distorted).unwrap());
    let dp = extract_patches(&dl, 32, 32).unwrap();
    let norm: Vec<f64> = dp.patches[0].iter().map(|v| v / 4000.0).collect();
    let input = Tensor::from_vec(&[1,32,32], norm).unwrap();

    let cfg = TrainConfig { stage1_epochs: 1, stage2_epochs: 0, ..TrainConfig::default() };
    let (b, _) = train_stage1(&manifest, &cfg, 0).unwrap();
    trace(&b, &input);
}
