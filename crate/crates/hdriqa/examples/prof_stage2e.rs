// distribution of head pre-activations across patches, across epochs
use hdriqa::model::train::{train_stage1, TrainConfig};
use hdriqa::model::ModelBundle;
use hdriqa::nn::layers::{conv2d_valid, maxpool2, Activation};
use hdriqa::nn::Tensor;
use hdriqa::preprocess::{extract_patches, patch_delta};
use hdriqa::hdr_io::{luminance, read_image};
use hdriqa::load_manifest;

fn head_pre(bundle: &ModelBundle, input: &Tensor) -> f64 {
    let act = Activation::Relu;
    let mut x = input.clone();
    for i in 0..4 {
        let (y, _) = conv2d_valid(&x,
            bundle.params.value(&format!("noise.conv{i}.w")),
            bundle.params.value(&format!("noise.conv{i}.b"))).unwrap();
        x = act.apply(&y);
        if i < 3 { x = maxpool2(&x).unwrap().0; }
    }
    let flat = x.reshaped(&[512]).unwrap();
    let w = bundle.params.value("noise.fc.w");
    let b = bundle.params.value("noise.fc.b");
    w.data().iter().zip(flat.data()).map(|(a, b)| a * b).sum::<f64>() + b.data()[0]
}

fn main() {
    let manifest = load_manifest("/tmp/synth_default/manifest.json").unwrap();
    // gather all inputs + targets
    let mut inputs = vec![];
    let mut targets = vec![];
    for e in &manifest.entries {
        let rl = luminance(&read_image(&e.reference).unwrap());
        let dl = luminance(&read_image(&e.distorted).unwrap());
        let rp = extract_patches(&rl, 32, 32).unwrap();
        let dp = extract_patches(&dl, 32, 32).unwrap();
        for (p, d) in dp.patches.iter().zip(patch_delta(&rp, &dp).unwrap()) {
            inputs.push(Tensor::from_vec(&[1,32,32], p.iter().map(|v| v/4000.0).collect()).unwrap());
            targets.push(d / 4000.0);
        }
    }
    let stat = |v: &[f64]| (v.iter().cloned().fold(f64::INFINITY, f64::min),
                             v.iter().sum::<f64>()/v.len() as f64,
                             v.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    println!("targets: {:?}", stat(&targets));

    for epochs in [0usize, 1, 2] {
        let cfg = TrainConfig { stage1_epochs: epochs, stage2_epochs: 0, ..TrainConfig::default() };
        let (b, r) = train_stage1(&manifest, &cfg, 0).unwrap();
        let pres: Vec<f64> = inputs.iter().map(|x| head_pre(&b, x)).collect();
        let (mn, mean, mx) = stat(&pres);
        println!("after {epochs} epochs: losses {:?}", r.epoch_losses);
        println!("  head pre: min {mn:.3} mean {mean:.3} max {mx:.3}, fc.b {:.3}",
            b.params.value("noise.fc.b").data()[0]);
        for i in 0..4 {
            let w = b.params.value(&format!("noise.conv{i}.w"));
            println!("  conv{i} w rms {:.4e}", (w.data().iter().map(|v| v*v).sum::<f64>()/w.numel() as f64).sqrt());
        }
    }
}
