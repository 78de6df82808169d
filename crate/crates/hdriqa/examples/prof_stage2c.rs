// activation magnitudes through the noise net, before and after stage 1
use hdriqa::model::train::{train_stage1, TrainConfig};
use hdriqa::model::{ModelBundle, ModelConfig};
use hdriqa::preprocess::extract_patches;
use hdriqa::hdr_io::{luminance, read_image};
use hdriqa::load_manifest;
use hdriqa::nn::Tensor;

fn probe(bundle: &ModelBundle, input: &Tensor, label: &str) {
    let (dhat, _) = bundle.noise_forward(input, None).unwrap();
    println!("{label}: dhat = {dhat:.3e}, fc.b = {:.4e}, fc.w norm = {:.4e}",
        bundle.params.value("noise.fc.b").data()[0],
        bundle.params.value("noise.fc.w").data().iter().map(|v| v*v).sum::<f64>().sqrt());
    for i in 0..4 {
        let w = bundle.params.value(&format!("noise.conv{i}.w"));
        let b = bundle.params.value(&format!("noise.conv{i}.b"));
        println!("  conv{i}: |w| rms {:.3e}, b range [{:.3e}, {:.3e}]",
            (w.data().iter().map(|v| v*v).sum::<f64>() / w.numel() as f64).sqrt(),
            b.data().iter().cloned().fold(f64::INFINITY, f64::min),
            b.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
}

fn main() {
    let manifest = load_manifest("/tmp/synth_default/manifest.json").unwrap();
    let e = &manifest.entries[3];
    let dl = luminance(&read_image(&e.distorted).unwrap());
    let dp = extract_patches(&dl, 32, 32).unwrap();
    let norm: Vec<f64> = dp.patches[0].iter().map(|v| v / 4000.0).collect();
    let input = Tensor::from_vec(&[1,32,32], norm).unwrap();

    let bundle = ModelBundle::init(ModelConfig::default(), 0).unwrap();
    probe(&bundle, &input, "fresh init");

    for epochs in [1usize, 2, 3] {
        let cfg = TrainConfig { stage1_epochs: epochs, stage2_epochs: 0, ..TrainConfig::default() };
        let (b, r) = train_stage1(&manifest, &cfg, 0).unwrap();
        println!("--- after {} stage1 epochs, losses {:?}", epochs, r.epoch_losses);
        probe(&b, &input, "trained");
    }
}
