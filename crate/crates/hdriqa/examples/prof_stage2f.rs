// per-batch instrumentation of a hand-rolled stage-1 loop
use hdriqa::model::train::TrainConfig;
use hdriqa::model::{calibrate_noise_scales, noise_backward_into, ModelBundle, ModelConfig};
use hdriqa::nn::optim::GradBuffer;
use hdriqa::nn::{AdamConfig, Tensor};
use hdriqa::preprocess::{extract_patches, patch_delta};
use hdriqa::hdr_io::{luminance, read_image};
use hdriqa::load_manifest;

fn main() {
    let manifest = load_manifest("/tmp/synth_default/manifest.json").unwrap();
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
    let mut bundle = ModelBundle::init(ModelConfig::default(), 0).unwrap();
    bundle.params.set_trainable(false);
    bundle.params.set_trainable_prefix("noise.", true);
    let refs: Vec<&Tensor> = inputs.iter().take(256).collect();
    let mt = targets.iter().take(256).sum::<f64>() / 256.0;
    calibrate_noise_scales(&mut bundle, &refs, mt).unwrap();

    let cfg = TrainConfig::default();
    let adam = AdamConfig::default();
    let rms = |t: &Tensor| (t.data().iter().map(|v| v*v).sum::<f64>()/t.numel() as f64).sqrt();

    for (bno, batch) in (0..inputs.len()).collect::<Vec<_>>().chunks(64).take(6).enumerate() {
        let inv = 1.0 / batch.len() as f64;
        let mut grads = GradBuffer::zeros_for_prefix(&bundle.params, "noise.");
        let mut loss = 0.0;
        for &i in batch {
            // inference mode (no dropout) to isolate dynamics
            let (d, cache) = bundle.noise_forward(&inputs[i], None).unwrap();
            loss += (d - targets[i]).abs();
            let up = if d > targets[i] { inv } else if d < targets[i] { -inv } else { 0.0 };
            noise_backward_into(&cfg.model, &bundle.params, &cache, up, &mut grads).unwrap();
        }
        bundle.params.zero_grads();
        bundle.params.add_grads(&grads);
        // inspect gradient and weight scales
        let gw = grads.get("noise.fc.w");
        println!("batch {bno}: loss {:.4}, fc.w grad rms {:.3e} max {:.3e}, fc.w rms {:.3e}, fc.b {:.3}",
            loss * inv, rms(gw), gw.data().iter().cloned().fold(0.0f64, |a,b| a.max(b.abs())),
            rms(bundle.params.value("noise.fc.w")),
            bundle.params.value("noise.fc.b").data()[0]);
        bundle.params.adam_step(&adam).unwrap();
    }
    // after 6 batches check a prediction
    let (d, _) = bundle.noise_forward(&inputs[0], None).unwrap();
    println!("pred[0] = {d:.4e} target {:.4e}", targets[0]);
    println!("fc.w rms now: {:.4e}", rms(bundle.params.value("noise.fc.w")));
}
