// inspect distributions entering stage 2
use hdriqa::model::train::{train_stage1, TrainConfig};
use hdriqa::model::mix;
use hdriqa::preprocess::{extract_patches, feature_stack, patch_delta};
use hdriqa::hdr_io::{luminance, read_image};
use hdriqa::load_manifest;
use hdriqa::nn::Tensor;

fn main() {
    let manifest = load_manifest("/tmp/synth_default/manifest.json").unwrap();
    let cfg = TrainConfig { stage1_epochs: 3, stage2_epochs: 0, ..TrainConfig::default() };
    let (mut bundle, _) = train_stage1(&manifest, &cfg, 0).unwrap();

    // mimic stage-2 entry: collect rows for first few entries
    let mut t_vals = vec![];
    let mut d_vals = vec![];
    let mut targets = vec![];
    for e in manifest.entries.iter().take(12) {
        let rl = luminance(&read_image(&e.reference).unwrap());
        let dl = luminance(&read_image(&e.distorted).unwrap());
        let rp = extract_patches(&rl, 32, 32).unwrap();
        let dp = extract_patches(&dl, 32, 32).unwrap();
        let _deltas = patch_delta(&rp, &dp).unwrap();
        for p in &dp.patches {
            let norm: Vec<f64> = p.iter().map(|v| v / 4000.0).collect();
            let input = Tensor::from_vec(&[1,32,32], norm).unwrap();
            let (dhat, _) = bundle.noise_forward(&input, None).unwrap();
            let stack = feature_stack(p, 32).to_tensor();
            let (t, _) = bundle.resist_forward(&stack).unwrap();
            t_vals.push(t);
            d_vals.push(dhat);
            targets.push(e.dmos / 100.0);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("W uncalibrated: t mean {:.4} min {:.4} max {:.4}", mean(&t_vals),
        t_vals.iter().cloned().fold(f64::INFINITY, f64::min),
        t_vals.iter().cloned().fold(0.0f64, f64::max));
    println!("dhat mean {:.5} min {:.5} max {:.5}", mean(&d_vals),
        d_vals.iter().cloned().fold(f64::INFINITY, f64::min),
        d_vals.iter().cloned().fold(0.0f64, f64::max));
    println!("target mean {:.4}", mean(&targets));
    let kappa = bundle.kappa();
    let dmos: Vec<f64> = d_vals.iter().zip(&t_vals).map(|(&d,&t)| mix(d,t,kappa).unwrap()).collect();
    println!("dmos (kappa init) mean {:.4} max {:.6}", mean(&dmos), dmos.iter().cloned().fold(0.0f64, f64::max));

    // now with calibrated W's (mimic)
    for (name, ch) in [("resist.scale.w1", 0), ("resist.scale.w2", 1), ("resist.scale.w3", 2)] {
        let mut s = 0.0; let mut n = 0usize;
        for e in manifest.entries.iter().take(12) {
            let dl = luminance(&read_image(&e.distorted).unwrap());
            let dp = extract_patches(&dl, 32, 32).unwrap();
            for p in &dp.patches {
                let fs = feature_stack(p, 32);
                let c = match ch { 0 => &fs.lum, 1 => &fs.var, _ => &fs.mscn };
                s += c.iter().map(|v| v.abs()).sum::<f64>();
                n += c.len();
            }
        }
        let scale = s / n as f64;
        bundle.params.get_mut(name).value.data_mut()[0] = 1.0/scale;
        println!("{name} scale {scale:.4} -> W {:.6}", 1.0/scale);
    }
    let mut t2 = vec![];
    for e in manifest.entries.iter().take(12) {
        let dl = luminance(&read_image(&e.distorted).unwrap());
        let dp = extract_patches(&dl, 32, 32).unwrap();
        for p in &dp.patches {
            let stack = feature_stack(p, 32).to_tensor();
            t2.push(bundle.resist_forward(&stack).unwrap().0);
        }
    }
    println!("W calibrated: t mean {:.5} min {:.5} max {:.5}", mean(&t2),
        t2.iter().cloned().fold(f64::INFINITY, f64::min),
        t2.iter().cloned().fold(0.0f64, f64::max));
}
