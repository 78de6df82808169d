// stage-2 learning diagnostics
use hdriqa::model::train::{train_stage1, train_stage2, TrainConfig};
use hdriqa::load_manifest;

fn main() {
    let manifest = load_manifest("/tmp/synth_default/manifest.json").unwrap();
    let cfg = TrainConfig { stage1_epochs: 3, stage2_epochs: 6, ..TrainConfig::default() };
    let (bundle, r1) = train_stage1(&manifest, &cfg, 0).unwrap();
    println!("stage1 losses: {:?}", r1.epoch_losses);
    println!("kappa before stage2: {}", bundle.kappa());
    let (bundle, r2) = train_stage2(&manifest, &cfg, bundle, 0).unwrap();
    println!("stage2 losses: {:?}", r2.epoch_losses);
    println!("kappa after stage2: {} gain {}", bundle.kappa(), bundle.mix_gain());
    for name in ["resist.scale.w1", "resist.scale.w2", "resist.scale.w3"] {
        println!("{name} = {}", bundle.params.value(name).data()[0]);
    }
}
