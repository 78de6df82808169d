//! Command-line surface over the library pipeline: dataset synthesis,
//! two-stage training, prediction, evaluation, map rendering, grating
//! probes, and gradient checking.
//!
//! Exit codes: 0 ok, 1 usage, 2 data/format error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hdriqa::error::Error;
use hdriqa::eval::{make_splits, run_evaluation};
use hdriqa::maps::{
    probe_resistance, render_heatmap, synth_dataset, Normalization, QualityMap, SynthConfig,
};
use hdriqa::model::serialize::{load_bundle, save_bundle};
use hdriqa::model::train::{train_two_stage, TrainConfig, TwoStageTrainer};
use hdriqa::model::{
    mix, mix_backward, noise_backward_into, noise_forward_with, resist_backward_into,
    resist_forward_with, ModelBundle, ModelConfig,
};
use hdriqa::nn::layers::l1_loss;
use hdriqa::nn::optim::GradBuffer;
use hdriqa::nn::{gradient_check, Tensor};
use hdriqa::preprocess::{feature_stack, PreprocessMode};
use hdriqa::{make_grating, read_image};

#[derive(Parser)]
#[command(name = "hdriqa", about = "Blind HDR image quality assessment toolkit")]
struct Cli {
    /// JSON config file; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker thread cap for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Options shared by every training-capable command; unset flags fall back
/// to the config file, then to defaults.
#[derive(Args, Debug, Default, Serialize, Deserialize, Clone)]
struct TrainOpts {
    #[arg(long)]
    #[serde(default)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(default)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    patch_stride: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    peak_luminance: Option<f64>,
    #[arg(long)]
    #[serde(default)]
    dmos_scale: Option<f64>,
    #[arg(long)]
    #[serde(default)]
    dropout: Option<f64>,
    /// Remove the resistance-net pooling stages (the wide-flatten variant).
    #[arg(long)]
    #[serde(default)]
    wide_resist: Option<bool>,
    /// Preprocessing: linear | pu | drago | reinhard02 | reinhard05.
    #[arg(long)]
    #[serde(default)]
    preprocess: Option<PreprocessMode>,
}

impl TrainOpts {
    fn merge_over(self, base: TrainOpts) -> TrainOpts {
        TrainOpts {
            seed: self.seed.or(base.seed),
            stage1_epochs: self.stage1_epochs.or(base.stage1_epochs),
            stage2_epochs: self.stage2_epochs.or(base.stage2_epochs),
            batch_size: self.batch_size.or(base.batch_size),
            patch_stride: self.patch_stride.or(base.patch_stride),
            peak_luminance: self.peak_luminance.or(base.peak_luminance),
            dmos_scale: self.dmos_scale.or(base.dmos_scale),
            dropout: self.dropout.or(base.dropout),
            wide_resist: self.wide_resist.or(base.wide_resist),
            preprocess: self.preprocess.or(base.preprocess),
        }
    }

    /// Fill defaults and split into the resolved (seed, TrainConfig) pair.
    fn resolve(self) -> (u64, TrainConfig) {
        let mut cfg = TrainConfig::default();
        if let Some(v) = self.stage1_epochs {
            cfg.stage1_epochs = v;
        }
        if let Some(v) = self.stage2_epochs {
            cfg.stage2_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.patch_stride {
            cfg.model.stride = v;
        }
        if let Some(v) = self.peak_luminance {
            cfg.model.peak_luminance = v;
        }
        if let Some(v) = self.dmos_scale {
            cfg.model.dmos_scale = v;
        }
        if let Some(v) = self.dropout {
            cfg.model.dropout_rate = v;
        }
        if let Some(true) = self.wide_resist {
            cfg.model.resist_pooling = false;
        }
        if let Some(v) = self.preprocess {
            cfg.model.preprocess = v;
        }
        (self.seed.unwrap_or(0), cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic-oracle dataset (PFM files + manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        contents: usize,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long, default_value_t = 96)]
        image_size: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Two-stage training; writes a weight bundle.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Score one image with a trained bundle; JSON to stdout or --out.
    Predict {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render <prefix>_{dmos,resistance,noise}.ppm heatmaps.
        #[arg(long)]
        heatmap_prefix: Option<PathBuf>,
    },
    /// Split-protocol evaluation (train/test cycles, median metrics).
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Render a heatmap from a prediction JSON file.
    Heatmap {
        #[arg(long)]
        from_json: PathBuf,
        /// Which map: dmos | resistance | noise.
        #[arg(long, default_value = "dmos")]
        field: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the chirped sinusoidal grating probe image.
    Grating {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 800)]
        width: usize,
        #[arg(long, default_value_t = 800)]
        height: usize,
        #[arg(long, default_value_t = 4000.0)]
        peak: f64,
    },
    /// Per-patch error resistance of an image (no mixing, no noise net).
    Probe {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Heatmap output (PPM).
        #[arg(long)]
        out_map: Option<PathBuf>,
        /// Raw values output (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Elements probed per parameter tensor in the full-chain check.
        #[arg(long, default_value_t = 6)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Prediction artifact: the pooled score plus per-patch arrays, so
/// downstream tooling never scrapes logs.
#[derive(Serialize, Deserialize)]
struct PredictionJson {
    score: f64,
    grid_rows: usize,
    grid_cols: usize,
    patch_size: usize,
    stride: usize,
    dmos: Vec<f64>,
    resistance: Vec<f64>,
    noise: Vec<f64>,
}

fn echo_config(label: &str, value: &impl Serialize) {
    // full resolved config on stderr so every run is reproducible from its log
    eprintln!(
        "{label}: {}",
        serde_json::to_string(value).unwrap_or_else(|_| "<unserializable>".into())
    );
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> hdriqa::Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("serialization: {e}")))?;
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_config_opts(path: Option<&Path>) -> hdriqa::Result<TrainOpts> {
    match path {
        None => Ok(TrainOpts::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::format(p, format!("config JSON: {e}"), None))
        }
    }
}

fn run(cli: Cli) -> hdriqa::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    let file_opts = load_config_opts(cli.config.as_deref())?;

    match cli.command {
        Command::Synth {
            out,
            contents,
            levels,
            image_size,
            seed,
        } => {
            let seed = seed.unwrap_or(0);
            let cfg = SynthConfig {
                contents,
                levels,
                image_size,
                ..SynthConfig::default()
            };
            echo_config(
                "synth",
                &serde_json::json!({
                    "out": out, "contents": contents, "levels": levels,
                    "image_size": image_size, "seed": seed,
                }),
            );
            let manifest = synth_dataset(&out, &cfg, seed)?;
            println!(
                "wrote {} entries ({} contents) under {}",
                manifest.entries.len(),
                manifest.content_ids().len(),
                out.display()
            );
            Ok(())
        }

        Command::Train {
            manifest,
            out,
            opts,
        } => {
            let (seed, cfg) = opts.merge_over(file_opts).resolve();
            echo_config(
                "train",
                &serde_json::json!({
                    "manifest": manifest, "out": out, "seed": seed,
                    "stage1_epochs": cfg.stage1_epochs, "stage2_epochs": cfg.stage2_epochs,
                    "batch_size": cfg.batch_size, "model": cfg.model,
                }),
            );
            let data = hdriqa::load_manifest(&manifest)?;
            let (bundle, s1, s2) = train_two_stage(&data, &cfg, seed)?;
            save_bundle(&bundle, &out)?;
            println!(
                "stage1 loss {:.6} -> {:.6}; stage2 loss {:.6} -> {:.6}; bundle {}",
                s1.epoch_losses.first().unwrap_or(&f64::NAN),
                s1.epoch_losses.last().unwrap_or(&f64::NAN),
                s2.epoch_losses.first().unwrap_or(&f64::NAN),
                s2.epoch_losses.last().unwrap_or(&f64::NAN),
                out.display()
            );
            Ok(())
        }

        Command::Predict {
            bundle,
            image,
            out,
            heatmap_prefix,
        } => {
            let model = load_bundle(&bundle)?;
            echo_config(
                "predict",
                &serde_json::json!({
                    "bundle": bundle, "image": image, "config": model.config,
                }),
            );
            let img = read_image(&image)?;
            let pred = model.predict_image(&img)?;
            let json = PredictionJson {
                score: pred.score,
                grid_rows: pred.dmos_map.grid_rows,
                grid_cols: pred.dmos_map.grid_cols,
                patch_size: pred.dmos_map.patch_size,
                stride: pred.dmos_map.stride,
                dmos: pred.dmos_map.values.clone(),
                resistance: pred.resistance_map.values.clone(),
                noise: pred.noise_map.values.clone(),
            };
            write_json(out.as_deref(), &json)?;
            if let Some(prefix) = heatmap_prefix {
                let base = prefix.to_string_lossy();
                render_heatmap(&pred.dmos_map, format!("{base}_dmos.ppm"))?;
                render_heatmap(&pred.resistance_map, format!("{base}_resistance.ppm"))?;
                render_heatmap(&pred.noise_map, format!("{base}_noise.ppm"))?;
            }
            Ok(())
        }

        Command::Eval {
            manifest,
            iterations,
            train_fraction,
            out,
            opts,
        } => {
            let (seed, cfg) = opts.merge_over(file_opts).resolve();
            echo_config(
                "eval",
                &serde_json::json!({
                    "manifest": manifest, "iterations": iterations,
                    "train_fraction": train_fraction, "seed": seed,
                    "stage1_epochs": cfg.stage1_epochs, "stage2_epochs": cfg.stage2_epochs,
                    "batch_size": cfg.batch_size, "model": cfg.model,
                }),
            );
            let data = hdriqa::load_manifest(&manifest)?;
            let splits = make_splits(&data, train_fraction, iterations, seed)?;
            let trainer = TwoStageTrainer { cfg };
            let report = run_evaluation(&trainer, &data, &splits, seed)?;
            print!("{}", report.table());
            if out.is_some() {
                write_json(out.as_deref(), &report)?;
            }
            Ok(())
        }

        Command::Heatmap {
            from_json,
            field,
            out,
        } => {
            let text = std::fs::read_to_string(&from_json).map_err(|e| Error::io(&from_json, e))?;
            let pred: PredictionJson = serde_json::from_str(&text)
                .map_err(|e| Error::format(&from_json, format!("prediction JSON: {e}"), None))?;
            let values = match field.as_str() {
                "dmos" => pred.dmos,
                "resistance" => pred.resistance,
                "noise" => pred.noise,
                other => {
                    return Err(Error::invalid(format!(
                        "unknown field {other} (dmos | resistance | noise)"
                    )))
                }
            };
            let qmap = QualityMap {
                values,
                grid_rows: pred.grid_rows,
                grid_cols: pred.grid_cols,
                patch_size: pred.patch_size,
                stride: pred.stride,
                normalization: Normalization::None,
            };
            render_heatmap(&qmap, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Command::Grating {
            out,
            width,
            height,
            peak,
        } => {
            echo_config(
                "grating",
                &serde_json::json!({"out": out, "width": width, "height": height, "peak": peak}),
            );
            let img = make_grating(width, height, peak)?;
            hdriqa::hdr_io::write_pfm(&img, &out)?;
            println!("wrote {} ({}x{}, peak {peak})", out.display(), width, height);
            Ok(())
        }

        Command::Probe {
            bundle,
            image,
            out_map,
            out,
        } => {
            let model = load_bundle(&bundle)?;
            echo_config(
                "probe",
                &serde_json::json!({"bundle": bundle, "image": image, "config": model.config}),
            );
            let img = read_image(&image)?;
            let tmap = probe_resistance(&model, &img)?;
            if let Some(p) = &out_map {
                render_heatmap(&tmap, p)?;
            }
            let payload = serde_json::json!({
                "grid_rows": tmap.grid_rows,
                "grid_cols": tmap.grid_cols,
                "patch_size": tmap.patch_size,
                "stride": tmap.stride,
                "resistance": tmap.values,
            });
            if out.is_some() || out_map.is_none() {
                write_json(out.as_deref(), &payload)?;
            }
            Ok(())
        }

        Command::Gradcheck {
            seed,
            samples,
            tolerance,
        } => {
            let seed = seed.unwrap_or(0);
            echo_config(
                "gradcheck",
                &serde_json::json!({"seed": seed, "samples": samples, "tolerance": tolerance}),
            );
            let report = full_chain_gradcheck(seed, samples, tolerance)?;
            print!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Error::numeric(format!(
                    "gradient check failed: max relative error {:.3e} >= {tolerance:.1e}",
                    report.max_rel_err()
                )))
            }
        }
    }
}

/// Joint objective over every trainable parameter: L1 between the mixed
/// patch score and a fixed target, driven by one random patch. Checks the
/// noise->mixing and resistance->mixing chains end to end, dropout off.
fn full_chain_gradcheck(
    seed: u64,
    samples: usize,
    tolerance: f64,
) -> hdriqa::Result<hdriqa::nn::GradCheckReport> {
    let cfg = ModelConfig::default();
    let mut bundle = ModelBundle::init(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let patch: Vec<f64> = (0..cfg.patch_size * cfg.patch_size)
        .map(|_| rng.gen::<f64>() * cfg.peak_luminance)
        .collect();
    let input = Tensor::from_vec(
        &[1, cfg.patch_size, cfg.patch_size],
        patch.iter().map(|v| v / cfg.peak_luminance).collect(),
    )?;
    let stack = feature_stack(&patch, cfg.patch_size).to_tensor();
    let target = Tensor::scalar(0.42);

    let loss_cfg = cfg.clone();
    let loss_input = input.clone();
    let loss_stack = stack.clone();
    let loss_target = target.clone();
    let loss = move |p: &hdriqa::nn::ParamSet| -> hdriqa::Result<f64> {
        let (d, _) = noise_forward_with(&loss_cfg, p, &loss_input)?;
        let (t, _) = resist_forward_with(&loss_cfg, p, &loss_stack)?;
        let dmos = mix(d, t, p.value("mix.kappa").data()[0])?;
        Ok(l1_loss(&Tensor::scalar(dmos), &loss_target)?.0)
    };

    // analytic gradients
    let (d, ncache) = noise_forward_with(&cfg, &bundle.params, &input)?;
    let (t, rcache) = resist_forward_with(&cfg, &bundle.params, &stack)?;
    let kappa = bundle.kappa();
    let dmos = mix(d, t, kappa)?;
    let (_, g) = l1_loss(&Tensor::scalar(dmos), &target)?;
    let (dd, dt, dk) = mix_backward(d, t, kappa, g.data()[0]);
    let mut grads = GradBuffer::zeros_like(&bundle.params);
    noise_backward_into(&cfg, &bundle.params, &ncache, dd, &mut grads)?;
    resist_backward_into(&cfg, &bundle.params, &rcache, dt, &mut grads)?;
    grads.acc_scalar("mix.kappa", dk);
    bundle.params.add_grads(&grads);

    gradient_check(&mut bundle.params, loss, samples, tolerance, seed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric(_) => 3,
                Error::Format { .. } | Error::Invalid(_) | Error::Io { .. } => 2,
            };
            ExitCode::from(code)
        }
    }
}
