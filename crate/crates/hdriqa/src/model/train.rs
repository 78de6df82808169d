//! Two-stage training: the noise estimator against per-patch mean-error
//! targets first, then (with the noise net frozen) the resistance network
//! and the mixing gain against global image scores.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{ScorePredictor, SplitTrainer};
use crate::hdr_io::{luminance, read_image, DatasetManifest};
use crate::model::{
    mix, mix_backward, noise_backward_into, resist_backward_into, ModelBundle, ModelConfig,
};
use crate::nn::optim::GradBuffer;
use crate::nn::{AdamConfig, Tensor};
use crate::preprocess::{extract_patches, feature_stack, patch_delta};
use crate::util::derive_seed;

// seed streams, so both stages can share one user-facing seed
const STREAM_INIT: u64 = 0x11;
const STREAM_S1_SHUFFLE: u64 = 0x12;
const STREAM_S1_DROPOUT: u64 = 0x13;
const STREAM_S2_SHUFFLE: u64 = 0x21;

/// Fixed number of gradient-accumulation chunks per batch. Each chunk sums
/// its samples sequentially and chunks are reduced in index order, so the
/// result is bit-identical no matter how many worker threads run.
const GRAD_CHUNKS: usize = 4;

/// Samples used to calibrate the augmented-layer input scales.
const CALIBRATION_SAMPLES: usize = 256;

/// Training hyperparameters. Epoch counts and batch size are desk-scale
/// defaults; the optimizer follows the standard Adam recommendation.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            stage1_epochs: 20,
            stage2_epochs: 30,
            batch_size: 64,
            adam: AdamConfig::default(),
        }
    }
}

/// Per-epoch mean training loss of one stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub epoch_losses: Vec<f64>,
}

/// One training sample: a distorted patch with its stage-1 and stage-2
/// targets.
struct PatchRow {
    noise_input: Tensor,
    stack: Tensor,
    delta_norm: f64,
    dmos_norm: f64,
}

fn build_rows(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Vec<PatchRow>> {
    if manifest.entries.is_empty() {
        return Err(Error::invalid("empty manifest"));
    }
    let model = &cfg.model;
    let rows: Vec<Vec<PatchRow>> = manifest
        .entries
        .par_iter()
        .map(|entry| -> Result<Vec<PatchRow>> {
            let ref_lum = model.preprocess.apply(&luminance(&read_image(&entry.reference)?))?;
            let dist_lum = model.preprocess.apply(&luminance(&read_image(&entry.distorted)?))?;
            let ref_patches = extract_patches(&ref_lum, model.patch_size, model.stride)?;
            let dist_patches = extract_patches(&dist_lum, model.patch_size, model.stride)?;
            let deltas = patch_delta(&ref_patches, &dist_patches)?;
            let dmos_norm = entry.dmos / model.dmos_scale;
            Ok(dist_patches
                .patches
                .iter()
                .zip(deltas.iter())
                .map(|(patch, &delta)| {
                    let normalized: Vec<f64> =
                        patch.iter().map(|&v| v / model.peak_luminance).collect();
                    PatchRow {
                        noise_input: Tensor::from_vec(
                            &[1, model.patch_size, model.patch_size],
                            normalized,
                        )
                        .expect("patch shape"),
                        stack: feature_stack(patch, model.patch_size).to_tensor(),
                        delta_norm: delta / model.peak_luminance,
                        dmos_norm,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// L1 subgradient with the tie pinned to zero.
fn l1_sign(diff: f64) -> f64 {
    if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Stage 1: train the noise estimator with L1 loss against peak-normalized
/// per-patch mean-error targets. Deterministic for a given seed.
pub fn train_stage1(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelBundle, StageReport)> {
    let rows = build_rows(manifest, cfg)?;
    let mut bundle = ModelBundle::init(cfg.model.clone(), derive_seed(seed, STREAM_INIT))?;
    bundle.params.set_trainable(false);
    bundle.params.set_trainable_prefix("noise.", true);

    let take = rows.len().min(CALIBRATION_SAMPLES);
    let calib_inputs: Vec<&Tensor> = rows[..take].iter().map(|r| &r.noise_input).collect();
    let mean_target = rows[..take].iter().map(|r| r.delta_norm).sum::<f64>() / take as f64;
    crate::model::calibrate_noise_scales(&mut bundle, &calib_inputs, mean_target)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_S1_SHUFFLE));
    let dropout_base = derive_seed(seed, STREAM_S1_DROPOUT);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.stage1_epochs);

    for epoch in 0..cfg.stage1_epochs {
        order.shuffle(&mut shuffle_rng);
        let epoch_seed = derive_seed(dropout_base, epoch as u64);
        let mut loss_sum = 0.0;
        let mut sample_base = 0u64;
        for batch in order.chunks(cfg.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            let chunk_size = batch.len().div_ceil(GRAD_CHUNKS);
            let chunks: Vec<(usize, &[usize])> = batch.chunks(chunk_size).enumerate().collect();
            let partials: Vec<(f64, GradBuffer)> = chunks
                .into_par_iter()
                .map(|(ci, chunk)| -> Result<(f64, GradBuffer)> {
                    let mut grads = GradBuffer::zeros_for_prefix(&bundle.params, "noise.");
                    let mut chunk_loss = 0.0;
                    for (j, &row_idx) in chunk.iter().enumerate() {
                        let row = &rows[row_idx];
                        let sample_tag = sample_base + (ci * chunk_size + j) as u64;
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, sample_tag));
                        let (delta, cache) =
                            bundle.noise_forward(&row.noise_input, Some(&mut rng))?;
                        chunk_loss += (delta - row.delta_norm).abs();
                        let upstream = l1_sign(delta - row.delta_norm) * inv;
                        noise_backward_into(
                            &cfg.model,
                            &bundle.params,
                            &cache,
                            upstream,
                            &mut grads,
                        )?;
                    }
                    Ok((chunk_loss, grads))
                })
                .collect::<Result<_>>()?;

            bundle.params.zero_grads();
            for (chunk_loss, grads) in &partials {
                loss_sum += chunk_loss;
                bundle.params.add_grads(grads);
            }
            bundle.params.adam_step(&cfg.adam)?;
            sample_base += batch.len() as u64;
        }
        let epoch_loss = loss_sum / rows.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite stage-1 loss at epoch {epoch}"
            )));
        }
        epoch_losses.push(epoch_loss);
    }

    Ok((bundle, StageReport { epoch_losses }))
}

/// Calibrate the augmented-layer scalars to the reciprocal of each
/// channel's mean absolute value over the first calibration samples, so
/// the three inputs reach the network in a similar range.
fn calibrate_input_scales(bundle: &mut ModelBundle, rows: &[PatchRow]) {
    let take = rows.len().min(CALIBRATION_SAMPLES);
    if take == 0 {
        return;
    }
    let plane = bundle.config.patch_size * bundle.config.patch_size;
    let mut sums = [0.0f64; 3];
    for row in &rows[..take] {
        let data = row.stack.data();
        for ch in 0..3 {
            sums[ch] += data[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>();
        }
    }
    for (ch, name) in ["w1", "w2", "w3"].iter().enumerate() {
        let scale = sums[ch] / (take * plane) as f64;
        let w = if scale > 1e-12 { 1.0 / scale } else { 1.0 };
        bundle
            .params
            .get_mut(&format!("resist.scale.{name}"))
            .value
            .data_mut()[0] = w;
    }
}

/// Align the initial mixing gain with the data: pick kappa so the mean
/// tanh argument over the calibration samples lands on the mean target.
/// Without this the gain would have to travel orders of magnitude at the
/// configured learning rate before any signal reaches the resistance net.
fn calibrate_mix_gain(
    bundle: &mut ModelBundle,
    rows: &[PatchRow],
    deltas: &[f64],
) -> Result<()> {
    let take = rows.len().min(CALIBRATION_SAMPLES);
    if take == 0 {
        return Ok(());
    }
    let mean_delta = deltas[..take].iter().sum::<f64>() / take as f64;
    let mut mean_t = 0.0;
    for row in &rows[..take] {
        mean_t += bundle.resist_forward(&row.stack)?.0;
    }
    mean_t /= take as f64;
    let mean_target = (rows[..take].iter().map(|r| r.dmos_norm).sum::<f64>() / take as f64)
        .clamp(0.05, 0.85);
    if mean_delta > 1e-12 && mean_t > 0.0 {
        let gain = (mean_target.atanh() * mean_t / mean_delta).max(1e-3);
        bundle.params.get_mut("mix.kappa").value.data_mut()[0] =
            crate::model::inverse_mix_gain(gain);
    }
    Ok(())
}

/// Stage 2: freeze the noise estimator, precompute its per-patch outputs,
/// then train the resistance network plus the mixing gain with L1 loss
/// between mixed patch scores and the image's normalized global score.
pub fn train_stage2(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    mut bundle: ModelBundle,
    seed: u64,
) -> Result<(ModelBundle, StageReport)> {
    let rows = build_rows(manifest, cfg)?;
    bundle.params.set_trainable(true);
    bundle.params.set_trainable_prefix("noise.", false);
    calibrate_input_scales(&mut bundle, &rows);

    // the frozen noise net runs in inference mode; its outputs are fixed
    // for the whole stage
    let deltas: Vec<f64> = rows
        .par_iter()
        .map(|row| bundle.noise_forward(&row.noise_input, None).map(|(d, _)| d))
        .collect::<Result<_>>()?;
    calibrate_mix_gain(&mut bundle, &rows, &deltas)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_S2_SHUFFLE));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.stage2_epochs);

    for epoch in 0..cfg.stage2_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            let kappa = bundle.kappa();
            let chunk_size = batch.len().div_ceil(GRAD_CHUNKS);
            let partials: Vec<(f64, GradBuffer, f64)> = batch
                .chunks(chunk_size)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|chunk| -> Result<(f64, GradBuffer, f64)> {
                    let mut grads = GradBuffer::zeros_for_prefix(&bundle.params, "resist.");
                    let mut chunk_loss = 0.0;
                    let mut kappa_grad = 0.0;
                    for &row_idx in chunk {
                        let row = &rows[row_idx];
                        let (t_resist, cache) = bundle.resist_forward(&row.stack)?;
                        let dmos = mix(deltas[row_idx], t_resist, kappa)?;
                        chunk_loss += (dmos - row.dmos_norm).abs();
                        let upstream = l1_sign(dmos - row.dmos_norm) * inv;
                        let (_d_delta, d_t, d_kappa) =
                            mix_backward(deltas[row_idx], t_resist, kappa, upstream);
                        resist_backward_into(&cfg.model, &bundle.params, &cache, d_t, &mut grads)?;
                        kappa_grad += d_kappa;
                    }
                    Ok((chunk_loss, grads, kappa_grad))
                })
                .collect::<Result<_>>()?;

            bundle.params.zero_grads();
            let mut kappa_total = 0.0;
            for (chunk_loss, grads, kappa_grad) in &partials {
                loss_sum += chunk_loss;
                kappa_total += kappa_grad;
                bundle.params.add_grads(grads);
            }
            bundle.params.get_mut("mix.kappa").grad.data_mut()[0] = kappa_total;
            bundle.params.adam_step(&cfg.adam)?;
        }
        let epoch_loss = loss_sum / rows.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite stage-2 loss at epoch {epoch}"
            )));
        }
        epoch_losses.push(epoch_loss);
    }

    Ok((bundle, StageReport { epoch_losses }))
}

/// Both stages back to back on the same manifest and seed.
pub fn train_two_stage(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelBundle, StageReport, StageReport)> {
    let (bundle, report1) = train_stage1(manifest, cfg, seed)?;
    let (bundle, report2) = train_stage2(manifest, cfg, bundle, seed)?;
    Ok((bundle, report1, report2))
}

/// A trained bundle exposed as a file-scoring predictor.
pub struct BundlePredictor {
    pub bundle: ModelBundle,
}

impl ScorePredictor for BundlePredictor {
    fn score(&self, distorted: &Path) -> Result<f64> {
        let image = read_image(distorted)?;
        Ok(self.bundle.predict_image(&image)?.score)
    }
}

/// The full two-stage procedure as a [`SplitTrainer`], for the evaluation
/// protocols.
pub struct TwoStageTrainer {
    pub cfg: TrainConfig,
}

impl SplitTrainer for TwoStageTrainer {
    fn train(
        &self,
        manifest: &DatasetManifest,
        train_contents: &[String],
        seed: u64,
    ) -> Result<Box<dyn ScorePredictor>> {
        let entries = manifest
            .entries_for_contents(train_contents)
            .into_iter()
            .cloned()
            .collect::<Vec<_>>();
        let sub = DatasetManifest {
            dmos_range: manifest.dmos_range,
            entries,
        };
        let (bundle, _, _) = train_two_stage(&sub, &self.cfg, seed)?;
        Ok(Box::new(BundlePredictor { bundle }))
    }
}
