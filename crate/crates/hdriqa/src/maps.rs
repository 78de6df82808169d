//! Per-patch map rendering, the sinusoidal grating probe, and the
//! synthetic-oracle dataset generator used by the acceptance harness.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hdr_io::{
    luminance, write_manifest, write_pfm, DatasetManifest, HdrImage, ManifestEntry,
};
use crate::model::ModelBundle;
use crate::preprocess::{extract_patches, feature_stack, gaussian_blur, PatchSet};

/// How a map's values have been normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    MaxOne,
}

/// A per-patch scalar field on the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityMap {
    pub values: Vec<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub normalization: Normalization,
}

impl QualityMap {
    /// Wrap per-patch values laid out in the row-major order of `patches`.
    pub fn from_patch_grid(patches: &PatchSet, values: Vec<f64>) -> Result<Self> {
        let (rows, cols) = patches.grid_dims();
        if values.len() != rows * cols || values.len() != patches.len() {
            return Err(Error::invalid(format!(
                "map has {} values for a {rows}x{cols} grid",
                values.len()
            )));
        }
        Ok(QualityMap {
            values,
            grid_rows: rows,
            grid_cols: cols,
            patch_size: patches.patch_size,
            stride: patches.stride,
            normalization: Normalization::None,
        })
    }

    /// Scale so the maximum value is one; an all-zero map is left unchanged.
    pub fn normalized_max_one(mut self) -> Self {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            for v in &mut self.values {
                *v /= max;
            }
        }
        self.normalization = Normalization::MaxOne;
        self
    }
}

/// Blue -> green -> red ramp on [0, 1]; endpoints are pure channels.
pub fn heat_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let (r, g, b) = if v < 0.5 {
        let t = 2.0 * v;
        (0.0, t, 1.0 - t)
    } else {
        let t = 2.0 * v - 1.0;
        (t, 1.0 - t, 0.0)
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// Render a map as a binary PPM: max-one normalization, then the
/// blue-green-red ramp, each grid cell drawn as a patch_size x patch_size
/// block.
pub fn render_heatmap(qmap: &QualityMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if qmap.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite values in quality map"));
    }
    let normalized = qmap.clone().normalized_max_one();
    let cell = qmap.patch_size;
    let (w, h) = (qmap.grid_cols * cell, qmap.grid_rows * cell);
    let mut out = Vec::with_capacity(32 + w * h * 3);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            let v = normalized.values[(y / cell) * qmap.grid_cols + x / cell];
            out.extend_from_slice(&heat_color(v));
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Grating probe
// ---------------------------------------------------------------------------

/// Raw (pre-normalization) grating profile at one pixel: a sinusoid whose
/// spatial frequency rises along x (a linear chirp) with a linear
/// amplitude ramp along y.
pub fn grating_profile(x: usize, y: usize, width: usize, height: usize) -> f64 {
    const F_LO: f64 = 0.005; // cycles/pixel at x = 0
    const F_HI: f64 = 0.25; // cycles/pixel at x = width-1
    const A_LO: f64 = 0.05; // amplitude at y = 0

    let span_x = (width.max(2) - 1) as f64;
    let xf = x as f64;
    let phase = F_LO * xf + (F_HI - F_LO) * xf * xf / (2.0 * span_x);
    let amp = if height > 1 {
        A_LO + (1.0 - A_LO) * y as f64 / (height - 1) as f64
    } else {
        1.0
    };
    0.5 * (1.0 + (std::f64::consts::TAU * phase).sin()) * amp
}

/// Chirped sinusoidal grating scaled so one pixel attains `peak` exactly.
pub fn make_grating(width: usize, height: usize, peak: f64) -> Result<HdrImage> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("grating dimensions must be positive"));
    }
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let mut raw = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            raw.push(grating_profile(x, y, width, height));
        }
    }
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let data = raw.iter().map(|&v| (v / max) * peak).collect();
    HdrImage::new(width, height, 1, data)
}

/// Per-patch error resistance of an image under a trained bundle: the
/// resistance network alone, no mixing and no noise estimate.
pub fn probe_resistance(bundle: &ModelBundle, image: &HdrImage) -> Result<QualityMap> {
    let lum = bundle.config.preprocess.apply(&luminance(image))?;
    let patches = extract_patches(&lum, bundle.config.patch_size, bundle.config.stride)?;
    let values: Vec<f64> = patches
        .patches
        .par_iter()
        .map(|p| {
            let stack = feature_stack(p, bundle.config.patch_size).to_tensor();
            bundle.resist_forward(&stack).map(|(t, _)| t)
        })
        .collect::<Result<_>>()?;
    QualityMap::from_patch_grid(&patches, values)
}

// ---------------------------------------------------------------------------
// Synthetic-oracle dataset
// ---------------------------------------------------------------------------

/// Closed-form ground-truth error resistance used by the synthetic corpus:
/// rises with local texture (standard deviation), falls once mean luminance
/// exceeds a knee. The constants are part of the dataset definition.
#[derive(Debug, Clone, Copy)]
pub struct ResistanceOracle {
    pub base: f64,
    pub texture_gain: f64,
    pub texture_scale: f64,
    pub luminance_penalty: f64,
    pub luminance_knee: f64,
    pub luminance_scale: f64,
}

impl Default for ResistanceOracle {
    fn default() -> Self {
        ResistanceOracle {
            base: 60.0,
            texture_gain: 6.0,
            texture_scale: 300.0,
            luminance_penalty: 2.0,
            luminance_knee: 600.0,
            luminance_scale: 2000.0,
        }
    }
}

impl ResistanceOracle {
    pub fn resistance(&self, mean: f64, std_dev: f64) -> f64 {
        let texture = 1.0 + self.texture_gain * std_dev / (std_dev + self.texture_scale);
        let penalty =
            1.0 + self.luminance_penalty * (mean - self.luminance_knee).max(0.0) / self.luminance_scale;
        self.base * texture / penalty
    }

    pub fn resistance_for_patch(&self, patch: &[f64]) -> f64 {
        let n = patch.len() as f64;
        let mean = patch.iter().sum::<f64>() / n;
        let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        self.resistance(mean, var.sqrt())
    }
}

/// Mixing gain of the synthetic oracle's ground-truth scores.
pub const ORACLE_MIX_GAIN: f64 = 2.0;

/// Ground-truth DMOS of a (reference, distorted) pair: 100 x mean over
/// patches of tanh(2 * delta / T*), with T* from the resistance oracle on
/// the reference patches.
pub fn oracle_dmos(
    reference: &PatchSet,
    distorted: &PatchSet,
    oracle: &ResistanceOracle,
) -> Result<f64> {
    let deltas = crate::preprocess::patch_delta(reference, distorted)?;
    let sum: f64 = reference
        .patches
        .iter()
        .zip(deltas.iter())
        .map(|(patch, &d)| (ORACLE_MIX_GAIN * d / oracle.resistance_for_patch(patch)).tanh())
        .sum();
    Ok(100.0 * sum / deltas.len() as f64)
}

/// Generation parameters for [`synth_dataset`].
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub contents: usize,
    pub levels: usize,
    pub image_size: usize,
    pub peak: f64,
    pub oracle: ResistanceOracle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            contents: 8,
            levels: 4,
            image_size: 96,
            peak: 4000.0,
            oracle: ResistanceOracle::default(),
        }
    }
}

/// Quantization step for severity `level` (1-based): the divisors shrink,
/// the steps and hence the mean error grow.
fn quant_step(peak: f64, level: usize) -> f64 {
    const DIVISORS: [f64; 8] = [160.0, 48.0, 16.0, 6.67, 3.2, 2.0, 1.5, 1.2];
    peak / DIVISORS[(level - 1).min(DIVISORS.len() - 1)]
}

fn blur_sigma(level: usize) -> f64 {
    0.6 * 2f64.powi(level as i32 - 1)
}

fn apply_quantization(img: &HdrImage, step: f64) -> HdrImage {
    let data = img.data().iter().map(|&v| (v / step).round() * step).collect();
    HdrImage::new(img.width(), img.height(), 1, data).expect("quantization preserves invariants")
}

fn apply_blur(img: &HdrImage, sigma: f64) -> HdrImage {
    let window = (2 * (3.0 * sigma).ceil() as usize + 1).min(2 * img.width().min(img.height()) - 1);
    let window = if window % 2 == 0 { window + 1 } else { window };
    let data = gaussian_blur(img.data(), img.width(), img.height(), window, sigma);
    HdrImage::new(img.width(), img.height(), 1, data).expect("blur preserves invariants")
}

/// One procedural reference: a smooth luminance ramp plus a chirped grating
/// plus band-limited noise, normalized to the configured peak.
fn synth_reference(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> HdrImage {
    let s = cfg.image_size;
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    let ramp_lo: f64 = rng.gen_range(0.0..0.3);
    let ramp_hi: f64 = rng.gen_range(0.5..1.0);
    let f0: f64 = rng.gen_range(0.01..0.03);
    let f1: f64 = rng.gen_range(0.10..0.30);
    let grating_amp: f64 = rng.gen_range(0.10..0.50);
    let along_x: bool = rng.gen();
    let noise_amp: f64 = rng.gen_range(0.08..0.30);
    let noise_sigma: f64 = rng.gen_range(1.0..3.0);

    let span = (s - 1) as f64;
    let diag = span * (ct.abs() + st.abs());
    let mut data = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let proj = ((x as f64 * ct + y as f64 * st) + diag) / (2.0 * diag);
            let ramp = ramp_lo + (ramp_hi - ramp_lo) * proj.clamp(0.0, 1.0);
            let u = if along_x { x as f64 } else { y as f64 };
            let phase = f0 * u + (f1 - f0) * u * u / (2.0 * span);
            let grating = grating_amp * 0.5 * (1.0 + (std::f64::consts::TAU * phase).sin());
            data.push(ramp + grating);
        }
    }
    let noise: Vec<f64> = (0..s * s).map(|_| rng.gen::<f64>()).collect();
    let window = 2 * (3.0 * noise_sigma).ceil() as usize + 1;
    let smooth = gaussian_blur(&noise, s, s, window, noise_sigma);
    for (d, n) in data.iter_mut().zip(smooth.iter()) {
        *d += noise_amp * n;
    }
    let max = data.iter().cloned().fold(0.0, f64::max);
    let scale = cfg.peak / max;
    let data = data.iter().map(|v| v * scale).collect();
    HdrImage::new(s, s, 1, data).expect("reference invariants")
}

use crate::util::derive_seed;

/// Generate the synthetic-oracle corpus: procedural HDR references, two
/// distortion families at `levels` severities each plus one zero-severity
/// entry per content, ground-truth DMOS from the resistance oracle, PFM
/// files and a validated manifest. Byte-identical for identical seeds.
pub fn synth_dataset(out_dir: impl AsRef<Path>, cfg: &SynthConfig, seed: u64) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if cfg.contents == 0 || cfg.levels == 0 {
        return Err(Error::invalid("contents and levels must be positive"));
    }

    let mut entries = Vec::new();
    for content in 0..cfg.contents {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, content as u64 + 1));
        let reference = synth_reference(cfg, &mut rng);
        let ref_name = format!("c{content:02}_ref.pfm");
        write_pfm(&reference, out_dir.join(&ref_name))?;
        // quantize through the PFM f32 round-trip so oracle scores are
        // computed on exactly the pixels a consumer will read back
        let reference = crate::hdr_io::read_pfm(out_dir.join(&ref_name))?;
        let ref_patches = extract_patches(&reference, 32, 32)?;
        let content_id = format!("c{content:02}");

        let push = |dist_name: &str, dist_img: &HdrImage, entries: &mut Vec<ManifestEntry>| -> Result<()> {
            write_pfm(dist_img, out_dir.join(dist_name))?;
            let dist = crate::hdr_io::read_pfm(out_dir.join(dist_name))?;
            let dist_patches = extract_patches(&dist, 32, 32)?;
            let dmos = oracle_dmos(&ref_patches, &dist_patches, &cfg.oracle)?;
            entries.push(ManifestEntry {
                reference: ref_name.clone().into(),
                distorted: dist_name.into(),
                dmos,
                content: content_id.clone(),
            });
            Ok(())
        };

        // zero severity: the reference is its own distorted version
        let dist_patches = extract_patches(&reference, 32, 32)?;
        let dmos0 = oracle_dmos(&ref_patches, &dist_patches, &cfg.oracle)?;
        entries.push(ManifestEntry {
            reference: ref_name.clone().into(),
            distorted: ref_name.clone().into(),
            dmos: dmos0,
            content: content_id.clone(),
        });

        for level in 1..=cfg.levels {
            let q = apply_quantization(&reference, quant_step(cfg.peak, level));
            push(&format!("c{content:02}_quant{level}.pfm"), &q, &mut entries)?;
            let b = apply_blur(&reference, blur_sigma(level));
            push(&format!("c{content:02}_blur{level}.pfm"), &b, &mut entries)?;
        }
    }

    let manifest = DatasetManifest {
        dmos_range: [0.0, 100.0],
        entries,
    };
    let manifest_path = out_dir.join("manifest.json");
    write_manifest(&manifest, &manifest_path)?;
    crate::hdr_io::load_manifest(&manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hdr_io::load_manifest;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn heat_colormap_endpoints() {
        assert_eq!(heat_color(0.0), [0, 0, 255]);
        assert_eq!(heat_color(0.5), [0, 255, 0]);
        assert_eq!(heat_color(1.0), [255, 0, 0]);
    }

    fn map_from(values: Vec<f64>, rows: usize, cols: usize) -> QualityMap {
        QualityMap {
            values,
            grid_rows: rows,
            grid_cols: cols,
            patch_size: 32,
            stride: 32,
            normalization: Normalization::None,
        }
    }

    #[test]
    fn normalization_is_idempotent_and_scale_covariant() {
        let v = vec![0.5, 2.0, 1.0, 0.0];
        let once = map_from(v.clone(), 2, 2).normalized_max_one();
        assert_eq!(once.values.iter().cloned().fold(0.0, f64::max), 1.0);
        let twice = once.clone().normalized_max_one();
        assert_eq!(once.values, twice.values);

        let scaled = map_from(v.iter().map(|x| 7.0 * x).collect(), 2, 2).normalized_max_one();
        for (a, b) in scaled.values.iter().zip(once.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let zeros = map_from(vec![0.0; 4], 2, 2).normalized_max_one();
        assert!(zeros.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn heatmap_ppm_layout_and_endpoint_colors() {
        let dir = tmp();
        let p = dir.path().join("m.ppm");
        let qmap = map_from(vec![0.0, 0.5, 1.0], 1, 3);
        render_heatmap(&qmap, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P6\n96 32\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let body = &bytes[header.len()..];
        assert_eq!(body.len(), 96 * 32 * 3);
        // first row: 32 blue, 32 green, 32 red pixels
        assert_eq!(&body[0..3], &[0, 0, 255]);
        assert_eq!(&body[32 * 3..32 * 3 + 3], &[0, 255, 0]);
        assert_eq!(&body[64 * 3..64 * 3 + 3], &[255, 0, 0]);
    }

    #[test]
    fn heatmap_uniform_map_is_single_color() {
        let dir = tmp();
        let p = dir.path().join("u.ppm");
        render_heatmap(&map_from(vec![3.0; 4], 2, 2), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let body = &bytes[b"P6\n64 64\n255\n".len()..];
        for px in body.chunks_exact(3) {
            assert_eq!(px, [255, 0, 0]); // max-one normalization maps all to 1
        }
    }

    #[test]
    fn grating_peak_is_exact_and_scaling_linear() {
        let g = make_grating(800, 800, 4000.0).unwrap();
        assert_eq!(g.max_value(), 4000.0);
        assert!(g.data().iter().all(|&v| (0.0..=4000.0).contains(&v)));

        let p = 950.0;
        let gp = make_grating(800, 800, p).unwrap();
        assert_eq!(gp.max_value(), p);
        for (a, b) in gp.data().iter().zip(g.data()) {
            assert!((a - b * (p / 4000.0)).abs() <= 1e-12 * p);
        }

        // deterministic
        let g2 = make_grating(800, 800, 4000.0).unwrap();
        assert_eq!(g.data(), g2.data());

        assert!(make_grating(0, 10, 100.0).is_err());
        assert!(make_grating(10, 10, 0.0).is_err());
    }

    #[test]
    fn grating_profile_formula_at_coordinates() {
        // x = 0, y = height-1: phase 0 -> sin 0 -> 0.5 * (1 + 0) * 1.0
        assert!((grating_profile(0, 799, 800, 800) - 0.5).abs() < 1e-15);
        // amplitude ramp at y = 0 is 0.05
        assert!((grating_profile(0, 0, 800, 800) - 0.5 * 0.05).abs() < 1e-15);
        // frequency grows along x: count zero crossings in two windows
        let slice = |x0: usize| -> usize {
            (x0..x0 + 100)
                .map(|x| grating_profile(x, 799, 800, 800) - 0.25)
                .collect::<Vec<_>>()
                .windows(2)
                .filter(|w| w[0].signum() != w[1].signum())
                .count()
        };
        assert!(slice(600) > slice(0));
    }

    #[test]
    fn resistance_oracle_trends() {
        let oracle = ResistanceOracle::default();
        // rises with texture
        assert!(oracle.resistance(100.0, 400.0) > oracle.resistance(100.0, 50.0));
        // falls with luminance beyond the knee
        assert!(oracle.resistance(3000.0, 200.0) < oracle.resistance(500.0, 200.0));
        // flat below the knee
        assert_eq!(oracle.resistance(100.0, 200.0), oracle.resistance(500.0, 200.0));
        assert!(oracle.resistance(4000.0, 0.0) > 0.0);
    }

    #[test]
    fn synth_dataset_is_valid_deterministic_and_severity_monotone() {
        let dir = tmp();
        let cfg = SynthConfig {
            contents: 2,
            levels: 3,
            image_size: 64,
            ..SynthConfig::default()
        };
        let manifest = synth_dataset(dir.path().join("a"), &cfg, 7).unwrap();
        assert_eq!(manifest.entries.len(), 2 * (1 + 2 * 3));
        manifest.validate(true).unwrap();

        // zero-severity entries score exactly zero
        for e in &manifest.entries {
            if e.reference == e.distorted {
                assert_eq!(e.dmos, 0.0);
            }
        }

        // oracle DMOS strictly increases with severity per content and family
        for content in manifest.content_ids() {
            for family in ["quant", "blur"] {
                let scores: Vec<f64> = manifest
                    .entries
                    .iter()
                    .filter(|e| {
                        e.content == content
                            && e.distorted.to_string_lossy().contains(family)
                    })
                    .map(|e| e.dmos)
                    .collect();
                assert_eq!(scores.len(), 3);
                for w in scores.windows(2) {
                    assert!(w[1] > w[0], "{family} not monotone: {scores:?}");
                }
            }
        }

        // byte-identical regeneration
        synth_dataset(dir.path().join("b"), &cfg, 7).unwrap();
        let names: Vec<String> = {
            let mut v: Vec<String> = fs::read_dir(dir.path().join("a"))
                .unwrap()
                .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .collect();
            v.sort();
            v
        };
        for name in names {
            let a = fs::read(dir.path().join("a").join(&name)).unwrap();
            let b = fs::read(dir.path().join("b").join(&name)).unwrap();
            assert_eq!(a, b, "{name} differs across regenerations");
        }

        // and a different seed changes the data
        let other = synth_dataset(dir.path().join("c"), &cfg, 8).unwrap();
        assert_ne!(
            other.entries.iter().map(|e| e.dmos).collect::<Vec<_>>(),
            manifest.entries.iter().map(|e| e.dmos).collect::<Vec<_>>()
        );

        // loadable from disk via the standard path
        let loaded = load_manifest(dir.path().join("a").join("manifest.json")).unwrap();
        assert_eq!(loaded.entries.len(), manifest.entries.len());
    }
}
