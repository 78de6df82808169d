//! Perceptual-domain transforms, feature maps, patch extraction, and
//! ground-truth patch noise.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdr_io::HdrImage;
use crate::nn::Tensor;

/// Default local-window parameters for the Gaussian moments, following the
/// usual natural-scene-statistics convention.
pub const GAUSS_WINDOW: usize = 7;
pub const GAUSS_SIGMA: f64 = 7.0 / 6.0;

/// Stabilizing constant for the MSCN channel that feeds the network input;
/// small enough not to influence the coefficient values.
pub const MSCN_STABILIZER: f64 = 0.01;

/// Default patch geometry: 32x32 blocks, one per visual degree under the
/// standard viewing setup, tiled without overlap.
pub const PATCH_SIZE: usize = 32;
pub const PATCH_STRIDE: usize = 32;

// ---------------------------------------------------------------------------
// Perceptually uniform encoding
// ---------------------------------------------------------------------------

/// Monotone log-luminance -> PU lookup curve.
///
/// Knots map log10 luminance (cd/m²) to PU code values and must strictly
/// increase in both coordinates while covering at least [1e-5, 1e4] cd/m².
#[derive(Debug, Clone)]
pub struct PuCurve {
    knots: Vec<(f64, f64)>,
}

impl PuCurve {
    pub fn from_knots(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::invalid(format!(
                "PU curve needs at least 2 knots, got {}",
                knots.len()
            )));
        }
        for w in knots.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return Err(Error::invalid(format!(
                    "PU curve knots must strictly increase: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        if knots.iter().any(|k| !k.0.is_finite() || !k.1.is_finite() || k.1 < 0.0) {
            return Err(Error::invalid("PU curve values must be finite and >= 0"));
        }
        let (first, last) = (knots[0].0, knots[knots.len() - 1].0);
        if first > -5.0 + 1e-9 || last < 4.0 - 1e-9 {
            return Err(Error::invalid(format!(
                "PU curve must cover [1e-5, 1e4] cd/m²; got log10 range [{first}, {last}]"
            )));
        }
        Ok(PuCurve { knots })
    }

    /// The table shipped in-repo: a threshold-integration fit spanning
    /// 1e-5 .. 1e4 cd/m², scaled so the 0.1 .. 80 cd/m² span covers 255
    /// code values.
    pub fn builtin() -> Self {
        Self::parse(include_str!("../data/pu_curve.txt"), Path::new("builtin"))
            .expect("builtin PU curve is valid")
    }

    /// Load a two-column "log10_luminance pu_value" text file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut knots = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<f64> {
                tok.and_then(|t| t.parse().ok()).ok_or_else(|| {
                    Error::format(path, format!("bad PU curve line {}", lineno + 1), None)
                })
            };
            knots.push((parse(it.next())?, parse(it.next())?));
        }
        Self::from_knots(knots)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// Encode one luminance value: linear interpolation in (log10 L, PU)
    /// space, clamped to the covered range at both ends.
    pub fn encode(&self, luminance: f64) -> f64 {
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        let x = if luminance > 0.0 {
            luminance.log10()
        } else {
            first.0
        };
        if x <= first.0 {
            return first.1;
        }
        if x >= last.0 {
            return last.1;
        }
        let hi = self.knots.partition_point(|k| k.0 < x).max(1);
        let (x0, y0) = self.knots[hi - 1];
        let (x1, y1) = self.knots[hi];
        let t = (x - x0) / (x1 - x0);
        y0 + t * (y1 - y0)
    }
}

/// PU-encode a single-channel luminance image.
pub fn pu_encode(lum: &HdrImage, curve: &PuCurve) -> Result<HdrImage> {
    require_single_channel(lum, "pu_encode")?;
    let data = lum.data().iter().map(|&l| curve.encode(l)).collect();
    HdrImage::new(lum.width(), lum.height(), 1, data)
}

fn require_single_channel(img: &HdrImage, what: &str) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::invalid(format!(
            "{what} expects a single-channel image, got {} channels",
            img.channels()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tone mapping operators
// ---------------------------------------------------------------------------

/// Adaptive logarithmic compression with a bias-controlled base.
///
/// out = ld_max/100 / log10(1 + L_max) * ln(1 + L) / ln(2 + 8 (L/L_max)^(ln b / ln 0.5))
pub fn tmo_drago(lum: &HdrImage, bias: f64, ld_max: f64) -> Result<HdrImage> {
    require_single_channel(lum, "tmo_drago")?;
    if !(bias > 0.0 && bias <= 1.0) {
        return Err(Error::invalid(format!("drago bias must be in (0, 1], got {bias}")));
    }
    let l_max = lum.max_value();
    if l_max <= 0.0 {
        return Err(Error::invalid("tmo_drago: all-zero image"));
    }
    let bias_exp = bias.ln() / 0.5f64.ln();
    let front = ld_max * 0.01 / (l_max + 1.0).log10();
    let data = lum
        .data()
        .iter()
        .map(|&l| {
            let base = 2.0 + 8.0 * (l / l_max).powf(bias_exp);
            front * (l + 1.0).ln() / base.ln()
        })
        .collect();
    HdrImage::new(lum.width(), lum.height(), 1, data)
}

/// Additive guard inside the log used by the Reinhard global operator's
/// log-average luminance.
pub const LOG_AVG_DELTA: f64 = 1e-6;

/// Geometric mean of `delta + L` over the image.
pub fn log_average(lum: &HdrImage) -> f64 {
    let sum: f64 = lum.data().iter().map(|&l| (LOG_AVG_DELTA + l).ln()).sum();
    (sum / lum.data().len() as f64).exp()
}

/// Photographic operator, global variant: scale to the key value, then
/// compress with L/(1+L).
pub fn tmo_reinhard02(lum: &HdrImage, key: f64) -> Result<HdrImage> {
    require_single_channel(lum, "tmo_reinhard02")?;
    if key <= 0.0 {
        return Err(Error::invalid(format!("key must be positive, got {key}")));
    }
    if lum.max_value() <= 0.0 {
        return Err(Error::invalid(
            "tmo_reinhard02: all-zero image (log-average undefined)",
        ));
    }
    let log_avg = log_average(lum);
    let data = lum
        .data()
        .iter()
        .map(|&l| {
            let scaled = key * l / log_avg;
            scaled / (1.0 + scaled)
        })
        .collect();
    HdrImage::new(lum.width(), lum.height(), 1, data)
}

/// Parameters of the photoreceptor-style operator.
#[derive(Debug, Clone, Copy)]
pub struct Reinhard05Params {
    /// Brightness control; the adaptation multiplier is exp(-brightness).
    pub brightness: f64,
    /// Blend between per-pixel (1.0) and global-mean (0.0) adaptation.
    pub light_adaptation: f64,
}

impl Default for Reinhard05Params {
    fn default() -> Self {
        Reinhard05Params {
            brightness: 0.0,
            light_adaptation: 1.0,
        }
    }
}

/// The photoreceptor sigmoid V = I / (I + sigma), with V(0, 0) = 0.
pub fn photoreceptor_response(intensity: f64, sigma: f64) -> f64 {
    if intensity + sigma == 0.0 {
        0.0
    } else {
        intensity / (intensity + sigma)
    }
}

/// Photoreceptor-style sigmoid with image-adaptive semi-saturation
/// sigma = (f * Ia)^m, where Ia blends pixel and mean luminance and m is
/// derived from the image key.
pub fn tmo_reinhard05(lum: &HdrImage, params: Reinhard05Params) -> Result<HdrImage> {
    require_single_channel(lum, "tmo_reinhard05")?;
    let a = params.light_adaptation;
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::invalid(format!(
            "light_adaptation must be in [0, 1], got {a}"
        )));
    }
    let l_max = lum.max_value();
    if l_max <= 0.0 {
        return Err(Error::invalid("tmo_reinhard05: all-zero image"));
    }
    let n = lum.data().len() as f64;
    let mean = lum.data().iter().sum::<f64>() / n;
    let eps = 1e-9;
    let log_mean = lum.data().iter().map(|&l| (l + eps).ln()).sum::<f64>() / n;
    let log_max = (l_max + eps).ln();
    let log_min = (lum.data().iter().cloned().fold(f64::INFINITY, f64::min) + eps).ln();
    let key = if log_max > log_min {
        (log_max - log_mean) / (log_max - log_min)
    } else {
        0.5
    };
    let m = 0.3 + 0.7 * key.powf(1.4);
    let f = (-params.brightness).exp();

    let data = lum
        .data()
        .iter()
        .map(|&l| {
            let ia = a * l + (1.0 - a) * mean;
            let sigma = (f * ia).powf(m);
            photoreceptor_response(l, sigma)
        })
        .collect();
    HdrImage::new(lum.width(), lum.height(), 1, data)
}

/// Preprocessing applied before patch extraction; the model's default path
/// is linear luminance, the others exist for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreprocessMode {
    Linear,
    Pu,
    Drago,
    Reinhard02,
    Reinhard05,
}

impl PreprocessMode {
    pub fn apply(&self, lum: &HdrImage) -> Result<HdrImage> {
        match self {
            PreprocessMode::Linear => Ok(lum.clone()),
            PreprocessMode::Pu => pu_encode(lum, &PuCurve::builtin()),
            PreprocessMode::Drago => tmo_drago(lum, 0.85, 100.0),
            PreprocessMode::Reinhard02 => tmo_reinhard02(lum, 0.18),
            PreprocessMode::Reinhard05 => tmo_reinhard05(lum, Reinhard05Params::default()),
        }
    }
}

impl FromStr for PreprocessMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(PreprocessMode::Linear),
            "pu" => Ok(PreprocessMode::Pu),
            "drago" => Ok(PreprocessMode::Drago),
            "reinhard02" => Ok(PreprocessMode::Reinhard02),
            "reinhard05" => Ok(PreprocessMode::Reinhard05),
            other => Err(Error::invalid(format!("unknown preprocessing mode {other}"))),
        }
    }
}

impl std::fmt::Display for PreprocessMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PreprocessMode::Linear => "linear",
            PreprocessMode::Pu => "pu",
            PreprocessMode::Drago => "drago",
            PreprocessMode::Reinhard02 => "reinhard02",
            PreprocessMode::Reinhard05 => "reinhard05",
        };
        f.write_str(s)
    }
}

// ---------------------------------------------------------------------------
// Gaussian local moments, MSCN and variance maps
// ---------------------------------------------------------------------------

/// A 2-D scalar field; unlike [`HdrImage`] values may be negative
/// (mean-subtracted coefficients are).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Normalized 1-D Gaussian taps for an odd window.
pub fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    assert!(window % 2 == 1, "window must be odd");
    let half = (window / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Mirror index about the border pixel (reflect-101): -1 -> 1, n -> n-2.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // at most two folds needed while the kernel half-width is < n
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// Separable Gaussian filter with reflect-101 borders.
fn gauss_filter(data: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &k) in kernel.iter().enumerate() {
                acc += k * row[reflect(x as isize + j as isize - half, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &k) in kernel.iter().enumerate() {
                acc += k * tmp[reflect(y as isize + j as isize - half, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Separable Gaussian blur of a flat field (reflect-101 borders). The
/// window must be odd with half-width below both dimensions.
pub fn gaussian_blur(data: &[f64], w: usize, h: usize, window: usize, sigma: f64) -> Vec<f64> {
    assert!(window / 2 < w.min(h), "blur window too large for field");
    let kernel = gaussian_kernel(window, sigma);
    gauss_filter(data, w, h, &kernel)
}

fn check_window(window: usize, w: usize, h: usize) -> Result<()> {
    if window % 2 == 0 || window == 0 {
        return Err(Error::invalid(format!("window must be odd, got {window}")));
    }
    if window > w.min(h) {
        return Err(Error::invalid(format!(
            "window {window} exceeds image dims {w}x{h}"
        )));
    }
    Ok(())
}

/// Gaussian-weighted local moments of a flat field. Returns (mean, variance)
/// with the variance clamped at zero.
///
/// Both moments are computed on globally mean-centered data (shift does not
/// change the variance), so a constant field yields exact zeros instead of
/// rounding residue.
pub(crate) fn local_moments(
    data: &[f64],
    w: usize,
    h: usize,
    window: usize,
    sigma_w: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (mu_c, var, shift) = centered_moments(data, w, h, window, sigma_w);
    let mu = mu_c.iter().map(|&m| m + shift).collect();
    (mu, var)
}

/// Moments of `data - mean(data)` plus the shift itself.
fn centered_moments(
    data: &[f64],
    w: usize,
    h: usize,
    window: usize,
    sigma_w: f64,
) -> (Vec<f64>, Vec<f64>, f64) {
    let shift = data.iter().sum::<f64>() / data.len() as f64;
    let centered: Vec<f64> = data.iter().map(|&v| v - shift).collect();
    let kernel = gaussian_kernel(window, sigma_w);
    let mu_c = gauss_filter(&centered, w, h, &kernel);
    let sq: Vec<f64> = centered.iter().map(|&v| v * v).collect();
    let ex2 = gauss_filter(&sq, w, h, &kernel);
    let var: Vec<f64> = ex2
        .iter()
        .zip(mu_c.iter())
        .map(|(&e2, &m)| (e2 - m * m).max(0.0))
        .collect();
    (mu_c, var, shift)
}

pub(crate) fn mscn_on(
    data: &[f64],
    w: usize,
    h: usize,
    window: usize,
    sigma_w: f64,
    c: f64,
) -> Vec<f64> {
    let (mu_c, var, shift) = centered_moments(data, w, h, window, sigma_w);
    data.iter()
        .zip(mu_c.iter().zip(var.iter()))
        .map(|(&v, (&m, &s2))| {
            let denom = s2.sqrt() + c;
            if denom == 0.0 {
                0.0 // locally constant region with c = 0
            } else {
                ((v - shift) - m) / denom
            }
        })
        .collect()
}

/// Mean-subtracted contrast-normalized coefficients
/// (I - mu) / (sigma + c) with Gaussian-window local moments.
pub fn mscn_map(img: &HdrImage, window: usize, sigma_w: f64, c: f64) -> Result<Field> {
    require_single_channel(img, "mscn_map")?;
    check_window(window, img.width(), img.height())?;
    if c < 0.0 {
        return Err(Error::invalid(format!("stabilizer must be >= 0, got {c}")));
    }
    Ok(Field {
        width: img.width(),
        height: img.height(),
        data: mscn_on(img.data(), img.width(), img.height(), window, sigma_w, c),
    })
}

/// Local variance under the same Gaussian weighting.
pub fn variance_map(img: &HdrImage, window: usize, sigma_w: f64) -> Result<Field> {
    require_single_channel(img, "variance_map")?;
    check_window(window, img.width(), img.height())?;
    let (_, var) = local_moments(img.data(), img.width(), img.height(), window, sigma_w);
    Ok(Field {
        width: img.width(),
        height: img.height(),
        data: var,
    })
}

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

/// Fixed-size luminance patches plus their grid coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub stride: usize,
    pub source_width: usize,
    pub source_height: usize,
    /// (row, col) top-left pixel coordinates, strictly row-major.
    pub coords: Vec<(usize, usize)>,
    /// One flat patch_size x patch_size buffer per coordinate.
    pub patches: Vec<Vec<f64>>,
}

impl PatchSet {
    /// Grid extent as (rows, cols).
    pub fn grid_dims(&self) -> (usize, usize) {
        let rows = (self.source_height - self.patch_size) / self.stride + 1;
        let cols = (self.source_width - self.patch_size) / self.stride + 1;
        (rows, cols)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    fn same_grid(&self, other: &PatchSet) -> bool {
        self.patch_size == other.patch_size
            && self.stride == other.stride
            && self.source_width == other.source_width
            && self.source_height == other.source_height
            && self.coords == other.coords
    }
}

/// Tile a single-channel image into fully contained patches; trailing pixels
/// that do not fill a patch are dropped.
pub fn extract_patches(img: &HdrImage, size: usize, stride: usize) -> Result<PatchSet> {
    require_single_channel(img, "extract_patches")?;
    if size == 0 || stride == 0 {
        return Err(Error::invalid("patch size and stride must be positive"));
    }
    let (w, h) = (img.width(), img.height());
    if size > w || size > h {
        return Err(Error::invalid(format!(
            "image {w}x{h} smaller than one {size}x{size} patch"
        )));
    }
    let mut coords = Vec::new();
    let mut patches = Vec::new();
    let data = img.data();
    let mut row = 0;
    while row + size <= h {
        let mut col = 0;
        while col + size <= w {
            let mut patch = Vec::with_capacity(size * size);
            for y in row..row + size {
                patch.extend_from_slice(&data[y * w + col..y * w + col + size]);
            }
            coords.push((row, col));
            patches.push(patch);
            col += stride;
        }
        row += stride;
    }
    Ok(PatchSet {
        patch_size: size,
        stride,
        source_width: w,
        source_height: h,
        coords,
        patches,
    })
}

/// Ground-truth patch noise: mean absolute luminance difference per patch.
pub fn patch_delta(reference: &PatchSet, distorted: &PatchSet) -> Result<Vec<f64>> {
    if !reference.same_grid(distorted) {
        return Err(Error::invalid(
            "patch_delta: reference and distorted grids differ",
        ));
    }
    Ok(reference
        .patches
        .iter()
        .zip(distorted.patches.iter())
        .map(|(a, b)| {
            let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
            sum / a.len() as f64
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Feature stacks
// ---------------------------------------------------------------------------

/// The three raw channels feeding the resistance network's augmented input
/// layer: luminance, local variance, and MSCN coefficients.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub size: usize,
    pub lum: Vec<f64>,
    pub var: Vec<f64>,
    pub mscn: Vec<f64>,
}

impl FeatureStack {
    /// Stack as a 3 x S x S tensor in (lum, var, mscn) channel order.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(3 * self.size * self.size);
        data.extend_from_slice(&self.lum);
        data.extend_from_slice(&self.var);
        data.extend_from_slice(&self.mscn);
        Tensor::from_vec(&[3, self.size, self.size], data).expect("stack shape")
    }
}

/// Compute the (lum, variance, MSCN) channels of one patch, with the default
/// Gaussian window and the network-input stabilizer.
pub fn feature_stack(patch: &[f64], size: usize) -> FeatureStack {
    debug_assert_eq!(patch.len(), size * size);
    let (_, var) = local_moments(patch, size, size, GAUSS_WINDOW, GAUSS_SIGMA);
    let mscn = mscn_on(patch, size, size, GAUSS_WINDOW, GAUSS_SIGMA, MSCN_STABILIZER);
    FeatureStack {
        size,
        lum: patch.to_vec(),
        var,
        mscn,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(w: usize, h: usize, data: Vec<f64>) -> HdrImage {
        HdrImage::new(w, h, 1, data).unwrap()
    }

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} != {b} (tol {tol})");
    }

    // --- PU ---

    #[test]
    fn pu_builtin_is_valid_and_monotone() {
        let curve = PuCurve::builtin();
        assert!(curve.knots().len() >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let l1 = 10f64.powf(rng.gen_range(-6.0..5.0));
            let l2 = 10f64.powf(rng.gen_range(-6.0..5.0));
            let (lo, hi) = if l1 < l2 { (l1, l2) } else { (l2, l1) };
            assert!(curve.encode(lo) <= curve.encode(hi));
        }
    }

    #[test]
    fn pu_knot_values_are_exact() {
        let curve = PuCurve::builtin();
        for &(x, y) in curve.knots() {
            approx(curve.encode(10f64.powf(x)), y, 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn pu_log_midpoint_is_mean_of_knot_values() {
        let curve = PuCurve::builtin();
        let ks = curve.knots();
        for i in [0, ks.len() / 2, ks.len() - 2] {
            let (x0, y0) = ks[i];
            let (x1, y1) = ks[i + 1];
            let mid = 10f64.powf(0.5 * (x0 + x1));
            approx(curve.encode(mid), 0.5 * (y0 + y1), 1e-9 * (1.0 + y1));
        }
    }

    #[test]
    fn pu_rejects_bad_curves() {
        assert!(PuCurve::from_knots(vec![(-5.0, 0.0)]).is_err());
        assert!(PuCurve::from_knots(vec![(-5.0, 1.0), (4.0, 1.0)]).is_err());
        assert!(PuCurve::from_knots(vec![(-5.0, 0.0), (2.0, 10.0)]).is_err()); // coverage
        assert!(PuCurve::from_knots(vec![(-5.0, 0.0), (4.0, 10.0)]).is_ok());
    }

    #[test]
    fn pu_encode_clamps_below_coverage() {
        let curve = PuCurve::from_knots(vec![(-5.0, 0.5), (4.0, 10.0)]).unwrap();
        assert_eq!(curve.encode(0.0), 0.5);
        assert_eq!(curve.encode(1e-9), 0.5);
    }

    // --- Drago ---

    #[test]
    fn drago_constant_image_stays_constant() {
        let img = gray(3, 2, vec![250.0; 6]);
        let out = tmo_drago(&img, 0.85, 100.0).unwrap();
        let v = out.data()[0];
        assert!(v > 0.0 && out.data().iter().all(|&x| x == v));
    }

    #[test]
    fn drago_max_pixel_matches_closed_form() {
        let l_max = 3750.0;
        let img = gray(2, 1, vec![100.0, l_max]);
        let ld_max = 100.0;
        let out = tmo_drago(&img, 0.85, ld_max).unwrap();
        // at L = L_max the bias power term is 1, so the base is ln(2+8) = ln 10
        let expected = ld_max * 0.01 / (l_max + 1.0).log10() * (l_max + 1.0).ln() / 10f64.ln();
        assert!(expected.is_finite() && expected > 0.0);
        approx(out.data()[1], expected, 1e-12);
    }

    #[test]
    fn drago_rejects_all_zero() {
        assert!(tmo_drago(&gray(2, 2, vec![0.0; 4]), 0.85, 100.0).is_err());
    }

    // --- Reinhard02 ---

    #[test]
    fn reinhard02_constant_matches_formula() {
        let c = 320.0;
        let key = 0.18;
        let img = gray(4, 4, vec![c; 16]);
        let out = tmo_reinhard02(&img, key).unwrap();
        // log-average of a constant image is delta + c up to fp rounding
        let scaled = key * c / (LOG_AVG_DELTA + c);
        let expected = scaled / (1.0 + scaled);
        for &v in out.data() {
            approx(v, expected, 1e-12);
        }
    }

    #[test]
    fn reinhard02_bounded_below_one_and_linear_in_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..64).map(|_| rng.gen::<f64>() * 4000.0).collect();
        let img = gray(8, 8, data);
        let out1 = tmo_reinhard02(&img, 0.18).unwrap();
        let out2 = tmo_reinhard02(&img, 0.36).unwrap();
        for (&v1, &v2) in out1.data().iter().zip(out2.data()) {
            assert!((0.0..1.0).contains(&v1));
            // invert the compression: s = v/(1-v) recovers the scaled value
            let s1 = v1 / (1.0 - v1);
            let s2 = v2 / (1.0 - v2);
            approx(s2, 2.0 * s1, 1e-9 * (1.0 + s2));
        }
        assert!(tmo_reinhard02(&gray(2, 2, vec![0.0; 4]), 0.18).is_err());
    }

    // --- Reinhard05 ---

    #[test]
    fn reinhard05_bounds_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..64).map(|_| rng.gen::<f64>() * 4000.0).collect();
        let out = tmo_reinhard05(&gray(8, 8, data), Reinhard05Params::default()).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        approx(photoreceptor_response(7.5, 7.5), 0.5, 0.0);
        assert!(tmo_reinhard05(&gray(2, 2, vec![0.0; 4]), Reinhard05Params::default()).is_err());
    }

    #[test]
    fn tmos_and_pu_are_monotone_on_sorted_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut vals: Vec<f64> = (0..256).map(|_| rng.gen::<f64>() * 4000.0).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let img = gray(16, 16, vals);

        let curve = PuCurve::builtin();
        let checks: Vec<Vec<f64>> = vec![
            pu_encode(&img, &curve).unwrap().into_data(),
            tmo_drago(&img, 0.85, 100.0).unwrap().into_data(),
            tmo_reinhard02(&img, 0.18).unwrap().into_data(),
            tmo_reinhard05(
                &img,
                Reinhard05Params {
                    brightness: 0.0,
                    light_adaptation: 0.0, // fixed global adaptation
                },
            )
            .unwrap()
            .into_data(),
            tmo_reinhard05(&img, Reinhard05Params::default())
                .unwrap()
                .into_data(),
        ];
        for out in checks {
            for w in out.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-12,
                    "monotonicity violated: {} then {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    // --- MSCN / variance ---

    #[test]
    fn mscn_constant_image_is_zero() {
        let img = gray(9, 9, vec![123.0; 81]);
        let m = mscn_map(&img, 7, GAUSS_SIGMA, 0.0).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
        let m2 = mscn_map(&img, 7, GAUSS_SIGMA, 0.01).unwrap();
        assert!(m2.data.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn mscn_scale_invariant_with_zero_stabilizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..100).map(|_| rng.gen::<f64>() * 100.0).collect();
        let img = gray(10, 10, data.clone());
        let scaled = gray(10, 10, data.iter().map(|v| 37.0 * v).collect());
        let a = mscn_map(&img, 7, GAUSS_SIGMA, 0.0).unwrap();
        let b = mscn_map(&scaled, 7, GAUSS_SIGMA, 0.0).unwrap();
        for (&x, &y) in a.data.iter().zip(b.data.iter()) {
            approx(x, y, 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn mscn_stabilizer_vanishes_at_large_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..100).map(|_| 1.0 + rng.gen::<f64>()).collect();
        let big = gray(10, 10, data.iter().map(|v| 1000.0 * v).collect());
        let exact = mscn_map(&big, 7, GAUSS_SIGMA, 0.0).unwrap();
        let stab = mscn_map(&big, 7, GAUSS_SIGMA, 0.01).unwrap();
        for (&e, &s) in exact.data.iter().zip(stab.data.iter()) {
            if e.abs() > 1e-6 {
                assert!(((s - e) / e).abs() < 0.01, "{s} vs {e}");
            }
        }
    }

    #[test]
    fn mscn_center_value_matches_brute_force_moments() {
        // single bright pixel on a zero background
        let mut data = vec![0.0; 81];
        data[4 * 9 + 4] = 1.0;
        let img = gray(9, 9, data.clone());
        let c = 0.25;
        let m = mscn_map(&img, 7, GAUSS_SIGMA, c).unwrap();

        // brute-force Gaussian moments at the center from the explicit
        // 2-D (outer-product) kernel; the 7x7 window fits without padding
        let k1 = gaussian_kernel(7, GAUSS_SIGMA);
        let mut mu = 0.0;
        let mut ex2 = 0.0;
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                let wgt = k1[(dy + 3) as usize] * k1[(dx + 3) as usize];
                let v = data[((4 + dy) * 9 + 4 + dx) as usize];
                mu += wgt * v;
                ex2 += wgt * v * v;
            }
        }
        let sigma = (ex2 - mu * mu).max(0.0).sqrt();
        let expected = (1.0 - mu) / (sigma + c);
        approx(m.data[4 * 9 + 4], expected, 1e-12);
    }

    #[test]
    fn variance_constant_zero_and_quadratic_scaling() {
        let img = gray(9, 9, vec![55.0; 81]);
        let v = variance_map(&img, 7, GAUSS_SIGMA).unwrap();
        assert!(v.data.iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..81).map(|_| rng.gen::<f64>()).collect();
        let base = variance_map(&gray(9, 9, data.clone()), 7, GAUSS_SIGMA).unwrap();
        let a = 9.0;
        let scaled =
            variance_map(&gray(9, 9, data.iter().map(|v| a * v).collect()), 7, GAUSS_SIGMA)
                .unwrap();
        for (&s, &b) in scaled.data.iter().zip(base.data.iter()) {
            approx(s, a * a * b, 1e-9 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn variance_checkerboard_positive_interior() {
        let data: Vec<f64> = (0..144)
            .map(|i| {
                let (x, y) = (i % 12, i / 12);
                ((x + y) % 2) as f64
            })
            .collect();
        let v = variance_map(&gray(12, 12, data), 7, GAUSS_SIGMA).unwrap();
        for y in 3..9 {
            for x in 3..9 {
                assert!(v.data[y * 12 + x] > 0.0);
            }
        }

        // brute-force weighted moments at one interior point
        let k1 = gaussian_kernel(7, GAUSS_SIGMA);
        let (cx, cy) = (5usize, 6usize);
        let mut mu = 0.0;
        let mut ex2 = 0.0;
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                let wgt = k1[(dy + 3) as usize] * k1[(dx + 3) as usize];
                let px = ((cx as i32 + dx) + (cy as i32 + dy)) % 2;
                let val = px as f64;
                mu += wgt * val;
                ex2 += wgt * val * val;
            }
        }
        let expected = ex2 - mu * mu;
        approx(v.data[cy * 12 + cx], expected, 1e-12);
    }

    #[test]
    fn window_preconditions() {
        let img = gray(5, 5, vec![1.0; 25]);
        assert!(mscn_map(&img, 7, GAUSS_SIGMA, 0.01).is_err()); // window > dims
        assert!(mscn_map(&img, 4, GAUSS_SIGMA, 0.01).is_err()); // even window
        assert!(mscn_map(&img, 3, GAUSS_SIGMA, -0.1).is_err()); // negative c
    }

    // --- patches ---

    #[test]
    fn patch_grid_counts_and_coords() {
        let img = gray(64, 64, vec![0.0; 64 * 64]);
        let p = extract_patches(&img, 32, 32).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.coords, vec![(0, 0), (0, 32), (32, 0), (32, 32)]);
        assert_eq!(p.grid_dims(), (2, 2));

        let img70 = gray(70, 70, vec![0.0; 70 * 70]);
        let p70 = extract_patches(&img70, 32, 32).unwrap();
        assert_eq!(p70.len(), 4); // 6-pixel remainder dropped

        let p16 = extract_patches(&img, 32, 16).unwrap();
        assert_eq!(p16.len(), 9); // floor((64-32)/16)+1 = 3 per axis

        assert!(extract_patches(&gray(16, 16, vec![0.0; 256]), 32, 32).is_err());
    }

    #[test]
    fn patch_coords_independent_of_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = gray(70, 40, (0..2800).map(|_| rng.gen()).collect());
        let b = gray(70, 40, (0..2800).map(|_| rng.gen()).collect());
        let pa = extract_patches(&a, 32, 16).unwrap();
        let pb = extract_patches(&b, 32, 16).unwrap();
        assert_eq!(pa.coords, pb.coords);
    }

    #[test]
    fn patch_delta_examples() {
        let zero = gray(64, 64, vec![0.0; 4096]);
        let pz = extract_patches(&zero, 32, 32).unwrap();
        assert!(patch_delta(&pz, &pz).unwrap().iter().all(|&d| d == 0.0));

        let a = gray(64, 64, vec![100.0; 4096]);
        let b = gray(64, 64, vec![90.0; 4096]);
        let deltas = patch_delta(
            &extract_patches(&a, 32, 32).unwrap(),
            &extract_patches(&b, 32, 32).unwrap(),
        )
        .unwrap();
        assert!(deltas.iter().all(|&d| (d - 10.0).abs() < 1e-12));

        // 2x2 "patch": direct enumeration of |-1, 1, -1, 1|
        let r = gray(2, 2, vec![0.0, 2.0, 4.0, 6.0]);
        let d = gray(2, 2, vec![1.0, 1.0, 5.0, 5.0]);
        let dd = patch_delta(
            &extract_patches(&r, 2, 2).unwrap(),
            &extract_patches(&d, 2, 2).unwrap(),
        )
        .unwrap();
        assert_eq!(dd, vec![1.0]);

        // grid mismatch
        let other = extract_patches(&gray(64, 64, vec![0.0; 4096]), 32, 16).unwrap();
        assert!(patch_delta(&pz, &other).is_err());
    }

    #[test]
    fn patch_delta_symmetry_and_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mk = |rng: &mut ChaCha8Rng| {
            gray(64, 32, (0..2048).map(|_| rng.gen::<f64>() * 100.0).collect())
        };
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let (pa, pb, pc) = (
            extract_patches(&a, 32, 32).unwrap(),
            extract_patches(&b, 32, 32).unwrap(),
            extract_patches(&c, 32, 32).unwrap(),
        );
        let ab = patch_delta(&pa, &pb).unwrap();
        let ba = patch_delta(&pb, &pa).unwrap();
        assert_eq!(ab, ba);
        let ac = patch_delta(&pa, &pc).unwrap();
        let bc = patch_delta(&pb, &pc).unwrap();
        for k in 0..ac.len() {
            assert!(ac[k] <= ab[k] + bc[k] + 1e-12);
        }
    }

    // --- feature stacks ---

    #[test]
    fn feature_stack_constant_patch() {
        let patch = vec![777.0; 32 * 32];
        let fs = feature_stack(&patch, 32);
        assert_eq!(fs.lum.len(), 1024);
        assert_eq!(fs.var.len(), 1024);
        assert_eq!(fs.mscn.len(), 1024);
        assert!(fs.lum.iter().all(|&v| v == 777.0));
        assert!(fs.var.iter().all(|&v| v == 0.0));
        assert!(fs.mscn.iter().all(|&v| v.abs() < 1e-9));
        assert_eq!(fs.to_tensor().shape(), &[3, 32, 32]);
    }

    #[test]
    fn feature_stack_mscn_matches_standalone_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let patch: Vec<f64> = (0..1024).map(|_| rng.gen::<f64>() * 4000.0).collect();
        let fs = feature_stack(&patch, 32);
        let img = gray(32, 32, patch);
        let standalone = mscn_map(&img, GAUSS_WINDOW, GAUSS_SIGMA, MSCN_STABILIZER).unwrap();
        assert_eq!(fs.mscn, standalone.data);
        let var = variance_map(&img, GAUSS_WINDOW, GAUSS_SIGMA).unwrap();
        assert_eq!(fs.var, var.data);
    }
}
