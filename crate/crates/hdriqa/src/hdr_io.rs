//! HDR image file formats (PFM, Radiance RGBE), luminance extraction, and
//! dataset manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rec.709 luma coefficients for the RGB -> Y conversion.
pub const LUMA_R: f64 = 0.2126;
pub const LUMA_G: f64 = 0.7152;
pub const LUMA_B: f64 = 0.0722;

/// A 2-D array of linear radiance triplets or luminance scalars.
/// Values are treated as absolute luminance in cd/m² by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>, // row-major, channel-interleaved
}

impl HdrImage {
    /// Build an image, validating the type invariants: 1 or 3 channels,
    /// matching buffer length, all values finite and non-negative.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be non-zero"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "pixel value at index {bad} is {} (must be finite and >= 0)",
                data[bad]
            )));
        }
        Ok(HdrImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Pixel accessor; for 3-channel images returns the first channel offset.
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }
}

/// RGB -> linear luminance with Rec.709 weights; single-channel input
/// passes through unchanged.
pub fn luminance(image: &HdrImage) -> HdrImage {
    if image.channels == 1 {
        return image.clone();
    }
    let mut out = Vec::with_capacity(image.width * image.height);
    for px in image.data.chunks_exact(3) {
        out.push(LUMA_R * px[0] + LUMA_G * px[1] + LUMA_B * px[2]);
    }
    HdrImage {
        width: image.width,
        height: image.height,
        channels: 1,
        data: out,
    }
}

// ---------------------------------------------------------------------------
// PFM
// ---------------------------------------------------------------------------

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteCursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, msg, Some(self.pos))
    }

    /// Read a whitespace-delimited token, consuming leading whitespace and
    /// exactly one trailing whitespace byte.
    fn token(&mut self) -> Result<&'a str> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of header"));
        }
        let tok = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| self.err("non-ascii header token"))?;
        // single whitespace separator after the token
        if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Ok(tok)
    }
}

/// Read a PFM file ("PF" color / "Pf" grayscale). The on-disk bottom-to-top
/// scanline order is converted to top-to-bottom in memory.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = ByteCursor {
        bytes: &bytes,
        pos: 0,
        path,
    };

    let magic = cur.token()?;
    let channels = match magic {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(cur.err(format!("bad magic {other:?}, expected PF or Pf"))),
    };
    let width: i64 = cur
        .token()?
        .parse()
        .map_err(|_| cur.err("width is not an integer"))?;
    let height: i64 = cur
        .token()?
        .parse()
        .map_err(|_| cur.err("height is not an integer"))?;
    if width <= 0 || height <= 0 {
        return Err(cur.err(format!("non-positive dimensions {width}x{height}")));
    }
    let scale: f64 = cur
        .token()?
        .parse()
        .map_err(|_| cur.err("scale is not a number"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(cur.err("scale must be a finite non-zero number"));
    }
    let little_endian = scale < 0.0;

    let (w, h) = (width as usize, height as usize);
    let n = w * h * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < n * 4 {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: need {} bytes, have {}",
                n * 4,
                payload.len()
            ),
            Some(bytes.len()),
        ));
    }

    let mut data = vec![0.0f64; n];
    let row_len = w * channels;
    for file_row in 0..h {
        let mem_row = h - 1 - file_row; // PFM stores bottom-to-top
        for i in 0..row_len {
            let off = (file_row * row_len + i) * 4;
            let raw: [u8; 4] = payload[off..off + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            if !v.is_finite() {
                return Err(Error::format(
                    path,
                    format!("non-finite pixel value {v}"),
                    Some(cur.pos + off),
                ));
            }
            if v < 0.0 {
                return Err(Error::format(
                    path,
                    format!("negative pixel value {v}"),
                    Some(cur.pos + off),
                ));
            }
            data[mem_row * row_len + i] = v as f64;
        }
    }

    HdrImage::new(w, h, channels, data)
}

/// Write a PFM file (little-endian, scale -1.0). Values are stored as
/// 32-bit floats; the in-memory top-down rows are written bottom-to-top.
pub fn write_pfm(image: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let magic = if image.channels == 3 { "PF" } else { "Pf" };
    let mut out = Vec::with_capacity(64 + image.data.len() * 4);
    out.extend_from_slice(format!("{magic}\n{} {}\n-1.0\n", image.width, image.height).as_bytes());
    let row_len = image.width * image.channels;
    for mem_row in (0..image.height).rev() {
        for i in 0..row_len {
            let v = image.data[mem_row * row_len + i] as f32;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Radiance RGBE
// ---------------------------------------------------------------------------

/// Decode one RGBE quadruple: mantissa x 2^(exponent - 128 - 8).
pub fn rgbe_to_rgb(rgbe: [u8; 4]) -> [f64; 3] {
    let e = rgbe[3];
    if e == 0 {
        return [0.0; 3];
    }
    let f = ((e as i32) - 136) as f64;
    let scale = f.exp2();
    [
        rgbe[0] as f64 * scale,
        rgbe[1] as f64 * scale,
        rgbe[2] as f64 * scale,
    ]
}

/// Encode a linear triplet as RGBE with round-to-nearest mantissas.
pub fn rgb_to_rgbe(rgb: [f64; 3]) -> [u8; 4] {
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    if max < 1e-32 {
        return [0, 0, 0, 0];
    }
    // exponent e with max in [2^(e-1), 2^e)
    let bits = max.to_bits();
    let mut e = ((bits >> 52) & 0x7ff) as i32 - 1023 + 1;
    loop {
        let scale = ((8 - e) as f64).exp2(); // 256 / 2^e
        let b: Vec<f64> = rgb.iter().map(|&c| (c * scale).round()).collect();
        if b.iter().all(|&v| v <= 255.0) {
            let stored = e + 128;
            assert!((0..=255).contains(&stored), "luminance out of RGBE range");
            return [b[0] as u8, b[1] as u8, b[2] as u8, stored as u8];
        }
        e += 1; // max channel rounded to 256: halve the mantissas
    }
}

fn header_line<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos] != b'\n' {
        *pos += 1;
    }
    if *pos >= bytes.len() {
        return Err(Error::format(path, "unterminated header line", Some(start)));
    }
    let line = std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| Error::format(path, "non-ascii header", Some(start)))?;
    *pos += 1;
    Ok(line)
}

/// Read a Radiance `.hdr` file. Supports flat scanlines and new-style RLE;
/// old-style RLE is rejected.
pub fn read_rgbe(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;

    let first = header_line(&bytes, &mut pos, path)?;
    if !first.starts_with("#?") {
        return Err(Error::format(path, "missing #? signature", Some(0)));
    }
    let mut format_ok = true; // FORMAT is optional; default is rgbe
    loop {
        let line = header_line(&bytes, &mut pos, path)?;
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.strip_prefix("FORMAT=") {
            format_ok = v.trim() == "32-bit_rle_rgbe";
        }
    }
    if !format_ok {
        return Err(Error::format(
            path,
            "unsupported FORMAT (only 32-bit_rle_rgbe)",
            Some(pos),
        ));
    }

    let res_pos = pos;
    let res = header_line(&bytes, &mut pos, path)?;
    let parts: Vec<&str> = res.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "-Y" || parts[2] != "+X" {
        return Err(Error::format(
            path,
            format!("unsupported resolution line {res:?} (only \"-Y h +X w\")"),
            Some(res_pos),
        ));
    }
    let h: usize = parts[1]
        .parse()
        .map_err(|_| Error::format(path, "bad height", Some(res_pos)))?;
    let w: usize = parts[3]
        .parse()
        .map_err(|_| Error::format(path, "bad width", Some(res_pos)))?;
    if w == 0 || h == 0 {
        return Err(Error::format(path, "zero dimensions", Some(res_pos)));
    }

    let mut data = vec![0.0f64; w * h * 3];
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(path, "truncated scanline data", Some(*pos)));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    for row in 0..h {
        let lead: [u8; 4] = take(&mut pos, 4)?.try_into().unwrap();
        let is_new_rle =
            lead[0] == 2 && lead[1] == 2 && ((lead[2] as usize) << 8 | lead[3] as usize) == w;
        if is_new_rle {
            // four separate component streams, each RLE coded
            let mut comps = vec![0u8; w * 4];
            for comp in 0..4 {
                let mut filled = 0usize;
                while filled < w {
                    let count_pos = pos;
                    let count = take(&mut pos, 1)?[0] as usize;
                    if count > 128 {
                        let run = count - 128;
                        if filled + run > w {
                            return Err(Error::format(
                                path,
                                "scanline length mismatch (run overflow)",
                                Some(count_pos),
                            ));
                        }
                        let v = take(&mut pos, 1)?[0];
                        comps[comp * w + filled..comp * w + filled + run].fill(v);
                        filled += run;
                    } else {
                        if count == 0 || filled + count > w {
                            return Err(Error::format(
                                path,
                                "scanline length mismatch (literal overflow)",
                                Some(count_pos),
                            ));
                        }
                        let lit = take(&mut pos, count)?;
                        comps[comp * w + filled..comp * w + filled + count].copy_from_slice(lit);
                        filled += count;
                    }
                }
            }
            for x in 0..w {
                let rgbe = [comps[x], comps[w + x], comps[2 * w + x], comps[3 * w + x]];
                let rgb = rgbe_to_rgb(rgbe);
                data[(row * w + x) * 3..(row * w + x) * 3 + 3].copy_from_slice(&rgb);
            }
        } else {
            // flat scanline; `lead` is the first pixel
            let mut decode_flat = |rgbe: [u8; 4], x: usize, at: usize| -> Result<()> {
                if x > 0 && rgbe[0] == 1 && rgbe[1] == 1 && rgbe[2] == 1 {
                    return Err(Error::format(
                        path,
                        "old-style RLE scanlines are not supported",
                        Some(at),
                    ));
                }
                let rgb = rgbe_to_rgb(rgbe);
                data[(row * w + x) * 3..(row * w + x) * 3 + 3].copy_from_slice(&rgb);
                Ok(())
            };
            decode_flat(lead, 0, pos - 4)?;
            for x in 1..w {
                let at = pos;
                let rgbe: [u8; 4] = take(&mut pos, 4)?.try_into().unwrap();
                decode_flat(rgbe, x, at)?;
            }
        }
    }

    HdrImage::new(w, h, 3, data)
}

fn rle_encode_component(comp: &[u8], out: &mut Vec<u8>) {
    let n = comp.len();
    let mut i = 0;
    while i < n {
        // length of the run starting at i, capped at 127
        let mut run = 1;
        while i + run < n && comp[i + run] == comp[i] && run < 127 {
            run += 1;
        }
        if run >= 4 {
            out.push(128 + run as u8);
            out.push(comp[i]);
            i += run;
        } else {
            // literal segment until the next run of >= 4, capped at 128
            let start = i;
            let mut j = i;
            while j < n && j - start < 128 {
                let mut r = 1;
                while j + r < n && comp[j + r] == comp[j] && r < 4 {
                    r += 1;
                }
                if r >= 4 {
                    break;
                }
                j += 1;
            }
            out.push((j - start) as u8);
            out.extend_from_slice(&comp[start..j]);
            i = j;
        }
    }
}

/// Write a Radiance `.hdr` file. New-style RLE scanlines are used for
/// widths in [8, 32768); other widths fall back to flat scanlines.
pub fn write_rgbe(image: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if image.channels != 3 {
        return Err(Error::invalid("write_rgbe requires a 3-channel image"));
    }
    let (w, h) = (image.width, image.height);
    let mut out = Vec::with_capacity(64 + w * h * 4);
    out.extend_from_slice(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n");
    out.extend_from_slice(format!("-Y {h} +X {w}\n").as_bytes());

    let use_rle = (8..32768).contains(&w);
    let mut comps = vec![0u8; w * 4];
    for row in 0..h {
        let mut pixels = Vec::with_capacity(w);
        for x in 0..w {
            let base = (row * w + x) * 3;
            pixels.push(rgb_to_rgbe([
                image.data[base],
                image.data[base + 1],
                image.data[base + 2],
            ]));
        }
        if use_rle {
            out.extend_from_slice(&[2, 2, (w >> 8) as u8, (w & 0xff) as u8]);
            for (x, px) in pixels.iter().enumerate() {
                for c in 0..4 {
                    comps[c * w + x] = px[c];
                }
            }
            for c in 0..4 {
                rle_encode_component(&comps[c * w..(c + 1) * w], &mut out);
            }
        } else {
            for px in &pixels {
                out.extend_from_slice(px);
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read an HDR image, dispatching on the file extension
/// (.pfm -> PFM, .hdr/.rgbe/.pic -> Radiance).
pub fn read_image(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("pfm") => read_pfm(path),
        Some("hdr") | Some("rgbe") | Some("pic") => read_rgbe(path),
        other => Err(Error::invalid(format!(
            "unrecognized image extension {other:?} for {}",
            path.display()
        ))),
    }
}

// ---------------------------------------------------------------------------
// Dataset manifests
// ---------------------------------------------------------------------------

/// One (reference, distorted) pair with its subjective score.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    #[serde(rename = "ref")]
    pub reference: PathBuf,
    #[serde(rename = "dist")]
    pub distorted: PathBuf,
    pub dmos: f64,
    pub content: String,
}

/// A validated list of dataset entries with the declared DMOS range.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub dmos_range: [f64; 2],
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Distinct content ids in first-appearance order.
    pub fn content_ids(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.content) {
                seen.push(e.content.clone());
            }
        }
        seen
    }

    /// Entries whose content id is in `contents`, preserving order.
    pub fn entries_for_contents(&self, contents: &[String]) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| contents.contains(&e.content))
            .collect()
    }

    /// Validate the manifest invariants; paths must already be resolved.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::invalid("empty manifest"));
        }
        let [lo, hi] = self.dmos_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("bad dmos_range [{lo}, {hi}]")));
        }
        let mut seen_dist: Vec<&Path> = Vec::new();
        let mut ref_content: Vec<(&Path, &str)> = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if !(lo..=hi).contains(&e.dmos) {
                return Err(Error::invalid(format!(
                    "entry {i}: dmos {} outside declared range [{lo}, {hi}]",
                    e.dmos
                )));
            }
            if seen_dist.contains(&e.distorted.as_path()) {
                return Err(Error::invalid(format!(
                    "entry {i}: duplicate distorted path {}",
                    e.distorted.display()
                )));
            }
            seen_dist.push(&e.distorted);
            // one reference <-> one content id
            for &(r, c) in &ref_content {
                if (r == e.reference.as_path()) != (c == e.content) {
                    return Err(Error::invalid(format!(
                        "entry {i}: content id {} does not group with its reference {}",
                        e.content,
                        e.reference.display()
                    )));
                }
            }
            ref_content.push((&e.reference, &e.content));
            if check_files {
                for p in [&e.reference, &e.distorted] {
                    if !p.exists() {
                        return Err(Error::invalid(format!(
                            "entry {i}: missing file {}",
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Load and validate a JSON manifest. Relative paths are resolved against
/// the manifest's directory; entry order is preserved.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("manifest JSON: {e}"), None))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for e in &mut manifest.entries {
        if e.reference.is_relative() {
            e.reference = base.join(&e.reference);
        }
        if e.distorted.is_relative() {
            e.distorted = base.join(&e.distorted);
        }
    }
    manifest.validate(true)?;
    Ok(manifest)
}

/// Serialize a manifest to JSON. Paths are written as given.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn pfm_hand_encoded_gray_is_flipped_to_top_down() {
        // 2x2 gray, payload [0,1,2,3] in file order (bottom row first)
        let dir = tmp();
        let p = dir.path().join("t.pfm");
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        for v in [0.0f32, 1.0, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, &bytes).unwrap();
        let img = read_pfm(&p).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 2, 1));
        // file bottom row [0,1] lands on the last memory row
        assert_eq!(img.data(), &[2.0, 3.0, 0.0, 1.0]);
    }

    #[test]
    fn pfm_round_trip_is_payload_identical() {
        let dir = tmp();
        let a = dir.path().join("a.pfm");
        let b = dir.path().join("b.pfm");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..5 * 4 * 3)
            .map(|_| (rng.gen::<f32>() * 1000.0) as f64)
            .collect();
        let img = HdrImage::new(5, 4, 3, data).unwrap();
        write_pfm(&img, &a).unwrap();
        let back = read_pfm(&a).unwrap();
        write_pfm(&back, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn pfm_constant_image_round_trips_max() {
        let dir = tmp();
        let p = dir.path().join("c.pfm");
        let img = HdrImage::new(3, 3, 1, vec![4000.0; 9]).unwrap();
        write_pfm(&img, &p).unwrap();
        assert_eq!(read_pfm(&p).unwrap().max_value(), 4000.0);
    }

    #[test]
    fn pfm_single_pixel_payload_is_ieee754() {
        let dir = tmp();
        let p = dir.path().join("one.pfm");
        let img = HdrImage::new(1, 1, 1, vec![0.5]).unwrap();
        write_pfm(&img, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let payload = &bytes[bytes.len() - 4..];
        assert_eq!(payload, 0.5f32.to_le_bytes());
    }

    #[test]
    fn pfm_rejects_negative_width_and_truncation() {
        let dir = tmp();
        let p = dir.path().join("bad.pfm");
        fs::write(&p, b"PF\n-2 2\n-1.0\n").unwrap();
        let err = read_pfm(&p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");

        let q = dir.path().join("trunc.pfm");
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes()); // only 1 of 4 pixels
        fs::write(&q, &bytes).unwrap();
        let err = read_pfm(&q).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn pfm_rejects_empty_image_on_write() {
        assert!(HdrImage::new(0, 0, 1, vec![]).is_err());
    }

    #[test]
    fn rgbe_unit_decode() {
        assert_eq!(rgbe_to_rgb([128, 128, 128, 129]), [1.0, 1.0, 1.0]);
        assert_eq!(rgbe_to_rgb([0, 0, 0, 0]), [0.0, 0.0, 0.0]);
        assert_eq!(rgb_to_rgbe([1.0, 1.0, 1.0]), [128, 128, 128, 129]);
    }

    #[test]
    fn rgbe_quantization_round_trip() {
        // |decoded - original| must stay within 2^-8 of the shared-exponent
        // full scale 2^(e-128), the step guarantee of an 8-bit mantissa.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let scale = 10f64.powf(rng.gen_range(-3.0..4.0));
            let rgb = [
                rng.gen::<f64>() * scale,
                rng.gen::<f64>() * scale,
                rng.gen::<f64>() * scale,
            ];
            let enc = rgb_to_rgbe(rgb);
            let dec = rgbe_to_rgb(enc);
            if enc[3] == 0 {
                continue;
            }
            let full_scale = ((enc[3] as i32) - 128) as f64;
            let bound = full_scale.exp2() * (1.0 / 256.0);
            for c in 0..3 {
                assert!(
                    (dec[c] - rgb[c]).abs() <= bound,
                    "channel {c}: {} vs {} (bound {bound})",
                    dec[c],
                    rgb[c]
                );
            }
        }
    }

    #[test]
    fn rgbe_file_round_trip_rle() {
        let dir = tmp();
        let p = dir.path().join("t.hdr");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = 64;
        let h = 8;
        let mut data = Vec::with_capacity(w * h * 3);
        for i in 0..w * h {
            if i % 5 == 0 {
                data.extend_from_slice(&[100.0, 100.0, 100.0]); // runs for RLE
            } else {
                data.push(rng.gen::<f64>() * 500.0);
                data.push(rng.gen::<f64>() * 500.0);
                data.push(rng.gen::<f64>() * 500.0);
            }
        }
        let img = HdrImage::new(w, h, 3, data).unwrap();
        write_rgbe(&img, &p).unwrap();
        let back = read_rgbe(&p).unwrap();
        assert_eq!((back.width(), back.height()), (w, h));
        // per-channel error stays within the shared-exponent step, which is
        // bounded by pixel_max / 128
        for (a, b) in img.data().chunks_exact(3).zip(back.data().chunks_exact(3)) {
            let pixel_max = a[0].max(a[1]).max(a[2]);
            let bound = pixel_max / 128.0 + 1e-9;
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= bound, "{} vs {}", a[c], b[c]);
            }
        }
        // decode -> encode -> decode is exact (quantization is idempotent)
        let p2 = dir.path().join("t2.hdr");
        write_rgbe(&back, &p2).unwrap();
        let again = read_rgbe(&p2).unwrap();
        assert_eq!(back.data(), again.data());
    }

    #[test]
    fn rgbe_rejects_old_style_rle_and_bad_headers() {
        let dir = tmp();
        let p = dir.path().join("old.hdr");
        let mut bytes = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 3\n".to_vec();
        bytes.extend_from_slice(&[128, 128, 128, 129]); // normal pixel
        bytes.extend_from_slice(&[1, 1, 1, 2]); // old-style repeat marker
        bytes.extend_from_slice(&[128, 128, 128, 129]);
        fs::write(&p, &bytes).unwrap();
        let err = read_rgbe(&p).unwrap_err();
        assert!(err.to_string().contains("old-style"), "{err}");

        let q = dir.path().join("fmt.hdr");
        fs::write(&q, b"#?RADIANCE\nFORMAT=32-bit_rle_xyze\n\n-Y 1 +X 1\n\0\0\0\0").unwrap();
        assert!(read_rgbe(&q).unwrap_err().to_string().contains("FORMAT"));

        let r = dir.path().join("res.hdr");
        fs::write(&r, b"#?RADIANCE\n\n+Y 1 +X 1\n\0\0\0\0").unwrap();
        assert!(read_rgbe(&r)
            .unwrap_err()
            .to_string()
            .contains("resolution"));
    }

    #[test]
    fn luminance_coefficients() {
        let img = HdrImage::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(luminance(&img).data()[0], 0.2126);
        let white = HdrImage::new(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert!((luminance(&white).data()[0] - 1.0).abs() < 1e-12);
        let gray = HdrImage::new(2, 1, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(luminance(&gray).data(), gray.data());
    }

    #[test]
    fn luminance_is_linear_in_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..4 * 3 * 3).map(|_| rng.gen::<f64>() * 100.0).collect();
        let img = HdrImage::new(4, 3, 3, data.clone()).unwrap();
        let a = 7.5;
        let scaled = HdrImage::new(4, 3, 3, data.iter().map(|v| a * v).collect()).unwrap();
        for (ys, y) in luminance(&scaled).data().iter().zip(luminance(&img).data()) {
            assert!((ys - a * y).abs() <= 1e-12 * ys.abs().max(1.0));
        }
    }

    fn write_tiny_pfm(path: &Path) {
        let img = HdrImage::new(1, 1, 1, vec![1.0]).unwrap();
        write_pfm(&img, path).unwrap();
    }

    fn manifest_json(entries: &[(&str, &str, f64, &str)], range: [f64; 2]) -> String {
        let ents: Vec<String> = entries
            .iter()
            .map(|(r, d, s, c)| {
                format!(r#"{{"ref":"{r}","dist":"{d}","dmos":{s},"content":"{c}"}}"#)
            })
            .collect();
        format!(
            r#"{{"dmos_range":[{},{}],"entries":[{}]}}"#,
            range[0],
            range[1],
            ents.join(",")
        )
    }

    #[test]
    fn manifest_structural_load() {
        let dir = tmp();
        for name in ["r1.pfm", "r2.pfm", "d1.pfm", "d2.pfm", "d3.pfm", "d4.pfm", "d5.pfm", "d6.pfm"] {
            write_tiny_pfm(&dir.path().join(name));
        }
        let json = manifest_json(
            &[
                ("r1.pfm", "d1.pfm", 30.0, "a"),
                ("r1.pfm", "d2.pfm", 40.0, "a"),
                ("r1.pfm", "d3.pfm", 50.0, "a"),
                ("r2.pfm", "d4.pfm", 30.0, "b"),
                ("r2.pfm", "d5.pfm", 40.0, "b"),
                ("r2.pfm", "d6.pfm", 50.0, "b"),
            ],
            [20.0, 80.0],
        );
        let mp = dir.path().join("m.json");
        fs::write(&mp, &json).unwrap();
        let m = load_manifest(&mp).unwrap();
        assert_eq!(m.entries.len(), 6);
        assert_eq!(m.content_ids(), vec!["a".to_string(), "b".to_string()]);
        // deterministic and order-preserving
        let m2 = load_manifest(&mp).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn manifest_validation_errors() {
        let dir = tmp();
        write_tiny_pfm(&dir.path().join("r.pfm"));
        write_tiny_pfm(&dir.path().join("d.pfm"));

        // dmos out of declared range
        let mp = dir.path().join("m1.json");
        fs::write(
            &mp,
            manifest_json(&[("r.pfm", "d.pfm", 95.0, "a")], [20.0, 80.0]),
        )
        .unwrap();
        assert!(load_manifest(&mp)
            .unwrap_err()
            .to_string()
            .contains("outside declared range"));

        // empty entries
        let mp2 = dir.path().join("m2.json");
        fs::write(&mp2, r#"{"dmos_range":[20,80],"entries":[]}"#).unwrap();
        assert!(load_manifest(&mp2)
            .unwrap_err()
            .to_string()
            .contains("empty manifest"));

        // duplicate distorted path
        let mp3 = dir.path().join("m3.json");
        fs::write(
            &mp3,
            manifest_json(
                &[("r.pfm", "d.pfm", 30.0, "a"), ("r.pfm", "d.pfm", 40.0, "a")],
                [20.0, 80.0],
            ),
        )
        .unwrap();
        assert!(load_manifest(&mp3)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));

        // missing file
        let mp4 = dir.path().join("m4.json");
        fs::write(
            &mp4,
            manifest_json(&[("r.pfm", "nope.pfm", 30.0, "a")], [20.0, 80.0]),
        )
        .unwrap();
        assert!(load_manifest(&mp4)
            .unwrap_err()
            .to_string()
            .contains("missing file"));
    }
}
