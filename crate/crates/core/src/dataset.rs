//! Datasets: synthetic shape images and PPM/PGM directory loading.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Tight bounding box of the object in a synthetic image; `y1`/`x1` are
/// exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub bbox: Option<BoundingBox>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub image_shape: [usize; 3],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.shape() != self.image_shape {
                return Err(Error::Dataset(format!(
                    "sample {i}: image shape {:?} != declared {:?}",
                    s.image.shape(),
                    self.image_shape
                )));
            }
            if s.label >= self.classes {
                return Err(Error::Dataset(format!(
                    "sample {i}: label {} >= {} classes",
                    s.label, self.classes
                )));
            }
        }
        Ok(())
    }
}

/// Synthetic dataset specification. Each class draws one shape kind at a
/// random position and size over a noisy constant background.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: usize,
    pub image_size: usize,
    pub per_class: usize,
    pub noise_level: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 2,
            image_size: 32,
            per_class: 100,
            noise_level: 0.15,
        }
    }
}

const BACKGROUND: f32 = 0.3;
const SHAPE_INTENSITY: f32 = 0.9;

pub fn generate_synthetic_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if !(2..=10).contains(&spec.classes) {
        return Err(Error::Dataset(format!(
            "synthetic classes must be in 2..=10, got {}",
            spec.classes
        )));
    }
    if spec.image_size < 12 {
        return Err(Error::Dataset("synthetic image size must be >= 12".into()));
    }
    let n = spec.image_size;
    let mut rng = rng_for(seed, &["synthetic-dataset"]);
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        for _ in 0..spec.per_class {
            // object geometry
            let max_s = (n / 2).min(16);
            let s = rng.random_range(10..=max_s.max(10));
            let y0 = rng.random_range(1..n - s);
            let x0 = rng.random_range(1..n - s);
            let mask = paint_shape(class, n, y0, x0, s);

            // background texture
            let mut data = vec![0f32; n * n * 3];
            for v in data.iter_mut() {
                let noise: f32 = rng.random_range(-1.0..1.0);
                *v = (BACKGROUND + spec.noise_level * noise).clamp(0.0, 1.0);
            }
            let mut bbox: Option<BoundingBox> = None;
            for y in 0..n {
                for x in 0..n {
                    if mask[y * n + x] {
                        for c in 0..3 {
                            data[(y * n + x) * 3 + c] = SHAPE_INTENSITY;
                        }
                        bbox = Some(match bbox {
                            None => BoundingBox {
                                y0: y,
                                x0: x,
                                y1: y + 1,
                                x1: x + 1,
                            },
                            Some(b) => BoundingBox {
                                y0: b.y0.min(y),
                                x0: b.x0.min(x),
                                y1: b.y1.max(y + 1),
                                x1: b.x1.max(x + 1),
                            },
                        });
                    }
                }
            }
            samples.push(Sample {
                image: Tensor::new(vec![n, n, 3], data)?,
                label: class,
                bbox,
            });
        }
    }
    // mix classes deterministically so contiguous splits stay balanced
    samples.shuffle(&mut rng);
    let ds = Dataset {
        samples,
        classes: spec.classes,
        image_shape: [n, n, 3],
    };
    ds.validate()?;
    Ok(ds)
}

/// Paints the class-determined shape; returns the painted pixel mask.
fn paint_shape(class: usize, n: usize, y0: usize, x0: usize, s: usize) -> Vec<bool> {
    let mut mask = vec![false; n * n];
    let r = s as f32 / 2.0;
    let (cy, cx) = (y0 as f32 + r, x0 as f32 + r);
    let mut set = |y: usize, x: usize| {
        if y < n && x < n {
            mask[y * n + x] = true;
        }
    };
    match class % 10 {
        // filled square
        0 => {
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    set(y, x);
                }
            }
        }
        // filled disc
        1 => {
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                    if dy * dy + dx * dx <= r * r {
                        set(y, x);
                    }
                }
            }
        }
        // plus-shaped cross
        2 => {
            let t = (s / 3).max(2);
            let arm0 = y0 + (s - t) / 2;
            for y in arm0..arm0 + t {
                for x in x0..x0 + s {
                    set(y, x);
                }
            }
            let arm0 = x0 + (s - t) / 2;
            for x in arm0..arm0 + t {
                for y in y0..y0 + s {
                    set(y, x);
                }
            }
        }
        // horizontal bars
        3 => {
            let t = (s / 4).max(2);
            for y in y0..y0 + t {
                for x in x0..x0 + s {
                    set(y, x);
                }
            }
            for y in y0 + s - t..y0 + s {
                for x in x0..x0 + s {
                    set(y, x);
                }
            }
        }
        // vertical bars
        4 => {
            let t = (s / 4).max(2);
            for x in x0..x0 + t {
                for y in y0..y0 + s {
                    set(y, x);
                }
            }
            for x in x0 + s - t..x0 + s {
                for y in y0..y0 + s {
                    set(y, x);
                }
            }
        }
        // filled diamond
        5 => {
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                    if dy.abs() + dx.abs() <= r {
                        set(y, x);
                    }
                }
            }
        }
        // ring
        6 => {
            let inner = r * 0.5;
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                    let d2 = dy * dy + dx * dx;
                    if d2 <= r * r && d2 >= inner * inner {
                        set(y, x);
                    }
                }
            }
        }
        // square frame
        7 => {
            let t = (s / 4).max(2);
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    let edge = y < y0 + t || y >= y0 + s - t || x < x0 + t || x >= x0 + s - t;
                    if edge {
                        set(y, x);
                    }
                }
            }
        }
        // diagonal x-cross
        8 => {
            let t = (s / 4).max(2) as i64;
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    let (dy, dx) = ((y - y0) as i64, (x - x0) as i64);
                    if (dy - dx).abs() < t || (dy + dx - s as i64 + 1).abs() < t {
                        set(y, x);
                    }
                }
            }
        }
        // checkerboard
        _ => {
            let cell = (s / 4).max(2);
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    if (((y - y0) / cell) + ((x - x0) / cell)) % 2 == 0 {
                        set(y, x);
                    }
                }
            }
        }
    }
    mask
}

/// Loads a directory of binary PPM (P6) / PGM (P5) images with a
/// `filename,label` CSV. Sample order is the CSV row order.
pub fn load_image_dataset(dir: &Path, labels_csv: &Path, classes: usize) -> Result<Dataset> {
    let csv = fs::read_to_string(labels_csv)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", labels_csv.display())))?;
    let mut samples = Vec::new();
    let mut shape: Option<[usize; 3]> = None;
    for (lineno, line) in csv.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.eq_ignore_ascii_case("filename,label")) {
            continue;
        }
        let (name, label_str) = line.split_once(',').ok_or_else(|| {
            Error::Dataset(format!("labels line {}: expected filename,label", lineno + 1))
        })?;
        let label: usize = label_str.trim().parse().map_err(|_| {
            Error::Dataset(format!("labels line {}: bad label '{label_str}'", lineno + 1))
        })?;
        if label >= classes {
            return Err(Error::Dataset(format!(
                "labels line {}: label {label} >= {classes} classes",
                lineno + 1
            )));
        }
        let path = dir.join(name.trim());
        let image = load_netpbm(&path)?;
        match shape {
            None => shape = Some([image.shape()[0], image.shape()[1], image.shape()[2]]),
            Some(s) => {
                if image.shape() != s {
                    return Err(Error::Dataset(format!(
                        "{}: image shape {:?} differs from first image {:?}",
                        path.display(),
                        image.shape(),
                        s
                    )));
                }
            }
        }
        samples.push(Sample {
            image,
            label,
            bbox: None,
        });
    }
    let shape = shape.ok_or(Error::EmptyInput("labels csv lists no images"))?;
    let ds = Dataset {
        samples,
        classes,
        image_shape: shape,
    };
    ds.validate()?;
    Ok(ds)
}

/// Parses a binary netpbm file (P5 grayscale or P6 color, 8-bit).
/// Pixel bytes scale to [0, 1] with 255 -> 1.0.
pub fn load_netpbm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let bad = |reason: &str| Error::Dataset(format!("{}: {reason}", path.display()));
    if bytes.len() < 2 {
        return Err(bad("file too short for a netpbm header"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(bad("not a binary P5/P6 netpbm file")),
    };
    // header tokens: width, height, maxval; '#' starts a comment
    let mut pos = 2;
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| bad("non-ascii header token"))?;
        let value: usize = tok
            .parse()
            .map_err(|_| bad(&format!("bad header token '{tok}'")))?;
        tokens.push(value);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing whitespace after maxval"));
    }
    pos += 1; // single whitespace byte before raster
    let (w, h, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 {
        return Err(bad(&format!("only 8-bit images supported, maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero image dimension"));
    }
    let expected = w * h * channels;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(bad(&format!(
            "raster truncated: {} bytes, expected {expected}",
            raster.len()
        )));
    }
    let data: Vec<f32> = raster[..expected]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Tensor::new(vec![h, w, channels], data)
}

/// Writes a tensor image as binary PPM (3 channels) or PGM (1 channel).
pub fn save_netpbm(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || (s[2] != 1 && s[2] != 3) {
        return Err(Error::Dataset(format!(
            "netpbm image must be [H, W, 1|3], got {s:?}"
        )));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(32 + h * w * c);
    out.extend_from_slice(if c == 3 { b"P6\n" } else { b"P5\n" });
    out.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    for &v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

// used by tests that stream corrupted files
#[allow(dead_code)]
fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let spec = SynthSpec {
            classes: 2,
            per_class: 100,
            ..Default::default()
        };
        let a = generate_synthetic_dataset(&spec, 9).unwrap();
        assert_eq!(a.len(), 200);
        let ones = a.samples.iter().filter(|s| s.label == 1).count();
        assert_eq!(ones, 100);
        let b = generate_synthetic_dataset(&spec, 9).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.label, sb.label);
            assert_eq!(sa.image.data(), sb.image.data());
        }
        let c = generate_synthetic_dataset(&spec, 10).unwrap();
        assert!(a
            .samples
            .iter()
            .zip(&c.samples)
            .any(|(x, y)| x.image.data() != y.image.data()));
    }

    #[test]
    fn zero_noise_background_is_constant_outside_bbox() {
        let spec = SynthSpec {
            classes: 4,
            per_class: 5,
            noise_level: 0.0,
            ..Default::default()
        };
        let ds = generate_synthetic_dataset(&spec, 3).unwrap();
        for s in &ds.samples {
            let bbox = s.bbox.expect("synthetic sample has bbox");
            let n = ds.image_shape[0];
            for y in 0..n {
                for x in 0..n {
                    if !bbox.contains(y, x) {
                        for c in 0..3 {
                            assert_eq!(s.image.data()[(y * n + x) * 3 + c], BACKGROUND);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bbox_contains_all_deviating_pixels() {
        let spec = SynthSpec {
            classes: 10,
            per_class: 3,
            noise_level: 0.1,
            ..Default::default()
        };
        let ds = generate_synthetic_dataset(&spec, 5).unwrap();
        for s in &ds.samples {
            let bbox = s.bbox.unwrap();
            let n = ds.image_shape[0];
            for y in 0..n {
                for x in 0..n {
                    for c in 0..3 {
                        let v = s.image.data()[(y * n + x) * 3 + c];
                        if (v - BACKGROUND).abs() > spec.noise_level + 1e-6 {
                            assert!(bbox.contains(y, x), "deviating pixel outside bbox");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn netpbm_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        // 2x2 RGB with extreme bytes
        let bytes: Vec<u8> = b"P6\n2 2\n255\n".iter().copied().chain([
            255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255,
        ]).collect();
        std::fs::write(&path, bytes).unwrap();
        let img = load_netpbm(&path).unwrap();
        assert_eq!(img.shape(), &[2, 2, 3]);
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[1], 0.0);
        assert_eq!(img.data()[9], 1.0);
    }

    #[test]
    fn netpbm_rejects_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P6\n2 2\n65535\n").unwrap();
        assert!(load_netpbm(&path).is_err());
        std::fs::write(&path, b"P6\n2 2\n255\nxx").unwrap();
        assert!(load_netpbm(&path).is_err());
        std::fs::write(&path, b"P3\n2 2\n255\n").unwrap();
        assert!(load_netpbm(&path).is_err());
    }

    #[test]
    fn image_dataset_loads_in_csv_order_and_validates_labels() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["a.pgm", "b.pgm"].iter().enumerate() {
            let mut bytes = b"P5\n2 2\n255\n".to_vec();
            bytes.extend_from_slice(&[10 * (i as u8 + 1); 4]);
            std::fs::write(dir.path().join(name), bytes).unwrap();
        }
        let csv = dir.path().join("labels.csv");
        std::fs::write(&csv, "filename,label\nb.pgm,1\na.pgm,0\n").unwrap();
        let ds = load_image_dataset(dir.path(), &csv, 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[0].label, 1); // csv order
        assert!((ds.samples[0].image.data()[0] - 20.0 / 255.0).abs() < 1e-6);

        std::fs::write(&csv, "filename,label\na.pgm,7\n").unwrap();
        assert!(load_image_dataset(dir.path(), &csv, 2).is_err());

        std::fs::write(&csv, "filename,label\nmissing.pgm,0\n").unwrap();
        assert!(load_image_dataset(dir.path(), &csv, 2).is_err());
    }
}
