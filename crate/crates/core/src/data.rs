//! Synthetic dual-modality segmentation data.
//!
//! Each sample is a curvilinear tube (a cubic Bézier curve of random width)
//! rendered into two co-registered images. Modality A sees the tube with
//! contrast `contrast_a` over a smooth ramp plus bright blob distractors;
//! modality B sees it with `contrast_b` over an oriented grating texture.
//! Neither image alone separates tube from distractor cleanly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

pub const IMAGE_MAGIC: [u8; 4] = *b"MMIG";
pub const DTYPE_F32: u32 = 1;
const HEADER_LEN: usize = 16;
const CURVE_SEGMENTS: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub n_samples: usize,
    /// Tube diameter range in pixels, `(min, max)`.
    pub tube_width_range: (f64, f64),
    pub contrast_a: f64,
    pub contrast_b: f64,
    pub noise_sigma_a: f64,
    pub noise_sigma_b: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            n_samples: 92,
            tube_width_range: (2.0, 4.0),
            contrast_a: 0.3,
            contrast_b: 0.3,
            noise_sigma_a: 0.12,
            noise_sigma_b: 0.12,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_height < 16 {
            return Err(Error::config("data.image_height", "must be at least 16"));
        }
        if self.image_width < 16 {
            return Err(Error::config("data.image_width", "must be at least 16"));
        }
        let (lo, hi) = self.tube_width_range;
        if !(lo >= 1.0 && hi >= 1.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(
                "data.tube_width_range",
                format!("need 1 <= min <= max, got ({lo}, {hi})"),
            ));
        }
        for (field, v) in [
            ("data.contrast_a", self.contrast_a),
            ("data.contrast_b", self.contrast_b),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(field, format!("must lie in (0, 1], got {v}")));
            }
        }
        for (field, v) in [
            ("data.noise_sigma_a", self.noise_sigma_a),
            ("data.noise_sigma_b", self.noise_sigma_b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    field,
                    format!("must be finite and >= 0, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// One co-registered image pair with its optional label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalSample {
    pub sample_id: String,
    pub modality_a: Array2<f32>,
    pub modality_b: Array2<f32>,
    /// Binary mask with values in `{0, 1}`.
    pub mask: Option<Array2<u8>>,
}

impl MultiModalSample {
    pub fn shape(&self) -> (usize, usize) {
        self.modality_a.dim()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let dim = self.modality_a.dim();
        if self.modality_b.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "sample {}: modality a is {:?}, modality b is {:?}",
                self.sample_id,
                dim,
                self.modality_b.dim()
            )));
        }
        if let Some(mask) = &self.mask {
            if mask.dim() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "sample {}: mask is {:?}, images are {:?}",
                    self.sample_id,
                    mask.dim(),
                    dim
                )));
            }
        }
        Ok(())
    }

    /// The same sample with its label removed.
    pub fn without_mask(mut self) -> Self {
        self.mask = None;
        self
    }
}

/// Geometry of one generated tube, in pixel coordinates `(row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeGeometry {
    pub control: [(f64, f64); 4],
    /// Tube diameter in pixels.
    pub width: f64,
}

impl TubeGeometry {
    pub fn point(&self, t: f64) -> (f64, f64) {
        let [p0, p1, p2, p3] = self.control;
        let s = 1.0 - t;
        let b0 = s * s * s;
        let b1 = 3.0 * s * s * t;
        let b2 = 3.0 * s * t * t;
        let b3 = t * t * t;
        (
            b0 * p0.0 + b1 * p1.0 + b2 * p2.0 + b3 * p3.0,
            b0 * p0.1 + b1 * p1.1 + b2 * p2.1 + b3 * p3.1,
        )
    }

    pub fn polyline(&self) -> Vec<(f64, f64)> {
        (0..=CURVE_SEGMENTS)
            .map(|i| self.point(i as f64 / CURVE_SEGMENTS as f64))
            .collect()
    }

    /// Rasterized mask: a pixel is foreground iff its centre lies within
    /// `width / 2` of the curve polyline.
    pub fn rasterize(&self, height: usize, width: usize) -> Array2<u8> {
        let line = self.polyline();
        let radius = self.width / 2.0;
        Array2::from_shape_fn((height, width), |(r, c)| {
            let p = (r as f64 + 0.5, c as f64 + 0.5);
            u8::from(distance_to_polyline(p, &line) <= radius)
        })
    }
}

fn distance_to_polyline(p: (f64, f64), line: &[(f64, f64)]) -> f64 {
    line.windows(2)
        .map(|seg| {
            let (a, b) = (seg[0], seg[1]);
            let d = (b.0 - a.0, b.1 - a.1);
            let len2 = d.0 * d.0 + d.1 * d.1;
            let t = if len2 > 0.0 {
                (((p.0 - a.0) * d.0 + (p.1 - a.1) * d.1) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = (a.0 + t * d.0, a.1 + t * d.1);
            ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:03}")
}

/// Tube geometry of sample `index`; a pure function of `(spec, index)`.
pub fn tube_geometry(spec: &DatasetSpec, index: usize) -> TubeGeometry {
    let mut rng = rng::stream(spec.seed, &["tube".into(), index.into()]);
    let (h, w) = (spec.image_height as f64, spec.image_width as f64);
    let (cy, cx) = (h / 2.0, w / 2.0);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let reach = 0.45;
    let mut jitter = |scale: f64| rng.gen_range(-scale..scale);
    let p0 = (
        cy + reach * h * angle.sin() + jitter(0.1 * h),
        cx + reach * w * angle.cos() + jitter(0.1 * w),
    );
    let p3 = (
        cy - reach * h * angle.sin() + jitter(0.1 * h),
        cx - reach * w * angle.cos() + jitter(0.1 * w),
    );
    let p1 = (cy + jitter(0.3 * h), cx + jitter(0.3 * w));
    let p2 = (cy + jitter(0.3 * h), cx + jitter(0.3 * w));
    let (lo, hi) = spec.tube_width_range;
    let width = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    TubeGeometry {
        control: [p0, p1, p2, p3],
        width,
    }
}

/// Renders sample `index`; a pure function of `(spec, index)`.
pub fn render_sample(spec: &DatasetSpec, index: usize) -> MultiModalSample {
    let geometry = tube_geometry(spec, index);
    let (h, w) = (spec.image_height, spec.image_width);
    let mask = geometry.rasterize(h, w);
    let mut rng = rng::stream(spec.seed, &["render".into(), index.into()]);

    // Modality A: tilted intensity ramp plus bright blobs that are not tube.
    let ramp_angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let ramp = (
        ramp_angle.sin() * 0.1 / h as f64,
        ramp_angle.cos() * 0.1 / w as f64,
    );
    let n_blobs = rng.gen_range(1..=2);
    let blobs: Vec<(f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.04..0.08) * h.min(w) as f64,
            )
        })
        .collect();

    // Modality B: oriented grating with a period comparable to the tube width.
    let grating_angle = rng.gen_range(0.0..std::f64::consts::PI);
    let period = rng.gen_range(3.0..6.0) * spec.tube_width_range.1;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let noise_a = Normal::new(0.0, spec.noise_sigma_a).expect("validated sigma");
    let noise_b = Normal::new(0.0, spec.noise_sigma_b).expect("validated sigma");
    let mut noise_rng = rng::stream(spec.seed, &["noise".into(), index.into()]);

    let mut modality_a = Array2::<f32>::zeros((h, w));
    let mut modality_b = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let fg = f64::from(mask[(r, c)]);

            let blob: f64 = blobs
                .iter()
                .map(|&(by, bx, s)| (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            let a = 0.35
                + ramp.0 * (y - h as f64 / 2.0)
                + ramp.1 * (x - w as f64 / 2.0)
                + spec.contrast_a * (fg + 0.8 * blob.min(1.0))
                + noise_a.sample(&mut noise_rng);

            let along = y * grating_angle.sin() + x * grating_angle.cos();
            let texture = 0.5 * (1.0 + (std::f64::consts::TAU * along / period + phase).sin());
            let b = 0.3
                + 0.6 * spec.contrast_b * texture
                + spec.contrast_b * fg
                + noise_b.sample(&mut noise_rng);

            modality_a[(r, c)] = a.clamp(0.0, 1.0) as f32;
            modality_b[(r, c)] = b.clamp(0.0, 1.0) as f32;
        }
    }

    MultiModalSample {
        sample_id: sample_id(index),
        modality_a,
        modality_b,
        mask: Some(mask),
    }
}

fn samples_dir(root: &Path) -> PathBuf {
    root.join("samples")
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.tsv")
}

/// Generates `spec.n_samples` samples and writes them under `root`.
pub fn generate_dataset(spec: &DatasetSpec, root: &Path) -> Result<Vec<MultiModalSample>> {
    spec.validate()?;
    fs::create_dir_all(samples_dir(root)).map_err(|e| Error::io(root, e))?;
    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut manifest = String::new();
    for index in 0..spec.n_samples {
        let sample = render_sample(spec, index);
        write_sample(root, &sample)?;
        manifest.push_str(&format!(
            "{}\t{}\n",
            sample.sample_id,
            u8::from(sample.mask.is_some())
        ));
        samples.push(sample);
    }
    let path = manifest_path(root);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(samples)
}

pub fn write_sample(root: &Path, sample: &MultiModalSample) -> Result<()> {
    sample.check_shapes()?;
    let dir = samples_dir(root).join(&sample.sample_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_image(&dir.join("a.img"), &sample.modality_a)?;
    write_image(&dir.join("b.img"), &sample.modality_b)?;
    if let Some(mask) = &sample.mask {
        write_image(&dir.join("mask.img"), &mask.mapv(f32::from))?;
    }
    Ok(())
}

pub fn load_sample(root: &Path, sample_id: &str) -> Result<MultiModalSample> {
    let dir = samples_dir(root).join(sample_id);
    if sample_id.is_empty() || sample_id.contains(['/', '\\']) || !dir.is_dir() {
        return Err(Error::MissingSample(sample_id.to_string()));
    }
    let modality_a = read_image(&dir.join("a.img"))?;
    let modality_b = read_image(&dir.join("b.img"))?;
    let mask_path = dir.join("mask.img");
    let mask = if mask_path.exists() {
        let raw = read_image(&mask_path)?;
        let mut mask = Array2::<u8>::zeros(raw.dim());
        for (m, &v) in mask.iter_mut().zip(raw.iter()) {
            *m = match v {
                0.0 => 0,
                1.0 => 1,
                other => {
                    return Err(Error::Corrupt {
                        path: mask_path.clone(),
                        reason: format!("mask value {other} is not 0 or 1"),
                    })
                }
            };
        }
        Some(mask)
    } else {
        None
    };
    let sample = MultiModalSample {
        sample_id: sample_id.to_string(),
        modality_a,
        modality_b,
        mask,
    };
    sample.check_shapes()?;
    Ok(sample)
}

/// Loads a sample for use as unlabeled data: any mask on disk is dropped.
pub fn load_unlabeled(root: &Path, sample_id: &str) -> Result<MultiModalSample> {
    load_sample(root, sample_id).map(MultiModalSample::without_mask)
}

pub fn encode_image(image: &Array2<f32>) -> Vec<u8> {
    let (h, w) = image.dim();
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * h * w);
    bytes.extend_from_slice(&IMAGE_MAGIC);
    bytes.extend_from_slice(&DTYPE_F32.to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for v in image.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Array2<f32>> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if bytes[..4] != IMAGE_MAGIC {
        return Err(corrupt("bad magic bytes".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let dtype = word(4);
    if dtype != DTYPE_F32 {
        return Err(corrupt(format!("unsupported dtype code {dtype}")));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let expected = HEADER_LEN + 4 * h * w;
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "expected {expected} bytes for {h}x{w}, found {}",
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Array2::from_shape_vec((h, w), values).map_err(|e| corrupt(e.to_string()))
}

pub fn write_image(path: &Path, image: &Array2<f32>) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_image(image))
        .map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// `(sample_id, has_mask)` for every sample listed in the dataset manifest.
pub fn read_manifest(root: &Path) -> Result<Vec<(String, bool)>> {
    let path = manifest_path(root);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(flag @ ("0" | "1")), None) if !id.is_empty() => {
                    Ok((id.to_string(), flag == "1"))
                }
                _ => Err(Error::Corrupt {
                    path: path.clone(),
                    reason: format!("malformed line {}: {line:?}", i + 1),
                }),
            }
        })
        .collect()
}

/// Disjoint labeled / unlabeled / test partition of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (header, ids) in [
            ("labeled", &self.labeled_ids),
            ("unlabeled", &self.unlabeled_ids),
            ("test", &self.test_ids),
        ] {
            out.push_str(&format!("[{header}]\n"));
            for id in ids {
                out.push_str(id);
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut manifest = SplitManifest::default();
        let mut current: Option<&mut Vec<String>> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            current = match line {
                "[labeled]" => Some(&mut manifest.labeled_ids),
                "[unlabeled]" => Some(&mut manifest.unlabeled_ids),
                "[test]" => Some(&mut manifest.test_ids),
                id => match current {
                    Some(list) => {
                        list.push(id.to_string());
                        Some(list)
                    }
                    None => {
                        return Err(Error::Corrupt {
                            path: path.to_path_buf(),
                            reason: format!("line {}: id before any section header", i + 1),
                        })
                    }
                },
            };
        }
        manifest.check_disjoint()?;
        Ok(manifest)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for id in self
            .labeled_ids
            .iter()
            .chain(&self.unlabeled_ids)
            .chain(&self.test_ids)
        {
            if !seen.insert(id) {
                return Err(Error::InvalidArgument(format!(
                    "sample `{id}` appears in more than one split"
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

pub fn splits_path(root: &Path) -> PathBuf {
    root.join("splits.txt")
}

/// Random disjoint splits of the samples listed in the dataset manifest.
pub fn make_splits(
    root: &Path,
    n_labeled: usize,
    n_unlabeled: usize,
    n_test: usize,
    seed: u64,
) -> Result<SplitManifest> {
    let ids: Vec<String> = read_manifest(root)?.into_iter().map(|(id, _)| id).collect();
    split_ids(&ids, n_labeled, n_unlabeled, n_test, seed)
}

pub fn split_ids(
    ids: &[String],
    n_labeled: usize,
    n_unlabeled: usize,
    n_test: usize,
    seed: u64,
) -> Result<SplitManifest> {
    let requested = n_labeled + n_unlabeled + n_test;
    if requested > ids.len() {
        return Err(Error::config(
            "split",
            format!("requested {n_labeled}+{n_unlabeled}+{n_test} = {requested} samples but the dataset has {}", ids.len()),
        ));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, &["splits".into()]));
    let mut it = shuffled.into_iter();
    let manifest = SplitManifest {
        labeled_ids: it.by_ref().take(n_labeled).collect(),
        unlabeled_ids: it.by_ref().take(n_unlabeled).collect(),
        test_ids: it.take(n_test).collect(),
    };
    manifest.check_disjoint()?;
    Ok(manifest)
}
