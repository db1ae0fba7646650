//! Clip preprocessing, frame-directory ingestion and a synthetic gesture set.
//!
//! Clips are kept as 8-bit codes `(1, T, H, W, 1)`; the `1/255` input scale is
//! applied after the stem convolution (see [`crate::refnet::INPUT_SCALE`]).

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refnet::INPUT_SCALE;
use crate::tensor::Tensor5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing frames in {dir}: {detail}")]
    MissingFrames { dir: PathBuf, detail: String },
    #[error("bad resolution in {path}: {detail}")]
    BadResolution { path: PathBuf, detail: String },
    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Clips longer than this are downsampled by two before fitting.
pub const DOWNSAMPLE_ABOVE: usize = 24;

/// Frame indices that turn a clip of `t_raw` frames into `target` frames.
///
/// Long clips keep their even frames. Short results are padded by repeating
/// the first and last frame, alternating and starting at the front. Long
/// results are cut to a window with a random start.
pub fn temporal_fit(t_raw: usize, target: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(t_raw >= 1, "a clip has at least one frame");
    let base: Vec<usize> = if t_raw > DOWNSAMPLE_ABOVE {
        (0..t_raw).step_by(2).collect()
    } else {
        (0..t_raw).collect()
    };
    if base.len() >= target {
        let start = rng.gen_range(0..=base.len() - target);
        return base[start..start + target].to_vec();
    }
    let deficit = target - base.len();
    let front = deficit.div_ceil(2);
    let back = deficit / 2;
    let mut out = vec![base[0]; front];
    out.extend_from_slice(&base);
    out.extend(std::iter::repeat_n(*base.last().expect("non-empty"), back));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub frames: usize,
    pub label: usize,
    pub path: PathBuf,
}

/// A clip of 8-bit codes `(1, T, H, W, 1)` with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub codes: Tensor5,
    pub label: usize,
}

// ---------------------------------------------------------------------------
// Synthetic gestures

/// A set of moving-blob clips. Class `k` moves a bright square in direction
/// `k` (right, left, down, up, then the diagonals) with wrap-around, from a
/// uniformly random start, so every single frame has the same distribution
/// for every class. Only the motion identifies the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub clips: usize,
    /// Standard deviation of the additive pixel noise, in codes.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The desk-scale gesture task: 4 classes, 8 frames of 24x32, 2000 clips.
    pub fn toy(seed: u64) -> Self {
        Self {
            classes: 4,
            frames: 8,
            height: 24,
            width: 32,
            clips: 2000,
            noise: 24.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(2..=DIRECTIONS.len()).contains(&self.classes) {
            return Err(DataError::BadSpec(format!("{} classes, supported 2..=8", self.classes)));
        }
        if self.frames < 2 || self.height < BLOB || self.width < BLOB {
            return Err(DataError::BadSpec(format!(
                "clip {}x{}x{} too small",
                self.frames, self.height, self.width
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(DataError::BadSpec(format!("noise {}", self.noise)));
        }
        Ok(())
    }
}

const DIRECTIONS: [(i64, i64); 8] = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1)];
const BLOB: usize = 6;
const BACKGROUND: f64 = 0.0;
const FOREGROUND: f64 = 200.0;

/// One synthetic clip; depends only on `(spec, index)`.
pub fn synthetic_clip(spec: &SyntheticSpec, index: usize) -> Clip {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let label = index % spec.classes;
    let (dy, dx) = DIRECTIONS[label];
    let (h, w) = (spec.height as i64, spec.width as i64);
    let speed = rng.gen_range(2..=3);
    let y0 = rng.gen_range(0..h);
    let x0 = rng.gen_range(0..w);
    let codes = Tensor5::from_fn([1, spec.frames, spec.height, spec.width, 1], |[_, t, y, x, _]| {
        let cy = (y0 + dy * speed * t as i64).rem_euclid(h);
        let cx = (x0 + dx * speed * t as i64).rem_euclid(w);
        // wrap-around distance from the blob corner
        let ry = (y as i64 - cy).rem_euclid(h);
        let rx = (x as i64 - cx).rem_euclid(w);
        let inside = ry < BLOB as i64 && rx < BLOB as i64;
        let base = if inside { FOREGROUND } else { BACKGROUND };
        (base + gaussian(&mut rng) * spec.noise).round().clamp(0.0, 255.0)
    });
    Clip { codes, label }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 in (0, 1]
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// The whole synthetic set, labels cycling through the classes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Clip>> {
    spec.validate()?;
    Ok((0..spec.clips).into_par_iter().map(|i| synthetic_clip(spec, i)).collect())
}

/// Deterministic split: every `k`-th clip goes to the test set.
pub fn split_every(clips: Vec<Clip>, k: usize) -> (Vec<Clip>, Vec<Clip>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, c) in clips.into_iter().enumerate() {
        if i % k == k - 1 {
            test.push(c);
        } else {
            train.push(c);
        }
    }
    (train, test)
}

/// Clips and labels as separate vectors.
pub fn unzip(clips: &[Clip]) -> (Vec<Tensor5>, Vec<usize>) {
    clips.iter().map(|c| (c.codes.clone(), c.label)).unzip()
}

// ---------------------------------------------------------------------------
// Frame directories

fn frame_number(path: &Path) -> Option<usize> {
    let name = path.file_name()?.to_str()?;
    let digits = name.strip_prefix("frame_")?.strip_suffix(".pgm")?;
    digits.parse().ok()
}

/// Reads the numbered frames `frame_%05d.pgm` of one clip directory. The
/// numbering must be contiguous and every frame must share one resolution.
pub fn ingest_frames(dir: &Path) -> Result<Vec<GrayImage>> {
    let mut numbered: Vec<(usize, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| frame_number(&p).map(|n| (n, p)))
        .collect();
    numbered.sort();
    let missing = |detail: String| DataError::MissingFrames {
        dir: dir.to_path_buf(),
        detail,
    };
    if numbered.is_empty() {
        return Err(missing("no frame_*.pgm files".into()));
    }
    for (pair, expect) in numbered.windows(2).zip(numbered[0].0 + 1..) {
        if pair[1].0 != expect {
            return Err(missing(format!("frame {expect} missing, next is {}", pair[1].0)));
        }
    }
    let mut frames = Vec::with_capacity(numbered.len());
    for (_, path) in &numbered {
        let img = image::open(path)?;
        if img.color() != image::ColorType::L8 {
            return Err(DataError::BadResolution {
                path: path.clone(),
                detail: format!("{:?}, expected 8-bit grayscale", img.color()),
            });
        }
        let img = img.into_luma8();
        if img.width() == 0 || img.height() == 0 {
            return Err(DataError::BadResolution {
                path: path.clone(),
                detail: "empty frame".into(),
            });
        }
        if let Some(first) = frames.first() {
            let first: &GrayImage = first;
            if first.dimensions() != img.dimensions() {
                return Err(DataError::BadResolution {
                    path: path.clone(),
                    detail: format!("{:?} differs from {:?}", img.dimensions(), first.dimensions()),
                });
            }
        }
        frames.push(img);
    }
    Ok(frames)
}

/// Aspect-preserving resize to cover `height x width`, then a center crop.
pub fn fit_frame(img: &GrayImage, height: usize, width: usize) -> GrayImage {
    let (w0, h0) = img.dimensions();
    if (w0 as usize, h0 as usize) == (width, height) {
        return img.clone();
    }
    let s = f64::max(width as f64 / w0 as f64, height as f64 / h0 as f64);
    let rw = ((w0 as f64 * s).round() as u32).max(width as u32);
    let rh = ((h0 as f64 * s).round() as u32).max(height as u32);
    let resized = imageops::resize(img, rw, rh, FilterType::Triangle);
    let x = (rw - width as u32) / 2;
    let y = (rh - height as u32) / 2;
    imageops::crop_imm(&resized, x, y, width as u32, height as u32).to_image()
}

/// Stacks frames into the model input: 8-bit codes, `(1, T, H, W, 1)`.
pub fn binarize_stem_input(frames: &[GrayImage]) -> Tensor5 {
    let (w, h) = frames[0].dimensions();
    let (w, h) = (w as usize, h as usize);
    Tensor5::from_fn([1, frames.len(), h, w, 1], |[_, t, y, x, _]| {
        f64::from(frames[t].get_pixel(x as u32, y as u32).0[0])
    })
}

/// The `[0, 1]` values the codes stand for.
pub fn unit_range(codes: &Tensor5) -> Tensor5 {
    codes.map(|v| v * INPUT_SCALE)
}

/// Loads one clip directory as model input of `frames x height x width`.
pub fn load_clip(dir: &Path, frames: usize, height: usize, width: usize, rng: &mut impl Rng) -> Result<Tensor5> {
    let raw = ingest_frames(dir)?;
    let picked: Vec<GrayImage> = temporal_fit(raw.len(), frames, rng)
        .into_iter()
        .map(|i| fit_frame(&raw[i], height, width))
        .collect();
    Ok(binarize_stem_input(&picked))
}

/// Writes a row-major 8-bit grayscale image as binary PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, pixels.to_vec()).ok_or_else(|| DataError::BadResolution {
        path: path.to_path_buf(),
        detail: format!("{} pixels for {width}x{height}", pixels.len()),
    })?;
    img.save(path)?;
    Ok(())
}

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub clip_id: String,
    pub class: usize,
    pub frame_count: usize,
}

fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("frame_{i:05}.pgm"))
}

/// Writes clips as `<root>/<class>/<clip_id>/frame_%05d.pgm` plus a manifest.
pub fn write_dataset(root: &Path, clips: &[Clip]) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut manifest = csv::Writer::from_path(root.join(MANIFEST))?;
    for (i, clip) in clips.iter().enumerate() {
        let [_, t, h, w, _] = clip.codes.shape();
        let clip_id = format!("{i:06}");
        let dir = root.join(clip.label.to_string()).join(&clip_id);
        fs::create_dir_all(&dir)?;
        for ti in 0..t {
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([clip.codes.get([0, ti, y as usize, x as usize, 0]) as u8])
            });
            img.save(frame_path(&dir, ti))?;
        }
        manifest.serialize(ManifestRow {
            clip_id,
            class: clip.label,
            frame_count: t,
        })?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(root.join(MANIFEST))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Loads every clip of a dataset directory. Clip `i` draws its temporal
/// window from stream `i` of `seed`, so the result is independent of
/// scheduling.
pub fn read_dataset(root: &Path, frames: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Clip>> {
    let rows = read_manifest(root)?;
    rows.par_iter()
        .enumerate()
        .map(|(i, row)| {
            let dir = root.join(row.class.to_string()).join(&row.clip_id);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let codes = load_clip(&dir, frames, height, width, &mut rng)?;
            let found = fs::read_dir(&dir)?.filter_map(|e| e.ok()).filter(|e| frame_number(&e.path()).is_some()).count();
            if found != row.frame_count {
                return Err(DataError::BadManifest(format!(
                    "clip {} lists {} frames, found {found}",
                    row.clip_id, row.frame_count
                )));
            }
            Ok(Clip { codes, label: row.class })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Adam, Tape};
    use std::collections::BTreeMap;

    fn fit(t: usize, seed: u64) -> Vec<usize> {
        temporal_fit(t, 16, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn temporal_fit_cases() {
        // 12: no downsample, 4 pad frames split 2 front / 2 back
        let mut want = vec![0, 0];
        want.extend(0..12);
        want.extend([11, 11]);
        assert_eq!(fit(12, 0), want);
        // 24: no downsample, 16 of 24 consecutive
        let w = fit(24, 1);
        assert!(w.windows(2).all(|p| p[1] == p[0] + 1) && w[0] <= 8);
        // 25: downsample to 13, 3 pad frames, front first
        let mut want = vec![0, 0];
        want.extend((0..25).step_by(2));
        want.push(24);
        assert_eq!(fit(25, 0), want);
        // 30: 15 frames, one pad at the front
        let mut want = vec![0];
        want.extend((0..30).step_by(2));
        assert_eq!(fit(30, 0), want);
        // 40: 20 frames, window start in 0..=4
        let mut starts = std::collections::BTreeSet::new();
        for s in 0..200 {
            let w = fit(40, s);
            assert_eq!(w.len(), 16);
            assert!(w.windows(2).all(|p| p[1] == p[0] + 2));
            starts.insert(w[0] / 2);
        }
        assert_eq!(starts, (0..=4).collect());
        // 70: 35 frames, window start in 0..=19
        for s in 0..50 {
            let w = fit(70, s);
            assert!(w[0] / 2 <= 19 && w.iter().all(|i| i % 2 == 0) && *w.last().unwrap() < 70);
        }
    }

    #[test]
    fn temporal_fit_properties() {
        for t in 1..=80 {
            for s in 0..3 {
                let w = fit(t, s);
                assert_eq!(w.len(), 16);
                assert!(w.windows(2).all(|p| p[0] <= p[1]));
                let d = if t > DOWNSAMPLE_ABOVE { 2 } else { 1 };
                assert!(w.iter().all(|&i| i / d < t.div_ceil(d) && i % d == 0));
            }
            assert_eq!(fit(t, 9), fit(t, 9));
        }
    }

    fn small_spec(clips: usize) -> SyntheticSpec {
        SyntheticSpec {
            clips,
            ..SyntheticSpec::toy(7)
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = generate_synthetic(&small_spec(103)).unwrap();
        let b = generate_synthetic(&small_spec(103)).unwrap();
        assert_eq!(a, b);
        let mut hist = [0usize; 4];
        for c in &a {
            hist[c.label] += 1;
            assert_eq!(c.codes.shape(), [1, 8, 24, 32, 1]);
            assert!(c.codes.data().iter().all(|v| v.fract() == 0.0 && (0.0..=255.0).contains(v)));
        }
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
        assert!(generate_synthetic(&SyntheticSpec {
            classes: 9,
            ..small_spec(4)
        })
        .is_err());
    }

    /// Softmax regression on one frame; returns held-out accuracy.
    fn single_frame_probe(train: &[Clip], test: &[Clip], frame: usize, classes: usize) -> f64 {
        let feats = |c: &Clip| -> Vec<f64> {
            let [_, _, h, w, _] = c.codes.shape();
            let mut f: Vec<f64> = (0..h * w).map(|p| c.codes.get([0, frame, p / w, p % w, 0]) / 255.0).collect();
            f.push(1.0);
            f
        };
        let k = feats(&train[0]).len();
        let rows: Vec<f64> = train.iter().flat_map(feats).collect();
        let x = Tensor5::new([train.len(), 1, 1, 1, k], rows).unwrap();
        let labels: Vec<usize> = train.iter().map(|c| c.label).collect();
        let mut params = BTreeMap::from([("w".to_string(), Tensor5::zeros([1, 1, 1, k, classes]))]);
        let mut adam = Adam::new();
        for _ in 0..300 {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let wv = tape.param("w", params["w"].clone());
            let z = tape.matmul(xv, wv).unwrap();
            let loss = tape.softmax_cce(z, &labels).unwrap();
            let g = tape.backward(loss, &["w".into()]).unwrap();
            adam.step(&mut params, &g, 0.01);
        }
        let w = &params["w"];
        let hits = test
            .iter()
            .filter(|c| {
                let f = feats(c);
                let scores: Vec<f64> = (0..classes)
                    .map(|j| f.iter().enumerate().map(|(i, v)| v * w.data()[i * classes + j]).sum())
                    .collect();
                crate::refnet::argmax(&scores) == c.label
            })
            .count();
        hits as f64 / test.len() as f64
    }

    #[test]
    fn single_frame_linear_probe_stays_near_chance() {
        let clips = generate_synthetic(&small_spec(2000)).unwrap();
        let (train, test) = split_every(clips, 5);
        let acc = single_frame_probe(&train, &test, 4, 4);
        assert!(acc <= 0.35, "single-frame accuracy {acc}");
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = std::env::temp_dir().join(format!("billnet-data-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let clips = generate_synthetic(&small_spec(6)).unwrap();
        write_dataset(&dir, &clips).unwrap();
        let back = read_dataset(&dir, 8, 24, 32, 0).unwrap();
        assert_eq!(back, clips);
        let rows = read_manifest(&dir).unwrap();
        assert_eq!(rows[1], ManifestRow { clip_id: "000001".into(), class: 1, frame_count: 8 });

        // gap in the numbering
        let clip_dir = dir.join("0").join("000000");
        fs::remove_file(frame_path(&clip_dir, 3)).unwrap();
        assert!(matches!(ingest_frames(&clip_dir), Err(DataError::MissingFrames { .. })));
        // mixed resolutions
        let odd = dir.join("1").join("000001");
        GrayImage::new(10, 10).save(frame_path(&odd, 2)).unwrap();
        assert!(matches!(ingest_frames(&odd), Err(DataError::BadResolution { .. })));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pgm_clip_shape_and_scaling() {
        let dir = std::env::temp_dir().join(format!("billnet-pgm-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        for i in 1..=16 {
            GrayImage::from_pixel(128, 96, image::Luma([128])).save(frame_path(&dir, i)).unwrap();
        }
        let x = load_clip(&dir, 16, 96, 128, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(x.shape(), [1, 16, 96, 128, 1]);
        let u = unit_range(&x);
        assert!(u.data().iter().all(|&v| (v - 0.5019).abs() < 1e-4 && v == 128.0 / 255.0));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn fit_frame_center_crops() {
        // 40 wide x 20 high, left half dark and right half bright; fit to 10x10
        let img = GrayImage::from_fn(40, 20, |x, _| image::Luma([if x < 20 { 0 } else { 255 }]));
        let out = fit_frame(&img, 10, 10);
        assert_eq!(out.dimensions(), (10, 10));
        // scale 0.5 -> 20x10, crop x in 5..15: the edge lands in the middle
        assert!(out.get_pixel(0, 5).0[0] < 10 && out.get_pixel(9, 5).0[0] > 245);
    }
}
