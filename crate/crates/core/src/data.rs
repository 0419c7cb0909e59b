//! Paired low/normal-light data: directory scanning, PNG I/O, crops, flips and
//! background prefetch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use image::{DynamicImage, GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOW_DIR: &str = "low";
pub const HIGH_DIR: &str = "high";

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub low: Tensor,
    pub gt: Tensor,
    pub id: String,
}

impl PairedSample {
    pub fn new(low: Tensor, gt: Tensor, id: impl Into<String>) -> Result<Self> {
        if low.shape() != gt.shape() {
            return Err(Error::Dataset(format!(
                "low {:?} and gt {:?} differ in shape",
                low.shape(),
                gt.shape()
            )));
        }
        low.chw()?;
        Ok(Self {
            low,
            gt,
            id: id.into(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub low: PathBuf,
    pub gt: PathBuf,
    pub id: String,
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    /// Sorted by id.
    pub pairs: Vec<PairPaths>,
    /// Stems present on only one side, sorted.
    pub unmatched: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<PairedSample> {
        let p = &self.pairs[i];
        PairedSample::new(load_image(&p.low)?, load_image(&p.gt)?, p.id.clone())
            .map_err(|e| Error::Dataset(format!("pair {}: {e}", p.id)))
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Pairs `<root>/low/*.png` with `<root>/high/*.png` by file stem.
pub fn scan_dataset(root: &Path, split: Split) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let low = png_stems(&root.join(LOW_DIR))?;
    let high = png_stems(&root.join(HIGH_DIR))?;
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (stem, low_path) in &low {
        match high.get(stem) {
            Some(gt) => pairs.push(PairPaths {
                low: low_path.clone(),
                gt: gt.clone(),
                id: stem.clone(),
            }),
            None => unmatched.push(stem.clone()),
        }
    }
    unmatched.extend(high.keys().filter(|s| !low.contains_key(*s)).cloned());
    unmatched.sort();
    for stem in &unmatched {
        log::warn!("{}: no counterpart for {stem}, skipped", root.display());
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no matched pairs; unmatched stems: [{}]",
            root.display(),
            unmatched.join(", ")
        )));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        pairs,
        unmatched,
    })
}

/// Reads an 8-bit image as `[3, H, W]` in `[0, 1]`. Gray is promoted to RGB,
/// alpha is dropped.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("decoded image has positive size")
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes a `[3, H, W]` or `[1, H, W]` tensor as 8-bit PNG, rounding half up.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = t.chw()?;
    let plane = h * w;
    let d = t.data();
    let img = match c {
        3 => {
            let mut raw = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                raw.extend([d[i], d[plane + i], d[2 * plane + i]].map(quantize));
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
        }
        1 => {
            let raw = d.iter().map(|&v| quantize(v)).collect();
            DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
        }
        _ => {
            return Err(Error::shape(
                "save_image",
                format!("expected 1 or 3 channels, got {c}"),
            ))
        }
    };
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// `[C, size_h, size_w]` window with top-left corner `(y, x)`.
pub fn crop(t: &Tensor, y: usize, x: usize, size_h: usize, size_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if y + size_h > h || x + size_w > w {
        return Err(Error::shape(
            "crop",
            format!("window {size_h}x{size_w} at ({y}, {x}) exceeds {h}x{w}"),
        ));
    }
    let mut out = Vec::with_capacity(c * size_h * size_w);
    for ch in 0..c {
        for row in y..y + size_h {
            let start = (ch * h + row) * w + x;
            out.extend_from_slice(&t.data()[start..start + size_w]);
        }
    }
    Tensor::new(&[c, size_h, size_w], out)
}

pub fn hflip(t: &Tensor) -> Tensor {
    let (c, h, w) = t.chw().expect("rank-3 tensor");
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for row in 0..c * h {
        for x in 0..w {
            out[row * w + x] = src[row * w + w - 1 - x];
        }
    }
    Tensor::new(t.shape(), out).expect("same shape")
}

/// The same random `size x size` window of both images.
pub fn random_patch_pair(s: &PairedSample, size: usize, seed: u64) -> Result<PairedSample> {
    let (_, h, w) = s.low.chw()?;
    if size == 0 || size > h.min(w) {
        return Err(Error::invalid(format!(
            "patch size {size} does not fit a {h}x{w} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = rng.gen_range(0..=h - size);
    let x = rng.gen_range(0..=w - size);
    Ok(PairedSample {
        low: crop(&s.low, y, x, size, size)?,
        gt: crop(&s.gt, y, x, size, size)?,
        id: s.id.clone(),
    })
}

/// Horizontal flip of both images with probability one half.
pub fn augment(s: PairedSample, seed: u64) -> PairedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.gen_bool(0.5) {
        PairedSample {
            low: hflip(&s.low),
            gt: hflip(&s.gt),
            id: s.id,
        }
    } else {
        s
    }
}

/// Stream of seeds for independent purposes derived from one master seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    for &p in parts {
        rng = ChaCha8Rng::seed_from_u64(rng.gen::<u64>() ^ p);
    }
    rng.gen()
}

/// Indexable source of paired samples.
pub trait SampleSource: Send + Sync {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<PairedSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for DatasetIndex {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn get(&self, i: usize) -> Result<PairedSample> {
        self.load(i)
    }
}

impl SampleSource for Vec<PairedSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, i: usize) -> Result<PairedSample> {
        Ok(self[i].clone())
    }
}

/// Runs an iterator on a background thread, handing items over a bounded queue.
pub struct Prefetch<T> {
    rx: Receiver<T>,
    worker: Option<JoinHandle<()>>,
}

impl<T: Send + 'static> Prefetch<T> {
    pub fn spawn<I>(items: I, depth: usize) -> Self
    where
        I: Iterator<Item = T> + Send + 'static,
    {
        let (tx, rx) = sync_channel(depth.max(1));
        let worker = std::thread::spawn(move || {
            for item in items {
                if tx.send(item).is_err() {
                    break;
                }
            }
        });
        Self {
            rx,
            worker: Some(worker),
        }
    }
}

impl<T> Iterator for Prefetch<T> {
    type Item = T;

    fn next(&mut self) -> Option<T> {
        self.rx.recv().ok()
    }
}

impl<T> Drop for Prefetch<T> {
    fn drop(&mut self) {
        // Unblock a worker waiting on a full queue before joining it.
        let (_, dummy) = sync_channel(1);
        drop(std::mem::replace(&mut self.rx, dummy));
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// One training sample request: which pair, and the crop/flip seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleJob {
    pub index: usize,
    pub seed: u64,
}

/// Loads, crops (when `patch` is set) and flips each job on a background thread.
pub fn prefetch_samples(
    source: Arc<dyn SampleSource>,
    jobs: Vec<SampleJob>,
    patch: Option<usize>,
    flip: bool,
    depth: usize,
) -> Prefetch<Result<PairedSample>> {
    let iter = jobs.into_iter().map(move |job| {
        let s = source.get(job.index)?;
        let s = match patch {
            Some(size) => {
                let (_, h, w) = s.low.chw()?;
                random_patch_pair(&s, size.min(h).min(w), derive_seed(job.seed, &[0]))?
            }
            None => s,
        };
        Ok(if flip { augment(s, derive_seed(job.seed, &[1])) } else { s })
    });
    Prefetch::spawn(iter, depth)
}
