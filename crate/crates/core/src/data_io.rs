//! Paired blur/sharp dataset ingestion and result-directory I/O.
//!
//! On-disk layout: `<root>/<split>/<scene_id>/<pair_id>_{blur,sharp}.png`.
//! A `<root>/<split>/manifest.tsv` with lines `pair_id<TAB>blur<TAB>sharp`
//! (paths relative to the split directory, sharp column optional) replaces
//! directory discovery when present.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_NAME: &str = "manifest.tsv";
const BLUR_SUFFIX: &str = "_blur.png";
const SHARP_SUFFIX: &str = "_sharp.png";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn requires_sharp(&self) -> bool {
        matches!(self, Split::Train)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub pair_id: String,
    pub scene_id: String,
    pub blur: PathBuf,
    pub sharp: Option<PathBuf>,
}

/// Deterministic, immutable listing of the pairs in one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    root: PathBuf,
    split: Split,
    entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    /// Builds an index from explicit entries, enforcing the ordering and
    /// uniqueness invariants.
    pub fn from_entries(
        root: impl Into<PathBuf>,
        split: Split,
        mut entries: Vec<IndexEntry>,
    ) -> Result<Self> {
        entries.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
        for w in entries.windows(2) {
            if w[0].pair_id == w[1].pair_id {
                return Err(Error::DuplicatePair(w[0].pair_id.clone()));
            }
        }
        if split.requires_sharp() {
            if let Some(e) = entries.iter().find(|e| e.sharp.is_none()) {
                return Err(Error::MissingSharp {
                    pair_id: e.pair_id.clone(),
                });
            }
        }
        Ok(Self {
            root: root.into(),
            split,
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, pair_id: &str) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by(|e| e.pair_id.as_str().cmp(pair_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn has_ground_truth(&self) -> bool {
        self.entries.iter().all(|e| e.sharp.is_some())
    }

    /// Line-oriented serialization, paths relative to the split directory.
    pub fn to_tsv(&self) -> String {
        let base = self.root.join(self.split.as_str());
        let mut out = String::new();
        for e in &self.entries {
            let rel = |p: &Path| {
                p.strip_prefix(&base)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .replace('\\', "/")
            };
            out.push_str(&e.pair_id);
            out.push('\t');
            out.push_str(&rel(&e.blur));
            out.push('\t');
            if let Some(s) = &e.sharp {
                out.push_str(&rel(s));
            }
            out.push('\n');
        }
        out
    }

    pub fn load_pair(&self, entry: &IndexEntry) -> Result<ImagePair> {
        let sharp_path = entry.sharp.as_ref().ok_or_else(|| Error::MissingSharp {
            pair_id: entry.pair_id.clone(),
        })?;
        ImagePair::new(
            entry.pair_id.clone(),
            entry.scene_id.clone(),
            read_image(&entry.blur)?,
            read_image(sharp_path)?,
        )
    }

    /// Decodes every pair into memory, in index order.
    pub fn load_all(&self) -> Result<Vec<ImagePair>> {
        self.entries.par_iter().map(|e| self.load_pair(e)).collect()
    }
}

/// Aligned blur/sharp pair. Both images always share spatial dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pair_id: String,
    scene_id: String,
    blur: Image,
    sharp: Image,
}

impl ImagePair {
    pub fn new(pair_id: String, scene_id: String, blur: Image, sharp: Image) -> Result<Self> {
        if blur.dims() != sharp.dims() {
            return Err(Error::Shape(format!(
                "pair {pair_id}: blur is {:?} but sharp is {:?}",
                blur.dims(),
                sharp.dims()
            )));
        }
        Ok(Self {
            pair_id,
            scene_id,
            blur,
            sharp,
        })
    }

    pub fn pair_id(&self) -> &str {
        &self.pair_id
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn blur(&self) -> &Image {
        &self.blur
    }

    pub fn sharp(&self) -> &Image {
        &self.sharp
    }

    pub fn dims(&self) -> (usize, usize) {
        self.blur.dims()
    }

    fn map(&self, f: impl Fn(&Image) -> Result<Image>) -> Result<Self> {
        Ok(Self {
            pair_id: self.pair_id.clone(),
            scene_id: self.scene_id.clone(),
            blur: f(&self.blur)?,
            sharp: f(&self.sharp)?,
        })
    }
}

/// Discovers pairs of `split` under `root`. A manifest, when present, wins.
pub fn build_index(root: &Path, split: Split) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let split_dir = root.join(split.as_str());
    let manifest = split_dir.join(MANIFEST_NAME);
    let entries = if manifest.is_file() {
        read_manifest(&manifest, &split_dir)?
    } else {
        discover(&split_dir)?
    };
    if entries.is_empty() {
        return Err(Error::EmptyDataset(split_dir));
    }
    DatasetIndex::from_entries(root, split, entries)
}

fn read_manifest(path: &Path, split_dir: &Path) -> Result<Vec<IndexEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 || cols.len() > 3 {
            return Err(Error::Manifest {
                line: i + 1,
                message: format!("expected 2 or 3 tab-separated columns, got {}", cols.len()),
            });
        }
        let blur = split_dir.join(cols[1]);
        let scene_id = Path::new(cols[1])
            .parent()
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_default();
        let sharp = cols
            .get(2)
            .filter(|s| !s.is_empty())
            .map(|s| split_dir.join(s));
        entries.push(IndexEntry {
            pair_id: cols[0].to_string(),
            scene_id,
            blur,
            sharp,
        });
    }
    Ok(entries)
}

fn discover(split_dir: &Path) -> Result<Vec<IndexEntry>> {
    if !split_dir.is_dir() {
        return Err(Error::MissingRoot(split_dir.to_path_buf()));
    }
    let mut scenes: Vec<PathBuf> = read_dir_sorted(split_dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    scenes.sort();
    let mut entries = Vec::new();
    for scene in scenes {
        let scene_id = scene
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut blurs: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut sharps: BTreeMap<String, PathBuf> = BTreeMap::new();
        for file in read_dir_sorted(&scene)? {
            let name = match file.file_name() {
                Some(n) => n.to_string_lossy().into_owned(),
                None => continue,
            };
            if let Some(id) = name.strip_suffix(BLUR_SUFFIX) {
                blurs.insert(id.to_string(), file);
            } else if let Some(id) = name.strip_suffix(SHARP_SUFFIX) {
                sharps.insert(id.to_string(), file);
            }
        }
        for (pair_id, blur) in blurs {
            let sharp = sharps.remove(&pair_id);
            entries.push(IndexEntry {
                pair_id,
                scene_id: scene_id.clone(),
                blur,
                sharp,
            });
        }
    }
    Ok(entries)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Cuts the same `size × size` window out of blur and sharp. No padding.
pub fn random_crop_pair(pair: &ImagePair, size: usize, rng_seed: u64) -> Result<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    crop_pair_with(pair, size, &mut rng)
}

pub(crate) fn crop_pair_with(
    pair: &ImagePair,
    size: usize,
    rng: &mut impl Rng,
) -> Result<ImagePair> {
    let (h, w) = pair.dims();
    if size == 0 || size > h.min(w) {
        return Err(Error::CropTooLarge {
            size,
            height: h,
            width: w,
        });
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    pair.map(|img| img.crop(top, left, size, size))
}

pub fn flip_augment(pair: &ImagePair, horizontal: bool, vertical: bool) -> ImagePair {
    let flip = |img: &Image| {
        let mut out = img.clone();
        if horizontal {
            out = out.flip_horizontal();
        }
        if vertical {
            out = out.flip_vertical();
        }
        Ok(out)
    };
    pair.map(flip).expect("flips are infallible")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StridePolicy {
    /// stride = patch size
    NonOverlapping,
    /// stride = patch size / 2
    Overlap,
}

impl StridePolicy {
    pub fn stride(&self, size: usize) -> usize {
        match self {
            StridePolicy::NonOverlapping => size,
            StridePolicy::Overlap => (size / 2).max(1),
        }
    }
}

/// Top-left corners of the patch grid along one axis.
pub fn patch_origins(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    if size > extent {
        return Vec::new();
    }
    (0..=extent - size).step_by(stride).collect()
}

#[derive(Clone, Debug)]
pub struct PrecropOutcome {
    pub index: DatasetIndex,
    /// (pair, size) combinations skipped because the image was smaller than the patch.
    pub skipped: usize,
}

/// Writes a patch dataset mirroring the main layout under `out_root`.
pub fn precrop_patches(
    index: &DatasetIndex,
    sizes: &[usize],
    stride_policy: StridePolicy,
    out_root: &Path,
) -> Result<PrecropOutcome> {
    let split_dir = out_root.join(index.split().as_str());
    fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;

    let per_entry: Vec<Result<(Vec<IndexEntry>, usize)>> = index
        .entries()
        .par_iter()
        .map(|entry| {
            let blur = read_image(&entry.blur)?;
            let sharp = match &entry.sharp {
                Some(p) => Some(read_image(p)?),
                None => None,
            };
            let scene_dir = split_dir.join(&entry.scene_id);
            fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
            let (h, w) = blur.dims();
            let mut produced = Vec::new();
            let mut skipped = 0;
            for &size in sizes {
                if size > h.min(w) {
                    log::warn!(
                        "skipping {} for patch size {size}: image is {h}x{w}",
                        entry.pair_id
                    );
                    skipped += 1;
                    continue;
                }
                let stride = stride_policy.stride(size);
                for &top in &patch_origins(h, size, stride) {
                    for &left in &patch_origins(w, size, stride) {
                        let pair_id = format!("{}_p{size}_{top}_{left}", entry.pair_id);
                        let blur_path = scene_dir.join(format!("{pair_id}{BLUR_SUFFIX}"));
                        write_png(&blur.crop(top, left, size, size)?, &blur_path)?;
                        let sharp_path = match &sharp {
                            Some(s) => {
                                let p = scene_dir.join(format!("{pair_id}{SHARP_SUFFIX}"));
                                write_png(&s.crop(top, left, size, size)?, &p)?;
                                Some(p)
                            }
                            None => None,
                        };
                        produced.push(IndexEntry {
                            pair_id,
                            scene_id: entry.scene_id.clone(),
                            blur: blur_path,
                            sharp: sharp_path,
                        });
                    }
                }
            }
            Ok((produced, skipped))
        })
        .collect();

    let mut entries = Vec::new();
    let mut skipped = 0;
    for r in per_entry {
        let (e, s) = r?;
        entries.extend(e);
        skipped += s;
    }
    let index = DatasetIndex::from_entries(out_root, index.split(), entries)?;
    Ok(PrecropOutcome { index, skipped })
}

/// Round-half-up 8-bit quantization. Out-of-range input saturates.
pub fn quantize(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[derive(Clone, Debug)]
pub struct WriteOutcome {
    pub path: PathBuf,
    /// Number of values that were outside `[0, 1]` (or NaN) and got clamped.
    pub clamped: usize,
}

/// Writes `<out_root>/<pair_id>.png` losslessly.
pub fn write_result(image: &Image, pair_id: &str, out_root: &Path) -> Result<WriteOutcome> {
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let clamped = image
        .data()
        .iter()
        .filter(|v| v.is_nan() || **v < 0.0 || **v > 1.0)
        .count();
    if clamped > 0 {
        log::warn!("{pair_id}: clamped {clamped} out-of-range values");
    }
    let path = out_root.join(format!("{pair_id}.png"));
    write_png(image, &path)?;
    Ok(WriteOutcome { path, clamped })
}

pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.data().iter().map(|v| quantize(*v)).collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Decodes any PNG into RGB with values `byte / 255`.
pub fn read_image(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|b| b as f32 / 255.0)
        .collect();
    Image::from_vec(h as usize, w as usize, data)
}
