//! Dataset ingestion, augmentation, and the P×K identity sampler.

mod augment;
mod sampler;
mod synth;


pub use augment::{
    augment, erase_rect, hflip, normalize, random_erasing, resize_bilinear, AugmentConfig,
    ReaConfig,
};
pub use sampler::{BatchSpec, PkSampler};
pub use synth::{save_png, synth_dataset, SynthConfig, SynthManifest};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot parse re-id filename '{name}': {detail}")]
    Parse { name: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("split references missing image: {0}")]
    MissingFile(PathBuf),
    #[error("dataset config error: {0}")]
    Config(String),
    #[error("split file error: {0}")]
    Split(String),
    #[error("image decode error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// deterministic RNG streams

/// Derive an independent, portable RNG from the root seed, a stream tag,
/// and an index. Counter-based splitting keeps parallel sample preparation
/// independent of worker scheduling.
pub fn derive_rng(root_seed: u64, stream: u64, index: u64) -> ChaCha12Rng {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
    let mixed = splitmix(splitmix(root_seed ^ stream.wrapping_mul(0xA24BAED4963EE407)) ^ index);
    ChaCha12Rng::seed_from_u64(mixed)
}

/// Stream tags for [`derive_rng`].
pub mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const SAMPLER: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SYNTH_ID: u64 = 4;
    pub const SYNTH_SAMPLE: u64 = 5;
}

// ---------------------------------------------------------------------------
// samples and the dataset index

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleFlag {
    Normal,
    /// pid −1: kept in the gallery as a negative, never relevant.
    Distractor,
    /// pid 0: excluded from scoring entirely.
    Junk,
}

impl SampleFlag {
    pub fn from_pid(pid: i64) -> SampleFlag {
        match pid {
            -1 => SampleFlag::Distractor,
            0 => SampleFlag::Junk,
            _ => SampleFlag::Normal,
        }
    }

    pub fn as_byte(&self) -> u8 {
        match self {
            SampleFlag::Normal => 0,
            SampleFlag::Distractor => 1,
            SampleFlag::Junk => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<SampleFlag> {
        match b {
            0 => Some(SampleFlag::Normal),
            1 => Some(SampleFlag::Distractor),
            2 => Some(SampleFlag::Junk),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Query,
    Gallery,
}

/// A decoded image: 3 channels, row-major CHW, values in [0,1].
#[derive(Debug, Clone)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Image {
        Image {
            h,
            w,
            data: vec![0.0; 3 * h * w],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let plane = self.h * self.w;
        let mut means = [0.0; 3];
        for (c, m) in means.iter_mut().enumerate() {
            *m = self.data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        means
    }
}

/// Where the sample's pixels live.
#[derive(Debug, Clone)]
pub enum ImageSource {
    /// Synthetic or pre-decoded pixels, 8 bits per channel, CHW.
    Memory {
        h: usize,
        w: usize,
        rgb: Arc<Vec<u8>>,
    },
    Disk(PathBuf),
}

impl ImageSource {
    pub fn load(&self) -> Result<Image> {
        match self {
            ImageSource::Memory { h, w, rgb } => {
                let mut img = Image::new(*h, *w);
                for (dst, &src) in img.data.iter_mut().zip(rgb.iter()) {
                    *dst = src as f64 / 255.0;
                }
                Ok(img)
            }
            ImageSource::Disk(path) => {
                let decoded = image::open(path).map_err(|e| DataError::Image {
                    path: path.clone(),
                    detail: e.to_string(),
                })?;
                let rgb = decoded.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let mut img = Image::new(h, w);
                for y in 0..h {
                    for x in 0..w {
                        let px = rgb.get_pixel(x as u32, y as u32);
                        for c in 0..3 {
                            img.set(c, y, x, px.0[c] as f64 / 255.0);
                        }
                    }
                }
                Ok(img)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub source: ImageSource,
    pub pid: i64,
    pub camid: i64,
    pub role: Role,
    pub flag: SampleFlag,
}

/// Per-channel normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ChannelStats {
    /// The conventional pretrained-backbone constants.
    fn default() -> Self {
        ChannelStats {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// An indexed dataset: ordered samples, the train-identity map, and the
/// normalization statistics. Immutable after construction.
pub struct DatasetIndex {
    pub samples: Vec<Sample>,
    /// pid → positions of its normal-flag train samples.
    pub id_to_indices: BTreeMap<i64, Vec<usize>>,
    /// pid → contiguous class label, in order of first appearance in the
    /// train split.
    pub class_of_pid: BTreeMap<i64, usize>,
    pub stats: ChannelStats,
}

impl DatasetIndex {
    pub fn build(samples: Vec<Sample>, stats: ChannelStats) -> DatasetIndex {
        let mut id_to_indices: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        let mut class_of_pid = BTreeMap::new();
        let mut next_class = 0usize;
        for (i, s) in samples.iter().enumerate() {
            if s.role == Role::Train && s.flag == SampleFlag::Normal {
                id_to_indices.entry(s.pid).or_default().push(i);
                class_of_pid.entry(s.pid).or_insert_with(|| {
                    let c = next_class;
                    next_class += 1;
                    c
                });
            }
        }
        DatasetIndex {
            samples,
            id_to_indices,
            class_of_pid,
            stats,
        }
    }

    pub fn role_indices(&self, role: Role) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role == role)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_of_pid.len()
    }

    pub fn class_label(&self, pid: i64) -> Option<usize> {
        self.class_of_pid.get(&pid).copied()
    }
}

// ---------------------------------------------------------------------------
// filename convention

static REID_NAME: OnceLock<Regex> = OnceLock::new();

/// Parse the community re-id naming convention
/// `<pid>_c<cam>s<seq>_<rest>.<jpg|png>`; pid −1 marks a distractor and
/// pid 0 marks junk.
pub fn parse_reid_filename(name: &str) -> Result<(i64, i64, SampleFlag)> {
    let re = REID_NAME
        .get_or_init(|| Regex::new(r"^(-?\d+)_c(\d+)s(\d+)_.*\.(jpg|png)$").expect("static regex"));
    let caps = re.captures(name).ok_or_else(|| DataError::Parse {
        name: name.to_string(),
        detail: "expected <pid>_c<cam>s<seq>_*.jpg|png".to_string(),
    })?;
    let pid: i64 = caps[1].parse().map_err(|e| DataError::Parse {
        name: name.to_string(),
        detail: format!("pid: {e}"),
    })?;
    let camid: i64 = caps[2].parse().map_err(|e| DataError::Parse {
        name: name.to_string(),
        detail: format!("camid: {e}"),
    })?;
    Ok((pid, camid, SampleFlag::from_pid(pid)))
}

// ---------------------------------------------------------------------------
// directory layout loading

const TRAIN_DIR: &str = "bounding_box_train";
const QUERY_DIR: &str = "query";
const GALLERY_DIR: &str = "bounding_box_test";

fn scan_dir(root: &Path, sub: &str, role: Role) -> Result<Vec<Sample>> {
    let dir = root.join(sub);
    let entries = std::fs::read_dir(&dir).map_err(io_err(&dir))?;
    let mut names: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e, "jpg" | "png"))
        })
        .collect();
    names.sort();
    let mut samples = Vec::with_capacity(names.len());
    for path in names {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let (pid, camid, flag) = parse_reid_filename(&name).map_err(|e| match e {
            DataError::Parse { detail, .. } => DataError::Parse {
                name: path.display().to_string(),
                detail,
            },
            other => other,
        })?;
        samples.push(Sample {
            source: ImageSource::Disk(path),
            pid,
            camid,
            role,
            flag,
        });
    }
    Ok(samples)
}

/// Load a market-style directory layout:
/// `root/{bounding_box_train,query,bounding_box_test}/` with the filename
/// convention above. Normalization statistics default to the conventional
/// constants.
pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    let mut samples = scan_dir(root, TRAIN_DIR, Role::Train)?;
    let train_count = samples.len();
    samples.extend(scan_dir(root, QUERY_DIR, Role::Query)?);
    samples.extend(scan_dir(root, GALLERY_DIR, Role::Gallery)?);
    if train_count == 0 {
        return Err(DataError::Config(format!(
            "empty train directory {} — training impossible",
            root.join(TRAIN_DIR).display()
        )));
    }
    Ok(DatasetIndex::build(samples, ChannelStats::default()))
}

// ---------------------------------------------------------------------------
// split files

#[derive(Debug, Serialize, Deserialize)]
struct SplitEntry {
    file: String,
    pid: i64,
    camid: i64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitFile {
    train: Vec<SplitEntry>,
    query: Vec<SplitEntry>,
    gallery: Vec<SplitEntry>,
}

/// Build a dataset from an explicit split description: a JSON object with
/// "train", "query" and "gallery" lists of {file, pid, camid}. Every
/// referenced image must exist under `root`; an empty query list is an
/// error (evaluation undefined).
pub fn load_split(root: &Path, split_path: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(split_path).map_err(io_err(split_path))?;
    let split: SplitFile =
        serde_json::from_str(&text).map_err(|e| DataError::Split(e.to_string()))?;
    if split.query.is_empty() {
        return Err(DataError::Split(
            "empty query list — evaluation undefined".into(),
        ));
    }
    let mut samples = Vec::new();
    for (entries, role) in [
        (&split.train, Role::Train),
        (&split.query, Role::Query),
        (&split.gallery, Role::Gallery),
    ] {
        for e in entries {
            let path = root.join(&e.file);
            if !path.is_file() {
                return Err(DataError::MissingFile(path));
            }
            samples.push(Sample {
                source: ImageSource::Disk(path),
                pid: e.pid,
                camid: e.camid,
                role,
                flag: SampleFlag::from_pid(e.pid),
            });
        }
    }
    Ok(DatasetIndex::build(samples, ChannelStats::default()))
}
