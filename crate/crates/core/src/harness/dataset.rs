//! Seeded scene collections, worker pools, and the on-disk split format.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{gen_scene, Scene, SceneSpec};
use crate::detect::GroundTruthBox;
use crate::numeric::Tensor;
use crate::{Error, Result};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "WARPDETECT_THREADS";

/// SplitMix64 finalizer over `(root, stream, index)`; gives independent per-item seeds.
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    let mut z = root
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed streams, so that data, init, shuffling and augmentation never share draws.
pub mod stream {
    pub const TRAIN_SCENES: u64 = 1;
    pub const TEST_SCENES: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const OBJECT_COUNT: u64 = 6;
}

/// Worker count from [`THREADS_ENV`], defaulting to the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `f` inside a pool sized by [`worker_threads`]. Results never depend on the size.
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(worker_threads()).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_size: usize,
    pub test_size: usize,
    /// Template for every scene; `num_objects` is the per-scene maximum and `seed` is
    /// the root from which per-scene seeds derive.
    pub scene: SceneSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_size: 600,
            test_size: 150,
            scene: SceneSpec {
                num_objects: 3,
                occlusion_prob: 0.5,
                bend_amplitude: 0.6,
                ..SceneSpec::default()
            },
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("train_size and test_size must be positive".into()));
        }
        self.scene.validate()
    }

    /// Spec of item `index` in a split stream.
    pub fn item_spec(&self, split_stream: u64, index: usize) -> SceneSpec {
        let root = self.scene.seed;
        let count = 1 + derive_seed(root, stream::OBJECT_COUNT ^ (split_stream << 8), index as u64) % self.scene.num_objects as u64;
        SceneSpec {
            num_objects: count as usize,
            seed: derive_seed(root, split_stream, index as u64),
            ..self.scene.clone()
        }
    }

    fn split(&self, split_stream: u64, size: usize) -> Result<Vec<Scene>> {
        self.validate()?;
        with_pool(|| (0..size).into_par_iter().map(|i| gen_scene(&self.item_spec(split_stream, i))).collect())
    }

    pub fn train_split(&self) -> Result<Vec<Scene>> {
        self.split(stream::TRAIN_SCENES, self.train_size)
    }

    pub fn test_split(&self) -> Result<Vec<Scene>> {
        self.split(stream::TEST_SCENES, self.test_size)
    }
}

/// Label file contents: one `class_id cx cy w h` line per box.
pub fn format_labels(labels: &[GroundTruthBox]) -> String {
    labels
        .iter()
        .map(|l| format!("{} {} {} {} {}\n", l.class_id, l.bbox[0], l.bbox[1], l.bbox[2], l.bbox[3]))
        .collect()
}

pub fn parse_labels(text: &str) -> Result<Vec<GroundTruthBox>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || Error::Config(format!("malformed label line: {line:?}"));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let class_id = f[0].parse().map_err(|_| bad())?;
            let mut b = [0.0; 4];
            for (k, s) in f[1..].iter().enumerate() {
                b[k] = s.parse().map_err(|_| bad())?;
            }
            GroundTruthBox::new(b, class_id)
        })
        .collect()
}

/// `[3, H, W]` values in `[0, 1]` to 8-bit RGB.
pub fn to_rgb8(image: &Tensor) -> Result<image::RgbImage> {
    let (h, w) = match image.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::Config(format!("expected a [3, H, W] image, got {s:?}"))),
    };
    let d = image.data();
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

pub fn from_rgb8(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(&[3, h, w], |k| {
        let (c, p) = (k / (h * w), k % (h * w));
        img.get_pixel((p % w) as u32, (p / w) as u32)[c] as f64 / 255.0
    })
}

pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    to_rgb8(image)?
        .save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    Ok(from_rgb8(&img.to_rgb8()))
}

/// Writes `NNNNN.png` / `NNNNN.txt` pairs into `dir`.
pub fn write_split(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in scenes.iter().enumerate() {
        save_png(&s.image, &dir.join(format!("{i:05}.png")))?;
        fs::write(dir.join(format!("{i:05}.txt")), format_labels(&s.labels))?;
    }
    Ok(())
}

/// Reads every `*.png` with a matching `*.txt`, in file-name order.
pub fn read_split(dir: &Path) -> Result<Vec<Scene>> {
    let mut pngs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    pngs.sort();
    if pngs.is_empty() {
        return Err(Error::Config(format!("no images in {}", dir.display())));
    }
    pngs.iter()
        .map(|p| {
            let labels = parse_labels(&fs::read_to_string(p.with_extension("txt"))?)?;
            Ok(Scene { image: load_png(p)?, labels })
        })
        .collect()
}
