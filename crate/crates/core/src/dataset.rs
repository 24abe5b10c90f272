//! On-disk synthetic benchmark: `images/<id>.png` (16-bit grayscale),
//! `gt/<id>.png` (binary, 8-bit) and `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{components, Frame, Mask};
use crate::synthdata::{
    generate_scene, make_split, mix_seed, Characteristic, DatasetSplit, InfraredSample,
};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub tag: Characteristic,
    pub points: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub image_size: [usize; 2],
    pub seed: u64,
    pub val_ratio: f64,
    pub samples: Vec<ManifestEntry>,
    pub split: DatasetSplit,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Data(format!("dataset manifest not found at {}", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub seed: u64,
    pub val_ratio: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            n_train: 160,
            n_test: 40,
            size: 64,
            seed: 0,
            val_ratio: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub size: (usize, usize),
    pub seed: u64,
    pub val_ratio: f64,
    pub samples: BTreeMap<String, InfraredSample>,
    pub split: DatasetSplit,
}

const POOL_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;

fn pool_sample(
    stream: u64,
    index: usize,
    opts: &GenerateOptions,
    prefix: &str,
) -> Result<InfraredSample> {
    let tag = Characteristic::ALL[index % 4];
    let key = mix_seed(&[opts.seed, stream, index as u64]);
    let n_targets = ChaCha8Rng::seed_from_u64(key).gen_range(1..=3);
    let mut s = generate_scene(tag, (opts.size, opts.size), n_targets, key)?;
    s.id = format!("{prefix}{index:05}");
    Ok(s)
}

impl Dataset {
    /// Balanced four-tag corpus. The train pool is split into train/val at
    /// `val_ratio`; test scenes come from an independent seed stream.
    pub fn generate(opts: &GenerateOptions) -> Result<Self> {
        if opts.n_train < 10 {
            return Err(Error::Config(format!(
                "n_train must be at least 10, got {}",
                opts.n_train
            )));
        }
        let mut samples = BTreeMap::new();
        let mut pool_ids = Vec::with_capacity(opts.n_train);
        for i in 0..opts.n_train {
            let s = pool_sample(POOL_STREAM, i, opts, "tr")?;
            pool_ids.push(s.id.clone());
            samples.insert(s.id.clone(), s);
        }
        let mut split = make_split(&pool_ids, opts.val_ratio, opts.seed)?;
        for i in 0..opts.n_test {
            let s = pool_sample(TEST_STREAM, i, opts, "te")?;
            split.test.push(s.id.clone());
            samples.insert(s.id.clone(), s);
        }
        Ok(Self {
            size: (opts.size, opts.size),
            seed: opts.seed,
            val_ratio: opts.val_ratio,
            samples,
            split,
        })
    }

    pub fn get(&self, id: &str) -> Result<&InfraredSample> {
        self.samples
            .get(id)
            .ok_or_else(|| Error::Data(format!("unknown sample id '{id}'")))
    }

    pub fn select(&self, ids: &[String]) -> Result<Vec<&InfraredSample>> {
        ids.iter().map(|id| self.get(id)).collect()
    }

    pub fn train(&self) -> Result<Vec<&InfraredSample>> {
        self.select(&self.split.train)
    }

    pub fn val(&self) -> Result<Vec<&InfraredSample>> {
        self.select(&self.split.val)
    }

    pub fn test(&self) -> Result<Vec<&InfraredSample>> {
        self.select(&self.split.test)
    }

    /// Ids of a named split: `train`, `val` or `test`.
    pub fn split_ids(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.split.train),
            "val" => Ok(&self.split.val),
            "test" => Ok(&self.split.test),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }

    pub fn manifest(&self) -> Manifest {
        let order = self
            .split
            .train
            .iter()
            .chain(&self.split.val)
            .chain(&self.split.test);
        let mut ids: Vec<&String> = order.collect();
        ids.sort();
        let samples = ids
            .into_iter()
            .map(|id| {
                let s = &self.samples[id];
                ManifestEntry {
                    id: s.id.clone(),
                    tag: s.tag,
                    points: s.points.iter().map(|&(r, c)| [r, c]).collect(),
                }
            })
            .collect();
        Manifest {
            image_size: [self.size.0, self.size.1],
            seed: self.seed,
            val_ratio: self.val_ratio,
            samples,
            split: self.split.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        let gt = dir.join("gt");
        for d in [dir, images.as_path(), gt.as_path()] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for s in self.samples.values() {
            write_png16(&images.join(format!("{}.png", s.id)), &s.image)?;
            write_mask_png(&gt.join(format!("{}.png", s.id)), &s.gt_mask)?;
        }
        self.manifest().save(&dir.join(MANIFEST_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(&dir.join(MANIFEST_FILE))?;
        let [h, w] = manifest.image_size;
        let mut samples = BTreeMap::new();
        for e in &manifest.samples {
            let image = read_png16(&dir.join("images").join(format!("{}.png", e.id)))?;
            let gt_mask = read_mask_png(&dir.join("gt").join(format!("{}.png", e.id)))?;
            if image.shape() != (h, w) || gt_mask.shape() != (h, w) {
                return Err(Error::Data(format!(
                    "sample '{}' does not match manifest size {h}x{w}",
                    e.id
                )));
            }
            let points: Vec<(usize, usize)> = e.points.iter().map(|p| (p[0], p[1])).collect();
            for &(r, c) in &points {
                if r >= h || c >= w {
                    return Err(Error::Data(format!(
                        "point ({r}, {c}) of '{}' is out of bounds",
                        e.id
                    )));
                }
            }
            if components(&gt_mask).len() != points.len() {
                return Err(Error::Data(format!(
                    "sample '{}' has point/target count mismatch",
                    e.id
                )));
            }
            samples.insert(
                e.id.clone(),
                InfraredSample {
                    id: e.id.clone(),
                    tag: e.tag,
                    image,
                    points,
                    gt_mask,
                },
            );
        }
        let ds = Self {
            size: (h, w),
            seed: manifest.seed,
            val_ratio: manifest.val_ratio,
            samples,
            split: manifest.split,
        };
        for id in ds
            .split
            .train
            .iter()
            .chain(&ds.split.val)
            .chain(&ds.split.test)
        {
            ds.get(id)?;
        }
        Ok(ds)
    }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: PathBuf::from(path),
        message: e.to_string(),
    }
}

pub fn write_png16(path: &Path, frame: &Frame) -> Result<()> {
    let raw: Vec<u16> = frame
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(frame.width() as u32, frame.height() as u32, raw)
            .expect("buffer sized from frame");
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn read_png16(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| image_err(path, e))?
        .into_luma16();
    let (w, h) = img.dimensions();
    Frame::new(
        h as usize,
        w as usize,
        img.into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
    )
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let raw: Vec<u8> = mask
        .data()
        .iter()
        .map(|&b| if b { 255 } else { 0 })
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw)
            .expect("buffer sized from mask");
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| image_err(path, e))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Mask::from_vec(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| v > 127).collect(),
    )
}
