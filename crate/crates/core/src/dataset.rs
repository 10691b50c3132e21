//! On-disk dataset layout: `images/<stem>.png` (RGB), `labels/<stem>.png`
//! (8-bit class ids) and `meta/<stem>.json` (person box, keypoints,
//! normalizer).

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositor::PersonInstance;
use crate::error::{Error, Result};
use crate::partpool::PoolSource;
use crate::raster::{LabelMap, Raster};
use crate::toydata::{generate_item, self_check, ToyItem, ToyMeta, ToyOptions};

pub const IMAGES: &str = "images";
pub const LABELS: &str = "labels";
pub const META: &str = "meta";

fn read_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::image(path, other),
    })
}

pub fn read_meta(path: &Path) -> Result<ToyMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
}

/// Sorted stems of the PNG files in `<root>/images`. A missing directory
/// is an empty dataset only when `root` itself exists.
pub fn list_stems(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root does not exist"),
        ));
    }
    let dir = root.join(IMAGES);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(s.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn load_source(root: &Path, stem: &str) -> Result<PoolSource> {
    let image = read_image(&root.join(IMAGES).join(format!("{stem}.png")))?.to_rgb8();
    let lpath = root.join(LABELS).join(format!("{stem}.png"));
    let labels = match read_image(&lpath)? {
        image::DynamicImage::ImageLuma8(g) => LabelMap::from_gray(&g),
        _ => return Err(Error::Malformed(format!("{}: label map must be 8-bit grayscale", lpath.display()))),
    };
    let meta = read_meta(&root.join(META).join(format!("{stem}.json")))?;
    Ok(PoolSource {
        id: stem.to_string(),
        image,
        labels,
        person_height: meta.person_bbox[3],
    })
}

/// Pool-building inputs; each item fails independently.
pub fn pool_sources(root: &Path) -> Result<Vec<Result<PoolSource>>> {
    let stems = list_stems(root)?;
    Ok(stems
        .par_iter()
        .map(|s| load_source(root, s).map_err(|e| Error::Malformed(format!("{s}: {e}"))))
        .collect())
}

/// The person stored under `stem` in a split.
pub fn load_person(root: &Path, stem: &str) -> Result<PersonInstance> {
    let img = read_image(&root.join(IMAGES).join(format!("{stem}.png")))?.to_rgb8();
    let meta = read_meta(&root.join(META).join(format!("{stem}.json")))?;
    let person = PersonInstance {
        image: Raster::from_rgb(&img),
        bbox: meta.bbox(),
        keypoints: meta.keypoints,
        normalizer: meta.normalizer,
    };
    person.validate().map_err(|e| Error::Malformed(format!("{stem}: {e}")))?;
    Ok(person)
}

/// `(stem, person)` for every item of a split, in stem order.
pub fn load_people(root: &Path) -> Result<Vec<(String, PersonInstance)>> {
    let stems = list_stems(root)?;
    stems
        .par_iter()
        .map(|stem| Ok((stem.clone(), load_person(root, stem)?)))
        .collect()
}

pub fn write_item(root: &Path, stem: &str, item: &ToyItem) -> Result<()> {
    for d in [IMAGES, LABELS, META] {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let ip = root.join(IMAGES).join(format!("{stem}.png"));
    item.image.save(&ip).map_err(|e| Error::image(&ip, e))?;
    let lp = root.join(LABELS).join(format!("{stem}.png"));
    item.labels.to_gray().save(&lp).map_err(|e| Error::image(&lp, e))?;
    let mp = root.join(META).join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&item.meta).expect("meta serializes");
    fs::write(&mp, json).map_err(|e| Error::io(&mp, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDataConfig {
    pub train: usize,
    pub test: usize,
    /// High-resolution figures with parsing labels, for the part pool.
    pub parsing: usize,
    /// Pixels per figure unit of the parsing split.
    pub parsing_scale: usize,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        ToyDataConfig {
            train: 512,
            test: 128,
            parsing: 64,
            parsing_scale: 5,
        }
    }
}

/// Split directories, their item counts, rendering options and stream tags.
fn splits(cfg: &ToyDataConfig) -> [(&'static str, usize, ToyOptions, u64); 3] {
    let base = ToyOptions::default();
    [
        ("train", cfg.train, base, 1),
        ("test", cfg.test, ToyOptions { occlude: true, ..base }, 2),
        (
            "parsing",
            cfg.parsing,
            ToyOptions {
                scale: cfg.parsing_scale,
                ..base
            },
            3,
        ),
    ]
}

/// Writes `train/`, `test/` and `parsing/` under `root`. Every item is
/// checked against its painting census before it is written.
pub fn generate_dataset(root: &Path, cfg: &ToyDataConfig, seed: u64) -> Result<Vec<(String, usize)>> {
    if cfg.parsing_scale == 0 {
        return Err(Error::Config("parsing_scale must be at least 1".into()));
    }
    let mut summary = Vec::new();
    for (name, count, opts, tag) in splits(cfg) {
        let dir = root.join(name);
        for d in [IMAGES, LABELS, META] {
            let p = dir.join(d);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        (0..count).into_par_iter().try_for_each(|i| {
            let item = generate_item(seed, (tag << 32) | i as u64, &opts)?;
            self_check(&item)?;
            write_item(&dir, &format!("{i:05}"), &item)
        })?;
        summary.push((name.to_string(), count));
    }
    Ok(summary)
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}
