//! The semantic part pool: body-part patches harvested from images paired
//! with human-parsing label maps.

pub mod classes;
mod io;
pub mod segment;

use image::{RgbImage, RgbaImage};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use classes::{ClassCatalog, ClassId, MergeRule, PartClass};
pub use io::{load_pool, save_pool, MANIFEST_NAME, POOL_FORMAT_VERSION};
pub use segment::{
    crop_patch, drop_scattered, extract_segments, filter_segments, merge_composites, BBox,
    PatchSource, SegmentMask,
};

use crate::error::{Error, Result};
use crate::raster::LabelMap;

/// A cropped RGBA body part. Alpha is the segment mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PartPatch {
    pub class_id: ClassId,
    pub pixels: RgbaImage,
    pub source_id: String,
    /// Height of the source person's bounding box, used for scale alignment.
    pub source_person_height: f64,
}

impl PartPatch {
    pub fn width(&self) -> usize {
        self.pixels.width() as usize
    }

    pub fn height(&self) -> usize {
        self.pixels.height() as usize
    }

    /// Number of pixels with non-zero alpha.
    pub fn opaque_area(&self) -> usize {
        self.pixels.pixels().filter(|p| p.0[3] > 0).count()
    }
}

/// Filter and merge settings applied while building a pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    /// Segments with fewer pixels are dropped.
    pub min_area: usize,
    pub excluded_classes: Vec<ClassId>,
    pub merge_rules: Vec<MergeRule>,
    /// Largest-component share above which a class's other components are
    /// treated as speckle.
    pub scatter_dominance: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            min_area: 35 * 35,
            excluded_classes: classes::default_excluded(),
            merge_rules: classes::default_merge_rules(),
            scatter_dominance: 0.9,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self, catalog: &ClassCatalog) -> Result<()> {
        if self.min_area < 1 {
            return Err(Error::Config("min_area must be at least 1".into()));
        }
        if !(self.scatter_dominance > 0.0 && self.scatter_dominance <= 1.0) {
            return Err(Error::Config("scatter_dominance must lie in (0, 1]".into()));
        }
        for rule in &self.merge_rules {
            catalog.validate_rule(rule)?;
        }
        Ok(())
    }
}

/// Position of an entry inside a pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub class_id: ClassId,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartPool {
    pub classes: ClassCatalog,
    /// `entries[c]` lists the patches of class `c`.
    pub entries: Vec<Vec<PartPatch>>,
    pub build_config: BuildConfig,
}

impl PartPool {
    pub fn empty(classes: ClassCatalog, build_config: BuildConfig) -> Self {
        let entries = vec![Vec::new(); classes.len()];
        PartPool {
            classes,
            entries,
            build_config,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn census(&self) -> Vec<usize> {
        self.entries.iter().map(Vec::len).collect()
    }

    pub fn get(&self, r: PatchRef) -> Option<&PartPatch> {
        self.entries.get(r.class_id as usize)?.get(r.index)
    }

    /// Maps a flat index in `[0, len)` onto a class-local reference.
    pub fn locate(&self, mut flat: usize) -> Option<PatchRef> {
        for (c, list) in self.entries.iter().enumerate() {
            if flat < list.len() {
                return Some(PatchRef {
                    class_id: c as ClassId,
                    index: flat,
                });
            }
            flat -= list.len();
        }
        None
    }

    pub fn iter(&self) -> impl Iterator<Item = (PatchRef, &PartPatch)> {
        self.entries.iter().enumerate().flat_map(|(c, list)| {
            list.iter().enumerate().map(move |(i, p)| {
                (
                    PatchRef {
                        class_id: c as ClassId,
                        index: i,
                    },
                    p,
                )
            })
        })
    }
}

/// One dataset item for pool building.
#[derive(Clone, Debug)]
pub struct PoolSource {
    pub id: String,
    pub image: RgbImage,
    pub labels: LabelMap,
    pub person_height: f64,
}

/// The full per-item pipeline: extract, drop speckle, merge composites,
/// filter, crop.
pub fn patches_from_item(
    item: &PoolSource,
    catalog: &ClassCatalog,
    config: &BuildConfig,
) -> Result<Vec<PartPatch>> {
    if item.image.width() as usize != item.labels.width
        || item.image.height() as usize != item.labels.height
    {
        return Err(Error::Malformed(format!(
            "{}: image is {}x{} but label map is {}x{}",
            item.id,
            item.image.width(),
            item.image.height(),
            item.labels.width,
            item.labels.height
        )));
    }
    let segments = extract_segments(&item.labels, catalog.len())?;
    let segments = drop_scattered(segments, config.scatter_dominance);
    let segments = merge_composites(segments, &config.merge_rules, catalog)?;
    let segments = filter_segments(segments, config.min_area, &config.excluded_classes);
    let source = PatchSource {
        id: item.id.clone(),
        person_height: item.person_height,
    };
    segments.iter().map(|s| crop_patch(&item.image, s, &source)).collect()
}

/// Outcome of [`build_pool`]: the pool and the items that were skipped.
#[derive(Debug)]
pub struct BuildReport {
    pub pool: PartPool,
    pub skipped: Vec<(String, Error)>,
}

/// Builds a pool from `items`. Malformed items are skipped and reported;
/// per-item work runs in parallel and is merged in input order.
pub fn build_pool<I>(items: I, catalog: &ClassCatalog, config: &BuildConfig) -> Result<BuildReport>
where
    I: IntoIterator<Item = Result<PoolSource>>,
{
    catalog.validate()?;
    config.validate(catalog)?;
    let items: Vec<Result<PoolSource>> = items.into_iter().collect();
    let results: Vec<(String, Result<Vec<PartPatch>>)> = items
        .into_par_iter()
        .enumerate()
        .map(|(i, item)| match item {
            Ok(item) => {
                let r = patches_from_item(&item, catalog, config);
                (item.id, r)
            }
            Err(e) => (format!("#{i}"), Err(e)),
        })
        .collect();

    let mut pool = PartPool::empty(catalog.clone(), config.clone());
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok(patches) => {
                for p in patches {
                    pool.entries[p.class_id as usize].push(p);
                }
            }
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                skipped.push((id, e));
            }
        }
    }
    Ok(BuildReport { pool, skipped })
}

/// Draws `n` entries uniformly over all pool entries, with replacement.
pub fn sample_parts<'a, R: Rng + ?Sized>(
    pool: &'a PartPool,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(PatchRef, &'a PartPatch)>> {
    let total = pool.len();
    if total == 0 {
        return Err(Error::Unavailable("part pool is empty".into()));
    }
    if n == 0 {
        return Err(Error::Domain("sample count must be at least 1".into()));
    }
    Ok((0..n)
        .map(|_| {
            let r = pool.locate(rng.gen_range(0..total)).expect("index below total");
            (r, pool.get(r).expect("located entry exists"))
        })
        .collect())
}
