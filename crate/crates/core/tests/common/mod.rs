#![allow(dead_code)]

use semaug::compositor::PersonInstance;
use semaug::partpool::{build_pool, BuildConfig, ClassCatalog, PartPool, PoolSource};
use semaug::raster::Raster;
use semaug::toydata::{generate_item, ToyItem, ToyOptions};

/// Stream tags used by the dataset writer for its three splits.
pub const TRAIN: u64 = 1;
pub const TEST: u64 = 2;
pub const PARSING: u64 = 3;

pub fn person(item: &ToyItem) -> PersonInstance {
    PersonInstance {
        image: Raster::from_rgb(&item.image),
        bbox: item.meta.bbox(),
        keypoints: item.meta.keypoints.clone(),
        normalizer: item.meta.normalizer,
    }
}

/// `count` figures of one split, rendered in memory exactly as the
/// dataset writer would.
pub fn people(seed: u64, tag: u64, count: usize) -> Vec<PersonInstance> {
    let opts = ToyOptions {
        occlude: tag == TEST,
        ..ToyOptions::default()
    };
    (0..count)
        .map(|i| person(&generate_item(seed, (tag << 32) | i as u64, &opts).unwrap()))
        .collect()
}

pub fn parsing_sources(seed: u64, count: usize, scale: usize) -> Vec<PoolSource> {
    let opts = ToyOptions {
        scale,
        ..ToyOptions::default()
    };
    (0..count)
        .map(|i| {
            let item = generate_item(seed, (PARSING << 32) | i as u64, &opts).unwrap();
            PoolSource {
                id: format!("{i:05}"),
                image: item.image,
                labels: item.labels,
                person_height: item.meta.person_bbox[3],
            }
        })
        .collect()
}

pub fn toy_pool(seed: u64, count: usize) -> PartPool {
    let sources = parsing_sources(seed, count, 5);
    build_pool(sources.into_iter().map(Ok), &ClassCatalog::lip_default(), &BuildConfig::default())
        .unwrap()
        .pool
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
