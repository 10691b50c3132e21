mod common;

use proptest::prelude::*;
use semaug::partpool::{build_pool, load_pool, save_pool, BuildConfig, ClassCatalog, PartPool, PoolSource};
use semaug::Error;

fn build(sources: Vec<PoolSource>) -> PartPool {
    build_pool(sources.into_iter().map(Ok), &ClassCatalog::lip_default(), &BuildConfig::default())
        .unwrap()
        .pool
}

/// Class and pixel bytes of every entry, sorted.
fn contents(pool: &PartPool) -> Vec<(u8, Vec<u8>)> {
    let mut v: Vec<(u8, Vec<u8>)> = pool.iter().map(|(r, p)| (r.class_id, p.pixels.as_raw().clone())).collect();
    v.sort();
    v
}

#[test]
fn toy_parsing_split_yields_every_usable_part_type() {
    let pool = common::toy_pool(0, 8);
    let census = pool.census();
    assert_eq!(census[0], 0);
    for excluded in BuildConfig::default().excluded_classes {
        assert_eq!(census[excluded as usize], 0);
    }
    // torso, legs and every merged composite appear on each figure
    for class in [5, 9, 20, 21, 22, 23, 24, 25] {
        assert_eq!(census[class], 8, "class {class}");
    }
    assert!(pool.iter().all(|(_, p)| p.opaque_area() >= 1225));
}

#[test]
fn saved_pool_loads_identically() {
    let pool = common::toy_pool(1, 4);
    let dir = tempfile::tempdir().unwrap();
    save_pool(&pool, dir.path()).unwrap();
    assert_eq!(load_pool(dir.path()).unwrap(), pool);
}

#[test]
fn malformed_items_are_skipped_not_fatal() {
    let mut sources = common::parsing_sources(2, 3, 5);
    sources[1].labels = semaug::raster::LabelMap::new(3, 3);
    let items: Vec<semaug::Result<PoolSource>> = sources
        .into_iter()
        .map(Ok)
        .chain(std::iter::once(Err(Error::Malformed("unreadable".into()))))
        .collect();
    let report = build_pool(items, &ClassCatalog::lip_default(), &BuildConfig::default()).unwrap();
    assert_eq!(report.skipped.len(), 2);
    assert_eq!(contents(&report.pool), contents(&build(common::parsing_sources(2, 3, 5).into_iter().step_by(2).collect())));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn pool_contents_do_not_depend_on_input_order(seed in 0u64..1000, rot in 0usize..5) {
        let sources = common::parsing_sources(seed, 5, 5);
        let mut shuffled = sources.clone();
        shuffled.rotate_left(rot);
        shuffled.reverse();
        let (a, b) = (build(sources), build(shuffled));
        prop_assert_eq!(a.census(), b.census());
        prop_assert_eq!(contents(&a), contents(&b));
    }
}
