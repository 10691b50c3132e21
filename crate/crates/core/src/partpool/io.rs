//! On-disk pool layout: a JSON manifest plus one PNG per patch under
//! `patches/`. Each manifest entry carries a SHA-256 of the decoded RGBA
//! bytes so corruption in either file is caught on load.

use std::fs;
use std::path::Path;

use image::RgbaImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BuildConfig, ClassCatalog, ClassId, PartPatch, PartPool};
use crate::error::{Error, Result};

pub const POOL_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
const PATCH_DIR: &str = "patches";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: BuildConfig,
    classes: ClassCatalog,
    entries: Vec<EntryRecord>,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    class_id: ClassId,
    index: usize,
    file: String,
    width: u32,
    height: u32,
    source_id: String,
    source_person_height: f64,
    sha256: String,
}

fn digest(img: &RgbaImage) -> String {
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `pool` into `dir`, creating it if needed.
pub fn save_pool(pool: &PartPool, dir: &Path) -> Result<()> {
    let patch_dir = dir.join(PATCH_DIR);
    fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e))?;
    let mut entries = Vec::with_capacity(pool.len());
    for (r, patch) in pool.iter() {
        let file = format!("{PATCH_DIR}/c{:03}_{:06}.png", r.class_id, r.index);
        let path = dir.join(&file);
        patch
            .pixels
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::image(&path, e))?;
        entries.push(EntryRecord {
            class_id: r.class_id,
            index: r.index,
            file,
            width: patch.pixels.width(),
            height: patch.pixels.height(),
            source_id: patch.source_id.clone(),
            source_person_height: patch.source_person_height,
            sha256: digest(&patch.pixels),
        });
    }
    let manifest = Manifest {
        version: POOL_FORMAT_VERSION,
        config: pool.build_config.clone(),
        classes: pool.classes.clone(),
        entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_pool(dir: &Path) -> Result<PartPool> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CorruptManifest(e.to_string()))?;
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptManifest("missing version".into()))?;
    if version != POOL_FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: POOL_FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| Error::CorruptManifest(e.to_string()))?;
    manifest
        .classes
        .validate()
        .map_err(|e| Error::CorruptManifest(e.to_string()))?;

    let mut pool = PartPool::empty(manifest.classes, manifest.config);
    for rec in manifest.entries {
        let list = pool
            .entries
            .get_mut(rec.class_id as usize)
            .ok_or_else(|| Error::CorruptManifest(format!("entry class {} undeclared", rec.class_id)))?;
        if rec.index != list.len() {
            return Err(Error::CorruptManifest(format!(
                "entry {} out of order for class {}",
                rec.index, rec.class_id
            )));
        }
        let blob = dir.join(&rec.file);
        if !blob.is_file() {
            return Err(Error::MissingBlob(blob));
        }
        let pixels = image::open(&blob)
            .map_err(|e| Error::CorruptManifest(format!("{}: {e}", blob.display())))?
            .into_rgba8();
        if pixels.width() != rec.width || pixels.height() != rec.height {
            return Err(Error::CorruptManifest(format!("{}: dimension mismatch", rec.file)));
        }
        if digest(&pixels) != rec.sha256 {
            return Err(Error::CorruptManifest(format!("{}: checksum mismatch", rec.file)));
        }
        list.push(PartPatch {
            class_id: rec.class_id,
            pixels,
            source_id: rec.source_id,
            source_person_height: rec.source_person_height,
        });
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pool(n: usize, seed: u64) -> PartPool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = PartPool::empty(ClassCatalog::lip_default(), BuildConfig::default());
        for i in 0..n {
            let class_id = rng.gen_range(1..27u8);
            let (w, h) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let pixels = RgbaImage::from_fn(w, h, |_, _| {
                let a = if rng.gen_bool(0.7) { 255 } else { 0 };
                image::Rgba([rng.gen(), rng.gen(), rng.gen(), a])
            });
            pool.entries[class_id as usize].push(PartPatch {
                class_id,
                pixels,
                source_id: format!("img{i}"),
                source_person_height: rng.gen_range(10.0..200.0),
            });
        }
        pool
    }

    #[test]
    fn empty_pool_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let pool = random_pool(0, 1);
        save_pool(&pool, dir.path()).unwrap();
        assert_eq!(load_pool(dir.path()).unwrap(), pool);
    }

    #[test]
    fn hundred_entry_pool_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let pool = random_pool(100, 2);
        save_pool(&pool, dir.path()).unwrap();
        let back = load_pool(dir.path()).unwrap();
        assert_eq!(back.len(), 100);
        for ((_, a), (_, b)) in pool.iter().zip(back.iter()) {
            assert_eq!(a.pixels.as_raw(), b.pixels.as_raw());
        }
        assert_eq!(back, pool);
    }

    #[test]
    fn tampered_checksum_is_corrupt_manifest() {
        let dir = tempfile::tempdir().unwrap();
        save_pool(&random_pool(3, 3), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m["entries"][0]["sha256"] = serde_json::Value::String("00".repeat(32));
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_pool(dir.path()), Err(Error::CorruptManifest(_))));
    }

    #[test]
    fn missing_blob_and_version_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        save_pool(&random_pool(3, 4), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).unwrap();
        let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
        let file = m["entries"][1]["file"].as_str().unwrap().to_string();
        fs::remove_file(dir.path().join(&file)).unwrap();
        assert!(matches!(load_pool(dir.path()), Err(Error::MissingBlob(_))));

        m["version"] = serde_json::json!(99);
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(
            load_pool(dir.path()),
            Err(Error::VersionMismatch { found: 99, .. })
        ));

        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(load_pool(dir.path()), Err(Error::CorruptManifest(_))));
    }
}
