use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Resolved;
use crate::advnet::checkpoint;
use crate::advnet::tape::{inject_fault, Fault};
use crate::advnet::train::{metrics_jsonl, predict, train_loop, CheckpointPlan, Mode, TrainConfig, TrainSample};
use crate::compositor::{apply_sda, replay as replay_pastes, PasteRecord, PersonInstance};
use crate::dataset::{generate_dataset, load_people, load_person, pool_sources, IMAGES};
use crate::error::{Error, Result};
use crate::eval::{argmax_decode, pck, PckReport};
use crate::gradcheck::{self, Suite};
use crate::partpool::{load_pool, save_pool, MANIFEST_NAME};
use crate::partpool::{build_pool as build, ClassCatalog};
use crate::pose::{JointSchema, Keypoint};
use crate::warp::RotationConvention;

pub const SIDECAR_VERSION: u32 = 1;
pub const SIDECARS: &str = "sidecars";
pub const TRAIN_CONFIG: &str = "config.toml";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINTS: &str = "checkpoints";
/// Test hook: `relu` or `conv-weight` corrupts that backward op before the
/// gradient checks run.
pub const FAULT_ENV: &str = "SEMAUG_GRADCHECK_FAULT";

/// Fails unless `out` is absent, an empty directory, or `force` is set.
fn check_out(out: &Path, force: bool) -> Result<()> {
    let occupied = match fs::read_dir(out) {
        Ok(mut it) => it.next().is_some(),
        Err(_) => out.exists(),
    };
    if occupied && !force {
        return Err(Error::Exists(out.to_path_buf()));
    }
    Ok(())
}

/// Output written into a sibling directory and moved into place only once
/// complete, so failures leave nothing behind.
struct Staging {
    tmp: PathBuf,
    out: PathBuf,
}

impl Staging {
    fn new(out: &Path) -> Result<Self> {
        let name = out
            .file_name()
            .ok_or_else(|| Error::Config(format!("output path {} has no final component", out.display())))?;
        let tmp = out.with_file_name(format!(".{}.partial", name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(Staging {
            tmp,
            out: out.to_path_buf(),
        })
    }

    /// Runs `f` on the staging directory, then replaces `out` with it.
    fn run(self, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        if let Err(e) = f(&self.tmp) {
            let _ = fs::remove_dir_all(&self.tmp);
            return Err(e);
        }
        if self.out.is_dir() {
            fs::remove_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        } else if self.out.exists() {
            fs::remove_file(&self.out).map_err(|e| Error::io(&self.out, e))?;
        }
        fs::rename(&self.tmp, &self.out).map_err(|e| Error::io(&self.out, e))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
}

pub fn gen_toydata(r: &Resolved, out: PathBuf) -> Result<()> {
    let cfg = &r.cfg.toydata;
    if cfg.parsing_scale == 0 {
        return Err(Error::Config("parsing_scale must be at least 1".into()));
    }
    check_out(&out, r.force)?;
    let mut summary = Vec::new();
    Staging::new(&out)?.run(|dir| {
        summary = generate_dataset(dir, cfg, r.cfg.seed)?;
        Ok(())
    })?;
    for (split, n) in summary {
        println!("{split}: {n} images");
    }
    Ok(())
}

pub fn build_pool(r: &Resolved, dataset: &Path, out: PathBuf) -> Result<()> {
    let catalog = ClassCatalog::lip_default();
    r.cfg.pool.validate(&catalog)?;
    let sources = pool_sources(dataset)?;
    check_out(&out, r.force)?;
    let report = build(sources, &catalog, &r.cfg.pool)?;
    Staging::new(&out)?.run(|dir| save_pool(&report.pool, dir))?;
    let census = report.pool.census();
    println!("{:>3}  {:<22} {:>6}", "id", "class", "count");
    for class in &catalog.classes {
        if class.id != 0 {
            println!("{:>3}  {:<22} {:>6}", class.id, class.name, census[class.id as usize]);
        }
    }
    println!("total {} patches, {} items skipped", report.pool.len(), report.skipped.len());
    Ok(())
}

/// Provenance of one augmented image; enough to re-render it bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub version: u32,
    /// Stem of the source image in the augmented split.
    pub source: String,
    pub seed: u64,
    /// SHA-256 of the pool manifest the parts came from.
    pub pool_manifest_sha256: String,
    pub rotation: RotationConvention,
    pub keypoints: Vec<Keypoint>,
    pub pastes: Vec<PasteRecord>,
}

fn pool_digest(pool_dir: &Path) -> Result<String> {
    let path = pool_dir.join(MANIFEST_NAME);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Per-image seed: stream `index` of the run seed.
fn item_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.gen()
}

fn save_png(image: &image::RgbImage, path: &Path) -> Result<()> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

pub fn augment(r: &Resolved, dataset: &Path, pool_dir: &Path, out: PathBuf) -> Result<()> {
    let sda = &r.cfg.augment;
    sda.validate()?;
    let pool = load_pool(pool_dir)?;
    let digest = pool_digest(pool_dir)?;
    let people = load_people(dataset)?;
    if pool.is_empty() && !people.is_empty() {
        return Err(Error::Unavailable(format!("pool {} is empty", pool_dir.display())));
    }
    check_out(&out, r.force)?;
    Staging::new(&out)?.run(|dir| {
        for d in [IMAGES, SIDECARS] {
            let p = dir.join(d);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        people.par_iter().enumerate().try_for_each(|(i, (stem, person))| {
            let seed = item_seed(r.cfg.seed, i);
            let sample = apply_sda(person, &pool, sda, seed)?;
            save_png(&sample.image.to_rgb(), &dir.join(IMAGES).join(format!("{stem}.png")))?;
            let car = Sidecar {
                version: SIDECAR_VERSION,
                source: stem.clone(),
                seed,
                pool_manifest_sha256: digest.clone(),
                rotation: sda.rotation,
                keypoints: sample.keypoints,
                pastes: sample.pastes,
            };
            write_json(&dir.join(SIDECARS).join(format!("{stem}.json")), &car)
        })
    })?;
    println!("augmented {} images with {} parts each", people.len(), sda.n_parts);
    Ok(())
}

pub fn replay(r: &Resolved, dataset: &Path, pool_dir: &Path, sidecar: &Path, out: PathBuf) -> Result<()> {
    let car: Sidecar = read_json(sidecar)?;
    if car.version != SIDECAR_VERSION {
        return Err(Error::VersionMismatch {
            found: car.version,
            expected: SIDECAR_VERSION,
        });
    }
    if pool_digest(pool_dir)? != car.pool_manifest_sha256 {
        return Err(Error::Config(format!(
            "{} was written against a different pool than {}",
            sidecar.display(),
            pool_dir.display()
        )));
    }
    let pool = load_pool(pool_dir)?;
    let person = load_person(dataset, &car.source)?;
    let image = replay_pastes(&person, &pool, &car.pastes, car.rotation)?;
    let dir = out.join(IMAGES);
    let path = dir.join(format!("{}.png", car.source));
    if path.exists() && !r.force {
        return Err(Error::Exists(path));
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_png(&image.to_rgb(), &path)?;
    println!("{}", path.display());
    Ok(())
}

fn people_only(root: &Path) -> Result<Vec<PersonInstance>> {
    Ok(load_people(root)?.into_iter().map(|(_, p)| p).collect())
}

pub fn train(
    r: &Resolved,
    dataset: &Path,
    pool_dir: &Path,
    out: PathBuf,
    resume: Option<&Path>,
    every_epoch: bool,
) -> Result<()> {
    let cfg = &r.cfg.train;
    cfg.validate()?;
    let pool = match cfg.mode {
        Mode::Baseline => None,
        _ => Some(load_pool(pool_dir)?),
    };
    let state = resume.map(|p| checkpoint::load(p, cfg)).transpose()?;
    let train_people = people_only(&dataset.join("train"))?;
    let test_dir = dataset.join("test");
    let val = if test_dir.is_dir() { people_only(&test_dir)? } else { Vec::new() };
    let samples = train_people
        .into_par_iter()
        .map(|p| TrainSample::new(p, cfg.stride, cfg.sigma))
        .collect::<Result<Vec<_>>>()?;
    if state.is_none() {
        check_out(&out, r.force)?;
    }
    let schema = JointSchema::toy();
    if let Some(s) = samples.first() {
        if s.person.keypoints.len() != schema.len() {
            return Err(Error::Malformed(format!(
                "training people have {} joints, the toy schema has {}",
                s.person.keypoints.len(),
                schema.len()
            )));
        }
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join(TRAIN_CONFIG);
    let text = toml::to_string(cfg).map_err(|e| Error::Invariant(format!("config does not serialize: {e}")))?;
    fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    let plan = CheckpointPlan {
        dir: out.join(CHECKPOINTS),
        every_epoch,
    };
    let st = train_loop(cfg, &samples, &val, pool.as_ref(), &schema, Some(&plan), state)?;
    let mpath = out.join(METRICS);
    fs::write(&mpath, metrics_jsonl(&st)).map_err(|e| Error::io(&mpath, e))?;
    if let Some(last) = st.epochs.last() {
        println!(
            "epoch {}: L_D {:.6}{}{}",
            last.epoch,
            last.l_d,
            last.l_g.map_or(String::new(), |g| format!(" L_G {g:.6}")),
            last.val_pck.map_or(String::new(), |v| format!(" val PCK {v:.2}"))
        );
    }
    Ok(())
}

pub enum PredSource {
    File(PathBuf),
    Run(PathBuf),
}

fn schema_for(k: usize) -> Result<JointSchema> {
    [JointSchema::toy(), JointSchema::mpii()]
        .into_iter()
        .find(|s| s.len() == k)
        .ok_or_else(|| Error::Malformed(format!("no joint schema with {k} joints")))
}

/// Latest `epoch_NNNN.ckpt` in a run's checkpoint directory.
fn latest_checkpoint(run: &Path) -> Result<PathBuf> {
    let dir = run.join(CHECKPOINTS);
    let mut best: Option<PathBuf> = None;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let p = entry.map_err(|e| Error::io(&dir, e))?.path();
        let is_ckpt = p.extension().is_some_and(|e| e == "ckpt")
            && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("epoch_"));
        if is_ckpt && best.as_ref().is_none_or(|b| p > *b) {
            best = Some(p);
        }
    }
    best.ok_or_else(|| Error::MissingBlob(dir.join("epoch_*.ckpt")))
}

fn run_predictions(run: &Path, people: &[(String, PersonInstance)]) -> Result<Vec<Vec<(f64, f64)>>> {
    let cfg_path = run.join(TRAIN_CONFIG);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", cfg_path.display())))?;
    let st = checkpoint::load(&latest_checkpoint(run)?, &cfg)?;
    let refs: Vec<&PersonInstance> = people.iter().map(|(_, p)| p).collect();
    predict(&st.d, &refs, cfg.stride)?.iter().map(argmax_decode).collect()
}

fn by_stem<T: Clone>(map: &BTreeMap<String, T>, stems: &[&String], what: &Path) -> Result<Vec<T>> {
    stems
        .iter()
        .map(|s| {
            map.get(*s)
                .cloned()
                .ok_or_else(|| Error::Malformed(format!("{} has no entry for `{s}`", what.display())))
        })
        .collect()
}

fn print_report(title: &str, rep: &PckReport) {
    println!("{title} ({} of {} joints correct)", rep.correct, rep.evaluated);
    print!("{}", rep.table());
}

pub fn eval(
    r: &Resolved,
    dataset: &Path,
    source: &PredSource,
    mask_path: Option<&Path>,
    invisible_only: bool,
) -> Result<()> {
    let threshold = r.cfg.eval.threshold;
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::Config(format!("threshold must be positive, got {threshold}")));
    }
    let people = load_people(dataset)?;
    if people.is_empty() {
        return Err(Error::Unavailable(format!("{} has no images", dataset.display())));
    }
    let stems: Vec<&String> = people.iter().map(|(s, _)| s).collect();
    let k = people[0].1.keypoints.len();
    let schema = schema_for(k)?;
    let preds = match source {
        PredSource::File(p) => {
            let map: BTreeMap<String, Vec<[f64; 2]>> = read_json(p)?;
            by_stem(&map, &stems, p)?
                .into_iter()
                .map(|v| v.into_iter().map(|[x, y]| (x, y)).collect())
                .collect()
        }
        PredSource::Run(run) => run_predictions(run, &people)?,
    };
    let mask = match mask_path {
        Some(p) => {
            let map: BTreeMap<String, Vec<bool>> = read_json(p)?;
            Some(by_stem(&map, &stems, p)?)
        }
        None => None,
    };
    let gts: Vec<Vec<Keypoint>> = people.iter().map(|(_, p)| p.keypoints.clone()).collect();
    let norms: Vec<f64> = people.iter().map(|(_, p)| p.normalizer).collect();
    let all = pck(&preds, &gts, &norms, threshold, mask.as_deref(), &schema)?;
    print_report(&format!("PCK@{threshold}"), &all);
    let mut reports = vec![("all", all)];
    if invisible_only {
        let inv: Vec<Vec<bool>> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| {
                g.iter()
                    .enumerate()
                    .map(|(j, kp)| !kp.visible && mask.as_ref().is_none_or(|m| m[i][j]))
                    .collect()
            })
            .collect();
        let rep = pck(&preds, &gts, &norms, threshold, Some(&inv), &schema)?;
        print_report(&format!("PCK@{threshold}, invisible joints"), &rep);
        reports.push(("invisible", rep));
    }
    if let Some(out) = &r.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let map: BTreeMap<&str, &PckReport> = reports.iter().map(|(k, v)| (*k, v)).collect();
        write_json(&out.join("pck.json"), &map)?;
    }
    Ok(())
}

pub fn gradcheck(r: &Resolved, suite: &str) -> Result<()> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse()?]
    };
    match std::env::var(FAULT_ENV).as_deref() {
        Ok("relu") => inject_fault(Fault::FlipRelu),
        Ok("conv-weight") => inject_fault(Fault::FlipConvWeight),
        Ok(other) => return Err(Error::Config(format!("unknown {FAULT_ENV} value `{other}`"))),
        Err(_) => {}
    }
    let mut failed = Vec::new();
    for s in suites {
        let rep = gradcheck::run(s, r.cfg.seed)?;
        println!(
            "{:<11} worst {:.3e}  tolerance {:.0e}  checks {:>4}  skipped {:>2}  {}",
            s.to_string(),
            rep.worst,
            rep.tolerance,
            rep.checks,
            rep.skipped,
            if rep.passed() { "ok" } else { "FAIL" }
        );
        debug!("{s}: {rep:?}");
        if !rep.passed() {
            failed.push(s.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        warn!("gradient check failed");
        Err(Error::Verification(format!("suites over tolerance: {}", failed.join(", "))))
    }
}
