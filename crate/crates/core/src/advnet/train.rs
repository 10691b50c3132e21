use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, clip_global_norm, gather, OptimState};
use super::checkpoint;
use super::net::{discriminator_forward, generator_forward, Net, ToyNetSpec};
use super::schedule::lr_schedule;
use super::tape::Tape;
use super::tensor::Tensor;
use crate::compositor::{apply_sda, asda_placements, PersonInstance, SdaConfig};
use crate::error::{Error, Result};
use crate::eval::{argmax_decode, pck};
use crate::heatmap::{render_gaussian, HeatmapStack};
use crate::partpool::{sample_parts, PartPool};
use crate::pose::JointSchema;

/// Parameter-id offset of the discriminator, keeping its ids disjoint from
/// the generator's on a shared tape.
pub const D_PARAM_BASE: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Sda,
    Asda,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "sda" => Ok(Mode::Sda),
            "asda" => Ok(Mode::Asda),
            _ => Err(Error::Config(format!("unknown mode `{s}` (baseline, sda, asda)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Discriminator learning rate.
    pub lr: f64,
    /// Generator learning rate; the discriminator's when unset.
    pub lr_g: Option<f64>,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    /// Global gradient-norm bound, per network.
    pub clip: f64,
    pub seed: u64,
    pub sigma: f64,
    pub stride: usize,
    pub sda: SdaConfig,
    /// Number of `(r, tx, ty)` groups the generator predicts.
    pub groups: usize,
    pub pck_threshold: f64,
    /// Validate every this many epochs (0 disables).
    pub val_every: usize,
    pub d_spec: Option<ToyNetSpec>,
    pub g_spec: Option<ToyNetSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Baseline,
            epochs: 60,
            batch_size: 8,
            lr: 3e-3,
            lr_g: None,
            milestones: vec![40, 50],
            lr_factor: 10.0,
            clip: 5.0,
            seed: 0,
            sigma: 1.0,
            stride: 4,
            sda: SdaConfig::default(),
            groups: 26,
            pck_threshold: 0.2,
            val_every: 1,
            d_spec: None,
            g_spec: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, lr) in [("lr", Some(self.lr)), ("lr_g", self.lr_g)] {
            if let Some(v) = lr {
                if !(v >= 0.0) || !v.is_finite() {
                    return bad(format!("{name} must be finite and non-negative, got {v}"));
                }
            }
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly ascending: {:?}", self.milestones));
        }
        if !(self.lr_factor > 0.0) || !(self.clip > 0.0) || !(self.sigma > 0.0) || self.stride == 0 {
            return bad("lr_factor, clip, sigma and stride must be positive".into());
        }
        if self.groups == 0 {
            return bad("groups must be at least 1".into());
        }
        if !(self.pck_threshold > 0.0) {
            return bad(format!("pck threshold must be positive, got {}", self.pck_threshold));
        }
        self.sda.validate()?;
        for s in self.d_spec.iter().chain(&self.g_spec) {
            s.output_shape()?;
        }
        Ok(())
    }

    /// sha256 of the config with `epochs` cleared, so a run can be resumed
    /// with a longer schedule.
    pub fn hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let c = TrainConfig {
            epochs: 0,
            ..self.clone()
        };
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(json).into()
    }
}

/// A training instance with its rendered target.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub person: PersonInstance,
    pub heatmaps: HeatmapStack,
    /// Annotated joints.
    pub mask: Vec<bool>,
}

impl TrainSample {
    pub fn new(person: PersonInstance, stride: usize, sigma: f64) -> Result<Self> {
        person.validate()?;
        let dims = (person.image.width / stride, person.image.height / stride);
        let heatmaps = render_gaussian(&person.keypoints, dims, stride, sigma)?;
        let mask = person.keypoints.iter().map(|k| k.annotated).collect();
        Ok(TrainSample {
            person,
            heatmaps,
            mask,
        })
    }
}

fn stack_images<'a>(imgs: impl Iterator<Item = &'a crate::raster::Raster>, n: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    for img in imgs {
        if *dims.get_or_insert((img.height, img.width)) != (img.height, img.width) {
            return Err(Error::Malformed("batch images differ in size".into()));
        }
        data.extend_from_slice(&img.data);
    }
    let (h, w) = dims.ok_or_else(|| Error::Domain("empty batch".into()))?;
    Tensor::from_vec(&[n, 3, h, w], data)
}

fn stack_targets(batch: &[&TrainSample]) -> Result<(Tensor, Vec<bool>)> {
    let hm = &batch[0].heatmaps;
    let mut data = Vec::with_capacity(batch.len() * hm.data.len());
    let mut mask = Vec::with_capacity(batch.len() * hm.k);
    for s in batch {
        data.extend_from_slice(&s.heatmaps.data);
        mask.extend_from_slice(&s.mask);
    }
    Ok((Tensor::from_vec(&[batch.len(), hm.k, hm.height, hm.width], data)?, mask))
}

/// Settings of one adversarial step.
#[derive(Clone, Debug)]
pub struct StepOptions {
    pub sda: SdaConfig,
    pub groups: usize,
    pub clip: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub l_d: f64,
    pub l_g: f64,
}

/// One alternating update. The generator predicts per-group placements from
/// the clean images, parts are composited on the tape and the heatmap loss
/// is differentiated once: the discriminator descends it, then the
/// generator descends its negation.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_train_step<R: Rng + ?Sized>(
    batch: &[&TrainSample],
    pool: &PartPool,
    g: &mut Net,
    d: &mut Net,
    g_state: &mut OptimState,
    d_state: &mut OptimState,
    opts: &StepOptions,
    rng: &mut R,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if pool.is_empty() {
        return Err(Error::Unavailable("part pool is empty".into()));
    }
    let mut tape = Tape::new();
    let base = tape.input(stack_images(batch.iter().map(|s| &s.person.image), batch.len())?)?;
    let (lo, hi) = opts.sda.ranges.group_bounds();
    let gen = generator_forward(&mut tape, g, base, lo, hi)?;
    if tape.value(gen).shape[1] != 3 * opts.groups {
        return Err(Error::Config(format!(
            "generator predicts {} values, expected {}",
            tape.value(gen).shape[1],
            3 * opts.groups
        )));
    }
    let s_range = (opts.sda.ranges.s_lo, opts.sda.ranges.s_hi);
    let mut placements = Vec::with_capacity(batch.len());
    for s in batch {
        let parts = sample_parts(pool, opts.sda.n_parts, rng)?;
        placements.push(asda_placements(&s.person, &parts, opts.groups, s_range, rng)?);
    }
    let composite = tape.composite(base, gen, placements, opts.sda.rotation)?;
    let pred = discriminator_forward(&mut tape, d, composite)?;
    let (gt, mask) = stack_targets(batch)?;
    let loss = tape.mse(pred, gt, mask)?;
    tape.finalize();
    let l_d = tape.value(loss).item();
    let grads = tape.backward(loss, &Tensor::scalar(1.0))?.into_params();

    let mut gd = gather(&d.params, &grads);
    clip_global_norm(&mut gd, opts.clip);
    adam_step(&mut d.params, &gd, d_state)?;

    let mut gg = gather(&g.params, &grads);
    for t in &mut gg {
        t.scale(-1.0);
    }
    clip_global_norm(&mut gg, opts.clip);
    adam_step(&mut g.params, &gg, g_state)?;

    Ok(StepOutcome { l_d, l_g: -l_d })
}

/// Plain supervised update of the discriminator on already-built images.
pub fn supervised_step(
    images: Tensor,
    batch: &[&TrainSample],
    d: &mut Net,
    d_state: &mut OptimState,
    clip: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.input(images)?;
    let pred = discriminator_forward(&mut tape, d, x)?;
    let (gt, mask) = stack_targets(batch)?;
    let loss = tape.mse(pred, gt, mask)?;
    tape.finalize();
    let l = tape.value(loss).item();
    let grads = tape.backward(loss, &Tensor::scalar(1.0))?.into_params();
    let mut gd = gather(&d.params, &grads);
    clip_global_norm(&mut gd, clip);
    adam_step(&mut d.params, &gd, d_state)?;
    Ok(l)
}

/// Heatmaps of `d` for each person, in batches.
pub fn predict(d: &Net, people: &[&PersonInstance], stride: usize) -> Result<Vec<HeatmapStack>> {
    let mut out = Vec::with_capacity(people.len());
    for chunk in people.chunks(32) {
        let mut tape = Tape::new();
        let x = tape.input(stack_images(chunk.iter().map(|p| &p.image), chunk.len())?)?;
        let y = discriminator_forward(&mut tape, d, x)?;
        let (n, k, h, w) = tape.value(y).dims4()?;
        let len = k * h * w;
        for i in 0..n {
            out.push(HeatmapStack {
                k,
                width: w,
                height: h,
                stride,
                data: tape.value(y).data[i * len..(i + 1) * len].to_vec(),
            });
        }
    }
    Ok(out)
}

/// PCK of `d` on `people`, over annotated joints.
pub fn evaluate_pck(d: &Net, people: &[PersonInstance], stride: usize, threshold: f64, schema: &JointSchema) -> Result<f64> {
    let refs: Vec<&PersonInstance> = people.iter().collect();
    let maps = predict(d, &refs, stride)?;
    let preds = maps.iter().map(argmax_decode).collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = people.iter().map(|p| p.keypoints.clone()).collect();
    let norms: Vec<f64> = people.iter().map(|p| p.normalizer).collect();
    Ok(pck(&preds, &gts, &norms, threshold, None, schema)?.total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean discriminator loss over the epoch's steps.
    pub l_d: f64,
    /// Mean generator loss; only adversarial runs have one.
    pub l_g: Option<f64>,
    pub val_pck: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_d: f64,
    pub l_g: Option<f64>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub d: Net,
    pub d_state: OptimState,
    pub g: Option<(Net, OptimState)>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

pub type TrainOutcome = TrainState;

/// Where and when to write checkpoints.
#[derive(Clone, Debug)]
pub struct CheckpointPlan {
    pub dir: PathBuf,
    /// Also checkpoint after every epoch, not only at milestones and the end.
    pub every_epoch: bool,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch as u64 + 1);
    r
}

/// Fresh networks and optimizer state for `cfg` on `(c, h, w)` inputs.
pub fn init_state(cfg: &TrainConfig, input: (usize, usize, usize), joints: usize) -> Result<TrainState> {
    let d_spec = cfg
        .d_spec
        .clone()
        .unwrap_or_else(|| ToyNetSpec::toy_discriminator(input, joints, cfg.seed ^ 0xD15C));
    let d = Net::init(d_spec, D_PARAM_BASE)?;
    let d_state = OptimState::new(&d.params, cfg.lr);
    let g = if cfg.mode == Mode::Asda {
        let g_spec = cfg
            .g_spec
            .clone()
            .unwrap_or_else(|| ToyNetSpec::toy_generator(input, cfg.groups, cfg.seed ^ 0x6E4));
        let g = Net::init(g_spec, 0)?;
        let st = OptimState::new(&g.params, cfg.lr_g.unwrap_or(cfg.lr));
        Some((g, st))
    } else {
        None
    };
    Ok(TrainState {
        epochs_done: 0,
        d,
        d_state,
        g,
        epochs: Vec::new(),
        steps: Vec::new(),
    })
}

/// Runs `cfg.mode` over `train`, validating on `val` and optionally
/// checkpointing. `resume` continues a saved state of the same config.
pub fn train_loop(
    cfg: &TrainConfig,
    train: &[TrainSample],
    val: &[PersonInstance],
    pool: Option<&PartPool>,
    schema: &JointSchema,
    checkpoints: Option<&CheckpointPlan>,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode != Mode::Baseline && pool.is_none_or(|p| p.is_empty()) && cfg.epochs > 0 {
        return Err(Error::Unavailable(format!("{:?} mode needs a non-empty part pool", cfg.mode)));
    }
    let first = train.first().map(|s| &s.person.image);
    let input = first.map_or((3, 64, 64), |i| (3, i.height, i.width));
    let mut st = match resume {
        Some(s) => s,
        None => init_state(cfg, input, schema.len())?,
    };
    if cfg.epochs > 0 && train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let lr_g = cfg.lr_g.unwrap_or(cfg.lr);
    let opts = StepOptions {
        sda: cfg.sda,
        groups: cfg.groups,
        clip: cfg.clip,
    };
    while st.epochs_done < cfg.epochs {
        let epoch = st.epochs_done;
        let lr = lr_schedule(epoch, cfg.lr, &cfg.milestones, cfg.lr_factor);
        st.d_state.lr = lr;
        if let Some((_, gs)) = &mut st.g {
            gs.lr = lr_schedule(epoch, lr_g, &cfg.milestones, cfg.lr_factor);
        }
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum_d, mut sum_g, mut n) = (0.0, 0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainSample> = idx.iter().map(|&i| &train[i]).collect();
            let (l_d, l_g) = match cfg.mode {
                Mode::Baseline => {
                    let x = stack_images(batch.iter().map(|s| &s.person.image), batch.len())?;
                    (supervised_step(x, &batch, &mut st.d, &mut st.d_state, cfg.clip)?, None)
                }
                Mode::Sda => {
                    let pool = pool.expect("checked above");
                    let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
                    let imgs = batch
                        .iter()
                        .zip(&seeds)
                        .map(|(s, &seed)| apply_sda(&s.person, pool, &cfg.sda, seed).map(|a| a.image))
                        .collect::<Result<Vec<_>>>()?;
                    let x = stack_images(imgs.iter(), batch.len())?;
                    (supervised_step(x, &batch, &mut st.d, &mut st.d_state, cfg.clip)?, None)
                }
                Mode::Asda => {
                    let pool = pool.expect("checked above");
                    let (g, gs) = st.g.as_mut().ok_or_else(|| Error::State("adversarial run without a generator".into()))?;
                    let o = adversarial_train_step(&batch, pool, g, &mut st.d, gs, &mut st.d_state, &opts, &mut rng)?;
                    (o.l_d, Some(o.l_g))
                }
            };
            sum_d += l_d;
            if let Some(g) = l_g {
                sum_g += g;
            }
            n += 1;
            st.steps.push(StepRecord { epoch, step, l_d, l_g });
        }
        let val_pck = if cfg.val_every > 0 && !val.is_empty() && (epoch + 1) % cfg.val_every == 0 {
            Some(evaluate_pck(&st.d, val, cfg.stride, cfg.pck_threshold, schema)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            lr,
            l_d: sum_d / n as f64,
            l_g: (cfg.mode == Mode::Asda).then(|| sum_g / n as f64),
            val_pck,
        };
        info!(
            "epoch {epoch}: lr {lr:.1e} L_D {:.6} val PCK {}",
            rec.l_d,
            val_pck.map_or("-".into(), |v| format!("{v:.2}"))
        );
        st.epochs.push(rec);
        st.epochs_done += 1;
        if let Some(plan) = checkpoints {
            let at_milestone = cfg.milestones.contains(&st.epochs_done);
            if plan.every_epoch || at_milestone || st.epochs_done == cfg.epochs {
                let path = checkpoint_path(&plan.dir, st.epochs_done);
                checkpoint::save(&path, cfg, &st)?;
                debug!("checkpoint {}", path.display());
            }
        }
    }
    Ok(st)
}

pub fn checkpoint_path(dir: &Path, epochs_done: usize) -> PathBuf {
    dir.join(format!("epoch_{epochs_done:04}.ckpt"))
}

/// Line-delimited JSON: one `step` record per update, one `epoch` record per
/// epoch.
pub fn metrics_jsonl(st: &TrainState) -> String {
    #[derive(Serialize)]
    #[serde(tag = "kind", rename_all = "lowercase")]
    enum Line<'a> {
        Step(&'a StepRecord),
        Epoch(&'a EpochRecord),
    }
    let mut out = String::new();
    let mut steps = st.steps.iter().peekable();
    for e in &st.epochs {
        while let Some(s) = steps.next_if(|s| s.epoch == e.epoch) {
            out.push_str(&serde_json::to_string(&Line::Step(s)).expect("record serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&Line::Epoch(e)).expect("record serializes"));
        out.push('\n');
    }
    out
}
