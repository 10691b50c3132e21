//! Augmented-sample assembly: scale alignment, alpha pasting and the random
//! and generator-driven placement modes.

use std::sync::Arc;

use image::{Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advnet::tape::{NodeId, Tape, TapePlacement};
use crate::advnet::tensor::Tensor;
use crate::error::{Error, Result};
use crate::partpool::{sample_parts, PartPatch, PartPool, PatchRef};
use crate::pose::Keypoint;
use crate::raster::Raster;
use crate::warp::{warp_patch_with, AugParams, RotationConvention};

/// Axis-aligned person box in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonInstance {
    /// RGB, values in [0, 1].
    pub image: Raster,
    pub bbox: PersonBox,
    pub keypoints: Vec<Keypoint>,
    /// Distance that PCK thresholds are relative to (torso or head size).
    pub normalizer: f64,
}

impl PersonInstance {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        let b = &self.bbox;
        if self.image.channels != 3 {
            return Err(Error::Malformed(format!("person image has {} channels", self.image.channels)));
        }
        if b.x < 0.0 || b.y < 0.0 || b.w < 0.0 || b.h < 0.0 || b.x + b.w > w || b.y + b.h > h {
            return Err(Error::Malformed(format!("person box {b:?} outside {w}x{h} image")));
        }
        for (j, k) in self.keypoints.iter().enumerate() {
            if k.annotated && !(k.x >= 0.0 && k.y >= 0.0 && k.x < w && k.y < h) {
                return Err(Error::Malformed(format!("joint {j} at ({}, {}) outside image", k.x, k.y)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasteRecord {
    pub patch_ref: PatchRef,
    pub params: AugParams,
    pub order: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub image: Raster,
    pub keypoints: Vec<Keypoint>,
    pub pastes: Vec<PasteRecord>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdaRanges {
    pub s_lo: f64,
    pub s_hi: f64,
    pub r_lo: f64,
    pub r_hi: f64,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl Default for SdaRanges {
    fn default() -> Self {
        let r = std::f64::consts::FRAC_PI_6;
        SdaRanges {
            s_lo: 0.7,
            s_hi: 1.3,
            r_lo: -r,
            r_hi: r,
            t_lo: -0.5,
            t_hi: 0.5,
        }
    }
}

impl SdaRanges {
    pub fn validate(&self) -> Result<()> {
        let pairs = [(self.s_lo, self.s_hi), (self.r_lo, self.r_hi), (self.t_lo, self.t_hi)];
        if pairs.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
            return Err(Error::Config(format!("ranges need finite lo <= hi: {self:?}")));
        }
        if !(self.s_lo > 0.0) {
            return Err(Error::Config(format!("scale range must be positive, got s_lo = {}", self.s_lo)));
        }
        Ok(())
    }

    /// Lower/upper bounds of one `(r, tx, ty)` group.
    pub fn group_bounds(&self) -> ([f64; 3], [f64; 3]) {
        ([self.r_lo, self.t_lo, self.t_lo], [self.r_hi, self.t_hi, self.t_hi])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdaConfig {
    pub n_parts: usize,
    pub ranges: SdaRanges,
    pub rotation: RotationConvention,
}

impl Default for SdaConfig {
    fn default() -> Self {
        SdaConfig {
            n_parts: 1,
            ranges: SdaRanges::default(),
            rotation: RotationConvention::Printed,
        }
    }
}

impl SdaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_parts == 0 {
            return Err(Error::Config("n_parts must be at least 1".into()));
        }
        self.ranges.validate()
    }
}

fn resample_axis(dst: usize, src: usize) -> impl Fn(usize) -> (usize, usize, f64) {
    let ratio = src as f64 / dst as f64;
    move |i| {
        let x = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(src - 1);
        (x0, x1, x - x0 as f64)
    }
}

/// Resizes `patch` by `person.bbox.h / patch.source_person_height`
/// (bilinear, edge-clamped) and re-binarizes alpha at half of its maximum.
pub fn align_part_scale(patch: &PartPatch, person: &PersonInstance) -> Result<PartPatch> {
    let f = person.bbox.h / patch.source_person_height;
    if !(f > 0.0) || !f.is_finite() {
        return Err(Error::Domain(format!(
            "scale factor {f} from person height {} and source height {}",
            person.bbox.h, patch.source_person_height
        )));
    }
    let (w, h) = (patch.width(), patch.height());
    if w == 0 || h == 0 {
        return Err(Error::Domain("cannot align an empty patch".into()));
    }
    let nw = ((w as f64 * f).round() as usize).max(1);
    let nh = ((h as f64 * f).round() as usize).max(1);
    if nw == w && nh == h {
        return Ok(patch.clone());
    }
    let (ax, ay) = (resample_axis(nw, w), resample_axis(nh, h));
    let src = &patch.pixels;
    let mut out = RgbaImage::new(nw as u32, nh as u32);
    for y in 0..nh {
        let (y0, y1, fy) = ay(y);
        for x in 0..nw {
            let (x0, x1, fx) = ax(x);
            let px = |xx: usize, yy: usize| src.get_pixel(xx as u32, yy as u32).0;
            let (p00, p10, p01, p11) = (px(x0, y0), px(x1, y0), px(x0, y1), px(x1, y1));
            let mut v = [0u8; 4];
            for c in 0..4 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bot = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                let val = top * (1.0 - fy) + bot * fy;
                v[c] = if c == 3 {
                    if val >= 127.5 {
                        255
                    } else {
                        0
                    }
                } else {
                    val.round().clamp(0.0, 255.0) as u8
                };
            }
            out.put_pixel(x as u32, y as u32, Rgba(v));
        }
    }
    Ok(PartPatch {
        pixels: out,
        ..patch.clone()
    })
}

fn check_paste(image: &Raster, warped: &Raster) -> Result<()> {
    if image.channels != 3 || warped.channels != 4 || image.width != warped.width || image.height != warped.height {
        return Err(Error::Domain(format!(
            "paste needs an RGB image and an RGBA layer of equal size; got {}x{}x{} and {}x{}x{}",
            image.width, image.height, image.channels, warped.width, warped.height, warped.channels
        )));
    }
    Ok(())
}

/// `(1 - a) image + a rgb` per pixel, `a` the layer's alpha.
pub fn paste(image: &Raster, warped: &Raster) -> Result<Raster> {
    check_paste(image, warped)?;
    let n = image.plane_len();
    let alpha = warped.plane(3);
    let mut out = image.clone();
    for c in 0..3 {
        let rgb = warped.plane(c);
        for (i, o) in out.plane_mut(c).iter_mut().enumerate() {
            let a = alpha[i];
            if a != 0.0 {
                *o = (1.0 - a) * *o + a * rgb[i];
            }
        }
    }
    debug_assert_eq!(out.data.len(), 3 * n);
    Ok(out)
}

/// Gradients of [`paste`] w.r.t. the image and the RGBA layer.
pub fn paste_backward(image: &Raster, warped: &Raster, upstream: &Raster) -> Result<(Raster, Raster)> {
    check_paste(image, warped)?;
    if !upstream.same_shape(image) {
        return Err(Error::Domain("paste upstream must match the image".into()));
    }
    let n = image.plane_len();
    let mut d_image = upstream.clone();
    let mut d_layer = Raster::zeros(warped.width, warped.height, 4);
    let alpha = warped.plane(3);
    for c in 0..3 {
        let g = upstream.plane(c);
        let prev = image.plane(c);
        let rgb = warped.plane(c);
        let di = d_image.plane_mut(c);
        for i in 0..n {
            di[i] = (1.0 - alpha[i]) * g[i];
        }
        let dl = &mut d_layer.data[c * n..(c + 1) * n];
        for i in 0..n {
            dl[i] = alpha[i] * g[i];
        }
        let da = &mut d_layer.data[3 * n..4 * n];
        for i in 0..n {
            da[i] += g[i] * (rgb[i] - prev[i]);
        }
    }
    Ok((d_image, d_layer))
}

/// One uniform draw per component.
pub fn random_params<R: Rng + ?Sized>(ranges: &SdaRanges, rng: &mut R) -> AugParams {
    let mut u = |lo: f64, hi: f64| if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let s = u(ranges.s_lo, ranges.s_hi);
    let r = u(ranges.r_lo, ranges.r_hi);
    let tx = u(ranges.t_lo, ranges.t_hi);
    let ty = u(ranges.t_lo, ranges.t_hi);
    AugParams::new(s, r, tx, ty)
}

/// Converts a patch to a float RGBA raster with alpha in [0, 1].
pub fn patch_raster(patch: &PartPatch) -> Raster {
    Raster::from_rgba(&patch.pixels)
}

/// Warps and pastes `parts` in order onto a copy of `image`.
pub fn compose(
    image: &Raster,
    parts: &[(&Raster, AugParams)],
    conv: RotationConvention,
) -> Result<Raster> {
    let canvas = (image.width, image.height);
    let mut out = image.clone();
    for (patch, p) in parts {
        let warped = warp_patch_with(patch, p, canvas, conv)?;
        out = paste(&out, &warped)?;
    }
    Ok(out)
}

/// Re-executes recorded pastes against `pool`.
pub fn replay(
    person: &PersonInstance,
    pool: &PartPool,
    pastes: &[PasteRecord],
    conv: RotationConvention,
) -> Result<Raster> {
    let mut ordered: Vec<&PasteRecord> = pastes.iter().collect();
    ordered.sort_by_key(|r| r.order);
    if ordered.iter().enumerate().any(|(i, r)| r.order != i) {
        return Err(Error::Malformed("paste orders must be contiguous from 0".into()));
    }
    let mut rasters = Vec::with_capacity(ordered.len());
    for r in &ordered {
        let patch = pool
            .get(r.patch_ref)
            .ok_or_else(|| Error::Malformed(format!("pool has no entry {:?}", r.patch_ref)))?;
        rasters.push((patch_raster(&align_part_scale(patch, person)?), r.params));
    }
    let refs: Vec<(&Raster, AugParams)> = rasters.iter().map(|(r, p)| (r, *p)).collect();
    compose(&person.image, &refs, conv)
}

/// Random semantic augmentation: `cfg.n_parts` pool entries, each aligned,
/// placed with independent random parameters and pasted in draw order.
pub fn apply_sda(person: &PersonInstance, pool: &PartPool, cfg: &SdaConfig, seed: u64) -> Result<AugmentedSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn = sample_parts(pool, cfg.n_parts, &mut rng)?;
    let mut pastes = Vec::with_capacity(drawn.len());
    let mut rasters = Vec::with_capacity(drawn.len());
    for (order, (patch_ref, patch)) in drawn.into_iter().enumerate() {
        let params = random_params(&cfg.ranges, &mut rng);
        rasters.push(patch_raster(&align_part_scale(patch, person)?));
        pastes.push(PasteRecord {
            patch_ref,
            params,
            order,
        });
    }
    let refs: Vec<(&Raster, AugParams)> = rasters.iter().zip(&pastes).map(|(r, p)| (r, p.params)).collect();
    Ok(AugmentedSample {
        image: compose(&person.image, &refs, cfg.rotation)?,
        keypoints: person.keypoints.clone(),
        pastes,
        seed,
    })
}

/// Generator-group index of a part class (class 0 is background).
pub fn class_group(class_id: u8, groups: usize) -> Result<usize> {
    match (class_id as usize).checked_sub(1) {
        Some(g) if g < groups => Ok(g),
        _ => Err(Error::Config(format!(
            "part class {class_id} has no (r, tx, ty) group among {groups}"
        ))),
    }
}

/// Aligns `parts` to `person` and pairs each with its class group and a
/// freshly drawn scale.
pub fn asda_placements<R: Rng + ?Sized>(
    person: &PersonInstance,
    parts: &[(PatchRef, &PartPatch)],
    groups: usize,
    s_range: (f64, f64),
    s_rng: &mut R,
) -> Result<Vec<TapePlacement>> {
    parts
        .iter()
        .map(|(_, patch)| {
            let group = class_group(patch.class_id, groups)?;
            let s = if s_range.0 == s_range.1 {
                s_range.0
            } else {
                s_rng.gen_range(s_range.0..s_range.1)
            };
            Ok(TapePlacement {
                group,
                s,
                patch: Arc::new(patch_raster(&align_part_scale(patch, person)?)),
            })
        })
        .collect()
}

/// Result of [`apply_asda`]: the sample plus the tape that produced it.
pub struct AsdaTrace {
    pub sample: AugmentedSample,
    /// Open tape; callers append a loss and finalize.
    pub tape: Tape,
    /// `[1, 3G]` generator table node.
    pub gen: NodeId,
    /// `[1, 3, h, w]` augmented image node.
    pub image: NodeId,
}

/// Adversarial placement: the `(r, tx, ty)` of each part comes from the row
/// of `gen_params` for its class; only the scale is random.
pub fn apply_asda<R: Rng + ?Sized>(
    person: &PersonInstance,
    parts: &[(PatchRef, &PartPatch)],
    gen_params: &[[f64; 3]],
    s_range: (f64, f64),
    s_rng: &mut R,
    conv: RotationConvention,
) -> Result<AsdaTrace> {
    let placements = asda_placements(person, parts, gen_params.len(), s_range, s_rng)?;
    let pastes = parts
        .iter()
        .zip(&placements)
        .enumerate()
        .map(|(order, ((patch_ref, _), pl))| {
            let g = gen_params[pl.group];
            PasteRecord {
                patch_ref: *patch_ref,
                params: AugParams::new(pl.s, g[0], g[1], g[2]),
                order,
            }
        })
        .collect();
    let img = &person.image;
    let mut tape = Tape::new();
    let base = tape.input(Tensor::from_vec(&[1, 3, img.height, img.width], img.data.clone())?)?;
    let gen = tape.input(Tensor::from_vec(
        &[1, 3 * gen_params.len()],
        gen_params.iter().flatten().copied().collect(),
    )?)?;
    let image = tape.composite(base, gen, vec![placements], conv)?;
    let out = Raster::from_vec(img.width, img.height, 3, tape.value(image).data.clone());
    Ok(AsdaTrace {
        sample: AugmentedSample {
            image: out,
            keypoints: person.keypoints.clone(),
            pastes,
            seed: 0,
        },
        tape,
        gen,
        image,
    })
}
