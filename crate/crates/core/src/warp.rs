//! Differentiable affine placement of an RGBA patch onto a canvas.
//!
//! Coordinates are normalized: the canvas spans `[-1, 1]` on each axis with
//! y pointing down, pixel centres at `(2i + 1) / W - 1`. The patch lives in a
//! frame of the same pixel size as the canvas, centred on the patch, so the
//! base parameters `(1, 0, 0, 0)` place the patch at native resolution in the
//! middle of the canvas. The matrix maps canvas (target) points to patch
//! (source) points and the patch is sampled bilinearly with zero padding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Placement `(s, r, tx, ty)`: scale, rotation in radians and translation in
/// normalized canvas units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    pub s: f64,
    pub r: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AugParams {
    pub const BASE: AugParams = AugParams {
        s: 1.0,
        r: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(s: f64, r: f64, tx: f64, ty: f64) -> Self {
        AugParams { s, r, tx, ty }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::Domain(format!("scale must be positive, got {}", self.s)));
        }
        if !(self.r.is_finite() && self.tx.is_finite() && self.ty.is_finite()) {
            return Err(Error::Domain(format!("non-finite placement {self:?}")));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.s, self.r, self.tx, self.ty]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        AugParams::new(a[0], a[1], a[2], a[3])
    }
}

/// Sign layout of the rotation block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationConvention {
    /// `[[s cos r, s sin r], [-s sin r, s cos r]]`
    #[default]
    Printed,
    /// `[[s cos r, -s sin r], [s sin r, s cos r]]`
    Conventional,
}

/// Homogeneous 3x3 affine matrix, row-major, last row `(0, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMatrix(pub [[f64; 3]; 3]);

impl AffineMatrix {
    pub const IDENTITY: AffineMatrix =
        AffineMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn linear_det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }
}

pub fn affine_from_params(p: &AugParams) -> Result<AffineMatrix> {
    affine_with(p, RotationConvention::Printed)
}

pub fn affine_with(p: &AugParams, conv: RotationConvention) -> Result<AffineMatrix> {
    p.validate()?;
    let (sin, cos) = p.r.sin_cos();
    let (a, b) = (p.s * cos, p.s * sin);
    let m = match conv {
        RotationConvention::Printed => [[a, b, p.tx], [-b, a, p.ty], [0.0, 0.0, 1.0]],
        RotationConvention::Conventional => [[a, -b, p.tx], [b, a, p.ty], [0.0, 0.0, 1.0]],
    };
    Ok(AffineMatrix(m))
}

/// Partial derivatives of the 2x2 linear block w.r.t. `s` and `r`.
fn linear_partials(p: &AugParams, conv: RotationConvention) -> ([f64; 4], [f64; 4]) {
    let (sin, cos) = p.r.sin_cos();
    let s = p.s;
    match conv {
        RotationConvention::Printed => (
            [cos, sin, -sin, cos],
            [-s * sin, s * cos, -s * cos, -s * sin],
        ),
        RotationConvention::Conventional => (
            [cos, -sin, sin, cos],
            [-s * sin, -s * cos, s * cos, -s * sin],
        ),
    }
}

/// Maps a normalized target point to its source point: `(xs, ys, 1) = H (xt, yt, 1)`.
pub fn map_point(h: &AffineMatrix, pt: (f64, f64)) -> (f64, f64) {
    let m = &h.0;
    (
        m[0][0] * pt.0 + m[0][1] * pt.1 + m[0][2],
        m[1][0] * pt.0 + m[1][1] * pt.1 + m[1][2],
    )
}

/// Normalized coordinate of pixel centre `i` on an axis of `n` pixels.
#[inline]
pub fn pixel_to_norm(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Patch-pixel coordinate of normalized source coordinate `xs`, for a patch
/// of `patch_len` pixels inside a canvas axis of `canvas_len` pixels.
#[inline]
fn norm_to_patch(xs: f64, canvas_len: usize, patch_len: usize) -> f64 {
    xs * canvas_len as f64 * 0.5 + (patch_len as f64 - 1.0) * 0.5
}

/// Texel fetch with zero padding.
#[inline]
fn texel(plane: &[f64], w: usize, h: usize, x: i64, y: i64) -> f64 {
    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Bilinear footprint of one sample: base cell, fractional offsets.
#[derive(Clone, Copy)]
struct Footprint {
    x0: i64,
    y0: i64,
    fx: f64,
    fy: f64,
}

impl Footprint {
    #[inline]
    fn at(u: f64, v: f64) -> Self {
        // floor picks the lower cell at exact integers
        let (xf, yf) = (u.floor(), v.floor());
        Footprint {
            x0: xf as i64,
            y0: yf as i64,
            fx: u - xf,
            fy: v - yf,
        }
    }

    #[inline]
    fn outside(&self, w: usize, h: usize) -> bool {
        self.x0 < -1 || self.y0 < -1 || self.x0 >= w as i64 || self.y0 >= h as i64
    }

    /// Interpolated value and its (d/du, d/dv).
    #[inline]
    fn sample(&self, plane: &[f64], w: usize, h: usize) -> (f64, f64, f64) {
        let t00 = texel(plane, w, h, self.x0, self.y0);
        let t10 = texel(plane, w, h, self.x0 + 1, self.y0);
        let t01 = texel(plane, w, h, self.x0, self.y0 + 1);
        let t11 = texel(plane, w, h, self.x0 + 1, self.y0 + 1);
        // difference form: exact for locally constant fields
        let dx = t10 - t00;
        let dy = t01 - t00;
        let dxy = t11 - t10 - t01 + t00;
        let value = t00 + self.fx * dx + self.fy * dy + self.fx * self.fy * dxy;
        (value, dx + self.fy * dxy, dy + self.fx * dxy)
    }
}

/// Sample locations of every canvas pixel, in patch-pixel coordinates.
fn sample_grid(
    h: &AffineMatrix,
    patch_w: usize,
    patch_h: usize,
    canvas_w: usize,
    canvas_h: usize,
) -> impl Iterator<Item = (usize, f64, f64, f64, f64)> + '_ {
    (0..canvas_h).flat_map(move |j| {
        let yt = pixel_to_norm(j, canvas_h);
        (0..canvas_w).map(move |i| {
            let xt = pixel_to_norm(i, canvas_w);
            let (xs, ys) = map_point(h, (xt, yt));
            (
                j * canvas_w + i,
                xt,
                yt,
                norm_to_patch(xs, canvas_w, patch_w),
                norm_to_patch(ys, canvas_h, patch_h),
            )
        })
    })
}

fn check_warp_inputs(patch: &Raster, p: &AugParams, canvas: (usize, usize)) -> Result<()> {
    if patch.width == 0 || patch.height == 0 || patch.channels == 0 {
        return Err(Error::Domain("cannot warp an empty patch".into()));
    }
    if canvas.0 == 0 || canvas.1 == 0 {
        return Err(Error::Domain("canvas must be at least 1x1".into()));
    }
    p.validate()
}

/// Resamples `patch` (any channel count, RGBA in practice) onto a
/// `canvas.0 x canvas.1` raster.
pub fn warp_patch(patch: &Raster, p: &AugParams, canvas: (usize, usize)) -> Result<Raster> {
    warp_patch_with(patch, p, canvas, RotationConvention::Printed)
}

pub fn warp_patch_with(
    patch: &Raster,
    p: &AugParams,
    canvas: (usize, usize),
    conv: RotationConvention,
) -> Result<Raster> {
    check_warp_inputs(patch, p, canvas)?;
    let h = affine_with(p, conv)?;
    let (cw, ch) = canvas;
    let (pw, ph) = (patch.width, patch.height);
    let mut out = Raster::zeros(cw, ch, patch.channels);
    let n = cw * ch;
    for (k, _, _, u, v) in sample_grid(&h, pw, ph, cw, ch) {
        let fp = Footprint::at(u, v);
        if fp.outside(pw, ph) {
            continue;
        }
        for c in 0..patch.channels {
            out.data[c * n + k] = fp.sample(patch.plane(c), pw, ph).0;
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss w.r.t. the placement and the patch texels.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpGrad {
    /// d/d(s, r, tx, ty)
    pub d_params: [f64; 4],
    pub d_pixels: Raster,
}

/// Reverse pass of [`warp_patch`] given the upstream gradient of the output.
pub fn warp_backward(patch: &Raster, p: &AugParams, upstream: &Raster) -> Result<WarpGrad> {
    warp_backward_with(patch, p, upstream, RotationConvention::Printed, true)
}

/// As [`warp_backward`]; when `with_pixels` is false `d_pixels` is left
/// zero-sized, which is what training uses since patches are constants.
pub fn warp_backward_with(
    patch: &Raster,
    p: &AugParams,
    upstream: &Raster,
    conv: RotationConvention,
    with_pixels: bool,
) -> Result<WarpGrad> {
    let canvas = (upstream.width, upstream.height);
    check_warp_inputs(patch, p, canvas)?;
    if upstream.channels != patch.channels {
        return Err(Error::Domain(format!(
            "upstream has {} channels, patch has {}",
            upstream.channels, patch.channels
        )));
    }
    let h = affine_with(p, conv)?;
    let (cw, ch) = canvas;
    let (pw, ph) = (patch.width, patch.height);
    let n = cw * ch;
    let mut d_pixels = if with_pixels {
        Raster::zeros(pw, ph, patch.channels)
    } else {
        Raster::zeros(0, 0, 0)
    };
    // accumulated dL/dH entries: a, b, c, d, tx, ty
    let mut dh = [0.0f64; 6];
    let (half_w, half_h) = (cw as f64 * 0.5, ch as f64 * 0.5);
    for (k, xt, yt, u, v) in sample_grid(&h, pw, ph, cw, ch) {
        let fp = Footprint::at(u, v);
        if fp.outside(pw, ph) {
            continue;
        }
        let (mut du, mut dv) = (0.0, 0.0);
        for c in 0..patch.channels {
            let g = upstream.data[c * n + k];
            if g == 0.0 {
                continue;
            }
            let (_, su, sv) = fp.sample(patch.plane(c), pw, ph);
            du += g * su;
            dv += g * sv;
            if with_pixels {
                let plane = d_pixels.plane_mut(c);
                let weights = [
                    (0, 0, (1.0 - fp.fx) * (1.0 - fp.fy)),
                    (1, 0, fp.fx * (1.0 - fp.fy)),
                    (0, 1, (1.0 - fp.fx) * fp.fy),
                    (1, 1, fp.fx * fp.fy),
                ];
                for (ox, oy, wgt) in weights {
                    let (x, y) = (fp.x0 + ox, fp.y0 + oy);
                    if x >= 0 && y >= 0 && (x as usize) < pw && (y as usize) < ph {
                        plane[y as usize * pw + x as usize] += g * wgt;
                    }
                }
            }
        }
        let dxs = du * half_w;
        let dys = dv * half_h;
        dh[0] += dxs * xt;
        dh[1] += dxs * yt;
        dh[2] += dys * xt;
        dh[3] += dys * yt;
        dh[4] += dxs;
        dh[5] += dys;
    }
    let (ds, dr) = linear_partials(p, conv);
    let dot = |m: [f64; 4]| dh[0] * m[0] + dh[1] * m[1] + dh[2] * m[2] + dh[3] * m[3];
    Ok(WarpGrad {
        d_params: [dot(ds), dot(dr), dh[4], dh[5]],
        d_pixels,
    })
}

/// Smallest distance (in patch pixels) from any in-support sample to a texel
/// boundary. Finite differences are only meaningful when this exceeds the
/// displacement caused by the step.
pub fn kink_margin(patch_dims: (usize, usize), p: &AugParams, canvas: (usize, usize)) -> Result<f64> {
    let h = affine_from_params(p)?;
    let mut best = f64::INFINITY;
    for (_, _, _, u, v) in sample_grid(&h, patch_dims.0, patch_dims.1, canvas.0, canvas.1) {
        let fp = Footprint::at(u, v);
        if fp.outside(patch_dims.0, patch_dims.1) {
            continue;
        }
        let d = fp.fx.min(1.0 - fp.fx).min(fp.fy).min(1.0 - fp.fy);
        best = best.min(d);
    }
    Ok(best)
}

/// Relative error with an absolute floor of 1e-3 on the denominator, so
/// near-zero gradients are compared absolutely.
pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// `<up, hi - lo>`, summed termwise so unchanged samples cancel exactly.
fn weighted_diff(hi: &Raster, lo: &Raster, up: &Raster) -> f64 {
    hi.data
        .iter()
        .zip(&lo.data)
        .zip(&up.data)
        .map(|((a, b), w)| (a - b) * w)
        .sum()
}

/// Compares [`warp_backward`] against central differences over `trials`
/// random upstream gradients (canvas = patch size). Parameter gradients and a
/// random 5% of texel gradients are checked; returns the worst relative
/// error.
pub fn grad_check(patch: &Raster, p: &AugParams, trials: usize, h: f64, seed: u64) -> Result<f64> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    if trials == 0 {
        return Err(Error::Domain("grad_check needs at least one trial".into()));
    }
    grad_check_on_canvas(patch, p, (patch.width, patch.height), trials, h, seed)
}

pub fn grad_check_on_canvas(
    patch: &Raster,
    p: &AugParams,
    canvas: (usize, usize),
    trials: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let base = p.to_array();
    for _ in 0..trials {
        let mut up = Raster::zeros(canvas.0, canvas.1, patch.channels);
        for v in &mut up.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        let grad = warp_backward(patch, p, &up)?;
        for k in 0..4 {
            let mut hi = base;
            let mut lo = base;
            hi[k] += h;
            lo[k] -= h;
            let fh = warp_patch(patch, &AugParams::from_array(hi), canvas)?;
            let fl = warp_patch(patch, &AugParams::from_array(lo), canvas)?;
            worst = worst.max(rel_err(grad.d_params[k], weighted_diff(&fh, &fl, &up) / (2.0 * h)));
        }
        let picks = (patch.data.len() / 20).max(1);
        for _ in 0..picks {
            let idx = rng.gen_range(0..patch.data.len());
            // the warp is linear in the texels, so warp(x + h e) - warp(x - h e)
            // equals warp(2h e); evaluating the latter avoids cancellation
            let mut step = Raster::zeros(patch.width, patch.height, patch.channels);
            step.data[idx] = 2.0 * h;
            let diff = warp_patch(&step, p, canvas)?;
            let fd: f64 = diff.data.iter().zip(&up.data).map(|(a, w)| a * w).sum::<f64>() / (2.0 * h);
            worst = worst.max(rel_err(grad.d_pixels.data[idx], fd));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn random_patch(w: usize, h: usize, c: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = Raster::zeros(w, h, c);
        for v in &mut r.data {
            *v = rng.gen();
        }
        r
    }

    #[test]
    fn base_params_give_identity() {
        assert_eq!(affine_from_params(&AugParams::BASE).unwrap(), AffineMatrix::IDENTITY);
    }

    #[test]
    fn scale_and_translation_matrix() {
        let m = affine_from_params(&AugParams::new(2.0, 0.0, 0.3, -0.4)).unwrap();
        assert_eq!(m.0, [[2.0, 0.0, 0.3], [0.0, 2.0, -0.4], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn quarter_turn_matrix() {
        let m = affine_from_params(&AugParams::new(1.0, FRAC_PI_2, 0.0, 0.0)).unwrap();
        let want = [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for (r, w) in m.0.iter().zip(&want) {
            for (a, b) in r.iter().zip(w) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert_eq!(m.0[2], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn nonpositive_scale_is_domain_error() {
        assert!(matches!(affine_from_params(&AugParams::new(0.0, 0.0, 0.0, 0.0)), Err(Error::Domain(_))));
        assert!(matches!(affine_from_params(&AugParams::new(-1.0, 0.0, 0.0, 0.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn conventional_rotation_is_transpose() {
        let p = AugParams::new(1.3, 0.4, 0.1, 0.2);
        let a = affine_with(&p, RotationConvention::Printed).unwrap();
        let b = affine_with(&p, RotationConvention::Conventional).unwrap();
        assert_eq!(a.0[0][1], b.0[1][0]);
        assert_eq!(a.0[1][0], b.0[0][1]);
    }

    #[test]
    fn map_point_examples() {
        assert_eq!(map_point(&AffineMatrix::IDENTITY, (0.5, -0.5)), (0.5, -0.5));
        let t = affine_from_params(&AugParams::new(1.0, 0.0, 0.25, -0.125)).unwrap();
        assert_eq!(map_point(&t, (0.5, 0.5)), (0.75, 0.375));
        let m = affine_from_params(&AugParams::new(2.0, FRAC_PI_2, 0.0, 0.0)).unwrap();
        let (x, y) = map_point(&m, (0.1, 0.2));
        assert!((x - 0.4).abs() < 1e-15 && (y + 0.2).abs() < 1e-15);
    }

    #[test]
    fn identity_warp_reproduces_patch() {
        let patch = random_patch(7, 5, 4, 1);
        let out = warp_patch(&patch, &AugParams::BASE, (7, 5)).unwrap();
        assert_eq!(out, patch);
    }

    #[test]
    fn off_canvas_translation_gives_zero() {
        let patch = random_patch(6, 6, 4, 2);
        let out = warp_patch(&patch, &AugParams::new(1.0, 0.0, 5.0, 0.0), (6, 6)).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centre_of_four_texels_is_their_mean() {
        let patch = Raster::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 10.0]);
        // a 1x1 canvas samples the patch centre (0.5, 0.5)
        let out = warp_patch(&patch, &AugParams::BASE, (1, 1)).unwrap();
        assert!((out.data[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn empty_patch_and_canvas_are_domain_errors() {
        let empty = Raster::zeros(0, 3, 4);
        assert!(matches!(warp_patch(&empty, &AugParams::BASE, (3, 3)), Err(Error::Domain(_))));
        let patch = random_patch(2, 2, 4, 3);
        assert!(matches!(warp_patch(&patch, &AugParams::BASE, (0, 3)), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let patch = random_patch(5, 5, 4, 4);
        let g = warp_backward(&patch, &AugParams::new(1.1, 0.2, 0.1, 0.0), &Raster::zeros(5, 5, 4)).unwrap();
        assert_eq!(g.d_params, [0.0; 4]);
        assert!(g.d_pixels.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_patch_interior_translation_gradient_vanishes() {
        let patch = Raster::filled(16, 16, 4, 0.6);
        let p = AugParams::new(1.05, 0.1, 0.02, -0.03);
        let mut up = Raster::zeros(16, 16, 4);
        for c in 0..4 {
            for y in 5..11 {
                for x in 5..11 {
                    up.set(c, x, y, 1.0 + (x * y) as f64 * 0.1);
                }
            }
        }
        let g = warp_backward(&patch, &p, &up).unwrap();
        assert!(g.d_params[2].abs() <= 1e-10 && g.d_params[3].abs() <= 1e-10, "{:?}", g.d_params);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let patch = random_patch(8, 8, 4, 5);
        let p = AugParams::new(1.1, 0.3, 0.05, -0.07);
        assert!(kink_margin((8, 8), &p, (8, 8)).unwrap() > 1e-3);
        let err = grad_check(&patch, &p, 5, 1e-5, 11).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn constant_patch_grad_check_is_exact() {
        let patch = Raster::filled(16, 16, 4, 0.25);
        let p = AugParams::new(1.02, 0.05, 0.01, 0.02);
        let err = grad_check_on_canvas(&patch, &p, (8, 8), 3, 1e-5, 1).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let patch = random_patch(4, 4, 4, 6);
        assert!(matches!(grad_check(&patch, &AugParams::BASE, 1, 0.0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn whole_pixel_translation_round_trip() {
        let patch = random_patch(12, 12, 4, 7);
        // 3 pixels right, 2 up on a 12-pixel canvas
        let (dx, dy) = (3.0 * 2.0 / 12.0, -2.0 * 2.0 / 12.0);
        let fwd = warp_patch(&patch, &AugParams::new(1.0, 0.0, dx, dy), (12, 12)).unwrap();
        let back = warp_patch(&fwd, &AugParams::new(1.0, 0.0, -dx, -dy), (12, 12)).unwrap();
        for c in 0..4 {
            for y in 0..10 {
                for x in 3..9 {
                    assert!((back.get(c, x, y) - patch.get(c, x, y)).abs() < 1e-12);
                }
            }
        }
    }
}
