//! Gaussian heatmap targets and the masked mean-squared heatmap loss.

use crate::error::{Error, Result};
use crate::pose::Keypoint;

/// `k` maps of `width x height`, stored map-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    pub k: usize,
    pub width: usize,
    pub height: usize,
    /// Input pixels per heatmap pixel.
    pub stride: usize,
    pub data: Vec<f64>,
}

impl HeatmapStack {
    pub fn zeros(k: usize, width: usize, height: usize, stride: usize) -> Self {
        HeatmapStack {
            k,
            width,
            height,
            stride,
            data: vec![0.0; k * width * height],
        }
    }

    pub fn map_len(&self) -> usize {
        self.width * self.height
    }

    pub fn map(&self, j: usize) -> &[f64] {
        let n = self.map_len();
        &self.data[j * n..(j + 1) * n]
    }

    pub fn map_mut(&mut self, j: usize) -> &mut [f64] {
        let n = self.map_len();
        &mut self.data[j * n..(j + 1) * n]
    }

    #[inline]
    pub fn get(&self, j: usize, x: usize, y: usize) -> f64 {
        self.data[(j * self.height + y) * self.width + x]
    }

    fn same_shape(&self, other: &HeatmapStack) -> bool {
        self.k == other.k && self.width == other.width && self.height == other.height
    }
}

/// Heatmap-grid cell nearest to an input-pixel coordinate.
pub fn grid_point(v: f64, stride: usize) -> i64 {
    (v / stride as f64).round() as i64
}

/// Renders one unnormalized Gaussian per annotated joint, peaking at 1 on the
/// joint's nearest grid cell and truncated beyond `3 sigma`. Unannotated
/// joints get an all-zero map.
pub fn render_gaussian(
    keypoints: &[Keypoint],
    dims: (usize, usize),
    stride: usize,
    sigma: f64,
) -> Result<HeatmapStack> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if stride == 0 {
        return Err(Error::Domain("stride must be at least 1".into()));
    }
    let (w, h) = dims;
    let mut out = HeatmapStack::zeros(keypoints.len(), w, h, stride);
    let radius = 3.0 * sigma;
    let r = radius.floor() as i64;
    let denom = 2.0 * sigma * sigma;
    for (j, kp) in keypoints.iter().enumerate() {
        if !kp.annotated {
            continue;
        }
        let (cx, cy) = (grid_point(kp.x, stride), grid_point(kp.y, stride));
        let map = out.map_mut(j);
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let d2 = (dx * dx + dy * dy) as f64;
                if d2 > radius * radius {
                    continue;
                }
                map[y as usize * w + x as usize] = (-d2 / denom).exp();
            }
        }
    }
    Ok(out)
}

/// Mean squared difference over the maps with `mask[j] == true`; the
/// building block shared by [`mse_loss`] and the batched training loss.
pub(crate) fn masked_mse(pred: &[f64], gt: &[f64], map_len: usize, mask: &[bool]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for (j, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        let r = j * map_len..(j + 1) * map_len;
        for (p, g) in pred[r.clone()].iter().zip(&gt[r]) {
            let d = p - g;
            sum += d * d;
        }
        count += map_len;
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (sum / count as f64, count)
    }
}

pub(crate) fn masked_mse_grad(
    pred: &[f64],
    gt: &[f64],
    map_len: usize,
    mask: &[bool],
    scale: f64,
) -> Vec<f64> {
    let count = mask.iter().filter(|&&m| m).count() * map_len;
    let mut grad = vec![0.0; pred.len()];
    if count == 0 {
        return grad;
    }
    let f = 2.0 * scale / count as f64;
    for (j, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        for i in j * map_len..(j + 1) * map_len {
            grad[i] = f * (pred[i] - gt[i]);
        }
    }
    grad
}

fn check_loss_inputs(pred: &HeatmapStack, gt: &HeatmapStack, mask: &[bool]) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Domain(format!(
            "heatmap shapes differ: {}x{}x{} vs {}x{}x{}",
            pred.k, pred.height, pred.width, gt.k, gt.height, gt.width
        )));
    }
    if mask.len() != pred.k {
        return Err(Error::Domain(format!(
            "joint mask has {} entries for {} maps",
            mask.len(),
            pred.k
        )));
    }
    Ok(())
}

/// Mean of squared differences over every pixel of the masked-in joints.
pub fn mse_loss(pred: &HeatmapStack, gt: &HeatmapStack, joint_mask: &[bool]) -> Result<f64> {
    check_loss_inputs(pred, gt, joint_mask)?;
    Ok(masked_mse(&pred.data, &gt.data, pred.map_len(), joint_mask).0)
}

/// `2 (pred - gt) / M` on masked-in joints, zero elsewhere.
pub fn mse_loss_grad(pred: &HeatmapStack, gt: &HeatmapStack, joint_mask: &[bool]) -> Result<HeatmapStack> {
    check_loss_inputs(pred, gt, joint_mask)?;
    Ok(HeatmapStack {
        data: masked_mse_grad(&pred.data, &gt.data, pred.map_len(), joint_mask, 1.0),
        ..pred.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(k: usize, w: usize, h: usize, rng: &mut ChaCha8Rng) -> HeatmapStack {
        let mut s = HeatmapStack::zeros(k, w, h, 4);
        for v in &mut s.data {
            *v = rng.gen();
        }
        s
    }

    #[test]
    fn peak_on_grid_point_is_one() {
        let s = render_gaussian(&[Keypoint::new(20.0, 12.0)], (16, 16), 4, 2.0).unwrap();
        assert_eq!(s.get(0, 5, 3), 1.0);
    }

    #[test]
    fn unannotated_joint_is_blank() {
        let s = render_gaussian(&[Keypoint::missing()], (16, 16), 4, 2.0).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_tail_value() {
        let s = render_gaussian(&[Keypoint::new(16.0, 16.0)], (16, 16), 4, 2.0).unwrap();
        let v = s.get(0, 4 + 3, 4 + 4);
        assert!((v - (-25.0f64 / 8.0).exp()).abs() < 1e-15);
        assert!((v - 0.04394).abs() < 1e-5);
        // beyond 3 sigma
        assert_eq!(s.get(0, 4 + 7, 4), 0.0);
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        assert!(render_gaussian(&[], (4, 4), 4, 0.0).is_err());
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_stack(2, 4, 4, &mut rng);
        assert_eq!(mse_loss(&gt, &gt, &[true, true]).unwrap(), 0.0);
        let mut pred = gt.clone();
        for v in &mut pred.data {
            *v += 0.1;
        }
        assert!((mse_loss(&pred, &gt, &[true, true]).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = random_stack(3, 4, 4, &mut rng);
        let gt = random_stack(3, 4, 4, &mut rng);
        let mask = [true, false, true];
        let mut naive = 0.0;
        let mut n = 0;
        for j in 0..3 {
            if !mask[j] {
                continue;
            }
            for y in 0..4 {
                for x in 0..4 {
                    naive += (pred.get(j, x, y) - gt.get(j, x, y)).powi(2);
                    n += 1;
                }
            }
        }
        let l = mse_loss(&pred, &gt, &mask).unwrap();
        assert!((l - naive / n as f64).abs() < 1e-12);
    }

    #[test]
    fn gradient_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_stack(3, 4, 4, &mut rng);
        let g = mse_loss_grad(&gt, &gt, &[true; 3]).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));

        let pred = random_stack(3, 4, 4, &mut rng);
        let g = mse_loss_grad(&pred, &gt, &[true, false, true]).unwrap();
        assert!(g.map(1).iter().all(|&v| v == 0.0));

        let h = 1e-6;
        for i in 0..pred.data.len() {
            let mut hi = pred.clone();
            let mut lo = pred.clone();
            hi.data[i] += h;
            lo.data[i] -= h;
            let mask = [true, false, true];
            let fd = (mse_loss(&hi, &gt, &mask).unwrap() - mse_loss(&lo, &gt, &mask).unwrap()) / (2.0 * h);
            let a = g.data[i];
            assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-3), "{i}: {a} vs {fd}");
        }
    }

    #[test]
    fn shape_mismatch_is_domain_error() {
        let a = HeatmapStack::zeros(2, 4, 4, 4);
        let b = HeatmapStack::zeros(2, 4, 5, 4);
        assert!(matches!(mse_loss(&a, &b, &[true, true]), Err(Error::Domain(_))));
        assert!(matches!(mse_loss_grad(&a, &b, &[true, true]), Err(Error::Domain(_))));
    }

    #[test]
    fn generator_loss_is_exact_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = random_stack(3, 5, 5, &mut rng);
            let b = random_stack(3, 5, 5, &mut rng);
            let ld = mse_loss(&a, &b, &[true; 3]).unwrap();
            let lg = -ld;
            assert_eq!((lg + ld).to_bits(), 0.0f64.to_bits());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};

        proptest! {
            #[test]
            fn peak_sits_on_nearest_grid_point(x in 0.0f64..63.0, y in 0.0f64..63.0) {
                let s = render_gaussian(&[Keypoint::new(x, y)], (16, 16), 4, 2.0).unwrap();
                let (gx, gy) = (grid_point(x, 4), grid_point(y, 4));
                prop_assume!(gx < 16 && gy < 16);
                let best = s.data.iter().cloned().fold(f64::MIN, f64::max);
                prop_assert_eq!(best, 1.0);
                prop_assert_eq!(s.get(0, gx as usize, gy as usize), 1.0);
            }

            #[test]
            fn loss_is_symmetric_and_nonnegative(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_stack(3, 4, 4, &mut rng);
                let b = random_stack(3, 4, 4, &mut rng);
                let mask = [true, rng.gen(), true];
                let ab = mse_loss(&a, &b, &mask).unwrap();
                let ba = mse_loss(&b, &a, &mask).unwrap();
                prop_assert!(ab >= 0.0);
                prop_assert_eq!(ab, ba);
                prop_assert!(ab > 0.0);
            }
        }
    }
}
