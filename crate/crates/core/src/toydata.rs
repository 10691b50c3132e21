//! Synthetic stick-figure people with parsing labels and keypoints.
//!
//! Figures are described in a 64-unit frame and rasterized at `scale`
//! pixels per unit, so the same generator feeds 64x64 training images and
//! larger parsing images for the part pool.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compositor::PersonBox;
use crate::error::{Error, Result};
use crate::partpool::classes::lip;
use crate::partpool::ClassId;
use crate::pose::Keypoint;
use crate::raster::LabelMap;

/// Side of the figure frame in units.
pub const FRAME: f64 = 64.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyMeta {
    /// `[x, y, w, h]` in pixels.
    pub person_bbox: [f64; 4],
    pub keypoints: Vec<Keypoint>,
    /// Neck-to-hip distance in pixels.
    pub normalizer: f64,
    /// Pixel count per class id as recorded while painting.
    #[serde(default)]
    pub census: Vec<usize>,
}

impl ToyMeta {
    pub fn bbox(&self) -> PersonBox {
        let [x, y, w, h] = self.person_bbox;
        PersonBox { x, y, w, h }
    }
}

#[derive(Clone, Debug)]
pub struct ToyItem {
    pub image: RgbImage,
    pub labels: LabelMap,
    pub meta: ToyMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyOptions {
    /// Pixels per frame unit.
    pub scale: usize,
    /// Cover one or two limb tips with distractors and mark them occluded.
    pub occlude: bool,
    pub num_classes: usize,
}

impl Default for ToyOptions {
    fn default() -> Self {
        ToyOptions {
            scale: 1,
            occlude: false,
            num_classes: 27,
        }
    }
}

type P = (f64, f64);

#[derive(Clone, Copy)]
enum Shape {
    Capsule(P, P, f64),
    Disc(P, f64),
    /// Disc clipped to `y < cut`.
    DiscAbove(P, f64, f64),
    Rect(P, P),
}

impl Shape {
    fn contains(&self, p: P) -> bool {
        match *self {
            Shape::Capsule(a, b, r) => seg_dist2(p, a, b) <= r * r,
            Shape::Disc(c, r) => (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2) <= r * r,
            Shape::DiscAbove(c, r, cut) => p.1 < cut && (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2) <= r * r,
            Shape::Rect(a, b) => p.0 >= a.0 && p.0 <= b.0 && p.1 >= a.1 && p.1 <= b.1,
        }
    }
}

fn seg_dist2(p: P, a: P, b: P) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - qx).powi(2) + (p.1 - qy).powi(2)
}

fn lerp(a: P, b: P, t: f64) -> P {
    (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

struct Canvas {
    scale: usize,
    side: usize,
    rgb: Vec<[f64; 3]>,
    labels: Vec<ClassId>,
    census: Vec<usize>,
    /// Colour jitter source, separate so the figure geometry does not depend
    /// on how many pixels a shape covers.
    noise: ChaCha8Rng,
}

impl Canvas {
    fn new(scale: usize, num_classes: usize, noise_seed: u64) -> Self {
        let side = FRAME as usize * scale;
        Canvas {
            noise: ChaCha8Rng::seed_from_u64(noise_seed),
            scale,
            side,
            rgb: vec![[0.0; 3]; side * side],
            labels: vec![0; side * side],
            census: {
                let mut c = vec![0; num_classes];
                c[0] = side * side;
                c
            },
        }
    }

    /// Pixel-centre position in frame units.
    fn unit(&self, i: usize) -> P {
        let s = self.scale as f64;
        (((i % self.side) as f64 + 0.5) / s, ((i / self.side) as f64 + 0.5) / s)
    }

    /// Paints `shape` with `color` (plus per-pixel jitter) and, when given,
    /// relabels the covered pixels.
    fn paint(&mut self, shape: Shape, color: [f64; 3], label: Option<ClassId>) {
        for i in 0..self.rgb.len() {
            if !shape.contains(self.unit(i)) {
                continue;
            }
            let j: f64 = self.noise.gen_range(-0.04..0.04);
            self.rgb[i] = color.map(|c| (c + j).clamp(0.0, 1.0));
            if let Some(l) = label {
                let old = self.labels[i];
                self.census[old as usize] -= 1;
                self.census[l as usize] += 1;
                self.labels[i] = l;
            }
        }
    }

    fn finish(self) -> (RgbImage, LabelMap, Vec<usize>) {
        let side = self.side as u32;
        let img = RgbImage::from_fn(side, side, |x, y| {
            let c = self.rgb[(y * side + x) as usize];
            Rgb(c.map(|v| (v * 255.0).round() as u8))
        });
        (img, LabelMap::from_vec(self.side, self.side, self.labels), self.census)
    }
}

/// One figure. Joint order matches [`crate::pose::JointSchema::toy`].
pub fn generate_item(seed: u64, stream: u64, opts: &ToyOptions) -> Result<ToyItem> {
    if opts.scale == 0 {
        return Err(Error::Config("scale must be at least 1".into()));
    }
    if opts.num_classes <= lip::RIGHT_SHOE as usize {
        return Err(Error::Config(format!("toy figures need at least {} classes", lip::RIGHT_SHOE + 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut cv = Canvas::new(opts.scale, opts.num_classes, rng.gen());

    // background: base colour, a few clutter shapes
    let bg = random_color(&mut rng).map(|c| 0.15 + 0.7 * c);
    cv.paint(Shape::Rect((0.0, 0.0), (FRAME, FRAME)), bg, None);
    for _ in 0..rng.gen_range(2..5) {
        let c = random_color(&mut rng);
        let a = (rng.gen_range(0.0..FRAME), rng.gen_range(0.0..FRAME));
        let shape = if rng.gen_bool(0.5) {
            Shape::Disc(a, rng.gen_range(2.0..6.0))
        } else {
            Shape::Rect(a, (a.0 + rng.gen_range(3.0..10.0), a.1 + rng.gen_range(3.0..10.0)))
        };
        cv.paint(shape, c, None);
    }

    let k = rng.gen_range(0.85..1.05);
    let cx = rng.gen_range(27.0..37.0);
    let top = rng.gen_range(4.0..8.0);
    let head_r = 4.5 * k;
    let head = (cx, top + head_r);
    let neck = (cx + rng.gen_range(-1.0..1.0), head.1 + head_r + 1.0 * k);
    let lean = rng.gen_range(-0.15f64..0.15);
    let torso_len = 16.0 * k;
    let hip = (neck.0 + torso_len * lean.sin(), neck.1 + torso_len * lean.cos());
    let shoulder_dx = 5.5 * k;
    let l_sh = (neck.0 + shoulder_dx, neck.1 + 1.5 * k);
    let r_sh = (neck.0 - shoulder_dx, neck.1 + 1.5 * k);
    let arm_len = 15.0 * k;
    let limb = |from: P, ang: f64, len: f64| (from.0 + len * ang.sin(), from.1 + len * ang.cos());
    let l_hand = limb(l_sh, rng.gen_range(0.15..2.2), arm_len);
    let r_hand = limb(r_sh, -rng.gen_range(0.15..2.2), arm_len);
    let leg_len = 19.0 * k;
    let l_hip = (hip.0 + 3.0 * k, hip.1);
    let r_hip = (hip.0 - 3.0 * k, hip.1);
    let l_foot = limb(l_hip, rng.gen_range(0.0..0.6), leg_len);
    let r_foot = limb(r_hip, -rng.gen_range(0.0..0.6), leg_len);

    let skin = [rng.gen_range(0.45..0.95), rng.gen_range(0.3..0.8), rng.gen_range(0.2..0.6)];
    let hair_c = random_color(&mut rng).map(|c| 0.6 * c);
    let shirt = random_color(&mut rng);
    let sleeve = if rng.gen_bool(0.5) { shirt } else { skin };
    let pants_c = random_color(&mut rng);
    let shoe_c = random_color(&mut rng).map(|c| 0.5 * c);
    let glove_c = random_color(&mut rng);

    let leg_r = 2.2 * k;
    for (hipj, foot, leg_cls, shoe_cls) in [
        (l_hip, l_foot, lip::LEFT_LEG, lip::LEFT_SHOE),
        (r_hip, r_foot, lip::RIGHT_LEG, lip::RIGHT_SHOE),
    ] {
        cv.paint(Shape::Capsule(hipj, foot, leg_r), pants_c, Some(leg_cls));
        let ankle = lerp(hipj, foot, 0.8);
        cv.paint(Shape::Capsule(ankle, foot, leg_r * 1.1), shoe_c, Some(shoe_cls));
    }
    cv.paint(Shape::Capsule(neck, lerp(neck, hip, 0.7), 5.5 * k), shirt, Some(lip::UPPER_CLOTHES));
    cv.paint(
        Shape::Capsule(lerp(neck, hip, 0.85), hip, 4.0 * k),
        pants_c,
        Some(lip::PANTS),
    );
    let arm_r = 2.0 * k;
    for (sh, hand, cls) in [(l_sh, l_hand, lip::LEFT_ARM), (r_sh, r_hand, lip::RIGHT_ARM)] {
        cv.paint(Shape::Capsule(sh, hand, arm_r), sleeve, Some(cls));
        cv.paint(Shape::Disc(hand, arm_r * 1.2), glove_c, Some(lip::GLOVE));
    }
    cv.paint(Shape::Disc(head, head_r), skin, Some(lip::FACE));
    cv.paint(Shape::DiscAbove(head, head_r, head.1 - 0.5 * head_r), hair_c, Some(lip::HAIR));
    if rng.gen_bool(0.3) {
        let y = head.1 - 0.1 * head_r;
        cv.paint(
            Shape::Rect((head.0 - 0.8 * head_r, y - 0.8), (head.0 + 0.8 * head_r, y + 0.8)),
            [0.05, 0.05, 0.05],
            Some(lip::SUNGLASSES),
        );
    }
    if rng.gen_bool(0.3) {
        cv.paint(
            Shape::Capsule((neck.0 - 3.0 * k, neck.1), (neck.0 + 3.0 * k, neck.1), 1.4 * k),
            random_color(&mut rng),
            Some(lip::SCARF),
        );
    }

    let s = opts.scale as f64;
    let mut keypoints: Vec<Keypoint> = [head, neck, l_sh, r_sh, l_hand, r_hand, l_foot, r_foot]
        .iter()
        .map(|p| Keypoint::new((p.0 * s).clamp(0.0, FRAME * s - 1.0), (p.1 * s).clamp(0.0, FRAME * s - 1.0)))
        .collect();

    if opts.occlude {
        let tips = [4usize, 5, 6, 7];
        let count = rng.gen_range(1..=2);
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < count {
            let t = tips[rng.gen_range(0..4)];
            if !chosen.contains(&t) {
                chosen.push(t);
            }
        }
        for j in chosen {
            let tip = (keypoints[j].x / s + 0.5 / s, keypoints[j].y / s + 0.5 / s);
            let color = random_color(&mut rng);
            let shape = match rng.gen_range(0..3) {
                0 => {
                    let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let len = rng.gen_range(8.0..14.0);
                    let off = rng.gen_range(0.2..0.8);
                    let a = (tip.0 - len * off * ang.cos(), tip.1 - len * off * ang.sin());
                    let b = (a.0 + len * ang.cos(), a.1 + len * ang.sin());
                    Shape::Capsule(a, b, rng.gen_range(2.5..3.5))
                }
                1 => Shape::Disc(
                    (tip.0 + rng.gen_range(-1.5..1.5), tip.1 + rng.gen_range(-1.5..1.5)),
                    rng.gen_range(3.5..5.0),
                ),
                _ => {
                    let (hw, hh) = (rng.gen_range(3.0..5.0), rng.gen_range(3.0..5.0));
                    let c = (tip.0 + rng.gen_range(-1.5..1.5), tip.1 + rng.gen_range(-1.5..1.5));
                    Shape::Rect((c.0 - hw, c.1 - hh), (c.0 + hw, c.1 + hh))
                }
            };
            cv.paint(shape, color, Some(0));
            keypoints[j].visible = false;
        }
    }

    let normalizer = ((hip.0 - neck.0).powi(2) + (hip.1 - neck.1).powi(2)).sqrt() * s;
    let (image, labels, census) = cv.finish();
    let person_bbox = foreground_bbox(&labels).unwrap_or([0.0, 0.0, 1.0, 1.0]);
    Ok(ToyItem {
        image,
        labels,
        meta: ToyMeta {
            person_bbox,
            keypoints,
            normalizer,
            census,
        },
    })
}

/// Tight `[x, y, w, h]` box of the non-background labels.
pub fn foreground_bbox(labels: &LabelMap) -> Option<[f64; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..labels.height {
        for x in 0..labels.width {
            if labels.get(x, y) != 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| [x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64])
}

/// Per-class pixel histogram of a label map.
pub fn label_census(labels: &LabelMap, num_classes: usize) -> Vec<usize> {
    let mut c = vec![0; num_classes.max(1)];
    for &v in &labels.data {
        if (v as usize) < c.len() {
            c[v as usize] += 1;
        }
    }
    c
}

/// Confirms that the painted census matches the label map.
pub fn self_check(item: &ToyItem) -> Result<()> {
    let got = label_census(&item.labels, item.meta.census.len());
    if got != item.meta.census {
        return Err(Error::Invariant(format!(
            "label census {got:?} differs from the painting record {:?}",
            item.meta.census
        )));
    }
    Ok(())
}
