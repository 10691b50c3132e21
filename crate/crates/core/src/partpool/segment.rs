//! Connected-component extraction and the segment filters applied before
//! patches enter the pool.

use std::collections::{BTreeMap, VecDeque};

use image::{Rgba, RgbaImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::classes::{ClassCatalog, ClassId, MergeRule, BACKGROUND};
use super::PartPatch;
use crate::error::{Error, Result};
use crate::raster::LabelMap;

/// Integer rectangle in source-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// One 4-connected region of a single class, stored as a tight bitmap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMask {
    pub class_id: ClassId,
    pub bbox: BBox,
    /// Row-major, `bbox.w * bbox.h` entries.
    pub mask: Vec<bool>,
    pub area: usize,
}

impl SegmentMask {
    #[inline]
    pub fn bit(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.bbox.w + x]
    }

    /// Absolute pixel coordinates of every set bit, row-major.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let BBox { x: bx, y: by, w, .. } = self.bbox;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (bx + i % w, by + i / w))
    }

    /// Builds a tight segment from absolute pixel coordinates.
    fn from_pixels(class_id: ClassId, pixels: &[(usize, usize)]) -> Self {
        let x0 = pixels.iter().map(|p| p.0).min().unwrap_or(0);
        let y0 = pixels.iter().map(|p| p.1).min().unwrap_or(0);
        let x1 = pixels.iter().map(|p| p.0).max().unwrap_or(0);
        let y1 = pixels.iter().map(|p| p.1).max().unwrap_or(0);
        let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
        let mut mask = vec![false; w * h];
        for &(x, y) in pixels {
            mask[(y - y0) * w + (x - x0)] = true;
        }
        SegmentMask {
            class_id,
            bbox: BBox { x: x0, y: y0, w, h },
            mask,
            area: pixels.len(),
        }
    }
}

/// Labels every 4-connected component of every non-background class.
///
/// Components are returned in row-major order of their first pixel.
pub fn extract_segments(labels: &LabelMap, num_classes: usize) -> Result<Vec<SegmentMask>> {
    let (w, h) = (labels.width, labels.height);
    if let Some(bad) = labels.data.iter().find(|&&v| v as usize >= num_classes) {
        return Err(Error::Malformed(format!(
            "label value {bad} outside the {num_classes}-class catalog"
        )));
    }
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    let mut pixels = Vec::new();
    for start in 0..w * h {
        let class = labels.data[start];
        if class == BACKGROUND || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        pixels.clear();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            let mut visit = |j: usize| {
                if !seen[j] && labels.data[j] == class {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(SegmentMask::from_pixels(class, &pixels));
    }
    Ok(out)
}

/// Removes speckle: for each class whose largest component holds at least
/// `dominance` of the class area, only that component survives. Classes with
/// several comparable components keep all of them.
pub fn drop_scattered(segments: Vec<SegmentMask>, dominance: f64) -> Vec<SegmentMask> {
    let mut totals: BTreeMap<ClassId, (usize, usize, usize)> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        let e = totals.entry(s.class_id).or_insert((0, 0, i));
        e.0 += s.area;
        if s.area > e.1 {
            e.1 = s.area;
            e.2 = i;
        }
    }
    segments
        .into_iter()
        .enumerate()
        .filter(|(i, s)| {
            let (total, largest, largest_idx) = totals[&s.class_id];
            (largest as f64) < dominance * total as f64 || *i == largest_idx
        })
        .map(|(_, s)| s)
        .collect()
}

/// Appends composite segments. For every rule whose source classes all
/// appear, the source segments are unioned and each connected component of
/// the union that contains pixels of every source class becomes one segment
/// labelled with the rule's target. Input segments are passed through
/// untouched and first.
pub fn merge_composites(
    segments: Vec<SegmentMask>,
    rules: &[MergeRule],
    catalog: &ClassCatalog,
) -> Result<Vec<SegmentMask>> {
    for rule in rules {
        catalog.validate_rule(rule)?;
    }
    let mut extra = Vec::new();
    for rule in rules {
        let members: Vec<&SegmentMask> = segments
            .iter()
            .filter(|s| rule.sources.contains(&s.class_id))
            .collect();
        if !rule
            .sources
            .iter()
            .all(|c| members.iter().any(|s| s.class_id == *c))
        {
            continue;
        }
        let x0 = members.iter().map(|s| s.bbox.x).min().unwrap();
        let y0 = members.iter().map(|s| s.bbox.y).min().unwrap();
        let x1 = members.iter().map(|s| s.bbox.x + s.bbox.w).max().unwrap();
        let y1 = members.iter().map(|s| s.bbox.y + s.bbox.h).max().unwrap();
        let (w, h) = (x1 - x0, y1 - y0);
        // local canvas of source class ids (+1 so 0 means empty)
        let mut canvas = LabelMap::new(w, h);
        for s in &members {
            let slot = rule.sources.iter().position(|&c| c == s.class_id).unwrap() as u8 + 1;
            for (x, y) in s.pixels() {
                canvas.set(x - x0, y - y0, slot);
            }
        }
        let mut union = LabelMap::new(w, h);
        for (u, &v) in union.data.iter_mut().zip(&canvas.data) {
            *u = u8::from(v != 0);
        }
        for comp in extract_segments(&union, 2)? {
            let mut present = vec![false; rule.sources.len()];
            for (x, y) in comp.pixels() {
                present[canvas.get(x, y) as usize - 1] = true;
            }
            if present.iter().all(|&p| p) {
                let pixels: Vec<(usize, usize)> =
                    comp.pixels().map(|(x, y)| (x + x0, y + y0)).collect();
                extra.push(SegmentMask::from_pixels(rule.target, &pixels));
            }
        }
    }
    let mut out = segments;
    out.extend(extra);
    Ok(out)
}

/// Keeps exactly the segments with `area >= min_area` whose class is not
/// excluded.
pub fn filter_segments(
    segments: Vec<SegmentMask>,
    min_area: usize,
    excluded: &[ClassId],
) -> Vec<SegmentMask> {
    segments
        .into_iter()
        .filter(|s| s.area >= min_area && !excluded.contains(&s.class_id))
        .collect()
}

/// Provenance recorded with each cropped patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSource {
    pub id: String,
    pub person_height: f64,
}

/// Cuts the segment's bounding box out of `image`; alpha is opaque exactly
/// where the mask is set and RGB is zeroed elsewhere.
pub fn crop_patch(image: &RgbImage, segment: &SegmentMask, source: &PatchSource) -> Result<PartPatch> {
    let BBox { x, y, w, h } = segment.bbox;
    if w == 0 || h == 0 || x + w > image.width() as usize || y + h > image.height() as usize {
        return Err(Error::Malformed(format!(
            "segment bbox {:?} exceeds {}x{} image",
            segment.bbox,
            image.width(),
            image.height()
        )));
    }
    let pixels = RgbaImage::from_fn(w as u32, h as u32, |px, py| {
        if segment.bit(px as usize, py as usize) {
            let c = image.get_pixel(x as u32 + px, y as u32 + py).0;
            Rgba([c[0], c[1], c[2], 255])
        } else {
            Rgba([0, 0, 0, 0])
        }
    });
    Ok(PartPatch {
        class_id: segment.class_id,
        pixels,
        source_id: source.id.clone(),
        source_person_height: source.person_height,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partpool::classes::{default_merge_rules, lip};

    fn map(w: usize, h: usize, rows: &[&[u8]]) -> LabelMap {
        LabelMap::from_vec(w, h, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    #[test]
    fn all_background_yields_nothing() {
        assert!(extract_segments(&LabelMap::new(8, 8), 27).unwrap().is_empty());
    }

    #[test]
    fn single_block() {
        let m = map(3, 3, &[&[0, 0, 0], &[0, 5, 5], &[0, 5, 5]]);
        let segs = extract_segments(&m, 27).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].area, 4);
        assert_eq!(segs[0].bbox, BBox { x: 1, y: 1, w: 2, h: 2 });
        assert_eq!(segs[0].class_id, 5);
    }

    #[test]
    fn diagonal_pixels_are_separate_components() {
        let m = map(2, 2, &[&[7, 0], &[0, 7]]);
        assert_eq!(extract_segments(&m, 27).unwrap().len(), 2);
    }

    #[test]
    fn label_out_of_catalog_is_malformed() {
        let m = map(2, 1, &[&[1, 30]]);
        assert!(matches!(extract_segments(&m, 27), Err(Error::Malformed(_))));
    }

    #[test]
    fn scattered_speckle_is_dropped_but_balanced_parts_survive() {
        let mut m = LabelMap::new(40, 10);
        for y in 0..10 {
            for x in 0..10 {
                m.set(x, y, 9); // 100 px
            }
        }
        m.set(30, 5, 9); // 1 px speckle
        for y in 0..4 {
            for x in 15..19 {
                m.set(x, y, 3); // glove, 16 px
                m.set(x + 10, y + 5, 3); // second glove, 16 px
            }
        }
        let segs = drop_scattered(extract_segments(&m, 27).unwrap(), 0.9);
        let pants: Vec<_> = segs.iter().filter(|s| s.class_id == 9).collect();
        assert_eq!(pants.len(), 1);
        assert_eq!(pants[0].area, 100);
        assert_eq!(segs.iter().filter(|s| s.class_id == 3).count(), 2);
    }

    #[test]
    fn merge_without_rules_is_identity() {
        let m = map(3, 1, &[&[16, 18, 0]]);
        let segs = extract_segments(&m, 27).unwrap();
        let merged = merge_composites(segs.clone(), &[], &ClassCatalog::lip_default()).unwrap();
        assert_eq!(merged, segs);
    }

    #[test]
    fn adjacent_leg_and_shoe_merge_into_one_composite() {
        let mut m = LabelMap::new(10, 10);
        for y in 0..6 {
            m.set(4, y, lip::LEFT_LEG);
            m.set(5, y, lip::LEFT_LEG);
        }
        for x in 3..7 {
            m.set(x, 6, lip::LEFT_SHOE);
            m.set(x, 7, lip::LEFT_SHOE);
        }
        let cat = ClassCatalog::lip_default();
        let segs = extract_segments(&m, cat.len()).unwrap();
        let merged = merge_composites(segs.clone(), &default_merge_rules(), &cat).unwrap();
        assert_eq!(&merged[..segs.len()], &segs[..]);
        let extra = &merged[segs.len()..];
        assert_eq!(extra.len(), 1);
        assert_eq!(extra[0].class_id, lip::LEFT_LEG_SHOE);
        assert_eq!(extra[0].area, 12 + 8);
    }

    #[test]
    fn vacuous_rule_adds_nothing() {
        let m = map(3, 1, &[&[16, 16, 0]]);
        let cat = ClassCatalog::lip_default();
        let segs = extract_segments(&m, cat.len()).unwrap();
        let merged = merge_composites(segs.clone(), &default_merge_rules(), &cat).unwrap();
        assert_eq!(merged, segs);
    }

    #[test]
    fn glove_far_from_arm_is_not_merged() {
        let cat = ClassCatalog::lip_default();
        let m = map(6, 1, &[&[lip::LEFT_ARM, lip::GLOVE, 0, 0, lip::GLOVE, 0]]);
        let segs = extract_segments(&m, cat.len()).unwrap();
        let rule = MergeRule { sources: vec![lip::LEFT_ARM, lip::GLOVE], target: lip::LEFT_ARM_GLOVE };
        let merged = merge_composites(segs.clone(), &[rule], &cat).unwrap();
        assert_eq!(merged.len(), segs.len() + 1);
        assert_eq!(merged.last().unwrap().area, 2);
    }

    #[test]
    fn unknown_rule_class_is_config_error() {
        let rule = MergeRule { sources: vec![16, 99], target: 20 };
        let r = merge_composites(vec![], &[rule], &ClassCatalog::lip_default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    fn square(class_id: ClassId, side: usize) -> SegmentMask {
        SegmentMask {
            class_id,
            bbox: BBox { x: 0, y: 0, w: side, h: side },
            mask: vec![true; side * side],
            area: side * side,
        }
    }

    #[test]
    fn area_threshold_is_inclusive_at_35_squared() {
        let kept = filter_segments(vec![square(16, 35)], 1225, &[]);
        assert_eq!(kept.len(), 1);
        let mut short = square(16, 35);
        short.mask[0] = false;
        short.area = 1224;
        assert!(filter_segments(vec![short], 1225, &[]).is_empty());
    }

    #[test]
    fn excluded_class_is_dropped_regardless_of_area() {
        let seg = SegmentMask {
            class_id: lip::SCARF,
            bbox: BBox { x: 0, y: 0, w: 100, h: 50 },
            mask: vec![true; 5000],
            area: 5000,
        };
        assert!(filter_segments(vec![seg], 1225, &[lip::SCARF]).is_empty());
    }

    #[test]
    fn full_frame_crop_is_opaque_copy() {
        let img = RgbImage::from_fn(4, 3, |x, y| image::Rgb([x as u8, y as u8, 9]));
        let seg = square(5, 3);
        let seg = SegmentMask { bbox: BBox { x: 0, y: 0, w: 4, h: 3 }, mask: vec![true; 12], area: 12, ..seg };
        let p = crop_patch(&img, &seg, &PatchSource { id: "a".into(), person_height: 3.0 }).unwrap();
        for (x, y, px) in p.pixels.enumerate_pixels() {
            let c = img.get_pixel(x, y).0;
            assert_eq!(px.0, [c[0], c[1], c[2], 255]);
        }
    }

    #[test]
    fn single_pixel_crop() {
        let img = RgbImage::from_fn(4, 4, |x, y| image::Rgb([x as u8 * 10, y as u8 * 10, 1]));
        let seg = SegmentMask { class_id: 2, bbox: BBox { x: 2, y: 3, w: 1, h: 1 }, mask: vec![true], area: 1 };
        let p = crop_patch(&img, &seg, &PatchSource { id: "a".into(), person_height: 3.0 }).unwrap();
        assert_eq!(p.pixels.dimensions(), (1, 1));
        assert_eq!(p.pixels.get_pixel(0, 0).0, [20, 30, 1, 255]);
    }

    #[test]
    fn checkerboard_crop_alpha_matches_area() {
        let img = RgbImage::new(8, 8);
        let mask: Vec<bool> = (0..64).map(|i| (i % 8 + i / 8) % 2 == 0).collect();
        let seg = SegmentMask { class_id: 2, bbox: BBox { x: 0, y: 0, w: 8, h: 8 }, mask, area: 32 };
        let p = crop_patch(&img, &seg, &PatchSource { id: "a".into(), person_height: 3.0 }).unwrap();
        let opaque = p.pixels.pixels().filter(|px| px.0[3] > 0).count();
        assert_eq!(opaque, seg.area);
        assert!(p.pixels.pixels().all(|px| px.0[3] == 0 || px.0[3] == 255));
    }

    #[test]
    fn out_of_bounds_crop_is_malformed() {
        let img = RgbImage::new(4, 4);
        let seg = SegmentMask { class_id: 2, bbox: BBox { x: 3, y: 0, w: 2, h: 1 }, mask: vec![true; 2], area: 2 };
        let r = crop_patch(&img, &seg, &PatchSource { id: "a".into(), person_height: 3.0 });
        assert!(matches!(r, Err(Error::Malformed(_))));
    }
}
