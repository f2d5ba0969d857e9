//! From peak images to transmitter coordinates.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::encoding::{SensorImage, DETECTOR_SCALE, TRANSLATION_SIDE};
use crate::models::{Detector, DetectorHeadSpec, Network, HEAD_FIELDS};
use crate::scene::Point;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimplePeakParams {
    pub threshold: f32,
    /// Chebyshev radius of the neighborhood a peak must dominate.
    pub radius: usize,
}

impl Default for SimplePeakParams {
    fn default() -> Self {
        Self {
            threshold: 2.0,
            radius: 3,
        }
    }
}

/// True when `(a, va)` ranks above `(b, vb)`: higher value first, then the
/// lexicographically smaller cell.
fn outranks(a: (usize, usize), va: f32, b: (usize, usize), vb: f32) -> bool {
    va > vb || (va == vb && a < b)
}

/// Cells whose value exceeds `threshold` and that outrank every other cell
/// within Chebyshev distance `radius`. Returned in row-major order.
pub fn simple_peak_detect(image: ArrayView2<f32>, threshold: f32, radius: usize) -> Vec<(usize, usize)> {
    let (rows, cols) = image.dim();
    let mut peaks = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let v = image[(i, j)];
            if !(v > threshold) {
                continue;
            }
            let dominated = (i.saturating_sub(radius)..=(i + radius).min(rows - 1)).any(|u| {
                (j.saturating_sub(radius)..=(j + radius).min(cols - 1))
                    .any(|w| (u, w) != (i, j) && outranks((u, w), image[(u, w)], (i, j), v))
            });
            if !dominated {
                peaks.push((i, j));
            }
        }
    }
    peaks
}

/// Value-weighted centroid of the cell centers in the 3x3 neighborhood of
/// `cell`; negative values carry no weight.
pub fn subpixel_refine(image: ArrayView2<f32>, cell: (usize, usize)) -> Point {
    let (rows, cols) = image.dim();
    let (i, j) = cell;
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for u in i.saturating_sub(1)..=(i + 1).min(rows - 1) {
        for v in j.saturating_sub(1)..=(j + 1).min(cols - 1) {
            let w = image[(u, v)].max(0.0) as f64;
            sw += w;
            sx += w * (u as f64 + 0.5);
            sy += w * (v as f64 + 0.5);
        }
    }
    if sw > 0.0 {
        Point::new(sx / sw, sy / sw)
    } else {
        Point::cell_center(i, j)
    }
}

pub fn simple_peak_locate(image: ArrayView2<f32>, params: &SimplePeakParams) -> Vec<Point> {
    simple_peak_detect(image, params.threshold, params.radius)
        .into_iter()
        .map(|c| subpixel_refine(image, c))
        .collect()
}

/// Axis-aligned box in 100-space pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl DetectionBox {
    pub fn iou(&self, other: &DetectionBox) -> f64 {
        let overlap = |c0: f64, s0: f64, c1: f64, s1: f64| {
            ((c0 + s0 / 2.0).min(c1 + s1 / 2.0) - (c0 - s0 / 2.0).max(c1 - s1 / 2.0)).max(0.0)
        };
        let inter = overlap(self.cx, self.w, other.cx, other.w) * overlap(self.cy, self.h, other.cy, other.h);
        let union = self.w * self.h + other.w * other.h - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorThresholds {
    pub conf: f64,
    pub nms: f64,
}

impl Default for DetectorThresholds {
    fn default() -> Self {
        Self { conf: 0.8, nms: 0.5 }
    }
}

impl DetectorThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf) || !(0.0..=1.0).contains(&self.nms) {
            return Err(Error::Config(format!(
                "thresholds must lie in [0, 1], got conf={} nms={}",
                self.conf, self.nms
            )));
        }
        Ok(())
    }
}

fn sigmoid(x: f32) -> f64 {
    1.0 / (1.0 + (-(x as f64)).exp())
}

/// Decodes one head laid out as `[grid, grid, anchors, 6]` in row-major
/// order. Boxes with confidence `<= conf` are dropped.
pub fn decode_head(data: &[f32], spec: &DetectorHeadSpec, conf: f64) -> Result<Vec<DetectionBox>> {
    let na = spec.anchors.len();
    if data.len() != spec.grid * spec.grid * na * HEAD_FIELDS {
        return Err(Error::shape(
            format!("{}x{}x{na}x{HEAD_FIELDS} values", spec.grid, spec.grid),
            data.len(),
        ));
    }
    let stride = spec.stride();
    // keep centers inside [0, 100) even when a sigmoid saturates to 1
    let max_center = TRANSLATION_SIDE as f64 * (1.0 - f64::EPSILON);
    let mut boxes = Vec::new();
    for (k, f) in data.chunks_exact(HEAD_FIELDS).enumerate() {
        let a = k % na;
        let gy = (k / na) % spec.grid;
        let gx = k / na / spec.grid;
        let confidence = sigmoid(f[4]) * sigmoid(f[5]);
        if !(confidence > conf) {
            continue;
        }
        let anchor = spec.anchors[a];
        boxes.push(DetectionBox {
            cx: ((sigmoid(f[0]) + gx as f64) * stride / DETECTOR_SCALE).min(max_center),
            cy: ((sigmoid(f[1]) + gy as f64) * stride / DETECTOR_SCALE).min(max_center),
            w: anchor * (f[2] as f64).exp() / DETECTOR_SCALE,
            h: anchor * (f[3] as f64).exp() / DETECTOR_SCALE,
            confidence,
        });
    }
    Ok(boxes)
}

/// Decodes a `[grid, grid, anchors, 6]` or `[N, grid, grid, anchors, 6]`
/// head tensor into one box list per image.
pub fn decode_boxes(head: &Tensor, spec: &DetectorHeadSpec, conf: f64) -> Result<Vec<Vec<DetectionBox>>> {
    let head = if head.dim() == 4 { head.unsqueeze(0) } else { head.shallow_clone() };
    let g = spec.grid as i64;
    let expected = [g, g, spec.anchors.len() as i64, HEAD_FIELDS as i64];
    let size = head.size();
    if size.len() != 5 || size[1..] != expected {
        return Err(Error::shape(format!("[N, {g}, {g}, 3, 6]"), size));
    }
    let data = Vec::<f32>::try_from(head.to_kind(Kind::Float).contiguous().flatten(0, -1))?;
    let per = data.len() / size[0].max(1) as usize;
    data.chunks(per.max(1))
        .take(size[0] as usize)
        .map(|chunk| decode_head(chunk, spec, conf))
        .collect()
}

/// Greedy suppression in descending confidence: a box is discarded when its
/// IoU with an already accepted box exceeds `nms`.
pub fn non_max_suppression(boxes: &[DetectionBox], nms: f64) -> Vec<DetectionBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<DetectionBox> = Vec::new();
    for b in sorted {
        if kept.iter().all(|k| k.iou(&b) <= nms) {
            kept.push(b);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Detector,
    #[serde(rename = "simplepeak")]
    SimplePeak,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detector" => Ok(Variant::Detector),
            "simplepeak" => Ok(Variant::SimplePeak),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// One located transmitter as reported per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Detection {
    pub fn location(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// Two-step localization: a translation network turns the input into a
/// peak image, then either the detector or simplePeak extracts locations.
pub struct Localizer<'a> {
    pub translation: &'a dyn Network,
    pub detector: Option<&'a Detector>,
    pub variant: Variant,
    pub thresholds: DetectorThresholds,
    pub peaks: SimplePeakParams,
}

impl<'a> Localizer<'a> {
    pub fn new(translation: &'a dyn Network, detector: Option<&'a Detector>, variant: Variant) -> Self {
        Self {
            translation,
            detector,
            variant,
            thresholds: DetectorThresholds::default(),
            peaks: SimplePeakParams::default(),
        }
    }

    /// Locates transmitters on already translated `[N, 1, 100, 100]` peak
    /// images.
    pub fn locate_peaks(&self, peaks: &Tensor) -> Result<Vec<Vec<Detection>>> {
        let n = peaks.size()[0] as usize;
        match self.variant {
            Variant::SimplePeak => {
                let side = TRANSLATION_SIDE;
                let data = Vec::<f32>::try_from(peaks.to_kind(Kind::Float).contiguous().flatten(0, -1))?;
                Ok(data
                    .chunks_exact(side * side)
                    .take(n)
                    .map(|chunk| {
                        let img = ArrayView2::from_shape((side, side), chunk).expect("square image");
                        simple_peak_locate(img, &self.peaks)
                            .into_iter()
                            .map(|p| Detection {
                                x: p.x,
                                y: p.y,
                                confidence: 1.0,
                            })
                            .collect()
                    })
                    .collect())
            }
            Variant::Detector => {
                let det = self
                    .detector
                    .ok_or_else(|| Error::Config("detector variant needs a detector checkpoint".into()))?;
                self.thresholds.validate()?;
                let head = det.forward(&det.preprocess(peaks));
                let boxes = decode_boxes(&head, det.head_spec(), self.thresholds.conf)?;
                Ok(boxes
                    .into_iter()
                    .map(|b| {
                        non_max_suppression(&b, self.thresholds.nms)
                            .into_iter()
                            .map(|b| Detection {
                                x: b.cx,
                                y: b.cy,
                                confidence: b.confidence,
                            })
                            .collect()
                    })
                    .collect())
            }
        }
    }

    /// Full pipeline over a batch of translation-network inputs.
    pub fn localize_batch(&self, inputs: &Tensor) -> Result<Vec<Vec<Detection>>> {
        self.translation.check_input(inputs)?;
        let peaks = self.translation.forward(inputs);
        self.locate_peaks(&peaks)
    }

    pub fn localize(&self, image: &SensorImage) -> Result<Vec<Detection>> {
        let t = image_tensor(&image.0);
        Ok(self.localize_batch(&t)?.remove(0))
    }
}

/// `[1, 1, H, W]` tensor view of an image.
pub fn image_tensor(image: &Array2<f32>) -> Tensor {
    let (h, w) = image.dim();
    let data: Vec<f32> = image.iter().copied().collect();
    Tensor::from_slice(&data).view([1, 1, h as i64, w as i64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{render_label, PeakSpec};
    use ndarray::Array2;
    use proptest::prelude::*;

    /// All-pairs oracle: a cell is a peak when no other cell anywhere in the
    /// image, within the radius, beats it.
    fn brute_force_peaks(img: &Array2<f32>, x: f32, r: usize) -> Vec<(usize, usize)> {
        let cells: Vec<(usize, usize)> = img.indexed_iter().map(|(c, _)| c).collect();
        cells
            .iter()
            .copied()
            .filter(|&p| img[p] > x)
            .filter(|&p| {
                cells.iter().all(|&q| {
                    let cheb = p.0.abs_diff(q.0).max(p.1.abs_diff(q.1));
                    q == p || cheb > r || img[q] < img[p] || (img[q] == img[p] && p < q)
                })
            })
            .collect()
    }

    #[test]
    fn all_zero_image_has_no_peaks() {
        let img = Array2::<f32>::zeros((100, 100));
        assert!(simple_peak_detect(img.view(), 2.0, 3).is_empty());
    }

    #[test]
    fn single_rendered_peak_is_its_apex() {
        let p = Point::new(40.5, 60.5);
        let img = render_label(&[p], 100, &PeakSpec::default()).0;
        assert_eq!(simple_peak_detect(img.view(), 2.0, 3), vec![(40, 60)]);
        let refined = subpixel_refine(img.view(), (40, 60));
        assert!(refined.distance(&p) < 1e-9);
    }

    #[test]
    fn closer_lower_apex_is_suppressed() {
        let mut img = Array2::<f32>::zeros((20, 20));
        img[(5, 5)] = 10.0;
        img[(5, 7)] = 9.0;
        assert_eq!(simple_peak_detect(img.view(), 2.0, 3), vec![(5, 5)]);
        assert_eq!(brute_force_peaks(&img, 2.0, 3), vec![(5, 5)]);
    }

    #[test]
    fn plateau_goes_to_first_cell() {
        let mut img = Array2::<f32>::zeros((10, 10));
        img[(4, 4)] = 5.0;
        img[(4, 5)] = 5.0;
        img[(5, 4)] = 5.0;
        assert_eq!(simple_peak_detect(img.view(), 2.0, 3), vec![(4, 4)]);
    }

    #[test]
    fn refine_examples() {
        let mut img = Array2::<f32>::zeros((10, 10));
        img[(3, 3)] = 10.0;
        assert_eq!(subpixel_refine(img.view(), (3, 3)), Point::new(3.5, 3.5));
        img[(4, 3)] = 5.0;
        let p = subpixel_refine(img.view(), (3, 3));
        assert!((p.x - (3.5 + 1.0 / 3.0)).abs() < 1e-12);
        assert!((p.y - 3.5).abs() < 1e-12);
        img[(2, 3)] = -100.0;
        assert_eq!(subpixel_refine(img.view(), (3, 3)), p);
        let zeros = Array2::<f32>::zeros((10, 10));
        assert_eq!(subpixel_refine(zeros.view(), (0, 9)), Point::new(0.5, 9.5));
    }

    fn head_with(cells: &[((usize, usize, usize), [f32; 6])]) -> Vec<f32> {
        let spec = DetectorHeadSpec::default();
        let mut data = vec![0f32; spec.num_boxes() * HEAD_FIELDS];
        for k in 0..spec.num_boxes() {
            data[k * HEAD_FIELDS + 4] = -1e4;
        }
        for &((gx, gy, a), f) in cells {
            let k = (gx * spec.grid + gy) * 3 + a;
            data[k * HEAD_FIELDS..(k + 1) * HEAD_FIELDS].copy_from_slice(&f);
        }
        data
    }

    #[test]
    fn decode_examples() {
        let spec = DetectorHeadSpec::default();
        let data = head_with(&[((0, 0, 1), [0.0, 0.0, 0.0, 0.0, 10.0, 10.0])]);
        let boxes = decode_head(&data, &spec, 0.8).unwrap();
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        assert!((b.cx - 0.9615).abs() < 1e-4 && (b.cy - 0.9615).abs() < 1e-4);
        assert!((b.w - 6.0096).abs() < 1e-4 && (b.h - b.w).abs() < 1e-12);
        // a suppressed objectness drops the box at any positive conf
        let data = head_with(&[((3, 4, 0), [0.0, 0.0, 0.0, 0.0, f32::NEG_INFINITY, 10.0])]);
        assert!(decode_head(&data, &spec, 1e-9).unwrap().is_empty());
        assert!(decode_head(&data[1..], &spec, 0.5).is_err());
    }

    #[test]
    fn decode_tensor_layout_matches_slice() {
        let spec = DetectorHeadSpec::default();
        let data = head_with(&[((10, 20, 2), [1.0, -1.0, 0.2, 0.1, 5.0, 5.0])]);
        let t = Tensor::from_slice(&data).view([1, 52, 52, 3, 6]);
        let boxes = decode_boxes(&t, &spec, 0.5).unwrap();
        assert_eq!(boxes[0], decode_head(&data, &spec, 0.5).unwrap());
        let b = boxes[0][0];
        assert!((b.cx - (sigmoid(1.0) + 10.0) * 8.0 / 4.16).abs() < 1e-9);
        assert!((b.cy - (sigmoid(-1.0) + 20.0) * 8.0 / 4.16).abs() < 1e-9);
    }

    #[test]
    fn nms_examples() {
        let bx = |cx: f64, conf: f64| DetectionBox {
            cx,
            cy: 50.0,
            w: 20.8,
            h: 20.8,
            confidence: conf,
        };
        let kept = non_max_suppression(&[bx(50.0, 0.8), bx(50.0, 0.9)], 0.5);
        assert_eq!(kept, vec![bx(50.0, 0.9)]);
        assert_eq!(non_max_suppression(&[bx(10.0, 0.9), bx(80.0, 0.8)], 0.5).len(), 2);
        let iou = bx(50.0, 0.9).iou(&bx(56.0, 0.8));
        let hand = (14.8 * 20.8) / (2.0 * 20.8 * 20.8 - 14.8 * 20.8);
        assert!((iou - hand).abs() < 1e-12 && (iou - 0.553).abs() < 1e-3);
        assert_eq!(non_max_suppression(&[bx(50.0, 0.9), bx(56.0, 0.8)], 0.5), vec![bx(50.0, 0.9)]);
    }

    #[test]
    fn greedy_nms_is_not_monotone_in_threshold() {
        // At 0.5, B falls to A and C survives; at 0.7, B survives and
        // removes C.
        let sq = |cx: f64, conf: f64| DetectionBox {
            cx,
            cy: 0.0,
            w: 10.0,
            h: 10.0,
            confidence: conf,
        };
        let a = sq(0.0, 0.9);
        let b = sq(3.0, 0.8);
        let c = sq(3.5, 0.7);
        assert!(a.iou(&b) > 0.5 && a.iou(&b) <= 0.7);
        assert!(b.iou(&c) > 0.7 && a.iou(&c) <= 0.5);
        assert_eq!(non_max_suppression(&[a, b, c], 0.5), vec![a, c]);
        assert_eq!(non_max_suppression(&[a, b, c], 0.7), vec![a, b]);
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<DetectionBox>> {
        prop::collection::vec((0.0..30.0f64, 0.0..30.0f64, 2.0..12.0f64, 2.0..12.0f64, 0.0..1.0f64), 0..12)
            .prop_map(|v| {
                v.into_iter()
                    .map(|(cx, cy, w, h, confidence)| DetectionBox { cx, cy, w, h, confidence })
                    .collect()
            })
    }

    proptest! {
        #[test]
        fn peaks_match_brute_force(values in prop::collection::vec(0u8..12, 144), r in 0usize..4) {
            let img = Array2::from_shape_vec((12, 12), values.into_iter().map(f32::from).collect()).unwrap();
            prop_assert_eq!(simple_peak_detect(img.view(), 2.0, r), brute_force_peaks(&img, 2.0, r));
        }

        #[test]
        fn nms_output_pairwise_below_threshold(boxes in arb_boxes(), nms in 0.0..1.0f64) {
            let kept = non_max_suppression(&boxes, nms);
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    prop_assert!(kept[i].iou(&kept[j]) <= nms);
                }
            }
            if let Some(top) = boxes.iter().max_by(|a, b| a.confidence.total_cmp(&b.confidence)) {
                prop_assert_eq!(kept[0].confidence, top.confidence);
            }
        }

        /// Every box kept at the lower threshold but dropped at the higher
        /// one was removed by a box that only the higher threshold lets
        /// through.
        #[test]
        fn nms_threshold_changes_are_explained(boxes in arb_boxes(), lo in 0.0..1.0f64, step in 0.0..0.5f64) {
            let hi = (lo + step).min(1.0);
            let kept_lo = non_max_suppression(&boxes, lo);
            let kept_hi = non_max_suppression(&boxes, hi);
            for b in kept_lo.iter().filter(|b| !kept_hi.contains(b)) {
                prop_assert!(kept_hi.iter().any(|k| !kept_lo.contains(k) && k.iou(b) > hi));
            }
        }

        #[test]
        fn raising_conf_shrinks_decoded_set(values in prop::collection::vec(-4.0f32..4.0, 52 * 52 * 3 * 6), c0 in 0.0..1.0f64, dc in 0.0..0.5f64) {
            let spec = DetectorHeadSpec::default();
            let loose = decode_head(&values, &spec, c0).unwrap();
            let tight = decode_head(&values, &spec, (c0 + dc).min(1.0)).unwrap();
            prop_assert!(tight.iter().all(|b| loose.contains(b)));
            prop_assert!(loose.iter().all(|b| (0.0..100.0).contains(&b.cx) && (0.0..100.0).contains(&b.cy)));
        }
    }
}
