//! SSD-style multibox detection loss.
//!
//! Ground-truth boxes are matched to a fixed set of default boxes by IoU.
//! The loss is `(L_conf + L_loc) / N` where `L_conf` is softmax cross-entropy
//! over every default (matched defaults against their ground-truth class,
//! unmatched against background class 0), `L_loc` is smooth L1 on the
//! center/size offset encoding of matched defaults only, and `N` is the
//! number of matched defaults. Both terms live on the differentiation tape,
//! so confidence and localization gradients come out of the same backward
//! pass as everything else in the crate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{NodeId, Reduction, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MultiboxError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("box extent must be positive and finite, got w={w}, h={h}")]
    BadExtent { w: f64, h: f64 },
    #[error("box center must be finite, got cx={cx}, cy={cy}")]
    BadCenter { cx: f64, cy: f64 },
    #[error("class id 0 is reserved for background")]
    BackgroundClass,
    #[error("class id {id} out of range: instance has {classes} classes including background")]
    ClassOutOfRange { id: usize, classes: usize },
    #[error("matching threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("instance has no default boxes")]
    NoDefaults,
    #[error("conf logits shape {got:?}, expected [{defaults}, >=2]")]
    ConfShape { got: Vec<usize>, defaults: usize },
    #[error("loc predictions shape {got:?}, expected [{defaults}, 4]")]
    LocShape { got: Vec<usize>, defaults: usize },
    #[error("ragged row lengths in serialized matrix")]
    RaggedRows,
    #[error("no default box is matched, the loss is undefined")]
    NoMatches,
    #[error("localization weight must be finite and non-negative, got {0}")]
    BadLocWeight(f64),
}

/// Axis-aligned box in center form. Extents are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoundingBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Deserialize)]
struct RawBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = MultiboxError;

    fn try_from(r: RawBox) -> Result<Self, MultiboxError> {
        BoundingBox::new(r.cx, r.cy, r.w, r.h)
    }
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, MultiboxError> {
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(MultiboxError::BadCenter { cx, cy });
        }
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(MultiboxError::BadExtent { w, h });
        }
        Ok(BoundingBox { cx, cy, w, h })
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Corner form `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union. Always in `[0, 1]` for valid boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// A labeled box. Class ids start at 1; 0 is the background class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGroundTruth")]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    class_id: usize,
}

#[derive(Deserialize)]
struct RawGroundTruth {
    bbox: BoundingBox,
    class_id: usize,
}

impl TryFrom<RawGroundTruth> for GroundTruth {
    type Error = MultiboxError;

    fn try_from(r: RawGroundTruth) -> Result<Self, MultiboxError> {
        GroundTruth::new(r.bbox, r.class_id)
    }
}

impl GroundTruth {
    pub fn new(bbox: BoundingBox, class_id: usize) -> Result<Self, MultiboxError> {
        if class_id == 0 {
            return Err(MultiboxError::BackgroundClass);
        }
        Ok(GroundTruth { bbox, class_id })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }
}

/// Result of default/ground-truth matching: for each default, the index of
/// its ground truth, or `None` for background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchAssignment {
    assignments: Vec<Option<usize>>,
}

impl MatchAssignment {
    pub fn assignments(&self) -> &[Option<usize>] {
        &self.assignments
    }

    pub fn matched_count(&self) -> usize {
        self.assignments.iter().filter(|a| a.is_some()).count()
    }
}

/// Matches defaults to ground truths.
///
/// Two kinds of candidates feed each default `d`:
/// 1. every ground truth whose highest-IoU default is `d` (ties between
///    defaults break toward the lower default index), regardless of overlap,
///    so each ground truth always pulls in its best default;
/// 2. the ground truth with the highest IoU against `d`, if that IoU is at
///    least `threshold` (ties break toward the lower ground-truth index).
///
/// The default is then assigned its highest-IoU candidate, ties again toward
/// the lower ground-truth index. With at least one ground truth, at least one
/// default ends up matched.
pub fn match_boxes(
    defaults: &[BoundingBox],
    gts: &[GroundTruth],
    threshold: f64,
) -> Result<MatchAssignment, MultiboxError> {
    if defaults.is_empty() {
        return Err(MultiboxError::NoDefaults);
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MultiboxError::BadThreshold(threshold));
    }
    let d = defaults.len();
    let g = gts.len();
    let mut overlaps = vec![0.0f64; d * g];
    for (di, db) in defaults.iter().enumerate() {
        for (gi, gt) in gts.iter().enumerate() {
            overlaps[di * g + gi] = iou(db, &gt.bbox);
        }
    }
    // Best default per ground truth, ties toward the lower default index.
    let mut forced: Vec<Vec<usize>> = vec![Vec::new(); d];
    for gi in 0..g {
        let mut best = 0usize;
        for di in 1..d {
            if overlaps[di * g + gi] > overlaps[best * g + gi] {
                best = di;
            }
        }
        forced[best].push(gi);
    }
    let mut assignments = vec![None; d];
    for di in 0..d {
        // Threshold candidate: this default's best ground truth.
        let mut candidate: Option<usize> = None;
        if g > 0 {
            let mut best = 0usize;
            for gi in 1..g {
                if overlaps[di * g + gi] > overlaps[di * g + best] {
                    best = gi;
                }
            }
            if overlaps[di * g + best] >= threshold {
                candidate = Some(best);
            }
        }
        let mut chosen: Option<usize> = None;
        for &gi in forced[di].iter().chain(candidate.iter()) {
            chosen = match chosen {
                None => Some(gi),
                Some(cur) => {
                    let better = overlaps[di * g + gi] > overlaps[di * g + cur]
                        || (overlaps[di * g + gi] == overlaps[di * g + cur] && gi < cur);
                    Some(if better { gi } else { cur })
                }
            };
        }
        assignments[di] = chosen;
    }
    Ok(MatchAssignment { assignments })
}

/// Offset encoding of ground truth `g` relative to default `d`:
/// `[(g.cx - d.cx) / d.w, (g.cy - d.cy) / d.h, ln(g.w / d.w), ln(g.h / d.h)]`.
pub fn encode_offsets(d: &BoundingBox, g: &BoundingBox) -> [f64; 4] {
    [
        (g.cx - d.cx) / d.w,
        (g.cy - d.cy) / d.h,
        (g.w / d.w).ln(),
        (g.h / d.h).ln(),
    ]
}

/// Inverse of [`encode_offsets`].
pub fn decode_offsets(d: &BoundingBox, offsets: [f64; 4]) -> Result<BoundingBox, MultiboxError> {
    BoundingBox::new(
        d.cx + offsets[0] * d.w,
        d.cy + offsets[1] * d.h,
        d.w * offsets[2].exp(),
        d.h * offsets[3].exp(),
    )
}

/// One detection training example: default boxes, ground truths, and the
/// network's confidence/localization outputs. Matching runs at construction.
#[derive(Debug, Clone)]
pub struct MultiboxInstance {
    defaults: Vec<BoundingBox>,
    gts: Vec<GroundTruth>,
    conf_logits: Tensor,
    loc_preds: Tensor,
    threshold: f64,
    matches: MatchAssignment,
}

impl MultiboxInstance {
    /// `conf_logits` is `[defaults, classes]` with classes >= 2 counting
    /// background; `loc_preds` is `[defaults, 4]`.
    pub fn new(
        defaults: Vec<BoundingBox>,
        gts: Vec<GroundTruth>,
        conf_logits: Tensor,
        loc_preds: Tensor,
        threshold: f64,
    ) -> Result<Self, MultiboxError> {
        if defaults.is_empty() {
            return Err(MultiboxError::NoDefaults);
        }
        let d = defaults.len();
        if conf_logits.rank() != 2 || conf_logits.shape()[0] != d || conf_logits.shape()[1] < 2 {
            return Err(MultiboxError::ConfShape {
                got: conf_logits.shape().to_vec(),
                defaults: d,
            });
        }
        if loc_preds.shape() != [d, 4] {
            return Err(MultiboxError::LocShape {
                got: loc_preds.shape().to_vec(),
                defaults: d,
            });
        }
        let classes = conf_logits.shape()[1];
        for gt in &gts {
            if gt.class_id >= classes {
                return Err(MultiboxError::ClassOutOfRange {
                    id: gt.class_id,
                    classes,
                });
            }
        }
        let matches = match_boxes(&defaults, &gts, threshold)?;
        Ok(MultiboxInstance {
            defaults,
            gts,
            conf_logits,
            loc_preds,
            threshold,
            matches,
        })
    }

    pub fn defaults(&self) -> &[BoundingBox] {
        &self.defaults
    }

    pub fn ground_truths(&self) -> &[GroundTruth] {
        &self.gts
    }

    pub fn matches(&self) -> &MatchAssignment {
        &self.matches
    }

    pub fn matched_count(&self) -> usize {
        self.matches.matched_count()
    }

    pub fn conf_logits(&self) -> &Tensor {
        &self.conf_logits
    }

    pub fn loc_preds(&self) -> &Tensor {
        &self.loc_preds
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceWire {
    defaults: Vec<BoundingBox>,
    ground_truths: Vec<GroundTruth>,
    conf_logits: Vec<Vec<f64>>,
    loc_preds: Vec<Vec<f64>>,
    threshold: f64,
}

fn matrix_tensor(rows: &[Vec<f64>], cols_hint: Option<usize>) -> Result<Tensor, MultiboxError> {
    let cols = match cols_hint {
        Some(c) => c,
        None => rows.first().map(|r| r.len()).unwrap_or(0),
    };
    let mut flat = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.len() != cols {
            return Err(MultiboxError::RaggedRows);
        }
        flat.extend_from_slice(r);
    }
    Ok(Tensor::from_values(&[rows.len(), cols], flat)?)
}

impl Serialize for MultiboxInstance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let d = self.defaults.len();
        let classes = self.conf_logits.shape()[1];
        let wire = InstanceWire {
            defaults: self.defaults.clone(),
            ground_truths: self.gts.clone(),
            conf_logits: (0..d)
                .map(|i| self.conf_logits.data()[i * classes..(i + 1) * classes].to_vec())
                .collect(),
            loc_preds: (0..d)
                .map(|i| self.loc_preds.data()[i * 4..(i + 1) * 4].to_vec())
                .collect(),
            threshold: self.threshold,
        };
        wire.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MultiboxInstance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let wire = InstanceWire::deserialize(d)?;
        let conf = matrix_tensor(&wire.conf_logits, None).map_err(D::Error::custom)?;
        let loc = matrix_tensor(&wire.loc_preds, Some(4)).map_err(D::Error::custom)?;
        MultiboxInstance::new(wire.defaults, wire.ground_truths, conf, loc, wire.threshold)
            .map_err(D::Error::custom)
    }
}

/// Builds the loss `(L_conf + weight * L_loc) / N` on the tape and returns
/// the scalar node. The instance's `conf_logits` and `loc_preds` are
/// registered as leaves, so their gradients are available after backward.
pub fn multibox_loss_weighted(
    tape: &mut Tape,
    instance: &mut MultiboxInstance,
    loc_weight: f64,
) -> Result<NodeId, MultiboxError> {
    if !(loc_weight.is_finite() && loc_weight >= 0.0) {
        return Err(MultiboxError::BadLocWeight(loc_weight));
    }
    let assignments = instance.matches.assignments().to_vec();
    let matched: Vec<usize> = assignments
        .iter()
        .enumerate()
        .filter_map(|(di, a)| a.map(|_| di))
        .collect();
    if matched.is_empty() {
        return Err(MultiboxError::NoMatches);
    }
    let n = matched.len();

    let conf = tape.leaf(&mut instance.conf_logits);
    let loc = tape.leaf(&mut instance.loc_preds);

    // Confidence term over every default; background class 0 when unmatched.
    let targets: Vec<usize> = assignments
        .iter()
        .map(|a| a.map(|gi| instance.gts[gi].class_id).unwrap_or(0))
        .collect();
    let l_conf = tape.softmax_cross_entropy(conf, &targets, Reduction::Sum)?;

    // Localization term over matched defaults only.
    let mut encoded = Vec::with_capacity(n * 4);
    for &di in &matched {
        let gi = assignments[di].expect("filtered to matched defaults");
        encoded.extend_from_slice(&encode_offsets(
            &instance.defaults[di],
            &instance.gts[gi].bbox,
        ));
    }
    let target_node = {
        let t = Tensor::from_values(&[n, 4], encoded)?;
        tape.constant(&t)
    };
    let picked = tape.gather_rows(loc, &matched)?;
    let diff = tape.sub(picked, target_node)?;
    let penalties = tape.smooth_l1(diff)?;
    let l_loc = tape.sum(penalties)?;

    let weighted = tape.scale(l_loc, loc_weight)?;
    let total = tape.add(l_conf, weighted)?;
    Ok(tape.scale(total, 1.0 / n as f64)?)
}

/// The printed form of the loss: localization weight 1.
pub fn multibox_loss(
    tape: &mut Tape,
    instance: &mut MultiboxInstance,
) -> Result<NodeId, MultiboxError> {
    multibox_loss_weighted(tape, instance, 1.0)
}

/// Convenience scalar evaluation on a private tape.
pub fn multibox_loss_value(instance: &MultiboxInstance) -> Result<f64, MultiboxError> {
    let mut inst = instance.clone();
    let mut tape = Tape::new();
    let node = multibox_loss(&mut tape, &mut inst)?;
    Ok(tape.value_data(node)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h).unwrap()
    }

    /// Scalar reference implementation, written straight from the rules with
    /// no tape involvement.
    fn oracle_loss(
        defaults: &[BoundingBox],
        gts: &[GroundTruth],
        conf: &[Vec<f64>],
        loc: &[Vec<f64>],
        threshold: f64,
    ) -> Option<f64> {
        let d = defaults.len();
        let g = gts.len();
        // Assignment, restated independently.
        let mut best_default_for_gt = vec![0usize; g];
        for gi in 0..g {
            let mut best = 0;
            let mut best_iou = f64::NEG_INFINITY;
            for (di, db) in defaults.iter().enumerate() {
                let v = iou(db, &gts[gi].bbox);
                if v > best_iou {
                    best_iou = v;
                    best = di;
                }
            }
            best_default_for_gt[gi] = best;
        }
        let mut assign: Vec<Option<usize>> = vec![None; d];
        for di in 0..d {
            let mut cands: Vec<usize> = (0..g).filter(|&gi| best_default_for_gt[gi] == di).collect();
            let mut best_gi = None;
            let mut best_iou = f64::NEG_INFINITY;
            for gi in 0..g {
                let v = iou(&defaults[di], &gts[gi].bbox);
                if v > best_iou {
                    best_iou = v;
                    best_gi = Some(gi);
                }
            }
            if let Some(gi) = best_gi {
                if best_iou >= threshold {
                    cands.push(gi);
                }
            }
            let mut chosen: Option<usize> = None;
            for gi in cands {
                let v = iou(&defaults[di], &gts[gi].bbox);
                let replace = match chosen {
                    None => true,
                    Some(cur) => {
                        let cv = iou(&defaults[di], &gts[cur].bbox);
                        v > cv || (v == cv && gi < cur)
                    }
                };
                if replace {
                    chosen = Some(gi);
                }
            }
            assign[di] = chosen;
        }
        let n = assign.iter().flatten().count();
        if n == 0 {
            return None;
        }
        let mut total = 0.0;
        for di in 0..d {
            let target = assign[di].map(|gi| gts[gi].class_id()).unwrap_or(0);
            let row = &conf[di];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[target];
        }
        for di in 0..d {
            let Some(gi) = assign[di] else { continue };
            let enc = encode_offsets(&defaults[di], &gts[gi].bbox);
            for k in 0..4 {
                let t = loc[di][k] - enc[k];
                total += if t.abs() < 1.0 { 0.5 * t * t } else { t.abs() - 0.5 };
            }
        }
        Some(total / n as f64)
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
    ) -> (Vec<BoundingBox>, Vec<GroundTruth>, Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
        let d = rng.gen_range(1..8usize);
        let g = rng.gen_range(1..4usize);
        let classes = rng.gen_range(2..5usize);
        let mk = |rng: &mut ChaCha8Rng| {
            bx(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
            )
        };
        let defaults: Vec<_> = (0..d).map(|_| mk(rng)).collect();
        let gts: Vec<_> = (0..g)
            .map(|_| GroundTruth::new(mk(rng), rng.gen_range(1..classes)).unwrap())
            .collect();
        let conf: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..classes).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let loc: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        (defaults, gts, conf, loc, 0.5)
    }

    fn build_instance(
        defaults: Vec<BoundingBox>,
        gts: Vec<GroundTruth>,
        conf: &[Vec<f64>],
        loc: &[Vec<f64>],
        threshold: f64,
    ) -> MultiboxInstance {
        let conf_t = matrix_tensor(conf, None).unwrap();
        let loc_t = matrix_tensor(loc, Some(4)).unwrap();
        MultiboxInstance::new(defaults, gts, conf_t, loc_t, threshold).unwrap()
    }

    #[test]
    fn iou_frozen_quarter_overlap() {
        // Two half-width squares offset so the intersection is 0.0625 and the
        // union 0.4375: IoU = 1/7.
        let a = bx(0.25, 0.25, 0.5, 0.5);
        let b = bx(0.5, 0.5, 0.5, 0.5);
        let v = iou(&a, &b);
        assert!((v - 0.0625 / 0.4375).abs() < 1e-15);
        assert!((v - 0.142857).abs() < 1e-6);
    }

    #[test]
    fn iou_basic_properties() {
        let a = bx(0.3, 0.4, 0.2, 0.1);
        assert!((iou(&a, &a) - 1.0).abs() < 1e-15);
        let far = bx(0.9, 0.9, 0.1, 0.1);
        assert_eq!(iou(&a, &far), 0.0);
        let b = bx(0.35, 0.4, 0.2, 0.2);
        assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-15);
    }

    #[test]
    fn offsets_round_trip_and_zero_at_identity() {
        let d = bx(0.4, 0.6, 0.3, 0.2);
        assert_eq!(encode_offsets(&d, &d), [0.0, 0.0, 0.0, 0.0]);
        let g = bx(0.5, 0.55, 0.25, 0.35);
        let dec = decode_offsets(&d, encode_offsets(&d, &g)).unwrap();
        assert!((dec.cx() - g.cx()).abs() < 1e-12);
        assert!((dec.cy() - g.cy()).abs() < 1e-12);
        assert!((dec.w() - g.w()).abs() < 1e-12);
        assert!((dec.h() - g.h()).abs() < 1e-12);
    }

    #[test]
    fn every_ground_truth_pulls_its_best_default() {
        // IoUs all far below threshold; the forced rule still matches each
        // ground truth's best default.
        let defaults = vec![bx(0.2, 0.2, 0.1, 0.1), bx(0.8, 0.8, 0.1, 0.1)];
        let gts = vec![
            GroundTruth::new(bx(0.25, 0.2, 0.3, 0.3), 1).unwrap(),
            GroundTruth::new(bx(0.75, 0.8, 0.3, 0.3), 1).unwrap(),
        ];
        let m = match_boxes(&defaults, &gts, 0.5).unwrap();
        assert_eq!(m.assignments(), &[Some(0), Some(1)]);
    }

    #[test]
    fn threshold_rule_matches_extra_defaults() {
        // Both defaults overlap the ground truth well; the non-best one
        // passes the threshold rule.
        let gt = bx(0.5, 0.5, 0.4, 0.4);
        let defaults = vec![bx(0.5, 0.5, 0.4, 0.4), bx(0.52, 0.5, 0.4, 0.4)];
        let gts = vec![GroundTruth::new(gt, 2).unwrap()];
        let m = match_boxes(&defaults, &gts, 0.5).unwrap();
        assert_eq!(m.assignments(), &[Some(0), Some(0)]);
        assert_eq!(m.matched_count(), 2);
    }

    #[test]
    fn matching_ties_break_to_lower_indices() {
        // Two identical defaults: the ground truth's forced match goes to
        // default 0, and default 1 still matches through the threshold rule.
        let defaults = vec![bx(0.5, 0.5, 0.2, 0.2), bx(0.5, 0.5, 0.2, 0.2)];
        let gts = vec![GroundTruth::new(bx(0.5, 0.5, 0.2, 0.2), 1).unwrap()];
        let m = match_boxes(&defaults, &gts, 0.5).unwrap();
        assert_eq!(m.assignments(), &[Some(0), Some(0)]);

        // Two identical ground truths: candidate ties resolve to gt 0.
        let defaults = vec![bx(0.5, 0.5, 0.2, 0.2)];
        let gts = vec![
            GroundTruth::new(bx(0.5, 0.5, 0.2, 0.2), 1).unwrap(),
            GroundTruth::new(bx(0.5, 0.5, 0.2, 0.2), 2).unwrap(),
        ];
        let m = match_boxes(&defaults, &gts, 0.5).unwrap();
        assert_eq!(m.assignments(), &[Some(0)]);
    }

    #[test]
    fn match_boxes_validates_inputs() {
        let gts = vec![GroundTruth::new(bx(0.5, 0.5, 0.2, 0.2), 1).unwrap()];
        assert!(matches!(
            match_boxes(&[], &gts, 0.5),
            Err(MultiboxError::NoDefaults)
        ));
        let defaults = vec![bx(0.5, 0.5, 0.2, 0.2)];
        assert!(matches!(
            match_boxes(&defaults, &gts, 0.0),
            Err(MultiboxError::BadThreshold(_))
        ));
        assert!(matches!(
            match_boxes(&defaults, &gts, 1.0),
            Err(MultiboxError::BadThreshold(_))
        ));
    }

    #[test]
    fn hand_worked_loss_is_two_ln_three() {
        // Default 0 coincides with the ground truth (matched, offsets zero),
        // default 1 sits elsewhere (background). Three classes, all logits
        // zero: each default contributes ln 3 of confidence loss. Perfect
        // localization adds nothing, and N = 1.
        let defaults = vec![bx(0.3, 0.3, 0.2, 0.2), bx(0.8, 0.8, 0.1, 0.1)];
        let gts = vec![GroundTruth::new(bx(0.3, 0.3, 0.2, 0.2), 2).unwrap()];
        let conf = vec![vec![0.0; 3], vec![0.0; 3]];
        let loc = vec![vec![0.0; 4], vec![0.0; 4]];
        let inst = build_instance(defaults, gts, &conf, &loc, 0.5);
        assert_eq!(inst.matched_count(), 1);
        let v = multibox_loss_value(&inst).unwrap();
        let expected = 2.0 * 3.0f64.ln();
        assert!((v - expected).abs() < 1e-12, "got {v}, want {expected}");
        assert!((expected - 2.1972).abs() < 1e-4);
    }

    #[test]
    fn loss_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..40 {
            let (defaults, gts, conf, loc, thr) = random_instance(&mut rng);
            let expected = oracle_loss(&defaults, &gts, &conf, &loc, thr)
                .expect("instances with ground truths always match something");
            let inst = build_instance(defaults, gts, &conf, &loc, thr);
            let got = multibox_loss_value(&inst).unwrap();
            assert!(
                (got - expected).abs() < 1e-10,
                "case {case}: got {got}, want {expected}"
            );
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..5 {
            let (defaults, gts, conf, loc, thr) = random_instance(&mut rng);
            let inst = build_instance(defaults.clone(), gts.clone(), &conf, &loc, thr);
            let params = [inst.conf_logits().clone(), inst.loc_preds().clone()];
            let assignments = inst.matches().assignments().to_vec();
            let class_targets: Vec<usize> = assignments
                .iter()
                .map(|a| a.map(|gi| gts[gi].class_id()).unwrap_or(0))
                .collect();
            let matched: Vec<usize> = assignments
                .iter()
                .enumerate()
                .filter_map(|(di, a)| a.map(|_| di))
                .collect();
            let mut encoded = Vec::new();
            for &di in &matched {
                let gi = assignments[di].unwrap();
                encoded.extend_from_slice(&encode_offsets(&defaults[di], &gts[gi].bbox));
            }
            let n = matched.len();
            let worst = finite_difference_check(&params, 1e-6, |tape, ids| {
                let l_conf = tape.softmax_cross_entropy(ids[0], &class_targets, Reduction::Sum)?;
                let enc = Tensor::from_values(&[n, 4], encoded.clone())?;
                let enc_node = tape.constant(&enc);
                let picked = tape.gather_rows(ids[1], &matched)?;
                let diff = tape.sub(picked, enc_node)?;
                let pen = tape.smooth_l1(diff)?;
                let l_loc = tape.sum(pen)?;
                let total = tape.add(l_conf, l_loc)?;
                tape.scale(total, 1.0 / n as f64)
            })
            .unwrap();
            assert!(worst < 1e-4, "case {case}: rel err {worst}");
        }
    }

    #[test]
    fn doubling_defaults_and_truths_preserves_the_loss() {
        // Ground truths placed exactly on defaults, so every copy matches and
        // the per-match average is unchanged by duplication.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let d = rng.gen_range(1..5usize);
            let classes = 4;
            let defaults: Vec<_> = (0..d)
                .map(|i| {
                    bx(
                        0.1 + 0.18 * i as f64,
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.05..0.15),
                        rng.gen_range(0.05..0.15),
                    )
                })
                .collect();
            let gts: Vec<_> = defaults
                .iter()
                .map(|b| GroundTruth::new(*b, rng.gen_range(1..classes)).unwrap())
                .collect();
            let conf: Vec<Vec<f64>> = (0..d)
                .map(|_| (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let loc: Vec<Vec<f64>> = (0..d)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let single = build_instance(defaults.clone(), gts.clone(), &conf, &loc, 0.5);
            let v1 = multibox_loss_value(&single).unwrap();

            let defaults2: Vec<_> = defaults.iter().chain(&defaults).cloned().collect();
            let gts2: Vec<_> = gts.iter().chain(&gts).cloned().collect();
            let conf2: Vec<Vec<f64>> = conf.iter().chain(&conf).cloned().collect();
            let loc2: Vec<Vec<f64>> = loc.iter().chain(&loc).cloned().collect();
            let double = build_instance(defaults2, gts2, &conf2, &loc2, 0.5);
            let v2 = multibox_loss_value(&double).unwrap();
            assert_eq!(double.matched_count(), 2 * single.matched_count());
            assert!((v1 - v2).abs() < 1e-12, "{v1} vs {v2}");
        }
    }

    #[test]
    fn unmatched_instance_reports_error() {
        let defaults = vec![bx(0.5, 0.5, 0.2, 0.2)];
        let conf = Tensor::zeros(&[1, 3]).unwrap();
        let loc = Tensor::zeros(&[1, 4]).unwrap();
        let inst = MultiboxInstance::new(defaults, vec![], conf, loc, 0.5).unwrap();
        assert_eq!(inst.matched_count(), 0);
        assert!(matches!(
            multibox_loss_value(&inst),
            Err(MultiboxError::NoMatches)
        ));
    }

    #[test]
    fn construction_validates_classes_and_shapes() {
        let b = bx(0.5, 0.5, 0.2, 0.2);
        assert!(matches!(
            GroundTruth::new(b, 0),
            Err(MultiboxError::BackgroundClass)
        ));
        let gts = vec![GroundTruth::new(b, 3).unwrap()];
        let conf = Tensor::zeros(&[1, 3]).unwrap();
        let loc = Tensor::zeros(&[1, 4]).unwrap();
        assert!(matches!(
            MultiboxInstance::new(vec![b], gts, conf.clone(), loc.clone(), 0.5),
            Err(MultiboxError::ClassOutOfRange { id: 3, classes: 3 })
        ));
        let gts = vec![GroundTruth::new(b, 1).unwrap()];
        assert!(matches!(
            MultiboxInstance::new(vec![b], gts.clone(), Tensor::zeros(&[2, 3]).unwrap(), loc.clone(), 0.5),
            Err(MultiboxError::ConfShape { .. })
        ));
        assert!(matches!(
            MultiboxInstance::new(vec![b], gts, conf, Tensor::zeros(&[1, 3]).unwrap(), 0.5),
            Err(MultiboxError::LocShape { .. })
        ));
        assert!(BoundingBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BoundingBox::new(0.5, 0.5, 0.1, -0.2).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.5, 0.1, 0.2).is_err());
    }

    #[test]
    fn instances_round_trip_through_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (defaults, gts, conf, loc, thr) = random_instance(&mut rng);
        let inst = build_instance(defaults, gts, &conf, &loc, thr);
        let json = serde_json::to_string(&inst).unwrap();
        let back: MultiboxInstance = serde_json::from_str(&json).unwrap();
        assert_eq!(back.matches(), inst.matches());
        let (a, b) = (multibox_loss_value(&inst).unwrap(), multibox_loss_value(&back).unwrap());
        assert_eq!(a.to_bits(), b.to_bits(), "loss must survive serialization exactly");
    }

    proptest! {
        #[test]
        fn iou_stays_in_unit_interval(
            acx in 0.0f64..1.0, acy in 0.0f64..1.0, aw in 0.01f64..0.8, ah in 0.01f64..0.8,
            bcx in 0.0f64..1.0, bcy in 0.0f64..1.0, bw in 0.01f64..0.8, bh in 0.01f64..0.8,
        ) {
            let a = bx(acx, acy, aw, ah);
            let b = bx(bcx, bcy, bw, bh);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((iou(&b, &a) - v).abs() < 1e-12);
        }

        #[test]
        fn encode_decode_round_trips(
            dcx in 0.1f64..0.9, dcy in 0.1f64..0.9, dw in 0.05f64..0.5, dh in 0.05f64..0.5,
            gcx in 0.1f64..0.9, gcy in 0.1f64..0.9, gw in 0.05f64..0.5, gh in 0.05f64..0.5,
        ) {
            let d = bx(dcx, dcy, dw, dh);
            let g = bx(gcx, gcy, gw, gh);
            let dec = decode_offsets(&d, encode_offsets(&d, &g)).unwrap();
            prop_assert!((dec.cx() - g.cx()).abs() < 1e-9);
            prop_assert!((dec.cy() - g.cy()).abs() < 1e-9);
            prop_assert!((dec.w() - g.w()).abs() < 1e-9);
            prop_assert!((dec.h() - g.h()).abs() < 1e-9);
        }
    }
}
