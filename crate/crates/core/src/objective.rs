//! Training loss for one prompt, gated by the data type it came from.
//!
//! | data type      | part | object | box | mask | GT in matching |
//! |----------------|------|--------|-----|------|----------------|
//! | class-agnostic | no   | no     | yes | yes  | many           |
//! | object-level   | no   | yes    | yes | yes  | one            |
//! | part-level     | yes  | yes    | yes | yes  | one            |

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::box_of;
use crate::matching::{class_target, Assignment, ClassTarget};
use crate::net::{Decoded, Forward};
use crate::scene::{DataType, StackLevel};
use crate::tape::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtCount {
    One,
    Many,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Part,
    Object,
    Box,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gating {
    pub part: bool,
    pub object: bool,
    pub boxes: bool,
    pub mask: bool,
    pub gt_in_matching: GtCount,
}

impl Gating {
    pub fn allows(&self, kind: LossKind) -> bool {
        match kind {
            LossKind::Part => self.part,
            LossKind::Object => self.object,
            LossKind::Box => self.boxes,
            LossKind::Mask => self.mask,
        }
    }
}

pub fn gating(data_type: DataType) -> Gating {
    match data_type {
        DataType::ClassAgnostic => Gating {
            part: false,
            object: false,
            boxes: true,
            mask: true,
            gt_in_matching: GtCount::Many,
        },
        DataType::ObjectLevel => Gating {
            part: false,
            object: true,
            boxes: true,
            mask: true,
            gt_in_matching: GtCount::One,
        },
        DataType::PartLevel => Gating {
            part: true,
            object: true,
            boxes: true,
            mask: true,
            gt_in_matching: GtCount::One,
        },
    }
}

/// Fails with a contract error when `kind` is gated off for `data_type`.
pub fn require(data_type: DataType, kind: LossKind) -> Result<()> {
    if gating(data_type).allows(kind) {
        Ok(())
    } else {
        Err(Error::Contract(format!("{kind:?} loss is not available on {data_type:?} data")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mask: f64,
    pub boxes: f64,
    pub class: f64,
    pub confidence: f64,
    /// Relative weight of the "no object" term for unmatched predictions on labeled data.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mask: 2.0,
            boxes: 1.0,
            class: 1.0,
            confidence: 1.0,
            no_object: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub part_cls: f64,
    pub object_cls: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub mask_bce: f64,
    pub mask_dice: f64,
    pub confidence: f64,
    pub total: f64,
    pub matched: usize,
    pub unmatched: usize,
}

impl LossReport {
    pub const CSV_COLUMNS: [&'static str; 8] = [
        "part_cls",
        "object_cls",
        "box_l1",
        "box_giou",
        "mask_bce",
        "mask_dice",
        "confidence",
        "total",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.part_cls,
            self.object_cls,
            self.box_l1,
            self.box_giou,
            self.mask_bce,
            self.mask_dice,
            self.confidence,
            self.total,
        ]
    }

    /// Weighted sum of the components.
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.mask * (self.mask_bce + self.mask_dice)
            + w.boxes * (self.box_l1 + self.box_giou)
            + w.class * (self.part_cls + self.object_cls)
            + w.confidence * self.confidence
    }

    /// Accumulates `other · s` component-wise.
    pub fn add_scaled(&mut self, other: &LossReport, s: f64) {
        self.part_cls += s * other.part_cls;
        self.object_cls += s * other.object_cls;
        self.box_l1 += s * other.box_l1;
        self.box_giou += s * other.box_giou;
        self.mask_bce += s * other.mask_bce;
        self.mask_dice += s * other.mask_dice;
        self.confidence += s * other.confidence;
        self.total += s * other.total;
        self.matched += other.matched;
        self.unmatched += other.unmatched;
    }
}

/// A loss recorded on the tape together with its plain-valued report.
#[derive(Debug, Clone, Copy)]
pub struct PromptLoss {
    pub total: Var,
    pub report: LossReport,
}

/// Loss of a click's outputs against the levels its assignment paired them with.
pub fn loss_for_click(
    f: &mut Forward<'_>,
    dec: &Decoded,
    gts: &[StackLevel],
    assignment: &Assignment,
    data_type: DataType,
    weights: &LossWeights,
) -> Result<PromptLoss> {
    loss_for_assignment(f, dec, gts, assignment, data_type, weights)
}

/// Loss of the single box-prompt output against the instance whose box was noised.
pub fn loss_for_box_prompt(
    f: &mut Forward<'_>,
    dec: &Decoded,
    gt: &StackLevel,
    data_type: DataType,
    weights: &LossWeights,
) -> Result<PromptLoss> {
    if dec.len() != 1 {
        return Err(Error::Dimension(format!("box prompt produced {} outputs", dec.len())));
    }
    let assignment = Assignment {
        pairs: vec![(0, 0)],
        unmatched_preds: Vec::new(),
        unmatched_gts: Vec::new(),
        cost: 0.0,
    };
    loss_for_assignment(f, dec, std::slice::from_ref(gt), &assignment, data_type, weights)
}

fn loss_for_assignment(
    f: &mut Forward<'_>,
    dec: &Decoded,
    gts: &[StackLevel],
    assignment: &Assignment,
    data_type: DataType,
    weights: &LossWeights,
) -> Result<PromptLoss> {
    let gate = gating(data_type);
    let n_out = dec.len();
    let m = assignment.pairs.len();
    if m == 0 {
        return Err(Error::Contract("assignment has no pairs".into()));
    }
    let area = f.tape.value(dec.mask_logits).ncols();
    let preds: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let matched_gts: Vec<&StackLevel> = assignment.pairs.iter().map(|p| &gts[p.1]).collect();
    let mut targets = Array2::zeros((m, area));
    for (k, gt) in matched_gts.iter().enumerate() {
        if gt.mask.grid().area() != area {
            return Err(Error::Dimension("ground-truth mask does not match the output grid".into()));
        }
        for (p, t) in targets.row_mut(k).iter_mut().enumerate() {
            *t = gt.mask.get_index(p) as u8 as f64;
        }
    }
    let class_targets = matched_gts
        .iter()
        .map(|gt| class_target(gt, data_type))
        .collect::<Result<Vec<_>>>()?;
    for t in &class_targets {
        match t {
            ClassTarget::Part(_) => require(data_type, LossKind::Part)?,
            ClassTarget::Object(_) => require(data_type, LossKind::Object)?,
            ClassTarget::None => {}
        }
    }

    let t = &mut f.tape;
    let inv_m = 1.0 / m as f64;
    let idx = Rc::new(preds.iter().map(|&p| dec.offset + p).collect::<Vec<_>>());
    let own = Rc::new(dec.rows().collect::<Vec<_>>());
    let targets = Rc::new(targets);

    // mask: mean BCE over pixels, soft Dice per pair; both averaged over pairs
    let rows = t.gather_rows(dec.mask_logits, idx.clone())?;
    let bce = t.bce_logits(rows, targets.clone())?;
    let bce = t.sum_all(bce);
    let mask_bce = t.scale(bce, inv_m / area as f64);
    let probs = t.sigmoid(rows);
    let tconst = t.constant((*targets).clone());
    let pt = t.mul(probs, tconst)?;
    let ones = t.constant(Array2::ones((area, 1)));
    let inter = t.matmul(pt, ones)?;
    let psum = t.matmul(probs, ones)?;
    let tsum = t.constant(targets.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1)) + 1.0);
    let num = t.scale(inter, 2.0);
    let num = t.shift(num, 1.0);
    let den = t.add(psum, tsum)?;
    let ratio = t.div(num, den)?;
    let ratio = t.sum_all(ratio);
    let ratio = t.scale(ratio, -inv_m);
    let mask_dice = t.shift(ratio, 1.0);

    // box: L1 summed over coordinates and 1 - GIoU, averaged over pairs
    let gt_boxes = matched_gts
        .iter()
        .map(|gt| box_of(&gt.mask).map(|b| b.to_array()))
        .collect::<Result<Vec<_>>>()?;
    let gt_boxes = Array2::from_shape_vec((m, 4), gt_boxes.concat()).expect("m x 4");
    let pb = t.gather_rows(dec.boxes, idx.clone())?;
    let gb = t.constant(gt_boxes);
    let diff = t.sub(pb, gb)?;
    let diff = t.abs(diff);
    let l1 = t.sum_all(diff);
    let box_l1 = t.scale(l1, inv_m);
    let g = giou_rows(t, pb, gb)?;
    let g = t.sum_all(g);
    let g = t.scale(g, -inv_m);
    let box_giou = t.shift(g, 1.0);

    // class terms, normalized by the number of pairs
    let mut object_terms: Vec<(usize, usize)> = Vec::new();
    let mut part_terms: Vec<(usize, usize)> = Vec::new();
    for (&p, ct) in preds.iter().zip(&class_targets) {
        match ct {
            ClassTarget::Object(c) => object_terms.push((p, *c)),
            ClassTarget::Part(c) => part_terms.push((p, *c)),
            ClassTarget::None => {}
        }
    }
    let unmatched: Vec<usize> = (0..n_out).filter(|i| !preds.contains(i)).collect();
    let zero = t.scalar_const(0.0);
    let object_cls = if gate.object {
        let no_object = t.value(dec.object_logits).ncols() - 1;
        let logits = t.gather_rows(dec.object_logits, own.clone())?;
        let logp = t.log_softmax_rows(logits);
        let matched = if object_terms.is_empty() {
            zero
        } else {
            let e = t.entries(logp, Rc::new(object_terms))?;
            t.sum_all(e)
        };
        let background = if unmatched.is_empty() || weights.no_object == 0.0 {
            zero
        } else {
            let e = t.entries(logp, Rc::new(unmatched.iter().map(|&i| (i, no_object)).collect()))?;
            let s = t.sum_all(e);
            t.scale(s, weights.no_object)
        };
        let s = t.add(matched, background)?;
        t.scale(s, -inv_m)
    } else {
        zero
    };
    let part_cls = if gate.part && !part_terms.is_empty() {
        let logits = t.gather_rows(dec.part_logits, own.clone())?;
        let logp = t.log_softmax_rows(logits);
        let e = t.entries(logp, Rc::new(part_terms))?;
        let s = t.sum_all(e);
        t.scale(s, -inv_m)
    } else {
        zero
    };

    // confidence regresses the soft IoU of each output with its pair; the
    // target is a constant, so no gradient flows through it
    let mut conf_target = Array2::zeros((n_out, 1));
    for (k, &p) in preds.iter().enumerate() {
        conf_target[[p, 0]] = soft_iou(t.value(probs).row(k), targets.row(k));
    }
    let conf_logits = t.gather_rows(dec.confidence_logits, own)?;
    let conf = t.bce_logits(conf_logits, Rc::new(conf_target))?;
    let conf = t.sum_all(conf);
    let confidence = t.scale(conf, 1.0 / n_out as f64);

    let mask_sum = t.add(mask_bce, mask_dice)?;
    let mask_term = t.scale(mask_sum, weights.mask);
    let box_sum = t.add(box_l1, box_giou)?;
    let box_term = t.scale(box_sum, weights.boxes);
    let cls_sum = t.add(object_cls, part_cls)?;
    let cls_term = t.scale(cls_sum, weights.class);
    let conf_term = t.scale(confidence, weights.confidence);
    let total = t.add(mask_term, box_term)?;
    let total = t.add(total, cls_term)?;
    let total = t.add(total, conf_term)?;

    let report = LossReport {
        part_cls: t.scalar(part_cls),
        object_cls: t.scalar(object_cls),
        box_l1: t.scalar(box_l1),
        box_giou: t.scalar(box_giou),
        mask_bce: t.scalar(mask_bce),
        mask_dice: t.scalar(mask_dice),
        confidence: t.scalar(confidence),
        total: t.scalar(total),
        matched: m,
        unmatched: unmatched.len(),
    };
    if !report.total.is_finite() {
        return Err(Error::Numeric { layer: "loss".into() });
    }
    Ok(PromptLoss { total, report })
}

fn soft_iou(p: ndarray::ArrayView1<'_, f64>, t: ndarray::ArrayView1<'_, f64>) -> f64 {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let union = p.sum() + t.sum() - inter;
    if union <= 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// Row-wise generalized IoU of `(cx, cy, w, h)` boxes as an `n × 1` column.
fn giou_rows(t: &mut crate::tape::Tape, a: Var, b: Var) -> Result<Var> {
    let corners = |t: &mut crate::tape::Tape, v: Var| -> Result<[Var; 5]> {
        let cx = t.col(v, 0)?;
        let cy = t.col(v, 1)?;
        let w = t.col(v, 2)?;
        let h = t.col(v, 3)?;
        let hw = t.scale(w, 0.5);
        let hh = t.scale(h, 0.5);
        let x0 = t.sub(cx, hw)?;
        let x1 = t.add(cx, hw)?;
        let y0 = t.sub(cy, hh)?;
        let y1 = t.add(cy, hh)?;
        let area = t.mul(w, h)?;
        Ok([x0, y0, x1, y1, area])
    };
    let [ax0, ay0, ax1, ay1, aa] = corners(t, a)?;
    let [bx0, by0, bx1, by1, ba] = corners(t, b)?;
    let n = t.value(ax0).nrows();
    let zeros = t.constant(Array2::zeros((n, 1)));

    let ix0 = t.max(ax0, bx0)?;
    let ix1 = t.min(ax1, bx1)?;
    let iy0 = t.max(ay0, by0)?;
    let iy1 = t.min(ay1, by1)?;
    let iw = t.sub(ix1, ix0)?;
    let iw = t.max(iw, zeros)?;
    let ih = t.sub(iy1, iy0)?;
    let ih = t.max(ih, zeros)?;
    let inter = t.mul(iw, ih)?;
    let union = t.add(aa, ba)?;
    let union = t.sub(union, inter)?;

    let ex0 = t.min(ax0, bx0)?;
    let ex1 = t.max(ax1, bx1)?;
    let ey0 = t.min(ay0, by0)?;
    let ey1 = t.max(ay1, by1)?;
    let ew = t.sub(ex1, ex0)?;
    let eh = t.sub(ey1, ey0)?;
    let enclosing = t.mul(ew, eh)?;

    let ratio = t.div(inter, union)?;
    let slack = t.sub(enclosing, union)?;
    let slack = t.div(slack, enclosing)?;
    t.sub(ratio, slack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{giou, BitMask, Grid, NormBox, Pixel};
    use crate::matching::{match_click, CostWeights, Strategy};
    use crate::net::{Model, ModelConfig};
    use crate::prompt::{click_to_anchor, PromptKind};
    use crate::scene::{GranularityStack, Image, LevelKind};

    fn model() -> Model {
        let cfg = ModelConfig {
            grid: Grid::square(16).unwrap(),
            width: 16,
            concept_width: 8,
            ffn_width: 16,
            color_width: 8,
            ..ModelConfig::tiny(3, 4)
        };
        Model::init(cfg, 11).unwrap()
    }

    fn image(grid: Grid) -> Image {
        Image::new(grid, (0..grid.area() * 3).map(|i| (i * 29 % 251) as u8).collect()).unwrap()
    }

    fn square(grid: Grid, r: usize) -> BitMask {
        BitMask::from_fn(grid, |x, y| x.abs_diff(8) <= r && y.abs_diff(8) <= r)
    }

    fn stack(grid: Grid) -> GranularityStack {
        let levels = vec![
            StackLevel {
                mask: square(grid, 1),
                kind: LevelKind::Part,
                concept: Some(2),
                instance: 0,
            },
            StackLevel {
                mask: square(grid, 4),
                kind: LevelKind::Object,
                concept: Some(1),
                instance: 0,
            },
        ];
        GranularityStack::collect(Pixel::new(8, 8), &levels)
    }

    fn click_loss(m: &Model, dt: DataType) -> (LossReport, crate::net::ParamGrads) {
        let grid = m.config().grid;
        let mut f = Forward::new(m);
        let enc = f.encode_image(&image(grid)).unwrap();
        let dec = f.decode(&enc, click_to_anchor(0.53, 0.53, 0.01).unwrap(), PromptKind::Click).unwrap();
        let st = stack(grid);
        let preds = dec.predictions(&f);
        let (_, a) = match_click(&preds, &st, Strategy::ManyToMany, dt, CostWeights::default()).unwrap();
        let loss = loss_for_click(&mut f, &dec, &st.levels, &a, dt, &LossWeights::default()).unwrap();
        let g = f.backward(loss.total).unwrap();
        (loss.report, g)
    }

    #[test]
    fn gating_table() {
        use LossKind::*;
        let expect = [
            (DataType::ClassAgnostic, [false, false, true, true], GtCount::Many),
            (DataType::ObjectLevel, [false, true, true, true], GtCount::One),
            (DataType::PartLevel, [true, true, true, true], GtCount::One),
        ];
        for (dt, cells, count) in expect {
            let g = gating(dt);
            for (kind, on) in [Part, Object, Box, Mask].into_iter().zip(cells) {
                assert_eq!(g.allows(kind), on, "{dt:?} {kind:?}");
                assert_eq!(require(dt, kind).is_ok(), on);
            }
            assert_eq!(g.gt_in_matching, count);
        }
        assert!(matches!(require(DataType::ClassAgnostic, Part), Err(Error::Contract(_))));
    }

    #[test]
    fn class_terms_follow_gating() {
        let m = model();
        let (r, _) = click_loss(&m, DataType::ClassAgnostic);
        assert_eq!(r.part_cls, 0.0);
        assert_eq!(r.object_cls, 0.0);
        assert_eq!((r.matched, r.unmatched), (2, 4));
        let (r, _) = click_loss(&m, DataType::PartLevel);
        assert!(r.part_cls > 0.0 && r.object_cls > 0.0);
        for (r, _) in [click_loss(&m, DataType::ClassAgnostic), click_loss(&m, DataType::PartLevel)] {
            assert!(r.total.is_finite() && r.total >= 0.0);
            assert!((r.total - r.weighted(&LossWeights::default())).abs() < 1e-12);
        }
    }

    #[test]
    fn object_level_box_prompt_has_no_part_term() {
        let m = model();
        let grid = m.config().grid;
        let gt = StackLevel {
            mask: square(grid, 4),
            kind: LevelKind::Object,
            concept: Some(0),
            instance: 0,
        };
        let mut f = Forward::new(&m);
        let enc = f.encode_image(&image(grid)).unwrap();
        let b = box_of(&gt.mask).unwrap();
        let dec = f.decode(&enc, b, PromptKind::Box).unwrap();
        let loss = loss_for_box_prompt(&mut f, &dec, &gt, DataType::ObjectLevel, &LossWeights::default()).unwrap();
        assert_eq!(loss.report.part_cls, 0.0);
        assert!(loss.report.object_cls > 0.0);
        let g = f.backward(loss.total).unwrap();
        let p = m.params();
        assert!(g.get(p.slot("prompt.box_token").unwrap()).is_some_and(|g| g.iter().any(|&v| v != 0.0)));
        assert!(g.get(p.slot("prompt.level").unwrap()).is_none());
        let types = g.get(p.slot("prompt.type").unwrap()).unwrap();
        assert!(types.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn click_loss_never_reaches_box_token() {
        let m = model();
        let (_, g) = click_loss(&m, DataType::PartLevel);
        let p = m.params();
        assert!(g.get(p.slot("prompt.box_token").unwrap()).is_none());
        let types = g.get(p.slot("prompt.type").unwrap()).unwrap();
        assert!(types.row(1).iter().all(|&v| v == 0.0));
        assert!(types.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn class_agnostic_leaves_concept_tables_alone() {
        let m = model();
        let (_, g) = click_loss(&m, DataType::ClassAgnostic);
        let p = m.params();
        for name in ["concept.proj", "concept.objects", "concept.parts"] {
            let grad = g.get(p.slot(name).unwrap());
            assert!(grad.is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{name}");
        }
    }

    #[test]
    fn saturated_perfect_mask_has_vanishing_mask_loss() {
        // bypass the network: a tape whose logits are the target scaled up
        let m = model();
        let grid = m.config().grid;
        let gt = StackLevel {
            mask: square(grid, 3),
            kind: LevelKind::Object,
            concept: None,
            instance: 0,
        };
        let mut f = Forward::new(&m);
        let enc = f.encode_image(&image(grid)).unwrap();
        let mut dec = f.decode(&enc, box_of(&gt.mask).unwrap(), PromptKind::Box).unwrap();
        let logits = Array2::from_shape_fn((1, grid.area()), |(_, p)| if gt.mask.get_index(p) { 60.0 } else { -60.0 });
        dec.mask_logits = f.tape.constant(logits);
        let b = box_of(&gt.mask).unwrap().to_array();
        dec.boxes = f.tape.constant(Array2::from_shape_vec((1, 4), b.to_vec()).unwrap());
        let r = loss_for_box_prompt(&mut f, &dec, &gt, DataType::ClassAgnostic, &LossWeights::default())
            .unwrap()
            .report;
        assert!(r.mask_bce < 1e-20);
        assert!(r.mask_dice < 1e-12);
        assert!(r.box_l1 == 0.0 && r.box_giou.abs() < 1e-12);
    }

    #[test]
    fn tape_giou_matches_plain_giou() {
        let mut t = crate::tape::Tape::new();
        let boxes = [
            (NormBox::new(0.5, 0.5, 0.4, 0.2).unwrap(), NormBox::new(0.55, 0.45, 0.3, 0.3).unwrap()),
            (NormBox::new(0.2, 0.2, 0.1, 0.1).unwrap(), NormBox::new(0.8, 0.7, 0.2, 0.1).unwrap()),
        ];
        let a = Array2::from_shape_vec((2, 4), boxes.iter().flat_map(|b| b.0.to_array()).collect()).unwrap();
        let b = Array2::from_shape_vec((2, 4), boxes.iter().flat_map(|b| b.1.to_array()).collect()).unwrap();
        let (a, b) = (t.constant(a), t.constant(b));
        let g = giou_rows(&mut t, a, b).unwrap();
        for (k, (x, y)) in boxes.iter().enumerate() {
            assert!((t.value(g)[[k, 0]] - giou(x, y).unwrap()).abs() < 1e-12);
        }
    }

    fn total_loss(m: &Model, st: &GranularityStack, a: &Assignment) -> (f64, Option<crate::net::ParamGrads>) {
        let grid = m.config().grid;
        let mut f = Forward::new(m);
        let enc = f.encode_image(&image(grid)).unwrap();
        let dec = f.decode(&enc, click_to_anchor(0.53, 0.53, 0.01).unwrap(), PromptKind::Click).unwrap();
        // the confidence target is a stop-gradient function of the outputs, so
        // finite differences would see it move; leave that term out
        let w = LossWeights {
            confidence: 0.0,
            ..LossWeights::default()
        };
        let click = loss_for_click(&mut f, &dec, &st.levels, a, DataType::PartLevel, &w).unwrap();
        let noisy = NormBox::new(0.5, 0.55, 0.5, 0.45).unwrap();
        let bdec = f.decode(&enc, noisy, PromptKind::Box).unwrap();
        let boxed = loss_for_box_prompt(&mut f, &bdec, &st.levels[1], DataType::PartLevel, &w).unwrap();
        let total = f.tape.add(click.total, boxed.total).unwrap();
        let value = f.tape.scalar(total);
        (value, Some(f.backward(total).unwrap()))
    }

    #[test]
    fn gradients_match_central_differences() {
        use rand::{Rng, SeedableRng};
        let m = model();
        let grid = m.config().grid;
        let st = stack(grid);
        let a = Assignment {
            pairs: vec![(1, 1), (4, 0)],
            unmatched_preds: vec![0, 2, 3, 5],
            unmatched_gts: Vec::new(),
            cost: 0.0,
        };
        let (_, grads) = total_loss(&m, &st, &a);
        let grads = grads.unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let slot = rng.gen_range(0..m.params().len());
            let (r, c) = m.params().value(slot).dim();
            let (i, j) = (rng.gen_range(0..r), rng.gen_range(0..c));
            let analytic = grads.get(slot).map_or(0.0, |g| g[[i, j]]);
            let mut plus = m.clone();
            plus.params_mut().values_mut()[slot][[i, j]] += h;
            let mut minus = m.clone();
            minus.params_mut().values_mut()[slot][[i, j]] -= h;
            let numeric = (total_loss(&plus, &st, &a).0 - total_loss(&minus, &st, &a).0) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{} [{i},{j}]: {analytic} vs {numeric}", m.params().name(slot));
        }
        assert!(worst < 1e-4);
    }
}
