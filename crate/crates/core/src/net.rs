//! The query decoder.
//!
//! An image is cut into square patches, each embedded into a `D`-wide
//! feature. Prompt queries cross-attend to those features through `L`
//! layers of dense single-head attention followed by a feedforward block.
//! Each output query then yields a box (a residual on its anchor in
//! sigmoid space), mask logits (its mask embedding against every pixel
//! embedding, gated softly by the predicted box), a confidence logit, and
//! object and part scores computed from one shared projection.
//!
//! Everything runs on a [`Tape`] so any scalar built from the outputs can be
//! differentiated back to the parameters.

use std::rc::Rc;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::{BitMask, Grid, NormBox};
use crate::prompt::{sine_position, PromptKind, PromptTables, NUM_LEVELS};
use crate::scene::{ConceptVocab, Image};
use crate::tape::{BoxGateSpec, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub grid: Grid,
    pub patch: usize,
    pub width: usize,
    pub concept_width: usize,
    pub layers: usize,
    pub ffn_width: usize,
    pub color_width: usize,
    pub num_objects: usize,
    pub num_parts: usize,
    /// Logit slope of the box gate per pixel of distance outside the box.
    pub gate_sharpness: f64,
}

impl ModelConfig {
    pub fn for_vocab(vocab: &ConceptVocab) -> Self {
        Self {
            grid: Grid::default(),
            patch: 4,
            width: 64,
            concept_width: 32,
            layers: 2,
            ffn_width: 128,
            color_width: 16,
            num_objects: vocab.num_objects(),
            num_parts: vocab.num_parts(),
            gate_sharpness: 0.5,
        }
    }

    /// A very small model for gradient checks and quick tests.
    pub fn tiny(num_objects: usize, num_parts: usize) -> Self {
        Self {
            grid: Grid::square(8).expect("valid grid"),
            patch: 4,
            width: 8,
            concept_width: 4,
            layers: 2,
            ffn_width: 8,
            color_width: 4,
            num_objects,
            num_parts,
            gate_sharpness: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.grid.width() % self.patch != 0 || self.grid.height() % self.patch != 0 {
            return bad(format!("patch {} does not tile the grid", self.patch));
        }
        if self.width == 0 || self.width % 8 != 0 {
            return bad(format!("width {} must be a positive multiple of 8", self.width));
        }
        if self.concept_width == 0 || self.layers == 0 || self.ffn_width == 0 || self.color_width == 0 {
            return bad("zero-sized layer".into());
        }
        if self.num_objects == 0 || self.num_parts == 0 {
            return bad("empty concept vocabulary".into());
        }
        if !(self.gate_sharpness.is_finite() && self.gate_sharpness >= 0.0) {
            return bad(format!("gate sharpness {}", self.gate_sharpness));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.grid.width() / self.patch) * (self.grid.height() / self.patch)
    }

    fn patch_inputs(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let (d, e, h, c) = (self.width, self.concept_width, self.ffn_width, self.color_width);
        let mut out: Vec<(String, (usize, usize))> = vec![
            ("patch.w".into(), (self.patch_inputs(), d)),
            ("patch.b".into(), (1, d)),
            ("color.w1".into(), (3, c)),
            ("color.b1".into(), (1, c)),
            ("color.w2".into(), (c, d)),
            ("pixel_head".into(), (d, d)),
        ];
        for l in 0..self.layers {
            for (name, shape) in [
                ("wq", (d, d)),
                ("wk", (d, d)),
                ("wv", (d, d)),
                ("wo", (d, d)),
                ("ffn.w1", (d, h)),
                ("ffn.b1", (1, h)),
                ("ffn.w2", (h, d)),
                ("ffn.b2", (1, d)),
            ] {
                out.push((format!("layer{l}.{name}"), shape));
            }
        }
        out.extend([
            ("mask_head".into(), (d, d)),
            ("box.w".into(), (d, 4)),
            ("box.b".into(), (1, 4)),
            ("confidence.w".into(), (d, 1)),
            ("confidence.b".into(), (1, 1)),
            ("concept.proj".into(), (d, e)),
            ("concept.objects".into(), (self.num_objects + 1, e)),
            ("concept.parts".into(), (self.num_parts, e)),
            ("prompt.level".into(), (NUM_LEVELS, d)),
            ("prompt.type".into(), (2, d)),
            ("prompt.box_token".into(), (1, d)),
        ]);
        out
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new(entries: Vec<(String, Array2<f64>)>) -> Self {
        let (names, values) = entries.into_iter().unzip();
        Self { names, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.slot(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.slot(name).map(move |i| &mut self.values[i])
    }

    pub fn value(&self, slot: usize) -> &Array2<f64> {
        &self.values[slot]
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Slots {
    patch_w: usize,
    patch_b: usize,
    color_w1: usize,
    color_b1: usize,
    color_w2: usize,
    pixel_head: usize,
    layers: Vec<LayerSlots>,
    mask_head: usize,
    box_w: usize,
    box_b: usize,
    conf_w: usize,
    conf_b: usize,
    proj: usize,
    objects: usize,
    parts: usize,
    level: usize,
    types: usize,
    box_token: usize,
}

impl Slots {
    fn resolve(store: &ParamStore, layers: usize) -> Result<Self> {
        let s = |name: &str| {
            store
                .slot(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let layers = (0..layers)
            .map(|l| {
                Ok(LayerSlots {
                    wq: s(&format!("layer{l}.wq"))?,
                    wk: s(&format!("layer{l}.wk"))?,
                    wv: s(&format!("layer{l}.wv"))?,
                    wo: s(&format!("layer{l}.wo"))?,
                    w1: s(&format!("layer{l}.ffn.w1"))?,
                    b1: s(&format!("layer{l}.ffn.b1"))?,
                    w2: s(&format!("layer{l}.ffn.w2"))?,
                    b2: s(&format!("layer{l}.ffn.b2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_w: s("patch.w")?,
            patch_b: s("patch.b")?,
            color_w1: s("color.w1")?,
            color_b1: s("color.b1")?,
            color_w2: s("color.w2")?,
            pixel_head: s("pixel_head")?,
            layers,
            mask_head: s("mask_head")?,
            box_w: s("box.w")?,
            box_b: s("box.b")?,
            conf_w: s("confidence.w")?,
            conf_b: s("confidence.b")?,
            proj: s("concept.proj")?,
            objects: s("concept.objects")?,
            parts: s("concept.parts")?,
            level: s("prompt.level")?,
            types: s("prompt.type")?,
            box_token: s("prompt.box_token")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    slots: Slots,
    /// Fixed per-config inputs, built once.
    patch_pe: Array2<f64>,
    pixel_patch: Vec<usize>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Model {
    /// Fresh parameters drawn deterministically from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let entries = config
            .layout()
            .into_iter()
            .map(|(name, (r, c))| {
                // level embeddings start equal, so the first matches fall to the
                // index tie-break and output i meets the i-th smallest level
                let std = if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") || name == "prompt.level" {
                    0.0
                } else if name == "box.w" {
                    0.1 / (r as f64).sqrt()
                } else if name.starts_with("prompt.") || name.starts_with("concept.objects") || name.starts_with("concept.parts") {
                    1.0
                } else {
                    1.0 / (r as f64).sqrt()
                };
                let value = Array2::from_shape_simple_fn((r, c), || std * std_normal.sample(&mut rng));
                (name, value)
            })
            .collect();
        Self::from_params(config, ParamStore::new(entries))
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            let v = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if v.dim() != *shape {
                return Err(Error::Dimension(format!("{name}: {:?}, expected {shape:?}", v.dim())));
            }
        }
        if !params.all_finite() {
            return Err(Error::Numeric {
                layer: "parameters".into(),
            });
        }
        let slots = Slots::resolve(&params, config.layers)?;
        Ok(Self {
            config,
            params,
            slots,
            patch_pe: patch_positions(config)?,
            pixel_patch: pixel_to_patch(config),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn prompt_tables(&self) -> PromptTables<'_> {
        PromptTables {
            level: self.params.value(self.slots.level).view(),
            types: self.params.value(self.slots.types).view(),
            box_token: self.params.value(self.slots.box_token).view(),
        }
    }

    /// One inference pass on a fresh tape.
    pub fn predict(&self, image: &Image, anchor: NormBox, kind: PromptKind) -> Result<PredictionSet> {
        let mut f = Forward::new(self);
        let enc = f.encode_image(image)?;
        let out = f.decode(&enc, anchor, kind)?;
        Ok(out.predictions(&f))
    }

    /// Predictions for several prompts of one kind on the same image.
    pub fn predict_many(&self, image: &Image, anchors: &[NormBox], kind: PromptKind) -> Result<Vec<PredictionSet>> {
        let mut f = Forward::new(self);
        let enc = f.encode_image(image)?;
        let out = f.decode_many(&enc, anchors, kind)?;
        Ok(out.iter().map(|d| d.predictions(&f)).collect())
    }
}

/// Image-side tape nodes shared by every prompt on that image.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: Var,
    keys: Vec<Var>,
    values: Vec<Var>,
    pixels: Var,
}

/// Tape nodes of one decoded prompt.
///
/// Prompts decoded together share their output nodes; this prompt owns rows
/// `offset .. offset + len()` of each.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub kind: PromptKind,
    pub anchor: NormBox,
    pub offset: usize,
    pub queries: Var,
    /// `rows × area` mask logits, pixels row-major.
    pub mask_logits: Var,
    /// `rows × 4` boxes `(cx, cy, w, h)` in `(0, 1)`.
    pub boxes: Var,
    /// `rows × (objects + 1)`; the last column is "no object".
    pub object_logits: Var,
    pub part_logits: Var,
    /// `rows × 1`
    pub confidence_logits: Var,
}

impl Decoded {
    pub fn len(&self) -> usize {
        self.kind.num_queries()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Batch rows owned by this prompt.
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn predictions(&self, f: &Forward<'_>) -> PredictionSet {
        let t = &f.tape;
        let r = self.rows();
        let grid = f.model.config.grid;
        let boxes = t
            .value(self.boxes)
            .slice(s![r.clone(), ..])
            .rows()
            .into_iter()
            .map(|b| clamp_box(b[0], b[1], b[2], b[3]))
            .collect();
        PredictionSet {
            grid,
            kind: self.kind,
            mask_logits: t.value(self.mask_logits).slice(s![r.clone(), ..]).to_owned(),
            boxes,
            object_scores: t.value(self.object_logits).slice(s![r.clone(), ..]).to_owned(),
            part_scores: t.value(self.part_logits).slice(s![r.clone(), ..]).to_owned(),
            confidence: t
                .value(self.confidence_logits)
                .slice(s![r, ..])
                .iter()
                .map(|&z| sigmoid(z))
                .collect(),
        }
    }
}

fn clamp_box(cx: f64, cy: f64, w: f64, h: f64) -> NormBox {
    let tiny = 1e-9;
    NormBox {
        cx: cx.clamp(0.0, 1.0),
        cy: cy.clamp(0.0, 1.0),
        w: w.clamp(tiny, 1.0),
        h: h.clamp(tiny, 1.0),
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax(row: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let m = row.clone().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Plain-valued outputs of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub grid: Grid,
    pub kind: PromptKind,
    pub mask_logits: Array2<f64>,
    pub boxes: Vec<NormBox>,
    pub object_scores: Array2<f64>,
    pub part_scores: Array2<f64>,
    /// Sigmoid of the confidence head.
    pub confidence: Vec<f64>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn mask(&self, i: usize) -> BitMask {
        BitMask::from_logits(self.grid, self.mask_logits.row(i).as_slice().expect("contiguous rows"))
            .expect("logit row matches grid")
    }

    pub fn masks(&self) -> Vec<BitMask> {
        (0..self.len()).map(|i| self.mask(i)).collect()
    }

    /// Softmax over object concepts and "no object"; the last entry is "no object".
    pub fn object_probs(&self, i: usize) -> Vec<f64> {
        softmax(self.object_scores.row(i).iter().copied())
    }

    pub fn part_probs(&self, i: usize) -> Vec<f64> {
        softmax(self.part_scores.row(i).iter().copied())
    }

    /// Best object concept and its probability, ignoring "no object".
    pub fn best_object(&self, i: usize) -> (usize, f64) {
        let p = self.object_probs(i);
        argmax(&p[..p.len() - 1])
    }

    pub fn best_part(&self, i: usize) -> (usize, f64) {
        argmax(&self.part_probs(i))
    }

    /// Ranking score for picking one output: the confidence head, or the
    /// best object probability for models trained with labels.
    pub fn objectness(&self, i: usize, labeled: bool) -> f64 {
        if labeled {
            self.best_object(i).1
        } else {
            self.confidence[i]
        }
    }
}

fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best })
}

/// One forward pass under construction.
pub struct Forward<'m> {
    model: &'m Model,
    pub tape: Tape,
    vars: Vec<Option<Var>>,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            tape: Tape::new(),
            vars: vec![None; model.params.len()],
        }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    fn p(&mut self, slot: usize) -> Var {
        if let Some(v) = self.vars[slot] {
            return v;
        }
        let v = self.tape.param(slot, self.model.params.value(slot));
        self.vars[slot] = Some(v);
        v
    }

    fn check(&self, v: Var, layer: impl Into<String>) -> Result<()> {
        if self.tape.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric { layer: layer.into() })
        }
    }

    /// Patch features, attention keys/values and per-pixel embeddings.
    pub fn encode_image(&mut self, image: &Image) -> Result<Encoded> {
        let cfg = self.model.config;
        if image.grid() != cfg.grid {
            return Err(Error::Dimension(format!(
                "image is {}x{}, model expects {}x{}",
                image.grid().width(),
                image.grid().height(),
                cfg.grid.width(),
                cfg.grid.height()
            )));
        }
        let sl = self.model.slots.clone();
        let (rgb, patches) = image_inputs(image, cfg.patch);
        let patches = self.tape.constant(patches);
        let rgb = self.tape.constant(rgb);

        let pw = self.p(sl.patch_w);
        let pb = self.p(sl.patch_b);
        let f = self.tape.matmul(patches, pw)?;
        let f = self.tape.add_row(f, pb)?;
        let features = self.tape.gelu(f);
        self.check(features, "patch_embed")?;

        let pe = self.tape.constant(self.model.patch_pe.clone());
        let keyed = self.tape.add(features, pe)?;
        let mut keys = Vec::with_capacity(cfg.layers);
        let mut values = Vec::with_capacity(cfg.layers);
        for ls in &sl.layers {
            let wk = self.p(ls.wk);
            let wv = self.p(ls.wv);
            keys.push(self.tape.matmul(keyed, wk)?);
            values.push(self.tape.matmul(features, wv)?);
        }

        let ph = self.p(sl.pixel_head);
        let per_patch = self.tape.matmul(features, ph)?;
        let up = self.tape.gather_rows(per_patch, Rc::new(self.model.pixel_patch.clone()))?;
        let cw1 = self.p(sl.color_w1);
        let cb1 = self.p(sl.color_b1);
        let cw2 = self.p(sl.color_w2);
        let c = self.tape.matmul(rgb, cw1)?;
        let c = self.tape.add_row(c, cb1)?;
        let c = self.tape.gelu(c);
        let c = self.tape.matmul(c, cw2)?;
        let pixels = self.tape.add(up, c)?;
        self.check(pixels, "pixel_head")?;
        Ok(Encoded {
            features,
            keys,
            values,
            pixels,
        })
    }

    /// Content queries for a prompt, built from the prompt tables on the tape.
    pub fn queries(&mut self, kind: PromptKind) -> Result<Var> {
        let sl = &self.model.slots;
        let (types, level, token) = (sl.types, sl.level, sl.box_token);
        let types = self.p(types);
        let type_vec = self.tape.row(types, kind.type_row())?;
        let base = match kind {
            PromptKind::Click => self.p(level),
            PromptKind::Box => self.p(token),
        };
        self.tape.add_row(base, type_vec)
    }

    pub fn decode(&mut self, enc: &Encoded, anchor: NormBox, kind: PromptKind) -> Result<Decoded> {
        let mut out = self.decode_many(enc, &[anchor], kind)?;
        Ok(out.pop().expect("one prompt"))
    }

    /// Decodes several prompts of one kind on the same image in one batch.
    /// Queries never attend to each other, so this equals decoding each alone.
    pub fn decode_many(&mut self, enc: &Encoded, anchors: &[NormBox], kind: PromptKind) -> Result<Vec<Decoded>> {
        if anchors.is_empty() {
            return Ok(Vec::new());
        }
        let cfg = self.model.config;
        let sl = self.model.slots.clone();
        let d = cfg.width;
        let n = kind.num_queries();
        let rows = n * anchors.len();
        let base = self.queries(kind)?;
        let queries = if anchors.len() == 1 {
            base
        } else {
            let idx: Vec<usize> = (0..rows).map(|r| r % n).collect();
            self.tape.gather_rows(base, Rc::new(idx))?
        };
        let mut pos = Array2::zeros((rows, d));
        let mut anchor_logit = Array2::zeros((rows, 4));
        for (k, a) in anchors.iter().enumerate() {
            let pe = sine_position(*a, d)?;
            let al = a.to_array().map(|v| {
                let v = v.clamp(1e-4, 1.0 - 1e-4);
                (v / (1.0 - v)).ln()
            });
            for r in k * n..(k + 1) * n {
                pos.row_mut(r).assign(&pe);
                for c in 0..4 {
                    anchor_logit[[r, c]] = al[c];
                }
            }
        }
        let pos = self.tape.constant(pos);

        let mut q = queries;
        for (l, ls) in sl.layers.iter().enumerate() {
            let wq = self.p(ls.wq);
            let wo = self.p(ls.wo);
            let qp = self.tape.add(q, pos)?;
            let qa = self.tape.matmul(qp, wq)?;
            let scores = self.tape.matmul_bt(qa, enc.keys[l])?;
            let scores = self.tape.scale(scores, 1.0 / (d as f64).sqrt());
            let attn = self.tape.softmax_rows(scores);
            let mixed = self.tape.matmul(attn, enc.values[l])?;
            let mixed = self.tape.matmul(mixed, wo)?;
            q = self.tape.add(q, mixed)?;
            self.check(q, format!("decoder.{l}.attention"))?;

            let (w1, b1, w2, b2) = (self.p(ls.w1), self.p(ls.b1), self.p(ls.w2), self.p(ls.b2));
            let h = self.tape.matmul(q, w1)?;
            let h = self.tape.add_row(h, b1)?;
            let h = self.tape.gelu(h);
            let h = self.tape.matmul(h, w2)?;
            let h = self.tape.add_row(h, b2)?;
            q = self.tape.add(q, h)?;
            self.check(q, format!("decoder.{l}.ffn"))?;
        }

        let (bw, bb) = (self.p(sl.box_w), self.p(sl.box_b));
        let off = self.tape.matmul(q, bw)?;
        let off = self.tape.add_row(off, bb)?;
        let anchor_logit = self.tape.constant(anchor_logit);
        let z = self.tape.add(off, anchor_logit)?;
        let boxes = self.tape.sigmoid(z);
        self.check(boxes, "box_head")?;

        let mh = self.p(sl.mask_head);
        let me = self.tape.matmul(q, mh)?;
        let logits = self.tape.matmul_bt(me, enc.pixels)?;
        let logits = self.tape.scale(logits, 1.0 / (d as f64).sqrt());
        let mask_logits = if cfg.gate_sharpness > 0.0 {
            let gate = self.tape.box_gate(
                boxes,
                BoxGateSpec {
                    width: cfg.grid.width(),
                    height: cfg.grid.height(),
                    sharpness: cfg.gate_sharpness,
                },
            )?;
            self.tape.add(logits, gate)?
        } else {
            logits
        };
        self.check(mask_logits, "mask_head")?;

        let (cw, cb) = (self.p(sl.conf_w), self.p(sl.conf_b));
        let conf = self.tape.matmul(q, cw)?;
        let confidence_logits = self.tape.add_row(conf, cb)?;

        let (proj, objects, parts) = (self.p(sl.proj), self.p(sl.objects), self.p(sl.parts));
        let z = self.tape.matmul(q, proj)?;
        let object_logits = self.tape.matmul_bt(z, objects)?;
        let part_logits = self.tape.matmul_bt(z, parts)?;
        self.check(object_logits, "concept_scores")?;

        Ok(anchors
            .iter()
            .enumerate()
            .map(|(k, &anchor)| Decoded {
                kind,
                anchor,
                offset: k * n,
                queries: q,
                mask_logits,
                boxes,
                object_logits,
                part_logits,
                confidence_logits,
            })
            .collect())
    }

    /// Gradients of `loss` for every parameter, zero where the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let g = self.tape.backward(loss)?;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.model.params.len()];
        for (slot, grad) in g.params() {
            match &mut grads[slot] {
                Some(acc) => *acc += grad,
                s @ None => *s = Some(grad.clone()),
            }
        }
        Ok(ParamGrads { grads })
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Option<Array2<f64>>>,
}

impl ParamGrads {
    /// `None` means the loss does not reach this parameter.
    pub fn get(&self, slot: usize) -> Option<&Array2<f64>> {
        self.grads[slot].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other · w` into `self`.
    pub fn accumulate(&mut self, other: &ParamGrads, w: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.scaled_add(w, b),
                    None => *a = Some(b * w),
                }
            }
        }
    }

    pub fn from_slots(grads: Vec<Option<Array2<f64>>>) -> Self {
        Self { grads }
    }

    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Per-pixel RGB (`area × 3`) and flattened patches (`patches × p·p·3`),
/// both centred on zero.
fn image_inputs(image: &Image, patch: usize) -> (Array2<f64>, Array2<f64>) {
    let grid = image.grid();
    let (w, h) = (grid.width(), grid.height());
    let bytes = image.bytes();
    let rgb = Array2::from_shape_fn((w * h, 3), |(i, c)| bytes[i * 3 + c] as f64 / 255.0 - 0.5);
    let (pw, ph) = (w / patch, h / patch);
    let mut patches = Array2::zeros((pw * ph, patch * patch * 3));
    for py in 0..ph {
        for px in 0..pw {
            let mut row = patches.slice_mut(s![py * pw + px, ..]);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    let i = (py * patch + dy) * w + px * patch + dx;
                    for c in 0..3 {
                        row[k] = rgb[[i, c]];
                        k += 1;
                    }
                }
            }
        }
    }
    (rgb, patches)
}

fn patch_positions(cfg: ModelConfig) -> Result<Array2<f64>> {
    let (pw, ph) = (cfg.grid.width() / cfg.patch, cfg.grid.height() / cfg.patch);
    let mut out = Array2::zeros((pw * ph, cfg.width));
    for py in 0..ph {
        for px in 0..pw {
            let b = NormBox {
                cx: (px as f64 + 0.5) / pw as f64,
                cy: (py as f64 + 0.5) / ph as f64,
                w: 1.0 / pw as f64,
                h: 1.0 / ph as f64,
            };
            out.row_mut(py * pw + px).assign(&sine_position(b, cfg.width)?);
        }
    }
    Ok(out)
}

fn pixel_to_patch(cfg: ModelConfig) -> Vec<usize> {
    let w = cfg.grid.width();
    let pw = w / cfg.patch;
    (0..cfg.grid.area())
        .map(|i| (i / w / cfg.patch) * pw + (i % w) / cfg.patch)
        .collect()
}
