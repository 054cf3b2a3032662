//! Synthetic scenes with nested part ⊂ object ⊂ group masks.
//!
//! Each scene is rendered to an RGB raster from concept colours before the
//! annotation regime of its [`DataType`] erases whatever that regime does not
//! carry. Clicks are then clustered into [`GranularityStack`]s holding every
//! retained mask under the click.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{sample_click_with, BitMask, Grid, Pixel};

pub type ConceptId = usize;

/// Deepest nesting a scene can carry: part, object, group.
pub const MAX_SCENE_DEPTH: usize = 3;

/// Part slots as fractions of the object's bounding box, `(x0, y0, x1, y1)`.
/// Parts split an object into a top band and up to two bottom halves.
const MAX_PART_SLOTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptVocab {
    object_names: Vec<String>,
    part_names: Vec<String>,
    /// `part_of[object][slot]` is the part concept occupying that slot.
    part_of: Vec<Vec<ConceptId>>,
}

impl ConceptVocab {
    pub fn new(
        object_names: Vec<String>,
        part_names: Vec<String>,
        part_of: Vec<Vec<ConceptId>>,
    ) -> Result<Self> {
        let v = Self {
            object_names,
            part_names,
            part_of,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self.object_names.iter().chain(&self.part_names) {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate concept name {name:?}")));
            }
        }
        if self.object_names.is_empty() {
            return Err(Error::Config("vocabulary has no object concepts".into()));
        }
        if self.part_of.len() != self.object_names.len() {
            return Err(Error::Config("part_of needs one slot list per object".into()));
        }
        let mut owners = vec![HashSet::new(); self.part_names.len()];
        for (obj, slots) in self.part_of.iter().enumerate() {
            if slots.len() > MAX_PART_SLOTS {
                return Err(Error::Config(format!(
                    "object {obj} has {} part slots, at most {} supported",
                    slots.len(),
                    MAX_PART_SLOTS
                )));
            }
            for &p in slots {
                let owner = owners
                    .get_mut(p)
                    .ok_or_else(|| Error::Config(format!("unknown part concept {p}")))?;
                owner.insert(obj);
            }
        }
        if let Some(p) = owners.iter().position(HashSet::is_empty) {
            return Err(Error::Config(format!(
                "part concept {:?} is not attached to any object",
                self.part_names[p]
            )));
        }
        if !owners.iter().any(|o| o.len() >= 2) {
            return Err(Error::Config("no part concept is shared by two objects".into()));
        }
        Ok(())
    }

    pub fn num_objects(&self) -> usize {
        self.object_names.len()
    }

    pub fn num_parts(&self) -> usize {
        self.part_names.len()
    }

    pub fn object_name(&self, id: ConceptId) -> &str {
        &self.object_names[id]
    }

    pub fn part_name(&self, id: ConceptId) -> &str {
        &self.part_names[id]
    }

    pub fn object_id(&self, name: &str) -> Option<ConceptId> {
        self.object_names.iter().position(|n| n == name)
    }

    pub fn parts_of(&self, object: ConceptId) -> &[ConceptId] {
        &self.part_of[object]
    }

    /// Objects that carry part `part` in some slot.
    pub fn owners_of(&self, part: ConceptId) -> Vec<ConceptId> {
        (0..self.num_objects())
            .filter(|&o| self.part_of[o].contains(&part))
            .collect()
    }
}

impl Default for ConceptVocab {
    fn default() -> Self {
        let objects = ["cat", "dog", "horse", "car", "bus"];
        let parts = ["head", "torso", "tail", "leg", "wheel", "window", "door"];
        Self::new(
            objects.iter().map(|s| s.to_string()).collect(),
            parts.iter().map(|s| s.to_string()).collect(),
            vec![
                vec![0, 1, 2],
                vec![0, 1, 2],
                vec![0, 3, 1],
                vec![4, 5, 6],
                vec![5, 4, 6],
            ],
        )
        .expect("built-in vocabulary is valid")
    }
}

/// Annotation regime of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataType {
    /// Masks at every level, no concept ids.
    ClassAgnostic,
    /// Object masks with object ids only.
    ObjectLevel,
    /// Object and part masks with both id kinds.
    PartLevel,
}

impl DataType {
    pub const ALL: [DataType; 3] = [
        DataType::ClassAgnostic,
        DataType::ObjectLevel,
        DataType::PartLevel,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_labeled(self) -> bool {
        self != DataType::ClassAgnostic
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartAnnotation {
    pub concept: Option<ConceptId>,
    #[serde(rename = "rle")]
    pub mask: BitMask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneInstance {
    #[serde(rename = "object_rle")]
    pub object_mask: BitMask,
    pub object_concept: Option<ConceptId>,
    pub parts: Vec<PartAnnotation>,
    #[serde(rename = "group_rle", default, skip_serializing_if = "Option::is_none")]
    pub group_mask: Option<BitMask>,
}

impl SceneInstance {
    pub fn validate(&self, grid: Grid) -> Result<()> {
        let masks = std::iter::once(&self.object_mask)
            .chain(self.parts.iter().map(|p| &p.mask))
            .chain(self.group_mask.iter());
        for m in masks {
            if m.grid() != grid {
                return Err(Error::Data("instance mask on a foreign grid".into()));
            }
            if m.is_empty() {
                return Err(Error::Data("instance carries an empty mask".into()));
            }
        }
        for (i, p) in self.parts.iter().enumerate() {
            if !p.mask.is_subset_of(&self.object_mask)? {
                return Err(Error::Data(format!("part {i} leaves its object")));
            }
            for q in &self.parts[i + 1..] {
                if !p.mask.is_disjoint(&q.mask)? {
                    return Err(Error::Data("overlapping parts".into()));
                }
            }
        }
        if let Some(g) = &self.group_mask {
            if !self.object_mask.is_subset_of(g)? {
                return Err(Error::Data("object leaves its group".into()));
            }
        }
        Ok(())
    }
}

/// Packed 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    grid: Grid,
    rgb: Vec<u8>,
}

impl Image {
    pub fn new(grid: Grid, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != grid.area() * 3 {
            return Err(Error::Dimension(format!(
                "{} bytes for a {}x{} RGB image",
                rgb.len(),
                grid.width(),
                grid.height()
            )));
        }
        Ok(Self { grid, rgb })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn bytes(&self) -> &[u8] {
        &self.rgb
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.grid.width() + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Binary PPM (`P6`).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.grid.width(), self.grid.height()).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSample {
    pub grid: Grid,
    pub data_type: DataType,
    pub instances: Vec<SceneInstance>,
    pub seed: u64,
    pub image: Image,
}

impl DataSample {
    /// Every retained mask with its level metadata, in instance order.
    pub fn annotated_masks(&self) -> Vec<StackLevel> {
        let mut out = Vec::new();
        for (i, inst) in self.instances.iter().enumerate() {
            for p in &inst.parts {
                out.push(StackLevel {
                    mask: p.mask.clone(),
                    kind: LevelKind::Part,
                    concept: p.concept,
                    instance: i,
                });
            }
            out.push(StackLevel {
                mask: inst.object_mask.clone(),
                kind: LevelKind::Object,
                concept: inst.object_concept,
                instance: i,
            });
            if let Some(g) = &inst.group_mask {
                out.push(StackLevel {
                    mask: g.clone(),
                    kind: LevelKind::Group,
                    concept: None,
                    instance: i,
                });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.grid() != self.grid {
            return Err(Error::Data("image grid differs from sample grid".into()));
        }
        if self.instances.is_empty() {
            return Err(Error::Data("sample has no instances".into()));
        }
        for inst in &self.instances {
            inst.validate(self.grid)?;
            let has_ids = inst.object_concept.is_some() || inst.parts.iter().any(|p| p.concept.is_some());
            match self.data_type {
                DataType::ClassAgnostic if has_ids => {
                    return Err(Error::Data("class-agnostic sample carries concept ids".into()))
                }
                DataType::ObjectLevel if !inst.parts.is_empty() || inst.group_mask.is_some() => {
                    return Err(Error::Data("object-level sample carries non-object masks".into()))
                }
                DataType::ObjectLevel | DataType::PartLevel if inst.object_concept.is_none() => {
                    return Err(Error::Data("labeled sample misses an object id".into()))
                }
                DataType::PartLevel
                    if inst.group_mask.is_some() || inst.parts.iter().any(|p| p.concept.is_none()) =>
                {
                    return Err(Error::Data("part-level annotation incomplete".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelKind {
    Part,
    Object,
    Group,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackLevel {
    pub mask: BitMask,
    pub kind: LevelKind,
    pub concept: Option<ConceptId>,
    /// Index of the source instance within the sample.
    pub instance: usize,
}

/// All retained ground-truth masks under one click, smallest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GranularityStack {
    pub click: Pixel,
    pub levels: Vec<StackLevel>,
}

impl GranularityStack {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Stack of all masks in `candidates` containing `click`, sorted by area with duplicates dropped.
    pub fn collect(click: Pixel, candidates: &[StackLevel]) -> Self {
        let mut levels: Vec<StackLevel> = candidates
            .iter()
            .filter(|l| l.mask.contains(click))
            .cloned()
            .collect();
        levels.sort_by_key(|l| (l.mask.count(), l.kind));
        levels.dedup_by(|b, a| a.mask == b.mask);
        Self { click, levels }
    }

    pub fn single(click: Pixel, level: StackLevel) -> Self {
        Self {
            click,
            levels: vec![level],
        }
    }

    pub fn smallest(&self) -> &StackLevel {
        &self.levels[0]
    }

    pub fn largest(&self) -> &StackLevel {
        self.levels.last().expect("stacks are nonempty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid: Grid,
    pub data_type: DataType,
    /// Inclusive range of object instances per scene.
    pub instances: (usize, usize),
    /// Mask levels per instance: 1 objects only, 2 adds parts, 3 adds groups.
    pub max_depth: usize,
    pub part_prob: f64,
    pub group_prob: f64,
    /// Inclusive range of object bounding-box sides in pixels.
    pub object_size: (usize, usize),
    /// Object class whose part labels are dropped from part-level samples.
    pub withhold_parts_for: Option<ConceptId>,
    pub vocab: ConceptVocab,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: Grid::default(),
            data_type: DataType::ClassAgnostic,
            instances: (1, 3),
            max_depth: 3,
            part_prob: 0.9,
            group_prob: 0.5,
            object_size: (12, 20),
            withhold_parts_for: None,
            vocab: ConceptVocab::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        let (lo, hi) = self.instances;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("instance range {lo}..={hi}")));
        }
        if !(1..=MAX_SCENE_DEPTH).contains(&self.max_depth) {
            return Err(Error::Config(format!("max_depth {} not in 1..=3", self.max_depth)));
        }
        let (smin, smax) = self.object_size;
        if smin < 4 || smin > smax {
            return Err(Error::Config(format!("object size range {smin}..={smax}")));
        }
        if !(0.0..=1.0).contains(&self.part_prob) || !(0.0..=1.0).contains(&self.group_prob) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if let Some(w) = self.withhold_parts_for {
            if w >= self.vocab.num_objects() {
                return Err(Error::Config(format!("withheld object {w} not in vocabulary")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect, margin: usize) -> bool {
        self.x0 < o.x1 + margin && o.x0 < self.x1 + margin && self.y0 < o.y1 + margin && o.y0 < self.y1 + margin
    }

    fn mask(&self, grid: Grid) -> BitMask {
        BitMask::from_fn(grid, |x, y| x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1)
    }
}

struct RawInstance {
    concept: ConceptId,
    object: BitMask,
    parts: Vec<(ConceptId, BitMask)>,
    group: Option<usize>,
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Deterministic scene for `(config, seed)`.
pub fn generate(config: &SceneConfig, seed: u64) -> Result<DataSample> {
    config.validate()?;
    let grid = config.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(config.instances.0..=config.instances.1);

    let mut occupied: Vec<Rect> = Vec::new();
    let mut raw: Vec<RawInstance> = Vec::new();
    let mut groups: Vec<(BitMask, [f64; 3])> = Vec::new();
    let mut remaining = n;
    while remaining > 0 {
        // a group pairs two neighbouring objects on a shared backdrop; its
        // mask is the union of the members, so every group pixel is also an
        // object pixel
        let as_group = config.max_depth >= 3 && remaining >= 2 && rng.gen_bool(config.group_prob);
        let members = if as_group { 2 } else { 1 };
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let sizes: Vec<(usize, usize)> = (0..members)
                .map(|_| {
                    (
                        rng.gen_range(config.object_size.0..=config.object_size.1),
                        rng.gen_range(config.object_size.0..=config.object_size.1),
                    )
                })
                .collect();
            let pad = if as_group { 2 } else { 0 };
            let cw = sizes.iter().map(|s| s.0).sum::<usize>() + pad * (members + 1);
            let ch = sizes.iter().map(|s| s.1).max().unwrap_or(0) + 2 * pad;
            if cw + 2 > grid.width() || ch + 2 > grid.height() {
                continue;
            }
            let x0 = rng.gen_range(1..=grid.width() - cw - 1);
            let y0 = rng.gen_range(1..=grid.height() - ch - 1);
            let cluster = Rect {
                x0,
                y0,
                x1: x0 + cw,
                y1: y0 + ch,
            };
            if occupied.iter().any(|r| r.overlaps(&cluster, 2)) {
                continue;
            }
            occupied.push(cluster);
            let group = as_group.then(|| {
                let tint = [
                    rng.gen_range(0.55..0.8),
                    rng.gen_range(0.55..0.8),
                    rng.gen_range(0.55..0.8),
                ];
                groups.push((cluster.mask(grid), tint));
                groups.len() - 1
            });
            let mut cx = x0 + pad;
            for &(w, h) in &sizes {
                let oy = y0 + pad + rng.gen_range(0..=(ch - 2 * pad - h));
                let bbox = Rect {
                    x0: cx,
                    y0: oy,
                    x1: cx + w,
                    y1: oy + h,
                };
                cx += w + pad;
                raw.push(make_object(config, grid, bbox, group, &mut rng));
            }
            placed = true;
            break;
        }
        if !placed && !raw.is_empty() {
            // the grid is full; keep the scene with the instances that fit
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place {remaining} more instance(s) on a {}x{} grid",
                grid.width(),
                grid.height()
            )));
        }
        remaining -= members;
    }

    let image = render(config, grid, &raw, &groups, &mut rng)?;
    let mut unions = vec![BitMask::empty(grid); groups.len()];
    for r in &raw {
        if let Some(g) = r.group {
            unions[g] = unions[g].union(&r.object)?;
        }
    }
    let instances = raw
        .into_iter()
        .map(|r| retain(config, r, &unions))
        .collect();
    let sample = DataSample {
        grid,
        data_type: config.data_type,
        instances,
        seed,
        image,
    };
    sample.validate()?;
    Ok(sample)
}

fn make_object(config: &SceneConfig, grid: Grid, bbox: Rect, group: Option<usize>, rng: &mut ChaCha8Rng) -> RawInstance {
    let concept = rng.gen_range(0..config.vocab.num_objects());
    let ellipse = rng.gen_bool(0.5);
    let (bw, bh) = ((bbox.x1 - bbox.x0) as f64, (bbox.y1 - bbox.y0) as f64);
    let inside = |x: usize, y: usize| -> bool {
        if x < bbox.x0 || x >= bbox.x1 || y < bbox.y0 || y >= bbox.y1 {
            return false;
        }
        if !ellipse {
            return true;
        }
        let u = (x as f64 + 0.5 - bbox.x0 as f64) / bw * 2.0 - 1.0;
        let v = (y as f64 + 0.5 - bbox.y0 as f64) / bh * 2.0 - 1.0;
        u * u + v * v <= 1.0
    };
    let object = BitMask::from_fn(grid, inside);

    // parts tile the object: a top band, and the rest split left and right
    let mut parts = Vec::new();
    let slots = config.vocab.parts_of(concept);
    if config.max_depth >= 2 && slots.len() >= 2 && rng.gen_bool(config.part_prob) {
        let cut_y = rng.gen_range(0.35..0.5);
        let cut_x = rng.gen_range(0.4..0.6);
        for (slot, &pc) in slots.iter().enumerate() {
            let part = BitMask::from_fn(grid, |x, y| {
                let u = (x as f64 + 0.5 - bbox.x0 as f64) / bw;
                let v = (y as f64 + 0.5 - bbox.y0 as f64) / bh;
                let region = match (slot, slots.len()) {
                    (0, _) => v < cut_y,
                    (1, 2) => v >= cut_y,
                    (1, _) => v >= cut_y && u >= cut_x,
                    _ => v >= cut_y && u < cut_x,
                };
                region && inside(x, y)
            });
            if part.count() >= 4 {
                parts.push((pc, part));
            }
        }
    }
    RawInstance {
        concept,
        object,
        parts,
        group,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Display colour of an object concept.
pub fn object_color(vocab: &ConceptVocab, id: ConceptId) -> [f64; 3] {
    hsv(id as f64 / vocab.num_objects() as f64, 0.65, 0.85)
}

/// Display colour of a part concept; the same for every owning object.
pub fn part_color(vocab: &ConceptVocab, id: ConceptId) -> [f64; 3] {
    hsv((id as f64 + 0.5) / vocab.num_parts() as f64, 0.9, 0.5)
}

fn render(
    config: &SceneConfig,
    grid: Grid,
    raw: &[RawInstance],
    groups: &[(BitMask, [f64; 3])],
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let mut color = vec![[0.12, 0.12, 0.14]; grid.area()];
    let w = grid.width();
    for (mask, tint) in groups {
        for p in mask.pixels() {
            color[p.y * w + p.x] = *tint;
        }
    }
    for inst in raw {
        let base = object_color(&config.vocab, inst.concept);
        for p in inst.object.pixels() {
            color[p.y * w + p.x] = base;
        }
        for (concept, mask) in &inst.parts {
            let pc = part_color(&config.vocab, *concept);
            let mixed = [
                0.75 * pc[0] + 0.25 * base[0],
                0.75 * pc[1] + 0.25 * base[1],
                0.75 * pc[2] + 0.25 * base[2],
            ];
            for p in mask.pixels() {
                color[p.y * w + p.x] = mixed;
            }
        }
    }
    let rgb = color
        .iter()
        .flat_map(|c| *c)
        .map(|v| {
            let noisy: f64 = v + rng.gen_range(-0.04..0.04);
            (noisy.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Image::new(grid, rgb)
}

fn retain(config: &SceneConfig, r: RawInstance, groups: &[BitMask]) -> SceneInstance {
    let group_mask = r.group.map(|g| groups[g].clone());
    match config.data_type {
        DataType::ClassAgnostic => SceneInstance {
            object_mask: r.object,
            object_concept: None,
            parts: r
                .parts
                .into_iter()
                .map(|(_, mask)| PartAnnotation { concept: None, mask })
                .collect(),
            group_mask,
        },
        DataType::ObjectLevel => SceneInstance {
            object_mask: r.object,
            object_concept: Some(r.concept),
            parts: Vec::new(),
            group_mask: None,
        },
        DataType::PartLevel => {
            let withheld = config.withhold_parts_for == Some(r.concept);
            SceneInstance {
                object_mask: r.object,
                object_concept: Some(r.concept),
                parts: if withheld {
                    Vec::new()
                } else {
                    r.parts
                        .into_iter()
                        .map(|(c, mask)| PartAnnotation {
                            concept: Some(c),
                            mask,
                        })
                        .collect()
                },
                group_mask: None,
            }
        }
    }
}

/// Samples `clicks_per_scene` clicks, each uniformly inside a uniformly chosen
/// retained mask, and clusters every retained mask under each click.
pub fn stacks_for(sample: &DataSample, clicks_per_scene: usize, seed: u64) -> Vec<GranularityStack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    stacks_with(sample, clicks_per_scene, &mut rng)
}

pub fn stacks_with<R: Rng>(sample: &DataSample, clicks: usize, rng: &mut R) -> Vec<GranularityStack> {
    let candidates = sample.annotated_masks();
    if candidates.is_empty() {
        return Vec::new();
    }
    (0..clicks)
        .map(|_| {
            let source = &candidates[rng.gen_range(0..candidates.len())];
            let click = sample_click_with(&source.mask, rng).expect("retained masks are nonempty");
            GranularityStack::collect(click, &candidates)
        })
        .collect()
}
