//! Click and box metrics of a model over a dataset.
//!
//! Masks are binarized at probability 0.5. Point metrics score one output
//! against the smallest ground truth containing the click.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{box_of, iou, sample_click_with, BitMask, NormBox};
use crate::matching::hungarian_totals;
use crate::net::{Forward, Model, PredictionSet};
use crate::prompt::{click_to_anchor, noise_box_with, PromptKind, DEFAULT_CLICK_EPS};
use crate::scene::{stacks_with, ConceptId, DataSample, GranularityStack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub clicks_per_scene: usize,
    pub seed: u64,
    /// Box noise scale for the noisy box metric.
    pub box_noise: f64,
    /// An output counts as confident, and joins the level-ordering count, when
    /// its confidence is at least this fraction of the click's highest one.
    pub confident: f64,
    /// Object class whose part recognition is scored.
    pub transfer_object: Option<ConceptId>,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            clicks_per_scene: 8,
            seed: 0,
            box_noise: 0.1,
            confident: 0.5,
            transfer_object: None,
            threads: 0,
        }
    }
}

/// Index of the output with the highest ranking score; the first wins ties.
pub fn select_max(preds: &PredictionSet, labeled: bool) -> usize {
    let mut best = 0;
    for i in 1..preds.len() {
        if preds.objectness(i, labeled) > preds.objectness(best, labeled) {
            best = i;
        }
    }
    best
}

pub fn point_max(preds: &PredictionSet, labeled: bool, target: &BitMask) -> Result<f64> {
    iou(&preds.mask(select_max(preds, labeled)), target)
}

pub fn point_oracle(masks: &[BitMask], target: &BitMask) -> Result<f64> {
    let mut best = 0.0f64;
    for m in masks {
        best = best.max(iou(m, target)?);
    }
    Ok(best)
}

/// Mean IoU over the pairs of a minimum `1 - IoU` assignment between outputs and levels.
pub fn all_granularity(masks: &[BitMask], stack: &GranularityStack) -> Result<f64> {
    if masks.is_empty() || stack.levels.is_empty() {
        return Err(Error::Contract("all-granularity needs outputs and levels".into()));
    }
    let mut ious = ndarray::Array2::zeros((masks.len(), stack.depth()));
    for (i, m) in masks.iter().enumerate() {
        for (j, l) in stack.levels.iter().enumerate() {
            ious[[i, j]] = iou(m, &l.mask)?;
        }
    }
    let a = hungarian_totals(&ious.mapv(|v| 1.0 - v))?;
    let sum: f64 = a.pairs.iter().map(|&(i, j)| ious[[i, j]]).sum();
    Ok(sum / a.pairs.len() as f64)
}

/// Pairs `i < j` whose areas are out of order, and the number of pairs compared.
pub fn level_order(areas: &[usize]) -> (usize, usize) {
    let mut bad = 0;
    let mut pairs = 0;
    for i in 0..areas.len() {
        for j in i + 1..areas.len() {
            pairs += 1;
            if areas[i] > areas[j] {
                bad += 1;
            }
        }
    }
    (bad, pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickScore {
    pub depth: usize,
    pub point_max: f64,
    pub point_oracle: f64,
    pub all_granularity: f64,
    pub order_violations: usize,
    pub order_pairs: usize,
}

/// Scores one click's outputs against its stack.
pub fn score_click(preds: &PredictionSet, stack: &GranularityStack, labeled: bool, confident: f64) -> Result<ClickScore> {
    let masks = preds.masks();
    let target = &stack.smallest().mask;
    let top = preds.confidence.iter().copied().fold(0.0, f64::max);
    let areas: Vec<usize> = masks
        .iter()
        .zip(&preds.confidence)
        .filter(|(m, &c)| c >= confident * top && !m.is_empty())
        .map(|(m, _)| m.count())
        .collect();
    let (order_violations, order_pairs) = level_order(&areas);
    Ok(ClickScore {
        depth: stack.depth(),
        point_max: iou(&masks[select_max(preds, labeled)], target)?,
        point_oracle: point_oracle(&masks, target)?,
        all_granularity: all_granularity(&masks, stack)?,
        order_violations,
        order_pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    pub clicks: usize,
    pub point_max_1iou: f64,
    pub point_oracle_1iou: f64,
    pub all_granularity_1iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartTransfer {
    pub object: ConceptId,
    pub clicks: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// One over the number of part concepts.
    pub chance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub n_clicks: usize,
    pub point_max_1iou: f64,
    pub point_oracle_1iou: f64,
    pub all_granularity_1iou: f64,
    /// Clicks whose stack has at least two levels.
    pub deep_clicks: usize,
    pub all_granularity_deep_1iou: f64,
    pub by_depth: Vec<DepthRow>,
    pub box_prompts: usize,
    pub box_1iou: f64,
    pub box_noisy_1iou: f64,
    pub level_order_violations: usize,
    pub level_order_pairs: usize,
    pub level_order_rate: f64,
    pub part_transfer: Option<PartTransfer>,
}

#[derive(Default)]
struct SampleScores {
    clicks: Vec<ClickScore>,
    boxes: Vec<(f64, f64)>,
    transfer: (usize, usize),
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn anchor_at(sample: &DataSample, p: crate::mask::Pixel) -> Result<NormBox> {
    let (x, y) = sample.grid.center_of(p);
    click_to_anchor(x, y, DEFAULT_CLICK_EPS)
}

fn score_sample(model: &Model, labeled: bool, config: &EvalConfig, sample: &DataSample, index: usize) -> Result<SampleScores> {
    let mut rng = sample_rng(config.seed, index);
    let mut out = SampleScores::default();

    let stacks = stacks_with(sample, config.clicks_per_scene, &mut rng);
    let mut anchors = stacks
        .iter()
        .map(|st| anchor_at(sample, st.click))
        .collect::<Result<Vec<_>>>()?;
    let mut parts: Vec<(&BitMask, ConceptId)> = Vec::new();
    if let Some(obj) = config.transfer_object {
        for inst in sample.instances.iter().filter(|i| i.object_concept == Some(obj)) {
            for p in &inst.parts {
                if let Some(c) = p.concept {
                    anchors.push(anchor_at(sample, sample_click_with(&p.mask, &mut rng)?)?);
                    parts.push((&p.mask, c));
                }
            }
        }
    }
    let mut f = Forward::new(model);
    let enc = f.encode_image(&sample.image)?;
    let decoded = f.decode_many(&enc, &anchors, PromptKind::Click)?;
    let preds: Vec<PredictionSet> = decoded.iter().map(|d| d.predictions(&f)).collect();
    for (st, p) in stacks.iter().zip(&preds) {
        out.clicks.push(score_click(p, st, labeled, config.confident)?);
    }
    for ((mask, concept), p) in parts.iter().zip(&preds[stacks.len()..]) {
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..p.len() {
            let v = iou(&p.mask(i), mask)?;
            if v > best.1 {
                best = (i, v);
            }
        }
        out.transfer.1 += 1;
        if p.best_part(best.0).0 == *concept {
            out.transfer.0 += 1;
        }
    }

    let objects: Vec<&BitMask> = sample.instances.iter().map(|i| &i.object_mask).collect();
    let mut boxes = Vec::with_capacity(2 * objects.len());
    for m in &objects {
        boxes.push(box_of(m)?);
    }
    for i in 0..objects.len() {
        let noisy = noise_box_with(boxes[i], config.box_noise, &mut rng)?;
        boxes.push(noisy);
    }
    let decoded = f.decode_many(&enc, &boxes, PromptKind::Box)?;
    let preds: Vec<PredictionSet> = decoded.iter().map(|d| d.predictions(&f)).collect();
    for (i, m) in objects.iter().enumerate() {
        let clean = iou(&preds[i].mask(0), m)?;
        let noisy = iou(&preds[objects.len() + i].mask(0), m)?;
        out.boxes.push((clean, noisy));
    }
    Ok(out)
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Evaluates `model` on every sample. Results do not depend on the thread count.
pub fn evaluate(model: &Model, labeled: bool, samples: &[DataSample], config: &EvalConfig) -> Result<EvalReport> {
    if config.clicks_per_scene == 0 {
        return Err(Error::Config("clicks_per_scene must be positive".into()));
    }
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let threads = match config.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(samples.len());
    let chunk = samples.len().div_ceil(threads);
    let scores: Vec<SampleScores> = if threads == 1 {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| score_sample(model, labeled, config, s, i))
            .collect::<Result<_>>()?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    scope.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(k, s)| score_sample(model, labeled, config, s, c * chunk + k))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(samples.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    Ok(reduce(&scores, config, model))
}

fn reduce(scores: &[SampleScores], config: &EvalConfig, model: &Model) -> EvalReport {
    let clicks: Vec<&ClickScore> = scores.iter().flat_map(|s| &s.clicks).collect();
    let boxes: Vec<&(f64, f64)> = scores.iter().flat_map(|s| &s.boxes).collect();
    let n = clicks.len();
    let sum = |f: fn(&ClickScore) -> f64, keep: &dyn Fn(&ClickScore) -> bool| -> (f64, usize) {
        clicks
            .iter()
            .filter(|c| keep(c))
            .fold((0.0, 0), |(s, k), c| (s + f(c), k + 1))
    };
    let all = |_: &ClickScore| true;
    let deep = |c: &ClickScore| c.depth >= 2;
    let (gd, nd) = sum(|c| c.all_granularity, &deep);

    let max_depth = clicks.iter().map(|c| c.depth).max().unwrap_or(0);
    let by_depth = (1..=max_depth)
        .filter_map(|d| {
            let at = move |c: &ClickScore| c.depth == d;
            let (m, k) = sum(|c| c.point_max, &at);
            if k == 0 {
                return None;
            }
            Some(DepthRow {
                depth: d,
                clicks: k,
                point_max_1iou: m / k as f64,
                point_oracle_1iou: sum(|c| c.point_oracle, &at).0 / k as f64,
                all_granularity_1iou: sum(|c| c.all_granularity, &at).0 / k as f64,
            })
        })
        .collect();

    let violations: usize = clicks.iter().map(|c| c.order_violations).sum();
    let pairs: usize = clicks.iter().map(|c| c.order_pairs).sum();
    let part_transfer = config.transfer_object.map(|object| {
        let (correct, total) = scores
            .iter()
            .fold((0, 0), |(a, b), s| (a + s.transfer.0, b + s.transfer.1));
        PartTransfer {
            object,
            clicks: total,
            correct,
            accuracy: mean(correct as f64, total),
            chance: 1.0 / model.config().num_parts as f64,
        }
    });
    EvalReport {
        scenes: scores.len(),
        n_clicks: n,
        point_max_1iou: mean(sum(|c| c.point_max, &all).0, n),
        point_oracle_1iou: mean(sum(|c| c.point_oracle, &all).0, n),
        all_granularity_1iou: mean(sum(|c| c.all_granularity, &all).0, n),
        deep_clicks: nd,
        all_granularity_deep_1iou: mean(gd, nd),
        by_depth,
        box_prompts: boxes.len(),
        box_1iou: mean(boxes.iter().map(|b| b.0).sum(), boxes.len()),
        box_noisy_1iou: mean(boxes.iter().map(|b| b.1).sum(), boxes.len()),
        level_order_violations: violations,
        level_order_pairs: pairs,
        level_order_rate: mean(violations as f64, pairs),
        part_transfer,
    }
}

impl EvalReport {
    /// `key=value` lines, one metric per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("scenes", self.scenes.to_string());
        kv("clicks", self.n_clicks.to_string());
        kv("point_max_1iou", format!("{:.6}", self.point_max_1iou));
        kv("point_oracle_1iou", format!("{:.6}", self.point_oracle_1iou));
        kv("all_granularity_1iou", format!("{:.6}", self.all_granularity_1iou));
        kv("deep_clicks", self.deep_clicks.to_string());
        kv("all_granularity_deep_1iou", format!("{:.6}", self.all_granularity_deep_1iou));
        for r in &self.by_depth {
            let d = r.depth;
            kv(&format!("depth{d}.clicks"), r.clicks.to_string());
            kv(&format!("depth{d}.point_max_1iou"), format!("{:.6}", r.point_max_1iou));
            kv(&format!("depth{d}.point_oracle_1iou"), format!("{:.6}", r.point_oracle_1iou));
            kv(&format!("depth{d}.all_granularity_1iou"), format!("{:.6}", r.all_granularity_1iou));
        }
        kv("box_prompts", self.box_prompts.to_string());
        kv("box_1iou", format!("{:.6}", self.box_1iou));
        kv("box_noisy_1iou", format!("{:.6}", self.box_noisy_1iou));
        kv("level_order_violations", self.level_order_violations.to_string());
        kv("level_order_pairs", self.level_order_pairs.to_string());
        kv("level_order_rate", format!("{:.6}", self.level_order_rate));
        if let Some(t) = &self.part_transfer {
            kv("part_transfer_object", t.object.to_string());
            kv("part_transfer_clicks", t.clicks.to_string());
            kv("part_transfer_accuracy", format!("{:.6}", t.accuracy));
            kv("part_transfer_chance", format!("{:.6}", t.chance));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} scenes, {} clicks ({} with depth >= 2)", self.scenes, self.n_clicks, self.deep_clicks);
        let _ = writeln!(s, "{:<10} {:>7} {:>9} {:>9} {:>9}", "depth", "clicks", "max", "oracle", "all-gran");
        for r in &self.by_depth {
            let _ = writeln!(
                s,
                "{:<10} {:>7} {:>9.4} {:>9.4} {:>9.4}",
                r.depth, r.clicks, r.point_max_1iou, r.point_oracle_1iou, r.all_granularity_1iou
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>9.4} {:>9.4} {:>9.4}",
            "all", self.n_clicks, self.point_max_1iou, self.point_oracle_1iou, self.all_granularity_1iou
        );
        let _ = writeln!(s, "all-granularity on depth >= 2: {:.4}", self.all_granularity_deep_1iou);
        let _ = writeln!(
            s,
            "box 1-IoU: {:.4} clean, {:.4} noisy over {} boxes",
            self.box_1iou, self.box_noisy_1iou, self.box_prompts
        );
        let _ = writeln!(
            s,
            "level ordering: {} of {} pairs out of order ({:.4})",
            self.level_order_violations, self.level_order_pairs, self.level_order_rate
        );
        if let Some(t) = &self.part_transfer {
            let _ = writeln!(
                s,
                "part transfer on object {}: {}/{} correct ({:.4}, chance {:.4})",
                t.object, t.correct, t.clicks, t.accuracy, t.chance
            );
        }
        s
    }
}
