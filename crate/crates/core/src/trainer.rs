//! The optimization loop.
//!
//! Training runs in two stages: first on class-agnostic scenes only, then on
//! a weighted mixture of all three data types. Every step draws its scenes,
//! clicks and box noise from a generator seeded by `(seed, step)`, so a run
//! is a pure function of its configuration and data.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mask::box_of;
use crate::matching::{match_click, CostWeights, Strategy};
use crate::net::{Forward, Model, ModelConfig, ParamGrads};
use crate::objective::{gating, loss_for_box_prompt, loss_for_click, GtCount, LossReport, LossWeights};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::prompt::{click_to_anchor, noise_box_with, PromptKind, DEFAULT_CLICK_EPS};
use crate::scene::{stacks_with, DataSample, DataType, GranularityStack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Leading fraction of steps drawn from class-agnostic data only.
    pub stage1_fraction: f64,
    pub clicks_per_step: usize,
    pub clicks_per_scene: usize,
    pub box_prompts_per_scene: usize,
    pub lr: f64,
    /// Fractions of `steps` after which the learning rate drops tenfold.
    pub milestones: [f64; 2],
    pub strategy: Strategy,
    /// Sampling weights for class-agnostic, object-level and part-level data.
    pub mixture: [f64; 3],
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub cost: CostWeights,
    pub box_noise: f64,
    /// Weight of the box-prompt loss relative to the click loss.
    pub box_weight: f64,
    pub model: Option<ModelConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            stage1_fraction: 0.5,
            clicks_per_step: 8,
            clicks_per_scene: 4,
            box_prompts_per_scene: 1,
            lr: 2e-3,
            milestones: [0.9, 0.95],
            strategy: Strategy::ManyToMany,
            mixture: [0.5, 0.25, 0.25],
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            cost: CostWeights::default(),
            box_noise: 0.2,
            box_weight: 1.0,
            model: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.mixture.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad(format!("mixture weights {:?} must be nonnegative", self.mixture));
        }
        if (self.mixture.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("mixture weights {:?} must sum to 1", self.mixture));
        }
        let [a, b] = self.milestones;
        if !(0.0 < a && a <= b && b < 1.0) {
            return bad(format!("milestones {:?} must be increasing within (0, 1)", self.milestones));
        }
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            return bad(format!("stage-1 fraction {}", self.stage1_fraction));
        }
        if self.clicks_per_scene == 0 || self.clicks_per_step == 0 || self.clicks_per_step % self.clicks_per_scene != 0 {
            return bad(format!(
                "clicks per step {} must be a positive multiple of clicks per scene {}",
                self.clicks_per_step, self.clicks_per_scene
            ));
        }
        if !(0.0..=0.5).contains(&self.box_noise) {
            return bad(format!("box noise {}", self.box_noise));
        }
        if !(self.box_weight.is_finite() && self.box_weight >= 0.0) {
            return bad(format!("box weight {}", self.box_weight));
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        Ok(())
    }

    pub fn stage1_steps(&self) -> usize {
        (self.steps as f64 * self.stage1_fraction).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.steps.max(1) as f64;
        let drops = self.milestones.iter().filter(|&&m| frac >= m).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

pub fn write_log_csv<W: Write>(rows: &[LogRow], mut w: W) -> Result<()> {
    writeln!(w, "step,lr,{}", LossReport::CSV_COLUMNS.join(","))?;
    for r in rows {
        let vals: Vec<String> = r.report.values().iter().map(|v| format!("{v:.8}")).collect();
        writeln!(w, "{},{:e},{}", r.step, r.lr, vals.join(","))?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Scenes drawn per data type.
    pub drawn: [usize; 3],
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        source: Error,
        last_good: Box<Checkpoint>,
    },
}

/// Everything one step needs besides the model.
struct Pools<'a> {
    by_type: [Vec<&'a DataSample>; 3],
}

impl<'a> Pools<'a> {
    fn new(data: &'a Dataset) -> Self {
        let mut by_type: [Vec<&DataSample>; 3] = Default::default();
        for s in &data.samples {
            by_type[s.data_type.index()].push(s);
        }
        Self { by_type }
    }
}

pub fn train(config: &TrainConfig, data: &Dataset) -> std::result::Result<TrainOutcome, TrainError> {
    train_with(config, data, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(
    config: &TrainConfig,
    data: &Dataset,
    mut on_step: impl FnMut(&LogRow),
) -> std::result::Result<TrainOutcome, TrainError> {
    config.validate()?;
    let pools = Pools::new(data);
    let stage1 = config.stage1_steps();
    if stage1 > 0 && pools.by_type[0].is_empty() {
        return Err(Error::Data("stage 1 needs class-agnostic samples".into()).into());
    }
    if config.steps > stage1 {
        for t in DataType::ALL {
            if config.mixture[t.index()] > 0.0 && pools.by_type[t.index()].is_empty() {
                return Err(Error::Data(format!("mixture draws {t:?} data but the dataset has none")).into());
            }
        }
    }
    let model_config = config.model.unwrap_or_else(|| ModelConfig::for_vocab(&data.vocab));
    if model_config.num_objects != data.vocab.num_objects() || model_config.num_parts != data.vocab.num_parts() {
        return Err(Error::Config("model concept counts differ from the dataset vocabulary".into()).into());
    }
    let mut model = Model::init(model_config, config.seed)?;
    let mut adam = AdamState::new(model.params());
    let mut log = Vec::with_capacity(config.steps);
    let mut drawn = [0usize; 3];
    let mut labeled = false;

    for step in 0..config.steps {
        let lr = config.lr_at(step);
        let result = run_step(&model, config, &pools, step, step < stage1, &mut drawn, &mut labeled);
        let (report, grads) = match result {
            Ok(ok) => ok,
            Err(e) => {
                let mut last_good = snapshot(&model, data, config, step, labeled, &log);
                last_good.metrics.insert("diverged_at".into(), step as f64);
                return Err(TrainError::Diverged {
                    step,
                    source: e,
                    last_good: Box::new(last_good),
                });
            }
        };
        adam_step(model.params_mut(), &grads, &mut adam, lr, &config.adam);
        let row = LogRow { step, lr, report };
        on_step(&row);
        log.push(row);
    }
    let checkpoint = snapshot(&model, data, config, config.steps, labeled, &log);
    Ok(TrainOutcome { checkpoint, log, drawn })
}

fn snapshot(model: &Model, data: &Dataset, config: &TrainConfig, step: usize, labeled: bool, log: &[LogRow]) -> Checkpoint {
    let mut c = Checkpoint::new(model.clone(), data.vocab.clone());
    c.train_config = Some(config.clone());
    c.step = step as u64;
    c.labeled = labeled;
    let tail = &log[log.len().saturating_sub(50)..];
    if !tail.is_empty() {
        let mean = tail.iter().map(|r| r.report.total).sum::<f64>() / tail.len() as f64;
        c.metrics.insert("final_loss".into(), mean);
    }
    c.metrics.insert("parameters".into(), model.num_parameters() as f64);
    c
}

/// Deterministic generator for one step.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

fn pick_type(mixture: &[f64; 3], rng: &mut ChaCha8Rng) -> DataType {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for t in DataType::ALL {
        acc += mixture[t.index()];
        if u < acc && mixture[t.index()] > 0.0 {
            return t;
        }
    }
    // rounding left u above the cumulative sum: take the last type with weight
    *DataType::ALL
        .iter()
        .rev()
        .find(|t| mixture[t.index()] > 0.0)
        .expect("mixture sums to 1")
}

/// The ground truth a click is matched against: every level under it, or a
/// single random level when the data type matches one GT per click.
pub fn matching_stack(stack: GranularityStack, data_type: DataType, rng: &mut impl Rng) -> GranularityStack {
    match gating(data_type).gt_in_matching {
        GtCount::Many => stack,
        GtCount::One => {
            let k = rng.gen_range(0..stack.depth());
            let click = stack.click;
            GranularityStack::single(click, stack.levels.into_iter().nth(k).expect("index in range"))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    model: &Model,
    config: &TrainConfig,
    pools: &Pools<'_>,
    step: usize,
    stage1: bool,
    drawn: &mut [usize; 3],
    labeled: &mut bool,
) -> Result<(LossReport, ParamGrads)> {
    let mut rng = step_rng(config.seed, step);
    let scenes = config.clicks_per_step / config.clicks_per_scene;
    let n_clicks = config.clicks_per_step as f64;
    let n_boxes = (scenes * config.box_prompts_per_scene) as f64;
    let grid = model.config().grid;

    let mut f = Forward::new(model);
    let mut total = f.tape.scalar_const(0.0);
    let mut report = LossReport::default();
    for _ in 0..scenes {
        let dt = if stage1 {
            DataType::ClassAgnostic
        } else {
            pick_type(&config.mixture, &mut rng)
        };
        drawn[dt.index()] += 1;
        *labeled |= dt.is_labeled();
        let pool = &pools.by_type[dt.index()];
        let sample = pool[rng.gen_range(0..pool.len())];
        let enc = f.encode_image(&sample.image)?;

        let stacks: Vec<_> = stacks_with(sample, config.clicks_per_scene, &mut rng)
            .into_iter()
            .map(|st| matching_stack(st, dt, &mut rng))
            .collect();
        let anchors = stacks
            .iter()
            .map(|st| {
                let (x, y) = grid.center_of(st.click);
                click_to_anchor(x, y, DEFAULT_CLICK_EPS)
            })
            .collect::<Result<Vec<_>>>()?;
        let decs = f.decode_many(&enc, &anchors, PromptKind::Click)?;
        for (stack, dec) in stacks.iter().zip(&decs) {
            let preds = dec.predictions(&f);
            let (_, assignment) = match_click(&preds, stack, config.strategy, dt, config.cost)?;
            let loss = loss_for_click(&mut f, dec, &stack.levels, &assignment, dt, &config.loss)?;
            let scaled = f.tape.scale(loss.total, 1.0 / n_clicks);
            total = f.tape.add(total, scaled)?;
            report.add_scaled(&loss.report, 1.0 / n_clicks);
        }

        if config.box_prompts_per_scene > 0 {
            let levels = sample.annotated_masks();
            let mut gts = Vec::with_capacity(config.box_prompts_per_scene);
            let mut anchors = Vec::with_capacity(config.box_prompts_per_scene);
            for _ in 0..config.box_prompts_per_scene {
                let gt = &levels[rng.gen_range(0..levels.len())];
                anchors.push(noise_box_with(box_of(&gt.mask)?, config.box_noise, &mut rng)?);
                gts.push(gt);
            }
            let decs = f.decode_many(&enc, &anchors, PromptKind::Box)?;
            for (gt, dec) in gts.into_iter().zip(&decs) {
                let loss = loss_for_box_prompt(&mut f, dec, gt, dt, &config.loss)?;
                let w = config.box_weight / n_boxes;
                let scaled = f.tape.scale(loss.total, w);
                total = f.tape.add(total, scaled)?;
                report.add_scaled(&loss.report, w);
            }
        }
    }
    let value = f.tape.scalar(total);
    if !value.is_finite() {
        return Err(Error::Numeric { layer: "loss".into() });
    }
    let grads = f.backward(total)?;
    if !grads.all_finite() {
        return Err(Error::Numeric { layer: "gradients".into() });
    }
    Ok((report, grads))
}
