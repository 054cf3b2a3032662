//! The work behind each subcommand, free of argument parsing and printing.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use granu::checkpoint::Checkpoint;
use granu::dataset::Dataset;
use granu::eval::{evaluate, EvalConfig, EvalReport};
use granu::matching::Strategy;
use granu::scene::{generate, ConceptId, ConceptVocab, DataSample, DataType, SceneConfig};
use granu::trainer::{train_with, write_log_csv, LogRow, TrainConfig, TrainOutcome};

use crate::cli::log_enabled;
use crate::error::{CliError, CliResult};

/// Scene seeds at and above this index are reserved for held-out scenes.
pub const HELDOUT_OFFSET: u64 = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub count: usize,
    pub seed: u64,
    /// Fractions of class-agnostic, object-level and part-level scenes.
    pub mixture: [f64; 3],
    pub withhold_parts_for: Option<ConceptId>,
    pub scene: SceneConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 300,
            seed: 0,
            mixture: [1.0, 0.0, 0.0],
            withhold_parts_for: None,
            scene: SceneConfig::default(),
        }
    }
}

/// Seed of scene `index` in the family `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_shl(32).wrapping_add(index)
}

/// Splits `count` by `mixture` with largest remainders; ties go to the earlier type.
pub fn type_counts(count: usize, mixture: &[f64; 3]) -> CliResult<[usize; 3]> {
    check_mixture(mixture)?;
    let exact: Vec<f64> = mixture.iter().map(|w| w * count as f64).collect();
    let mut out = [0usize; 3];
    for (o, e) in out.iter_mut().zip(&exact) {
        *o = e.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = count - out.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if mixture[i] > 0.0 {
            out[i] += 1;
            left -= 1;
        }
    }
    Ok(out)
}

pub fn check_mixture(m: &[f64; 3]) -> CliResult<()> {
    if m.iter().any(|w| !w.is_finite() || *w < 0.0) || (m.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(granu::Error::Config(format!("mixture {m:?} must be nonnegative and sum to 1")).into());
    }
    Ok(())
}

/// Scenes come in data-type blocks; scene `i` uses `scene_seed(seed, i)`.
pub fn gen_dataset(config: &GenConfig) -> CliResult<Dataset> {
    if config.count as u64 >= HELDOUT_OFFSET {
        return Err(granu::Error::Config(format!("at most {} scenes per dataset", HELDOUT_OFFSET - 1)).into());
    }
    let counts = type_counts(config.count, &config.mixture)?;
    let mut samples = Vec::with_capacity(config.count);
    for t in DataType::ALL {
        let scene = SceneConfig {
            data_type: t,
            withhold_parts_for: config.withhold_parts_for,
            ..config.scene.clone()
        };
        for _ in 0..counts[t.index()] {
            samples.push(generate(&scene, scene_seed(config.seed, samples.len() as u64))?);
        }
    }
    Ok(Dataset::new(config.scene.vocab.clone(), samples))
}

/// Held-out scenes of the given type, disjoint from every generated dataset with the same seed.
pub fn heldout_scenes(seed: u64, count: usize, data_type: DataType) -> CliResult<Vec<DataSample>> {
    let scene = SceneConfig {
        data_type,
        ..SceneConfig::default()
    };
    (0..count as u64)
        .map(|i| Ok(generate(&scene, scene_seed(seed, HELDOUT_OFFSET + i))?))
        .collect()
}

/// Default training configuration with mixture weight moved off data types the dataset lacks.
pub fn train_config_for(data: &Dataset) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    let present: Vec<bool> = DataType::ALL
        .iter()
        .map(|&t| data.of_type(t).next().is_some())
        .collect();
    let kept: f64 = (0..3).filter(|&i| present[i]).map(|i| cfg.mixture[i]).sum();
    if kept > 0.0 {
        for i in 0..3 {
            cfg.mixture[i] = if present[i] { cfg.mixture[i] / kept } else { 0.0 };
        }
    }
    if !present[DataType::ClassAgnostic.index()] {
        cfg.stage1_fraction = 0.0;
    }
    cfg
}

pub fn train(config: &TrainConfig, data: &Dataset) -> CliResult<TrainOutcome> {
    let verbose = log_enabled();
    let start = Instant::now();
    let out = train_with(config, data, |row: &LogRow| {
        if verbose && (row.step % 100 == 0 || row.step + 1 == config.steps) {
            eprintln!(
                "step {:>5} lr {:.1e} loss {:.4} ({:.1}s)",
                row.step,
                row.lr,
                row.report.total,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    Ok(out)
}

/// Trains and writes the checkpoint and its CSV log next to each other.
pub fn train_to(config: &TrainConfig, data: &Dataset, checkpoint: &Path, log: &Path) -> CliResult<Checkpoint> {
    let out = train(config, data)?;
    out.checkpoint.save(checkpoint)?;
    write_log_csv(&out.log, std::io::BufWriter::new(std::fs::File::create(log)?))?;
    Ok(out.checkpoint)
}

pub fn eval_checkpoint(ckpt: &Checkpoint, data: &Dataset, config: &EvalConfig) -> CliResult<EvalReport> {
    if ckpt.vocab != data.vocab {
        return Err(granu::Error::Contract("checkpoint and dataset vocabularies differ".into()).into());
    }
    Ok(evaluate(&ckpt.model, ckpt.labeled, &data.samples, config)?)
}

#[derive(Debug)]
pub struct AblationArm {
    pub strategy: Strategy,
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct Ablation {
    pub arms: Vec<AblationArm>,
}

impl Ablation {
    pub fn arm(&self, s: Strategy) -> Option<&AblationArm> {
        self.arms.iter().find(|a| a.strategy == s)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<28}", "metric (1-IoU)");
        for a in &self.arms {
            let _ = write!(s, " {:>10}", a.strategy.name());
        }
        s.push('\n');
        let rows: [(&str, fn(&EvalReport) -> f64); 5] = [
            ("all granularity", |r| r.all_granularity_1iou),
            ("all granularity, depth>=2", |r| r.all_granularity_deep_1iou),
            ("point oracle", |r| r.point_oracle_1iou),
            ("point max", |r| r.point_max_1iou),
            ("level-order violations", |r| r.level_order_rate),
        ];
        for (name, f) in rows {
            let _ = write!(s, "{name:<28}");
            for a in &self.arms {
                let _ = write!(s, " {:>10.4}", f(&a.report));
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<28}", "train seconds");
        for a in &self.arms {
            let _ = write!(s, " {:>10.1}", a.seconds);
        }
        s.push('\n');
        s
    }
}

/// Trains one model per strategy on the same data, seed and steps, and scores each on `heldout`.
pub fn ablate(
    base: &TrainConfig,
    data: &Dataset,
    heldout: &[DataSample],
    eval: &EvalConfig,
    strategies: &[Strategy],
) -> CliResult<Ablation> {
    let mut arms = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let config = TrainConfig {
            strategy,
            ..base.clone()
        };
        let start = Instant::now();
        let out = train(&config, data)?;
        let seconds = start.elapsed().as_secs_f64();
        let report = evaluate(&out.checkpoint.model, out.checkpoint.labeled, heldout, eval)?;
        arms.push(AblationArm {
            strategy,
            checkpoint: out.checkpoint,
            report,
            seconds,
        });
    }
    Ok(Ablation { arms })
}

pub fn object_by_name(vocab: &ConceptVocab, name: &str) -> CliResult<ConceptId> {
    vocab
        .object_id(name)
        .or_else(|| name.parse().ok().filter(|&i| i < vocab.num_objects()))
        .ok_or_else(|| CliError::Usage(format!("unknown object concept {name:?}")))
}
