//! Click and box prompts as decoder queries.
//!
//! Both prompt kinds become an anchor box. A click is a tiny box around the
//! clicked point and is expanded into `K` content queries, one per
//! granularity level, each the sum of that level's embedding and the click
//! type embedding. A box carries a single general content token plus the box
//! type embedding. The anchor itself enters the decoder through a sine
//! position encoding.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::NormBox;

/// Granularity levels per click.
pub const NUM_LEVELS: usize = 6;

/// Side of the anchor box standing in for a click, as a fraction of the image.
pub const DEFAULT_CLICK_EPS: f64 = 0.005;

/// Highest frequency of the sine encoding, in cycles per unit of image extent.
const SINE_MAX_CYCLES: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Click,
    Box,
}

impl PromptKind {
    /// Row of the type embedding table.
    pub fn type_row(self) -> usize {
        match self {
            PromptKind::Click => 0,
            PromptKind::Box => 1,
        }
    }

    /// Content queries issued per prompt.
    pub fn num_queries(self) -> usize {
        match self {
            PromptKind::Click => NUM_LEVELS,
            PromptKind::Box => 1,
        }
    }
}

/// Borrowed view of the learnable prompt embeddings.
#[derive(Debug, Clone, Copy)]
pub struct PromptTables<'a> {
    /// `NUM_LEVELS × D`, one row per granularity level.
    pub level: ArrayView2<'a, f64>,
    /// `2 × D`: click row then box row.
    pub types: ArrayView2<'a, f64>,
    /// `1 × D` general content token for box prompts.
    pub box_token: ArrayView2<'a, f64>,
}

impl PromptTables<'_> {
    pub fn width(&self) -> usize {
        self.level.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        if self.level.nrows() != NUM_LEVELS {
            return Err(Error::Dimension(format!(
                "level table has {} rows, expected {NUM_LEVELS}",
                self.level.nrows()
            )));
        }
        if self.types.dim() != (2, d) || self.box_token.dim() != (1, d) {
            return Err(Error::Dimension("prompt tables disagree on width".into()));
        }
        let finite = self
            .level
            .iter()
            .chain(self.types.iter())
            .chain(self.box_token.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric {
                layer: "prompt tables".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptQuerySet {
    /// One row per content query.
    pub content: Array2<f64>,
    pub position: Array1<f64>,
    pub anchor: NormBox,
    pub kind: PromptKind,
}

/// Anchor box of width and height `eps` centred on a normalized click.
pub fn click_to_anchor(x: f64, y: f64, eps: f64) -> Result<NormBox> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("click x = {x} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::Domain(format!("click y = {y} outside [0, 1]")));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Domain(format!("anchor size {eps} outside (0, 1]")));
    }
    NormBox::new(x, y, eps, eps)
}

pub fn assemble_queries(anchor: NormBox, kind: PromptKind, tables: &PromptTables<'_>) -> Result<PromptQuerySet> {
    tables.validate()?;
    let type_vec = tables.types.row(kind.type_row());
    let content = match kind {
        PromptKind::Click => &tables.level + &type_vec,
        PromptKind::Box => &tables.box_token + &type_vec,
    };
    Ok(PromptQuerySet {
        content,
        position: sine_position(anchor, tables.width())?,
        anchor,
        kind,
    })
}

/// Multi-frequency sine encoding of `(cx, cy, w, h)`.
///
/// Each coordinate gets `width / 4` features laid out as `sin, cos` pairs
/// over a geometric frequency ladder from 32 cycles per image down to one.
pub fn sine_position(anchor: NormBox, width: usize) -> Result<Array1<f64>> {
    if width == 0 || width % 8 != 0 {
        return Err(Error::Config(format!("position width {width} is not a positive multiple of 8")));
    }
    let per_coord = width / 4;
    let pairs = per_coord / 2;
    let mut out = Array1::zeros(width);
    for (c, value) in anchor.to_array().into_iter().enumerate() {
        for f in 0..pairs {
            let step = if pairs > 1 { f as f64 / (pairs - 1) as f64 } else { 1.0 };
            let freq = std::f64::consts::TAU * SINE_MAX_CYCLES.powf(1.0 - step);
            let base = c * per_coord + 2 * f;
            out[base] = (value * freq).sin();
            out[base + 1] = (value * freq).cos();
        }
    }
    Ok(out)
}

/// Ground-truth box perturbed as a user might draw it: centre shifted by up
/// to `scale` of the box size, each side rescaled within `1 ± scale`, then
/// clipped to the unit square.
pub fn noise_box(gt: NormBox, scale: f64, seed: u64) -> Result<NormBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    noise_box_with(gt, scale, &mut rng)
}

pub fn noise_box_with<R: Rng>(gt: NormBox, scale: f64, rng: &mut R) -> Result<NormBox> {
    if !(0.0..=0.5).contains(&scale) {
        return Err(Error::Domain(format!("noise scale {scale} outside [0, 0.5]")));
    }
    if scale == 0.0 {
        return Ok(gt);
    }
    let cx = gt.cx + rng.gen_range(-scale..=scale) * gt.w;
    let cy = gt.cy + rng.gen_range(-scale..=scale) * gt.h;
    let w = gt.w * rng.gen_range(1.0 - scale..=1.0 + scale);
    let h = gt.h * rng.gen_range(1.0 - scale..=1.0 + scale);
    let min_side = 1e-3;
    let x0 = (cx - w / 2.0).clamp(0.0, 1.0 - min_side);
    let y0 = (cy - h / 2.0).clamp(0.0, 1.0 - min_side);
    let x1 = (cx + w / 2.0).clamp(x0 + min_side, 1.0);
    let y1 = (cy + h / 2.0).clamp(y0 + min_side, 1.0);
    NormBox::from_corners(x0, y0, x1, y1)
}
