//! Raster masks, run-length encoding, box geometry and click sampling.
//!
//! Everything here is immutable once built. Pixel `(x, y)` addresses column
//! `x` and row `y`; [`BitMask`] packs bits row-major while [`RleMask`] runs
//! column-major, starting with a run of zeros.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported raster area.
pub const MAX_AREA: usize = 1 << 20;

const EDGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    width: usize,
    height: usize,
}

impl Grid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("grid {width}x{height} has a zero side")));
        }
        if width.saturating_mul(height) > MAX_AREA {
            return Err(Error::Dimension(format!(
                "grid {width}x{height} exceeds {MAX_AREA} pixels"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// Normalized coordinates of a pixel center.
    pub fn center_of(&self, p: Pixel) -> (f64, f64) {
        (
            (p.x as f64 + 0.5) / self.width as f64,
            (p.y as f64 + 0.5) / self.height as f64,
        )
    }

    /// Pixel containing a normalized point; points on the far edge map to the last pixel.
    pub fn pixel_at(&self, x: f64, y: f64) -> Pixel {
        let px = ((x * self.width as f64).floor().max(0.0) as usize).min(self.width - 1);
        let py = ((y * self.height as f64).floor().max(0.0) as usize).min(self.height - 1);
        Pixel { x: px, y: py }
    }
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub x: usize,
    pub y: usize,
}

impl Pixel {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

/// Binary mask on a [`Grid`], packed 64 pixels per word in row-major order.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    grid: Grid,
    words: Vec<u64>,
}

impl BitMask {
    pub fn empty(grid: Grid) -> Self {
        Self {
            grid,
            words: vec![0; grid.area().div_ceil(64)],
        }
    }

    pub fn full(grid: Grid) -> Self {
        Self::from_fn(grid, |_, _| true)
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(grid);
        for y in 0..grid.height {
            for x in 0..grid.width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// Builds a mask from row-major booleans.
    pub fn from_bools(grid: Grid, bits: &[bool]) -> Result<Self> {
        if bits.len() != grid.area() {
            return Err(Error::Dimension(format!(
                "{} bits for a grid of {} pixels",
                bits.len(),
                grid.area()
            )));
        }
        let w = grid.width;
        Ok(Self::from_fn(grid, |x, y| bits[y * w + x]))
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * self.grid.width + x;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.x < self.grid.width && p.y < self.grid.height && self.get(p.x, p.y)
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        let i = y * self.grid.width + x;
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn check_grid(&self, other: &BitMask) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Dimension(format!(
                "masks on {}x{} and {}x{} grids",
                self.grid.width, self.grid.height, other.grid.width, other.grid.height
            )));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &BitMask) -> Result<usize> {
        self.check_grid(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn union_count(&self, other: &BitMask) -> Result<usize> {
        self.check_grid(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum())
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BitMask) -> Result<bool> {
        self.check_grid(other)?;
        Ok(self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0))
    }

    pub fn is_disjoint(&self, other: &BitMask) -> Result<bool> {
        Ok(self.intersection_count(other)? == 0)
    }

    pub fn union(&self, other: &BitMask) -> Result<BitMask> {
        self.check_grid(other)?;
        Ok(BitMask {
            grid: self.grid,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a | b).collect(),
        })
    }

    pub fn intersect(&self, other: &BitMask) -> Result<BitMask> {
        self.check_grid(other)?;
        Ok(BitMask {
            grid: self.grid,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect(),
        })
    }

    /// Set pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        let w = self.grid.width;
        (0..self.grid.area())
            .filter(move |&i| self.get_index(i))
            .map(move |i| Pixel::new(i % w, i / w))
    }

    /// Row-major 0/1 values as floats, handy for loss targets.
    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.grid.area())
            .map(|i| if self.get_index(i) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Thresholds row-major logits at zero (probability 0.5).
    pub fn from_logits(grid: Grid, logits: &[f64]) -> Result<Self> {
        if logits.len() != grid.area() {
            return Err(Error::Dimension(format!(
                "{} logits for a grid of {} pixels",
                logits.len(),
                grid.area()
            )));
        }
        let w = grid.width;
        Ok(Self::from_fn(grid, |x, y| logits[y * w + x] > 0.0))
    }

    pub fn to_rle(&self) -> RleMask {
        RleMask::encode(self)
    }
}

impl fmt::Debug for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BitMask({}x{}, {} set)",
            self.grid.width,
            self.grid.height,
            self.count()
        )
    }
}

/// Column-major run-length encoding; runs alternate 0s and 1s starting with 0s.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    grid: Grid,
    runs: Vec<usize>,
}

impl RleMask {
    pub fn new(grid: Grid, runs: Vec<usize>) -> Result<Self> {
        let total: usize = runs.iter().sum();
        if total != grid.area() {
            return Err(Error::format(
                0,
                format!("runs sum to {total}, grid area is {}", grid.area()),
            ));
        }
        if runs.is_empty() {
            return Err(Error::format(0, "empty run list"));
        }
        if runs.iter().skip(1).any(|&r| r == 0) {
            return Err(Error::format(0, "zero-length interior run"));
        }
        Ok(Self { grid, runs })
    }

    pub fn encode(mask: &BitMask) -> Self {
        let grid = mask.grid;
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for x in 0..grid.width {
            for y in 0..grid.height {
                let v = mask.get(x, y);
                if v != current {
                    runs.push(len);
                    len = 0;
                    current = v;
                }
                len += 1;
            }
        }
        runs.push(len);
        Self { grid, runs }
    }

    pub fn decode(&self) -> BitMask {
        let h = self.grid.height;
        let mut mask = BitMask::empty(self.grid);
        let mut idx = 0usize;
        for (i, &run) in self.runs.iter().enumerate() {
            if i % 2 == 1 {
                for j in idx..idx + run {
                    mask.set(j / h, j % h, true);
                }
            }
            idx += run;
        }
        mask
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn runs(&self) -> &[usize] {
        &self.runs
    }
}

impl fmt::Display for RleMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.grid.width, self.grid.height)?;
        for r in &self.runs {
            write!(f, " {r}")?;
        }
        Ok(())
    }
}

impl FromStr for RleMask {
    type Err = Error;

    /// Parses the `"W H r0 r1 ..."` text form.
    fn from_str(s: &str) -> Result<Self> {
        let mut nums = s.split_ascii_whitespace().map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::format(0, format!("bad integer {t:?} in RLE")))
        });
        let w = nums.next().ok_or_else(|| Error::format(0, "missing RLE width"))??;
        let h = nums.next().ok_or_else(|| Error::format(0, "missing RLE height"))??;
        let grid = Grid::new(w, h).map_err(|e| Error::format(0, e.to_string()))?;
        let runs = nums.collect::<Result<Vec<_>>>()?;
        RleMask::new(grid, runs)
    }
}

impl Serialize for BitMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_rle().to_string())
    }
}

impl<'de> Deserialize<'de> for BitMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse::<RleMask>()
            .map(|r| r.decode())
            .map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned box in normalized image coordinates, center plus size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let ok_center = (0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy);
        let ok_size = w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0;
        if !ok_center || !ok_size {
            return Err(Error::Geometry(format!("invalid box ({cx}, {cy}, {w}, {h})")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// `(x0, y0, x1, y1)`.
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

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Pixels whose cell overlaps the box (clipped to the unit square).
    /// A box smaller than a pixel still covers the pixel it sits in.
    pub fn rasterize(&self, grid: Grid) -> BitMask {
        let (x0, y0, x1, y1) = self.corners();
        let (x0, y0) = (x0.max(0.0), y0.max(0.0));
        let (x1, y1) = (x1.min(1.0), y1.min(1.0));
        let (w, h) = (grid.width as f64, grid.height as f64);
        BitMask::from_fn(grid, |x, y| {
            let (px0, px1) = (x as f64 / w, (x + 1) as f64 / w);
            let (py0, py1) = (y as f64 / h, (y + 1) as f64 / h);
            x0 < px1 - EDGE_TOL && x1 > px0 + EDGE_TOL && y0 < py1 - EDGE_TOL && y1 > py0 + EDGE_TOL
        })
    }
}

pub fn iou(a: &BitMask, b: &BitMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.union_count(b)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn dice(a: &BitMask, b: &BitMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Tight bounding box of the set pixels, normalized by the grid size.
pub fn box_of(m: &BitMask) -> Result<NormBox> {
    let grid = m.grid;
    let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0, 0);
    for p in m.pixels() {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    if xmin == usize::MAX {
        return Err(Error::EmptyGeometry("box of an empty mask"));
    }
    let (w, h) = (grid.width as f64, grid.height as f64);
    NormBox::from_corners(
        xmin as f64 / w,
        ymin as f64 / h,
        (xmax + 1) as f64 / w,
        (ymax + 1) as f64 / h,
    )
}

fn check_box(b: &NormBox) -> Result<()> {
    if !(b.w > 0.0 && b.h > 0.0) || !b.cx.is_finite() || !b.cy.is_finite() {
        return Err(Error::Geometry(format!(
            "zero-area box ({}, {}, {}, {})",
            b.cx, b.cy, b.w, b.h
        )));
    }
    Ok(())
}

pub fn box_iou(a: &NormBox, b: &NormBox) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    Ok(inter / (a.area() + b.area() - inter))
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered by the union.
pub fn giou(a: &NormBox, b: &NormBox) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclose = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    Ok(inter / union - (enclose - union) / enclose)
}

/// Uniformly random set pixel of `m`, reproducible per seed.
pub fn sample_click(m: &BitMask, seed: u64) -> Result<Pixel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_click_with(m, &mut rng)
}

pub fn sample_click_with<R: Rng>(m: &BitMask, rng: &mut R) -> Result<Pixel> {
    let n = m.count();
    if n == 0 {
        return Err(Error::EmptyGeometry("click sampled from an empty mask"));
    }
    let k = rng.gen_range(0..n);
    Ok(m.pixels().nth(k).expect("k < popcount"))
}
