//! Assignment of a click's predictions to its ground-truth levels.
//!
//! [`hungarian`] solves rectangular min-cost assignment exactly. Among
//! several optimal assignments it returns the one whose pair list, sorted by
//! prediction index, is lexicographically smallest, so ties never depend on
//! solver internals.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{box_of, giou, BitMask};
use crate::net::PredictionSet;
use crate::scene::{DataType, GranularityStack, LevelKind, StackLevel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub mask: f64,
    pub boxes: f64,
    pub class: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            mask: 2.0,
            boxes: 1.0,
            class: 1.0,
        }
    }
}

/// Costs between predictions (rows) and ground truths (columns), with the
/// unweighted mask, box and class components kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub total: Array2<f64>,
    pub mask: Array2<f64>,
    pub boxes: Array2<f64>,
    pub class: Array2<f64>,
    pub weights: CostWeights,
}

impl CostMatrix {
    /// A matrix with only totals, for solving hand-built problems.
    pub fn from_totals(total: Array2<f64>) -> Result<Self> {
        if total.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: "cost matrix".into(),
            });
        }
        let zeros = Array2::zeros(total.dim());
        Ok(Self {
            mask: zeros.clone(),
            boxes: zeros.clone(),
            class: zeros,
            total,
            weights: CostWeights::default(),
        })
    }

    pub fn rows(&self) -> usize {
        self.total.nrows()
    }

    pub fn cols(&self) -> usize {
        self.total.ncols()
    }

    /// Tab-separated breakdown, one line per entry.
    pub fn audit(&self) -> String {
        let mut out = String::from("pred\tgt\ttotal\tmask\tbox\tclass\n");
        for ((i, j), t) in self.total.indexed_iter() {
            let _ = writeln!(
                out,
                "{i}\t{j}\t{t:.6}\t{:.6}\t{:.6}\t{:.6}",
                self.mask[[i, j]],
                self.boxes[[i, j]],
                self.class[[i, j]]
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(prediction, ground truth)`, sorted by prediction.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    fn new(mut pairs: Vec<(usize, usize)>, rows: usize, cols: usize, total: &Array2<f64>) -> Self {
        pairs.sort_unstable();
        let cost = pairs.iter().map(|&(i, j)| total[[i, j]]).sum();
        let unmatched_preds = (0..rows).filter(|i| !pairs.iter().any(|p| p.0 == *i)).collect();
        let unmatched_gts = (0..cols).filter(|j| !pairs.iter().any(|p| p.1 == *j)).collect();
        Self {
            pairs,
            unmatched_preds,
            unmatched_gts,
            cost,
        }
    }

    pub fn gt_of(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| p.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "one2one")]
    OneToOne,
    #[serde(rename = "many2one")]
    ManyToOne,
    #[serde(rename = "many2many")]
    ManyToMany,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::OneToOne, Strategy::ManyToOne, Strategy::ManyToMany];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::OneToOne => "one2one",
            Strategy::ManyToOne => "many2one",
            Strategy::ManyToMany => "many2many",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (one2one, many2one, many2many)")))
    }
}

/// Minimum-cost assignment covering `min(rows, cols)` pairs.
pub fn hungarian(c: &CostMatrix) -> Result<Assignment> {
    hungarian_totals(&c.total)
}

pub fn hungarian_totals(total: &Array2<f64>) -> Result<Assignment> {
    if total.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            layer: "cost matrix".into(),
        });
    }
    let (n, m) = total.dim();
    if n == 0 || m == 0 {
        return Ok(Assignment::new(Vec::new(), n, m, total));
    }
    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..m).collect();
    let (best, _) = solve(total, &rows, &cols);
    let tol = 1e-9 * (1.0 + best.abs());
    let want = n.min(m);

    // Fix pairs greedily in lexicographic order, keeping only choices that
    // still admit an optimal completion.
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(want);
    let mut fixed_cost = 0.0;
    let mut skipped = 0usize;
    for i in 0..n {
        if fixed.len() == want {
            break;
        }
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut placed = false;
        for j in 0..m {
            if fixed.iter().any(|p| p.1 == j) {
                continue;
            }
            let rest_cols: Vec<usize> = (0..m).filter(|&c| c != j && !fixed.iter().any(|p| p.1 == c)).collect();
            if fixed.len() + 1 + rest_rows.len().min(rest_cols.len()) < want {
                continue;
            }
            let (sub, _) = solve(total, &rest_rows, &rest_cols);
            if fixed_cost + total[[i, j]] + sub <= best + tol {
                fixed.push((i, j));
                fixed_cost += total[[i, j]];
                placed = true;
                break;
            }
        }
        if !placed {
            skipped += 1;
            debug_assert!(skipped <= n - want, "row {i} could not be skipped");
        }
    }
    Ok(Assignment::new(fixed, n, m, total))
}

/// Optimal cost and pairs over a sub-matrix selected by `rows` × `cols`.
fn solve(total: &Array2<f64>, rows: &[usize], cols: &[usize]) -> (f64, Vec<(usize, usize)>) {
    if rows.is_empty() || cols.is_empty() {
        return (0.0, Vec::new());
    }
    let transpose = rows.len() > cols.len();
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let at = |a: usize, b: usize| {
        if transpose {
            total[[c[b], r[a]]]
        } else {
            total[[r[a], c[b]]]
        }
    };
    let assign = square_ish(r.len(), c.len(), at);
    let mut pairs = Vec::with_capacity(r.len());
    let mut cost = 0.0;
    for (a, b) in assign.into_iter().enumerate() {
        cost += at(a, b);
        pairs.push(if transpose { (c[b], r[a]) } else { (r[a], c[b]) });
    }
    (cost, pairs)
}

/// Potentials-based O(n²m) assignment for `n ≤ m`; returns the column of each row.
fn square_ish(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Mean binary cross-entropy on logits and soft Dice loss (smoothing 1) of
/// every prediction row against every target mask, indexed `[row][target]`.
pub fn mask_costs(logits: &Array2<f64>, targets: &[&BitMask]) -> Vec<Vec<(f64, f64)>> {
    let area = logits.ncols() as f64;
    let on: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| t.pixels().map(|p| p.y * t.grid().width() + p.x).collect())
        .collect();
    let mut probs = vec![0.0; logits.ncols()];
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut sp = 0.0;
            let mut p_sum = 0.0;
            for (&x, p) in row.iter().zip(probs.iter_mut()) {
                let e = (-x.abs()).exp();
                sp += x.max(0.0) + e.ln_1p();
                *p = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                p_sum += *p;
            }
            on.iter()
                .map(|idx| {
                    let (mut xt, mut pt) = (0.0, 0.0);
                    for &i in idx {
                        xt += row[i];
                        pt += probs[i];
                    }
                    let bce = (sp - xt) / area;
                    let dice = 1.0 - (2.0 * pt + 1.0) / (p_sum + idx.len() as f64 + 1.0);
                    (bce, dice)
                })
                .collect()
        })
        .collect()
}

fn log_softmax_at(row: ndarray::ArrayView1<'_, f64>, k: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[k] - lse
}

/// Which score table supervises a level, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassTarget {
    None,
    Object(usize),
    Part(usize),
}

/// Class supervision of one ground-truth level under a data type.
pub fn class_target(level: &StackLevel, data_type: DataType) -> Result<ClassTarget> {
    if !data_type.is_labeled() {
        return Ok(ClassTarget::None);
    }
    let concept = level.concept.ok_or_else(|| {
        Error::Data(format!("{:?} level without a concept in {:?} data", level.kind, data_type))
    })?;
    match (level.kind, data_type) {
        (LevelKind::Object, _) => Ok(ClassTarget::Object(concept)),
        (LevelKind::Part, DataType::PartLevel) => Ok(ClassTarget::Part(concept)),
        (kind, dt) => Err(Error::Data(format!("{kind:?} level cannot appear in {dt:?} data"))),
    }
}

pub fn assemble_cost(
    preds: &PredictionSet,
    gts: &[StackLevel],
    data_type: DataType,
    weights: CostWeights,
) -> Result<CostMatrix> {
    let (n, m) = (preds.len(), gts.len());
    let mut mask = Array2::zeros((n, m));
    let mut boxes = Array2::zeros((n, m));
    let mut class = Array2::zeros((n, m));
    let targets: Vec<&BitMask> = gts.iter().map(|g| &g.mask).collect();
    if targets.iter().any(|t| t.grid() != preds.grid) {
        return Err(Error::Dimension("ground truth grid differs from prediction grid".into()));
    }
    let mc = mask_costs(&preds.mask_logits, &targets);
    for (j, gt) in gts.iter().enumerate() {
        let target = class_target(gt, data_type)?;
        let gt_box = box_of(&gt.mask)?;
        for i in 0..n {
            let (bce, dice) = mc[i][j];
            mask[[i, j]] = bce + dice;
            let b = preds.boxes[i];
            let l1: f64 = b.to_array().iter().zip(gt_box.to_array()).map(|(a, c)| (a - c).abs()).sum();
            boxes[[i, j]] = l1 + 1.0 - giou(&b, &gt_box)?;
            class[[i, j]] = match target {
                ClassTarget::None => 0.0,
                ClassTarget::Object(c) => -log_softmax_at(preds.object_scores.row(i), c),
                ClassTarget::Part(c) => -log_softmax_at(preds.part_scores.row(i), c),
            };
        }
    }
    let total = &mask * weights.mask + &boxes * weights.boxes + &class * weights.class;
    if total.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            layer: "cost matrix".into(),
        });
    }
    Ok(CostMatrix {
        total,
        mask,
        boxes,
        class,
        weights,
    })
}

/// Matches one prompt's predictions to the levels of its stack.
pub fn match_click(
    preds: &PredictionSet,
    stack: &GranularityStack,
    strategy: Strategy,
    data_type: DataType,
    weights: CostWeights,
) -> Result<(CostMatrix, Assignment)> {
    if stack.levels.is_empty() {
        return Err(Error::Data("empty granularity stack".into()));
    }
    let cost = assemble_cost(preds, &stack.levels, data_type, weights)?;
    let assignment = match_costs(&cost.total, stack, strategy)?;
    Ok((cost, assignment))
}

/// Applies a strategy to precomputed totals whose columns follow `stack.levels`.
pub fn match_costs(total: &Array2<f64>, stack: &GranularityStack, strategy: Strategy) -> Result<Assignment> {
    let (n, m) = total.dim();
    if m != stack.levels.len() {
        return Err(Error::Dimension(format!("{m} cost columns for {} levels", stack.levels.len())));
    }
    let single = |j: usize| -> Result<Assignment> {
        let col = total.column(j);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: "cost matrix".into(),
            });
        }
        let best = (0..n).fold(0, |b, i| if col[i] < col[b] { i } else { b });
        Ok(Assignment::new(vec![(best, j)], n, m, total))
    };
    match strategy {
        Strategy::OneToOne => single(largest_index(stack)),
        Strategy::ManyToOne => single(smallest_index(stack)),
        Strategy::ManyToMany => {
            if m > n {
                return Err(Error::Data(format!("{m} ground-truth levels exceed {n} predictions")));
            }
            hungarian_totals(total)
        }
    }
}

fn smallest_index(stack: &GranularityStack) -> usize {
    let s = stack.smallest();
    stack.levels.iter().position(|l| std::ptr::eq(l, s)).expect("level of this stack")
}

fn largest_index(stack: &GranularityStack) -> usize {
    let s = stack.largest();
    stack.levels.iter().position(|l| std::ptr::eq(l, s)).expect("level of this stack")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{Grid, NormBox, Pixel};
    use crate::prompt::PromptKind;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(c: &Array2<f64>) -> f64 {
        fn go(c: &Array2<f64>, i: usize, used: &mut Vec<bool>, skips: usize) -> f64 {
            let (n, m) = c.dim();
            if i == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    best = best.min(c[[i, j]] + go(c, i + 1, used, skips));
                    used[j] = false;
                }
            }
            if skips > 0 {
                best = best.min(go(c, i + 1, used, skips - 1));
            }
            best
        }
        let (n, m) = c.dim();
        go(c, 0, &mut vec![false; m], n.saturating_sub(m))
    }

    fn random_int_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, m), || rng.gen_range(0..10) as f64)
    }

    #[test]
    fn two_by_two_example() {
        let c = CostMatrix::from_totals(ndarray::array![[1.0, 2.0], [3.0, 1.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.cost, 2.0);
    }

    #[test]
    fn zero_diagonal_gives_identity() {
        let c = Array2::from_shape_fn((5, 5), |(i, j)| if i == j { 0.0 } else { 1.0 + (i * j) as f64 });
        let a = hungarian_totals(&c).unwrap();
        assert_eq!(a.pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let c = ndarray::array![[1.0, f64::NAN]];
        assert!(matches!(hungarian_totals(&c), Err(Error::Numeric { .. })));
        assert!(CostMatrix::from_totals(ndarray::array![[f64::INFINITY]]).is_err());
    }

    #[test]
    fn rectangular_covers_min_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (n, m) in [(6, 3), (3, 6), (1, 4), (4, 1)] {
            let c = random_int_matrix(&mut rng, n, m);
            let a = hungarian_totals(&c).unwrap();
            assert_eq!(a.pairs.len(), n.min(m));
            assert_eq!(a.unmatched_preds.len(), n - n.min(m));
            assert_eq!(a.unmatched_gts.len(), m - n.min(m));
        }
    }

    #[test]
    fn matches_brute_force_up_to_seven() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let n = rng.gen_range(1..=7);
            let m = rng.gen_range(1..=7);
            let c = random_int_matrix(&mut rng, n, m);
            let a = hungarian_totals(&c).unwrap();
            assert_eq!(a.cost, brute_force(&c), "{c:?}");
        }
    }

    #[test]
    fn ties_pick_lowest_pairs() {
        let c = Array2::zeros((3, 3));
        assert_eq!(hungarian_totals(&c).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let c = Array2::<f64>::ones((4, 2));
        assert_eq!(hungarian_totals(&c).unwrap().pairs, vec![(0, 0), (1, 1)]);
        let c = ndarray::array![[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]];
        assert_eq!(hungarian_totals(&c).unwrap().pairs, vec![(0, 2), (1, 0)]);
    }

    proptest! {
        #[test]
        fn constant_shift_keeps_pairs(
            n in 1usize..=6, m in 1usize..=6, seed in any::<u64>(), shift in -50i32..50
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_int_matrix(&mut rng, n, m);
            let a = hungarian_totals(&c).unwrap();
            let b = hungarian_totals(&(&c + shift as f64)).unwrap();
            prop_assert_eq!(a.pairs, b.pairs);
        }

        #[test]
        fn each_index_used_once(n in 1usize..=7, m in 1usize..=7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Array2::from_shape_simple_fn((n, m), || rng.gen::<f64>());
            let a = hungarian_totals(&c).unwrap();
            let mut rows: Vec<_> = a.pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = a.pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            prop_assert_eq!(rows.len(), a.pairs.len());
            prop_assert_eq!(cols.len(), a.pairs.len());
            prop_assert!((a.cost - brute_force(&c)).abs() < 1e-9);
        }
    }

    fn stack_of(masks: &[BitMask]) -> GranularityStack {
        let levels = masks
            .iter()
            .map(|m| StackLevel {
                mask: m.clone(),
                kind: LevelKind::Group,
                concept: None,
                instance: 0,
            })
            .collect::<Vec<_>>();
        GranularityStack::collect(Pixel::new(8, 8), &levels)
    }

    fn nested(grid: Grid, depth: usize) -> Vec<BitMask> {
        (0..depth)
            .map(|d| {
                let r = 2 + 3 * d;
                BitMask::from_fn(grid, |x, y| x.abs_diff(8) <= r && y.abs_diff(8) <= r)
            })
            .collect()
    }

    fn preds_from(grid: Grid, masks: &[BitMask]) -> PredictionSet {
        let n = masks.len();
        let mask_logits = Array2::from_shape_fn((n, grid.area()), |(i, p)| if masks[i].get_index(p) { 8.0 } else { -8.0 });
        PredictionSet {
            grid,
            kind: PromptKind::Click,
            mask_logits,
            boxes: masks.iter().map(|m| box_of(m).unwrap_or(NormBox::new(0.5, 0.5, 0.1, 0.1).unwrap())).collect(),
            object_scores: Array2::zeros((n, 3)),
            part_scores: Array2::zeros((n, 2)),
            confidence: vec![0.5; n],
        }
    }

    #[test]
    fn strategies_on_depth_three_stack() {
        let grid = Grid::square(20).unwrap();
        let gts = nested(grid, 3);
        let stack = stack_of(&gts);
        // predictions 0..6: three noisy copies of nothing, then the three levels reversed
        let mut pm = vec![BitMask::empty(grid); 3];
        pm.extend(gts.iter().rev().cloned());
        let preds = preds_from(grid, &pm);
        let w = CostWeights::default();
        let (_, a) = match_click(&preds, &stack, Strategy::ManyToMany, DataType::ClassAgnostic, w).unwrap();
        assert_eq!(a.pairs, vec![(3, 2), (4, 1), (5, 0)]);
        assert_eq!(a.unmatched_preds, vec![0, 1, 2]);
        let (_, a) = match_click(&preds, &stack, Strategy::ManyToOne, DataType::ClassAgnostic, w).unwrap();
        assert_eq!(a.pairs, vec![(5, 0)]);
        let (_, a) = match_click(&preds, &stack, Strategy::OneToOne, DataType::ClassAgnostic, w).unwrap();
        assert_eq!(a.pairs, vec![(3, 2)]);
    }

    #[test]
    fn depth_one_all_strategies_agree() {
        let grid = Grid::square(20).unwrap();
        let stack = stack_of(&nested(grid, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let total = Array2::from_shape_simple_fn((6, 1), || rng.gen::<f64>());
            let pairs: Vec<_> = Strategy::ALL
                .iter()
                .map(|&s| match_costs(&total, &stack, s).unwrap().pairs)
                .collect();
            assert_eq!(pairs[0].len(), 1);
            assert!(pairs.iter().all(|p| p == &pairs[0]));
        }
    }

    #[test]
    fn many_to_many_beats_hand_picked_injections() {
        let grid = Grid::square(20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for depth in 1..=3 {
            let stack = stack_of(&nested(grid, depth));
            for _ in 0..50 {
                let total = Array2::from_shape_simple_fn((6, depth), || rng.gen::<f64>());
                let a = match_costs(&total, &stack, Strategy::ManyToMany).unwrap();
                assert_eq!(a.pairs.len(), depth);
                assert!((a.cost - brute_force(&total)).abs() < 1e-12);
                let hand: f64 = (0..depth).map(|j| total[[j, j]]).sum();
                assert!(a.cost <= hand + 1e-12);
            }
        }
    }

    #[test]
    fn too_many_levels_is_data_error() {
        let grid = Grid::square(20).unwrap();
        let stack = stack_of(&nested(grid, 3));
        let total = Array2::zeros((2, 3));
        assert!(matches!(match_costs(&total, &stack, Strategy::ManyToMany), Err(Error::Data(_))));
    }

    fn level(mask: BitMask, kind: LevelKind, concept: Option<usize>) -> StackLevel {
        StackLevel {
            mask,
            kind,
            concept,
            instance: 0,
        }
    }

    #[test]
    fn class_cost_follows_data_type() {
        let grid = Grid::square(20).unwrap();
        let gts = nested(grid, 2);
        let mut preds = preds_from(grid, &[gts[0].clone(), gts[1].clone()]);
        preds.object_scores = ndarray::array![[0.0, 2.0, 0.0], [1.0, 0.0, 0.0]];
        preds.part_scores = ndarray::array![[3.0, 0.0], [0.0, 0.0]];
        let part = level(gts[0].clone(), LevelKind::Part, Some(0));
        let obj = level(gts[1].clone(), LevelKind::Object, Some(1));
        let w = CostWeights::default();

        let c = assemble_cost(&preds, &[part.clone(), obj.clone()], DataType::ClassAgnostic, w).unwrap();
        assert!(c.class.iter().all(|&v| v == 0.0));

        let c = assemble_cost(&preds, &[part.clone(), obj.clone()], DataType::PartLevel, w).unwrap();
        let part_nll = -log_softmax_at(preds.part_scores.row(0), 0);
        let obj_nll = -log_softmax_at(preds.object_scores.row(0), 1);
        assert_eq!(c.class[[0, 0]], part_nll);
        assert_eq!(c.class[[0, 1]], obj_nll);
        assert!((part_nll - (1.0 + (-3.0f64).exp()).ln()).abs() < 1e-12);

        assert!(matches!(
            assemble_cost(&preds, &[part], DataType::ObjectLevel, w),
            Err(Error::Data(_))
        ));
        let unlabeled = level(gts[1].clone(), LevelKind::Object, None);
        assert!(matches!(
            assemble_cost(&preds, &[unlabeled], DataType::ObjectLevel, w),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn perfect_prediction_leaves_class_cost() {
        let grid = Grid::square(20).unwrap();
        let gts = nested(grid, 1);
        let mut preds = preds_from(grid, &gts);
        preds.mask_logits.mapv_inplace(|v| v * 100.0);
        let obj = level(gts[0].clone(), LevelKind::Object, Some(2));
        let c = assemble_cost(&preds, &[obj], DataType::ObjectLevel, CostWeights::default()).unwrap();
        assert!(c.mask[[0, 0]] < 0.05, "{}", c.mask[[0, 0]]);
        assert!(c.boxes[[0, 0]] < 1e-12);
        assert!((c.total[[0, 0]] - c.class[[0, 0]] - 2.0 * c.mask[[0, 0]]).abs() < 1e-12);
        assert!((c.class[[0, 0]] - 3f64.ln()).abs() < 1e-12);
        assert!(c.audit().lines().count() == 2);
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert!("greedy".parse::<Strategy>().is_err());
    }
}
