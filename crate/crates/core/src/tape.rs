//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value. [`Tape::backward`] walks the nodes in reverse, accumulating the
//! adjoint of each input, and returns the gradient of every node. Parameter
//! leaves remember their slot in the owning parameter store so gradients can
//! be handed straight to the optimizer.

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a (n×m) + row (1×m)`
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Min(Var, Var),
    Max(Var, Var),
    Ln(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    /// Output row `i` copies input row `index[i]`.
    GatherRows(Var, Rc<Vec<usize>>),
    Col(Var, usize),
    /// `out[i] = a[index[i]]` as an `n×1` column.
    Entries(Var, Rc<Vec<(usize, usize)>>),
    /// Elementwise `softplus(x) - x·t`.
    BceLogits(Var, Rc<Array2<f64>>),
    BoxGate(Var, BoxGateSpec),
}

/// Soft box indicator on a pixel grid; see [`Tape::box_gate`].
#[derive(Debug, Clone, Copy)]
pub struct BoxGateSpec {
    pub width: usize,
    pub height: usize,
    /// Logit slope per pixel of distance to the box edge.
    pub sharpness: f64,
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// `(parameter slot, gradient)` for every parameter leaf, in recording order.
    /// A parameter recorded twice appears twice.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Array2<f64>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(slot, node)| self.grads[node].as_ref().map(|g| (slot, g)))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; much cheaper than the libm routine and within
/// a few ulps away from zero.
#[inline]
fn tanh(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        // 1 - 2/(e+1) cancels badly near zero
        let u2 = u * u;
        return u * (1.0 - u2 / 3.0 + 2.0 * u2 * u2 / 15.0);
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn shape_err(op: &str, a: &Array2<f64>, b: &Array2<f64>) -> Error {
    Error::Dimension(format!("{op}: {:?} vs {:?}", a.dim(), b.dim()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn param(&mut self, slot: usize, value: &Array2<f64>) -> Var {
        self.push(value.clone(), Op::Param(slot))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.nrows() {
            return Err(shape_err("matmul", x, y));
        }
        let v = x.dot(y);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.ncols() {
            return Err(shape_err("matmul_bt", x, y));
        }
        let v = x.dot(&y.t());
        Ok(self.push(v, Op::MatMulBt(a, b)))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dim() != y.dim() {
            return Err(shape_err(op, x, y));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a) / self.value(b);
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.nrows() != 1 || r.ncols() != x.ncols() {
            return Err(shape_err("add_row", x, r));
        }
        let v = x + r;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::Shift(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("min", a, b)?;
        let v = Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.min(y));
        Ok(self.push(v, Op::Min(a, b)))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("max", a, b)?;
        let v = Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.max(y));
        Ok(self.push(v, Op::Max(a, b)))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row -= lse;
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.nrows()) {
            return Err(Error::Dimension(format!("gather row {bad} of {}", x.nrows())));
        }
        let v = x.select(Axis(0), &index);
        Ok(self.push(v, Op::GatherRows(a, index)))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather_rows(a, Rc::new(vec![i]))
    }

    pub fn col(&mut self, a: Var, j: usize) -> Result<Var> {
        let x = self.value(a);
        if j >= x.ncols() {
            return Err(Error::Dimension(format!("column {j} of {}", x.ncols())));
        }
        let v = x.column(j).to_owned().insert_axis(Axis(1));
        Ok(self.push(v, Op::Col(a, j)))
    }

    pub fn entries(&mut self, a: Var, index: Rc<Vec<(usize, usize)>>) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dim();
        if index.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(Error::Dimension(format!("entry outside {r}x{c}")));
        }
        let v = Array2::from_shape_fn((index.len(), 1), |(k, _)| x[index[k]]);
        Ok(self.push(v, Op::Entries(a, index)))
    }

    pub fn bce_logits(&mut self, a: Var, target: Rc<Array2<f64>>) -> Result<Var> {
        let x = self.value(a);
        if x.dim() != target.dim() {
            return Err(shape_err("bce_logits", x, &target));
        }
        let v = Zip::from(x)
            .and(&*target)
            .map_collect(|&x, &t| softplus(x) - x * t);
        Ok(self.push(v, Op::BceLogits(a, target)))
    }

    /// Per-row soft indicator of a `(cx, cy, w, h)` box over the pixels of a
    /// grid, in log space: `Σ_edges log σ(s · signed distance in pixels)`.
    /// Output is `rows × (width·height)`, pixels row-major.
    pub fn box_gate(&mut self, boxes: Var, spec: BoxGateSpec) -> Result<Var> {
        let b = self.value(boxes);
        if b.ncols() != 4 {
            return Err(Error::Dimension(format!("box_gate expects 4 columns, got {}", b.ncols())));
        }
        let (gx, gy) = gate_axes(b, spec);
        let (w, h) = (spec.width, spec.height);
        let mut v = Array2::zeros((b.nrows(), w * h));
        for (k, mut row) in v.rows_mut().into_iter().enumerate() {
            for y in 0..h {
                let gyk = gy[[k, y]];
                for x in 0..w {
                    row[y * w + x] = gx[[k, x]] + gyk;
                }
            }
        }
        Ok(self.push(v, Op::BoxGate(boxes, spec)))
    }

    /// Gradients of the `1×1` node `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called without a recorded forward pass"));
        }
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let da = &g / bv;
                    let db = Zip::from(&g)
                        .and(&node.value)
                        .and(bv)
                        .map_collect(|&g, &q, &b| -g * q / b);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(a, r) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *r, dr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Shift(a) => acc(&mut grads, *a, g),
                Op::Gelu(a) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * gelu_grad(x));
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&g, &s| g * s * (1.0 - s));
                    acc(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * sigmoid(x));
                    acc(&mut grads, *a, d);
                }
                Op::Abs(a) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * x.signum() * (x != 0.0) as u8 as f64);
                    acc(&mut grads, *a, d);
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // ties route the gradient to the first operand
                    let pick_a = |x: f64, y: f64| if is_min { x <= y } else { x >= y };
                    let da = Zip::from(&g)
                        .and(av)
                        .and(bv)
                        .map_collect(|&g, &x, &y| if pick_a(x, y) { g } else { 0.0 });
                    let db = Zip::from(&g)
                        .and(av)
                        .and(bv)
                        .map_collect(|&g, &x, &y| if pick_a(x, y) { 0.0 } else { g });
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Ln(a) => {
                    let d = &g / self.value(*a);
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let dot = (&g * s).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = s * &(&g - &dot);
                    acc(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(f64::exp);
                    let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = &g - &(&p * &gsum);
                    acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let d = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, d);
                }
                Op::GatherRows(a, index) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for (i, &src) in index.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(i);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Col(a, j) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.column_mut(*j).assign(&g.column(0));
                    acc(&mut grads, *a, d);
                }
                Op::Entries(a, index) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for (k, &ij) in index.iter().enumerate() {
                        d[ij] += g[[k, 0]];
                    }
                    acc(&mut grads, *a, d);
                }
                Op::BceLogits(a, t) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .and(&**t)
                        .map_collect(|&g, &x, &t| g * (sigmoid(x) - t));
                    acc(&mut grads, *a, d);
                }
                Op::BoxGate(bx, spec) => {
                    let d = box_gate_backward(self.value(*bx), *spec, &g);
                    acc(&mut grads, *bx, d);
                }
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(slot) => Some((slot, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}

/// Per-axis log-gates: `gx[k, x]` and `gy[k, y]`.
fn gate_axes(b: &Array2<f64>, spec: BoxGateSpec) -> (Array2<f64>, Array2<f64>) {
    let n = b.nrows();
    let mut gx = Array2::zeros((n, spec.width));
    let mut gy = Array2::zeros((n, spec.height));
    for k in 0..n {
        let (cx, cy, w, h) = (b[[k, 0]], b[[k, 1]], b[[k, 2]], b[[k, 3]]);
        let sx = spec.sharpness * spec.width as f64;
        for x in 0..spec.width {
            let u = (x as f64 + 0.5) / spec.width as f64;
            gx[[k, x]] = log_sigmoid(sx * (u - cx + w / 2.0)) + log_sigmoid(sx * (cx + w / 2.0 - u));
        }
        let sy = spec.sharpness * spec.height as f64;
        for y in 0..spec.height {
            let v = (y as f64 + 0.5) / spec.height as f64;
            gy[[k, y]] = log_sigmoid(sy * (v - cy + h / 2.0)) + log_sigmoid(sy * (cy + h / 2.0 - v));
        }
    }
    (gx, gy)
}

fn box_gate_backward(b: &Array2<f64>, spec: BoxGateSpec, g: &Array2<f64>) -> Array2<f64> {
    let (w, h) = (spec.width, spec.height);
    let mut d = Array2::zeros(b.dim());
    for k in 0..b.nrows() {
        let (cx, cy, bw, bh) = (b[[k, 0]], b[[k, 1]], b[[k, 2]], b[[k, 3]]);
        let grow = g.row(k);
        let mut dgx = vec![0.0; w];
        let mut dgy = vec![0.0; h];
        for y in 0..h {
            for x in 0..w {
                let v = grow[y * w + x];
                dgx[x] += v;
                dgy[y] += v;
            }
        }
        // d/dz log σ(z) = σ(-z)
        let sx = spec.sharpness * w as f64;
        for (x, &dg) in dgx.iter().enumerate() {
            let u = (x as f64 + 0.5) / w as f64;
            let lo = sigmoid(-sx * (u - cx + bw / 2.0));
            let hi = sigmoid(-sx * (cx + bw / 2.0 - u));
            d[[k, 0]] += dg * sx * (hi - lo);
            d[[k, 2]] += dg * sx * 0.5 * (lo + hi);
        }
        let sy = spec.sharpness * h as f64;
        for (y, &dg) in dgy.iter().enumerate() {
            let v = (y as f64 + 0.5) / h as f64;
            let lo = sigmoid(-sy * (v - cy + bh / 2.0));
            let hi = sigmoid(-sy * (cy + bh / 2.0 - v));
            d[[k, 1]] += dg * sy * (hi - lo);
            d[[k, 3]] += dg * sy * 0.5 * (lo + hi);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `f` with respect to each entry of `inputs`.
    fn check(inputs: Vec<Array2<f64>>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, x)| tape.param(i, x)).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for (i, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
            for idx in 0..x.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, y)| {
                            let mut y = y.clone();
                            if j == i {
                                y.as_slice_mut().unwrap()[idx] += delta;
                            }
                            t.param(j, &y)
                        })
                        .collect();
                    let o = f(&mut t, &vs);
                    t.scalar(o)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!((a - numeric).abs() / denom < 1e-5, "input {i}[{idx}]: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut t = Tape::new();
        let p = t.param(0, &array![[1.0, 2.0], [3.0, 4.0]]);
        let q = t.param(1, &array![[5.0]]);
        let s = t.sum_all(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &Array2::<f64>::ones((2, 2)));
        assert!(g.get(q).is_none());
    }

    #[test]
    fn backward_on_empty_tape_is_state_error() {
        let t = Tape::new();
        assert!(matches!(t.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let c = rand_mat(&mut rng, 5, 4);
        let r = rand_mat(&mut rng, 1, 2);
        check(vec![a, b, c, r], |t, v| {
            let ab = t.matmul(v[0], v[1]).unwrap();
            let ab = t.add_row(ab, v[3]).unwrap();
            let ca = t.matmul_bt(v[2], v[0]).unwrap();
            let g = t.gelu(ca);
            let s1 = t.sum_all(g);
            let sq = t.mul(ab, ab).unwrap();
            let s2 = t.sum_all(sq);
            t.add(s1, s2).unwrap()
        });
    }

    #[test]
    fn elementwise_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 3);
        let b = rand_mat(&mut rng, 3, 3).mapv(|x| x + 2.5);
        check(vec![a, b], |t, v| {
            let d = t.div(v[0], v[1]).unwrap();
            let s = t.sigmoid(d);
            let sp = t.softplus(v[0]);
            let l = t.ln(v[1]);
            let m = t.min(sp, l).unwrap();
            let mx = t.max(s, m).unwrap();
            let ab = t.abs(v[0]);
            let e = t.sub(mx, ab).unwrap();
            let e = t.scale(e, 1.7);
            let e = t.shift(e, 0.3);
            t.sum_all(e)
        });
    }

    #[test]
    fn softmax_and_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 4, 5);
        let w = rand_mat(&mut rng, 4, 5);
        check(vec![a, w], |t, v| {
            let s = t.softmax_rows(v[0]);
            let ws = t.mul(s, v[1]).unwrap();
            let ls = t.log_softmax_rows(v[1]);
            let picked = t.entries(ls, Rc::new(vec![(0, 1), (3, 4), (0, 1)])).unwrap();
            let gathered = t.gather_rows(ws, Rc::new(vec![2, 2, 0])).unwrap();
            let c = t.col(gathered, 3).unwrap();
            let a1 = t.sum_all(picked);
            let a2 = t.sum_all(c);
            t.add(a1, a2).unwrap()
        });
    }

    #[test]
    fn bce_and_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_mat(&mut rng, 2, 12).mapv(|x| 3.0 * x);
        let target = Rc::new(Array2::from_shape_fn((2, 12), |(i, j)| ((i + j) % 3 == 0) as u8 as f64));
        let boxes = array![[0.4, 0.55, 0.5, 0.3], [0.7, 0.2, 0.33, 0.61]];
        let spec = BoxGateSpec {
            width: 4,
            height: 3,
            sharpness: 0.8,
        };
        check(vec![logits, boxes], move |t, v| {
            let g = t.box_gate(v[1], spec).unwrap();
            let z = t.add(v[0], g).unwrap();
            let l = t.bce_logits(z, target.clone()).unwrap();
            t.sum_all(l)
        });
    }

    #[test]
    fn gate_is_near_zero_inside_and_negative_outside() {
        let mut t = Tape::new();
        let b = t.constant(array![[0.5, 0.5, 0.5, 0.5]]);
        let spec = BoxGateSpec {
            width: 8,
            height: 8,
            sharpness: 2.0,
        };
        let g = t.box_gate(b, spec).unwrap();
        let v = t.value(g);
        assert!(v[[0, 3 * 8 + 3]] > -0.2);
        assert!(v[[0, 0]] < -3.0);
    }
}
