//! Minimal reverse-mode differentiation over 2-D arrays.
//!
//! Every value is a `rows × cols` matrix; element-wise binary operations
//! broadcast singleton rows/columns. Nodes are appended in evaluation order,
//! so a single reverse sweep visits them in topological order.

use ndarray::{s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Atan(Var),
    Square(Var),
    /// Elementwise clamp; the mask is 1 where the input passed through.
    Clamp(Var, Array2<f64>),
    Columns(Var, usize),
    Rows(Var, usize),
    HCat(Vec<Var>),
    Mean(Var),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Recording context for one forward/backward pair.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every tracked node after a reverse sweep.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0.get(v.0).and_then(Option::as_ref)
    }
}

fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Input node; gradients are only propagated to leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMul(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Mul(a, b), t)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Div(a, b), t)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        let t = self.tracked(a);
        self.push(v, Op::Neg(a), t)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let t = self.tracked(a);
        self.push(v, Op::Scale(a, k), t)
    }

    /// `a + k` for a constant `k`.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let t = self.tracked(a);
        self.push(v, Op::Offset(a), t)
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).mapv(f);
        let t = self.tracked(a);
        self.push(v, op, t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn atan(&mut self, a: Var) -> Var {
        self.unary(a, f64::atan, Op::Atan(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamps column `j` into `[lo[j], hi[j]]`. Clamped entries pass no gradient.
    pub fn clamp_columns(&mut self, a: Var, lo: &[f64], hi: &[f64]) -> Var {
        let mut v = self.value(a).clone();
        let mut mask = Array2::ones(v.raw_dim());
        for ((r, c), e) in v.indexed_iter_mut() {
            if *e < lo[c] || *e > hi[c] {
                *e = e.clamp(lo[c], hi[c]);
                mask[[r, c]] = 0.0;
            }
        }
        let t = self.tracked(a);
        self.push(v, Op::Clamp(a, mask), t)
    }

    /// Pass-through mask of a node built by [`Tape::clamp_columns`].
    pub fn clamp_mask(&self, v: Var) -> Option<&Array2<f64>> {
        match &self.nodes[v.0].op {
            Op::Clamp(_, mask) => Some(mask),
            _ => None,
        }
    }

    /// Columns `start..start + len`.
    pub fn columns(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let t = self.tracked(a);
        self.push(v, Op::Columns(a, start), t)
    }

    pub fn column(&mut self, a: Var, j: usize) -> Var {
        self.columns(a, j, 1)
    }

    /// Rows `start..start + len`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let t = self.tracked(a);
        self.push(v, Op::Rows(a, start), t)
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(v, Op::HCat(parts.to_vec()), t)
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).mean().unwrap_or(0.0));
        let t = self.tracked(a);
        self.push(v, Op::Mean(a), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let t = self.tracked(a);
        self.push(v, Op::Sum(a), t)
    }

    /// Reverse sweep from a 1×1 output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        if !self.tracked(output) {
            return Gradients(grads);
        }
        grads[output.0] = Some(Array2::ones(self.value(output).raw_dim()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            let mut send = |v: Var, d: Array2<f64>| {
                if self.tracked(v) {
                    let shape = self.value(v).dim();
                    accumulate(&mut grads[v.0], reduce_to(d, shape));
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        send(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.tracked(*b) {
                        send(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, -&g);
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    if self.tracked(*a) {
                        send(*a, &g * self.value(*b));
                    }
                    if self.tracked(*b) {
                        send(*b, &g * self.value(*a));
                    }
                }
                Op::Div(a, b) => {
                    let gb = &g / self.value(*b);
                    if self.tracked(*b) {
                        send(*b, -(&gb * y));
                    }
                    send(*a, gb);
                }
                Op::Neg(a) => send(*a, -g),
                Op::Scale(a, k) => send(*a, g * *k),
                Op::Offset(a) => send(*a, g),
                Op::Sigmoid(a) => send(*a, g * &y.mapv(|s| s * (1.0 - s))),
                Op::Tanh(a) => send(*a, g * &y.mapv(|t| 1.0 - t * t)),
                Op::Sin(a) => send(*a, g * &self.value(*a).mapv(f64::cos)),
                Op::Cos(a) => send(*a, g * &self.value(*a).mapv(|x| -x.sin())),
                Op::Atan(a) => send(*a, g * &self.value(*a).mapv(|x| 1.0 / (1.0 + x * x))),
                Op::Square(a) => send(*a, g * &self.value(*a).mapv(|x| 2.0 * x)),
                Op::Clamp(a, mask) => send(*a, g * mask),
                Op::Columns(a, start) => {
                    let mut full = Array2::zeros(self.value(*a).raw_dim());
                    full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(*a, full);
                }
                Op::Rows(a, start) => {
                    let mut full = Array2::zeros(self.value(*a).raw_dim());
                    full.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    send(*a, full);
                }
                Op::HCat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.tracked(p) {
                            send(p, g.slice(s![.., at..at + w]).to_owned());
                        }
                        at += w;
                    }
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len().max(1) as f64;
                    send(*a, Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]] / n));
                }
                Op::Sum(a) => {
                    send(*a, Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]));
                }
            }
        }
        Gradients(grads)
    }
}
