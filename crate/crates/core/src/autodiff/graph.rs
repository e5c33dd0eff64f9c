use super::conv::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    Upsample2x(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    /// 1 where lhs > rhs, else 0; no gradient flows through it.
    Gate,
}

#[derive(Debug)]
struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only tape. Nodes are pushed in evaluation order, so the node
/// list is already topologically sorted.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    scratch: Vec<T>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached
    /// this node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    // -- structural operators -------------------------------------------

    /// Same-padded 3D cross-correlation. `input` is `[N, C, D, H, W]`,
    /// `weight` is `[Co, C, k, k, k]` with odd `k`, `bias` is `[Co]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::Shape {
                op: "conv3d",
                lhs: xs,
                rhs: ws,
            });
        }
        let k = ws[2];
        if k.is_multiple_of(2) || stride == 0 {
            return Err(Error::Shape {
                op: "conv3d(kernel must be odd, stride positive)",
                lhs: xs,
                rhs: ws,
            });
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [ws[0]] {
                return Err(Error::Shape {
                    op: "conv3d bias",
                    lhs: ws,
                    rhs: bs.to_vec(),
                });
            }
        }
        // spatial order in the tensor is D, H, W; geometry uses [x, y, z]
        let geom = ConvGeom::new(xs[1], ws[0], [xs[4], xs[3], xs[2]], k, stride);
        let batch = xs[0];
        let out_item = geom.c_out * geom.out_spatial();
        let mut out = vec![T::ZERO; batch * out_item];
        let mut scratch = std::mem::take(&mut self.scratch);
        {
            let x = self.value(input).data();
            let w = self.value(weight).data();
            let b = bias.map(|b| self.value(b).data());
            for n in 0..batch {
                conv::forward(
                    &geom,
                    &x[n * geom.in_len()..(n + 1) * geom.in_len()],
                    w,
                    b,
                    &mut out[n * out_item..(n + 1) * out_item],
                    &mut scratch,
                );
            }
        }
        self.scratch = scratch;
        let [ow, oh, od] = geom.out_dims;
        let value = Tensor::new(vec![batch, geom.c_out, od, oh, ow], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
                batch,
            },
            value,
            rg,
        ))
    }

    /// Nearest-neighbor doubling of the last three axes.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 3 {
            return Err(Error::Shape {
                op: "upsample2x",
                lhs: s,
                rhs: vec![],
            });
        }
        let r = s.len();
        let (d, h, w) = (s[r - 3], s[r - 2], s[r - 1]);
        let outer: usize = s[..r - 3].iter().product();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * 8 * d * h * w);
        let mut row = Vec::with_capacity(2 * w);
        for o in 0..outer {
            for z in 0..2 * d {
                for y in 0..2 * h {
                    let src = ((o * d + z / 2) * h + y / 2) * w;
                    row.clear();
                    for &v in &x[src..src + w] {
                        row.push(v);
                        row.push(v);
                    }
                    out.extend_from_slice(&row);
                }
            }
        }
        let mut shape = s.clone();
        shape[r - 3] *= 2;
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let rg = self.rg(input);
        Ok(self.push(Op::Upsample2x(input), Tensor::new(shape, out)?, rg))
    }

    /// 2x2x2 max pooling over the last three axes (odd extents floor).
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let r = s.len();
        if r < 3 || s[r - 3] < 2 || s[r - 2] < 2 || s[r - 1] < 2 {
            return Err(Error::Shape {
                op: "max_pool2",
                lhs: s,
                rhs: vec![],
            });
        }
        let (d, h, w) = (s[r - 3], s[r - 2], s[r - 1]);
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let outer: usize = s[..r - 3].iter().product();
        let x = self.value(input).data();
        let n_out = outer * od * oh * ow;
        let mut out = Vec::with_capacity(n_out);
        let mut argmax = Vec::with_capacity(n_out);
        for o in 0..outer {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best_i = ((o * d + 2 * z) * h + 2 * y) * w + 2 * xx;
                        let mut best = x[best_i];
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((o * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                    if x[i] > best {
                                        best = x[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i as u32);
                    }
                }
            }
        }
        let mut shape = s.clone();
        shape[r - 3] = od;
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let rg = self.rg(input);
        Ok(self.push(Op::MaxPool2 { input, argmax }, Tensor::new(shape, out)?, rg))
    }

    // -- elementwise ------------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<T> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            tb.data().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(Error::Shape {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let shape = if ta.numel() >= tb.numel() {
            ta.shape().to_vec()
        } else {
            tb.shape().to_vec()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok((Tensor::new(shape, data)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), t, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), t, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), t, rg))
    }

    /// Non-differentiable indicator `a > b`.
    pub fn gate(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("gate", a, b, |x, y| if x > y { T::ONE } else { T::ZERO })?;
        Ok(self.push(Op::Gate, t, false))
    }

    fn unary(&mut self, op: Op, input: Var, f: impl Fn(T) -> T) -> Var {
        let t = self.value(input);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(input);
        self.push(op, value, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu(x), x, |v| if v > T::ZERO { v } else { T::ZERO })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Op::Sigmoid(x), x, sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Op::Log(x), x, |v| v.ln())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cs = T::from_f64(c);
        self.unary(Op::Scale(x, c), x, move |v| v * cs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let cs = T::from_f64(c);
        self.unary(Op::AddScalar(x), x, move |v| v + cs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = kahan_sum(self.value(x).data());
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_f64(t.numel() as f64);
        let s = kahan_sum(t.data()) / n;
        let rg = self.rg(x);
        self.push(Op::Mean(x), Tensor::scalar(s), rg)
    }

    // -- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar output. Gradients accumulate into every
    /// node that requires them; earlier gradients are cleared first.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.rg(output) {
            return Ok(());
        }
        self.nodes[output.0].grad = Some(vec![T::ONE]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    /// Gradient of a broadcast operand: reduce when it was a scalar.
    fn reduce_to(&self, v: Var, full: Vec<T>) -> Vec<T> {
        if self.value(v).numel() == 1 && full.len() != 1 {
            vec![kahan_sum(&full)]
        } else {
            full
        }
    }

    /// Reads operand `v` at output position `i`, honoring scalar broadcast.
    #[inline]
    fn at(t: &Tensor<T>, i: usize) -> T {
        if t.numel() == 1 {
            t.data()[0]
        } else {
            t.data()[i]
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Gate => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.rg(v) {
                        let c = self.reduce_to(v, g.to_vec());
                        self.accumulate(v, c);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let c = self.reduce_to(*a, g.to_vec());
                    self.accumulate(*a, c);
                }
                if self.rg(*b) {
                    let c = self.reduce_to(*b, g.iter().map(|&x| -x).collect());
                    self.accumulate(*b, c);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let tb = self.value(b);
                    let full = g.iter().enumerate().map(|(k, &x)| x * Self::at(tb, k)).collect();
                    let c = self.reduce_to(a, full);
                    self.accumulate(a, c);
                }
                if self.rg(b) {
                    let ta = self.value(a);
                    let full = g.iter().enumerate().map(|(k, &x)| x * Self::at(ta, k)).collect();
                    let c = self.reduce_to(b, full);
                    self.accumulate(b, c);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let tb = self.value(b);
                    let full = g.iter().enumerate().map(|(k, &x)| x / Self::at(tb, k)).collect();
                    let c = self.reduce_to(a, full);
                    self.accumulate(a, c);
                }
                if self.rg(b) {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let full = g
                        .iter()
                        .enumerate()
                        .map(|(k, &x)| {
                            let bv = Self::at(tb, k);
                            -x * Self::at(ta, k) / (bv * bv)
                        })
                        .collect();
                    let c = self.reduce_to(b, full);
                    self.accumulate(b, c);
                }
            }
            Op::Relu(x) => {
                let c = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::ZERO { gv } else { T::ZERO })
                    .collect();
                self.accumulate(*x, c);
            }
            Op::Sigmoid(x) => {
                let c = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (T::ONE - s))
                    .collect();
                self.accumulate(*x, c);
            }
            Op::Log(x) => {
                let c = self.value(*x).data().iter().zip(g).map(|(&v, &gv)| gv / v).collect();
                self.accumulate(*x, c);
            }
            Op::Scale(x, k) => {
                let k = T::from_f64(*k);
                self.accumulate(*x, g.iter().map(|&gv| gv * k).collect());
            }
            Op::AddScalar(x) => self.accumulate(*x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / T::from_f64(n as f64);
                self.accumulate(*x, vec![v; n]);
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let r = s.len();
                let (d, h, w) = (s[r - 3], s[r - 2], s[r - 1]);
                let outer: usize = s[..r - 3].iter().product();
                let mut c = vec![T::ZERO; outer * d * h * w];
                let (h2, w2) = (2 * h, 2 * w);
                for o in 0..outer {
                    for z in 0..2 * d {
                        for y in 0..h2 {
                            let src = ((o * 2 * d + z) * h2 + y) * w2;
                            let dst = ((o * d + z / 2) * h + y / 2) * w;
                            for xx in 0..w {
                                c[dst + xx] += g[src + 2 * xx] + g[src + 2 * xx + 1];
                            }
                        }
                    }
                }
                self.accumulate(*x, c);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut c = vec![T::ZERO; self.value(*input).numel()];
                for (&j, &gv) in argmax.iter().zip(g) {
                    c[j as usize] += gv;
                }
                self.accumulate(*input, c);
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
                batch,
            } => {
                let (input, weight) = (*input, *weight);
                let want_in = self.rg(input);
                let want_w = self.rg(weight);
                let want_b = bias.is_some_and(|b| self.rg(b));
                let mut gi = want_in.then(|| vec![T::ZERO; self.value(input).numel()]);
                let mut gw = want_w.then(|| vec![T::ZERO; self.value(weight).numel()]);
                let mut gb = want_b.then(|| vec![T::ZERO; geom.c_out]);
                let mut scratch = std::mem::take(&mut self.scratch);
                {
                    let x = self.value(input).data();
                    let w = self.value(weight).data();
                    let out_item = geom.c_out * geom.out_spatial();
                    let in_item = geom.in_len();
                    for n in 0..*batch {
                        conv::backward(
                            geom,
                            &x[n * in_item..(n + 1) * in_item],
                            w,
                            &g[n * out_item..(n + 1) * out_item],
                            gi.as_mut().map(|v| &mut v[n * in_item..(n + 1) * in_item]),
                            gw.as_deref_mut(),
                            gb.as_deref_mut(),
                            &mut scratch,
                        );
                    }
                }
                self.scratch = scratch;
                if let Some(c) = gi {
                    self.accumulate(input, c);
                }
                if let Some(c) = gw {
                    self.accumulate(weight, c);
                }
                if let (Some(b), Some(c)) = (bias, gb) {
                    self.accumulate(*b, c);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

/// Compensated summation in the element type; deterministic for a fixed
/// element order.
fn kahan_sum<T: Scalar>(xs: &[T]) -> T {
    let mut sum = T::ZERO;
    let mut c = T::ZERO;
    for &x in xs {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn sum_and_its_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(x);
        assert_eq!(g.value(s).item().unwrap(), 10.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn fan_out_gradients_add() {
        // f = sum(x * x + 3x) -> df/dx = 2x + 3
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let s = g.add(sq, lin).unwrap();
        let out = g.sum(s);
        g.backward(out).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[4], &[0.3, -0.1, 2.0, 1.0]));
        let s = g.sigmoid(x);
        let z = g.scale(s, 0.0);
        let out = g.sum(z);
        g.backward(out).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let c = g.param(t(&[1], &[2.0]));
        let y = g.mul(x, c).unwrap();
        let out = g.sum(y);
        g.backward(out).unwrap();
        assert_eq!(g.grad(c).unwrap(), &[6.0]);
        assert_eq!(g.grad(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { ref lhs, ref rhs, .. } if lhs == &[2] && rhs == &[3]));
        let x = g.constant(t(&[1, 2, 2, 2, 2], &[0.0; 16]));
        let w = g.constant(t(&[1, 3, 1, 1, 1], &[0.0; 3]));
        assert!(matches!(g.conv3d(x, w, None, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gate_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[3], &[0.2, 0.6, 0.9]));
        let tm = g.param(t(&[3], &[0.5, 0.5, 0.95]));
        let k = g.gate(p, tm).unwrap();
        assert_eq!(g.value(k).data(), &[0.0, 1.0, 0.0]);
        let m = g.mul(p, k).unwrap();
        let out = g.sum(m);
        g.backward(out).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[0.0, 1.0, 0.0]);
        assert!(g.grad(tm).is_none());
    }

    #[test]
    fn upsample_broadcasts_single_voxel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 1, 1], &[5.0]));
        let u = g.upsample2x(x).unwrap();
        assert_eq!(g.shape(u), &[1, 1, 2, 2, 2]);
        assert_eq!(g.value(u).data(), &[5.0; 8]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..8).map(|i| ((i * 5) % 8) as f64).collect();
        let x = g.param(t(&[1, 1, 2, 2, 2], &data));
        let m = g.max_pool2(x).unwrap();
        assert_eq!(g.value(m).data(), &[7.0]);
        let out = g.sum(m);
        g.backward(out).unwrap();
        let grad = g.grad(x).unwrap();
        let hot = data.iter().position(|&v| v == 7.0).unwrap();
        for (i, &v) in grad.iter().enumerate() {
            assert_eq!(v, if i == hot { 1.0 } else { 0.0 });
        }
    }
}
