//! Wengert tape for reverse-mode differentiation over 4-D tensors.
//!
//! Every primitive pushes one node holding its forward value. Nodes only
//! reference earlier nodes, so the tape is topologically ordered by
//! construction and `backward` is a single reverse sweep.

use crate::autodiff::conv;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    generation: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Position on the tape that later nodes can be discarded back to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeMark(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        pad: usize,
    },
    LeakyRelu {
        input: usize,
        slope: T,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Narrow {
        input: usize,
        start: usize,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
    LinComb {
        terms: Vec<(T, usize)>,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Sum {
        input: usize,
    },
    L1 {
        pred: usize,
        target: usize,
    },
    Mse {
        pred: usize,
        target: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    generation: u64,
    peak_nodes: usize,
    peak_values: usize,
    saved_values: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: 0,
            peak_nodes: 0,
            peak_values: 0,
            saved_values: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of scalar values currently held by the tape.
    pub fn saved_values(&self) -> usize {
        self.saved_values
    }

    /// Largest `saved_values` observed since creation.
    pub fn peak_saved_values(&self) -> usize {
        self.peak_values
    }

    pub fn peak_nodes(&self) -> usize {
        self.peak_nodes
    }

    /// Drop every node. Handles issued before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        self.saved_values = 0;
        self.generation += 1;
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark(self.nodes.len())
    }

    /// Discard every node recorded after `mark`.
    pub fn truncate(&mut self, mark: TapeMark) {
        for node in self.nodes.drain(mark.0.min(self.nodes.len())..) {
            self.saved_values -= node.value.numel();
        }
    }

    fn resolve(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(Error::State(format!(
                "variable {} does not belong to the current tape contents",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.saved_values += value.numel();
        self.nodes.push(Node { value, op, needs_grad });
        self.peak_nodes = self.peak_nodes.max(self.nodes.len());
        self.peak_values = self.peak_values.max(self.saved_values);
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        let i = self.resolve(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<Shape> {
        Ok(self.value(v)?.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.resolve(v)?;
        Ok(self.nodes[i].needs_grad)
    }

    /// Fails with a numeric error naming the node when `v` holds a NaN or infinity.
    pub fn check_finite(&self, v: Var) -> Result<()> {
        let i = self.resolve(v)?;
        self.nodes[i].value.check_finite(&format!("tape node {i}"))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.resolve(input)?, self.resolve(weight)?);
        let bi = bias.map(|b| self.resolve(b)).transpose()?;
        let out = conv::conv2d_forward(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|b| &self.nodes[b].value),
            pad,
        )?;
        let op_index = self.nodes.len();
        out.check_finite(&format!("conv2d output (op {op_index})"))?;
        let needs = self.needs(xi) || self.needs(wi) || bi.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input: xi,
                weight: wi,
                bias: bi,
                pad,
            },
            needs,
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Result<Var> {
        let xi = self.resolve(input)?;
        if !(slope > T::ZERO && slope < T::ONE) {
            return Err(Error::config(format!("leaky relu slope {slope} outside (0, 1)")));
        }
        let out = self.nodes[xi].value.map(|v| if v > T::ZERO { v } else { slope * v });
        let needs = self.needs(xi);
        Ok(self.push(out, Op::LeakyRelu { input: xi, slope }, needs))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.resolve(a)?, self.resolve(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
            return Err(Error::config(format!("cannot concatenate {sa} with {sb}")));
        }
        let shape = sa.with_channels(sa.c() + sb.c());
        let (la, lb) = (sa.item_len(), sb.item_len());
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..sa.n() {
            data.extend_from_slice(&self.nodes[ai].value.data()[n * la..(n + 1) * la]);
            data.extend_from_slice(&self.nodes[bi].value.data()[n * lb..(n + 1) * lb]);
        }
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Concat { a: ai, b: bi }, needs))
    }

    /// Channels `[start, start + len)` of `input`.
    pub fn narrow_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.resolve(input)?;
        let s = self.nodes[xi].value.shape();
        if len == 0 || start + len > s.c() {
            return Err(Error::config(format!(
                "channel range {start}..{} outside {s}",
                start + len
            )));
        }
        let shape = s.with_channels(len);
        let plane = s.plane();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s.n() {
            let base = (n * s.c() + start) * plane;
            data.extend_from_slice(&self.nodes[xi].value.data()[base..base + len * plane]);
        }
        let needs = self.needs(xi);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Narrow { input: xi, start }, needs))
    }

    /// Split into channels `[0, at)` and `[at, C)`.
    pub fn split_channels(&mut self, input: Var, at: usize) -> Result<(Var, Var)> {
        let c = self.shape(input)?.c();
        if at == 0 || at >= c {
            return Err(Error::config(format!("split index {at} outside 1..{c}")));
        }
        let lo = self.narrow_channels(input, 0, at)?;
        let hi = self.narrow_channels(input, at, c - at)?;
        Ok((lo, hi))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let xi = self.resolve(input)?;
        if factor < 2 {
            return Err(Error::config(format!("upsample factor {factor} < 2")));
        }
        let src = &self.nodes[xi].value;
        let s = src.shape();
        let shape = Shape::new(s.n(), s.c(), s.h() * factor, s.w() * factor);
        let mut data = Vec::with_capacity(shape.numel());
        for plane in src.data().chunks(s.plane()) {
            for y in 0..shape.h() {
                let row = &plane[(y / factor) * s.w()..(y / factor + 1) * s.w()];
                for &v in row {
                    for _ in 0..factor {
                        data.push(v);
                    }
                }
            }
        }
        let needs = self.needs(xi);
        Ok(self.push(
            Tensor::from_vec(shape, data)?,
            Op::Upsample { input: xi, factor },
            needs,
        ))
    }

    /// `Σ coefᵢ · varᵢ` with constant coefficients.
    pub fn lin_comb(&mut self, terms: &[(T, Var)]) -> Result<Var> {
        let idx = terms
            .iter()
            .map(|&(c, v)| Ok((c, self.resolve(v)?)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<(T, &Tensor<T>)> = idx.iter().map(|&(c, i)| (c, &self.nodes[i].value)).collect();
        let out = Tensor::lin_comb(&refs)?;
        let needs = idx.iter().any(|&(_, i)| self.needs(i));
        Ok(self.push(out, Op::LinComb { terms: idx }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lin_comb(&[(T::ONE, a), (T::ONE, b)])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.lin_comb(&[(c, x)])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.resolve(a)?, self.resolve(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return Err(Error::config(format!(
                "mul shape mismatch {} vs {}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(out, Op::Mul { a: ai, b: bi }, needs))
    }

    /// Sum of all elements as a 1x1x1x1 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.resolve(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.sum());
        let needs = self.needs(xi);
        Ok(self.push(out, Op::Sum { input: xi }, needs))
    }

    fn loss_operands(&self, pred: Var, target: Var) -> Result<(usize, usize)> {
        let (pi, ti) = (self.resolve(pred)?, self.resolve(target)?);
        let (sp, st) = (self.nodes[pi].value.shape(), self.nodes[ti].value.shape());
        if sp != st {
            return Err(Error::config(format!("loss shape mismatch {sp} vs {st}")));
        }
        Ok((pi, ti))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pi, ti) = self.loss_operands(pred, target)?;
        let (p, t) = (&self.nodes[pi].value, &self.nodes[ti].value);
        let n = T::from_f64(p.numel() as f64);
        let total: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let needs = self.needs(pi) || self.needs(ti);
        Ok(self.push(Tensor::scalar(total / n), Op::L1 { pred: pi, target: ti }, needs))
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pi, ti) = self.loss_operands(pred, target)?;
        let (p, t) = (&self.nodes[pi].value, &self.nodes[ti].value);
        let n = T::from_f64(p.numel() as f64);
        let total: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let needs = self.needs(pi) || self.needs(ti);
        Ok(self.push(Tensor::scalar(total / n), Op::Mse { pred: pi, target: ti }, needs))
    }

    /// Gradients of a scalar node with respect to every node that feeds it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss)?;
        if shape.numel() != 1 {
            return Err(Error::config(format!(
                "backward() needs a scalar loss, got shape {shape}"
            )));
        }
        self.backward_from(loss, Tensor::ones(shape))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient `seed` on `output`.
    pub fn backward_from(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        let out = self.resolve(output)?;
        let out_shape = self.nodes[out].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::config(format!(
                "seed shape {} does not match output {out_shape}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; out + 1];
        grads[out] = Some(seed);
        for i in (0..=out).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            generation: self.generation,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: usize, g: Tensor<T>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            } => {
                let need = [
                    self.needs(input),
                    self.needs(weight),
                    bias.is_some_and(|b| self.needs(b)),
                ];
                let cg = conv::conv2d_backward(
                    &self.nodes[input].value,
                    &self.nodes[weight].value,
                    bias.is_some(),
                    pad,
                    g,
                    need,
                )?;
                if let Some(d) = cg.input {
                    self.accumulate(grads, input, d);
                }
                if let Some(d) = cg.weight {
                    self.accumulate(grads, weight, d);
                }
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    let d = d.reshape(self.nodes[b].value.shape())?;
                    self.accumulate(grads, b, d);
                }
            }
            &Op::LeakyRelu { input, slope } => {
                let x = &self.nodes[input].value;
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::ZERO { gv } else { slope * gv })
                    .collect();
                self.accumulate(grads, input, Tensor::from_vec(x.shape(), data)?);
            }
            &Op::Concat { a, b } => {
                let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                let (la, lb) = (sa.item_len(), sb.item_len());
                let mut da = Vec::with_capacity(sa.numel());
                let mut db = Vec::with_capacity(sb.numel());
                for chunk in g.data().chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                self.accumulate(grads, a, Tensor::from_vec(sa, da)?);
                self.accumulate(grads, b, Tensor::from_vec(sb, db)?);
            }
            &Op::Narrow { input, start } => {
                let s = self.nodes[input].value.shape();
                let len = g.shape().c();
                let plane = s.plane();
                let mut d = vec![T::ZERO; s.numel()];
                for n in 0..s.n() {
                    let dst = (n * s.c() + start) * plane;
                    let src = n * len * plane;
                    d[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
                }
                self.accumulate(grads, input, Tensor::from_vec(s, d)?);
            }
            &Op::Upsample { input, factor } => {
                let s = self.nodes[input].value.shape();
                let ow = s.w() * factor;
                let mut d = vec![T::ZERO; s.numel()];
                for (p, gplane) in g.data().chunks(s.plane() * factor * factor).enumerate() {
                    let dst = &mut d[p * s.plane()..(p + 1) * s.plane()];
                    for (y, grow) in gplane.chunks(ow).enumerate() {
                        let drow = &mut dst[(y / factor) * s.w()..(y / factor + 1) * s.w()];
                        for (x, &gv) in grow.iter().enumerate() {
                            drow[x / factor] += gv;
                        }
                    }
                }
                self.accumulate(grads, input, Tensor::from_vec(s, d)?);
            }
            Op::LinComb { terms } => {
                for &(c, t) in terms {
                    if self.needs(t) {
                        self.accumulate(grads, t, g.map(|v| c * v));
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.needs(a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, a, Tensor::from_vec(va.shape(), d)?);
                }
                if self.needs(b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, b, Tensor::from_vec(vb.shape(), d)?);
                }
            }
            &Op::Sum { input } => {
                let s = self.nodes[input].value.shape();
                self.accumulate(grads, input, Tensor::full(s, g.item()));
            }
            &Op::L1 { pred, target } => {
                let (p, t) = (&self.nodes[pred].value, &self.nodes[target].value);
                let scale = g.item() / T::from_f64(p.numel() as f64);
                let d: Vec<T> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| {
                        if a > b {
                            scale
                        } else if a < b {
                            -scale
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                let d = Tensor::from_vec(p.shape(), d)?;
                if self.needs(target) {
                    self.accumulate(grads, target, d.map(|v| -v));
                }
                self.accumulate(grads, pred, d);
            }
            &Op::Mse { pred, target } => {
                let (p, t) = (&self.nodes[pred].value, &self.nodes[target].value);
                let scale = T::from_f64(2.0) * g.item() / T::from_f64(p.numel() as f64);
                let d: Vec<T> = p.data().iter().zip(t.data()).map(|(&a, &b)| scale * (a - b)).collect();
                let d = Tensor::from_vec(p.shape(), d)?;
                if self.needs(target) {
                    self.accumulate(grads, target, d.map(|v| -v));
                }
                self.accumulate(grads, pred, d);
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    generation: u64,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, with unreachable nodes mapped to exact zeros.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Result<Tensor<T>> {
        let shape = tape.shape(v)?;
        Ok(self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape)))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}
