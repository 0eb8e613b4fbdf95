//! Tape-based reverse-mode differentiation over dense row-major arrays.
//!
//! Nodes are appended in creation order, so parents always have smaller ids
//! than their children and the reverse creation order is a valid reverse
//! topological order.

use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::scalar::Real;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Slope of the activation for negative inputs.
pub const LEAKY_SLOPE: f64 = 0.1;

const NORM_EPS: f64 = 1e-24;
const STD_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    LeakyRelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, len: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    WeightedGather { x: Var, idx: Vec<usize>, w: Vec<T>, k: usize },
    Reshape(Var),
    MaxReduce { x: Var, outer: usize, len: usize, inner: usize, argmax: Vec<usize> },
    SumReduce { x: Var, outer: usize, len: usize, inner: usize },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    RowNorm(Var),
    L2Normalize(Var),
    Standardize(Var),
    RowDot(Var, Var),
    SumAll(Var),
    WeightedSum { x: Var, w: Vec<T> },
}

/// Computation graph holding every intermediate array of one forward pass.
pub struct Graph<T: Real> {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    ops: Vec<Op<T>>,
    params: IndexMap<String, Var>,
    branch: u64,
    swept: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

#[inline]
fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(5)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            params: IndexMap::new(),
            branch: 0xcbf2_9ce4_8422_2325,
            swept: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = self.values.len();
        self.shapes.push(shape);
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), true, Op::Leaf)
    }

    /// Leaf bound to a named parameter. Repeated requests within one graph
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.value(name)?.clone();
        let v = self.input(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters touched by this graph, in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shapes[v.0].clone(), self.values[v.0].clone()).expect("node invariant")
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Fingerprint of every discrete decision taken so far (activation
    /// branches, argmax picks, and any indices registered with
    /// [`Graph::note_branch`]). Two forward passes with equal fingerprints
    /// evaluate the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branch
    }

    pub fn note_branch(&mut self, indices: &[usize]) {
        let mut h = self.branch;
        for &i in indices {
            h = mix(h, i as u64);
        }
        self.branch = h;
    }

    fn unary_shape(&self, x: Var) -> Vec<usize> {
        self.shapes[x.0].clone()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::Shape {
                op,
                left: self.shapes[a.0].clone(),
                right: self.shapes[b.0].clone(),
            });
        }
        Ok(())
    }

    // ---------------------------------------------------------------- ops

    /// `x · w + b` over the last axis of `x`, broadcast over leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = &self.shapes[x.0];
        let ws = &self.shapes[w.0];
        let bs = &self.shapes[b.0];
        let cin = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != cin {
            return Err(Error::Shape {
                op: "linear",
                left: xs.clone(),
                right: ws.clone(),
            });
        }
        let cout = ws[1];
        if bs.len() != 1 || bs[0] != cout {
            return Err(Error::Shape {
                op: "linear bias",
                left: ws.clone(),
                right: bs.clone(),
            });
        }
        let rows = self.values[x.0].len() / cin;
        let bv = &self.values[b.0];
        let mut out = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            out.extend_from_slice(bv);
        }
        let (ci, co) = (cin as isize, cout as isize);
        T::gemm_acc(rows, cin, cout, &self.values[x.0], [ci, 1], &self.values[w.0], [co, 1], &mut out, [co, 1]);
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = cout;
        let req = self.requires[x.0] || self.requires[w.0] || self.requires[b.0];
        Ok(self.push(shape, out, req, Op::Linear { x, w, b }))
    }

    /// Elementwise LeakyReLU with slope 0.1 on negative inputs.
    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let slope = T::lit(LEAKY_SLOPE);
        let mut h = self.branch;
        let out: Vec<T> = self.values[x.0]
            .iter()
            .map(|&v| {
                let pos = v >= T::zero();
                h = mix(h, pos as u64);
                if pos {
                    v
                } else {
                    v * slope
                }
            })
            .collect();
        self.branch = h;
        let req = self.requires[x.0];
        self.push(self.unary_shape(x), out, req, Op::LeakyRelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.values[x.0]
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let req = self.requires[x.0];
        self.push(self.unary_shape(x), out, req, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.values[x.0].iter().map(|&v| v.tanh()).collect();
        let req = self.requires[x.0];
        self.push(self.unary_shape(x), out, req, Op::Tanh(x))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| f(x, y))
            .collect();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(self.unary_shape(a), out, req, node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.values[x.0].iter().map(|&v| v * s).collect();
        let req = self.requires[x.0];
        self.push(self.unary_shape(x), out, req, Op::Scale(x, s))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.values[x.0].iter().map(|&v| T::one() - v).collect();
        let req = self.requires[x.0];
        self.push(self.unary_shape(x), out, req, Op::OneMinus(x))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero parts"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let lead = {
            let s = &self.shapes[first.0];
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = &self.shapes[p.0];
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape {
                    op: "concat",
                    left: self.shapes[first.0].clone(),
                    right: s.clone(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.values[p.0][r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let req = parts.iter().any(|p| self.requires[p.0]);
        Ok(self.push(shape, out, req, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shapes[x.0].clone();
        let c = *s.last().unwrap();
        if len == 0 || start + len > c {
            return Err(Error::invalid(format!("slice {start}+{len} out of range for {s:?}")));
        }
        let rows = self.values[x.0].len() / c;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.values[x.0][r * c + start..r * c + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let req = self.requires[x.0];
        Ok(self.push(shape, out, req, Op::Slice { x, start, len }))
    }

    /// Row gather along the first axis: `out[r] = x[idx[r]]`; output shape
    /// `[idx.len(), trailing extents of x...]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shapes[x.0].clone();
        let n = s[0];
        let width = self.values[x.0].len() / n;
        if idx.is_empty() {
            return Err(Error::invalid("gather of zero rows"));
        }
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= n {
                return Err(Error::invalid(format!("gather index {i} out of range for {n} rows")));
            }
            out.extend_from_slice(&self.values[x.0][i * width..(i + 1) * width]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let req = self.requires[x.0];
        Ok(self.push(shape, out, req, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// `out[i] = sum_j w[i*k+j] * x[idx[i*k+j]]` over rows of a 2D `x`.
    pub fn weighted_gather(&mut self, x: Var, idx: &[usize], w: &[T], k: usize) -> Result<Var> {
        let s = self.shapes[x.0].clone();
        if s.len() != 2 || k == 0 || idx.len() != w.len() || idx.len() % k != 0 {
            return Err(Error::invalid(format!(
                "weighted_gather: x {s:?}, {} indices, {} weights, k={k}",
                idx.len(),
                w.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        let m = idx.len() / k;
        let xv = &self.values[x.0];
        let mut out = vec![T::zero(); m * c];
        for i in 0..m {
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..k {
                let src = idx[i * k + j];
                if src >= n {
                    return Err(Error::invalid(format!("weighted_gather index {src} out of range")));
                }
                let wt = w[i * k + j];
                for (o, &v) in orow.iter_mut().zip(&xv[src * c..(src + 1) * c]) {
                    *o += wt * v;
                }
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(
            vec![m, c],
            out,
            req,
            Op::WeightedGather {
                x,
                idx: idx.to_vec(),
                w: w.to_vec(),
                k,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.values[x.0].len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shapes[x.0].clone(),
                right: shape,
            });
        }
        let out = self.values[x.0].clone();
        let req = self.requires[x.0];
        Ok(self.push(shape, out, req, Op::Reshape(x)))
    }

    /// Maximum along `axis` (removed from the output shape). Ties resolve to
    /// the lowest index; the gradient routes entirely to the argmax element.
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let s = self.shapes[x.0].clone();
        let (outer, len, inner) = split_axis(&s, axis)?;
        if len == 0 {
            return Err(Error::invalid("max_reduce over empty axis"));
        }
        let xv = &self.values[x.0];
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&xv[base..base + inner]);
            argmax.resize(argmax.len() + inner, 0usize);
            let ostart = o * inner;
            for l in 1..len {
                let row = &xv[base + l * inner..base + (l + 1) * inner];
                for (j, &v) in row.iter().enumerate() {
                    if v > out[ostart + j] {
                        out[ostart + j] = v;
                        argmax[ostart + j] = l;
                    }
                }
            }
        }
        let mut h = self.branch;
        for &a in &argmax {
            h = mix(h, a as u64);
        }
        self.branch = h;
        let req = self.requires[x.0];
        let v = self.push(
            removed_axis(&s, axis),
            out,
            req,
            Op::MaxReduce {
                x,
                outer,
                len,
                inner,
                argmax: argmax.clone(),
            },
        );
        Ok((v, argmax))
    }

    /// Sum along `axis` (removed from the output shape).
    pub fn sum_over(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shapes[x.0].clone();
        let (outer, len, inner) = split_axis(&s, axis)?;
        let xv = &self.values[x.0];
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let orow = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (acc, &v) in orow.iter_mut().zip(&xv[base..base + inner]) {
                    *acc += v;
                }
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(removed_axis(&s, axis), out, req, Op::SumReduce { x, outer, len, inner }))
    }

    /// Softmax along `axis`, with max subtraction. Rejects non-finite input.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shapes[x.0].clone();
        let (outer, len, inner) = split_axis(&s, axis)?;
        let xv = &self.values[x.0];
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = vec![T::zero(); xv.len()];
        let mut mx = vec![T::zero(); inner];
        let mut den = vec![T::zero(); inner];
        for o in 0..outer {
            let base = o * len * inner;
            mx.copy_from_slice(&xv[base..base + inner]);
            for l in 1..len {
                for (m, &v) in mx.iter_mut().zip(&xv[base + l * inner..base + (l + 1) * inner]) {
                    if v > *m {
                        *m = v;
                    }
                }
            }
            den.iter_mut().for_each(|d| *d = T::zero());
            for l in 0..len {
                let off = base + l * inner;
                for j in 0..inner {
                    let e = (xv[off + j] - mx[j]).exp();
                    out[off + j] = e;
                    den[j] += e;
                }
            }
            for l in 0..len {
                let off = base + l * inner;
                for j in 0..inner {
                    out[off + j] /= den[j];
                }
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(s, out, req, Op::Softmax { x, outer, len, inner }))
    }

    /// Euclidean norm over the last axis; output last extent 1. The zero
    /// vector gets a zero subgradient.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let s = self.shapes[x.0].clone();
        let c = *s.last().unwrap();
        let out: Vec<T> = self.values[x.0]
            .chunks_exact(c)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = 1;
        let req = self.requires[x.0];
        self.push(shape, out, req, Op::RowNorm(x))
    }

    /// Per-row L2 normalization over the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let s = self.shapes[x.0].clone();
        let c = *s.last().unwrap();
        let eps = T::lit(NORM_EPS);
        let mut out = Vec::with_capacity(self.values[x.0].len());
        for r in self.values[x.0].chunks_exact(c) {
            let n = (r.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            out.extend(r.iter().map(|&v| v / n));
        }
        let req = self.requires[x.0];
        self.push(s, out, req, Op::L2Normalize(x))
    }

    /// Per-row standardization over the last axis: `(x - mean) / std`.
    pub fn standardize(&mut self, x: Var) -> Var {
        let s = self.shapes[x.0].clone();
        let c = *s.last().unwrap();
        let cn = T::from_usize(c).unwrap();
        let eps = T::lit(STD_EPS);
        let mut out = Vec::with_capacity(self.values[x.0].len());
        for r in self.values[x.0].chunks_exact(c) {
            let mean = r.iter().copied().sum::<T>() / cn;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let sd = (var + eps).sqrt();
            out.extend(r.iter().map(|&v| (v - mean) / sd));
        }
        let req = self.requires[x.0];
        self.push(s, out, req, Op::Standardize(x))
    }

    /// Inner product of matching rows; output last extent 1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let s = self.shapes[a.0].clone();
        let c = *s.last().unwrap();
        let out = self.values[a.0]
            .chunks_exact(c)
            .zip(self.values[b.0].chunks_exact(c))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = 1;
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(shape, out, req, Op::RowDot(a, b)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = self.values[x.0].iter().copied().sum::<T>();
        let req = self.requires[x.0];
        self.push(vec![1], vec![out], req, Op::SumAll(x))
    }

    /// `sum_i w_i * x_i` over all elements of `x`, to a scalar.
    pub fn weighted_sum(&mut self, x: Var, w: &[T]) -> Result<Var> {
        if w.len() != self.values[x.0].len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                left: self.shapes[x.0].clone(),
                right: vec![w.len()],
            });
        }
        let out = self.values[x.0]
            .iter()
            .zip(w)
            .map(|(&v, &wt)| v * wt)
            .sum::<T>();
        let req = self.requires[x.0];
        Ok(self.push(vec![1], vec![out], req, Op::WeightedSum { x, w: w.to_vec() }))
    }

    // ----------------------------------------------------------- backward

    /// Clears every gradient so the graph can be differentiated again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.swept = false;
    }

    /// Populates dLoss/dNode for every node that requires a gradient.
    pub fn backprop(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(Error::AlreadyBackpropagated);
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::Shape {
                op: "backprop (loss must be scalar)",
                left: self.shapes[loss.0].clone(),
                right: vec![1],
            });
        }
        self.swept = true;
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.requires[id] {
                continue;
            }
            let Some(gy) = self.grads[id].take() else {
                continue;
            };
            self.backward_node(id, &gy);
            self.grads[id] = Some(gy);
        }
        // Leaves that require gradients but were never reached hold zeros.
        for id in 0..self.values.len() {
            if self.requires[id] && self.grads[id].is_none() && matches!(self.ops[id], Op::Leaf) {
                self.grads[id] = Some(vec![T::zero(); self.values[id].len()]);
            }
        }
        Ok(())
    }

    fn grad_buf<'a>(grads: &'a mut [Option<Vec<T>>], requires: &[bool], values: &[Vec<T>], v: Var) -> Option<&'a mut Vec<T>> {
        if !requires[v.0] {
            return None;
        }
        let len = values[v.0].len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&mut self, id: usize, gy: &[T]) {
        let values = &self.values;
        let shapes = &self.shapes;
        let grads = &mut self.grads;
        let req = &self.requires;
        let y = &values[id];
        macro_rules! buf {
            ($v:expr) => {
                Self::grad_buf(grads, req, values, $v)
            };
        }
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let cin = shapes[w.0][0];
                let cout = shapes[w.0][1];
                let rows = values[x.0].len() / cin;
                if let Some(gb) = buf!(*b) {
                    for r in 0..rows {
                        for (g, &d) in gb.iter_mut().zip(&gy[r * cout..(r + 1) * cout]) {
                            *g += d;
                        }
                    }
                }
                let (ci, co) = (cin as isize, cout as isize);
                if let Some(gw) = buf!(*w) {
                    T::gemm_acc(cin, rows, cout, &values[x.0], [1, ci], gy, [co, 1], gw, [co, 1]);
                }
                if let Some(gx) = buf!(*x) {
                    T::gemm_acc(rows, cout, cin, gy, [co, 1], &values[w.0], [1, co], gx, [ci, 1]);
                }
            }
            Op::LeakyRelu(x) => {
                let slope = T::lit(LEAKY_SLOPE);
                if let Some(gx) = buf!(*x) {
                    for ((g, &d), &xv) in gx.iter_mut().zip(gy).zip(&values[x.0]) {
                        *g += if xv >= T::zero() { d } else { d * slope };
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = buf!(*x) {
                    for ((g, &d), &s) in gx.iter_mut().zip(gy).zip(y) {
                        *g += d * s * (T::one() - s);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = buf!(*x) {
                    for ((g, &d), &t) in gx.iter_mut().zip(gy).zip(y) {
                        *g += d * (T::one() - t * t);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
                if let Some(gb) = buf!(*b) {
                    gb.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
                if let Some(gb) = buf!(*b) {
                    gb.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = buf!(*a) {
                    for ((g, &d), &bv) in ga.iter_mut().zip(gy).zip(&values[b.0]) {
                        *g += d * bv;
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for ((g, &d), &av) in gb.iter_mut().zip(gy).zip(&values[a.0]) {
                        *g += d * av;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *s);
                }
            }
            Op::OneMinus(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d);
                }
            }
            Op::Concat(parts) => {
                let total = *shapes[id].last().unwrap();
                let rows = gy.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = *shapes[p.0].last().unwrap();
                    if let Some(gp) = buf!(p) {
                        for r in 0..rows {
                            for (g, &d) in gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&gy[r * total + off..r * total + off + w])
                            {
                                *g += d;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Slice { x, start, len } => {
                let c = *shapes[x.0].last().unwrap();
                if let Some(gx) = buf!(*x) {
                    let rows = gx.len() / c;
                    for r in 0..rows {
                        for (g, &d) in gx[r * c + start..r * c + start + len]
                            .iter_mut()
                            .zip(&gy[r * len..(r + 1) * len])
                        {
                            *g += d;
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let width = gy.len() / idx.len();
                if let Some(gx) = buf!(*x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (g, &d) in gx[i * width..(i + 1) * width]
                            .iter_mut()
                            .zip(&gy[r * width..(r + 1) * width])
                        {
                            *g += d;
                        }
                    }
                }
            }
            Op::WeightedGather { x, idx, w, k } => {
                let c = shapes[x.0][1];
                if let Some(gx) = buf!(*x) {
                    for (p, (&src, &wt)) in idx.iter().zip(w).enumerate() {
                        let i = p / *k;
                        for (g, &d) in gx[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(&gy[i * c..(i + 1) * c])
                        {
                            *g += wt * d;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::MaxReduce {
                x,
                outer,
                len,
                inner,
                argmax,
            } => {
                if let Some(gx) = buf!(*x) {
                    for o in 0..*outer {
                        for j in 0..*inner {
                            let a = argmax[o * inner + j];
                            gx[(o * len + a) * inner + j] += gy[o * inner + j];
                        }
                    }
                }
            }
            Op::SumReduce { x, outer, len, inner } => {
                if let Some(gx) = buf!(*x) {
                    for o in 0..*outer {
                        let drow = &gy[o * inner..(o + 1) * inner];
                        for l in 0..*len {
                            let base = (o * len + l) * inner;
                            for (g, &d) in gx[base..base + inner].iter_mut().zip(drow) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if let Some(gx) = buf!(*x) {
                    let mut dot = vec![T::zero(); *inner];
                    for o in 0..*outer {
                        let base = o * len * inner;
                        dot.iter_mut().for_each(|d| *d = T::zero());
                        for l in 0..*len {
                            for j in 0..*inner {
                                let p = base + l * inner + j;
                                dot[j] += gy[p] * y[p];
                            }
                        }
                        for l in 0..*len {
                            for j in 0..*inner {
                                let p = base + l * inner + j;
                                gx[p] += y[p] * (gy[p] - dot[j]);
                            }
                        }
                    }
                }
            }
            Op::RowNorm(x) => {
                let c = *shapes[x.0].last().unwrap();
                if let Some(gx) = buf!(*x) {
                    for (r, (&n, &d)) in y.iter().zip(gy).enumerate() {
                        if n == T::zero() {
                            continue;
                        }
                        let s = d / n;
                        for (g, &v) in gx[r * c..(r + 1) * c].iter_mut().zip(&values[x.0][r * c..(r + 1) * c]) {
                            *g += s * v;
                        }
                    }
                }
            }
            Op::L2Normalize(x) => {
                let c = *shapes[x.0].last().unwrap();
                let eps = T::lit(NORM_EPS);
                if let Some(gx) = buf!(*x) {
                    for (r, xr) in values[x.0].chunks_exact(c).enumerate() {
                        let n = (xr.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
                        let yr = &y[r * c..(r + 1) * c];
                        let dr = &gy[r * c..(r + 1) * c];
                        let yd: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for ((g, &d), &yv) in gx[r * c..(r + 1) * c].iter_mut().zip(dr).zip(yr) {
                            *g += (d - yv * yd) / n;
                        }
                    }
                }
            }
            Op::Standardize(x) => {
                let c = *shapes[x.0].last().unwrap();
                let cn = T::from_usize(c).unwrap();
                let eps = T::lit(STD_EPS);
                if let Some(gx) = buf!(*x) {
                    for (r, xr) in values[x.0].chunks_exact(c).enumerate() {
                        let mean = xr.iter().copied().sum::<T>() / cn;
                        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
                        let sd = (var + eps).sqrt();
                        let yr = &y[r * c..(r + 1) * c];
                        let dr = &gy[r * c..(r + 1) * c];
                        let md = dr.iter().copied().sum::<T>() / cn;
                        let mdy = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>() / cn;
                        for ((g, &d), &yv) in gx[r * c..(r + 1) * c].iter_mut().zip(dr).zip(yr) {
                            *g += (d - md - yv * mdy) / sd;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let c = *shapes[a.0].last().unwrap();
                if let Some(ga) = buf!(*a) {
                    for (r, &d) in gy.iter().enumerate() {
                        for (g, &bv) in ga[r * c..(r + 1) * c].iter_mut().zip(&values[b.0][r * c..(r + 1) * c]) {
                            *g += d * bv;
                        }
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for (r, &d) in gy.iter().enumerate() {
                        for (g, &av) in gb[r * c..(r + 1) * c].iter_mut().zip(&values[a.0][r * c..(r + 1) * c]) {
                            *g += d * av;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = buf!(*x) {
                    let d = gy[0];
                    gx.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::WeightedSum { x, w } => {
                if let Some(gx) = buf!(*x) {
                    let d = gy[0];
                    gx.iter_mut().zip(w).for_each(|(g, &wt)| *g += d * wt);
                }
            }
        }
    }
}
