use std::sync::atomic::{AtomicU32, Ordering};

use super::ops::{self, BinaryKind, ConvGeom, Tap};
use super::{Result, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Floor applied to the mask mass in [`Graph::masked_global_pool`].
pub const POOL_EPSILON: f32 = 1e-6;

/// Handle to a tensor recorded on a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    id: usize,
}

impl Var {
    /// Position of the node in its graph's topological order.
    pub fn node_id(&self) -> usize {
        self.id
    }
}

/// Result of [`Graph::masked_global_pool`].
#[derive(Clone, Copy, Debug)]
pub struct MaskedPool {
    pub value: Var,
    /// Set when the mask mass fell below the pooling floor; `value` is then zero.
    pub empty_mask: bool,
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        /// `None` when both operands share a shape.
        b_index: Option<Vec<usize>>,
    },
    Scale {
        x: usize,
        factor: f32,
    },
    Sum {
        x: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
        /// im2col buffer; only kept when the weight needs a gradient.
        cols: Option<Vec<f32>>,
    },
    Relu {
        x: usize,
    },
    Resize {
        x: usize,
        ys: Vec<Tap>,
        xs: Vec<Tap>,
        identity: bool,
    },
    MaskedPool {
        feat: usize,
        mask: Vec<f32>,
        denom: f32,
        empty: bool,
    },
    Tile {
        v: usize,
        h: usize,
        w: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    SoftmaxCe {
        logits: usize,
        probs: Vec<f32>,
        target: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    needs_grad: bool,
    op: Op,
}

/// A single-use record of tensor operations for reverse-mode
/// differentiation.
///
/// Nodes are appended in execution order, so the node list is always
/// topologically sorted. [`Graph::backward`] may run once; afterwards the
/// forward values remain readable but no further backward pass is allowed.
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Records an input tensor. Only leaves created with
    /// `requires_grad = true` receive gradients from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, requires_grad, Op::Leaf)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.index(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.index(v)].requires_grad
    }

    fn index(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        v.id
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, needs_grad: bool, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            needs_grad,
            op,
        });
        Var { graph: self.id, id }
    }

    fn push_op(&mut self, value: Tensor, inputs: &[usize], op: Op) -> Var {
        let needs = inputs.iter().any(|&i| self.needs(i));
        self.push(value, false, needs, op)
    }

    /// Elementwise `a (+|-|*) b`. `b` may have size 1 along any subset of
    /// `a`'s axes, in which case it is repeated along them.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ai, bi) = (self.index(a), self.index(b));
        let a_shape = self.nodes[ai].value.shape();
        let b_shape = self.nodes[bi].value.shape();
        let b_index = if a_shape == b_shape {
            None
        } else if a_shape.len() == b_shape.len() && a_shape.iter().zip(b_shape).all(|(&da, &db)| db == da || db == 1) {
            Some(ops::broadcast_index_map(a_shape, b_shape))
        } else {
            return Err(TensorError::shape(
                "elementwise",
                format!("{b_shape:?} does not broadcast onto {a_shape:?}"),
            ));
        };
        let av = self.nodes[ai].value.data();
        let bv = self.nodes[bi].value.data();
        let f = |x: f32, y: f32| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<f32> = match &b_index {
            None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Some(map) => av.iter().zip(map).map(|(&x, &j)| f(x, bv[j])).collect(),
        };
        let value = Tensor::new(a_shape.to_vec(), data)?;
        Ok(self.push_op(
            value,
            &[ai, bi],
            Op::Binary {
                kind,
                a: ai,
                b: bi,
                b_index,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let xi = self.index(x);
        let value = self.nodes[xi].value.map(|v| v * factor);
        self.push_op(value, &[xi], Op::Scale { x: xi, factor })
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let xi = self.index(x);
        let total: f64 = self.nodes[xi].value.data().iter().map(|&v| v as f64).sum();
        self.push_op(Tensor::scalar(total as f32), &[xi], Op::Sum { x: xi })
    }

    /// 2-D cross-correlation of a `[C_in,H,W]` input with a
    /// `[C_out,C_in,k,k]` kernel (k odd). Output size is
    /// `floor((H + 2·pad − k) / stride) + 1`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ii, wi, bi) = (self.index(input), self.index(weight), self.index(bias));
        let (c_in, h, w) = self.nodes[ii].value.dims3()?;
        let geom = match self.nodes[wi].value.shape()[..] {
            [c_out, wc, k, k2] if k == k2 && k % 2 == 1 && wc == c_in => {
                if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
                    return Err(TensorError::shape(
                        "conv2d",
                        format!("kernel {k} with pad {pad} and stride {stride} does not fit {h}x{w}"),
                    ));
                }
                ConvGeom {
                    c_in,
                    h,
                    w,
                    c_out,
                    k,
                    stride,
                    pad,
                    ho: (h + 2 * pad - k) / stride + 1,
                    wo: (w + 2 * pad - k) / stride + 1,
                }
            }
            ref s => {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("weight {s:?} incompatible with input of {c_in} channels (need [C_out,{c_in},k,k], k odd)"),
                ))
            }
        };
        if self.nodes[bi].value.shape() != [geom.c_out] {
            return Err(TensorError::shape(
                "conv2d",
                format!("bias {:?} must be [{}]", self.nodes[bi].value.shape(), geom.c_out),
            ));
        }
        let cols = ops::im2col(self.nodes[ii].value.data(), &geom);
        let out = ops::conv_forward(&cols, self.nodes[wi].value.data(), self.nodes[bi].value.data(), &geom);
        let value = Tensor::new(vec![geom.c_out, geom.ho, geom.wo], out)?;
        let cols = self.needs(wi).then_some(cols);
        Ok(self.push_op(
            value,
            &[ii, wi, bi],
            Op::Conv2d {
                input: ii,
                weight: wi,
                bias: bi,
                geom,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xi = self.index(x);
        // NaN passes through so that divergence stays visible downstream.
        let value = self.nodes[xi]
            .value
            .map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        self.push_op(value, &[xi], Op::Relu { x: xi })
    }

    /// Bilinear resampling of a `[C,H,W]` tensor with half-pixel centres
    /// (align-corners = false).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xi = self.index(x);
        let (c, h, w) = self.nodes[xi].value.dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::shape("bilinear_resize", "output size must be positive"));
        }
        let identity = (h, w) == (out_h, out_w);
        let ys = ops::bilinear_taps(h, out_h);
        let xs = ops::bilinear_taps(w, out_w);
        let value = if identity {
            self.nodes[xi].value.clone()
        } else {
            let data = ops::resize_forward(self.nodes[xi].value.data(), c, h, w, &ys, &xs);
            Tensor::new(vec![c, out_h, out_w], data)?
        };
        Ok(self.push_op(
            value,
            &[xi],
            Op::Resize {
                x: xi,
                ys,
                xs,
                identity,
            },
        ))
    }

    /// Mask-weighted spatial mean of a `[C,h,w]` feature map:
    /// `out[c] = Σ feat[c]·mask / max(Σ mask, 1e-6)`, shaped `[C,1,1]`.
    /// The mask is treated as a constant with values in `[0, 1]`.
    pub fn masked_global_pool(&mut self, feat: Var, mask: &Tensor) -> Result<MaskedPool> {
        let fi = self.index(feat);
        let (c, h, w) = self.nodes[fi].value.dims3()?;
        if mask.shape() != [1, h, w] {
            return Err(TensorError::shape(
                "masked_global_pool",
                format!("mask {:?} must be [1,{h},{w}]", mask.shape()),
            ));
        }
        if let Some((index, &value)) = mask.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(TensorError::InvalidTarget { index, value });
        }
        let mass: f64 = mask.data().iter().map(|&v| v as f64).sum();
        let empty = mass < POOL_EPSILON as f64;
        let denom = (mass as f32).max(POOL_EPSILON);
        let plane = h * w;
        let fv = self.nodes[fi].value.data();
        let out: Vec<f32> = (0..c)
            .map(|ch| {
                if empty {
                    return 0.0;
                }
                let acc: f64 = fv[ch * plane..(ch + 1) * plane]
                    .iter()
                    .zip(mask.data())
                    .map(|(&f, &m)| (f * m) as f64)
                    .sum();
                (acc / denom as f64) as f32
            })
            .collect();
        let value = Tensor::new(vec![c, 1, 1], out)?;
        let var = self.push_op(
            value,
            &[fi],
            Op::MaskedPool {
                feat: fi,
                mask: mask.data().to_vec(),
                denom,
                empty,
            },
        );
        Ok(MaskedPool {
            value: var,
            empty_mask: empty,
        })
    }

    /// Repeats a `[C,1,1]` vector over an `h × w` grid.
    pub fn tile_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let vi = self.index(v);
        let shape = self.nodes[vi].value.shape();
        let c = match shape[..] {
            [c, 1, 1] => c,
            _ => {
                return Err(TensorError::shape(
                    "tile_spatial",
                    format!("expected [C,1,1], got {shape:?}"),
                ))
            }
        };
        if h == 0 || w == 0 {
            return Err(TensorError::shape("tile_spatial", "grid size must be positive"));
        }
        let src = self.nodes[vi].value.data();
        let mut data = Vec::with_capacity(c * h * w);
        for &x in src {
            data.extend(std::iter::repeat_n(x, h * w));
        }
        let value = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push_op(value, &[vi], Op::Tile { v: vi, h, w }))
    }

    /// Stacks `[C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let ids: Vec<usize> = parts.iter().map(|&p| self.index(p)).collect();
        let first = ids
            .first()
            .ok_or_else(|| TensorError::shape("concat_channels", "no inputs"))?;
        let (_, h, w) = self.nodes[*first].value.dims3()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for &i in &ids {
            let (c, hi, wi) = self.nodes[i].value.dims3()?;
            if (hi, wi) != (h, w) {
                return Err(TensorError::shape(
                    "concat_channels",
                    format!("spatial size {hi}x{wi} differs from {h}x{w}"),
                ));
            }
            channels += c;
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let value = Tensor::new(vec![channels, h, w], data)?;
        Ok(self.push_op(value, &ids, Op::Concat { parts: ids.clone() }))
    }

    /// Mean over pixels of `−log softmax(logits)[target]` for `[2,h,w]`
    /// logits and a `[1,h,w]` target holding 0 (background) or 1
    /// (foreground).
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let li = self.index(logits);
        let (c, h, w) = self.nodes[li].value.dims3()?;
        if c != 2 || target.shape() != [1, h, w] {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                format!(
                    "logits {:?} and target {:?} must be [2,H,W] and [1,H,W]",
                    self.nodes[li].value.shape(),
                    target.shape()
                ),
            ));
        }
        if let Some((index, &value)) = target.data().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(TensorError::InvalidTarget { index, value });
        }
        let (loss, probs) = ops::softmax_ce_forward(self.nodes[li].value.data(), target.data(), h * w);
        Ok(self.push_op(
            Tensor::scalar(loss),
            &[li],
            Op::SoftmaxCe {
                logits: li,
                probs,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Propagates `d loss / d v` to every leaf created with
    /// `requires_grad = true` that the loss depends on. Gradients from
    /// several uses of one tensor add up.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let li = self.index(loss);
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; li + 1];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);

        for id in (0..=li).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                Op::Binary { kind, a, b, b_index } => {
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    let b_at = |i: usize| b_index.as_ref().map_or(i, |m| m[i]);
                    if self.needs(*a) {
                        let ga: Vec<f32> = match kind {
                            BinaryKind::Add | BinaryKind::Sub => g.clone(),
                            BinaryKind::Mul => g.iter().enumerate().map(|(i, &gi)| gi * bv[b_at(i)]).collect(),
                        };
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0f32; bv.len()];
                        for (i, &gi) in g.iter().enumerate() {
                            gb[b_at(i)] += match kind {
                                BinaryKind::Add => gi,
                                BinaryKind::Sub => -gi,
                                BinaryKind::Mul => gi * av[i],
                            };
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, g.iter().map(|v| v * factor).collect());
                }
                Op::Sum { x } => {
                    let n = self.nodes[*x].value.len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    if self.needs(*input) {
                        let gi = ops::conv_input_grad(&g, self.nodes[*weight].value.data(), geom);
                        accumulate(&mut grads, *input, gi);
                    }
                    if let Some(cols) = cols {
                        accumulate(&mut grads, *weight, ops::conv_weight_grad(&g, cols, geom));
                    }
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, ops::conv_bias_grad(&g, geom));
                    }
                }
                Op::Relu { x } => {
                    let xv = self.nodes[*x].value.data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| {
                            if xi > 0.0 {
                                gi
                            } else if xi.is_nan() {
                                f32::NAN
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Resize { x, ys, xs, identity } => {
                    if *identity {
                        accumulate(&mut grads, *x, g);
                    } else {
                        let (c, h, w) = self.nodes[*x].value.dims3()?;
                        accumulate(&mut grads, *x, ops::resize_backward(&g, c, h, w, ys, xs));
                    }
                }
                Op::MaskedPool {
                    feat,
                    mask,
                    denom,
                    empty,
                } => {
                    let (c, h, w) = self.nodes[*feat].value.dims3()?;
                    let plane = h * w;
                    let mut gf = vec![0.0f32; c * plane];
                    if !*empty {
                        for ch in 0..c {
                            let s = g[ch] / denom;
                            for (dst, &m) in gf[ch * plane..(ch + 1) * plane].iter_mut().zip(mask) {
                                *dst = s * m;
                            }
                        }
                    }
                    accumulate(&mut grads, *feat, gf);
                }
                Op::Tile { v, h, w } => {
                    let gv = g
                        .chunks(h * w)
                        .map(|plane| plane.iter().map(|&x| x as f64).sum::<f64>() as f32)
                        .collect();
                    accumulate(&mut grads, *v, gv);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.len();
                        if self.needs(p) {
                            accumulate(&mut grads, p, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                Op::SoftmaxCe { logits, probs, target } => {
                    let gl = ops::softmax_ce_backward(g[0], probs, target, target.len());
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }

        Ok(Gradients {
            graph: self.id,
            grads: leaf_grads,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], id: usize, contribution: Vec<f32>) {
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contribution),
    }
}

/// Gradients of one backward pass, keyed by leaf variable.
pub struct Gradients {
    graph: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` was not a `requires_grad` leaf reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.graph, self.graph, "variable belongs to a different graph");
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        assert_eq!(v.graph, self.graph, "variable belongs to a different graph");
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_identities() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[2, 2], 1.0));
        let zeros = g.constant(Tensor::zeros(&[2, 2]));
        let prod = g.mul(ones, zeros).unwrap();
        assert_eq!(g.value(prod).data(), &[0.0; 4]);

        let a = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let z = g.constant(Tensor::zeros(&[1, 3]));
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn elementwise_rejects_non_broadcastable() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        let c = g.constant(Tensor::zeros(&[2, 3, 1]));
        assert!(g.mul(a, c).is_err());
    }

    #[test]
    fn broadcast_gradient_sums_repeated_axes() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.variable(t(&[1, 3], &[10.0, 20.0, 30.0]));
        let p = g.mul(a, b).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[10.0, 20.0, 30.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        let mut g = Graph::new();
        let input = t(
            &[1, 3, 4],
            &[0.5, -1.0, 2.0, 3.0, 4.0, 5.0, -6.0, 7.0, 8.0, 9.0, 1.5, 0.25],
        );
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let x = g.constant(input.clone());
        let w = g.constant(t(&[1, 1, 3, 3], &kernel));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 5, 5]));
        let wrong_channels = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let even_kernel = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(g.conv2d(x, wrong_channels, b, 1, 1).is_err());
        assert!(g.conv2d(x, even_kernel, b, 1, 0).is_err());
        let big = g.constant(Tensor::zeros(&[1, 2, 7, 7]));
        assert!(g.conv2d(x, big, b, 1, 0).is_err());
    }

    #[test]
    fn conv_stride_two_uses_floor_output_size() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 64, 64]));
        let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 32, 32]);
    }

    #[test]
    fn relu_values_and_gate() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let mut h = Graph::new();
        let z = h.constant(t(&[1], &[f32::NAN]));
        let z = h.relu(z);
        assert!(h.value(z).data()[0].is_nan());
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn resize_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2], &[0.0, 2.0]));
        let up = g.bilinear_resize(x, 1, 4).unwrap();
        assert_eq!(g.value(up).data(), &[0.0, 0.5, 1.5, 2.0]);

        let src = t(&[2, 3, 3], &(0..18).map(|v| v as f32 * 0.37 - 2.0).collect::<Vec<_>>());
        let same = g.constant(src.clone());
        let out = g.bilinear_resize(same, 3, 3).unwrap();
        assert!(g.value(out).bitwise_eq(&src));

        let c = g.constant(Tensor::full(&[1, 3, 5], 0.7));
        for (h, w) in [(1, 1), (7, 2), (12, 20)] {
            let r = g.bilinear_resize(c, h, w).unwrap();
            assert!(g.value(r).data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        }
    }

    #[test]
    fn masked_pool_cases() {
        let feat = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 8.0]);
        let mut g = Graph::new();
        let f = g.variable(feat);
        let full = g.masked_global_pool(f, &Tensor::full(&[1, 2, 2], 1.0)).unwrap();
        assert!(!full.empty_mask);
        assert_eq!(g.value(full.value).data(), &[2.5, 3.0]);

        let single = g.masked_global_pool(f, &t(&[1, 2, 2], &[0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(g.value(single.value).data(), &[3.0, 5.0]);

        let empty = g.masked_global_pool(f, &Tensor::zeros(&[1, 2, 2])).unwrap();
        assert!(empty.empty_mask);
        assert_eq!(g.value(empty.value).data(), &[0.0, 0.0]);
        assert_eq!(g.shape(empty.value), &[2, 1, 1]);
    }

    #[test]
    fn tile_cases() {
        let mut g = Graph::new();
        let v = g.variable(t(&[1, 1, 1], &[3.0]));
        let same = g.tile_spatial(v, 1, 1).unwrap();
        assert_eq!(g.value(same).data(), &[3.0]);
        let grid = g.tile_spatial(v, 2, 2).unwrap();
        assert_eq!(g.value(grid).data(), &[3.0; 4]);
        let tall = g.tile_spatial(v, 3, 5).unwrap();
        let loss = g.sum(tall);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[15.0]);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::new();
        let target = t(&[1, 2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let flat = g.constant(Tensor::full(&[2, 2, 2], 0.3));
        let loss = g.softmax_cross_entropy(flat, &target).unwrap();
        assert!((g.value(loss).item() - std::f32::consts::LN_2).abs() < 1e-6);

        let mut confident = vec![0.0; 8];
        for p in 0..4 {
            let fg = target.data()[p] == 1.0;
            confident[if fg { 4 + p } else { p }] = 20.0;
        }
        let c = g.constant(t(&[2, 2, 2], &confident));
        let loss = g.softmax_cross_entropy(c, &target).unwrap();
        assert!(g.value(loss).item() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_inputs() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 2, 2]));
        let bad = t(&[1, 2, 2], &[0.0, 2.0, 1.0, 0.0]);
        assert!(matches!(
            g.softmax_cross_entropy(logits, &bad),
            Err(TensorError::InvalidTarget { index: 1, .. })
        ));
        assert!(matches!(
            g.softmax_cross_entropy(logits, &Tensor::zeros(&[1, 3, 2])),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let three = g.constant(Tensor::zeros(&[3, 2, 2]));
        assert!(g.softmax_cross_entropy(three, &Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn backward_sum_and_branches() {
        let mut g = Graph::new();
        let x = g.variable(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);

        // x feeds two branches: 2x and x*x; d/dx sum(2x + x*x) = 2 + 2x.
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.5, -3.0]));
        let twice = g.scale(x, 2.0);
        let sq = g.mul(x, x).unwrap();
        let s = g.add(twice, sq).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, -4.0]);
    }

    #[test]
    fn backward_is_single_use_and_needs_scalar() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(TensorError::GraphConsumed)));
        assert!(g.is_consumed());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let unused = g.variable(t(&[1], &[0.0]));
        let p = g.mul(x, c).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn concat_stacks_channels_and_splits_gradient() {
        let mut g = Graph::new();
        let a = g.variable(t(&[1, 1, 2], &[1.0, 2.0]));
        let b = g.variable(t(&[2, 1, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[3, 1, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = g.constant(t(&[3, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = g.mul(c, w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
    }
}
