use rand::Rng;

use super::kernels::{
    conv3d_backward, conv3d_forward, dense_backward, dense_forward, maxpool_backward, maxpool_forward, pooled_extent,
};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Network input slot (0 = S1, 1 = S2, 2 = S3).
    Input(usize),
    Conv {
        weight: ParamId,
        bias: ParamId,
        kernel: usize,
    },
    Relu,
    /// Channel-wise concatenation of all inputs.
    Concat,
    /// Element-wise sum of two inputs.
    Add,
    MaxPool,
    /// Fully connected layer over the flattened input.
    Dense {
        weight: ParamId,
        bias: ParamId,
    },
    Dropout {
        rate: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub name: String,
    /// Externally addressable tag (e.g. `zi.F12`) for feature-map dumps.
    pub tag: Option<String>,
    pub shape: [usize; 4],
    requires_grad: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T> Param<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(fan_in, fan_out)` for Xavier initialisation. Biases return `None`.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [out, inp] => Some((*inp, *out)),
            [out, inp, rest @ ..] => {
                let r: usize = rest.iter().product();
                Some((inp * r, out * r))
            }
            _ => None,
        }
    }
}

/// A static network topology plus parameter shapes.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_shapes: Vec<(String, Vec<usize>)>,
    output: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout disabled; deterministic.
    Inference,
    /// Dropout active.
    Train,
}

/// Every node value from one forward pass plus what backward needs.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    pub values: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
}

#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    Argmax(Vec<usize>),
    Mask(Vec<T>),
}

impl<T> Activations<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.values.last().expect("non-empty graph")
    }
}

fn shape_err(layer: &str, detail: String) -> Error {
    Error::ShapeMismatch {
        layer: layer.to_string(),
        detail,
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn param_shapes(&self) -> &[(String, Vec<usize>)] {
        &self.param_shapes
    }

    pub fn output(&self) -> NodeId {
        self.output.unwrap_or(self.nodes.len() - 1)
    }

    pub fn find_tag(&self, tag: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.tag.as_deref() == Some(tag))
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|n| n.tag.as_deref())
    }

    pub fn set_tag(&mut self, id: NodeId, tag: impl Into<String>) {
        self.nodes[id].tag = Some(tag.into());
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, name: String, shape: [usize; 4]) -> NodeId {
        let requires_grad = matches!(op, Op::Conv { .. } | Op::Dense { .. })
            || inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            name,
            tag: None,
            shape,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn param(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        self.param_shapes.push((name, shape));
        self.param_shapes.len() - 1
    }

    pub fn input(&mut self, slot: usize, shape: [usize; 4]) -> NodeId {
        self.push(Op::Input(slot), vec![], format!("input{slot}"), shape)
    }

    pub fn conv(&mut self, name: &str, x: NodeId, out_channels: usize, kernel: usize) -> NodeId {
        let [cin, d, h, w] = self.nodes[x].shape;
        let weight = self.param(format!("{name}.weight"), vec![out_channels, cin, kernel, kernel, kernel]);
        let bias = self.param(format!("{name}.bias"), vec![out_channels]);
        self.push(
            Op::Conv { weight, bias, kernel },
            vec![x],
            name.to_string(),
            [out_channels, d, h, w],
        )
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Relu, vec![x], name.to_string(), s)
    }

    /// Convolution followed by ReLU.
    pub fn conv_relu(&mut self, name: &str, x: NodeId, out_channels: usize, kernel: usize) -> NodeId {
        let c = self.conv(name, x, out_channels, kernel);
        self.relu(&format!("{name}.relu"), c)
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> Result<NodeId> {
        let first = self.nodes[xs[0]].shape;
        let mut channels = 0;
        for &x in xs {
            let s = self.nodes[x].shape;
            if s[1..] != first[1..] {
                return Err(shape_err(
                    name,
                    format!("concat needs equal spatial dims, got {:?} and {:?}", &first[1..], &s[1..]),
                ));
            }
            channels += s[0];
        }
        Ok(self.push(Op::Concat, xs.to_vec(), name.to_string(), [channels, first[1], first[2], first[3]]))
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
        if sa != sb {
            return Err(shape_err(name, format!("sum needs identical shapes, got {sa:?} and {sb:?}")));
        }
        Ok(self.push(Op::Add, vec![a, b], name.to_string(), sa))
    }

    pub fn maxpool(&mut self, name: &str, x: NodeId) -> NodeId {
        let [c, d, h, w] = self.nodes[x].shape;
        let shape = [c, pooled_extent(d), pooled_extent(h), pooled_extent(w)];
        self.push(Op::MaxPool, vec![x], name.to_string(), shape)
    }

    pub fn dense(&mut self, name: &str, x: NodeId, out: usize) -> NodeId {
        let n: usize = self.nodes[x].shape.iter().product();
        let weight = self.param(format!("{name}.weight"), vec![out, n]);
        let bias = self.param(format!("{name}.bias"), vec![out]);
        self.push(Op::Dense { weight, bias }, vec![x], name.to_string(), [out, 1, 1, 1])
    }

    pub fn dropout(&mut self, name: &str, x: NodeId, rate: f64) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Dropout { rate }, vec![x], name.to_string(), s)
    }

    /// Overrides the rate of every dropout layer.
    pub fn set_dropout_rate(&mut self, rate: f64) {
        for n in &mut self.nodes {
            if let Op::Dropout { rate: r } = &mut n.op {
                *r = rate;
            }
        }
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    /// Trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.param_shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Runs the graph on one sample. `inputs[slot]` feeds `Op::Input(slot)`.
    /// `rng` drives dropout masks in [`Mode::Train`].
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        params: &[Param<T>],
        inputs: &[Tensor<T>],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Activations<T>> {
        let out_id = self.output();
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(out_id + 1);
        let mut aux = Vec::with_capacity(out_id + 1);
        for node in &self.nodes[..=out_id] {
            let arg = |i: usize| &values[node.inputs[i]];
            let (v, a) = match &node.op {
                Op::Input(slot) => {
                    let x = inputs
                        .get(*slot)
                        .ok_or_else(|| shape_err(&node.name, format!("no input supplied for slot {slot}")))?;
                    if x.shape != node.shape {
                        return Err(shape_err(
                            &node.name,
                            format!("expected input {:?}, got {:?}", node.shape, x.shape),
                        ));
                    }
                    (x.clone(), Aux::None)
                }
                Op::Conv { weight, bias, kernel } => (
                    conv3d_forward(arg(0), &params[*weight].data, &params[*bias].data, node.shape[0], *kernel),
                    Aux::None,
                ),
                Op::Relu => {
                    let x = arg(0);
                    let data = x.data.iter().map(|&v| v.max(T::zero())).collect();
                    (Tensor::from_vec(x.shape, data), Aux::None)
                }
                Op::Concat => {
                    let mut data = Vec::with_capacity(node.shape.iter().product());
                    for &i in &node.inputs {
                        data.extend_from_slice(&values[i].data);
                    }
                    (Tensor::from_vec(node.shape, data), Aux::None)
                }
                Op::Add => {
                    let (a, b) = (arg(0), arg(1));
                    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
                    (Tensor::from_vec(node.shape, data), Aux::None)
                }
                Op::MaxPool => {
                    let (y, idx) = maxpool_forward(arg(0));
                    (y, Aux::Argmax(idx))
                }
                Op::Dense { weight, bias } => {
                    let y = dense_forward(&arg(0).data, &params[*weight].data, &params[*bias].data);
                    (Tensor::from_vec(node.shape, y), Aux::None)
                }
                Op::Dropout { rate } => {
                    let x = arg(0);
                    if mode == Mode::Train && *rate > 0.0 {
                        let keep = T::of(1.0 / (1.0 - rate));
                        let mask: Vec<T> = (0..x.data.len())
                            .map(|_| if rng.gen::<f64>() < *rate { T::zero() } else { keep })
                            .collect();
                        let data = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                        (Tensor::from_vec(x.shape, data), Aux::Mask(mask))
                    } else {
                        (x.clone(), Aux::None)
                    }
                }
            };
            values.push(v);
            aux.push(a);
        }
        Ok(Activations { values, aux })
    }

    /// Hash of every ReLU on/off pattern and pooling argmax in `acts`. Two
    /// passes with equal signatures lie on the same linear piece.
    pub fn kink_signature<T: Scalar>(&self, acts: &Activations<T>) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (id, node) in self.nodes.iter().enumerate().take(acts.values.len()) {
            match (&node.op, &acts.aux[id]) {
                (Op::Relu, _) => {
                    for v in &acts.values[id].data {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                (Op::MaxPool, Aux::Argmax(idx)) => idx.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Accumulates parameter gradients of `<output, grad_output>` into `grads`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[Param<T>],
        acts: &Activations<T>,
        grad_output: &[T],
        grads: &mut [Vec<T>],
    ) {
        let out_id = self.output();
        let mut g: Vec<Option<Tensor<T>>> = vec![None; out_id + 1];
        g[out_id] = Some(Tensor::from_vec(self.nodes[out_id].shape, grad_output.to_vec()));
        fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
            match slot {
                Some(s) => s.data.iter_mut().zip(&t.data).for_each(|(a, &b)| *a += b),
                None => *slot = Some(t),
            }
        }
        for id in (0..=out_id).rev() {
            let node = &self.nodes[id];
            let Some(gy) = g[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            let input_needs = |i: usize| self.nodes[node.inputs[i]].requires_grad;
            match &node.op {
                Op::Input(_) => {}
                Op::Conv { weight, bias, kernel } => {
                    let x = &acts.values[node.inputs[0]];
                    let (gw, gb) = split_two(grads, *weight, *bias);
                    if let Some(gx) =
                        conv3d_backward(x, &params[*weight].data, &gy, *kernel, gw, gb, input_needs(0))
                    {
                        accumulate(&mut g[node.inputs[0]], gx);
                    }
                }
                Op::Relu => {
                    let y = &acts.values[id];
                    let data = gy
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut g[node.inputs[0]], Tensor::from_vec(gy.shape, data));
                }
                Op::Concat => {
                    let mut off = 0;
                    for (k, &inp) in node.inputs.iter().enumerate() {
                        let s = self.nodes[inp].shape;
                        let n: usize = s.iter().product();
                        if input_needs(k) {
                            accumulate(&mut g[inp], Tensor::from_vec(s, gy.data[off..off + n].to_vec()));
                        }
                        off += n;
                    }
                }
                Op::Add => {
                    for k in 0..2 {
                        if input_needs(k) {
                            accumulate(&mut g[node.inputs[k]], gy.clone());
                        }
                    }
                }
                Op::MaxPool => {
                    let Aux::Argmax(idx) = &acts.aux[id] else {
                        unreachable!("pool without argmax")
                    };
                    let s = self.nodes[node.inputs[0]].shape;
                    accumulate(&mut g[node.inputs[0]], maxpool_backward(s, idx, &gy.data));
                }
                Op::Dense { weight, bias } => {
                    let x = &acts.values[node.inputs[0]];
                    let (gw, gb) = split_two(grads, *weight, *bias);
                    if let Some(gx) = dense_backward(&x.data, &params[*weight].data, &gy.data, gw, gb, input_needs(0)) {
                        accumulate(&mut g[node.inputs[0]], Tensor::from_vec(x.shape, gx));
                    }
                }
                Op::Dropout { .. } => {
                    let t = match &acts.aux[id] {
                        Aux::Mask(m) => {
                            let data = gy.data.iter().zip(m).map(|(&a, &b)| a * b).collect();
                            Tensor::from_vec(gy.shape, data)
                        }
                        _ => gy,
                    };
                    accumulate(&mut g[node.inputs[0]], t);
                }
            }
        }
    }
}

fn split_two<T>(grads: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b, "weight precedes bias");
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
