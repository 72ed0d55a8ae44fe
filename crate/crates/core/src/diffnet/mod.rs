//! Minimal reverse-mode differentiable compute core.
//!
//! A `Graph` is an append-only tape: every operation evaluates eagerly,
//! records what it needs for the backward pass, and returns a `DiffTensor`
//! handle. `backward` walks the tape in reverse topological order (which is
//! just reverse insertion order) exactly once per node.
//!
//! Only the operations the enhancement model actually needs are provided:
//! 1-D convolution and its transpose, dilated depthwise convolution,
//! pointwise nonlinearities, global layer norm, elementwise arithmetic,
//! framing, matrix multiply, and reductions.

pub mod check;
mod conv;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};

use crate::error::{Error, Result};

/// Handle to a value on a `Graph` tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffTensor {
    id: usize,
}

/// Named parameter tensors, ordered by name for deterministic iteration.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.tensors.insert(name.to_string(), value).is_none(),
            "duplicate parameter name '{name}'"
        );
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    PRelu { x: usize, alpha: usize },
    Sigmoid(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    MatMul(usize, usize),
    Conv1d { x: usize, w: usize, stride: usize, dilation: usize, pad: usize },
    ConvTranspose1d { x: usize, w: usize, stride: usize },
    DepthwiseConv1d { x: usize, w: usize, dilation: usize, pad: usize },
    GlobalLayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Frame { x: usize, hop: usize, window: Array1<f64> },
    SliceLast { x: usize, start: usize },
    Reshape(usize),
    ConcatLast(Vec<usize>),
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
    needs_grad: bool,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients produced by `Graph::backward`, indexed by tensor handle.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: DiffTensor) -> Option<&ArrayD<f64>> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }
}

/// Append-only reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes (used to bound retained-graph size in TBPTT).
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, t: DiffTensor) -> &ArrayD<f64> {
        &self.nodes[t.id].value
    }

    pub fn shape(&self, t: DiffTensor) -> &[usize] {
        self.nodes[t.id].value.shape()
    }

    /// Scalar value of a 0-d (or single-element) tensor.
    pub fn scalar(&self, t: DiffTensor) -> f64 {
        let v = self.value(t);
        assert!(v.len() == 1, "not a scalar: shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>, needs_grad: bool) -> Result<DiffTensor> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            requires_grad: false,
            name: None,
        });
        Ok(DiffTensor {
            id: self.nodes.len() - 1,
        })
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> Result<DiffTensor> {
        let t = self.push(Op::Leaf, value, requires_grad)?;
        self.nodes[t.id].requires_grad = requires_grad;
        Ok(t)
    }

    /// Constant (non-differentiable) leaf.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Result<DiffTensor> {
        self.leaf(value, false)
    }

    /// Differentiable leaf bound to a named parameter.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<DiffTensor> {
        let value = params
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("unknown parameter '{name}'")))?
            .clone();
        let t = self.leaf(value, true)?;
        self.nodes[t.id].name = Some(name.to_string());
        Ok(t)
    }

    fn binary_check(&self, a: DiffTensor, b: DiffTensor) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary_check(a, b)?;
        let v = &self.nodes[a.id].value + &self.nodes[b.id].value;
        let ng = self.needs(&[a.id, b.id]);
        self.push(Op::Add(a.id, b.id), v, ng)
    }

    pub fn sub(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary_check(a, b)?;
        let v = &self.nodes[a.id].value - &self.nodes[b.id].value;
        let ng = self.needs(&[a.id, b.id]);
        self.push(Op::Sub(a.id, b.id), v, ng)
    }

    pub fn mul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary_check(a, b)?;
        let v = &self.nodes[a.id].value * &self.nodes[b.id].value;
        let ng = self.needs(&[a.id, b.id]);
        self.push(Op::Mul(a.id, b.id), v, ng)
    }

    pub fn scale(&mut self, a: DiffTensor, k: f64) -> Result<DiffTensor> {
        let v = &self.nodes[a.id].value * k;
        let ng = self.needs(&[a.id]);
        self.push(Op::Scale(a.id, k), v, ng)
    }

    pub fn add_scalar(&mut self, a: DiffTensor, k: f64) -> Result<DiffTensor> {
        let v = &self.nodes[a.id].value + k;
        let ng = self.needs(&[a.id]);
        self.push(Op::AddScalar(a.id), v, ng)
    }

    pub fn relu(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let v = self.nodes[a.id].value.mapv(|x| x.max(0.0));
        let ng = self.needs(&[a.id]);
        self.push(Op::Relu(a.id), v, ng)
    }

    /// Parametric ReLU over a [C, T] input with per-channel slopes alpha [C].
    pub fn prelu(&mut self, x: DiffTensor, alpha: DiffTensor) -> Result<DiffTensor> {
        let xv = self.as2(x)?;
        let av = self.as1(alpha)?;
        if xv.nrows() != av.len() {
            return Err(Error::ShapeMismatch(format!(
                "prelu: {} channels vs {} slopes",
                xv.nrows(),
                av.len()
            )));
        }
        let mut v = xv.to_owned();
        for (c, mut row) in v.rows_mut().into_iter().enumerate() {
            let a = av[c];
            row.mapv_inplace(|e| if e > 0.0 { e } else { a * e });
        }
        let ng = self.needs(&[x.id, alpha.id]);
        self.push(Op::PRelu { x: x.id, alpha: alpha.id }, v.into_dyn(), ng)
    }

    pub fn sigmoid(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let v = self.nodes[a.id].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(&[a.id]);
        self.push(Op::Sigmoid(a.id), v, ng)
    }

    /// Natural log, elementwise.
    pub fn log(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let v = self.nodes[a.id].value.mapv(f64::ln);
        let ng = self.needs(&[a.id]);
        self.push(Op::Log(a.id), v, ng)
    }

    pub fn square(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let v = self.nodes[a.id].value.mapv(|x| x * x);
        let ng = self.needs(&[a.id]);
        self.push(Op::Square(a.id), v, ng)
    }

    /// Sum over all elements, producing a 0-d scalar tensor.
    pub fn sum(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let s = self.nodes[a.id].value.sum();
        let ng = self.needs(&[a.id]);
        self.push(Op::Sum(a.id), ArrayD::from_elem(IxDyn(&[]), s), ng)
    }

    pub fn mean(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let n = self.nodes[a.id].value.len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Matrix product of [m, k] and [k, n].
    pub fn matmul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        let av = self.as2(a)?;
        let bv = self.as2(b)?;
        if av.ncols() != bv.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let v = av.dot(&bv).into_dyn();
        let ng = self.needs(&[a.id, b.id]);
        self.push(Op::MatMul(a.id, b.id), v, ng)
    }

    /// Valid (or symmetrically zero-padded) 1-D cross-correlation:
    /// x [Cin, T], w [Cout, Cin, K] -> [Cout, T'].
    pub fn conv1d(
        &mut self,
        x: DiffTensor,
        w: DiffTensor,
        stride: usize,
        dilation: usize,
        pad: usize,
    ) -> Result<DiffTensor> {
        assert!(stride >= 1 && dilation >= 1);
        let xv = self.as2(x)?;
        let wv = self.as3(w)?;
        let (_, cin, kernel) = wv.dim();
        if xv.nrows() != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv1d: input has {} channels, weight expects {}",
                xv.nrows(),
                cin
            )));
        }
        let span = (kernel - 1) * dilation + 1;
        if conv::conv_out_len(xv.ncols(), kernel, stride, dilation, pad).is_none() {
            return Err(Error::InputTooShort {
                got: xv.ncols(),
                need: span,
            });
        }
        let v = conv::conv1d_forward(&xv, &wv, stride, dilation, pad).into_dyn();
        let ng = self.needs(&[x.id, w.id]);
        self.push(
            Op::Conv1d { x: x.id, w: w.id, stride, dilation, pad },
            v,
            ng,
        )
    }

    /// Transposed 1-D convolution (adjoint of conv1d):
    /// x [Cin, T], w [Cin, Cout, K] -> [Cout, (T-1)*stride + K].
    pub fn conv_transpose1d(
        &mut self,
        x: DiffTensor,
        w: DiffTensor,
        stride: usize,
    ) -> Result<DiffTensor> {
        assert!(stride >= 1);
        let xv = self.as2(x)?;
        let wv = self.as3(w)?;
        if xv.nrows() != wv.dim().0 {
            return Err(Error::ShapeMismatch(format!(
                "conv_transpose1d: input has {} channels, weight expects {}",
                xv.nrows(),
                wv.dim().0
            )));
        }
        let v = conv::conv_transpose1d_forward(&xv, &wv, stride).into_dyn();
        let ng = self.needs(&[x.id, w.id]);
        self.push(Op::ConvTranspose1d { x: x.id, w: w.id, stride }, v, ng)
    }

    /// Depthwise dilated 1-D convolution: x [C, T], w [C, K] -> [C, T'].
    pub fn depthwise_conv1d(
        &mut self,
        x: DiffTensor,
        w: DiffTensor,
        dilation: usize,
        pad: usize,
    ) -> Result<DiffTensor> {
        let xv = self.as2(x)?;
        let wv = self.as2(w)?;
        if xv.nrows() != wv.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "depthwise_conv1d: {} channels vs {} filters",
                xv.nrows(),
                wv.nrows()
            )));
        }
        let kernel = wv.ncols();
        let span = (kernel - 1) * dilation + 1;
        if conv::conv_out_len(xv.ncols(), kernel, 1, dilation, pad).is_none() {
            return Err(Error::InputTooShort {
                got: xv.ncols(),
                need: span,
            });
        }
        let v = conv::depthwise_conv1d_forward(&xv, &wv, dilation, pad).into_dyn();
        let ng = self.needs(&[x.id, w.id]);
        self.push(Op::DepthwiseConv1d { x: x.id, w: w.id, dilation, pad }, v, ng)
    }

    /// Global layer normalization over all C*T entries with per-channel affine.
    pub fn global_layer_norm(
        &mut self,
        x: DiffTensor,
        gain: DiffTensor,
        bias: DiffTensor,
        eps: f64,
    ) -> Result<DiffTensor> {
        assert!(eps > 0.0);
        let xv = self.as2(x)?;
        let gv = self.as1(gain)?;
        let bv = self.as1(bias)?;
        if xv.nrows() != gv.len() || xv.nrows() != bv.len() {
            return Err(Error::ShapeMismatch(
                "global_layer_norm: gain/bias channels".into(),
            ));
        }
        let n = xv.len() as f64;
        let mu = xv.sum() / n;
        let var = xv.mapv(|e| (e - mu) * (e - mu)).sum() / n;
        let std = (var + eps).sqrt();
        let mut v = xv.to_owned();
        for (c, mut row) in v.rows_mut().into_iter().enumerate() {
            let (g, b) = (gv[c], bv[c]);
            row.mapv_inplace(|e| g * (e - mu) / std + b);
        }
        let ng = self.needs(&[x.id, gain.id, bias.id]);
        self.push(
            Op::GlobalLayerNorm { x: x.id, gain: gain.id, bias: bias.id, eps },
            v.into_dyn(),
            ng,
        )
    }

    /// Slices a 1-D signal x [T] into windowed frames [n_frames, window.len()].
    pub fn frame(&mut self, x: DiffTensor, hop: usize, window: &Array1<f64>) -> Result<DiffTensor> {
        let xv = self.as1(x)?;
        let l = window.len();
        if xv.len() < l {
            return Err(Error::InputTooShort { got: xv.len(), need: l });
        }
        let n_frames = (xv.len() - l) / hop + 1;
        let mut v = Array2::<f64>::zeros((n_frames, l));
        for t in 0..n_frames {
            for k in 0..l {
                v[(t, k)] = xv[t * hop + k] * window[k];
            }
        }
        let ng = self.needs(&[x.id]);
        self.push(
            Op::Frame { x: x.id, hop, window: window.clone() },
            v.into_dyn(),
            ng,
        )
    }

    /// Takes `len` elements starting at `start` along the last axis.
    pub fn slice_last(&mut self, x: DiffTensor, start: usize, len: usize) -> Result<DiffTensor> {
        let xv = &self.nodes[x.id].value;
        let last = xv.ndim() - 1;
        if start + len > xv.shape()[last] {
            return Err(Error::ShapeMismatch(format!(
                "slice {}..{} of axis length {}",
                start,
                start + len,
                xv.shape()[last]
            )));
        }
        let v = xv
            .slice_axis(Axis(last), Slice::from(start..start + len))
            .to_owned();
        let ng = self.needs(&[x.id]);
        self.push(Op::SliceLast { x: x.id, start }, v, ng)
    }

    /// Same elements in row-major order under a new shape.
    pub fn reshape(&mut self, x: DiffTensor, shape: &[usize]) -> Result<DiffTensor> {
        let xv = &self.nodes[x.id].value;
        if shape.iter().product::<usize>() != xv.len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                xv.shape(),
                shape
            )));
        }
        let v = xv
            .to_owned()
            .into_shape_with_order(shape)
            .map_err(|e| Error::ShapeMismatch(format!("reshape: {e}")))?;
        let ng = self.needs(&[x.id]);
        self.push(Op::Reshape(x.id), v, ng)
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, parts: &[DiffTensor]) -> Result<DiffTensor> {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| self.nodes[t.id].value.view()).collect();
        let last = views[0].ndim() - 1;
        let v = ndarray::concatenate(Axis(last), &views)
            .map_err(|e| Error::ShapeMismatch(format!("concat: {e}")))?;
        let ids: Vec<usize> = parts.iter().map(|t| t.id).collect();
        let ng = self.needs(&ids);
        self.push(Op::ConcatLast(ids), v, ng)
    }

    fn as1(&self, t: DiffTensor) -> Result<ndarray::ArrayView1<'_, f64>> {
        self.nodes[t.id]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::ShapeMismatch(format!("expected rank 1, got {:?}", self.shape(t))))
    }

    fn as2(&self, t: DiffTensor) -> Result<ndarray::ArrayView2<'_, f64>> {
        self.nodes[t.id]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::ShapeMismatch(format!("expected rank 2, got {:?}", self.shape(t))))
    }

    fn as3(&self, t: DiffTensor) -> Result<ndarray::ArrayView3<'_, f64>> {
        self.nodes[t.id]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::ShapeMismatch(format!("expected rank 3, got {:?}", self.shape(t))))
    }

    /// Reverse-mode sweep from a scalar loss. Returns per-node gradients;
    /// leaves that were never connected to the loss get none.
    pub fn backward(&self, loss: DiffTensor) -> Result<Gradients> {
        let lv = &self.nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(ArrayD::from_elem(lv.raw_dim(), 1.0));

        for id in (0..=loss.id).rev() {
            let gy = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &gy, &mut grads)?;
            // keep gradients of differentiable leaves; interior grads are dropped
            if self.nodes[id].requires_grad {
                if !gy.iter().all(|v| v.is_finite()) {
                    let name = self.nodes[id]
                        .name
                        .clone()
                        .unwrap_or_else(|| format!("node#{id}"));
                    return Err(Error::NonFiniteGradient(name));
                }
                grads[id] = Some(gy);
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of named parameter leaves, keyed by parameter name.
    pub fn named_gradients(&self, grads: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                if let Some(g) = grads.grads[id].as_ref() {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }

    fn accumulate(grads: &mut [Option<ArrayD<f64>>], id: usize, g: ArrayD<f64>) {
        match &mut grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, gy: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) -> Result<()> {
        let acc = |grads: &mut [Option<ArrayD<f64>>], dst: usize, g: ArrayD<f64>| {
            if self.nodes[dst].needs_grad {
                Self::accumulate(grads, dst, g);
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, -gy.clone());
            }
            Op::Mul(a, b) => {
                acc(grads, *a, gy * &self.nodes[*b].value);
                acc(grads, *b, gy * &self.nodes[*a].value);
            }
            Op::Scale(a, k) => acc(grads, *a, gy * *k),
            Op::AddScalar(a) => acc(grads, *a, gy.clone()),
            Op::Relu(a) => {
                let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *a, gy * &mask);
            }
            Op::PRelu { x, alpha } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[*alpha].value.view().into_dimensionality::<Ix1>().unwrap();
                let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array2::<f64>::zeros(xv.dim());
                let mut ga = Array1::<f64>::zeros(av.len());
                for c in 0..xv.nrows() {
                    for t in 0..xv.ncols() {
                        let e = xv[(c, t)];
                        let g = gyv[(c, t)];
                        if e > 0.0 {
                            gx[(c, t)] = g;
                        } else {
                            gx[(c, t)] = g * av[c];
                            ga[c] += g * e;
                        }
                    }
                }
                acc(grads, *x, gx.into_dyn());
                acc(grads, *alpha, ga.into_dyn());
            }
            Op::Sigmoid(a) => {
                let s = &self.nodes[id].value;
                acc(grads, *a, gy * &(s * &(1.0 - s)));
            }
            Op::Log(a) => acc(grads, *a, gy / &self.nodes[*a].value),
            Op::Square(a) => acc(grads, *a, gy * &(2.0 * &self.nodes[*a].value)),
            Op::Sum(a) => {
                let g = *gy.iter().next().unwrap();
                acc(grads, *a, ArrayD::from_elem(self.nodes[*a].value.raw_dim(), g));
            }
            Op::MatMul(a, b) => {
                let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                acc(grads, *a, gyv.dot(&bv.t()).into_dyn());
                acc(grads, *b, av.t().dot(&gyv).into_dyn());
            }
            Op::Conv1d { x, w, stride, dilation, pad } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix2>().unwrap();
                let wv = self.nodes[*w].value.view().into_dimensionality::<Ix3>().unwrap();
                let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                let (gx, gw) = conv::conv1d_backward(&xv, &wv, &gyv, *stride, *dilation, *pad);
                acc(grads, *x, gx.into_dyn());
                acc(grads, *w, gw.into_dyn());
            }
            Op::ConvTranspose1d { x, w, stride } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix2>().unwrap();
                let wv = self.nodes[*w].value.view().into_dimensionality::<Ix3>().unwrap();
                let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                let (gx, gw) = conv::conv_transpose1d_backward(&xv, &wv, &gyv, *stride);
                acc(grads, *x, gx.into_dyn());
                acc(grads, *w, gw.into_dyn());
            }
            Op::DepthwiseConv1d { x, w, dilation, pad } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix2>().unwrap();
                let wv = self.nodes[*w].value.view().into_dimensionality::<Ix2>().unwrap();
                let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                let (gx, gw) = conv::depthwise_conv1d_backward(&xv, &wv, &gyv, *dilation, *pad);
                acc(grads, *x, gx.into_dyn());
                acc(grads, *w, gw.into_dyn());
            }
            Op::GlobalLayerNorm { x, gain, bias, eps } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = self.nodes[*gain].value.view().into_dimensionality::<Ix1>().unwrap();
                let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                let n = xv.len() as f64;
                let mu = xv.sum() / n;
                let var = xv.mapv(|e| (e - mu) * (e - mu)).sum() / n;
                let std = (var + eps).sqrt();
                let xhat = xv.mapv(|e| (e - mu) / std);
                // dL/dxhat = gy * gain (broadcast per channel)
                let mut dxhat = gyv.to_owned();
                for (c, mut row) in dxhat.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|e| e * gv[c]);
                }
                let m1 = dxhat.sum() / n;
                let m2 = (&dxhat * &xhat).sum() / n;
                let gx = xhat.mapv(|h| -m1 - h * m2) + &dxhat;
                acc(grads, *x, (gx / std).into_dyn());
                let ggain = (&gyv.to_owned() * &xhat).sum_axis(Axis(1));
                let gbias = gyv.sum_axis(Axis(1));
                acc(grads, *gain, ggain.into_dyn());
                acc(grads, *bias, gbias.into_dyn());
            }
            Op::Frame { x, hop, window } => {
                let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                let t_total = self.nodes[*x].value.len();
                let mut gx = Array1::<f64>::zeros(t_total);
                for t in 0..gyv.nrows() {
                    for k in 0..window.len() {
                        gx[t * hop + k] += gyv[(t, k)] * window[k];
                    }
                }
                acc(grads, *x, gx.into_dyn());
            }
            Op::SliceLast { x, start } => {
                let xs = self.nodes[*x].value.shape();
                let last = xs.len() - 1;
                let mut gx = ArrayD::<f64>::zeros(self.nodes[*x].value.raw_dim());
                gx.slice_axis_mut(
                    Axis(last),
                    Slice::from(*start..*start + gy.shape()[last]),
                )
                .assign(gy);
                acc(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let g = gy
                    .to_owned()
                    .into_shape_with_order(self.nodes[*x].value.raw_dim())
                    .expect("reshape gradient");
                acc(grads, *x, g);
            }
            Op::ConcatLast(ids) => {
                let last = gy.ndim() - 1;
                let mut offset = 0;
                for &src in ids {
                    let len = self.nodes[src].value.shape()[last];
                    let g = gy
                        .slice_axis(Axis(last), Slice::from(offset..offset + len))
                        .to_owned();
                    acc(grads, src, g);
                    offset += len;
                }
            }
        }
        Ok(())
    }
}
