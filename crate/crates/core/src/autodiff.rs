//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each primitive records
//! its parents and forward value; [`Tape::backward`] walks the record once in
//! reverse and leaves `d loss / d leaf` on every leaf that requires a
//! gradient. Double backward is not supported.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(n / stride)`, zero padding split top/left first.
    Same,
    /// Only positions where the kernel fits entirely.
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { w: Var, x: Var },
    Pointwise { w: Var, x: Var },
    AddChannelBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, k: f64 },
    Sigmoid { x: Var },
    Relu { x: Var },
    Ln { x: Var },
    Softmax { x: Var },
    MeanNonChannel { x: Var },
    ConcatChannels { xs: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    ChannelwiseMul { gate: Var, x: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    AvgPool2 { x: Var },
    Reshape { x: Var },
    Sum { x: Var },
    SumSquares { x: Var },
    MeanOf { xs: Vec<Var> },
    CrossEntropy { logits: Var, label: usize },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    /// A trainable input: receives a gradient after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on `v` by the last backward pass, if `v` is a
    /// leaf that the loss depends on.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Which side of zero every ReLU input fell on. Two evaluations with the
    /// same pattern lie in the same piecewise-smooth region.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                pattern.extend(self.value(x).data().iter().map(|&v| v > 0.0));
            }
        }
        pattern
    }

    /// Drop computed gradients so that `backward` may run again.
    pub fn clear_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = self.rg(parents);
        self.push(value, op, rg)
    }

    /// `y[o] = sum_i w[o, i] * x[i]`.
    pub fn matmul(&mut self, w: Var, x: Var) -> Result<Var> {
        let (ws, xs) = (self.shape(w), self.shape(x));
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(dim_err(format!(
                "matmul expects w [out, in] and x [in], got {ws:?} and {xs:?}"
            )));
        }
        let (out, inn) = (ws[0], ws[1]);
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let y: Vec<f64> = (0..out)
            .map(|o| dot(&wd[o * inn..(o + 1) * inn], xd))
            .collect();
        let value = Tensor::new(vec![out], y)?;
        Ok(self.record(value, Op::MatMul { w, x }, &[w, x]))
    }

    /// Applies `w [out, in]` independently at every non-channel position of
    /// `x [..., in]`. A 1x1 convolution in any rank.
    pub fn pointwise(&mut self, w: Var, x: Var) -> Result<Var> {
        let (ws, xs) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if ws.len() != 2 || ws[1] != *xs.last().unwrap() {
            return Err(dim_err(format!(
                "pointwise expects w [out, in] and x [..., in], got {ws:?} and {xs:?}"
            )));
        }
        let (out, inn) = (ws[0], ws[1]);
        let positions = xs.iter().product::<usize>() / inn;
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let mut y = vec![0.0; positions * out];
        for p in 0..positions {
            let xrow = &xd[p * inn..(p + 1) * inn];
            for o in 0..out {
                y[p * out + o] = dot(&wd[o * inn..(o + 1) * inn], xrow);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let value = Tensor::new(shape, y)?;
        Ok(self.record(value, Op::Pointwise { w, x }, &[w, x]))
    }

    /// Adds `b [C]` at every position of `x [..., C]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(b) != [c] {
            return Err(dim_err(format!(
                "bias {:?} does not match channel extent {c} of {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bd = self.value(b).data();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(bd) {
                *v += bb;
            }
        }
        Ok(self.record(value, Op::AddChannelBias { x, b }, &[x, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let bd = self.value(b).data();
        let mut value = self.value(a).clone();
        for (v, bb) in value.data_mut().iter_mut().zip(bd) {
            *v += bb;
        }
        Ok(self.record(value, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let bd = self.value(b).data();
        let mut value = self.value(a).clone();
        for (v, bb) in value.data_mut().iter_mut().zip(bd) {
            *v *= bb;
        }
        Ok(self.record(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.record(value, Op::Scale { x, k }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.record(value, Op::Sigmoid { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.record(value, Op::Relu { x }, &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.record(value, Op::Ln { x }, &[x])
    }

    /// Softmax over all elements of a rank-1 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(dim_err(format!(
                "softmax expects rank 1, got {:?}",
                self.shape(x)
            )));
        }
        let p = softmax(self.value(x).data());
        let value = Tensor::new(self.shape(x).to_vec(), p)?;
        Ok(self.record(value, Op::Softmax { x }, &[x]))
    }

    /// Mean over every axis except the last: `[..., C] -> [C]`.
    pub fn mean_over_non_channel(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.channels();
        let n = t.spatial_len();
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let value = Tensor::new(vec![c], out).expect("squeeze shape");
        self.record(value, Op::MeanNonChannel { x }, &[x])
    }

    /// Concatenates along the channel axis. All inputs must share their
    /// non-channel extents; for rank-1 inputs this is plain concatenation.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Usage("concat_channels needs at least one input".into()))?;
        let spatial = self.value(first).spatial_shape().to_vec();
        for &v in xs {
            if self.value(v).spatial_shape() != spatial.as_slice() {
                return Err(Error::UnalignedSpatial(format!(
                    "cannot concatenate {:?} with {:?}",
                    self.shape(first),
                    self.shape(v)
                )));
            }
        }
        let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).channels()).collect();
        let total: usize = widths.iter().sum();
        let positions: usize = spatial.iter().product();
        let mut out = Vec::with_capacity(positions * total);
        for p in 0..positions {
            for (&v, &c) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[p * c..(p + 1) * c]);
            }
        }
        let mut shape = spatial;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::ConcatChannels { xs: xs.to_vec() }, xs))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.channels();
        if len == 0 || start + len > c {
            return Err(dim_err(format!(
                "channel slice {start}..{} out of range for {:?}",
                start + len,
                t.shape()
            )));
        }
        let out: Vec<f64> = t
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::SliceChannels { x, start }, &[x]))
    }

    /// Splits `x` along channels into consecutive pieces of the given widths.
    pub fn split_channels(&mut self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        if widths.iter().sum::<usize>() != self.value(x).channels() {
            return Err(dim_err(format!(
                "split widths {widths:?} do not cover {:?}",
                self.shape(x)
            )));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(widths.len());
        for &w in widths {
            parts.push(self.slice_channels(x, start, w)?);
            start += w;
        }
        Ok(parts)
    }

    /// Multiplies every position of `x [..., C]` by `gate [C]`.
    pub fn channelwise_mul(&mut self, gate: Var, x: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(gate) != [c] {
            return Err(dim_err(format!(
                "gate {:?} does not match channel extent of {:?}",
                self.shape(gate),
                self.shape(x)
            )));
        }
        let gd = self.value(gate).data();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, g) in row.iter_mut().zip(gd) {
                *v *= g;
            }
        }
        Ok(self.record(value, Op::ChannelwiseMul { gate, x }, &[gate, x]))
    }

    /// Cross-correlation of `x [H, W, Cin]` with `k [kh, kw, Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        if xs.len() != 3 || ks.len() != 4 {
            return Err(dim_err(format!(
                "conv2d expects x [H, W, Cin] and k [kh, kw, Cin, Cout], got {xs:?} and {ks:?}"
            )));
        }
        if xs[2] != ks[2] {
            return Err(dim_err(format!(
                "conv2d channel mismatch: input {xs:?}, kernel {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Domain("conv2d stride must be positive".into()));
        }
        let geom = conv_geometry(xs, ks, stride, padding)?;
        let out = conv_forward(self.value(x).data(), self.value(k).data(), &geom);
        let value = Tensor::new(vec![geom.ho, geom.wo, geom.cout], out)?;
        Ok(self.record(value, Op::Conv2d { x, k, geom }, &[x, k]))
    }

    /// 2x2 mean pooling with stride 2 over `[H, W, C]`. Odd extents keep a
    /// partial last window that averages only the positions it covers.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(dim_err(format!("avg_pool2 expects [H, W, C], got {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let xd = self.value(x).data();
        let mut out = vec![0.0; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let (ys, xs_) = (2 * oy..(2 * oy + 2).min(h), 2 * ox..(2 * ox + 2).min(w));
                let inv = 1.0 / (ys.len() * xs_.len()) as f64;
                let orow = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                for iy in ys {
                    for ix in xs_.clone() {
                        let irow = &xd[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                        for (o, v) in orow.iter_mut().zip(irow) {
                            *o += v * inv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![ho, wo, c], out)?;
        Ok(self.record(value, Op::AvgPool2 { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.record(value, Op::Reshape { x }, &[x]))
    }

    /// Flattens to rank 1.
    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.reshape(x, &[n]).expect("flatten preserves length")
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.record(Tensor::vector(&[s]).unwrap(), Op::Sum { x }, &[x])
    }

    /// Sum of squared elements, as a `[1]` tensor.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        self.record(Tensor::vector(&[s]).unwrap(), Op::SumSquares { x }, &[x])
    }

    /// Elementwise mean of equal-shape tensors.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Usage("mean_of needs at least one input".into()))?;
        for &v in &xs[1..] {
            self.same_shape("mean_of", first, v)?;
        }
        let inv = 1.0 / xs.len() as f64;
        let mut value = self.value(first).clone();
        for &v in &xs[1..] {
            for (o, a) in value.data_mut().iter_mut().zip(self.nodes[v.0].value.data()) {
                *o += a;
            }
        }
        value.data_mut().iter_mut().for_each(|o| *o *= inv);
        Ok(self.record(value, Op::MeanOf { xs: xs.to_vec() }, xs))
    }

    /// Softmax cross-entropy of rank-1 `logits` against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 1 || label >= s[0] {
            return Err(dim_err(format!(
                "cross_entropy: label {label} invalid for logits {s:?}"
            )));
        }
        let l = self.value(logits).data();
        let loss = log_sum_exp(l) - l[label];
        Ok(self.record(
            Tensor::vector(&[loss]).unwrap(),
            Op::CrossEntropy { logits, label },
            &[logits],
        ))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// Calling it a second time without [`Tape::clear_grads`] is an error
    /// rather than accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; call clear_grads first".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("{loss:?} is not on this tape")));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "loss must have exactly one element, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Usage(
                "loss is not reachable from any trainable leaf".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { w, x } => {
                let inn = self.shape(*x)[0];
                if needs(*w) {
                    let xd = val(*x);
                    accumulate(grads, *w, self.value(*w).len(), |gw| {
                        for (o, go) in g.iter().enumerate() {
                            for (gw, xv) in gw[o * inn..(o + 1) * inn].iter_mut().zip(xd) {
                                *gw += go * xv;
                            }
                        }
                    });
                }
                if needs(*x) {
                    let wd = val(*w);
                    accumulate(grads, *x, inn, |gx| {
                        for (o, go) in g.iter().enumerate() {
                            for (gx, wv) in gx.iter_mut().zip(&wd[o * inn..(o + 1) * inn]) {
                                *gx += go * wv;
                            }
                        }
                    });
                }
            }
            Op::Pointwise { w, x } => {
                let ws = self.shape(*w);
                let (out, inn) = (ws[0], ws[1]);
                let positions = self.value(*x).len() / inn;
                if needs(*w) {
                    let xd = val(*x);
                    accumulate(grads, *w, out * inn, |gw| {
                        for p in 0..positions {
                            let xrow = &xd[p * inn..(p + 1) * inn];
                            for o in 0..out {
                                let go = g[p * out + o];
                                for (gw, xv) in gw[o * inn..(o + 1) * inn].iter_mut().zip(xrow) {
                                    *gw += go * xv;
                                }
                            }
                        }
                    });
                }
                if needs(*x) {
                    let wd = val(*w);
                    accumulate(grads, *x, positions * inn, |gx| {
                        for p in 0..positions {
                            let gxrow = &mut gx[p * inn..(p + 1) * inn];
                            for o in 0..out {
                                let go = g[p * out + o];
                                for (gx, wv) in gxrow.iter_mut().zip(&wd[o * inn..(o + 1) * inn]) {
                                    *gx += go * wv;
                                }
                            }
                        }
                    });
                }
            }
            Op::AddChannelBias { x, b } => {
                if needs(*x) {
                    accumulate(grads, *x, g.len(), |gx| add_into(gx, g));
                }
                if needs(*b) {
                    let c = self.value(*b).len();
                    accumulate(grads, *b, c, |gb| {
                        for row in g.chunks(c) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(grads, v, g.len(), |gv| add_into(gv, g));
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if needs(v) {
                        let od = val(other);
                        accumulate(grads, v, g.len(), |gv| {
                            for ((gv, gg), o) in gv.iter_mut().zip(g).zip(od) {
                                *gv += gg * o;
                            }
                        });
                    }
                }
            }
            Op::Scale { x, k } => {
                accumulate(grads, *x, g.len(), |gx| {
                    for (gx, gg) in gx.iter_mut().zip(g) {
                        *gx += k * gg;
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                accumulate(grads, *x, g.len(), |gx| {
                    for ((gx, gg), y) in gx.iter_mut().zip(g).zip(y) {
                        *gx += gg * y * (1.0 - y);
                    }
                });
            }
            Op::Relu { x } => {
                let xd = val(*x);
                accumulate(grads, *x, g.len(), |gx| {
                    for ((gx, gg), xv) in gx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *gx += gg;
                        }
                    }
                });
            }
            Op::Ln { x } => {
                let xd = val(*x);
                accumulate(grads, *x, g.len(), |gx| {
                    for ((gx, gg), xv) in gx.iter_mut().zip(g).zip(xd) {
                        *gx += gg / xv;
                    }
                });
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let dot_gy = dot(g, y);
                accumulate(grads, *x, g.len(), |gx| {
                    for ((gx, gg), y) in gx.iter_mut().zip(g).zip(y) {
                        *gx += y * (gg - dot_gy);
                    }
                });
            }
            Op::MeanNonChannel { x } => {
                let t = self.value(*x);
                let inv = 1.0 / t.spatial_len() as f64;
                let c = g.len();
                accumulate(grads, *x, t.len(), |gx| {
                    for row in gx.chunks_mut(c) {
                        for (gx, gg) in row.iter_mut().zip(g) {
                            *gx += gg * inv;
                        }
                    }
                });
            }
            Op::ConcatChannels { xs } => {
                let total = node.value.channels();
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).channels();
                    if needs(v) {
                        let n = self.value(v).len();
                        accumulate(grads, v, n, |gv| {
                            for (p, row) in gv.chunks_mut(c).enumerate() {
                                add_into(row, &g[p * total + offset..p * total + offset + c]);
                            }
                        });
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let c = self.value(*x).channels();
                let len = node.value.channels();
                let n = self.value(*x).len();
                accumulate(grads, *x, n, |gx| {
                    for (row, gg) in gx.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut row[*start..*start + len], gg);
                    }
                });
            }
            Op::ChannelwiseMul { gate, x } => {
                let c = self.value(*gate).len();
                if needs(*gate) {
                    let xd = val(*x);
                    accumulate(grads, *gate, c, |ggate| {
                        for (grow, xrow) in g.chunks(c).zip(xd.chunks(c)) {
                            for ((ga, gg), xv) in ggate.iter_mut().zip(grow).zip(xrow) {
                                *ga += gg * xv;
                            }
                        }
                    });
                }
                if needs(*x) {
                    let gd = val(*gate);
                    accumulate(grads, *x, g.len(), |gx| {
                        for (gxrow, grow) in gx.chunks_mut(c).zip(g.chunks(c)) {
                            for ((gx, gg), gv) in gxrow.iter_mut().zip(grow).zip(gd) {
                                *gx += gg * gv;
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, k, geom } => {
                let (xd, kd) = (val(*x), val(*k));
                if needs(*x) {
                    accumulate(grads, *x, xd.len(), |gx| conv_backward_input(g, kd, gx, geom));
                }
                if needs(*k) {
                    accumulate(grads, *k, kd.len(), |gk| conv_backward_kernel(g, xd, gk, geom));
                }
            }
            Op::AvgPool2 { x } => {
                let s = self.shape(*x);
                let (h, w, c) = (s[0], s[1], s[2]);
                let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                accumulate(grads, *x, h * w * c, |gx| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let (ys, xs_) =
                                (2 * oy..(2 * oy + 2).min(h), 2 * ox..(2 * ox + 2).min(w));
                            let inv = 1.0 / (ys.len() * xs_.len()) as f64;
                            let grow = &g[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                            for iy in ys {
                                for ix in xs_.clone() {
                                    let gxrow = &mut gx[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                                    for (gx, gg) in gxrow.iter_mut().zip(grow) {
                                        *gx += gg * inv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, g.len(), |gx| add_into(gx, g));
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                accumulate(grads, *x, n, |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::SumSquares { x } => {
                let xd = val(*x);
                accumulate(grads, *x, xd.len(), |gx| {
                    for (gx, xv) in gx.iter_mut().zip(xd) {
                        *gx += 2.0 * xv * g[0];
                    }
                });
            }
            Op::MeanOf { xs } => {
                let inv = 1.0 / xs.len() as f64;
                for &v in xs {
                    if needs(v) {
                        accumulate(grads, v, g.len(), |gv| {
                            for (gv, gg) in gv.iter_mut().zip(g) {
                                *gv += gg * inv;
                            }
                        });
                    }
                }
            }
            Op::CrossEntropy { logits, label } => {
                let p = softmax(val(*logits));
                accumulate(grads, *logits, p.len(), |gl| {
                    for (j, (gl, pj)) in gl.iter_mut().zip(&p).enumerate() {
                        let onehot = if j == *label { 1.0 } else { 0.0 };
                        *gl += g[0] * (pj - onehot);
                    }
                });
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn conv_geometry(xs: &[usize], ks: &[usize], stride: usize, padding: Padding) -> Result<ConvGeom> {
    let (h, w, cin) = (xs[0], xs[1], xs[2]);
    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
    let (ho, wo, pad_top, pad_left) = match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(dim_err(format!(
                    "kernel {kh}x{kw} larger than unpadded input {h}x{w}"
                )));
            }
            ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
        }
        Padding::Same => {
            let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
            let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((wo - 1) * stride + kw).saturating_sub(w);
            if kh > h + pad_h || kw > w + pad_w {
                return Err(dim_err(format!(
                    "kernel {kh}x{kw} larger than padded input"
                )));
            }
            (ho, wo, pad_h / 2, pad_w / 2)
        }
    };
    Ok(ConvGeom {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        ho,
        wo,
        stride,
        pad_top,
        pad_left,
    })
}

/// Input coordinate hit by output `o` and kernel tap `k`, if inside the image.
#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k).checked_sub(pad)?;
    (i < extent).then_some(i)
}

fn conv_forward(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.ho * g.wo * g.cout];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let orow = &mut out[(oy * g.wo + ox) * g.cout..(oy * g.wo + ox + 1) * g.cout];
            for ky in 0..g.kh {
                let Some(iy) = tap(oy, ky, g.stride, g.pad_top, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = tap(ox, kx, g.stride, g.pad_left, g.w) else { continue };
                    let xrow = &x[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    let kblock = &k[(ky * g.kw + kx) * g.cin * g.cout..];
                    for (ci, xv) in xrow.iter().enumerate() {
                        let krow = &kblock[ci * g.cout..(ci + 1) * g.cout];
                        for (o, kv) in orow.iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(gout: &[f64], k: &[f64], gx: &mut [f64], g: &ConvGeom) {
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let grow = &gout[(oy * g.wo + ox) * g.cout..(oy * g.wo + ox + 1) * g.cout];
            for ky in 0..g.kh {
                let Some(iy) = tap(oy, ky, g.stride, g.pad_top, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = tap(ox, kx, g.stride, g.pad_left, g.w) else { continue };
                    let gxrow = &mut gx[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    let kblock = &k[(ky * g.kw + kx) * g.cin * g.cout..];
                    for (ci, gxv) in gxrow.iter_mut().enumerate() {
                        *gxv += dot(grow, &kblock[ci * g.cout..(ci + 1) * g.cout]);
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel(gout: &[f64], x: &[f64], gk: &mut [f64], g: &ConvGeom) {
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let grow = &gout[(oy * g.wo + ox) * g.cout..(oy * g.wo + ox + 1) * g.cout];
            for ky in 0..g.kh {
                let Some(iy) = tap(oy, ky, g.stride, g.pad_top, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = tap(ox, kx, g.stride, g.pad_left, g.w) else { continue };
                    let xrow = &x[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    let gkblock = &mut gk[(ky * g.kw + kx) * g.cin * g.cout..];
                    for (ci, xv) in xrow.iter().enumerate() {
                        for (gkv, gg) in gkblock[ci * g.cout..(ci + 1) * g.cout].iter_mut().zip(grow) {
                            *gkv += xv * gg;
                        }
                    }
                }
            }
        }
    }
}

/// Output spatial extents of a convolution, for cost accounting.
pub fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    let g = conv_geometry(&[h, w, 1], &[kh, kw, 1, 1], stride, padding)?;
    Ok((g.ho, g.wo))
}
