//! The computation tape: records ops during the forward pass, then replays
//! them in reverse topological order to accumulate gradients.
//!
//! Tape indices are append-ordered, which *is* a topological order, so the
//! backward sweep is a single reverse scan. Gradients accumulate additively
//! when a node feeds several consumers. `backward` consumes the tape, so a
//! fresh one is built per training step.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Min,
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Matmul(usize, usize),
    Transpose(usize),
    GatherRows(usize, Vec<usize>),
    GatherCols(usize, Vec<usize>),
    ScaleRows(usize, usize),
    AddRows(usize, usize),
    Reduce {
        src: usize,
        kind: ReduceKind,
        axes: Vec<usize>,
        /// For max/min: flat input index feeding each output cell.
        args: Vec<usize>,
        count: usize,
    },
    Reshape(usize),
    /// (C,H,W) -> (H*W, C): spatial positions become rows.
    PositionsByChannels(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    UpsampleBilinear(usize),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Value`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Value) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Value) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Value {
        self.nodes.push(Node { shape, data, op, needs_grad });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Copy a tensor onto the tape as a leaf; gradient flows back to it iff
    /// `requires_grad` is set on the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Value {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Value {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Value {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    pub fn value(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Value) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Snapshot a node as a plain tensor.
    pub fn tensor(&self, v: Value) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node is internally consistent")
    }

    // ---- elementwise ----

    fn binary_shapes(&self, a: Value, b: Value, op: &str) -> Result<Vec<usize>> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let la = self.nodes[a.0].data.len();
        let lb = self.nodes[b.0].data.len();
        if sa == sb {
            Ok(sa.clone())
        } else if la == 1 {
            Ok(sb.clone())
        } else if lb == 1 {
            Ok(sa.clone())
        } else {
            Err(Error::Dim(format!("{op}: shapes {sa:?} and {sb:?} are not compatible (only exact match or scalar broadcast)")))
        }
    }

    fn ew_binary(&mut self, a: Value, b: Value, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Value> {
        let shape = self.binary_shapes(a, b, name)?;
        let n = shape.iter().product::<usize>().max(1);
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let (la, lb) = (da.len(), db.len());
        let data: Vec<f64> = (0..n)
            .map(|i| f(da[if la == 1 { 0 } else { i }], db[if lb == 1 { 0 } else { i }]))
            .collect();
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(shape, data, op, needs))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.ew_binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.ew_binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.ew_binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        self.ew_binary(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn unary(&mut self, a: Value, f: impl Fn(f64) -> f64, op: Op) -> Value {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let needs = self.needs(a.0);
        self.push(shape, data, op, needs)
    }

    pub fn neg(&mut self, a: Value) -> Value {
        self.unary(a, |x| -x, Op::Neg(a.0))
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn relu(&mut self, a: Value) -> Value {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Value) -> Value {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Value) -> Value {
        self.unary(a, f64::ln, Op::Ln(a.0))
    }

    pub fn sqrt(&mut self, a: Value) -> Value {
        self.unary(a, f64::sqrt, Op::Sqrt(a.0))
    }

    pub fn abs(&mut self, a: Value) -> Value {
        self.unary(a, f64::abs, Op::Abs(a.0))
    }

    // ---- linear algebra ----

    fn dims2(&self, v: Value, op: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::Dim(format!("{op}: expected 2-D tensor, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Dim(format!(
                "matmul: inner dimensions differ: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(vec![m, n], data, Op::Matmul(a.0, b.0), needs))
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a.0);
        Ok(self.push(vec![n, m], data, Op::Transpose(a.0), needs))
    }

    /// Select rows of a 2-D tensor (duplicates allowed). Backward scatter-adds.
    pub fn gather_rows(&mut self, a: Value, rows: Vec<usize>) -> Result<Value> {
        let (m, k) = self.dims2(a, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Dim(format!("gather_rows: row {bad} out of bounds for {m} rows")));
        }
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(rows.len() * k);
        for &r in &rows {
            data.extend_from_slice(&src[r * k..(r + 1) * k]);
        }
        let needs = self.needs(a.0);
        Ok(self.push(vec![rows.len(), k], data, Op::GatherRows(a.0, rows), needs))
    }

    pub fn gather_cols(&mut self, a: Value, cols: Vec<usize>) -> Result<Value> {
        let (m, k) = self.dims2(a, "gather_cols")?;
        if let Some(&bad) = cols.iter().find(|&&c| c >= k) {
            return Err(Error::Dim(format!("gather_cols: column {bad} out of bounds for {k} columns")));
        }
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(m * cols.len());
        for i in 0..m {
            for &c in &cols {
                data.push(src[i * k + c]);
            }
        }
        let needs = self.needs(a.0);
        Ok(self.push(vec![m, cols.len()], data, Op::GatherCols(a.0, cols), needs))
    }

    /// Multiply each row i of `a` (m×k) by `s[i]` (length m).
    pub fn scale_rows(&mut self, a: Value, s: Value) -> Result<Value> {
        let (m, k) = self.dims2(a, "scale_rows")?;
        if self.nodes[s.0].data.len() != m {
            return Err(Error::Dim(format!(
                "scale_rows: scale length {} does not match {} rows",
                self.nodes[s.0].data.len(),
                m
            )));
        }
        let (da, ds) = (&self.nodes[a.0].data, &self.nodes[s.0].data);
        let mut data = Vec::with_capacity(m * k);
        for i in 0..m {
            for j in 0..k {
                data.push(da[i * k + j] * ds[i]);
            }
        }
        let needs = self.needs(a.0) || self.needs(s.0);
        Ok(self.push(vec![m, k], data, Op::ScaleRows(a.0, s.0), needs))
    }

    /// Add a length-k vector to every row of an m×k matrix.
    pub fn add_rows(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = self.dims2(a, "add_rows")?;
        if self.nodes[b.0].data.len() != k {
            return Err(Error::Dim(format!(
                "add_rows: bias length {} does not match {} columns",
                self.nodes[b.0].data.len(),
                k
            )));
        }
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut data = Vec::with_capacity(m * k);
        for i in 0..m {
            for j in 0..k {
                data.push(da[i * k + j] + db[j]);
            }
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(vec![m, k], data, Op::AddRows(a.0, b.0), needs))
    }

    // ---- reductions ----

    /// Reduce over the given axes (empty slice = all axes). Max/min route the
    /// gradient to the first-occurring extremum in row-major order.
    pub fn reduce(&mut self, kind: ReduceKind, a: Value, axes: &[usize]) -> Result<Value> {
        let shape = self.nodes[a.0].shape.clone();
        let rank = shape.len();
        let axes: Vec<usize> = if axes.is_empty() { (0..rank).collect() } else { axes.to_vec() };
        for &ax in &axes {
            if ax >= rank {
                return Err(Error::Dim(format!("reduce: axis {ax} out of range for shape {shape:?}")));
            }
        }
        let mut reduced = vec![false; rank];
        for &ax in &axes {
            reduced[ax] = true;
        }
        if self.nodes[a.0].data.is_empty() {
            return Err(Error::Domain("reduce: empty reduction axis".into()));
        }
        let out_shape: Vec<usize> =
            shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        let out_len: usize = out_shape.iter().product::<usize>().max(1);
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product::<usize>()
            .max(1);

        // Strides of the output cell each input element maps to.
        let mut out_strides = vec![0usize; rank];
        {
            let mut stride = 1;
            for ax in (0..rank).rev() {
                if !reduced[ax] {
                    out_strides[ax] = stride;
                    stride *= shape[ax];
                }
            }
        }
        let in_strides = row_major_strides(&shape);

        let src = &self.nodes[a.0].data;
        let init = match kind {
            ReduceKind::Max => f64::NEG_INFINITY,
            ReduceKind::Min => f64::INFINITY,
            ReduceKind::Sum | ReduceKind::Mean => 0.0,
        };
        let mut data = vec![init; out_len];
        let mut args = vec![usize::MAX; if matches!(kind, ReduceKind::Max | ReduceKind::Min) { out_len } else { 0 }];
        for (i, &v) in src.iter().enumerate() {
            let mut out_idx = 0;
            let mut rem = i;
            for ax in 0..rank {
                let coord = rem / in_strides[ax];
                rem %= in_strides[ax];
                out_idx += coord * out_strides[ax];
            }
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => data[out_idx] += v,
                // strict comparison: ties keep the earlier (first) index
                ReduceKind::Max => {
                    if v > data[out_idx] {
                        data[out_idx] = v;
                        args[out_idx] = i;
                    }
                }
                ReduceKind::Min => {
                    if v < data[out_idx] {
                        data[out_idx] = v;
                        args[out_idx] = i;
                    }
                }
            }
        }
        if kind == ReduceKind::Mean {
            for v in &mut data {
                *v /= count as f64;
            }
        }
        let needs = self.needs(a.0);
        Ok(self.push(out_shape, data, Op::Reduce { src: a.0, kind, axes, args, count }, needs))
    }

    pub fn reduce_all(&mut self, kind: ReduceKind, a: Value) -> Result<Value> {
        self.reduce(kind, a, &[])
    }

    pub fn reshape(&mut self, a: Value, shape: Vec<usize>) -> Result<Value> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].data.len() {
            return Err(Error::Dim(format!(
                "reshape: cannot view {:?} as {:?}",
                self.nodes[a.0].shape, shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let needs = self.needs(a.0);
        Ok(self.push(shape, data, Op::Reshape(a.0), needs))
    }

    /// (C,H,W) feature map -> (H·W)×C matrix of per-position feature vectors.
    pub fn positions_by_channels(&mut self, a: Value) -> Result<Value> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::Dim(format!("positions_by_channels: expected (C,H,W), got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                data[p * c + ch] = src[ch * hw + p];
            }
        }
        let needs = self.needs(a.0);
        Ok(self.push(vec![hw, c], data, Op::PositionsByChannels(a.0), needs))
    }

    /// 2-D convolution over a (C_in,H,W) input with a (C_out,C_in,kh,kw)
    /// kernel and per-channel bias; zero padding.
    pub fn conv2d(
        &mut self,
        input: Value,
        weight: Value,
        bias: Value,
        stride: usize,
        padding: usize,
    ) -> Result<Value> {
        let si = self.nodes[input.0].shape.clone();
        let sw = self.nodes[weight.0].shape.clone();
        if si.len() != 3 || sw.len() != 4 {
            return Err(Error::Dim(format!(
                "conv2d: expected input (C,H,W) and weight (O,C,kh,kw), got {si:?} / {sw:?}"
            )));
        }
        let (cin, h, w) = (si[0], si[1], si[2]);
        let (cout, cin_w, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if cin != cin_w {
            return Err(Error::Dim(format!("conv2d: input channels {cin} != weight channels {cin_w}")));
        }
        if self.nodes[bias.0].data.len() != cout {
            return Err(Error::Dim(format!(
                "conv2d: bias length {} != output channels {cout}",
                self.nodes[bias.0].data.len()
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let (x, k, b) = (&self.nodes[input.0].data, &self.nodes[weight.0].data, &self.nodes[bias.0].data);
        let mut data = vec![0.0; cout * oh * ow];
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[(ic * h + iy as usize) * w + ix as usize]
                                    * k[((oc * cin + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    data[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let needs = self.needs(input.0) || self.needs(weight.0) || self.needs(bias.0);
        Ok(self.push(
            vec![cout, oh, ow],
            data,
            Op::Conv2d { input: input.0, weight: weight.0, bias: bias.0, stride, padding },
            needs,
        ))
    }

    /// Bilinear upsampling of a (C,H,W) map to (C,2H,2W), corner-aligned.
    pub fn upsample_bilinear_2x(&mut self, a: Value) -> Result<Value> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::Dim(format!("upsample: expected (C,H,W), got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (th, tw) = (2 * h, 2 * w);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; c * th * tw];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for oy in 0..th {
                for ox in 0..tw {
                    let mut acc = 0.0;
                    for (iy, ix, wgt) in bilinear_taps(oy, ox, h, w, th, tw) {
                        acc += wgt * plane[iy * w + ix];
                    }
                    data[(ch * th + oy) * tw + ox] = acc;
                }
            }
        }
        let needs = self.needs(a.0);
        Ok(self.push(vec![c, th, tw], data, Op::UpsampleBilinear(a.0), needs))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Consumes the tape (it is rebuilt per
    /// forward pass); returns per-node gradient buffers.
    pub fn backward(self, loss: Value) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward: empty tape".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || grads[i].is_none() {
                continue;
            }
            // Parents always precede i on the tape.
            let (before, at) = grads.split_at_mut(i);
            let g = at[0].as_ref().expect("checked above");
            let node = &self.nodes[i];
            let acc = accumulate_into;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(before, *a, AccumRule::Broadcast(g), &self.nodes);
                    acc(before, *b, AccumRule::Broadcast(g), &self.nodes);
                }
                Op::Sub(a, b) => {
                    acc(before, *a, AccumRule::Broadcast(g), &self.nodes);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc(before, *b, AccumRule::BroadcastOwned(neg), &self.nodes);
                }
                Op::Mul(a, b) => {
                    let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                    let ga = ew_grad(g, db);
                    let gb = ew_grad(g, da);
                    acc(before, *a, AccumRule::BroadcastOwned(ga), &self.nodes);
                    acc(before, *b, AccumRule::BroadcastOwned(gb), &self.nodes);
                }
                Op::Div(a, b) => {
                    let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                    let (la, lb) = (da.len(), db.len());
                    let n = g.len();
                    let mut ga = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for i in 0..n {
                        let va = da[if la == 1 { 0 } else { i }];
                        let vb = db[if lb == 1 { 0 } else { i }];
                        ga[i] = g[i] / vb;
                        gb[i] = -g[i] * va / (vb * vb);
                    }
                    acc(before, *a, AccumRule::BroadcastOwned(ga), &self.nodes);
                    acc(before, *b, AccumRule::BroadcastOwned(gb), &self.nodes);
                }
                Op::Neg(a) => {
                    let ga: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                }
                Op::Tanh(a) => {
                    let y = &node.data;
                    let ga: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                }
                Op::Sigmoid(a) => {
                    let y = &node.data;
                    let ga: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].data;
                    let ga: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect();
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                }
                Op::Exp(a) => {
                    let y = &node.data;
                    let ga: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                }
                Op::Ln(a) => {
                    let x = &self.nodes[*a].data;
                    let ga: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                }
                Op::Sqrt(a) => {
                    let y = &node.data;
                    let ga: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi / (2.0 * yi)).collect();
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                }
                Op::Abs(a) => {
                    let x = &self.nodes[*a].data;
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(gi, xi)| {
                            if *xi > 0.0 {
                                *gi
                            } else if *xi < 0.0 {
                                -*gi
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let nn = self.nodes[*b].shape[1];
                    let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                    // dA = g · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..nn {
                            let gij = g[i * nn + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gij * db[p * nn + j];
                            }
                        }
                    }
                    // dB = Aᵀ · g
                    let mut gb = vec![0.0; k * nn];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = da[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..nn {
                                gb[p * nn + j] += aip * g[i * nn + j];
                            }
                        }
                    }
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                    acc(before, *b, AccumRule::Dense(gb), &self.nodes);
                }
                Op::Transpose(a) => {
                    let (m, nn) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let mut ga = vec![0.0; m * nn];
                    for i in 0..m {
                        for j in 0..nn {
                            ga[i * nn + j] = g[j * m + i];
                        }
                    }
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                }
                Op::GatherRows(a, rows) => {
                    let k = self.nodes[*a].shape[1];
                    let mut ga = vec![0.0; self.nodes[*a].data.len()];
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        for j in 0..k {
                            ga[src_r * k + j] += g[out_r * k + j];
                        }
                    }
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                }
                Op::GatherCols(a, cols) => {
                    let k = self.nodes[*a].shape[1];
                    let m = self.nodes[*a].shape[0];
                    let mut ga = vec![0.0; self.nodes[*a].data.len()];
                    for i in 0..m {
                        for (out_c, &src_c) in cols.iter().enumerate() {
                            ga[i * k + src_c] += g[i * cols.len() + out_c];
                        }
                    }
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                }
                Op::ScaleRows(a, s) => {
                    let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let (da, ds) = (&self.nodes[*a].data, &self.nodes[*s].data);
                    let mut ga = vec![0.0; m * k];
                    let mut gs = vec![0.0; m];
                    for i in 0..m {
                        for j in 0..k {
                            ga[i * k + j] = g[i * k + j] * ds[i];
                            gs[i] += g[i * k + j] * da[i * k + j];
                        }
                    }
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                    acc(before, *s, AccumRule::Dense(gs), &self.nodes);
                }
                Op::AddRows(a, b) => {
                    let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let mut gb = vec![0.0; k];
                    for i in 0..m {
                        for j in 0..k {
                            gb[j] += g[i * k + j];
                        }
                    }
                    acc(before, *a, AccumRule::Broadcast(g), &self.nodes);
                    acc(before, *b, AccumRule::Dense(gb), &self.nodes);
                }
                Op::Reduce { src, kind, axes, args, count } => {
                    let src_shape = &self.nodes[*src].shape;
                    let mut ga = vec![0.0; self.nodes[*src].data.len()];
                    match kind {
                        ReduceKind::Max | ReduceKind::Min => {
                            for (cell, &arg) in args.iter().enumerate() {
                                ga[arg] += g[cell];
                            }
                        }
                        ReduceKind::Sum | ReduceKind::Mean => {
                            let scale = if *kind == ReduceKind::Mean { 1.0 / *count as f64 } else { 1.0 };
                            let rank = src_shape.len();
                            let mut reduced = vec![false; rank];
                            for &ax in axes {
                                reduced[ax] = true;
                            }
                            let in_strides = row_major_strides(src_shape);
                            let mut out_strides = vec![0usize; rank];
                            let mut stride = 1;
                            for ax in (0..rank).rev() {
                                if !reduced[ax] {
                                    out_strides[ax] = stride;
                                    stride *= src_shape[ax];
                                }
                            }
                            for (i, gi) in ga.iter_mut().enumerate() {
                                let mut out_idx = 0;
                                let mut rem = i;
                                for ax in 0..rank {
                                    let coord = rem / in_strides[ax];
                                    rem %= in_strides[ax];
                                    out_idx += coord * out_strides[ax];
                                }
                                *gi += g[out_idx] * scale;
                            }
                        }
                    }
                    acc(before, *src, AccumRule::Dense(ga), &self.nodes);
                }
                Op::Reshape(a) => {
                    acc(before, *a, AccumRule::Dense(g.clone()), &self.nodes);
                }
                Op::PositionsByChannels(a) => {
                    let s = &self.nodes[*a].shape;
                    let (c, hw) = (s[0], s[1] * s[2]);
                    let mut ga = vec![0.0; c * hw];
                    for ch in 0..c {
                        for p in 0..hw {
                            ga[ch * hw + p] = g[p * c + ch];
                        }
                    }
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                }
                Op::Conv2d { input, weight, bias, stride, padding } => {
                    let si = &self.nodes[*input].shape;
                    let sw = &self.nodes[*weight].shape;
                    let (cin, h, w) = (si[0], si[1], si[2]);
                    let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
                    let (oh, ow) = (node.shape[1], node.shape[2]);
                    let x = &self.nodes[*input].data;
                    let k = &self.nodes[*weight].data;
                    let mut gx = vec![0.0; x.len()];
                    let mut gk = vec![0.0; k.len()];
                    let mut gb = vec![0.0; cout];
                    for oc in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[(oc * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                gb[oc] += go;
                                for ic in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - *padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = (ic * h + iy as usize) * w + ix as usize;
                                            let ki = ((oc * cin + ic) * kh + ky) * kw + kx;
                                            gx[xi] += go * k[ki];
                                            gk[ki] += go * x[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    acc(before, *input, AccumRule::Dense(gx), &self.nodes);
                    acc(before, *weight, AccumRule::Dense(gk), &self.nodes);
                    acc(before, *bias, AccumRule::Dense(gb), &self.nodes);
                }
                Op::UpsampleBilinear(a) => {
                    let s = &self.nodes[*a].shape;
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (th, tw) = (node.shape[1], node.shape[2]);
                    let mut ga = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for oy in 0..th {
                            for ox in 0..tw {
                                let go = g[(ch * th + oy) * tw + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for (iy, ix, wgt) in bilinear_taps(oy, ox, h, w, th, tw) {
                                    ga[(ch * h + iy) * w + ix] += go * wgt;
                                }
                            }
                        }
                    }
                    acc(before, *a, AccumRule::Dense(ga), &self.nodes);
                }
            }
            // Interior node gradients are no longer needed once consumed;
            // leaves keep theirs so callers can collect them.
            if !matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate_into(store: &mut [Option<Vec<f64>>], idx: usize, contrib: AccumRule<'_>, nodes: &[Node]) {
    if !nodes[idx].needs_grad {
        return;
    }
    let len = nodes[idx].data.len();
    let buf = store[idx].get_or_insert_with(|| vec![0.0; len]);
    contrib.apply(buf);
}

/// How a computed contribution lands on a parent's gradient buffer.
enum AccumRule<'a> {
    /// Same-shape add; sums to one cell if the parent is scalar.
    Broadcast(&'a [f64]),
    BroadcastOwned(Vec<f64>),
    /// Parent shape known to match exactly.
    Dense(Vec<f64>),
}

impl AccumRule<'_> {
    fn apply(self, buf: &mut [f64]) {
        match self {
            AccumRule::Broadcast(g) => accumulate_broadcast(buf, g),
            AccumRule::BroadcastOwned(g) => accumulate_broadcast(buf, &g),
            AccumRule::Dense(g) => {
                debug_assert_eq!(buf.len(), g.len());
                for (b, x) in buf.iter_mut().zip(&g) {
                    *b += x;
                }
            }
        }
    }
}

fn accumulate_broadcast(buf: &mut [f64], g: &[f64]) {
    if buf.len() == g.len() {
        for (b, x) in buf.iter_mut().zip(g) {
            *b += x;
        }
    } else {
        debug_assert_eq!(buf.len(), 1);
        buf[0] += g.iter().sum::<f64>();
    }
}

/// Elementwise product with scalar-broadcast on either side.
fn ew_grad(g: &[f64], other: &[f64]) -> Vec<f64> {
    let lo = other.len();
    (0..g.len()).map(|i| g[i] * other[if lo == 1 { 0 } else { i }]).collect()
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    strides
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let out = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] += aip * row[j];
            }
        }
    }
    c
}

/// Corner-aligned bilinear interpolation taps for one output pixel.
/// Returns up to four (src_y, src_x, weight) triples. Also used by the
/// activation-map upsampler in `interpret`.
pub fn bilinear_taps(
    oy: usize,
    ox: usize,
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) -> Vec<(usize, usize, f64)> {
    let fy = if th <= 1 { 0.0 } else { oy as f64 * (h - 1) as f64 / (th - 1) as f64 };
    let fx = if tw <= 1 { 0.0 } else { ox as f64 * (w - 1) as f64 / (tw - 1) as f64 };
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let wy = fy - y0 as f64;
    let wx = fx - x0 as f64;
    let mut taps = Vec::with_capacity(4);
    for (yy, wyy) in [(y0, 1.0 - wy), (y1, wy)] {
        if wyy == 0.0 {
            continue;
        }
        for (xx, wxx) in [(x0, 1.0 - wx), (x1, wx)] {
            if wxx == 0.0 {
                continue;
            }
            taps.push((yy, xx, wyy * wxx));
        }
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check, finite_difference, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_tensor(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn add_and_mul_basics() {
        let mut t = Tape::new();
        let a = t.leaf(&vec_tensor(&[1.0, 2.0]));
        let b = t.leaf(&vec_tensor(&[3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c), &[4.0, 6.0]);

        let zero = t.scalar(0.0);
        let d = t.leaf(&vec_tensor(&[2.0, 3.0]));
        let e = t.mul(d, zero).unwrap();
        assert_eq!(t.value(e), &[0.0, 0.0]);

        let f = t.leaf(&vec_tensor(&[0.0]));
        let g = t.tanh(f);
        assert_eq!(t.value(g), &[0.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![2], vec![0.0; 2]);
        let b = t.constant(vec![3], vec![0.0; 3]);
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut t = Tape::new();
        let eye = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = t.matmul(eye, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(vec![1, 2], vec![1.0, 0.0]);
        let b = t.constant(vec![2, 1], vec![0.0, 1.0]);
        let z = t.matmul(a, b).unwrap();
        assert_eq!(t.value(z), &[0.0]);

        let bad = t.constant(vec![3, 2], vec![0.0; 6]);
        assert!(t.matmul(m, bad).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(vec![3, 4], &mut rng);
        let b = Tensor::randn(vec![4, 2], &mut rng);
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(&a), t.leaf(&b));
        let c = t.matmul(va, vb).unwrap();
        // naive triple loop, accumulation order independent of the kernel's
        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    expect[i * 2 + j] += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
            }
        }
        for (got, want) in t.value(c).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_max_backward_routes_to_argmax_only() {
        let x = vec_tensor(&[1.0, 5.0, 3.0]).with_requires_grad();
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let m = t.reduce_all(ReduceKind::Max, v).unwrap();
        assert_eq!(t.scalar_value(m), 5.0);
        let grads = t.backward(m).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn reduce_max_tie_takes_first_occurrence() {
        let x = vec_tensor(&[2.0, 2.0]).with_requires_grad();
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let m = t.reduce_all(ReduceKind::Max, v).unwrap();
        assert_eq!(t.scalar_value(m), 2.0);
        let grads = t.backward(m).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[1.0, 0.0]);
        // the chosen subgradient agrees with the right-sided difference in x0
        let f = |p: &[f64]| p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let h = 1e-6;
        let sided = (f(&[2.0 + h, 2.0]) - f(&[2.0, 2.0])) / h;
        assert!((sided - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reduce_mean_value() {
        let mut t = Tape::new();
        let v = t.constant(vec![3], vec![2.0, 4.0, 6.0]);
        let m = t.reduce_all(ReduceKind::Mean, v).unwrap();
        assert_eq!(t.scalar_value(m), 4.0);
    }

    #[test]
    fn reduce_axis_on_matrix() {
        let mut t = Tape::new();
        // [[1, 7], [5, 2]]
        let v = t.constant(vec![2, 2], vec![1.0, 7.0, 5.0, 2.0]);
        let col_max = t.reduce(ReduceKind::Max, v, &[0]).unwrap();
        assert_eq!(t.value(col_max), &[5.0, 7.0]);
        let row_sum = t.reduce(ReduceKind::Sum, v, &[1]).unwrap();
        assert_eq!(t.value(row_sum), &[8.0, 7.0]);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let w = vec_tensor(&[1.0, 2.0, 3.0]).with_requires_grad();
        let mut t = Tape::new();
        let v = t.leaf(&w);
        let s = t.reduce_all(ReduceKind::Sum, v).unwrap();
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[1.0, 1.0, 1.0]);

        let w2 = vec_tensor(&[1.0, 2.0]).with_requires_grad();
        let mut t = Tape::new();
        let v = t.leaf(&w2);
        let sq = t.mul(v, v).unwrap();
        let s = t.reduce_all(ReduceKind::Sum, sq).unwrap();
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let v = t.constant(vec![2], vec![1.0, 2.0]);
        assert!(matches!(t.backward(v), Err(crate::error::Error::Contract(_))));
    }

    #[test]
    fn gradient_accumulates_over_shared_use() {
        // f(x) = x·x + 3x  → f' = 2x + 3; x used by two ops
        let x = Tensor::scalar(1.5).with_requires_grad();
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let sq = t.mul(v, v).unwrap();
        let three = t.scalar(3.0);
        let lin = t.mul(v, three).unwrap();
        let f = t.add(sq, lin).unwrap();
        let grads = t.backward(f).unwrap();
        assert!((grads.get(v).unwrap()[0] - 6.0).abs() < 1e-12);
    }

    /// one scalar function per primitive, checked against central differences
    #[test]
    fn primitive_ops_pass_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..5 {
            let x = Tensor::randn(vec![2, 3], &mut rng).with_requires_grad();
            // keep relu/abs/sqrt/ln inputs away from their kinks and domains
            let shifted: Vec<f64> = x.data().iter().map(|v| v.abs() + 0.5).collect();
            let xs = Tensor::new(vec![2, 3], shifted).unwrap().with_requires_grad();

            type Builder = fn(&mut Tape, Value) -> Value;
            let smooth: Vec<(&str, Builder)> = vec![
                ("tanh", |t, v| t.tanh(v)),
                ("sigmoid", |t, v| t.sigmoid(v)),
                ("exp", |t, v| t.exp(v)),
                ("neg", |t, v| t.neg(v)),
            ];
            let positive: Vec<(&str, Builder)> = vec![
                ("ln", |t, v| t.ln(v)),
                ("sqrt", |t, v| t.sqrt(v)),
                ("relu", |t, v| t.relu(v)),
                ("abs", |t, v| t.abs(v)),
            ];
            for (input, ops) in [(&x, smooth), (&xs, positive)] {
                for (name, build) in ops {
                    let run = |p: &[f64]| {
                        let tt = Tensor::new(vec![2, 3], p.to_vec()).unwrap().with_requires_grad();
                        let mut t = Tape::new();
                        let v = t.leaf(&tt);
                        let y = build(&mut t, v);
                        let sq = t.mul(y, y).unwrap();
                        let s = t.reduce_all(ReduceKind::Sum, sq).unwrap();
                        t.scalar_value(s)
                    };
                    let mut t = Tape::new();
                    let v = t.leaf(input);
                    let y = build(&mut t, v);
                    let sq = t.mul(y, y).unwrap();
                    let s = t.reduce_all(ReduceKind::Sum, sq).unwrap();
                    let grads = t.backward(s).unwrap();
                    let err = check(run, input.data(), grads.get(v).unwrap(), 1e-5);
                    assert!(err < 1e-4, "op {name} trial {trial}: rel err {err}");
                }
            }
        }
    }

    #[test]
    fn structured_ops_pass_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // matmul + transpose + add_rows + scale_rows + gathers + reductions
        let a = Tensor::randn(vec![3, 4], &mut rng).with_requires_grad();
        let run = |p: &[f64]| {
            let tt = Tensor::new(vec![3, 4], p.to_vec()).unwrap().with_requires_grad();
            let mut t = Tape::new();
            let v = t.leaf(&tt);
            structured_expr(&mut t, v)
        };
        let mut t = Tape::new();
        let v = t.leaf(&a);
        let s = structured_expr(&mut t, v);
        let loss = Value(t.len() - 1);
        let grads = t.backward(loss).unwrap();
        let _ = s;
        let numeric = finite_difference(run, a.data(), 1e-5);
        let err = max_rel_err(grads.get(v).unwrap(), &numeric);
        assert!(err < 1e-4, "rel err {err}");
    }

    fn structured_expr(t: &mut Tape, v: Value) -> f64 {
        let vt = t.transpose(v).unwrap();
        let prod = t.matmul(v, vt).unwrap(); // 3x3
        let bias = t.constant(vec![3], vec![0.3, -0.2, 0.1]);
        let shifted = t.add_rows(prod, bias).unwrap();
        let scale = t.constant(vec![3], vec![1.5, 0.5, -1.0]);
        let scaled = t.scale_rows(shifted, scale).unwrap();
        let some_rows = t.gather_rows(scaled, vec![0, 2, 2]).unwrap();
        let some_cols = t.gather_cols(some_rows, vec![1, 0]).unwrap();
        let th = t.tanh(some_cols);
        let mx = t.reduce(ReduceKind::Max, th, &[0]).unwrap();
        let mn = t.reduce_all(ReduceKind::Min, th).unwrap();
        let sm = t.reduce_all(ReduceKind::Mean, mx).unwrap();
        let out = t.add(sm, mn).unwrap();
        t.scalar_value(out)
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(vec![2, 5, 5], &mut rng).with_requires_grad();
        let w = Tensor::randn(vec![3, 2, 3, 3], &mut rng).with_requires_grad();
        let b = Tensor::randn(vec![3], &mut rng).with_requires_grad();

        let forward = |xd: &[f64], wd: &[f64], bd: &[f64]| {
            let xt = Tensor::new(vec![2, 5, 5], xd.to_vec()).unwrap().with_requires_grad();
            let wt = Tensor::new(vec![3, 2, 3, 3], wd.to_vec()).unwrap().with_requires_grad();
            let bt = Tensor::new(vec![3], bd.to_vec()).unwrap().with_requires_grad();
            let mut t = Tape::new();
            let (vx, vw, vb) = (t.leaf(&xt), t.leaf(&wt), t.leaf(&bt));
            let y = t.conv2d(vx, vw, vb, 2, 1).unwrap();
            let th = t.tanh(y);
            let s = t.reduce_all(ReduceKind::Sum, th).unwrap();
            (t, vx, vw, vb, s)
        };
        let (t, vx, vw, vb, s) = forward(x.data(), w.data(), b.data());
        let grads = t.backward(s).unwrap();

        let fx = |p: &[f64]| forward(p, w.data(), b.data()).0.scalar_value(s);
        let fw = |p: &[f64]| forward(x.data(), p, b.data()).0.scalar_value(s);
        let fb = |p: &[f64]| forward(x.data(), w.data(), p).0.scalar_value(s);
        for (f, leaf, data) in [
            (Box::new(fx) as Box<dyn FnMut(&[f64]) -> f64>, vx, x.data()),
            (Box::new(fw), vw, w.data()),
            (Box::new(fb), vb, b.data()),
        ] {
            let err = check(f, data, grads.get(leaf).unwrap(), 1e-5);
            assert!(err < 1e-4, "conv2d rel err {err}");
        }
    }

    #[test]
    fn conv2d_output_shape_and_kernel_bounds() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 4, 4], vec![0.0; 16]);
        let w = t.constant(vec![2, 1, 3, 3], vec![0.0; 18]);
        let b = t.constant(vec![2], vec![0.0; 2]);
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(t.shape(y), &[2, 4, 4]);
        let wbig = t.constant(vec![1, 1, 9, 9], vec![0.0; 81]);
        let b1 = t.constant(vec![1], vec![0.0]);
        assert!(t.conv2d(x, wbig, b1, 1, 1).is_err());
    }

    #[test]
    fn upsample_bilinear_passes_finite_differences_and_preserves_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(vec![1, 3, 3], &mut rng).with_requires_grad();
        let run = |p: &[f64]| {
            let xt = Tensor::new(vec![1, 3, 3], p.to_vec()).unwrap().with_requires_grad();
            let mut t = Tape::new();
            let v = t.leaf(&xt);
            let up = t.upsample_bilinear_2x(v).unwrap();
            let sq = t.mul(up, up).unwrap();
            let s = t.reduce_all(ReduceKind::Sum, sq).unwrap();
            t.scalar_value(s)
        };
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let up = t.upsample_bilinear_2x(v).unwrap();
        assert_eq!(t.shape(up), &[1, 6, 6]);
        // corner alignment
        assert_eq!(t.value(up)[0], x.data()[0]);
        assert_eq!(t.value(up)[35], x.data()[8]);
        let sq = t.mul(up, up).unwrap();
        let s = t.reduce_all(ReduceKind::Sum, sq).unwrap();
        let grads = t.backward(s).unwrap();
        let err = check(run, x.data(), grads.get(v).unwrap(), 1e-6);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn positions_by_channels_roundtrip() {
        let mut t = Tape::new();
        // 2 channels, 2x2 spatial
        let x = t.constant(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
        let y = t.positions_by_channels(x).unwrap();
        assert_eq!(t.shape(y), &[4, 2]);
        assert_eq!(t.value(y), &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
    }

    #[test]
    fn deterministic_forward_backward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = Tensor::randn(vec![4, 4], &mut rng).with_requires_grad();
            let mut t = Tape::new();
            let v = t.leaf(&x);
            let y = t.tanh(v);
            let z = t.matmul(y, y).unwrap();
            let s = t.reduce_all(ReduceKind::Sum, z).unwrap();
            let val = t.scalar_value(s);
            let grads = t.backward(s).unwrap();
            (val, grads.get(v).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
                   g2.iter().map(|f| f.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn empty_reduction_axis_is_domain_error() {
        let mut t = Tape::new();
        let v = t.constant(vec![0], vec![]);
        assert!(matches!(
            t.reduce_all(ReduceKind::Max, v),
            Err(crate::error::Error::Domain(_))
        ));
    }
}
