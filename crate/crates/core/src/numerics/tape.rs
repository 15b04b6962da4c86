//! Define-by-run tape: forward ops record themselves, `backward` replays the
//! record in exact reverse order and accumulates gradients into every node
//! that (transitively) depends on a gradient-requiring leaf.

use super::{NumericsError, Tensor};

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddChannel { x: usize, bias: usize },
    MulChannel { x: usize, gate: usize },
    MulScalar { x: usize, s: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Abs { x: usize },
    Softmax { x: usize, axis: usize },
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    GridSample { f: usize, points: Vec<(f64, f64)> },
    SumAll { x: usize },
    MeanAll { x: usize },
    Reshape { x: usize },
    Concat0 { parts: Vec<usize> },
}

pub struct Tape {
    tensors: Vec<Tensor>,
    needs: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
    backward_run: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Row-major matrix product into `out` (must be zeroed by the caller when
/// accumulation is not wanted). ikj loop order keeps the inner stride 1.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            tensors: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            backward_run: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Record a leaf. `requires_grad` marks it as a gradient target.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> TensorId {
        self.push(t, requires_grad, Op::Leaf)
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t, false, Op::Leaf)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.tensors[id.0].data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.tensors[id.0].shape()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Gradient of a node, if backward reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, t: Tensor, needs: bool, op: Op) -> TensorId {
        let id = self.tensors.len();
        self.tensors.push(t);
        self.needs.push(needs);
        self.grads.push(None);
        self.ops.push(op);
        TensorId(id)
    }

    fn push_op(&mut self, t: Tensor, inputs: &[usize], op: Op) -> TensorId {
        let needs = inputs.iter().any(|&i| self.needs[i]);
        self.push(t, needs, op)
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `a[m,k] · b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::MatmulShape {
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out).expect("matmul shape");
        Ok(self.push_op(t, &[a.0, b.0], Op::Matmul { a: a.0, b: b.0 }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, NumericsError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(NumericsError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: s.to_vec(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out).expect("transpose shape");
        Ok(self.push_op(t, &[x.0], Op::Transpose { x: x.0 }))
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("add shape");
        Ok(self.push_op(t, &[a.0, b.0], Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("sub shape");
        Ok(self.push_op(t, &[a.0, b.0], Op::Sub { a: a.0, b: b.0 }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("mul shape");
        Ok(self.push_op(t, &[a.0, b.0], Op::Mul { a: a.0, b: b.0 }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("scale shape");
        self.push_op(t, &[x.0], Op::Scale { x: x.0, c })
    }

    /// Broadcast-add `bias[C]` along axis 0 of `x[C, ...]`.
    pub fn add_channel(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, NumericsError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.is_empty() || sx[0] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_channel",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let c = sx[0];
        let rest: usize = sx[1..].iter().product();
        let xd = self.data(x);
        let bd = self.data(bias);
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            let b = bd[ch];
            for r in 0..rest {
                out[ch * rest + r] = xd[ch * rest + r] + b;
            }
        }
        let t = Tensor::new(sx.to_vec(), out).expect("add_channel shape");
        Ok(self.push_op(t, &[x.0, bias.0], Op::AddChannel { x: x.0, bias: bias.0 }))
    }

    /// Broadcast-multiply `gate[C]` along axis 0 of `x[C, ...]`.
    pub fn mul_channel(&mut self, x: TensorId, gate: TensorId) -> Result<TensorId, NumericsError> {
        let (sx, sg) = (self.shape(x), self.shape(gate));
        if sg.len() != 1 || sx.is_empty() || sx[0] != sg[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_channel",
                left: sx.to_vec(),
                right: sg.to_vec(),
            });
        }
        let c = sx[0];
        let rest: usize = sx[1..].iter().product();
        let xd = self.data(x);
        let gd = self.data(gate);
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            let g = gd[ch];
            for r in 0..rest {
                out[ch * rest + r] = xd[ch * rest + r] * g;
            }
        }
        let t = Tensor::new(sx.to_vec(), out).expect("mul_channel shape");
        Ok(self.push_op(t, &[x.0, gate.0], Op::MulChannel { x: x.0, gate: gate.0 }))
    }

    /// Multiply `x` by a learnable scalar `s` of shape `[1]`.
    pub fn mul_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId, NumericsError> {
        let ss = self.shape(s);
        if ss != [1] {
            return Err(NumericsError::RankMismatch {
                op: "mul_scalar",
                expected: 1,
                shape: ss.to_vec(),
            });
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("mul_scalar shape");
        Ok(self.push_op(t, &[x.0, s.0], Op::MulScalar { x: x.0, s: s.0 }))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("relu shape");
        self.push_op(t, &[x.0], Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("sigmoid shape");
        self.push_op(t, &[x.0], Op::Sigmoid { x: x.0 })
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.abs()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("abs shape");
        self.push_op(t, &[x.0], Op::Abs { x: x.0 })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, NumericsError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(NumericsError::AxisOutOfRange {
                axis,
                rank: s.len(),
            });
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(xd[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xd[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let t = Tensor::new(s, out).expect("softmax shape");
        Ok(self.push_op(t, &[x.0], Op::Softmax { x: x.0, axis }))
    }

    /// 2-D cross-correlation of `x[Cin,H,W]` with `w[Cout,Cin,kh,kw]`.
    /// Output spatial size is `floor((H + 2*pad - kh)/stride) + 1`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, NumericsError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 {
            return Err(NumericsError::RankMismatch {
                op: "conv2d input",
                expected: 3,
                shape: sx,
            });
        }
        if sw.len() != 4 {
            return Err(NumericsError::RankMismatch {
                op: "conv2d kernel",
                expected: 4,
                shape: sw,
            });
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, kcin, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if cin != kcin {
            return Err(NumericsError::ChannelMismatch {
                input: cin,
                kernel: kcin,
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(NumericsError::EvenKernel { kh, kw });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(NumericsError::EmptyConvOutput {
                h,
                w: wd,
                kh,
                kw,
                stride,
                pad,
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let out = conv2d_forward(
            self.data(x),
            self.data(w),
            cin,
            h,
            wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        );
        let t = Tensor::new(vec![cout, ho, wo], out).expect("conv2d shape");
        Ok(self.push_op(
            t,
            &[x.0, w.0],
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                pad,
            },
        ))
    }

    /// Bilinear sample of `f[C,H,W]` at pixel coordinates.
    /// Out-of-bounds coordinates are clamped to the border; the gradient flows
    /// only into `f`, never into the coordinates. Returns `[P, C]`.
    pub fn grid_sample(
        &mut self,
        f: TensorId,
        points: &[(f64, f64)],
    ) -> Result<TensorId, NumericsError> {
        let s = self.shape(f).to_vec();
        if s.len() != 3 {
            return Err(NumericsError::RankMismatch {
                op: "grid_sample",
                expected: 3,
                shape: s,
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let fd = self.data(f);
        let mut out = vec![0.0; points.len() * c];
        for (p, &(px, py)) in points.iter().enumerate() {
            let (x0, x1, dx) = clamp_lerp(px, w);
            let (y0, y1, dy) = clamp_lerp(py, h);
            let w00 = (1.0 - dx) * (1.0 - dy);
            let w10 = dx * (1.0 - dy);
            let w01 = (1.0 - dx) * dy;
            let w11 = dx * dy;
            for ch in 0..c {
                let plane = &fd[ch * h * w..(ch + 1) * h * w];
                out[p * c + ch] = w00 * plane[y0 * w + x0]
                    + w10 * plane[y0 * w + x1]
                    + w01 * plane[y1 * w + x0]
                    + w11 * plane[y1 * w + x1];
            }
        }
        let t = Tensor::new(vec![points.len(), c], out).expect("grid_sample shape");
        Ok(self.push_op(
            t,
            &[f.0],
            Op::GridSample {
                f: f.0,
                points: points.to_vec(),
            },
        ))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        self.push_op(Tensor::scalar(s), &[x.0], Op::SumAll { x: x.0 })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.data(x).len().max(1);
        let s: f64 = self.data(x).iter().sum();
        self.push_op(
            Tensor::scalar(s / n as f64),
            &[x.0],
            Op::MeanAll { x: x.0 },
        )
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, NumericsError> {
        let from = self.shape(x).to_vec();
        let from_len = self.data(x).len();
        let to_len: usize = shape.iter().product();
        if from_len != to_len {
            return Err(NumericsError::BadReshape {
                from,
                from_len,
                to: shape,
                to_len,
            });
        }
        let t = Tensor::new(shape, self.data(x).to_vec()).expect("reshape shape");
        Ok(self.push_op(t, &[x.0], Op::Reshape { x: x.0 }))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat0(&mut self, parts: &[TensorId]) -> Result<TensorId, NumericsError> {
        assert!(!parts.is_empty(), "concat0 of zero parts");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut dim0 = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat0",
                    left: self.shape(parts[0]).to_vec(),
                    right: s.to_vec(),
                });
            }
            dim0 += s[0];
        }
        let mut data = Vec::with_capacity(dim0 * tail.iter().product::<usize>());
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(shape, data).expect("concat0 shape");
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push_op(t, &idx, Op::Concat0 { parts: idx.clone() }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients accumulate into every node
    /// on a path to a `requires_grad` leaf; the tape is then sealed and a
    /// second call errors.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), NumericsError> {
        if self.tensors.is_empty() {
            return Err(NumericsError::EmptyTape);
        }
        if self.backward_run {
            return Err(NumericsError::DoubleBackward);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: ls.to_vec(),
            });
        }
        self.backward_run = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.tensors.len()).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = self.ops[i].clone();
            self.apply_backward(i, &g, &op);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, node: usize, f: impl FnOnce(&mut [f64])) {
        if !self.needs[node] {
            return;
        }
        if self.grads[node].is_none() {
            self.grads[node] = Some(vec![0.0; self.tensors[node].numel()]);
        }
        f(self.grads[node].as_mut().unwrap());
    }

    fn apply_backward(&mut self, out: usize, g: &[f64], op: &Op) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.tensors[a].shape().to_vec();
                let sb = self.tensors[b].shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs[a] {
                    // da = g · bᵀ
                    let bd = self.tensors[b].data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            let brow = &bd[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.acc(a, |ga| add_into(ga, &da));
                }
                if self.needs[b] {
                    // db = aᵀ · g
                    let ad = self.tensors[a].data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                    self.acc(b, |gb| add_into(gb, &db));
                }
            }
            Op::Transpose { x } => {
                let s = self.tensors[x].shape().to_vec();
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = g[i * r + j];
                    }
                }
                self.acc(x, |gx| add_into(gx, &dx));
            }
            Op::Add { a, b } => {
                self.acc(a, |ga| add_into(ga, g));
                self.acc(b, |gb| add_into(gb, g));
            }
            Op::Sub { a, b } => {
                self.acc(a, |ga| add_into(ga, g));
                self.acc(b, |gb| {
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul { a, b } => {
                if self.needs[a] {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.tensors[b].data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    self.acc(a, |ga| add_into(ga, &d));
                }
                if self.needs[b] {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.tensors[a].data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.acc(b, |gb| add_into(gb, &d));
                }
            }
            Op::Scale { x, c } => {
                self.acc(x, |gx| {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += c * v;
                    }
                });
            }
            Op::AddChannel { x, bias } => {
                self.acc(x, |gx| add_into(gx, g));
                if self.needs[bias] {
                    let c = self.tensors[bias].numel();
                    let rest = self.tensors[x].numel() / c;
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        db[ch] = g[ch * rest..(ch + 1) * rest].iter().sum();
                    }
                    self.acc(bias, |gb| add_into(gb, &db));
                }
            }
            Op::MulChannel { x, gate } => {
                let c = self.tensors[gate].numel();
                let rest = self.tensors[x].numel() / c;
                if self.needs[x] {
                    let gd = self.tensors[gate].data().to_vec();
                    self.acc(x, |gx| {
                        for ch in 0..c {
                            let gv = gd[ch];
                            for r in 0..rest {
                                gx[ch * rest + r] += g[ch * rest + r] * gv;
                            }
                        }
                    });
                }
                if self.needs[gate] {
                    let xd = self.tensors[x].data();
                    let mut dg = vec![0.0; c];
                    for ch in 0..c {
                        let mut s = 0.0;
                        for r in 0..rest {
                            s += g[ch * rest + r] * xd[ch * rest + r];
                        }
                        dg[ch] = s;
                    }
                    self.acc(gate, |gg| add_into(gg, &dg));
                }
            }
            Op::MulScalar { x, s } => {
                if self.needs[x] {
                    let sv = self.tensors[s].data()[0];
                    self.acc(x, |gx| {
                        for (o, v) in gx.iter_mut().zip(g) {
                            *o += sv * v;
                        }
                    });
                }
                if self.needs[s] {
                    let xd = self.tensors[x].data();
                    let ds: f64 = g.iter().zip(xd).map(|(gv, xv)| gv * xv).sum();
                    self.acc(s, |gs| gs[0] += ds);
                }
            }
            Op::Relu { x } => {
                if self.needs[x] {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.tensors[x].data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.acc(x, |gx| add_into(gx, &d));
                }
            }
            Op::Sigmoid { x } => {
                if self.needs[x] {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.tensors[out].data())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    self.acc(x, |gx| add_into(gx, &d));
                }
            }
            Op::Abs { x } => {
                if self.needs[x] {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.tensors[x].data())
                        .map(|(gv, xv)| {
                            if *xv > 0.0 {
                                *gv
                            } else if *xv < 0.0 {
                                -*gv
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.acc(x, |gx| add_into(gx, &d));
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs[x] {
                    let s = self.tensors[x].shape().to_vec();
                    let (outer, len, inner) = axis_split(&s, axis);
                    let y = self.tensors[out].data();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += g[idx] * y[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                dx[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    self.acc(x, |gx| add_into(gx, &dx));
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.tensors[x].shape().to_vec();
                let sw = self.tensors[w].shape().to_vec();
                let so = self.tensors[out].shape().to_vec();
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let (ho, wo) = (so[1], so[2]);
                if self.needs[x] {
                    let wdat = self.tensors[w].data();
                    let mut dx = vec![0.0; cin * h * wd];
                    for co in 0..cout {
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let wv = wdat[((co * cin + ci) * kh + ky) * kw + kx];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    for oy in 0..ho {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let iy = iy as usize;
                                        for ox in 0..wo {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            dx[(ci * h + iy) * wd + ix as usize] +=
                                                wv * g[(co * ho + oy) * wo + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.acc(x, |gx| add_into(gx, &dx));
                }
                if self.needs[w] {
                    let xd = self.tensors[x].data();
                    let mut dw = vec![0.0; cout * cin * kh * kw];
                    for co in 0..cout {
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let mut s = 0.0;
                                    for oy in 0..ho {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let iy = iy as usize;
                                        for ox in 0..wo {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            s += g[(co * ho + oy) * wo + ox]
                                                * xd[(ci * h + iy) * wd + ix as usize];
                                        }
                                    }
                                    dw[((co * cin + ci) * kh + ky) * kw + kx] += s;
                                }
                            }
                        }
                    }
                    self.acc(w, |gw| add_into(gw, &dw));
                }
            }
            Op::GridSample { f, ref points } => {
                if self.needs[f] {
                    let s = self.tensors[f].shape().to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let mut df = vec![0.0; c * h * w];
                    for (p, &(px, py)) in points.iter().enumerate() {
                        let (x0, x1, dx) = clamp_lerp(px, w);
                        let (y0, y1, dy) = clamp_lerp(py, h);
                        let w00 = (1.0 - dx) * (1.0 - dy);
                        let w10 = dx * (1.0 - dy);
                        let w01 = (1.0 - dx) * dy;
                        let w11 = dx * dy;
                        for ch in 0..c {
                            let gv = g[p * c + ch];
                            let plane = &mut df[ch * h * w..(ch + 1) * h * w];
                            plane[y0 * w + x0] += w00 * gv;
                            plane[y0 * w + x1] += w10 * gv;
                            plane[y1 * w + x0] += w01 * gv;
                            plane[y1 * w + x1] += w11 * gv;
                        }
                    }
                    self.acc(f, |gf| add_into(gf, &df));
                }
            }
            Op::SumAll { x } => {
                let gv = g[0];
                self.acc(x, |gx| {
                    for o in gx.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::MeanAll { x } => {
                let n = self.tensors[x].numel().max(1) as f64;
                let gv = g[0] / n;
                self.acc(x, |gx| {
                    for o in gx.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Reshape { x } => {
                self.acc(x, |gx| add_into(gx, g));
            }
            Op::Concat0 { ref parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.tensors[p].numel();
                    if self.needs[p] {
                        let slice = g[offset..offset + n].to_vec();
                        self.acc(p, |gp| add_into(gp, &slice));
                    }
                    offset += n;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Clamp a sample coordinate to the valid border, returning the two bracketing
/// indices and the interpolation fraction.
fn clamp_lerp(coord: f64, size: usize) -> (usize, usize, f64) {
    let max = (size - 1) as f64;
    let c = coord.clamp(0.0, max);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, c - i0 as f64)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        let oplane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..cin {
            let xplane = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            orow[ox] += wv * xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}
