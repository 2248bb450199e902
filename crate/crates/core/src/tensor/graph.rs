use super::{gemm, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Four weighted source indices contributing to one output element.
pub type Tap<T> = [(usize, T); 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst {
        a: Var,
        factor: Vec<T>,
    },
    AddConst(Var),
    Scale {
        a: Var,
        s: T,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows {
        a: Var,
        cols: usize,
        inv_temp: T,
    },
    Standardize {
        a: Var,
        channels: usize,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Concat(Vec<Var>),
    Narrow {
        a: Var,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Gather {
        a: Var,
        taps: Vec<Tap<T>>,
    },
    L1 {
        pred: Var,
        target: Vec<T>,
        mask: Option<Vec<T>>,
        count: T,
    },
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst { .. } => "mul_const",
            Op::AddConst(..) => "add_const",
            Op::Scale { .. } => "scale",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::Standardize { .. } => "standardize_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::L1 { .. } => "l1_loss",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardStats {
    /// Recorded operations whose local gradient was applied.
    pub ops_visited: usize,
}

/// Ordered tape of executed operations.
///
/// Every op appends one node; `backward` walks the tape once in reverse.
/// A graph built with [`Graph::no_grad`] records values only.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Copies a value out of the graph, dropping gradient bookkeeping.
    pub fn detach(&self, v: Var) -> Tensor<T> {
        let t = &self.nodes[v.0].value;
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad: requires_grad && self.grad_enabled,
                grad: None,
            },
            op,
        });
        Var(id)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient (unless the graph is `no_grad`).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t.shape, t.data, Op::Leaf, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                msg: format!("expected rank 2, got {:?}", s),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        self.same_shape(op, a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant. `factor` broadcasts over leading
    /// dimensions when its length divides the input length.
    pub fn mul_const(&mut self, a: Var, factor: &[T]) -> Result<Var> {
        let n = self.data(a).len();
        if factor.is_empty() || n % factor.len() != 0 {
            return Err(TensorError::Dimension {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![factor.len()],
            });
        }
        let full: Vec<T> = (0..n).map(|i| factor[i % factor.len()]).collect();
        let out = self.data(a).iter().zip(&full).map(|(&x, &f)| x * f).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(shape, out, Op::MulConst { a, factor: full }, rg))
    }

    pub fn add_const(&mut self, a: Var, c: &[T]) -> Result<Var> {
        if c.len() != self.data(a).len() {
            return Err(TensorError::Dimension {
                op: "add_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let out = self.data(a).iter().zip(c).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(shape, out, Op::AddConst(a), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(shape, out, Op::Scale { a, s }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(shape, out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    /// Row-wise softmax of `a / temperature` on a rank-2 tensor, computed with
    /// per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(TensorError::Parameter {
                op: "softmax_rows",
                msg: format!("temperature must be positive, got {}", temperature),
            });
        }
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op: "softmax_rows",
                msg: format!("expected rank 2, got {:?}", s),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let inv_temp = T::one() / temperature;
        let out = softmax_rows_values(self.data(a), rows, cols, inv_temp);
        let rg = self.any_grad(&[a]);
        Ok(self.push(s, out, Op::SoftmaxRows { a, cols, inv_temp }, rg))
    }

    /// Zero mean and unit variance across dim 0 at every remaining position:
    /// `(x - mean) / sqrt(var + eps)`.
    pub fn standardize_channels(&mut self, a: Var, eps: T) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || s[0] == 0 {
            return Err(TensorError::Shape {
                op: "standardize_channels",
                msg: format!("expected [C, ...] with C > 0, got {:?}", s),
            });
        }
        if !(eps >= T::zero()) {
            return Err(TensorError::Parameter {
                op: "standardize_channels",
                msg: format!("eps must be >= 0, got {}", eps),
            });
        }
        let channels = s[0];
        let x = self.data(a);
        let plane = x.len() / channels;
        let inv_c = T::one() / T::of(channels as f64);
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); plane];
        for p in 0..plane {
            let mean: T = (0..channels).map(|c| x[c * plane + p]).sum::<T>() * inv_c;
            let var: T = (0..channels).map(|c| (x[c * plane + p] - mean).powi(2)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            inv_std[p] = r;
            for c in 0..channels {
                out[c * plane + p] = (x[c * plane + p] - mean) * r;
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(s, out, Op::Standardize { a, channels, inv_std }, rg))
    }

    /// Cross-correlation of `x: [c_in, h, w]` with `w: [c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(TensorError::Dimension {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(TensorError::Parameter {
                op: "conv2d",
                msg: "stride must be at least 1".into(),
            });
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if kh > ph || kw > pw {
            return Err(TensorError::Shape {
                op: "conv2d",
                msg: format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, ph, pw),
            });
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(TensorError::Shape {
                op: "conv2d",
                msg: format!(
                    "non-integral output size for input {}x{}, kernel {}x{}, stride {}, padding {}",
                    h, wd, kh, kw, stride, pad
                ),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(TensorError::Dimension {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![c_out],
                });
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        };
        let cols = im2col(self.data(x), &geom);
        let np = geom.out_plane();
        let mut out = vec![T::zero(); c_out * np];
        gemm(
            c_out,
            geom.patch(),
            np,
            self.data(w),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.data(b);
            for (o, plane) in out.chunks_mut(np).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        let keep_cols = if self.requires_grad(w) { cols } else { Vec::new() };
        Ok(self.push(
            vec![c_out, geom.ho, geom.wo],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: keep_cols,
            },
            rg,
        ))
    }

    /// Concatenation along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = first;
        shape[0] = lead;
        let rg = self.any_grad(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), rg))
    }

    /// Slice `[start, start + len)` of the leading dimension.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(TensorError::Shape {
                op: "narrow",
                msg: format!("range {}..{} outside {:?}", start, start + len, s),
            });
        }
        let inner: usize = s[1..].iter().product();
        let out = self.data(a)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            shape,
            out,
            Op::Narrow {
                a,
                start: start * inner,
                len: len * inner,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(a).len() {
            return Err(TensorError::Shape {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape(a), shape),
            });
        }
        let out = self.data(a).to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    /// `out[o] = Σ weight · a[index]` over the four taps of output `o`.
    pub fn gather(&mut self, a: Var, out_shape: &[usize], taps: Vec<Tap<T>>) -> Result<Var> {
        if out_shape.iter().product::<usize>() != taps.len() {
            return Err(TensorError::Shape {
                op: "gather",
                msg: format!("{} taps for output shape {:?}", taps.len(), out_shape),
            });
        }
        let src = self.data(a);
        if taps.iter().flatten().any(|&(i, _)| i >= src.len()) {
            return Err(TensorError::Shape {
                op: "gather",
                msg: "tap index out of range".into(),
            });
        }
        let out = taps
            .iter()
            .map(|t| t.iter().map(|&(i, wt)| src[i] * wt).sum())
            .collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(out_shape.to_vec(), out, Op::Gather { a, taps }, rg))
    }

    /// Bilinear sampling of `field: [c, h, w]` at constant continuous pixel
    /// coordinates `coords: [2, ho, wo]` (x then y). Out-of-bounds coordinates
    /// clamp to the border; the returned mask marks in-bounds samples.
    /// Gradients flow to `field` only.
    pub fn bilinear_sample(&mut self, field: Var, coords: &Tensor<T>) -> Result<(Var, Vec<bool>)> {
        let fs = self.shape(field).to_vec();
        let cs = coords.shape();
        if fs.len() != 3 || cs.len() != 3 || cs[0] != 2 {
            return Err(TensorError::Dimension {
                op: "bilinear_sample",
                lhs: fs,
                rhs: cs.to_vec(),
            });
        }
        let (taps, valid) = bilinear_field_taps(fs[0], fs[1], fs[2], coords);
        let out = self.gather(field, &[fs[0], cs[1], cs[2]], taps)?;
        Ok((out, valid))
    }

    /// Mean absolute difference over mask-selected entries. `mask` broadcasts
    /// over leading dimensions like [`Graph::mul_const`].
    pub fn l1_loss(&mut self, pred: Var, target: &[T], mask: Option<&[T]>) -> Result<Var> {
        let n = self.data(pred).len();
        if target.len() != n {
            return Err(TensorError::Dimension {
                op: "l1_loss",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let full_mask = match mask {
            Some(m) => {
                if m.is_empty() || n % m.len() != 0 {
                    return Err(TensorError::Dimension {
                        op: "l1_loss mask",
                        lhs: self.shape(pred).to_vec(),
                        rhs: vec![m.len()],
                    });
                }
                Some((0..n).map(|i| m[i % m.len()]).collect::<Vec<T>>())
            }
            None => None,
        };
        let count = match &full_mask {
            Some(m) => m.iter().copied().sum::<T>(),
            None => T::of(n as f64),
        };
        if !(count > T::zero()) {
            return Err(TensorError::DegenerateMask);
        }
        let p = self.data(pred);
        let total: T = match &full_mask {
            Some(m) => p
                .iter()
                .zip(target)
                .zip(m)
                .map(|((&a, &b), &w)| (a - b).abs() * w)
                .sum(),
            None => p.iter().zip(target).map(|(&a, &b)| (a - b).abs()).sum(),
        };
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            vec![],
            vec![total / count],
            Op::L1 {
                pred,
                target: target.to_vec(),
                mask: full_mask,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.data(a).len() as f64);
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(vec![], vec![s / n], Op::Mean(a), rg)
    }

    fn accumulate(&mut self, v: Var, contrib: &[T]) {
        let node = &mut self.nodes[v.0].value;
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, &b)| *a += b),
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    /// Reverse accumulation from a scalar `loss`. Gradients of earlier calls
    /// are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStats> {
        if self.data(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        let mut stats = BackwardStats { ops_visited: 0 };
        if !self.requires_grad(loss) {
            return Ok(stats);
        }
        self.nodes[loss.0].value.grad = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(dy) = self.nodes[id].value.grad.take() else {
                continue;
            };
            if !matches!(self.nodes[id].op, Op::Leaf) {
                stats.ops_visited += 1;
                self.apply_local(id, &dy);
            }
            self.nodes[id].value.grad = Some(dy);
        }
        Ok(stats)
    }

    fn apply_local(&mut self, id: usize, dy: &[T]) {
        // Temporarily move the op out so input values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, dy, false, self.data(b), true, &mut da, false);
                    self.accumulate(a, &da);
                }
                if self.requires_grad(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, self.data(a), true, dy, false, &mut db, false);
                    self.accumulate(b, &db);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = dy[c * rows + r];
                    }
                }
                self.accumulate(a, &da);
            }
            &Op::Add(a, b) => {
                self.accumulate(a, dy);
                self.accumulate(b, dy);
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, dy);
                let neg: Vec<T> = dy.iter().map(|&v| -v).collect();
                self.accumulate(b, &neg);
            }
            &Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let da: Vec<T> = dy.iter().zip(self.data(b)).map(|(&g, &y)| g * y).collect();
                    self.accumulate(a, &da);
                }
                if self.requires_grad(b) {
                    let db: Vec<T> = dy.iter().zip(self.data(a)).map(|(&g, &x)| g * x).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::MulConst { a, factor } => {
                let da: Vec<T> = dy.iter().zip(factor).map(|(&g, &f)| g * f).collect();
                self.accumulate(*a, &da);
            }
            &Op::AddConst(a) => self.accumulate(a, dy),
            &Op::Scale { a, s } => {
                let da: Vec<T> = dy.iter().map(|&g| g * s).collect();
                self.accumulate(a, &da);
            }
            &Op::Relu(a) => {
                let da: Vec<T> = dy
                    .iter()
                    .zip(self.data(a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(a, &da);
            }
            &Op::Tanh(a) => {
                let y = self.nodes[id].value.data();
                let da: Vec<T> = dy.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                self.accumulate(a, &da);
            }
            &Op::Sigmoid(a) => {
                let y = self.nodes[id].value.data();
                let da: Vec<T> = dy.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                self.accumulate(a, &da);
            }
            &Op::SoftmaxRows { a, cols, inv_temp } => {
                let y = self.nodes[id].value.data();
                let mut da = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in da.chunks_mut(cols).zip(y.chunks(cols)).zip(dy.chunks(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for ((d, &p), &g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = p * (g - dot) * inv_temp;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Standardize { a, channels, inv_std } => {
                let y = self.nodes[id].value.data();
                let plane = inv_std.len();
                let inv_c = T::one() / T::of(*channels as f64);
                let mut da = vec![T::zero(); y.len()];
                for (p, &r) in inv_std.iter().enumerate() {
                    let idx = |c: usize| c * plane + p;
                    let mg: T = (0..*channels).map(|c| dy[idx(c)]).sum::<T>() * inv_c;
                    let mgy: T = (0..*channels).map(|c| dy[idx(c)] * y[idx(c)]).sum::<T>() * inv_c;
                    for c in 0..*channels {
                        da[idx(c)] = r * (dy[idx(c)] - mg - y[idx(c)] * mgy);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let np = geom.out_plane();
                let k = geom.patch();
                if let Some(b) = *b {
                    if self.requires_grad(b) {
                        let db: Vec<T> = dy.chunks(np).map(|p| p.iter().copied().sum()).collect();
                        self.accumulate(b, &db);
                    }
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); geom.c_out * k];
                    gemm(geom.c_out, np, k, dy, false, cols, true, &mut dw, false);
                    self.accumulate(*w, &dw);
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![T::zero(); k * np];
                    gemm(k, geom.c_out, np, self.data(*w), true, dy, false, &mut dcols, false);
                    let dx = col2im(&dcols, geom);
                    self.accumulate(*x, &dx);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    self.accumulate(p, &dy[off..off + len]);
                    off += len;
                }
            }
            &Op::Narrow { a, start, len } => {
                if self.requires_grad(a) {
                    let mut da = vec![T::zero(); self.data(a).len()];
                    da[start..start + len].copy_from_slice(dy);
                    self.accumulate(a, &da);
                }
            }
            &Op::Reshape(a) => self.accumulate(a, dy),
            Op::Gather { a, taps } => {
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); self.data(*a).len()];
                    for (t, &g) in taps.iter().zip(dy) {
                        for &(i, wt) in t {
                            da[i] += g * wt;
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }
            Op::L1 {
                pred,
                target,
                mask,
                count,
            } => {
                let g = dy[0] / *count;
                let p = self.data(*pred);
                let sign = |d: T| {
                    if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                let dp: Vec<T> = match mask {
                    Some(m) => p
                        .iter()
                        .zip(target)
                        .zip(m)
                        .map(|((&x, &t), &w)| sign(x - t) * w * g)
                        .collect(),
                    None => p.iter().zip(target).map(|(&x, &t)| sign(x - t) * g).collect(),
                };
                self.accumulate(*pred, &dp);
            }
            &Op::Sum(a) => {
                let da = vec![dy[0]; self.data(a).len()];
                self.accumulate(a, &da);
            }
            &Op::Mean(a) => {
                let n = self.data(a).len();
                let da = vec![dy[0] / T::of(n as f64); n];
                self.accumulate(a, &da);
            }
        }
        self.nodes[id].op = op;
    }

    /// Op names in execution order, for diagnostics.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }
}

pub(crate) fn softmax_rows_values<T: Real>(x: &[T], rows: usize, cols: usize, inv_temp: T) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s - max) * inv_temp).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / total);
    }
    out
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.out_plane();
    let mut cols = vec![T::zero(); g.patch() * np];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.out_plane();
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * np..(row + 1) * np];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Bilinear taps for a point on an `h × w` plane (plane-local indices).
/// The point is clamped to the border; `valid` reports whether it was
/// in-bounds, i.e. every neighbor with nonzero weight exists.
pub fn bilinear_taps<T: Real>(h: usize, w: usize, x: T, y: T) -> (Tap<T>, bool) {
    let zero = T::zero();
    let (wmax, hmax) = (T::of((w - 1) as f64), T::of((h - 1) as f64));
    let valid = x.is_finite() && y.is_finite() && x >= zero && y >= zero && x <= wmax && y <= hmax;
    let cx = if x.is_finite() { x.max(zero).min(wmax) } else { zero };
    let cy = if y.is_finite() { y.max(zero).min(hmax) } else { zero };
    let x0 = cx.floor().to_usize().unwrap().min(w.saturating_sub(2));
    let y0 = cy.floor().to_usize().unwrap().min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - T::of(x0 as f64);
    let fy = cy - T::of(y0 as f64);
    let one = T::one();
    (
        [
            (y0 * w + x0, (one - fx) * (one - fy)),
            (y0 * w + x1, fx * (one - fy)),
            (y1 * w + x0, (one - fx) * fy),
            (y1 * w + x1, fx * fy),
        ],
        valid,
    )
}

pub(crate) fn bilinear_field_taps<T: Real>(
    channels: usize,
    h: usize,
    w: usize,
    coords: &Tensor<T>,
) -> (Vec<Tap<T>>, Vec<bool>) {
    let cs = coords.shape();
    let n = cs[1] * cs[2];
    let (xs, ys) = coords.data().split_at(n);
    let mut base = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for (&x, &y) in xs.iter().zip(ys) {
        let (t, v) = bilinear_taps(h, w, x, y);
        base.push(t);
        valid.push(v);
    }
    let plane = h * w;
    let mut taps = Vec::with_capacity(channels * n);
    for c in 0..channels {
        for t in &base {
            taps.push(t.map(|(i, wt)| (i + c * plane, wt)));
        }
    }
    (taps, valid)
}
