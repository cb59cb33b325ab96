//! Dense f64 arrays plus a define-by-run tape with reverse-mode
//! differentiation. The op set is exactly what the capsule gaze network
//! needs: valid convolution, dense layers, a few elementwise maps, and the
//! routing primitives (prediction transform, row softmax, coupling sum,
//! agreement, squash).

pub mod gradcheck;
pub mod matmul;

use std::sync::Arc;

use crate::error::{Error, Result};

/// Epsilon folded into the squash norm so the zero vector stays
/// differentiable.
pub const SQUASH_EPS: f64 = 1e-12;

/// Epsilon under the square root when normalizing rows to unit length.
const UNIT_EPS: f64 = 1e-24;

// ── Tensor ───────────────────────────────────────────────────────────

/// N-dimensional array of f64 in row-major order. Data is shared on clone;
/// `data_mut` copies on write. Scalars have an empty shape.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![v; n]),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![v]),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // zero extents are rejected at construction
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the data; copies if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::<Vec<f64>>::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn share_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => add_into(g, delta),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} contains NaN or Inf")))
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// ── Graph ────────────────────────────────────────────────────────────

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: ValueId,
        kernels: ValueId,
        stride: usize,
    },
    BiasChannels {
        input: ValueId,
        bias: ValueId,
    },
    Dense {
        input: ValueId,
        weights: ValueId,
        bias: ValueId,
    },
    Relu {
        input: ValueId,
    },
    Sigmoid {
        input: ValueId,
    },
    Add {
        lhs: ValueId,
        rhs: ValueId,
    },
    Sub {
        lhs: ValueId,
        rhs: ValueId,
    },
    Mul {
        lhs: ValueId,
        rhs: ValueId,
    },
    Affine {
        input: ValueId,
        scale: f64,
    },
    Sum {
        input: ValueId,
    },
    Dot {
        lhs: ValueId,
        rhs: ValueId,
    },
    SquashRows {
        input: ValueId,
    },
    RowNorms {
        input: ValueId,
    },
    UnitRows {
        input: ValueId,
    },
    Clamp01 {
        input: ValueId,
    },
    RowsDot {
        rows: ValueId,
        vector: ValueId,
    },
    CapsPredict {
        input: ValueId,
        weights: ValueId,
    },
    SoftmaxRows {
        input: ValueId,
    },
    CouplingSum {
        couplings: ValueId,
        predictions: ValueId,
    },
    Agreement {
        predictions: ValueId,
        activities: ValueId,
    },
    Reshape {
        input: ValueId,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run tape. Ops execute eagerly and record themselves; inputs of
/// a node always precede it, so one reverse sweep is a valid backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of recorded values.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input value. Its `requires_grad` flag is kept.
    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        self.push(Op::Leaf, t)
    }

    /// Record an input that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> ValueId {
        t.requires_grad = false;
        self.push(Op::Leaf, t)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of a value after `backward`, if any was produced.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    /// Clear gradients on every recorded value.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    fn out(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut t = Tensor {
            shape,
            data: Arc::new(data),
            grad: None,
            requires_grad,
        };
        t.requires_grad = requires_grad;
        self.push(op, t)
    }

    // ── forward ops ──────────────────────────────────────────────

    /// Valid (unpadded) 2-D convolution of `input` [H,W,Cin] with `kernels`
    /// [k,k,Cin,Cout]; output [H',W',Cout] with H' = (H-k)/stride + 1.
    pub fn conv2d(&mut self, input: ValueId, kernels: ValueId, stride: usize) -> Result<ValueId> {
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be >= 1".into()));
        }
        let (ish, ksh) = (self.value(input).shape(), self.value(kernels).shape());
        if ish.len() != 3 || ksh.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d wants input [H,W,Cin] and kernels [k,k,Cin,Cout], got {ish:?} and {ksh:?}"
            )));
        }
        let (h, w, cin) = (ish[0], ish[1], ish[2]);
        let (k, k2, kcin, cout) = (ksh[0], ksh[1], ksh[2], ksh[3]);
        if k != k2 || kcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d kernels {ksh:?} do not match input {ish:?}"
            )));
        }
        if h < k || w < k {
            return Err(Error::Dimension(format!(
                "conv2d input {h}x{w} smaller than kernel {k}x{k}"
            )));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let patches = im2col(self.value(input).data(), h, w, cin, k, stride, oh, ow);
        let mut out = vec![0.0; oh * ow * cout];
        matmul::matmul(
            &mut out,
            &patches,
            self.value(kernels).data(),
            oh * ow,
            k * k * cin,
            cout,
        );
        let rg = self.needs(input) || self.needs(kernels);
        Ok(self.out(Op::Conv2d { input, kernels, stride }, vec![oh, ow, cout], out, rg))
    }

    /// Add a per-channel bias [C] to a feature map [H,W,C].
    pub fn bias_channels(&mut self, input: ValueId, bias: ValueId) -> Result<ValueId> {
        let ish = self.value(input).shape().to_vec();
        let bsh = self.value(bias).shape();
        if ish.len() != 3 || bsh.len() != 1 || bsh[0] != ish[2] {
            return Err(Error::Dimension(format!(
                "bias_channels wants [H,W,C] + [C], got {ish:?} + {bsh:?}"
            )));
        }
        let c = ish[2];
        let b = self.value(bias).data();
        let mut out = self.value(input).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            add_into(row, b);
        }
        let rg = self.needs(input) || self.needs(bias);
        Ok(self.out(Op::BiasChannels { input, bias }, ish, out, rg))
    }

    /// Fully-connected layer: out = x . W + b with x [n], W [n,m], b [m].
    pub fn dense(&mut self, input: ValueId, weights: ValueId, bias: ValueId) -> Result<ValueId> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weights).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[0] != xs[0] || ws[1] != bs[0] {
            return Err(Error::Dimension(format!(
                "dense wants x[n], W[n,m], b[m]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (n, m) = (ws[0], ws[1]);
        let mut out = self.value(bias).data().to_vec();
        matmul::matmul(&mut out, self.value(input).data(), self.value(weights).data(), 1, n, m);
        let rg = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.out(Op::Dense { input, weights, bias }, vec![m], out, rg))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let t = self.value(input);
        let out: Vec<f64> = t.data().iter().map(|&v| v.max(0.0)).collect();
        let (shape, rg) = (t.shape().to_vec(), t.requires_grad);
        self.out(Op::Relu { input }, shape, out, rg)
    }

    pub fn sigmoid(&mut self, input: ValueId) -> ValueId {
        let t = self.value(input);
        let out: Vec<f64> = t.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let (shape, rg) = (t.shape().to_vec(), t.requires_grad);
        self.out(Op::Sigmoid { input }, shape, out, rg)
    }

    pub fn add(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        self.zip_elementwise(lhs, rhs, Op::Add { lhs, rhs }, |a, b| a + b)
    }

    pub fn sub(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        self.zip_elementwise(lhs, rhs, Op::Sub { lhs, rhs }, |a, b| a - b)
    }

    pub fn mul(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        self.zip_elementwise(lhs, rhs, Op::Mul { lhs, rhs }, |a, b| a * b)
    }

    fn zip_elementwise(
        &mut self,
        lhs: ValueId,
        rhs: ValueId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ValueId> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(Error::Dimension(format!(
                "elementwise op shape mismatch: {:?} vs {:?}",
                self.value(lhs).shape(),
                self.value(rhs).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let shape = self.value(lhs).shape().to_vec();
        let rg = self.needs(lhs) || self.needs(rhs);
        Ok(self.out(op, shape, out, rg))
    }

    /// Elementwise scale * x + shift.
    pub fn affine(&mut self, input: ValueId, scale: f64, shift: f64) -> ValueId {
        let t = self.value(input);
        let out: Vec<f64> = t.data().iter().map(|&v| scale * v + shift).collect();
        let (shape, rg) = (t.shape().to_vec(), t.requires_grad);
        self.out(Op::Affine { input, scale }, shape, out, rg)
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, input: ValueId) -> ValueId {
        let t = self.value(input);
        let s: f64 = t.data().iter().sum();
        let rg = t.requires_grad;
        self.out(Op::Sum { input }, Vec::new(), vec![s], rg)
    }

    pub fn dot(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        if self.value(lhs).len() != self.value(rhs).len() {
            return Err(Error::Dimension(format!(
                "dot length mismatch: {} vs {}",
                self.value(lhs).len(),
                self.value(rhs).len()
            )));
        }
        let s: f64 = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.needs(lhs) || self.needs(rhs);
        Ok(self.out(Op::Dot { lhs, rhs }, Vec::new(), vec![s], rg))
    }

    /// Squash along the last axis: v = (|s|^2 / (1 + |s|^2)) * s / |s| with
    /// |s| = sqrt(sum s^2 + 1e-12), so the zero vector maps to zero.
    pub fn squash_rows(&mut self, input: ValueId) -> ValueId {
        let t = self.value(input);
        let d = *t.shape().last().expect("squash needs at least 1-D input");
        let mut out = vec![0.0; t.len()];
        for (src, dst) in t.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let n2: f64 = src.iter().map(|v| v * v).sum();
            let m = (n2 + SQUASH_EPS).sqrt();
            let g = m / (1.0 + n2 + SQUASH_EPS);
            for (o, &s) in dst.iter_mut().zip(src) {
                *o = g * s;
            }
        }
        let (shape, rg) = (t.shape().to_vec(), t.requires_grad);
        self.out(Op::SquashRows { input }, shape, out, rg)
    }

    /// Euclidean norm of each row of [R,D] -> [R] (exact; the zero row gets
    /// a zero subgradient).
    pub fn row_norms(&mut self, input: ValueId) -> ValueId {
        let t = self.value(input);
        let d = *t.shape().last().expect("row_norms needs at least 1-D input");
        let out: Vec<f64> = t
            .data()
            .chunks_exact(d)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let rg = t.requires_grad;
        self.out(Op::RowNorms { input }, shape, out, rg)
    }

    /// Normalize each row of [R,D] to unit length; rows near zero map
    /// smoothly to zero.
    pub fn unit_rows(&mut self, input: ValueId) -> ValueId {
        let t = self.value(input);
        let d = *t.shape().last().expect("unit_rows needs at least 1-D input");
        let mut out = vec![0.0; t.len()];
        for (src, dst) in t.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let m = (src.iter().map(|v| v * v).sum::<f64>() + UNIT_EPS).sqrt();
            for (o, &s) in dst.iter_mut().zip(src) {
                *o = s / m;
            }
        }
        let (shape, rg) = (t.shape().to_vec(), t.requires_grad);
        self.out(Op::UnitRows { input }, shape, out, rg)
    }

    pub fn clamp01(&mut self, input: ValueId) -> ValueId {
        let t = self.value(input);
        let out: Vec<f64> = t.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();
        let (shape, rg) = (t.shape().to_vec(), t.requires_grad);
        self.out(Op::Clamp01 { input }, shape, out, rg)
    }

    /// Dot of every row of [R,D] with a vector [D] -> [R].
    pub fn rows_dot(&mut self, rows: ValueId, vector: ValueId) -> Result<ValueId> {
        let rsh = self.value(rows).shape();
        let vsh = self.value(vector).shape();
        if rsh.len() != 2 || vsh.len() != 1 || rsh[1] != vsh[0] {
            return Err(Error::Dimension(format!(
                "rows_dot wants [R,D] and [D], got {rsh:?} and {vsh:?}"
            )));
        }
        let d = rsh[1];
        let v = self.value(vector).data();
        let out: Vec<f64> = self
            .value(rows)
            .data()
            .chunks_exact(d)
            .map(|row| row.iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect();
        let shape = vec![rsh[0]];
        let rg = self.needs(rows) || self.needs(vector);
        Ok(self.out(Op::RowsDot { rows, vector }, shape, out, rg))
    }

    /// Per-capsule prediction transform: u [N,Din] with W [N,J,Dout,Din]
    /// gives u_hat [N,J,Dout], u_hat[i,j] = W[i,j] . u[i].
    pub fn caps_predict(&mut self, input: ValueId, weights: ValueId) -> Result<ValueId> {
        let ush = self.value(input).shape();
        let wsh = self.value(weights).shape();
        if ush.len() != 2 || wsh.len() != 4 || wsh[0] != ush[0] || wsh[3] != ush[1] {
            return Err(Error::Dimension(format!(
                "caps_predict wants u[N,Din], W[N,J,Dout,Din]; got {ush:?}, {wsh:?}"
            )));
        }
        let (n, din) = (ush[0], ush[1]);
        let (j, dout) = (wsh[1], wsh[2]);
        let u = self.value(input).data();
        let w = self.value(weights).data();
        let mut out = vec![0.0; n * j * dout];
        for i in 0..n {
            let ui = &u[i * din..(i + 1) * din];
            let wi = &w[i * j * dout * din..(i + 1) * j * dout * din];
            let oi = &mut out[i * j * dout..(i + 1) * j * dout];
            for (wrow, o) in wi.chunks_exact(din).zip(oi.iter_mut()) {
                *o = wrow.iter().zip(ui).map(|(&a, &b)| a * b).sum();
            }
        }
        let rg = self.needs(input) || self.needs(weights);
        Ok(self.out(Op::CapsPredict { input, weights }, vec![n, j, dout], out, rg))
    }

    /// Softmax over the second axis of [N,J] (each row sums to 1).
    pub fn softmax_rows(&mut self, input: ValueId) -> ValueId {
        let t = self.value(input);
        let j = *t.shape().last().expect("softmax needs at least 1-D input");
        let mut out = vec![0.0; t.len()];
        for (src, dst) in t.data().chunks_exact(j).zip(out.chunks_exact_mut(j)) {
            let mx = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mx).exp();
                z += *o;
            }
            for o in dst.iter_mut() {
                *o /= z;
            }
        }
        let (shape, rg) = (t.shape().to_vec(), t.requires_grad);
        self.out(Op::SoftmaxRows { input }, shape, out, rg)
    }

    /// s[j,:] = sum_i c[i,j] * u_hat[i,j,:], with c [N,J], u_hat [N,J,D].
    pub fn coupling_sum(&mut self, couplings: ValueId, predictions: ValueId) -> Result<ValueId> {
        let csh = self.value(couplings).shape();
        let psh = self.value(predictions).shape();
        if csh.len() != 2 || psh.len() != 3 || csh[0] != psh[0] || csh[1] != psh[1] {
            return Err(Error::Dimension(format!(
                "coupling_sum wants c[N,J], u_hat[N,J,D]; got {csh:?}, {psh:?}"
            )));
        }
        let (n, j, d) = (psh[0], psh[1], psh[2]);
        let c = self.value(couplings).data();
        let p = self.value(predictions).data();
        let mut out = vec![0.0; j * d];
        for i in 0..n {
            for jj in 0..j {
                let cij = c[i * j + jj];
                let src = &p[(i * j + jj) * d..(i * j + jj + 1) * d];
                let dst = &mut out[jj * d..(jj + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += cij * v;
                }
            }
        }
        let rg = self.needs(couplings) || self.needs(predictions);
        Ok(self.out(Op::CouplingSum { couplings, predictions }, vec![j, d], out, rg))
    }

    /// Agreement logits: a[i,j] = u_hat[i,j,:] . v[j,:].
    pub fn agreement(&mut self, predictions: ValueId, activities: ValueId) -> Result<ValueId> {
        let psh = self.value(predictions).shape();
        let vsh = self.value(activities).shape();
        if psh.len() != 3 || vsh.len() != 2 || psh[1] != vsh[0] || psh[2] != vsh[1] {
            return Err(Error::Dimension(format!(
                "agreement wants u_hat[N,J,D], v[J,D]; got {psh:?}, {vsh:?}"
            )));
        }
        let (n, j, d) = (psh[0], psh[1], psh[2]);
        let p = self.value(predictions).data();
        let v = self.value(activities).data();
        let mut out = vec![0.0; n * j];
        for i in 0..n {
            for jj in 0..j {
                let src = &p[(i * j + jj) * d..(i * j + jj + 1) * d];
                let vj = &v[jj * d..(jj + 1) * d];
                out[i * j + jj] = src.iter().zip(vj).map(|(&a, &b)| a * b).sum();
            }
        }
        let rg = self.needs(predictions) || self.needs(activities);
        Ok(self.out(Op::Agreement { predictions, activities }, vec![n, j], out, rg))
    }

    /// Reinterpret the value with a new shape of the same element count.
    /// Shares the underlying buffer.
    pub fn reshape(&mut self, input: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let t = self.value(input);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                t.shape(),
                shape
            )));
        }
        let mut v = Tensor::from_shared(shape, t.share_data());
        v.requires_grad = t.requires_grad;
        Ok(self.push(Op::Reshape { input }, v))
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into the
    /// `grad` buffer of every value that requires them; calling twice
    /// without `zero_grads` doubles the leaf gradients.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].value.requires_grad {
                scratch[id] = None;
                continue;
            }
            let Some(gout) = scratch[id].take() else {
                continue;
            };
            self.backprop(id, &gout, &mut scratch);
            self.nodes[id].value.grad = match self.nodes[id].value.grad.take() {
                Some(mut g) => {
                    add_into(&mut g, &gout);
                    Some(g)
                }
                None => Some(gout),
            };
        }
        Ok(())
    }

    fn accum(&self, scratch: &mut [Option<Vec<f64>>], id: ValueId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].value.requires_grad {
            return;
        }
        let slot = &mut scratch[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].value.len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop(&self, id: usize, gout: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        match self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernels, stride } => {
                self.backprop_conv2d(input, kernels, stride, gout, scratch)
            }
            Op::BiasChannels { input, bias } => {
                self.accum(scratch, input, |g| add_into(g, gout));
                let c = self.value(bias).len();
                self.accum(scratch, bias, |g| {
                    for row in gout.chunks_exact(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::Dense { input, weights, bias } => {
                let (n, m) = {
                    let ws = self.value(weights).shape();
                    (ws[0], ws[1])
                };
                self.accum(scratch, input, |g| {
                    matmul::matmul_a_bt(g, gout, self.value(weights).data(), 1, m, n);
                });
                self.accum(scratch, weights, |g| {
                    matmul::matmul_at_b(g, self.value(input).data(), gout, n, 1, m);
                });
                self.accum(scratch, bias, |g| add_into(g, gout));
            }
            Op::Relu { input } => {
                let x = self.value(input).data();
                self.accum(scratch, input, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(gout).zip(x) {
                        if x > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Sigmoid { input } => {
                let y = self.nodes[id].value.data();
                self.accum(scratch, input, |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(gout).zip(y) {
                        *g += d * y * (1.0 - y);
                    }
                });
            }
            Op::Add { lhs, rhs } => {
                self.accum(scratch, lhs, |g| add_into(g, gout));
                self.accum(scratch, rhs, |g| add_into(g, gout));
            }
            Op::Sub { lhs, rhs } => {
                self.accum(scratch, lhs, |g| add_into(g, gout));
                self.accum(scratch, rhs, |g| {
                    for (g, &d) in g.iter_mut().zip(gout) {
                        *g -= d;
                    }
                });
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.value(lhs).data(), self.value(rhs).data());
                self.accum(scratch, lhs, |g| {
                    for ((g, &d), &b) in g.iter_mut().zip(gout).zip(b) {
                        *g += d * b;
                    }
                });
                self.accum(scratch, rhs, |g| {
                    for ((g, &d), &a) in g.iter_mut().zip(gout).zip(a) {
                        *g += d * a;
                    }
                });
            }
            Op::Affine { input, scale } => {
                self.accum(scratch, input, |g| {
                    for (g, &d) in g.iter_mut().zip(gout) {
                        *g += scale * d;
                    }
                });
            }
            Op::Sum { input } => {
                let d = gout[0];
                self.accum(scratch, input, |g| {
                    for g in g.iter_mut() {
                        *g += d;
                    }
                });
            }
            Op::Dot { lhs, rhs } => {
                let d = gout[0];
                let (a, b) = (self.value(lhs).data(), self.value(rhs).data());
                self.accum(scratch, lhs, |g| {
                    for (g, &b) in g.iter_mut().zip(b) {
                        *g += d * b;
                    }
                });
                self.accum(scratch, rhs, |g| {
                    for (g, &a) in g.iter_mut().zip(a) {
                        *g += d * a;
                    }
                });
            }
            Op::SquashRows { input } => {
                let x = self.value(input).data();
                let dd = *self.value(input).shape().last().unwrap();
                self.accum(scratch, input, |g| {
                    for ((xr, dr), gr) in x
                        .chunks_exact(dd)
                        .zip(gout.chunks_exact(dd))
                        .zip(g.chunks_exact_mut(dd))
                    {
                        let n2: f64 = xr.iter().map(|v| v * v).sum();
                        let m2 = n2 + SQUASH_EPS;
                        let m = m2.sqrt();
                        let gf = m / (1.0 + m2);
                        let gprime = (1.0 - m2) / ((1.0 + m2) * (1.0 + m2));
                        let dot: f64 = dr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        let coef = gprime / m * dot;
                        for ((g, &d), &xv) in gr.iter_mut().zip(dr).zip(xr) {
                            *g += gf * d + coef * xv;
                        }
                    }
                });
            }
            Op::RowNorms { input } => {
                let x = self.value(input).data();
                let dd = *self.value(input).shape().last().unwrap();
                self.accum(scratch, input, |g| {
                    for ((xr, gr), &d) in x.chunks_exact(dd).zip(g.chunks_exact_mut(dd)).zip(gout)
                    {
                        let norm: f64 = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            for (g, &xv) in gr.iter_mut().zip(xr) {
                                *g += d * xv / norm;
                            }
                        }
                    }
                });
            }
            Op::UnitRows { input } => {
                let x = self.value(input).data();
                let dd = *self.value(input).shape().last().unwrap();
                self.accum(scratch, input, |g| {
                    for ((xr, dr), gr) in x
                        .chunks_exact(dd)
                        .zip(gout.chunks_exact(dd))
                        .zip(g.chunks_exact_mut(dd))
                    {
                        let m = (xr.iter().map(|v| v * v).sum::<f64>() + UNIT_EPS).sqrt();
                        let dot: f64 = dr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        let m3 = m * m * m;
                        for ((g, &d), &xv) in gr.iter_mut().zip(dr).zip(xr) {
                            *g += d / m - xv * dot / m3;
                        }
                    }
                });
            }
            Op::Clamp01 { input } => {
                let x = self.value(input).data();
                self.accum(scratch, input, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(gout).zip(x) {
                        if x > 0.0 && x < 1.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::RowsDot { rows, vector } => {
                let d = *self.value(vector).shape().last().unwrap();
                let (r, v) = (self.value(rows).data(), self.value(vector).data());
                self.accum(scratch, rows, |g| {
                    for (gr, &dv) in g.chunks_exact_mut(d).zip(gout) {
                        for (g, &vv) in gr.iter_mut().zip(v) {
                            *g += dv * vv;
                        }
                    }
                });
                self.accum(scratch, vector, |g| {
                    for (rr, &dv) in r.chunks_exact(d).zip(gout) {
                        for (g, &rv) in g.iter_mut().zip(rr) {
                            *g += dv * rv;
                        }
                    }
                });
            }
            Op::CapsPredict { input, weights } => {
                let ush = self.value(input).shape();
                let wsh = self.value(weights).shape();
                let (n, din) = (ush[0], ush[1]);
                let (j, dout) = (wsh[1], wsh[2]);
                let u = self.value(input).data();
                let w = self.value(weights).data();
                self.accum(scratch, weights, |g| {
                    for i in 0..n {
                        let ui = &u[i * din..(i + 1) * din];
                        let di = &gout[i * j * dout..(i + 1) * j * dout];
                        let gi = &mut g[i * j * dout * din..(i + 1) * j * dout * din];
                        for (grow, &dv) in gi.chunks_exact_mut(din).zip(di) {
                            for (g, &uv) in grow.iter_mut().zip(ui) {
                                *g += dv * uv;
                            }
                        }
                    }
                });
                self.accum(scratch, input, |g| {
                    for i in 0..n {
                        let wi = &w[i * j * dout * din..(i + 1) * j * dout * din];
                        let di = &gout[i * j * dout..(i + 1) * j * dout];
                        let gi = &mut g[i * din..(i + 1) * din];
                        for (wrow, &dv) in wi.chunks_exact(din).zip(di) {
                            for (g, &wv) in gi.iter_mut().zip(wrow) {
                                *g += dv * wv;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows { input } => {
                let y = self.nodes[id].value.data();
                let j = *self.value(input).shape().last().unwrap();
                self.accum(scratch, input, |g| {
                    for ((yr, dr), gr) in y
                        .chunks_exact(j)
                        .zip(gout.chunks_exact(j))
                        .zip(g.chunks_exact_mut(j))
                    {
                        let dot: f64 = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for ((g, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += yv * (dv - dot);
                        }
                    }
                });
            }
            Op::CouplingSum { couplings, predictions } => {
                let psh = self.value(predictions).shape();
                let (n, j, d) = (psh[0], psh[1], psh[2]);
                let c = self.value(couplings).data();
                let p = self.value(predictions).data();
                self.accum(scratch, couplings, |g| {
                    for i in 0..n {
                        for jj in 0..j {
                            let src = &p[(i * j + jj) * d..(i * j + jj + 1) * d];
                            let ds = &gout[jj * d..(jj + 1) * d];
                            g[i * j + jj] +=
                                src.iter().zip(ds).map(|(&a, &b)| a * b).sum::<f64>();
                        }
                    }
                });
                self.accum(scratch, predictions, |g| {
                    for i in 0..n {
                        for jj in 0..j {
                            let cij = c[i * j + jj];
                            let ds = &gout[jj * d..(jj + 1) * d];
                            let gr = &mut g[(i * j + jj) * d..(i * j + jj + 1) * d];
                            for (g, &dv) in gr.iter_mut().zip(ds) {
                                *g += cij * dv;
                            }
                        }
                    }
                });
            }
            Op::Agreement { predictions, activities } => {
                let psh = self.value(predictions).shape();
                let (n, j, d) = (psh[0], psh[1], psh[2]);
                let p = self.value(predictions).data();
                let v = self.value(activities).data();
                self.accum(scratch, predictions, |g| {
                    for i in 0..n {
                        for jj in 0..j {
                            let dv = gout[i * j + jj];
                            let vj = &v[jj * d..(jj + 1) * d];
                            let gr = &mut g[(i * j + jj) * d..(i * j + jj + 1) * d];
                            for (g, &vv) in gr.iter_mut().zip(vj) {
                                *g += dv * vv;
                            }
                        }
                    }
                });
                self.accum(scratch, activities, |g| {
                    for i in 0..n {
                        for jj in 0..j {
                            let dv = gout[i * j + jj];
                            let pr = &p[(i * j + jj) * d..(i * j + jj + 1) * d];
                            let gr = &mut g[jj * d..(jj + 1) * d];
                            for (g, &pv) in gr.iter_mut().zip(pr) {
                                *g += dv * pv;
                            }
                        }
                    }
                });
            }
            Op::Reshape { input } => {
                self.accum(scratch, input, |g| add_into(g, gout));
            }
        }
    }

    fn backprop_conv2d(
        &self,
        input: ValueId,
        kernels: ValueId,
        stride: usize,
        gout: &[f64],
        scratch: &mut [Option<Vec<f64>>],
    ) {
        let ish = self.value(input).shape();
        let ksh = self.value(kernels).shape();
        let (h, w, cin) = (ish[0], ish[1], ish[2]);
        let (k, cout) = (ksh[0], ksh[3]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let p = oh * ow;
        let l = k * k * cin;

        if self.nodes[kernels.0].value.requires_grad {
            let patches = im2col(self.value(input).data(), h, w, cin, k, stride, oh, ow);
            self.accum(scratch, kernels, |g| {
                matmul::matmul_at_b(g, &patches, gout, l, p, cout);
            });
        }
        if self.nodes[input.0].value.requires_grad {
            let mut dpatches = vec![0.0; p * l];
            matmul::matmul_a_bt(&mut dpatches, gout, self.value(kernels).data(), p, cout, l);
            self.accum(scratch, input, |g| {
                col2im_add(g, &dpatches, h, w, cin, k, stride, oh, ow);
            });
        }
    }

}

/// Gather conv patches: output row (oy*ow+ox) holds the kxk window at
/// (oy*stride, ox*stride) as [ky][kx][ci], which is k contiguous runs of
/// k*cin values in the [H,W,C] input.
fn im2col(
    input: &[f64],
    _h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let run = k * cin;
    let mut patches = vec![0.0; oh * ow * k * run];
    let mut dst = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..k {
                let src = ((oy * stride + ky) * w + ox * stride) * cin;
                patches[dst..dst + run].copy_from_slice(&input[src..src + run]);
                dst += run;
            }
        }
    }
    patches
}

/// Scatter-add the patch gradient back onto the input feature map.
fn col2im_add(
    dinput: &mut [f64],
    dpatches: &[f64],
    _h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let run = k * cin;
    let mut src = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..k {
                let dst = ((oy * stride + ky) * w + ox * stride) * cin;
                add_into(&mut dinput[dst..dst + run], &dpatches[src..src + run]);
                src += run;
            }
        }
    }
}
