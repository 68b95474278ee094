//! Minimal reverse-mode differentiable tensor core.
//!
//! A [`Tape`] records forward operations; [`Tape::backward`] walks the record
//! in reverse, applying a hand-written gradient rule per op. The op set is
//! exactly what the 3D U-Net and its loss need: 3D convolution (kernel 1 or
//! 3, same padding), 2x2x2 max pooling, 2x2x2 stride-2 transposed
//! convolution, channel concatenation, relu, sigmoid, instance norm, a
//! batch-global soft-Dice loss, and an L1 penalty.
//!
//! Tensors are stored as f64 throughout; every reduction inside an output
//! element runs in a fixed order, so forward and backward results are
//! bitwise independent of the thread count.

pub mod gradcheck;
mod kernels;

use crate::error::{Error, Result};

/// Dense N-d array, innermost dimension fastest (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(context.to_string()));
        }
        Ok(())
    }

    /// Dims of a [b, c, x, y, z] tensor.
    fn dims5(&self) -> Result<[usize; 5]> {
        if self.shape.len() != 5 {
            return Err(Error::ShapeMismatch(format!(
                "expected 5-d tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok([
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
            self.shape[4],
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv3d {
        input: VarId,
        weight: VarId,
        bias: Option<VarId>,
        kernel: usize,
    },
    MaxPool3d {
        input: VarId,
        /// argmax linear index into the input, one per output element
        indices: Vec<u32>,
    },
    UpConv3d {
        input: VarId,
        weight: VarId,
    },
    Concat {
        a: VarId,
        b: VarId,
    },
    Relu {
        input: VarId,
    },
    Sigmoid {
        input: VarId,
    },
    InstanceNorm {
        input: VarId,
        gain: VarId,
        bias: VarId,
        /// per (batch, channel) slice: (mean, 1/sqrt(var + eps))
        stats: Vec<(f64, f64)>,
    },
    DiceLoss {
        pred: VarId,
        target: Tensor,
        smooth: f64,
        /// (sum pred*target, sum pred, sum target)
        sums: (f64, f64, f64),
    },
    L1Penalty {
        inputs: Vec<VarId>,
        weight: f64,
    },
    Sum {
        input: VarId,
    },
    HalfSquaredNorm {
        input: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
}

/// Record of a forward computation, walked in reverse by [`Tape::backward`].
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> VarId {
        let id = VarId(self.values.len());
        self.grads.push(vec![0.0; value.len()]);
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        id
    }

    fn requires_any(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.requires[id.0])
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: VarId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    // ── ops ────────────────────────────────────────────────────────────────

    /// 3D cross-correlation, stride 1, zero same-padding. Kernel must be
    /// cubic with odd size (1 or 3 in this network).
    pub fn conv3d(&mut self, input: VarId, weight: VarId, bias: Option<VarId>) -> Result<VarId> {
        let x = self.value(input);
        let w = self.value(weight);
        let [b, cin, nx, ny, nz] = x.dims5()?;
        if w.shape.len() != 5 || w.shape[2] != w.shape[3] || w.shape[2] != w.shape[4] {
            return Err(Error::ShapeMismatch(format!(
                "conv weight must be [cout, cin, k, k, k], got {:?}",
                w.shape
            )));
        }
        let (cout, k) = (w.shape[0], w.shape[2]);
        if w.shape[1] != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv channel mismatch: input has {cin}, weight expects {}",
                w.shape[1]
            )));
        }
        if k % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("conv kernel {k} must be odd")));
        }
        if let Some(bid) = bias {
            if self.value(bid).shape != vec![cout] {
                return Err(Error::ShapeMismatch("conv bias must be [cout]".into()));
            }
        }
        let out = kernels::conv3d_forward(
            x,
            w,
            bias.map(|bid| self.value(bid)),
            [b, cin, nx, ny, nz],
            cout,
            k,
        );
        out.assert_finite("conv3d")?;
        let req = self.requires_any(&[input, weight]) || bias.map_or(false, |b| self.requires[b.0]);
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                weight,
                bias,
                kernel: k,
            },
            req,
        ))
    }

    /// 2x2x2 max pooling, stride 2. Ties go to the lowest linear index.
    pub fn maxpool3d(&mut self, input: VarId) -> Result<VarId> {
        let x = self.value(input);
        let [b, c, nx, ny, nz] = x.dims5()?;
        if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "maxpool3d needs even spatial dims, got {nx}x{ny}x{nz}"
            )));
        }
        let (out, indices) = kernels::maxpool3d_forward(x, [b, c, nx, ny, nz]);
        out.assert_finite("maxpool3d")?;
        let req = self.requires[input.0];
        Ok(self.push(out, Op::MaxPool3d { input, indices }, req))
    }

    /// 2x2x2 transposed convolution, stride 2: doubles each spatial dim.
    pub fn upconv3d(&mut self, input: VarId, weight: VarId) -> Result<VarId> {
        let x = self.value(input);
        let w = self.value(weight);
        let [b, cin, nx, ny, nz] = x.dims5()?;
        if w.shape.len() != 5 || w.shape[0] != cin || w.shape[2..] != [2, 2, 2] {
            return Err(Error::ShapeMismatch(format!(
                "upconv weight must be [cin={cin}, cout, 2, 2, 2], got {:?}",
                w.shape
            )));
        }
        let cout = w.shape[1];
        let out = kernels::upconv3d_forward(x, w, [b, cin, nx, ny, nz], cout);
        out.assert_finite("upconv3d")?;
        let req = self.requires_any(&[input, weight]);
        Ok(self.push(out, Op::UpConv3d { input, weight }, req))
    }

    /// Concatenates along the channel axis: channels of `a` then `b`.
    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let tb = self.value(b);
        let [ba, ca, xa, ya, za] = ta.dims5()?;
        let [bb, cb, xb, yb, zb] = tb.dims5()?;
        if (ba, xa, ya, za) != (bb, xb, yb, zb) {
            return Err(Error::ShapeMismatch(format!(
                "concat spatial/batch mismatch: {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let out = kernels::concat_forward(ta, tb, [ba, ca, cb, xa * ya * za]);
        let req = self.requires_any(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, req))
    }

    pub fn relu(&mut self, input: VarId) -> Result<VarId> {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor {
            shape: x.shape.clone(),
            data,
        };
        out.assert_finite("relu")?;
        let req = self.requires[input.0];
        Ok(self.push(out, Op::Relu { input }, req))
    }

    pub fn sigmoid(&mut self, input: VarId) -> Result<VarId> {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let out = Tensor {
            shape: x.shape.clone(),
            data,
        };
        out.assert_finite("sigmoid")?;
        let req = self.requires[input.0];
        Ok(self.push(out, Op::Sigmoid { input }, req))
    }

    /// Normalizes each (batch, channel) slice to zero mean / unit variance
    /// with the given eps, then applies per-channel gain and bias.
    pub fn instance_norm(&mut self, input: VarId, gain: VarId, bias: VarId) -> Result<VarId> {
        let eps = 1e-5;
        let x = self.value(input);
        let [b, c, nx, ny, nz] = x.dims5()?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            if self.value(id).shape != vec![c] {
                return Err(Error::ShapeMismatch(format!(
                    "instance_norm {name} must be [{c}], got {:?}",
                    self.value(id).shape
                )));
            }
        }
        let (out, stats) = kernels::instance_norm_forward(
            x,
            self.value(gain),
            self.value(bias),
            [b, c, nx * ny * nz],
            eps,
        );
        out.assert_finite("instance_norm")?;
        let req = self.requires_any(&[input, gain, bias]);
        Ok(self.push(
            out,
            Op::InstanceNorm {
                input,
                gain,
                bias,
                stats,
            },
            req,
        ))
    }

    /// Batch-global soft-Dice loss:
    /// 1 - (2*sum(p*t) + smooth) / (sum(p) + sum(t) + smooth).
    pub fn dice_loss(&mut self, pred: VarId, target: &Tensor, smooth: f64) -> Result<VarId> {
        let p = self.value(pred);
        if p.shape != target.shape {
            return Err(Error::ShapeMismatch(format!(
                "dice_loss shapes differ: {:?} vs {:?}",
                p.shape, target.shape
            )));
        }
        for &t in &target.data {
            if t != 0.0 && t != 1.0 {
                return Err(Error::NonBinaryLabel(t as f32));
            }
        }
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut s3 = 0.0;
        for (&pv, &tv) in p.data.iter().zip(&target.data) {
            s1 += pv * tv;
            s2 += pv;
            s3 += tv;
        }
        let loss = 1.0 - (2.0 * s1 + smooth) / (s2 + s3 + smooth);
        let out = Tensor::scalar(loss);
        out.assert_finite("dice_loss")?;
        let req = self.requires[pred.0];
        Ok(self.push(
            out,
            Op::DiceLoss {
                pred,
                target: target.clone(),
                smooth,
                sums: (s1, s2, s3),
            },
            req,
        ))
    }

    /// weight * sum of |w| over the given tensors. Subgradient at 0 is 0.
    pub fn l1_penalty(&mut self, inputs: &[VarId], weight: f64) -> Result<VarId> {
        let total: f64 = inputs
            .iter()
            .map(|id| self.value(*id).data.iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        let out = Tensor::scalar(weight * total);
        out.assert_finite("l1_penalty")?;
        let req = self.requires_any(inputs);
        Ok(self.push(
            out,
            Op::L1Penalty {
                inputs: inputs.to_vec(),
                weight,
            },
            req,
        ))
    }

    pub fn sum(&mut self, input: VarId) -> Result<VarId> {
        let s: f64 = self.value(input).data.iter().sum();
        let req = self.requires[input.0];
        Ok(self.push(Tensor::scalar(s), Op::Sum { input }, req))
    }

    pub fn half_squared_norm(&mut self, input: VarId) -> Result<VarId> {
        let s: f64 = self.value(input).data.iter().map(|v| 0.5 * v * v).sum();
        let req = self.requires[input.0];
        Ok(self.push(Tensor::scalar(s), Op::HalfSquaredNorm { input }, req))
    }

    /// Elementwise addition of same-shape tensors (used for scalar losses).
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::ShapeMismatch("add shapes differ".into()));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let req = self.requires_any(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, req))
    }

    // ── backward ───────────────────────────────────────────────────────────

    /// Accumulates d(loss)/d(var) into every grad slot reachable from `loss`.
    /// Repeated calls without [`Tape::zero_grads`] accumulate.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        self.grads[loss.0][0] += 1.0;
        self.backward_from(loss)
    }

    /// Backward pass seeded with an arbitrary output cotangent, i.e. the
    /// gradient of sum(cotangent .* output). Used by Jacobian checks.
    pub fn backward_with_cotangent(&mut self, output: VarId, cotangent: &[f64]) -> Result<()> {
        if cotangent.len() != self.value(output).len() {
            return Err(Error::ShapeMismatch("cotangent length mismatch".into()));
        }
        for (g, c) in self.grads[output.0].iter_mut().zip(cotangent) {
            *g += c;
        }
        self.backward_from(output)
    }

    fn backward_from(&mut self, loss: VarId) -> Result<()> {
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            // detach this node's output grad so input grads can be written
            let mut gout = std::mem::take(&mut self.grads[i]);
            kernels::backward_step(self, i, &gout)?;
            // only leaf grads persist across backward calls
            if !matches!(self.ops[i], Op::Leaf) {
                gout.iter_mut().for_each(|v| *v = 0.0);
            }
            self.grads[i] = gout;
        }
        for (i, g) in self.grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of node {i}")));
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
