use super::conv::{conv_backward, conv_forward, ConvGeom};
use super::{shape_err, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub pad: usize,
    /// When set, output channels marked `false` are not computed and stay zero
    /// (bias included).
    pub out_active: Option<Vec<bool>>,
}

impl Conv2dAttrs {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            out_active: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics from a train-mode batch norm (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of values each statistic was computed over (N·H·W).
    pub count: usize,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
        in_idx: Vec<usize>,
        out_idx: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulScalar {
        a: Var,
        c: f64,
    },
    ChannelGate {
        x: Var,
        gates: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Flatten {
        x: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    retain: bool,
    op: Op,
    grad: Option<Tensor>,
}

/// Topologically ordered record of executed operations.
///
/// Nodes are appended in execution order, so the tape itself is a topological
/// order and `backward` replays it in reverse. Gradients are kept for
/// `requires_grad` leaves and for intermediates flagged with
/// [`Graph::retain_grad`]; all other adjoints are dropped once consumed.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Marks an intermediate tensor as a tap whose gradient survives `backward`.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            retain: false,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(value, requires_grad, op))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        attrs: &Conv2dAttrs,
    ) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c_in, h, wd) = xv
            .dims4()
            .ok_or_else(|| shape_err("conv2d", format!("input must be N×C×H×W, got {:?}", xv.shape())))?;
        let (c_out, wc_in, kh, kw) = wv.dims4().ok_or_else(|| {
            shape_err("conv2d", format!("weight must be C_out×C_in×k×k, got {:?}", wv.shape()))
        })?;
        if wc_in != c_in {
            return Err(shape_err(
                "conv2d",
                format!("input has {c_in} channels but weight expects {wc_in}"),
            ));
        }
        if kh != kw {
            return Err(shape_err("conv2d", format!("non-square kernel {kh}×{kw}")));
        }
        if attrs.stride == 0 {
            return Err(TensorError::Attr {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        if h + 2 * attrs.pad < kh || wd + 2 * attrs.pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh} larger than padded input {h}×{wd} (pad {})", attrs.pad),
            ));
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [c_out] {
                return Err(shape_err("conv2d", format!("bias shape {bs:?}, expected [{c_out}]")));
            }
        }
        let out_idx: Vec<usize> = match &attrs.out_active {
            Some(m) if m.len() != c_out => {
                return Err(shape_err(
                    "conv2d",
                    format!("out_active has {} entries for {c_out} channels", m.len()),
                ))
            }
            Some(m) => (0..c_out).filter(|&o| m[o]).collect(),
            None => (0..c_out).collect(),
        };
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            k: kh,
            stride: attrs.stride,
            pad: attrs.pad,
            h_out: (h + 2 * attrs.pad - kh) / attrs.stride + 1,
            w_out: (wd + 2 * attrs.pad - kw) / attrs.stride + 1,
        };
        let fwd = conv_forward(
            xv.data(),
            wv.data(),
            b.map(|b| self.value(b).data()),
            &geom,
            &out_idx,
        );
        let value = Tensor::new([n, c_out, geom.h_out, geom.w_out], fwd.y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        self.push_checked(
            "conv2d",
            value,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: fwd.cols,
                in_idx: fwd.in_idx,
                out_idx,
            },
        )
    }

    /// 2-D batch normalization. In train mode also returns the batch statistics so
    /// the caller can maintain running averages.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BnStats>), TensorError> {
        let xv = self.value(x);
        let (n, c, h, w) = xv
            .dims4()
            .ok_or_else(|| shape_err("batchnorm2d", format!("input must be rank 4, got {:?}", xv.shape())))?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(p).shape();
            if s != [c] {
                return Err(shape_err("batchnorm2d", format!("{name} shape {s:?}, expected [{c}]")));
            }
        }
        let plane = h * w;
        let count = n * plane;
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xv.data()[(i * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut sq = 0.0;
                    for i in 0..n {
                        sq += xv.data()[(i * c + ch) * plane..][..plane]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / count as f64;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(
                        "batchnorm2d",
                        format!("running stats have {}/{} entries for {c} channels", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.numel()];
        let mut y = vec![0.0; xv.numel()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    let xh = (xv.data()[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    y[j] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new([n, c, h, w], y)?;
        let rg = self.rg(&[x, gamma, beta]);
        let stats = train.then(|| BnStats {
            mean,
            var,
            count,
        });
        let v = self.push_checked(
            "batchnorm2d",
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push_checked("relu", value, rg, Op::Relu { x })
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (n, c, h, w) = pool_dims("maxpool2d", xv, k, stride)?;
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            let v = xv.data()[idx];
                            if v > best {
                                best = v;
                                best_i = idx;
                            }
                        }
                    }
                    let o = (nc * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        self.push_checked("maxpool2d", value, rg, Op::MaxPool { x, argmax })
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (n, c, h, w) = pool_dims("avgpool2d", xv, k, stride)?;
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ky in 0..k {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        s += xv.data()[row..row + k].iter().sum::<f64>();
                    }
                    out[(nc * ho + oy) * wo + ox] = s * inv;
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        self.push_checked("avgpool2d", value, rg, Op::AvgPool { x, k, stride })
    }

    /// `x · wᵀ + b` for `x` of shape N×in and `w` of shape out×in.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, d_in) = match xv.shape() {
            [n, d] => (*n, *d),
            s => return Err(shape_err("linear", format!("input must be N×in, got {s:?}"))),
        };
        let d_out = match wv.shape() {
            [o, i] if *i == d_in => *o,
            s => {
                return Err(shape_err(
                    "linear",
                    format!("weight {s:?} incompatible with input features {d_in}"),
                ))
            }
        };
        let mut y = vec![0.0; n * d_out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [d_out] {
                return Err(shape_err("linear", format!("bias shape {:?}, expected [{d_out}]", bv.shape())));
            }
            for row in y.chunks_mut(d_out) {
                row.copy_from_slice(bv.data());
            }
        }
        super::conv::gemm(
            n, d_in, d_out, xv.data(), d_in, 1, wv.data(), 1, d_in, 1.0, &mut y, d_out, 1,
        );
        let value = Tensor::new([n, d_out], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        self.push_checked("linear", value, rg, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push_checked("add", value, rg, Op::Add { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push_checked("mul", value, rg, Op::Mul { a, b })
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push_checked("mul_scalar", value, rg, Op::MulScalar { a, c })
    }

    /// Multiplies every feature map of channel `c` by `gates[c]`.
    pub fn channel_mask_mul(&mut self, x: Var, gates: &[f64]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4().ok_or_else(|| {
            shape_err("channel_mask_mul", format!("input must be rank 4, got {:?}", xv.shape()))
        })?;
        if gates.len() != c {
            return Err(shape_err(
                "channel_mask_mul",
                format!("{} gates for {c} channels", gates.len()),
            ));
        }
        let plane = h * w;
        let mut data = xv.data().to_vec();
        for i in 0..n {
            for (ch, &gate) in gates.iter().enumerate() {
                for v in &mut data[(i * c + ch) * plane..][..plane] {
                    *v *= gate;
                }
            }
        }
        let value = Tensor::new([n, c, h, w], data)?;
        let rg = self.rg(&[x]);
        self.push_checked(
            "channel_mask_mul",
            value,
            rg,
            Op::ChannelGate {
                x,
                gates: gates.to_vec(),
            },
        )
    }

    /// Mean softmax cross-entropy over the batch; returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (n, k) = match lv.shape() {
            [n, k] => (*n, *k),
            s => return Err(shape_err("softmax_cross_entropy", format!("logits must be N×K, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv.data()[i * k..][..k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let logz = mx + z.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - logz).exp();
            }
            loss += logz - row[labels[i]];
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.rg(&[logits]);
        self.push_checked(
            "softmax_cross_entropy",
            value,
            rg,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// N×C×H×W → N×(C·H·W).
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(shape_err("flatten", format!("need rank ≥ 2, got {:?}", xv.shape())));
        }
        let n = xv.shape()[0];
        let rest = xv.numel() / n.max(1);
        let value = xv.clone().reshape([n, rest])?;
        let rg = self.rg(&[x]);
        self.push_checked("flatten", value, rg, Op::Flatten { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push_checked("sum", value, rg, Op::Sum { x })
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            if node.retain || matches!(node.op, Op::Leaf) {
                node.grad = Some(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
                in_idx,
                out_idx,
            } => {
                let wv = self.value(*w);
                let need_dx = self.nodes[x.0].requires_grad;
                let grads = conv_backward(gd, wv.data(), geom, cols, in_idx, out_idx, need_dx);
                if let Some(dx) = grads.dx {
                    acc(*x, Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap());
                }
                acc(*w, Tensor::new(wv.shape().to_vec(), grads.dw).unwrap());
                if let Some(b) = b {
                    acc(*b, Tensor::from_vec(grads.db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = node.value.dims4().unwrap();
                let plane = h * w;
                let m = (n * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for j in off..off + plane {
                            dbeta[ch] += gd[j];
                            dgamma[ch] += gd[j] * xhat[j];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; gd.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            for j in off..off + plane {
                                dx[j] = if *train {
                                    scale / m * (m * gd[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    scale * gd[j]
                                };
                            }
                        }
                    }
                    acc(*x, Tensor::new([n, c, h, w], dx).unwrap());
                }
                acc(*gamma, Tensor::from_vec(dgamma));
                acc(*beta, Tensor::from_vec(dbeta));
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gd[o];
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::AvgPool { x, k, stride } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4().unwrap();
                let (_, _, ho, wo) = node.value.dims4().unwrap();
                let inv = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; xv.numel()];
                for nc in 0..n * c {
                    let base = nc * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let d = gd[(nc * ho + oy) * wo + ox] * inv;
                            for ky in 0..*k {
                                let row = base + (oy * stride + ky) * w + ox * stride;
                                for v in &mut dx[row..row + k] {
                                    *v += d;
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, d_in) = (xv.shape()[0], xv.shape()[1]);
                let d_out = wv.shape()[0];
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; n * d_in];
                    super::conv::gemm(
                        n, d_out, d_in, gd, d_out, 1, wv.data(), d_in, 1, 0.0, &mut dx, d_in, 1,
                    );
                    acc(*x, Tensor::new([n, d_in], dx).unwrap());
                }
                let mut dw = vec![0.0; d_out * d_in];
                super::conv::gemm(
                    d_out, n, d_in, gd, 1, d_out, xv.data(), d_in, 1, 0.0, &mut dw, d_in, 1,
                );
                acc(*w, Tensor::new([d_out, d_in], dw).unwrap());
                if let Some(b) = b {
                    let mut db = vec![0.0; d_out];
                    for row in gd.chunks(d_out) {
                        for (a, r) in db.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                    acc(*b, Tensor::from_vec(db));
                }
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(bv.data()).map(|(d, y)| d * y).collect();
                let db = gd.iter().zip(av.data()).map(|(d, x)| d * x).collect();
                acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::MulScalar { a, c } => {
                let da = gd.iter().map(|d| d * c).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), da).unwrap());
            }
            Op::ChannelGate { x, gates } => {
                let (n, c, h, w) = g.dims4().unwrap();
                let plane = h * w;
                let mut dx = gd.to_vec();
                for i in 0..n {
                    for (ch, &gate) in gates.iter().enumerate() {
                        for v in &mut dx[(i * c + ch) * plane..][..plane] {
                            *v *= gate;
                        }
                    }
                }
                acc(*x, Tensor::new([n, c, h, w], dx).unwrap());
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let (n, k) = (lv.shape()[0], lv.shape()[1]);
                let scale = gd[0] / n as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * k + y] -= scale;
                }
                acc(*logits, Tensor::new([n, k], dl).unwrap());
            }
            Op::Flatten { x } => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, Tensor::new(shape, gd.to_vec()).unwrap());
            }
            Op::Sum { x } => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, Tensor::full(shape, gd[0]));
            }
        }
    }
}

fn pool_dims(
    op: &'static str,
    xv: &Tensor,
    k: usize,
    stride: usize,
) -> Result<(usize, usize, usize, usize), TensorError> {
    let dims = xv
        .dims4()
        .ok_or_else(|| shape_err(op, format!("input must be rank 4, got {:?}", xv.shape())))?;
    if k == 0 || stride == 0 {
        return Err(TensorError::Attr {
            op,
            detail: format!("kernel {k} and stride {stride} must be positive"),
        });
    }
    if dims.2 < k || dims.3 < k {
        return Err(shape_err(op, format!("kernel {k} larger than input {}×{}", dims.2, dims.3)));
    }
    Ok(dims)
}
