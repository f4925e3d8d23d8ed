use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::descriptor::{ArchDescriptor, Block, DescriptorError, FeatureShape};
use crate::channel::{ChannelMask, ChannelRegistry};
use crate::tensor::{BnMode, BnStats, Conv2dAttrs, Graph, Tensor, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("gates cover layer widths {got:?}, model has {expected:?}")]
    GateMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("input batch shape {got:?} does not match model input {expected:?}")]
    InputShape {
        expected: [usize; 3],
        got: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Conv → BN → ReLU → gate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvUnit {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Identifies one trainable parameter tensor of a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    ConvWeight(usize),
    ConvBias(usize),
    BnGamma(usize),
    BnBeta(usize),
    HeadWeight,
    HeadBias,
}

impl ParamRole {
    pub fn name(&self) -> String {
        match self {
            ParamRole::ConvWeight(l) => format!("conv{l}.weight"),
            ParamRole::ConvBias(l) => format!("conv{l}.bias"),
            ParamRole::BnGamma(l) => format!("conv{l}.bn.gamma"),
            ParamRole::BnBeta(l) => format!("conv{l}.bn.beta"),
            ParamRole::HeadWeight => "head.weight".into(),
            ParamRole::HeadBias => "head.bias".into(),
        }
    }
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: Var,
    /// Post-gate output of every conv unit, flagged to keep its gradient.
    pub taps: Vec<Var>,
    pub params: Vec<(ParamRole, Var)>,
    /// Train-mode batch statistics per conv unit.
    pub bn_stats: Vec<Option<BnStats>>,
}

impl ForwardPass {
    pub fn param_grad(&self, role: ParamRole) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(r, _)| *r == role)
            .and_then(|(_, v)| self.graph.grad(*v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    desc: ArchDescriptor,
    shapes: Vec<FeatureShape>,
    convs: Vec<ConvUnit>,
    head_weight: Tensor,
    head_bias: Tensor,
    registry: ChannelRegistry,
}

impl Model {
    /// He-normal conv and linear weights (std √(2/fan_in)), zero biases, BN γ=1 and
    /// β=0, deterministic in `seed`.
    pub fn build(desc: &ArchDescriptor, seed: u64) -> Result<Self, ModelError> {
        let shapes = desc.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = desc.input_shape[0];
        let mut convs = Vec::new();
        let mut head = None;
        for (i, block) in desc.blocks.iter().enumerate() {
            match *block {
                Block::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    bias,
                } => {
                    let fan_in = channels * kernel * kernel;
                    let std = (2.0 / fan_in as f64).sqrt();
                    convs.push(ConvUnit {
                        weight: Tensor::randn([out_channels, channels, kernel, kernel], std, &mut rng),
                        bias: bias.then(|| Tensor::zeros([out_channels])),
                        gamma: Tensor::full([out_channels], 1.0),
                        beta: Tensor::zeros([out_channels]),
                        running_mean: vec![0.0; out_channels],
                        running_var: vec![1.0; out_channels],
                        stride,
                        pad,
                    });
                    channels = out_channels;
                }
                Block::Linear { out_features } => {
                    let n_in = shapes[i - 1].numel();
                    let std = (2.0 / n_in as f64).sqrt();
                    head = Some((
                        Tensor::randn([out_features, n_in], std, &mut rng),
                        Tensor::zeros([out_features]),
                    ));
                }
                _ => {}
            }
        }
        let (head_weight, head_bias) = head.expect("validated descriptor has a head");
        let registry = ChannelRegistry::from_widths(&desc.conv_widths());
        Ok(Self {
            desc: desc.clone(),
            shapes,
            convs,
            head_weight,
            head_bias,
            registry,
        })
    }

    /// Assembles a model from explicit parameters (used by extraction and
    /// checkpoint loading). Shapes are checked against the descriptor.
    pub fn from_parts(
        desc: ArchDescriptor,
        convs: Vec<ConvUnit>,
        head_weight: Tensor,
        head_bias: Tensor,
    ) -> Result<Self, ModelError> {
        let reference = Self::build(&desc, 0)?;
        let check = |name: &str, a: &[usize], b: &[usize]| {
            if a != b {
                Err(ModelError::Tensor(TensorError::Shape {
                    op: "model",
                    detail: format!("{name}: got {a:?}, descriptor needs {b:?}"),
                }))
            } else {
                Ok(())
            }
        };
        if convs.len() != reference.convs.len() {
            return Err(ModelError::GateMismatch {
                expected: reference.registry.widths().to_vec(),
                got: convs.iter().map(|c| c.out_channels()).collect(),
            });
        }
        for (l, (c, r)) in convs.iter().zip(&reference.convs).enumerate() {
            check(&format!("conv{l}.weight"), c.weight.shape(), r.weight.shape())?;
            check(&format!("conv{l}.gamma"), c.gamma.shape(), r.gamma.shape())?;
            check(&format!("conv{l}.beta"), c.beta.shape(), r.beta.shape())?;
            if c.bias.is_some() != r.bias.is_some() {
                return Err(ModelError::Tensor(TensorError::Shape {
                    op: "model",
                    detail: format!("conv{l}: bias presence differs from descriptor"),
                }));
            }
        }
        check("head.weight", head_weight.shape(), reference.head_weight.shape())?;
        check("head.bias", head_bias.shape(), reference.head_bias.shape())?;
        Ok(Self {
            convs,
            head_weight,
            head_bias,
            ..reference
        })
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.desc
    }

    pub fn registry(&self) -> &ChannelRegistry {
        &self.registry
    }

    pub fn conv_units(&self) -> &[ConvUnit] {
        &self.convs
    }

    pub fn conv_units_mut(&mut self) -> &mut [ConvUnit] {
        &mut self.convs
    }

    pub fn head(&self) -> (&Tensor, &Tensor) {
        (&self.head_weight, &self.head_bias)
    }

    /// Shape entering the flatten block (the last conv's channels × spatial).
    pub fn pre_flatten_shape(&self) -> (usize, usize, usize) {
        let idx = self
            .desc
            .blocks
            .iter()
            .position(|b| matches!(b, Block::Flatten))
            .unwrap();
        match self.shapes[idx - 1] {
            FeatureShape::Spatial { c, h, w } => (c, h, w),
            FeatureShape::Flat(_) => unreachable!("validated"),
        }
    }

    pub fn param_roles(&self) -> Vec<ParamRole> {
        let mut roles = Vec::new();
        for (l, c) in self.convs.iter().enumerate() {
            roles.push(ParamRole::ConvWeight(l));
            if c.bias.is_some() {
                roles.push(ParamRole::ConvBias(l));
            }
            roles.push(ParamRole::BnGamma(l));
            roles.push(ParamRole::BnBeta(l));
        }
        roles.push(ParamRole::HeadWeight);
        roles.push(ParamRole::HeadBias);
        roles
    }

    pub fn param(&self, role: ParamRole) -> &Tensor {
        match role {
            ParamRole::ConvWeight(l) => &self.convs[l].weight,
            ParamRole::ConvBias(l) => self.convs[l].bias.as_ref().expect("conv has no bias"),
            ParamRole::BnGamma(l) => &self.convs[l].gamma,
            ParamRole::BnBeta(l) => &self.convs[l].beta,
            ParamRole::HeadWeight => &self.head_weight,
            ParamRole::HeadBias => &self.head_bias,
        }
    }

    pub fn param_mut(&mut self, role: ParamRole) -> &mut Tensor {
        match role {
            ParamRole::ConvWeight(l) => &mut self.convs[l].weight,
            ParamRole::ConvBias(l) => self.convs[l].bias.as_mut().expect("conv has no bias"),
            ParamRole::BnGamma(l) => &mut self.convs[l].gamma,
            ParamRole::BnBeta(l) => &mut self.convs[l].beta,
            ParamRole::HeadWeight => &mut self.head_weight,
            ParamRole::HeadBias => &mut self.head_bias,
        }
    }

    /// Elements of `role` that belong to the thin network under `mask`; `None`
    /// means every element does. Weights touching an inactive channel, on either
    /// side, are outside the thin network.
    pub fn thin_elements(&self, role: ParamRole, mask: &ChannelMask) -> Option<Vec<bool>> {
        if mask.is_all_active() {
            return None;
        }
        match role {
            ParamRole::ConvWeight(l) => {
                let c = &self.convs[l];
                let (c_out, c_in) = (c.out_channels(), c.in_channels());
                let kk = c.weight.numel() / (c_out * c_in);
                let outs = mask.layer(l);
                let ins = (l > 0).then(|| mask.layer(l - 1));
                let mut keep = Vec::with_capacity(c.weight.numel());
                for o in 0..c_out {
                    for i in 0..c_in {
                        let on = outs[o] && ins.is_none_or(|m| m[i]);
                        keep.extend(std::iter::repeat_n(on, kk));
                    }
                }
                Some(keep)
            }
            ParamRole::ConvBias(l) | ParamRole::BnGamma(l) | ParamRole::BnBeta(l) => {
                Some(mask.layer(l).to_vec())
            }
            ParamRole::HeadWeight => {
                let last = self.convs.len() - 1;
                let (c, h, w) = self.pre_flatten_shape();
                let plane = h * w;
                let active = mask.layer(last);
                let n_out = self.head_weight.shape()[0];
                let mut keep = Vec::with_capacity(self.head_weight.numel());
                for _ in 0..n_out {
                    for ch in 0..c {
                        keep.extend(std::iter::repeat_n(active[ch], plane));
                    }
                }
                Some(keep)
            }
            ParamRole::HeadBias => None,
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<(), ModelError> {
        match input.dims4() {
            Some((_, c, h, w)) if [c, h, w] == self.desc.input_shape => Ok(()),
            _ => Err(ModelError::InputShape {
                expected: self.desc.input_shape,
                got: input.shape().to_vec(),
            }),
        }
    }

    /// Records a forward pass with per-channel gate values (one vector per conv
    /// layer). Gates of exactly zero mark channels that are not executed at all.
    /// Running statistics are not touched; see [`Model::apply_bn_stats`].
    pub fn forward_pass(
        &self,
        input: &Tensor,
        gates: &[Vec<f64>],
        mode: Mode,
        track_grad: bool,
    ) -> Result<ForwardPass, ModelError> {
        self.check_input(input)?;
        let widths: Vec<usize> = gates.iter().map(Vec::len).collect();
        if widths != self.registry.widths() {
            return Err(ModelError::GateMismatch {
                expected: self.registry.widths().to_vec(),
                got: widths,
            });
        }
        let mut g = Graph::new();
        let mut params = Vec::new();
        let mut taps = Vec::new();
        let mut bn_stats = Vec::new();
        let mut x = g.constant(input.clone());
        let mut conv_idx = 0;
        for block in &self.desc.blocks {
            x = match block {
                Block::Conv { .. } => {
                    let l = conv_idx;
                    conv_idx += 1;
                    let unit = &self.convs[l];
                    let w = g.leaf(unit.weight.clone(), track_grad);
                    params.push((ParamRole::ConvWeight(l), w));
                    let b = unit.bias.as_ref().map(|b| {
                        let v = g.leaf(b.clone(), track_grad);
                        params.push((ParamRole::ConvBias(l), v));
                        v
                    });
                    let gates_l = &gates[l];
                    let out_active = gates_l
                        .iter()
                        .any(|&v| v == 0.0)
                        .then(|| gates_l.iter().map(|&v| v != 0.0).collect());
                    let attrs = Conv2dAttrs {
                        stride: unit.stride,
                        pad: unit.pad,
                        out_active,
                    };
                    let y = g.conv2d(x, w, b, &attrs)?;
                    let gamma = g.leaf(unit.gamma.clone(), track_grad);
                    let beta = g.leaf(unit.beta.clone(), track_grad);
                    params.push((ParamRole::BnGamma(l), gamma));
                    params.push((ParamRole::BnBeta(l), beta));
                    let bn_mode = match mode {
                        Mode::Train => BnMode::Train,
                        Mode::Eval => BnMode::Eval {
                            mean: &unit.running_mean,
                            var: &unit.running_var,
                        },
                    };
                    let (y, stats) = g.batchnorm2d(y, gamma, beta, bn_mode, BN_EPS)?;
                    bn_stats.push(stats);
                    let y = g.relu(y)?;
                    let h = g.channel_mask_mul(y, gates_l)?;
                    g.retain_grad(h);
                    taps.push(h);
                    h
                }
                Block::MaxPool { kernel, stride } => g.maxpool2d(x, *kernel, *stride)?,
                Block::AvgPool { kernel, stride } => g.avgpool2d(x, *kernel, *stride)?,
                Block::Flatten => g.flatten(x)?,
                Block::Linear { .. } => {
                    let w = g.leaf(self.head_weight.clone(), track_grad);
                    let b = g.leaf(self.head_bias.clone(), track_grad);
                    params.push((ParamRole::HeadWeight, w));
                    params.push((ParamRole::HeadBias, b));
                    g.linear(x, w, Some(b))?
                }
            };
        }
        Ok(ForwardPass {
            graph: g,
            logits: x,
            taps,
            params,
            bn_stats,
        })
    }

    /// Folds train-mode batch statistics into the running averages, for active
    /// channels only.
    pub fn apply_bn_stats(&mut self, stats: &[Option<BnStats>], mask: &ChannelMask) {
        for (l, (unit, s)) in self.convs.iter_mut().zip(stats).enumerate() {
            let Some(s) = s else { continue };
            let active = mask.layer(l);
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for c in 0..unit.out_channels() {
                if !active[c] {
                    continue;
                }
                unit.running_mean[c] = (1.0 - BN_MOMENTUM) * unit.running_mean[c] + BN_MOMENTUM * s.mean[c];
                unit.running_var[c] =
                    (1.0 - BN_MOMENTUM) * unit.running_var[c] + BN_MOMENTUM * s.var[c] * unbias;
            }
        }
    }

    /// Gated forward without gradient tracking. In train mode the running BN
    /// statistics of active channels are updated.
    pub fn forward(&mut self, input: &Tensor, mask: &ChannelMask, mode: Mode) -> Result<Tensor, ModelError> {
        let pass = self.forward_pass(input, &mask.gates(), mode, false)?;
        if mode == Mode::Train {
            self.apply_bn_stats(&pass.bn_stats, mask);
        }
        Ok(pass.graph.value(pass.logits).clone())
    }

    /// Eval-mode logits; never mutates the model.
    pub fn predict(&self, input: &Tensor, mask: &ChannelMask) -> Result<Tensor, ModelError> {
        let pass = self.forward_pass(input, &mask.gates(), Mode::Eval, false)?;
        Ok(pass.graph.value(pass.logits).clone())
    }

    pub fn all_active(&self) -> ChannelMask {
        ChannelMask::all_active(&self.registry)
    }
}
