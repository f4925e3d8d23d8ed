//! Compact-model extraction and parameter / FLOP accounting.

use crate::channel::{ChannelMask, MaskError};
use crate::nn::{ArchDescriptor, Block, ConvUnit, FeatureShape, Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SurgeonError {
    #[error("mask widths {mask:?} do not match model widths {model:?}")]
    MaskShape { mask: Vec<usize>, model: Vec<usize> },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Index bookkeeping for slicing a model down to its active channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactPlan {
    /// Surviving output channels of each conv layer.
    pub kept_out: Vec<Vec<usize>>,
    /// Surviving input channels of each conv layer's weight.
    pub kept_in: Vec<Vec<usize>>,
    /// Surviving columns of the classification layer, in order.
    pub head_columns: Vec<usize>,
}

impl CompactPlan {
    pub fn new(model: &Model, mask: &ChannelMask) -> Result<Self, SurgeonError> {
        let widths = model.registry().widths();
        if mask.widths() != widths {
            return Err(SurgeonError::MaskShape {
                mask: mask.widths().to_vec(),
                model: widths.to_vec(),
            });
        }
        mask.check_floor(1)?;
        let kept_out: Vec<Vec<usize>> = (0..widths.len())
            .map(|l| {
                mask.layer(l)
                    .iter()
                    .enumerate()
                    .filter_map(|(k, &on)| on.then_some(k))
                    .collect()
            })
            .collect();
        let mut kept_in = Vec::with_capacity(widths.len());
        kept_in.push((0..model.conv_units()[0].in_channels()).collect());
        kept_in.extend(kept_out[..widths.len() - 1].iter().cloned());
        let (_, h, w) = model.pre_flatten_shape();
        let plane = h * w;
        let head_columns = kept_out
            .last()
            .unwrap()
            .iter()
            .flat_map(|&c| c * plane..(c + 1) * plane)
            .collect();
        Ok(Self {
            kept_out,
            kept_in,
            head_columns,
        })
    }

    pub fn widths(&self) -> Vec<usize> {
        self.kept_out.iter().map(Vec::len).collect()
    }
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

fn slice_conv(unit: &ConvUnit, outs: &[usize], ins: &[usize]) -> ConvUnit {
    let s = unit.weight.shape();
    let (c_in, kk) = (s[1], s[2] * s[3]);
    let mut w = Vec::with_capacity(outs.len() * ins.len() * kk);
    for &o in outs {
        for &i in ins {
            let off = (o * c_in + i) * kk;
            w.extend_from_slice(&unit.weight.data()[off..off + kk]);
        }
    }
    ConvUnit {
        weight: Tensor::new(vec![outs.len(), ins.len(), s[2], s[3]], w).expect("sliced weight"),
        bias: unit.bias.as_ref().map(|b| Tensor::from_vec(pick(b.data(), outs))),
        gamma: Tensor::from_vec(pick(unit.gamma.data(), outs)),
        beta: Tensor::from_vec(pick(unit.beta.data(), outs)),
        running_mean: pick(&unit.running_mean, outs),
        running_var: pick(&unit.running_var, outs),
        stride: unit.stride,
        pad: unit.pad,
    }
}

/// A new, smaller model holding only the active channels of `mask`. BN running
/// statistics are copied.
pub fn extract_compact(model: &Model, mask: &ChannelMask) -> Result<(Model, CompactPlan), SurgeonError> {
    let plan = CompactPlan::new(model, mask)?;
    let desc = model.descriptor().with_conv_widths(&plan.widths());
    let convs = model
        .conv_units()
        .iter()
        .enumerate()
        .map(|(l, u)| slice_conv(u, &plan.kept_out[l], &plan.kept_in[l]))
        .collect();
    let (hw, hb) = model.head();
    let n_in = hw.shape()[1];
    let mut w = Vec::with_capacity(hw.shape()[0] * plan.head_columns.len());
    for row in hw.data().chunks_exact(n_in) {
        w.extend(plan.head_columns.iter().map(|&j| row[j]));
    }
    let hw = Tensor::new(vec![hw.shape()[0], plan.head_columns.len()], w).expect("sliced head");
    let compact = Model::from_parts(desc, convs, hw, hb.clone())?;
    Ok((compact, plan))
}

/// What counts toward FLOPs besides conv and linear multiply-accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlopConvention {
    /// Conv and linear MACs only.
    #[default]
    MacsOnly,
    /// Also one op per BN, ReLU and pooled output element (pools count k² per
    /// output element).
    WithElementwise,
}

impl std::str::FromStr for FlopConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "macs" => Ok(Self::MacsOnly),
            "macs+elementwise" => Ok(Self::WithElementwise),
            other => Err(format!("unknown FLOP convention {other:?} (macs|macs+elementwise)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    /// `layer,type,params,macs` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,type,params,macs\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{},{}\n", l.name, l.kind, l.params, l.macs));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<width$}  {:<8}  {:>12}  {:>14}\n", "layer", "type", "params", "macs");
        for l in &self.layers {
            s.push_str(&format!("{:<width$}  {:<8}  {:>12}  {:>14}\n", l.name, l.kind, l.params, l.macs));
        }
        s.push_str(&format!("{:<width$}  {:<8}  {:>12}  {:>14}\n", "total", "", self.params(), self.macs()));
        s
    }
}

/// Per-layer parameter and FLOP counts of a valid descriptor. BN running
/// statistics are not parameters.
pub fn cost_report(desc: &ArchDescriptor, convention: FlopConvention) -> Result<CostReport, ModelError> {
    let shapes = desc.validate()?;
    let elementwise = convention == FlopConvention::WithElementwise;
    let mut layers = Vec::new();
    let mut conv_idx = 0;
    let mut prev = FeatureShape::Spatial {
        c: desc.input_shape[0],
        h: desc.input_shape[1],
        w: desc.input_shape[2],
    };
    for (i, (block, out)) in desc.blocks.iter().zip(&shapes).enumerate() {
        let out_elems = out.numel() as u64;
        match block {
            Block::Conv {
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let c_in = match prev {
                    FeatureShape::Spatial { c, .. } => c as u64,
                    FeatureShape::Flat(_) => unreachable!("validated"),
                };
                let (k2, c_out) = ((kernel * kernel) as u64, *out_channels as u64);
                let l = conv_idx;
                conv_idx += 1;
                layers.push(LayerCost {
                    name: format!("conv{l}"),
                    kind: "conv",
                    params: k2 * c_in * c_out + if *bias { c_out } else { 0 },
                    macs: k2 * c_in * out_elems,
                });
                layers.push(LayerCost {
                    name: format!("conv{l}.bn"),
                    kind: "bn",
                    params: 2 * c_out,
                    macs: if elementwise { out_elems } else { 0 },
                });
                layers.push(LayerCost {
                    name: format!("conv{l}.relu"),
                    kind: "relu",
                    params: 0,
                    macs: if elementwise { out_elems } else { 0 },
                });
            }
            Block::MaxPool { kernel, .. } | Block::AvgPool { kernel, .. } => layers.push(LayerCost {
                name: format!("pool{i}"),
                kind: block.kind(),
                params: 0,
                macs: if elementwise {
                    (kernel * kernel) as u64 * out_elems
                } else {
                    0
                },
            }),
            Block::Flatten => {}
            Block::Linear { out_features } => {
                let n_in = prev.numel() as u64;
                let n_out = *out_features as u64;
                layers.push(LayerCost {
                    name: "head".into(),
                    kind: "linear",
                    params: n_in * n_out + n_out,
                    macs: n_in * n_out,
                });
            }
        }
        prev = *out;
    }
    Ok(CostReport { layers })
}

pub fn count_params(desc: &ArchDescriptor) -> Result<u64, ModelError> {
    Ok(cost_report(desc, FlopConvention::MacsOnly)?.params())
}

pub fn count_flops(desc: &ArchDescriptor, convention: FlopConvention) -> Result<u64, ModelError> {
    Ok(cost_report(desc, convention)?.macs())
}

/// Cost of the compact network induced by `mask`.
pub fn masked_cost(
    desc: &ArchDescriptor,
    mask: &ChannelMask,
    convention: FlopConvention,
) -> Result<CostReport, ModelError> {
    cost_report(&desc.with_conv_widths(&mask.active_per_layer()), convention)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{random_mask, ChannelRegistry};
    use crate::nn::{desk_descriptor, tiny_descriptor, vgg19_descriptor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_conv(bias: bool) -> ArchDescriptor {
        ArchDescriptor {
            name: "one".into(),
            input_shape: [3, 32, 32],
            num_classes: 10,
            blocks: vec![
                Block::Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    bias,
                },
                Block::MaxPool { kernel: 2, stride: 2 },
                Block::AvgPool { kernel: 16, stride: 16 },
                Block::Flatten,
                Block::Linear { out_features: 10 },
            ],
        }
    }

    #[test]
    fn formula_examples() {
        let r = cost_report(&single_conv(true), FlopConvention::MacsOnly).unwrap();
        let conv = &r.layers[0];
        assert_eq!((conv.params, conv.macs), (448, 442_368));
        assert_eq!(r.layers[1].params, 32);
        let head = r.layers.last().unwrap();
        assert_eq!((head.params, head.macs), (16 * 10 + 10, 160));
        assert_eq!(r.params(), 448 + 32 + 170);
        assert_eq!(r.macs(), 442_368 + 160);
        let no_bias = cost_report(&single_conv(false), FlopConvention::MacsOnly).unwrap();
        assert_eq!(no_bias.layers[0].params, 432);
    }

    #[test]
    fn linear_ten_by_ten() {
        let mut d = single_conv(false);
        d.blocks[0] = Block::conv3(10);
        d.blocks[2] = Block::AvgPool { kernel: 16, stride: 16 };
        let r = cost_report(&d, FlopConvention::MacsOnly).unwrap();
        assert_eq!(r.layers.last().unwrap().params, 110);
    }

    #[test]
    fn non_mac_layers_are_free_by_default() {
        let r = cost_report(&single_conv(false), FlopConvention::MacsOnly).unwrap();
        for l in r.layers.iter().filter(|l| matches!(l.kind, "bn" | "relu" | "maxpool" | "avgpool")) {
            assert_eq!(l.macs, 0, "{}", l.name);
        }
        let e = cost_report(&single_conv(false), FlopConvention::WithElementwise).unwrap();
        // bn + relu on 16×32×32, maxpool 4 per output of 16×16×16, avgpool 256 per output of 16
        assert_eq!(e.macs() - r.macs(), 2 * 16 * 1024 + 4 * 16 * 256 + 256 * 16);
    }

    #[test]
    fn totals_match_breakdown() {
        let r = cost_report(&vgg19_descriptor([3, 32, 32], 10), FlopConvention::MacsOnly).unwrap();
        let csv = r.to_csv();
        let sum: u64 = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse::<u64>().unwrap()).sum();
        assert_eq!(sum, r.params());
    }

    #[test]
    fn vgg19_totals() {
        let d = vgg19_descriptor([3, 32, 32], 10);
        let widths = [64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512];
        let mut c_in = 3u64;
        let mut conv = 0u64;
        for &w in &widths {
            conv += 9 * c_in * w;
            c_in = w;
        }
        let bn: u64 = widths.iter().map(|w| 2 * w).sum();
        assert_eq!(count_params(&d).unwrap(), conv + bn + 512 * 10 + 10);
        let p = count_params(&d).unwrap() as f64;
        assert!((p / 20.035e6 - 1.0).abs() < 0.01);
        let f = count_flops(&d, FlopConvention::MacsOnly).unwrap() as f64;
        assert!((f / 3.98e8 - 1.0).abs() < 0.02, "{f}");
    }

    #[test]
    fn uniform_width_scaling() {
        let d = vgg19_descriptor([3, 32, 32], 10);
        let full = cost_report(&d, FlopConvention::MacsOnly).unwrap();
        let kept: Vec<usize> = d.conv_widths().iter().map(|&w| (w as f64 * 0.4).round() as usize).collect();
        let thin = cost_report(&d.with_conv_widths(&kept), FlopConvention::MacsOnly).unwrap();
        let ratio = thin.params() as f64 / full.params() as f64;
        assert!((ratio - 0.16).abs() < 0.005, "{ratio}");
        // interior conv layers scale exactly with r² when r·width is integral
        let half: Vec<usize> = d.conv_widths().iter().map(|&w| w / 2).collect();
        let half = cost_report(&d.with_conv_widths(&half), FlopConvention::MacsOnly).unwrap();
        let convs = |r: &CostReport| r.layers.iter().filter(|l| l.kind == "conv").map(|l| l.params).collect::<Vec<_>>();
        let (a, b) = (convs(&full), convs(&half));
        assert_eq!(a.len(), 16);
        for l in 1..16 {
            assert_eq!(b[l] * 4, a[l], "conv{l}");
        }
        assert_eq!(b[0] * 2, a[0]);
    }

    #[test]
    fn all_active_extraction_is_identity() {
        let m = Model::build(&desk_descriptor([1, 16, 16], 10), 5).unwrap();
        let (c, plan) = extract_compact(&m, &m.all_active()).unwrap();
        assert_eq!(c, m);
        assert_eq!(plan.head_columns, (0..m.head().0.shape()[1]).collect::<Vec<_>>());
    }

    #[test]
    fn plan_bookkeeping() {
        let m = Model::build(&tiny_descriptor([1, 8, 8], 3), 1).unwrap();
        let mut bits = vec![false; 24];
        for i in [1, 4, 8 + 2, 8 + 15] {
            bits[i] = true;
        }
        let mask = ChannelMask::from_bits(m.registry(), bits).unwrap();
        let plan = CompactPlan::new(&m, &mask).unwrap();
        assert_eq!(plan.kept_out, vec![vec![1, 4], vec![2, 15]]);
        assert_eq!(plan.kept_in, vec![vec![0], vec![1, 4]]);
        // last conv is pooled to 1×1, so columns are channel indices
        assert_eq!(plan.head_columns, vec![2, 15]);
    }

    #[test]
    fn extraction_matches_masked_network() {
        let d = desk_descriptor([1, 12, 12], 10);
        let mut m = Model::build(&d, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for u in m.conv_units_mut() {
            for v in u.running_mean.iter_mut() {
                *v = rand::Rng::random_range(&mut rng, -0.5..0.5);
            }
            for v in u.running_var.iter_mut() {
                *v = rand::Rng::random_range(&mut rng, 0.5..2.0);
            }
        }
        let reg = ChannelRegistry::from_widths(&d.conv_widths());
        let mask = random_mask(&reg, 0.4, 1, &mut rng).unwrap().mask;
        let (c, _) = extract_compact(&m, &mask).unwrap();
        let x = Tensor::randn(vec![20, 1, 12, 12], 1.0, &mut rng);
        let full = m.predict(&x, &mask).unwrap();
        let thin = c.predict(&x, &c.all_active()).unwrap();
        assert!(full.max_abs_diff(&thin) < 1e-9);
        assert!(count_params(c.descriptor()).unwrap() < count_params(&d).unwrap());
    }

    #[test]
    fn mask_width_mismatch() {
        let m = Model::build(&tiny_descriptor([1, 8, 8], 3), 1).unwrap();
        let other = ChannelRegistry::from_widths(&[8, 8]);
        assert!(matches!(
            extract_compact(&m, &ChannelMask::all_active(&other)),
            Err(SurgeonError::MaskShape { .. })
        ));
    }
}
