use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DescriptorError {
    #[error("block {block}: {detail}")]
    Invalid { block: usize, detail: String },
    #[error("descriptor has no conv layers")]
    NoConv,
    #[error("descriptor must end with exactly one linear classification layer")]
    Head,
    #[error("unknown architecture {0:?} (expected tiny, desk or vgg19)")]
    UnknownArch(String),
    #[error("descriptor parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

/// One entry of a sequential architecture.
///
/// `Conv` is a full gateable unit: convolution, batch norm, ReLU and the channel
/// gate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Block {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        out_features: usize,
    },
}

impl Block {
    pub fn conv3(out_channels: usize) -> Self {
        Block::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            bias: false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Block::Conv { .. } => "conv",
            Block::MaxPool { .. } => "maxpool",
            Block::AvgPool { .. } => "avgpool",
            Block::Flatten => "flatten",
            Block::Linear { .. } => "linear",
        }
    }
}

/// Activation shape between blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        match *self {
            FeatureShape::Spatial { c, h, w } => c * h * w,
            FeatureShape::Flat(n) => n,
        }
    }
}

/// Declarative sequential CNN: conv units and pools, then flatten and a single
/// linear classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub name: String,
    /// C×H×W
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub blocks: Vec<Block>,
}

impl ArchDescriptor {
    /// Walks the blocks and returns each block's output shape.
    pub fn validate(&self) -> Result<Vec<FeatureShape>, DescriptorError> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(DescriptorError::Invalid {
                block: 0,
                detail: format!("input shape {:?} has a zero extent", self.input_shape),
            });
        }
        let mut shape = FeatureShape::Spatial { c, h, w };
        let mut shapes = Vec::with_capacity(self.blocks.len());
        let n_linear = self.blocks.iter().filter(|b| matches!(b, Block::Linear { .. })).count();
        if n_linear != 1 || !matches!(self.blocks.last(), Some(Block::Linear { .. })) {
            return Err(DescriptorError::Head);
        }
        if !self.blocks.iter().any(|b| matches!(b, Block::Conv { .. })) {
            return Err(DescriptorError::NoConv);
        }
        for (i, block) in self.blocks.iter().enumerate() {
            let bad = |detail: String| DescriptorError::Invalid { block: i, detail };
            shape = match (block, shape) {
                (
                    Block::Conv {
                        out_channels,
                        kernel,
                        stride,
                        pad,
                        ..
                    },
                    FeatureShape::Spatial { h, w, .. },
                ) => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(bad("conv needs positive width, kernel and stride".into()));
                    }
                    if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                        return Err(bad(format!("kernel {kernel} exceeds padded input {h}×{w}")));
                    }
                    FeatureShape::Spatial {
                        c: *out_channels,
                        h: (h + 2 * pad - kernel) / stride + 1,
                        w: (w + 2 * pad - kernel) / stride + 1,
                    }
                }
                (
                    Block::MaxPool { kernel, stride } | Block::AvgPool { kernel, stride },
                    FeatureShape::Spatial { c, h, w },
                ) => {
                    if *kernel == 0 || *stride == 0 || h < *kernel || w < *kernel {
                        return Err(bad(format!("pool {kernel}/{stride} does not fit {h}×{w}")));
                    }
                    FeatureShape::Spatial {
                        c,
                        h: (h - kernel) / stride + 1,
                        w: (w - kernel) / stride + 1,
                    }
                }
                (Block::Flatten, s @ FeatureShape::Spatial { .. }) => FeatureShape::Flat(s.numel()),
                (Block::Linear { out_features }, FeatureShape::Flat(_)) => {
                    if *out_features != self.num_classes {
                        return Err(bad(format!(
                            "linear has {out_features} outputs but num_classes is {}",
                            self.num_classes
                        )));
                    }
                    FeatureShape::Flat(*out_features)
                }
                (b, s) => return Err(bad(format!("{} cannot follow shape {s:?}", b.kind()))),
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn conv_widths(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Conv { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect()
    }

    pub fn num_gateable(&self) -> usize {
        self.conv_widths().iter().sum()
    }

    /// Same topology with conv widths replaced in order.
    pub fn with_conv_widths(&self, widths: &[usize]) -> Self {
        let mut it = widths.iter();
        let blocks = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::Conv {
                    kernel,
                    stride,
                    pad,
                    bias,
                    ..
                } => Block::Conv {
                    out_channels: *it.next().expect("too few widths"),
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                    bias: *bias,
                },
                other => other.clone(),
            })
            .collect();
        assert!(it.next().is_none(), "too many widths");
        Self {
            name: self.name.clone(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            blocks,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DescriptorError> {
        let desc: Self = serde_json::from_str(text).map_err(|e| DescriptorError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        desc.validate()?;
        Ok(desc)
    }

    pub fn by_name(arch: &str, input_shape: [usize; 3], num_classes: usize) -> Result<Self, DescriptorError> {
        match arch {
            "tiny" => Ok(tiny_descriptor(input_shape, num_classes)),
            "desk" => Ok(desk_descriptor(input_shape, num_classes)),
            "vgg19" => Ok(vgg19_descriptor(input_shape, num_classes)),
            other => Err(DescriptorError::UnknownArch(other.to_string())),
        }
    }
}

fn head(blocks: &mut Vec<Block>, num_classes: usize) {
    blocks.push(Block::Flatten);
    blocks.push(Block::Linear {
        out_features: num_classes,
    });
}

/// VGG-E with a single classification layer: 16 3×3 convs without bias, four
/// max-pools, a final average pool down to 1×1, then one linear layer.
pub fn vgg19_descriptor(input_shape: [usize; 3], num_classes: usize) -> ArchDescriptor {
    const CFG: [usize; 20] = [
        64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512,
    ];
    let mut blocks: Vec<Block> = CFG
        .iter()
        .map(|&w| {
            if w == 0 {
                Block::MaxPool { kernel: 2, stride: 2 }
            } else {
                Block::conv3(w)
            }
        })
        .collect();
    let side = (input_shape[1] / 16).max(1);
    blocks.push(Block::AvgPool {
        kernel: side,
        stride: side,
    });
    head(&mut blocks, num_classes);
    ArchDescriptor {
        name: "vgg19".into(),
        input_shape,
        num_classes,
        blocks,
    }
}

/// Four conv units (16, 32, 32, 64) with two max-pools and global average
/// pooling before the classifier.
pub fn desk_descriptor(input_shape: [usize; 3], num_classes: usize) -> ArchDescriptor {
    let mut blocks = vec![
        Block::conv3(16),
        Block::MaxPool { kernel: 2, stride: 2 },
        Block::conv3(32),
        Block::MaxPool { kernel: 2, stride: 2 },
        Block::conv3(32),
        Block::conv3(64),
    ];
    let side = input_shape[1] / 4;
    blocks.push(Block::AvgPool {
        kernel: side,
        stride: side,
    });
    head(&mut blocks, num_classes);
    ArchDescriptor {
        name: "desk".into(),
        input_shape,
        num_classes,
        blocks,
    }
}

/// Two conv units (8, 16) for fast tests.
pub fn tiny_descriptor(input_shape: [usize; 3], num_classes: usize) -> ArchDescriptor {
    let mut blocks = vec![
        Block::conv3(8),
        Block::MaxPool { kernel: 2, stride: 2 },
        Block::conv3(16),
    ];
    let side = input_shape[1] / 2;
    blocks.push(Block::AvgPool {
        kernel: side,
        stride: side,
    });
    head(&mut blocks, num_classes);
    ArchDescriptor {
        name: "tiny".into(),
        input_shape,
        num_classes,
        blocks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg19_layout() {
        let d = vgg19_descriptor([3, 32, 32], 10);
        let shapes = d.validate().unwrap();
        assert_eq!(
            d.conv_widths(),
            vec![64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512]
        );
        assert_eq!(d.num_gateable(), 5504);
        assert_eq!(shapes[shapes.len() - 2], FeatureShape::Flat(512));
        let maxpools = d.blocks.iter().filter(|b| matches!(b, Block::MaxPool { .. })).count();
        assert_eq!(maxpools, 4);
    }

    #[test]
    fn tiny_and_desk_widths() {
        assert_eq!(tiny_descriptor([1, 28, 28], 10).num_gateable(), 24);
        let desk = desk_descriptor([1, 28, 28], 10);
        assert_eq!(desk.conv_widths(), vec![16, 32, 32, 64]);
        desk.validate().unwrap();
        desk_descriptor([3, 32, 32], 10).validate().unwrap();
    }

    #[test]
    fn head_must_be_single_final_linear() {
        let mut d = tiny_descriptor([1, 8, 8], 10);
        d.blocks.insert(0, Block::Linear { out_features: 10 });
        assert_eq!(d.validate(), Err(DescriptorError::Head));
        let mut d = tiny_descriptor([1, 8, 8], 10);
        d.blocks.pop();
        assert_eq!(d.validate(), Err(DescriptorError::Head));
    }

    #[test]
    fn conv_after_flatten_is_rejected() {
        let d = ArchDescriptor {
            name: "bad".into(),
            input_shape: [1, 8, 8],
            num_classes: 2,
            blocks: vec![
                Block::conv3(4),
                Block::Flatten,
                Block::conv3(4),
                Block::Linear { out_features: 2 },
            ],
        };
        assert!(matches!(d.validate(), Err(DescriptorError::Invalid { block: 2, .. })));
    }

    #[test]
    fn json_roundtrip_and_error_location() {
        let d = desk_descriptor([3, 32, 32], 10);
        assert_eq!(ArchDescriptor::from_json(&d.to_json()).unwrap(), d);
        let err = ArchDescriptor::from_json("{\n  \"name\": \"x\",\n  \"input_shape\": [1, 2\n}").unwrap_err();
        match err {
            DescriptorError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }
}
