//! Stage-structured descriptions of single-scale base networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Conv2dSpec;

/// One building unit of a stage. Every variant ends with batch norm, and all
/// but the residual block's inner conv end with ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Convolution + batch norm + ReLU.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        #[serde(default)]
        depthwise: bool,
    },
    /// Two 3x3 convolutions with an identity or 1x1 projection shortcut.
    BasicBlock { out_channels: usize, stride: usize },
    /// 3x3 depthwise conv + BN + ReLU, then 1x1 pointwise conv + BN + ReLU.
    DepthwiseSeparable { out_channels: usize, stride: usize },
}

impl LayerSpec {
    pub fn out_channels(&self) -> usize {
        match *self {
            LayerSpec::Conv { out_channels, .. }
            | LayerSpec::BasicBlock { out_channels, .. }
            | LayerSpec::DepthwiseSeparable { out_channels, .. } => out_channels,
        }
    }

    pub fn stride(&self) -> usize {
        match *self {
            LayerSpec::Conv { stride, .. }
            | LayerSpec::BasicBlock { stride, .. }
            | LayerSpec::DepthwiseSeparable { stride, .. } => stride,
        }
    }

    fn with_out_channels(&self, c: usize) -> LayerSpec {
        let mut l = self.clone();
        match &mut l {
            LayerSpec::Conv { out_channels, .. }
            | LayerSpec::BasicBlock { out_channels, .. }
            | LayerSpec::DepthwiseSeparable { out_channels, .. } => *out_channels = c,
        }
        l
    }

    /// Convolutions this unit runs, given its input channel count, in
    /// execution order (shortcut last).
    pub(crate) fn convs(&self, in_channels: usize) -> Result<Vec<(&'static str, Conv2dSpec)>> {
        Ok(match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                depthwise,
            } => {
                let groups = if depthwise {
                    if out_channels != in_channels {
                        return Err(Error::InvalidSpec(format!(
                            "depthwise conv must keep channels ({in_channels} -> {out_channels})"
                        )));
                    }
                    in_channels
                } else {
                    1
                };
                vec![(
                    "conv",
                    Conv2dSpec::new(in_channels, out_channels, kernel, stride, kernel / 2, groups)?,
                )]
            }
            LayerSpec::BasicBlock {
                out_channels,
                stride,
            } => {
                let mut v = vec![
                    ("conv1", Conv2dSpec::new(in_channels, out_channels, 3, stride, 1, 1)?),
                    ("conv2", Conv2dSpec::new(out_channels, out_channels, 3, 1, 1, 1)?),
                ];
                if stride != 1 || in_channels != out_channels {
                    v.push((
                        "shortcut",
                        Conv2dSpec::new(in_channels, out_channels, 1, stride, 0, 1)?,
                    ));
                }
                v
            }
            LayerSpec::DepthwiseSeparable {
                out_channels,
                stride,
            } => vec![
                (
                    "dw",
                    Conv2dSpec::new(in_channels, in_channels, 3, stride, 1, in_channels)?,
                ),
                ("pw", Conv2dSpec::new(in_channels, out_channels, 1, 1, 0, 1)?),
            ],
        })
    }
}

/// Layers sharing one spatial resolution. A stage whose `spatial_reduction`
/// is 1 is a stem and may only appear first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub layers: Vec<LayerSpec>,
    pub out_channels: usize,
    pub spatial_reduction: usize,
}

impl StageSpec {
    pub fn new(layers: Vec<LayerSpec>, spatial_reduction: usize) -> Self {
        let out_channels = layers.last().map_or(0, LayerSpec::out_channels);
        StageSpec {
            layers,
            out_channels,
            spatial_reduction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseNetworkSpec {
    pub name: String,
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    /// Width multiplier in (0, 1].
    pub alpha: f64,
}

impl BaseNetworkSpec {
    /// Stem conv followed by three stages of two basic residual blocks,
    /// widths 16/32/64.
    pub fn mini_resnet(in_channels: usize, num_classes: usize, alpha: f64) -> Self {
        let stem = StageSpec::new(
            vec![LayerSpec::Conv {
                out_channels: 16,
                kernel: 3,
                stride: 1,
                depthwise: false,
            }],
            1,
        );
        let mut stages = vec![stem];
        for width in [16, 32, 64] {
            stages.push(StageSpec::new(
                vec![
                    LayerSpec::BasicBlock {
                        out_channels: width,
                        stride: 2,
                    },
                    LayerSpec::BasicBlock {
                        out_channels: width,
                        stride: 1,
                    },
                ],
                2,
            ));
        }
        BaseNetworkSpec {
            name: "mini-resnet".into(),
            in_channels,
            stages,
            num_classes,
            alpha,
        }
    }

    /// Depthwise-separable network with stage widths 32/64/128.
    pub fn mini_mobilenet(in_channels: usize, num_classes: usize, alpha: f64) -> Self {
        Self::mobilenet_with_widths("mini-mobilenet", [32, 64, 128], in_channels, num_classes, alpha)
    }

    /// Mobilenet-style layout: a stem of one standard 3x3 conv plus one
    /// depthwise-separable unit, then stride-2 stages of two units each.
    pub fn mobilenet_with_widths<const S: usize>(
        name: &str,
        widths: [usize; S],
        in_channels: usize,
        num_classes: usize,
        alpha: f64,
    ) -> Self {
        let mut stages = Vec::with_capacity(S);
        for (i, &width) in widths.iter().enumerate() {
            let layers = if i == 0 {
                vec![
                    LayerSpec::Conv {
                        out_channels: width,
                        kernel: 3,
                        stride: 1,
                        depthwise: false,
                    },
                    LayerSpec::DepthwiseSeparable {
                        out_channels: width,
                        stride: 1,
                    },
                ]
            } else {
                vec![
                    LayerSpec::DepthwiseSeparable {
                        out_channels: width,
                        stride: 2,
                    },
                    LayerSpec::DepthwiseSeparable {
                        out_channels: width,
                        stride: 1,
                    },
                ]
            };
            stages.push(StageSpec::new(layers, if i == 0 { 1 } else { 2 }));
        }
        BaseNetworkSpec {
            name: name.into(),
            in_channels,
            stages,
            num_classes,
            alpha,
        }
    }

    /// Plain CNN: a stride-1 stem conv of `widths[0]`, then one stride-2
    /// conv per remaining width.
    pub fn plain(in_channels: usize, widths: &[usize], num_classes: usize, alpha: f64) -> Self {
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &width)| {
                let stride = if i == 0 { 1 } else { 2 };
                StageSpec::new(
                    vec![LayerSpec::Conv {
                        out_channels: width,
                        kernel: 3,
                        stride,
                        depthwise: false,
                    }],
                    stride,
                )
            })
            .collect();
        BaseNetworkSpec {
            name: "plain-cnn".into(),
            in_channels,
            stages,
            num_classes,
            alpha,
        }
    }

    /// `max(1, round(alpha * c))`.
    pub fn scale_width(&self, c: usize) -> usize {
        ((self.alpha * c as f64).round() as usize).max(1)
    }

    pub fn is_stem(&self, stage: usize) -> bool {
        stage == 0 && self.stages.first().is_some_and(|s| s.spatial_reduction == 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(format!("{}: {msg}", self.name)));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return bad("in_channels and num_classes must be positive".into());
        }
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let Some(first) = stage.layers.first() else {
                return bad(format!("stage {i} has no layers"));
            };
            if !matches!(stage.spatial_reduction, 1 | 2) {
                return bad(format!(
                    "stage {i}: spatial_reduction must be 1 or 2, got {}",
                    stage.spatial_reduction
                ));
            }
            if stage.spatial_reduction == 1 && i != 0 {
                return bad(format!("stage {i}: only the first stage may be a stem"));
            }
            if first.stride() != stage.spatial_reduction {
                return bad(format!(
                    "stage {i}: first layer stride {} does not match spatial_reduction {}",
                    first.stride(),
                    stage.spatial_reduction
                ));
            }
            if stage.layers[1..].iter().any(|l| l.stride() != 1) {
                return bad(format!("stage {i}: only the first layer may be strided"));
            }
            let last = stage.layers.last().unwrap().out_channels();
            if stage.out_channels != last {
                return bad(format!(
                    "stage {i}: out_channels {} but last layer emits {last}",
                    stage.out_channels
                ));
            }
        }
        Ok(())
    }

    /// Stages with every channel count multiplied by `alpha`.
    pub fn scaled_stages(&self) -> Vec<StageSpec> {
        self.stages
            .iter()
            .map(|s| StageSpec {
                layers: s
                    .layers
                    .iter()
                    .map(|l| l.with_out_channels(self.scale_width(l.out_channels())))
                    .collect(),
                out_channels: self.scale_width(s.out_channels),
                spatial_reduction: s.spatial_reduction,
            })
            .collect()
    }

    /// Instantiated per-stage output widths.
    pub fn stage_widths(&self) -> Vec<usize> {
        self.scaled_stages().iter().map(|s| s.out_channels).collect()
    }
}
