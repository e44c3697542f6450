//! Built-in desk-scale families: `6n + 2` residual and plain stacks, and a
//! within-stage channel-concatenating variant.
//!
//! All three share the stem (3x3 conv to the first stage width), three
//! stages that each halve the resolution in their first layer, global
//! average pooling and a linear classifier.

use super::graph::{GraphBuilder, LayerKind};
use super::registry::Architecture;
use super::{LayerGraph, ModelConfig, ModelError};

fn stem(g: &mut GraphBuilder, cfg: &ModelConfig) -> usize {
    g.conv_bn_relu("stem", "", 0, cfg.input_size[0], cfg.stage_widths[0], 3, 1)
}

fn head(g: &mut GraphBuilder, x: usize, channels: usize, classes: usize) -> usize {
    let p = g.push("pool", LayerKind::GlobalAvgPool, vec![x]);
    g.push(
        "fc",
        LayerKind::Linear {
            inputs: channels,
            outputs: classes,
        },
        vec![p],
    )
}

/// Basic-block stack; `skip` toggles the additive shortcuts. The plain
/// network is exactly the residual one minus the shortcut nodes.
fn basic_stack(cfg: &ModelConfig, skip: bool) -> Result<LayerGraph, ModelError> {
    let mut g = GraphBuilder::new(&cfg.input_size);
    let mut x = stem(&mut g, cfg);
    let mut in_ch = cfg.stage_widths[0];
    for (s, &width) in cfg.stage_widths.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let stride = if b == 0 { 2 } else { 1 };
            let p = format!("stage{}.block{b}", s + 1);
            let h = g.conv_bn_relu(&p, "1", x, in_ch, width, 3, stride);
            let h = g.conv(&format!("{p}.conv2"), h, width, width, 3, 1);
            let branch = g.bn(&format!("{p}.bn2"), h, width);
            let pre = if skip {
                let shortcut = if stride != 1 || in_ch != width {
                    let c = g.conv(&format!("{p}.shortcut.conv"), x, in_ch, width, 1, stride);
                    g.bn(&format!("{p}.shortcut.bn"), c, width)
                } else {
                    x
                };
                g.push(format!("{p}.add"), LayerKind::Add, vec![branch, shortcut])
            } else {
                branch
            };
            x = g.relu(&format!("{p}.out"), pre);
            in_ch = width;
        }
    }
    head(&mut g, x, in_ch, cfg.num_classes);
    g.finish()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Residual;

impl Architecture for Residual {
    fn name(&self) -> &str {
        "residual"
    }

    fn description(&self) -> &str {
        "post-activation basic blocks with identity/projection shortcuts"
    }

    fn build(&self, config: &ModelConfig) -> Result<LayerGraph, ModelError> {
        basic_stack(config, true)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Plain;

impl Architecture for Plain {
    fn name(&self) -> &str {
        "plain"
    }

    fn description(&self) -> &str {
        "the residual stack with every shortcut removed"
    }

    fn build(&self, config: &ModelConfig) -> Result<LayerGraph, ModelError> {
        basic_stack(config, false)
    }
}

/// Each stage opens with a strided 1x1 transition conv; every block then
/// sees the concatenation of all earlier feature maps in the stage and
/// appends its own `width` channels.
#[derive(Debug, Clone, Copy, Default)]
pub struct DenseConcat;

impl Architecture for DenseConcat {
    fn name(&self) -> &str {
        "dense_concat"
    }

    fn description(&self) -> &str {
        "within-stage channel concatenation with 1x1 transitions"
    }

    fn build(&self, cfg: &ModelConfig) -> Result<LayerGraph, ModelError> {
        let mut g = GraphBuilder::new(&cfg.input_size);
        let mut x = stem(&mut g, cfg);
        let mut channels = cfg.stage_widths[0];
        for (s, &width) in cfg.stage_widths.iter().enumerate() {
            let t = format!("stage{}.transition", s + 1);
            x = g.conv_bn_relu(&t, "", x, channels, width, 1, 2);
            channels = width;
            for b in 0..cfg.blocks_per_stage {
                let p = format!("stage{}.block{b}", s + 1);
                let h = g.conv_bn_relu(&p, "1", x, channels, width, 3, 1);
                let h = g.conv_bn_relu(&p, "2", h, width, width, 3, 1);
                x = g.push(format!("{p}.concat"), LayerKind::Concat, vec![x, h]);
                channels += width;
            }
        }
        head(&mut g, x, channels, cfg.num_classes);
        g.finish()
    }
}
