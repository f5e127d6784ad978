use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ArchError, ArchGraph, Flow, LayerKind, LayerSpec, Result};
use crate::tensor::spatial_out;

/// Per-sample activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureShape {
    Map { c: usize, h: usize, w: usize },
    Vector { n: usize },
}

impl FeatureShape {
    pub fn channels(self) -> usize {
        match self {
            FeatureShape::Map { c, .. } => c,
            FeatureShape::Vector { n } => n,
        }
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureShape::Map { c, h, w } => write!(f, "{c}x{h}x{w}"),
            FeatureShape::Vector { n } => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRow {
    pub id: String,
    pub kind: LayerKind,
    pub flow: Option<Flow>,
    pub input: FeatureShape,
    pub output: FeatureShape,
}

/// Result of a successful [`validate`].
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTable {
    pub rows: Vec<ShapeRow>,
    pub output: FeatureShape,
}

impl ShapeTable {
    pub fn row(&self, id: &str) -> Option<&ShapeRow> {
        self.rows.iter().find(|r| r.id == id)
    }
}

fn illegal(l: &LayerSpec, detail: impl Into<String>) -> ArchError {
    ArchError::IllegalLayer {
        id: l.id.clone(),
        detail: detail.into(),
    }
}

fn spatial(l: &LayerSpec, h: usize, w: usize, k: (usize, usize)) -> Result<(usize, usize)> {
    let wrap = |source| ArchError::Shape {
        id: l.id.clone(),
        source,
    };
    let (oh, _) = spatial_out("shape inference", h, k.0, l.stride, l.padding).map_err(wrap)?;
    let (ow, _) = spatial_out("shape inference", w, k.1, l.stride, l.padding).map_err(wrap)?;
    Ok((oh, ow))
}

/// Output shape of one layer, checking that the layer's declared
/// attributes are legal for its kind and agree with `input`.
fn infer_layer(l: &LayerSpec, input: FeatureShape) -> Result<FeatureShape> {
    if l.in_channels != input.channels() {
        return Err(ArchError::ChannelMismatch {
            id: l.id.clone(),
            declared: l.in_channels,
            inferred: input.channels(),
        });
    }
    if l.kernel.is_some() && !l.kind.is_conv_like() {
        return Err(illegal(l, format!("{} layers take no kernel", l.kind)));
    }
    if l.window.is_some() && l.kind != LayerKind::MaxPool {
        return Err(illegal(l, "only maxpool layers take a window"));
    }
    if l.rate.is_some() && l.kind != LayerKind::Dropout {
        return Err(illegal(l, "only dropout layers take a rate"));
    }
    let pass_through = |l: &LayerSpec| {
        if l.out_channels != l.in_channels {
            Err(illegal(l, "pass-through layer must keep its channel count"))
        } else {
            Ok(input)
        }
    };
    match l.kind {
        LayerKind::Conv | LayerKind::SeparableConv => {
            let FeatureShape::Map { h, w, .. } = input else {
                return Err(illegal(l, "convolution needs a feature map input"));
            };
            let k = l.kernel.ok_or_else(|| illegal(l, "missing kernel"))?;
            if !matches!(k, (1, 1) | (3, 3)) {
                return Err(illegal(l, format!("kernel {}x{} not in {{1x1, 3x3}}", k.0, k.1)));
            }
            if l.in_channels == 0 || l.out_channels == 0 {
                return Err(illegal(l, "channel counts must be positive"));
            }
            let (h, w) = spatial(l, h, w, k)?;
            Ok(FeatureShape::Map {
                c: l.out_channels,
                h,
                w,
            })
        }
        LayerKind::MaxPool => {
            let FeatureShape::Map { c, h, w } = input else {
                return Err(illegal(l, "pooling needs a feature map input"));
            };
            pass_through(l)?;
            let win = l.window.ok_or_else(|| illegal(l, "missing pooling window"))?;
            let (h, w) = spatial(l, h, w, (win, win))?;
            Ok(FeatureShape::Map { c, h, w })
        }
        LayerKind::GlobalAvgPool => {
            let FeatureShape::Map { c, .. } = input else {
                return Err(illegal(l, "global pooling needs a feature map input"));
            };
            pass_through(l)?;
            Ok(FeatureShape::Vector { n: c })
        }
        LayerKind::Dense => {
            if !matches!(input, FeatureShape::Vector { .. }) {
                return Err(illegal(l, "dense needs a flat input; add global pooling first"));
            }
            if l.out_channels == 0 {
                return Err(illegal(l, "dense needs at least one unit"));
            }
            Ok(FeatureShape::Vector { n: l.out_channels })
        }
        LayerKind::Dropout => {
            let rate = l.rate.ok_or_else(|| illegal(l, "missing dropout rate"))?;
            if !(0.0..1.0).contains(&rate) {
                return Err(illegal(l, format!("dropout rate {rate} outside [0, 1)")));
            }
            pass_through(l)
        }
        LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Sigmoid => pass_through(l),
    }
}

/// Full forward shape inference from the graph input through the head,
/// including residual compatibility and layer legality.
pub fn validate(graph: &ArchGraph) -> Result<ShapeTable> {
    let mut rows = Vec::new();
    let input = graph.input;
    let mut cur = FeatureShape::Map {
        c: input.channels,
        h: input.height,
        w: input.width,
    };
    for (pos, m) in graph.modules.iter().enumerate() {
        if m.index != pos + 1 {
            return Err(ArchError::IllegalLayer {
                id: format!("module {}", m.index),
                detail: format!("module at position {} must carry index {}", pos + 1, pos + 1),
            });
        }
        let start = cur;
        for l in &m.layers {
            let out = infer_layer(l, cur)?;
            rows.push(ShapeRow {
                id: l.id.clone(),
                kind: l.kind,
                flow: Some(m.flow),
                input: cur,
                output: out,
            });
            cur = out;
        }
        if let Some(link) = graph.residual_into(m.index) {
            if link.to != m.index + 1 {
                return Err(ArchError::ResidualSpan {
                    from: link.from,
                    to: link.to,
                });
            }
            let mut skip = start;
            for l in &link.projection {
                let out = infer_layer(l, skip)?;
                rows.push(ShapeRow {
                    id: l.id.clone(),
                    kind: l.kind,
                    flow: Some(m.flow),
                    input: skip,
                    output: out,
                });
                skip = out;
            }
            if skip != cur {
                return Err(ArchError::ResidualMismatch {
                    from: link.from,
                    to: link.to,
                    main: cur,
                    skip,
                });
            }
        }
    }
    if let Some(orphan) = graph
        .residuals
        .iter()
        .find(|r| r.from == 0 || r.from > graph.modules.len())
    {
        return Err(ArchError::ResidualSpan {
            from: orphan.from,
            to: orphan.to,
        });
    }
    for l in &graph.head {
        let out = infer_layer(l, cur)?;
        rows.push(ShapeRow {
            id: l.id.clone(),
            kind: l.kind,
            flow: None,
            input: cur,
            output: out,
        });
        cur = out;
    }
    match graph.head.last() {
        Some(l) if l.kind == LayerKind::Sigmoid && cur == (FeatureShape::Vector { n: 1 }) => {}
        _ => return Err(ArchError::Head(format!("must end in a 1-unit sigmoid, ends with {cur}"))),
    }
    Ok(ShapeTable { rows, output: cur })
}

/// Rewrites every layer's `in_channels` (and the channel count of
/// pass-through layers) from the widths upstream of it. Passes call this
/// after changing `out_channels` somewhere.
pub fn reinfer_channels(graph: &mut ArchGraph) -> Result<()> {
    fn walk(layers: &mut [LayerSpec], mut cur: FeatureShape) -> Result<FeatureShape> {
        for l in layers {
            l.in_channels = cur.channels();
            if !matches!(l.kind, LayerKind::Conv | LayerKind::SeparableConv | LayerKind::Dense) {
                l.out_channels = l.in_channels;
            }
            cur = infer_layer(l, cur)?;
        }
        Ok(cur)
    }
    let input = graph.input;
    let mut cur = FeatureShape::Map {
        c: input.channels,
        h: input.height,
        w: input.width,
    };
    let ArchGraph {
        modules,
        residuals,
        head,
        ..
    } = graph;
    for m in modules.iter_mut() {
        let start = cur;
        cur = walk(&mut m.layers, cur)?;
        if let Some(link) = residuals.iter_mut().find(|r| r.from == m.index) {
            walk(&mut link.projection, start)?;
        }
    }
    walk(head, cur)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_xception_baseline;

    #[test]
    fn baseline_shapes() {
        let g = build_xception_baseline();
        let table = validate(&g).unwrap();
        assert_eq!(table.output, FeatureShape::Vector { n: 1 });
        assert_eq!(
            table.row("m01.conv1").unwrap().output,
            FeatureShape::Map { c: 32, h: 111, w: 111 }
        );
        assert_eq!(
            table.row("m14.sep2").unwrap().output,
            FeatureShape::Map { c: 2048, h: 7, w: 7 }
        );
    }

    #[test]
    fn residual_mismatch_names_boundaries() {
        let mut g = build_xception_baseline();
        let link = g.residuals.iter_mut().find(|r| r.from == 3).unwrap();
        link.projection[0].stride = 1;
        match validate(&g) {
            Err(ArchError::ResidualMismatch { from: 3, to: 4, .. }) => {}
            other => panic!("expected residual mismatch, got {other:?}"),
        }
        let msg = validate(&g).unwrap_err().to_string();
        assert!(msg.contains("boundary 3") && msg.contains("boundary 4"), "{msg}");
    }

    #[test]
    fn kernel_on_relu_is_illegal() {
        let mut g = build_xception_baseline();
        g.modules[0].layers[2].kernel = Some((3, 3));
        assert!(matches!(validate(&g), Err(ArchError::IllegalLayer { .. })));
    }

    #[test]
    fn five_by_five_kernel_rejected() {
        let mut g = build_xception_baseline();
        g.modules[0].layers[0].kernel = Some((5, 5));
        assert!(matches!(validate(&g), Err(ArchError::IllegalLayer { .. })));
    }

    #[test]
    fn declared_channel_mismatch_detected() {
        let mut g = build_xception_baseline();
        g.modules[1].layers[0].in_channels = 63;
        assert!(matches!(
            validate(&g),
            Err(ArchError::ChannelMismatch { declared: 63, inferred: 64, .. })
        ));
        reinfer_channels(&mut g).unwrap();
        validate(&g).unwrap();
    }

    #[test]
    fn head_must_end_in_single_sigmoid() {
        let mut g = build_xception_baseline();
        g.head.pop();
        assert!(matches!(validate(&g), Err(ArchError::Head(_))));
    }
}
