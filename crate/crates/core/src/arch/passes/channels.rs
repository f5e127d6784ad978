use super::{refuse_repeat, round_to_eight, seal, Pass};
use crate::arch::{ArchError, ArchGraph, Flow, LayerKind, Result};

const NAME: &str = "channel-reduce";

/// Per-flow width divisors. The exit flow is never reduced.
///
/// The trunk width shared by the middle-flow residual chain also appears as
/// the output width of the last entry module; layers of that width follow
/// the middle divisor wherever they sit, otherwise the identity residuals
/// of the middle flow could not line up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelReduction {
    pub entry: f64,
    pub middle: f64,
}

impl ChannelReduction {
    pub fn identity() -> Self {
        Self {
            entry: 1.0,
            middle: 1.0,
        }
    }
}

fn trunk_width(graph: &ArchGraph) -> Option<usize> {
    graph
        .modules_in(Flow::Middle)
        .next()
        .and_then(|m| m.conv_layers().last())
        .map(|l| l.out_channels)
}

/// Divides separable-convolution and residual-projection widths in the
/// entry and middle flows, rounding to the nearest multiple of 8. Stem
/// convolutions and the exit flow keep their widths; downstream input
/// channels are re-inferred.
pub fn apply_channel_reduction(graph: &ArchGraph, factors: &ChannelReduction) -> Result<ArchGraph> {
    for d in [factors.entry, factors.middle] {
        if !d.is_finite() || d < 1.0 {
            return Err(ArchError::BadDivisor(d));
        }
    }
    refuse_repeat(graph, NAME)?;
    let trunk = trunk_width(graph);
    let mut out = graph.clone();
    let reduce = |flow: Flow, kind: LayerKind, id: &str, width: usize| -> Result<usize> {
        let divisor = match flow {
            Flow::Exit => return Ok(width),
            _ if kind == LayerKind::Conv && id.contains(".conv") && !id.contains(".res.") => return Ok(width),
            Flow::Middle => factors.middle,
            Flow::Entry if Some(width) == trunk => factors.middle,
            Flow::Entry => factors.entry,
        };
        if divisor == 1.0 {
            return Ok(width);
        }
        let w = round_to_eight(width as f64 / divisor);
        if w < 8 {
            return Err(ArchError::TooFewChannels { id: id.to_string(), width: w });
        }
        Ok(w)
    };
    let ArchGraph {
        modules, residuals, ..
    } = &mut out;
    for m in modules.iter_mut() {
        for l in m.layers.iter_mut().filter(|l| l.kind.is_conv_like()) {
            l.out_channels = reduce(m.flow, l.kind, &l.id, l.out_channels)?;
        }
        if let Some(link) = residuals.iter_mut().find(|r| r.from == m.index) {
            for l in link.projection.iter_mut().filter(|l| l.kind.is_conv_like()) {
                l.out_channels = reduce(m.flow, l.kind, &l.id, l.out_channels)?;
            }
        }
    }
    seal(graph, out, NAME)
}

pub struct ChannelReductionPass(pub ChannelReduction);

impl Pass for ChannelReductionPass {
    fn name(&self) -> &'static str {
        NAME
    }

    fn describe(&self) -> String {
        format!("channel widths: entry /{}, middle /{:.4}", self.0.entry, self.0.middle)
    }

    fn apply(&self, graph: &ArchGraph) -> Result<ArchGraph> {
        apply_channel_reduction(graph, &self.0)
    }
}
