use std::fmt::Write as _;

use serde::Serialize;

use super::{validate, ArchGraph, Flow, LayerKind, LayerSpec, Result};

/// Parameter count of one layer.
///
/// `filter_term` is the part of `params` that scales with the kernel area:
/// the whole count for a dense convolution, the depthwise stage for a
/// separable one, zero for everything else.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerParams {
    pub id: String,
    pub kind: LayerKind,
    pub flow: Option<Flow>,
    pub module: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_area: usize,
    pub params: u64,
    pub filter_term: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub layers: Vec<LayerParams>,
    /// `(module index, flow, params)` including residual projections.
    pub modules: Vec<(usize, Flow, u64)>,
    pub flows: Vec<(Flow, u64)>,
    pub head: u64,
    pub total: u64,
}

/// Trainable scalars of a single layer: `N · M · kh · kw` for convolution,
/// `N · kh · kw + N · M` for separable convolution, two per channel for
/// batch normalization (running statistics are not trainable) and
/// `N · M + M` for dense layers.
pub fn layer_params(l: &LayerSpec) -> (u64, u64) {
    let n = l.in_channels as u64;
    let m = l.out_channels as u64;
    let area = l.kernel_area() as u64;
    match l.kind {
        LayerKind::Conv => (n * m * area, n * m * area),
        LayerKind::SeparableConv => (n * area + n * m, n * area),
        LayerKind::BatchNorm => (2 * n, 0),
        LayerKind::Dense => (n * m + m, 0),
        _ => (0, 0),
    }
}

/// Per-layer, per-module and per-flow parameter totals. Fails if the graph
/// does not pass shape inference.
pub fn count_params(graph: &ArchGraph) -> Result<ParamReport> {
    validate(graph)?;
    let mut layers = Vec::new();
    let mut modules = Vec::new();
    for m in &graph.modules {
        let proj = graph.residual_into(m.index).map(|r| r.projection.as_slice()).unwrap_or(&[]);
        let mut sum = 0;
        for l in m.layers.iter().chain(proj) {
            let (params, filter_term) = layer_params(l);
            sum += params;
            layers.push(LayerParams {
                id: l.id.clone(),
                kind: l.kind,
                flow: Some(m.flow),
                module: Some(m.index),
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel_area: l.kernel_area(),
                params,
                filter_term,
            });
        }
        modules.push((m.index, m.flow, sum));
    }
    let mut head = 0;
    for l in &graph.head {
        let (params, filter_term) = layer_params(l);
        head += params;
        layers.push(LayerParams {
            id: l.id.clone(),
            kind: l.kind,
            flow: None,
            module: None,
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            kernel_area: l.kernel_area(),
            params,
            filter_term,
        });
    }
    let flows = Flow::ALL
        .into_iter()
        .map(|f| (f, modules.iter().filter(|m| m.1 == f).map(|m| m.2).sum()))
        .collect();
    let total = layers.iter().map(|l| l.params).sum();
    Ok(ParamReport {
        layers,
        modules,
        flows,
        head,
        total,
    })
}

/// `12345678` → `12,345,678`.
pub fn group_thousands(v: u64) -> String {
    let digits = v.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl ParamReport {
    pub fn layer(&self, id: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn flow_total(&self, flow: Flow) -> u64 {
        self.flows.iter().find(|f| f.0 == flow).map_or(0, |f| f.1)
    }

    /// Aligned text table: one row per module, flow subtotals, head and
    /// grand total. With `per_layer` every parameterized layer is listed
    /// under its module.
    pub fn render_table(&self, per_layer: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:<7} {:>12}", "module", "flow", "params");
        let _ = writeln!(out, "{}", "-".repeat(29));
        for &(index, flow, params) in &self.modules {
            let _ = writeln!(out, "{:<8} {:<7} {:>12}", index, flow.as_str(), group_thousands(params));
            if per_layer {
                for l in self.layers.iter().filter(|l| l.module == Some(index) && l.params > 0) {
                    let _ = writeln!(
                        out,
                        "  {:<22} {:<15} {:>5} -> {:<5} k={} {:>12}",
                        l.id,
                        l.kind,
                        l.in_channels,
                        l.out_channels,
                        l.kernel_area,
                        group_thousands(l.params)
                    );
                }
            }
        }
        let _ = writeln!(out, "{}", "-".repeat(29));
        for &(flow, params) in &self.flows {
            let _ = writeln!(out, "{:<16} {:>12}", format!("{flow} flow"), group_thousands(params));
        }
        let _ = writeln!(out, "{:<16} {:>12}", "head", group_thousands(self.head));
        let _ = writeln!(out, "{:<16} {:>12}", "total", group_thousands(self.total));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;

    #[test]
    fn conv_formula() {
        let l = LayerSpec::conv("c", 64, 128, 3, 1, Padding::Same);
        assert_eq!(layer_params(&l), (73_728, 73_728));
        let l = LayerSpec::conv("c", 64, 128, 1, 1, Padding::Same);
        assert_eq!(layer_params(&l).0, 8_192);
    }

    #[test]
    fn separable_formula() {
        let l = LayerSpec::separable("s", 64, 128, 3);
        assert_eq!(layer_params(&l), (64 * 9 + 64 * 128, 64 * 9));
    }

    #[test]
    fn thousands() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(11_200_000), "11,200,000");
    }

    #[test]
    fn total_is_sum_of_layers() {
        let r = count_params(&crate::arch::build_xception_baseline()).unwrap();
        assert_eq!(r.total, r.layers.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(r.total, r.flows.iter().map(|f| f.1).sum::<u64>() + r.head);
    }
}
