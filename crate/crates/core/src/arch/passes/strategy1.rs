use super::{refuse_repeat, seal, Pass};
use crate::arch::{ArchGraph, LayerKind, Result};

const NAME: &str = "strategy1";

/// Replaces the 3x3 kernel of the first separable convolution in every
/// module with a 1x1 kernel. Modules without separable convolutions, or
/// whose first one is already 1x1, are left alone.
pub fn apply_strategy1(graph: &ArchGraph) -> Result<ArchGraph> {
    refuse_repeat(graph, NAME)?;
    let mut out = graph.clone();
    for m in &mut out.modules {
        if let Some(first) = m.layers.iter_mut().find(|l| l.kind == LayerKind::SeparableConv) {
            if first.kernel == Some((3, 3)) {
                first.kernel = Some((1, 1));
            }
        }
    }
    seal(graph, out, NAME)
}

pub struct Strategy1Pass;

impl Pass for Strategy1Pass {
    fn name(&self) -> &'static str {
        NAME
    }

    fn describe(&self) -> String {
        "first separable 3x3 of every module -> 1x1".into()
    }

    fn apply(&self, graph: &ArchGraph) -> Result<ArchGraph> {
        apply_strategy1(graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_xception_baseline, count_params, ArchError, Flow, LayerSpec};

    #[test]
    fn first_separable_becomes_pointwise() {
        let base = build_xception_baseline();
        let g = apply_strategy1(&base).unwrap();
        let entry = &g.modules[1];
        let seps: Vec<_> = entry.conv_layers().map(|l| l.kernel).collect();
        assert_eq!(seps, [Some((1, 1)), Some((3, 3))]);
        // stem convolutions untouched
        assert_eq!(g.modules[0], base.modules[0]);
        assert!(g.modules.iter().filter(|m| m.flow == Flow::Middle).all(|m| {
            let k: Vec<_> = m.conv_layers().map(|l| l.kernel.unwrap()).collect();
            k == [(1, 1), (3, 3), (3, 3)]
        }));
    }

    #[test]
    fn input_is_not_mutated() {
        let base = build_xception_baseline();
        let copy = base.clone();
        let _ = apply_strategy1(&base).unwrap();
        assert_eq!(base, copy);
    }

    #[test]
    fn second_application_rejected() {
        let g = apply_strategy1(&build_xception_baseline()).unwrap();
        assert!(matches!(apply_strategy1(&g), Err(ArchError::PassAlreadyApplied { .. })));
    }

    #[test]
    fn no_separables_means_no_change() {
        let mut g = build_xception_baseline();
        for m in &mut g.modules {
            for l in &mut m.layers {
                if l.kind == LayerKind::SeparableConv {
                    *l = LayerSpec::conv(l.id.clone(), l.in_channels, l.out_channels, 3, 1, l.padding);
                }
            }
        }
        let out = apply_strategy1(&g).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn each_rewritten_filter_term_drops_ninefold() {
        let base = build_xception_baseline();
        let before = count_params(&base).unwrap();
        let after = count_params(&apply_strategy1(&base).unwrap()).unwrap();
        assert!(after.total < before.total);
        let mut rewritten = 0;
        for (b, a) in before.layers.iter().zip(&after.layers) {
            assert_eq!(b.id, a.id);
            if b.kernel_area != a.kernel_area {
                rewritten += 1;
                assert_eq!(b.filter_term, 9 * a.filter_term, "{}", b.id);
                assert_eq!(b.params - a.params, b.filter_term - a.filter_term);
            } else {
                assert_eq!(b.params, a.params);
            }
        }
        assert_eq!(rewritten, 13);
    }
}
