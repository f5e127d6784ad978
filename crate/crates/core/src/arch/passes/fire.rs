use super::{refuse_repeat, round_to_eight, seal, Pass};
use crate::arch::{ArchError, ArchGraph, Flow, Result};

const NAME: &str = "fire";

/// Squeeze width is the expand width divided by this.
pub const SQUEEZE_RATIO: usize = 4;

/// Turns every middle-flow module into a sequential fire module: the first
/// conv-like layer becomes a 1x1 squeeze of width `expand / 4`, the second a
/// 1x1 expand layer and the third the final 3x3 expand layer. Entry and
/// exit flows are untouched.
pub fn rewrite_fire_modules(graph: &ArchGraph) -> Result<ArchGraph> {
    refuse_repeat(graph, NAME)?;
    let mut out = graph.clone();
    for m in out.modules.iter_mut().filter(|m| m.flow == Flow::Middle) {
        let convs: Vec<usize> = m
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_conv_like())
            .map(|(i, _)| i)
            .collect();
        if convs.len() < 3 {
            return Err(ArchError::FireModuleTooShort {
                module: m.index,
                found: convs.len(),
            });
        }
        let expand = m.layers[convs[2]].out_channels;
        let squeeze = round_to_eight((expand / SQUEEZE_RATIO) as f64).max(8);
        let sq = &mut m.layers[convs[0]];
        sq.kernel = Some((1, 1));
        sq.out_channels = squeeze;
        let ex1 = &mut m.layers[convs[1]];
        ex1.kernel = Some((1, 1));
        ex1.out_channels = expand;
    }
    seal(graph, out, NAME)
}

pub struct FirePass;

impl Pass for FirePass {
    fn name(&self) -> &'static str {
        NAME
    }

    fn describe(&self) -> String {
        format!("middle modules -> squeeze 1x1 (expand/{SQUEEZE_RATIO}), expand 1x1, expand 3x3")
    }

    fn apply(&self, graph: &ArchGraph) -> Result<ArchGraph> {
        rewrite_fire_modules(graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::params::layer_params;
    use crate::arch::{
        apply_channel_reduction, apply_strategy1, build_xception_baseline, count_params, ChannelReduction,
        LayerKind,
    };

    fn squeezed_256() -> ArchGraph {
        let s1 = apply_strategy1(&build_xception_baseline()).unwrap();
        apply_channel_reduction(
            &s1,
            &ChannelReduction {
                entry: 2.0,
                middle: 728.0 / 256.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn middle_kernels_become_fire_pattern() {
        let g = rewrite_fire_modules(&build_xception_baseline()).unwrap();
        for m in g.modules_in(Flow::Middle) {
            let k: Vec<_> = m.conv_layers().map(|l| l.kernel.unwrap()).collect();
            assert_eq!(k, [(1, 1), (1, 1), (3, 3)]);
        }
    }

    #[test]
    fn entry_and_exit_untouched() {
        let base = squeezed_256();
        let g = rewrite_fire_modules(&base).unwrap();
        for (a, b) in base.modules.iter().zip(&g.modules) {
            if a.flow != Flow::Middle {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn widths_follow_fire_contract() {
        let g = rewrite_fire_modules(&squeezed_256()).unwrap();
        for m in g.modules_in(Flow::Middle) {
            let w: Vec<_> = m.conv_layers().map(|l| (l.in_channels, l.out_channels)).collect();
            assert_eq!(w, [(256, 64), (64, 256), (256, 256)]);
        }
    }

    #[test]
    fn per_module_drop_matches_hand_sums() {
        // Before: 1x1 sep 256->256, 3x3 sep 256->256 twice, three BN(256).
        // After:  1x1 sep 256->64, 1x1 sep 64->256, 3x3 sep 256->256,
        //         BN(64), BN(256), BN(256).
        let before_convs = (256 + 256 * 256) + 2 * (256 * 9 + 256 * 256);
        let after_convs = (256 + 256 * 64) + (64 + 64 * 256) + (256 * 9 + 256 * 256);
        let bn_delta = 2 * (256 - 64);
        let expected_drop = (before_convs - after_convs + bn_delta) as u64;

        let base = squeezed_256();
        let fired = rewrite_fire_modules(&base).unwrap();
        let (rb, ra) = (count_params(&base).unwrap(), count_params(&fired).unwrap());
        for (&(i, f, b), &(_, _, a)) in rb.modules.iter().zip(&ra.modules) {
            if f == Flow::Middle {
                assert_eq!(b - a, expected_drop, "module {i}");
            } else if i != 13 {
                assert_eq!(a, b, "module {i}");
            }
        }
        // cross-check the per-layer formula on one rewritten module
        let m = fired.modules_in(Flow::Middle).next().unwrap();
        let sum: u64 = m.layers.iter().map(|l| layer_params(l).0).sum();
        assert_eq!(sum, (after_convs + 2 * (64 + 256 + 256)) as u64);
    }

    #[test]
    fn short_middle_module_rejected() {
        let mut g = build_xception_baseline();
        let m = g.modules.iter_mut().find(|m| m.flow == Flow::Middle).unwrap();
        let first = m.layers.iter().position(|l| l.kind == LayerKind::SeparableConv).unwrap();
        m.layers.remove(first);
        let err = rewrite_fire_modules(&g).unwrap_err();
        assert!(matches!(err, ArchError::FireModuleTooShort { found: 2, .. }));
    }

    #[test]
    fn rewritten_modules_are_stable() {
        let g = rewrite_fire_modules(&squeezed_256()).unwrap();
        assert!(matches!(rewrite_fire_modules(&g), Err(ArchError::PassAlreadyApplied { .. })));
        // without the ledger entry a second pass changes nothing
        let mut anon = g.clone();
        anon.passes.retain(|p| p.name != NAME);
        assert_eq!(rewrite_fire_modules(&anon).unwrap(), anon);
    }
}
