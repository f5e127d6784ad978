use super::passes::{apply_channel_reduction, apply_strategy1, rewrite_fire_modules, ChannelReduction};
use super::{count_params, ArchError, ArchGraph, Flow, InputSpec, LayerSpec, Module, ResidualLink, Result};
use crate::tensor::Padding;

/// Parameter total the squeezed graph is calibrated to.
pub const TARGET_PARAMS: u64 = 11_200_000;
/// Relative tolerance around [`TARGET_PARAMS`].
pub const TARGET_TOLERANCE: f64 = 0.10;
/// Entry-flow divisor: separable widths 128/256 become 64/128.
pub const PROPOSED_ENTRY_DIVISOR: f64 = 2.0;
/// Starting middle-flow width before calibration (728 → 256).
pub const PROPOSED_MIDDLE_WIDTH: usize = 256;
const CALIBRATION_STEP: usize = 32;
const HEAD_DROPOUT: f64 = 0.2;

/// Channel widths of the reference Xception.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct XceptionWidths {
    pub stem: [usize; 2],
    pub entry: [usize; 3],
    pub middle: usize,
    pub exit: [usize; 4],
    pub middle_modules: usize,
}

pub const BASELINE_WIDTHS: XceptionWidths = XceptionWidths {
    stem: [32, 64],
    entry: [128, 256, 728],
    middle: 728,
    exit: [728, 1024, 1536, 2048],
    middle_modules: 8,
};

struct ModuleBuilder {
    index: usize,
    layers: Vec<LayerSpec>,
    channels: usize,
    counter: [usize; 4],
}

impl ModuleBuilder {
    fn new(index: usize, channels: usize) -> Self {
        Self {
            index,
            layers: Vec::new(),
            channels,
            counter: [0; 4],
        }
    }

    fn id(&mut self, slot: usize, stem: &str) -> String {
        self.counter[slot] += 1;
        format!("m{:02}.{}{}", self.index, stem, self.counter[slot])
    }

    fn conv(mut self, out: usize, stride: usize, padding: Padding) -> Self {
        let id = self.id(0, "conv");
        self.layers.push(LayerSpec::conv(id, self.channels, out, 3, stride, padding));
        self.channels = out;
        self
    }

    fn sep(mut self, out: usize) -> Self {
        let id = self.id(0, "sep");
        self.layers.push(LayerSpec::separable(id, self.channels, out, 3));
        self.channels = out;
        self
    }

    fn bn(mut self) -> Self {
        let id = self.id(1, "bn");
        self.layers.push(LayerSpec::batch_norm(id, self.channels));
        self
    }

    fn relu(mut self) -> Self {
        let id = self.id(2, "relu");
        self.layers.push(LayerSpec::relu(id, self.channels));
        self
    }

    fn pool(mut self) -> Self {
        let id = format!("m{:02}.pool", self.index);
        let mut l = LayerSpec::max_pool(id, self.channels, 3, 2);
        l.padding = Padding::Same;
        self.layers.push(l);
        self
    }

    fn finish(self, flow: Flow) -> (Module, usize) {
        (
            Module {
                index: self.index,
                flow,
                layers: self.layers,
            },
            self.channels,
        )
    }
}

fn projection(index: usize, n: usize, m: usize) -> ResidualLink {
    ResidualLink {
        from: index,
        to: index + 1,
        projection: vec![
            LayerSpec::conv(format!("m{index:02}.res.conv"), n, m, 1, 2, Padding::Same),
            LayerSpec::batch_norm(format!("m{index:02}.res.bn"), m),
        ],
    }
}

/// Xception with the given widths: a two-convolution stem, three
/// downsampling entry modules, a stack of identical middle modules and two
/// exit modules, followed by the binary classification head.
pub fn xception_graph(w: &XceptionWidths) -> ArchGraph {
    let mut modules = Vec::new();
    let mut residuals = Vec::new();

    let (m, mut c) = ModuleBuilder::new(1, 3)
        .conv(w.stem[0], 2, Padding::Valid)
        .bn()
        .relu()
        .conv(w.stem[1], 1, Padding::Valid)
        .bn()
        .relu()
        .finish(Flow::Entry);
    modules.push(m);

    for (i, &width) in w.entry.iter().enumerate() {
        let index = 2 + i;
        let b = ModuleBuilder::new(index, c);
        // the first entry module follows a relu already
        let b = if i == 0 { b } else { b.relu() };
        let (m, out) = b.sep(width).bn().relu().sep(width).bn().pool().finish(Flow::Entry);
        residuals.push(projection(index, c, out));
        modules.push(m);
        c = out;
    }

    for k in 0..w.middle_modules {
        let index = 5 + k;
        let (m, out) = ModuleBuilder::new(index, c)
            .relu()
            .sep(w.middle)
            .bn()
            .relu()
            .sep(w.middle)
            .bn()
            .relu()
            .sep(w.middle)
            .bn()
            .finish(Flow::Middle);
        residuals.push(ResidualLink {
            from: index,
            to: index + 1,
            projection: Vec::new(),
        });
        modules.push(m);
        c = out;
    }

    let index = 5 + w.middle_modules;
    let (m, out) = ModuleBuilder::new(index, c)
        .relu()
        .sep(w.exit[0])
        .bn()
        .relu()
        .sep(w.exit[1])
        .bn()
        .pool()
        .finish(Flow::Exit);
    residuals.push(projection(index, c, out));
    modules.push(m);
    c = out;

    let (m, c) = ModuleBuilder::new(index + 1, c)
        .sep(w.exit[2])
        .bn()
        .relu()
        .sep(w.exit[3])
        .bn()
        .relu()
        .finish(Flow::Exit);
    modules.push(m);

    let head = vec![
        LayerSpec::global_avg_pool("head.gap", c),
        LayerSpec::dropout("head.dropout", c, HEAD_DROPOUT),
        LayerSpec::dense("head.dense", c, 1),
        LayerSpec::sigmoid("head.sigmoid", 1),
    ];

    ArchGraph {
        input: InputSpec::default(),
        modules,
        residuals,
        head,
        passes: Vec::new(),
    }
}

/// Reference Xception: 14 modules, residual links around modules 2–13.
pub fn build_xception_baseline() -> ArchGraph {
    xception_graph(&BASELINE_WIDTHS)
}

/// How the middle-flow width of the squeezed graph was chosen.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub middle_width: usize,
    pub total: u64,
    pub target: u64,
    pub lo: u64,
    pub hi: u64,
    /// Every `(middle width, total)` evaluated, in search order.
    pub tried: Vec<(usize, u64)>,
}

impl Calibration {
    pub fn note(&self) -> String {
        let tried = self
            .tried
            .iter()
            .map(|(w, t)| format!("{w}:{t}"))
            .collect::<Vec<_>>()
            .join(" ");
        format!(
            "calibrated middle-flow width {} (start {}, step {}) -> total {} within [{}, {}]; tried {}",
            self.middle_width, PROPOSED_MIDDLE_WIDTH, CALIBRATION_STEP, self.total, self.lo, self.hi, tried
        )
    }
}

fn squeeze_with_middle(strategy1: &ArchGraph, middle_width: usize) -> Result<ArchGraph> {
    let factors = ChannelReduction {
        entry: PROPOSED_ENTRY_DIVISOR,
        middle: BASELINE_WIDTHS.middle as f64 / middle_width as f64,
    };
    let reduced = apply_channel_reduction(strategy1, &factors)?;
    rewrite_fire_modules(&reduced)
}

/// Runs the squeeze pipeline (strategy 1 → channel reduction → fire
/// modules) and picks the middle-flow width.
///
/// The starting width is [`PROPOSED_MIDDLE_WIDTH`]. If its total misses
/// the target band, widths are searched in steps of 32 up to the baseline
/// width and the in-band width closest to [`TARGET_PARAMS`] wins (ties go to
/// the narrower width).
pub fn calibrate_proposed() -> Result<(ArchGraph, Calibration)> {
    let target = TARGET_PARAMS;
    let lo = (target as f64 * (1.0 - TARGET_TOLERANCE)).round() as u64;
    let hi = (target as f64 * (1.0 + TARGET_TOLERANCE)).round() as u64;
    let s1 = apply_strategy1(&build_xception_baseline())?;

    let mut tried = Vec::new();
    let start = squeeze_with_middle(&s1, PROPOSED_MIDDLE_WIDTH)?;
    let start_total = count_params(&start)?.total;
    tried.push((PROPOSED_MIDDLE_WIDTH, start_total));
    let mut best = (PROPOSED_MIDDLE_WIDTH, start_total, start);

    if !(lo..=hi).contains(&start_total) {
        let candidates: Vec<usize> = if start_total < lo {
            (PROPOSED_MIDDLE_WIDTH + CALIBRATION_STEP..=BASELINE_WIDTHS.middle)
                .step_by(CALIBRATION_STEP)
                .collect()
        } else {
            (CALIBRATION_STEP..PROPOSED_MIDDLE_WIDTH)
                .step_by(CALIBRATION_STEP)
                .rev()
                .collect()
        };
        for width in candidates {
            let g = squeeze_with_middle(&s1, width)?;
            let total = count_params(&g)?.total;
            tried.push((width, total));
            let better = !(lo..=hi).contains(&best.1) || total.abs_diff(target) < best.1.abs_diff(target);
            if (lo..=hi).contains(&total) && better {
                best = (width, total, g);
            }
        }
    }
    let (middle_width, total, graph) = best;
    if !(lo..=hi).contains(&total) {
        return Err(ArchError::Calibration {
            achieved: total,
            width: middle_width,
            lo,
            hi,
        });
    }
    Ok((
        graph,
        Calibration {
            middle_width,
            total,
            target,
            lo,
            hi,
            tried,
        },
    ))
}

/// The squeezed Xception: baseline → strategy 1 → channel reduction with
/// the calibrated middle width → fire-module rewrite of the middle flow.
pub fn build_proposed() -> Result<ArchGraph> {
    calibrate_proposed().map(|(g, _)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{validate, FeatureShape, LayerKind};

    #[test]
    fn baseline_has_fourteen_modules() {
        let g = build_xception_baseline();
        assert_eq!(g.modules.len(), 14);
        let mut linked: Vec<usize> = g.residuals.iter().map(|r| r.from).collect();
        linked.sort_unstable();
        assert_eq!(linked, (2..=13).collect::<Vec<_>>());
        assert_eq!(g.modules_in(Flow::Entry).count(), 4);
        assert_eq!(g.modules_in(Flow::Middle).count(), 8);
        assert_eq!(g.modules_in(Flow::Exit).count(), 2);
    }

    #[test]
    fn baseline_has_thirty_six_convolutions() {
        let g = build_xception_baseline();
        let convs: usize = g.modules.iter().map(|m| m.conv_layers().count()).sum();
        assert_eq!(convs, 36);
    }

    #[test]
    fn baseline_reaches_single_sigmoid() {
        let table = validate(&build_xception_baseline()).unwrap();
        assert_eq!(table.output, FeatureShape::Vector { n: 1 });
        assert_eq!(table.rows.last().unwrap().kind, LayerKind::Sigmoid);
    }

    #[test]
    fn baseline_matches_keras_reference_count() {
        // Keras reports 20,806,952 trainable parameters for the
        // convolutional base; the head adds 2048 weights and one bias.
        let r = count_params(&build_xception_baseline()).unwrap();
        assert_eq!(r.total, 20_806_952 + 2_049);
    }

    #[test]
    fn proposed_is_calibrated_into_band() {
        let (g, cal) = calibrate_proposed().unwrap();
        assert!((cal.lo..=cal.hi).contains(&cal.total));
        assert_eq!(count_params(&g).unwrap().total, cal.total);
        assert_eq!(cal.tried[0].0, PROPOSED_MIDDLE_WIDTH);
        assert_eq!(cal.middle_width % 32, 0);
        validate(&g).unwrap();
    }
}
