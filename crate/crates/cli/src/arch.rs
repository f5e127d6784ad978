use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{ArgGroup, Subcommand};
use edgefire::arch::{
    build_xception_baseline, calibrate_proposed, count_params, group_thousands, ChannelReduction, PassRegistry,
    BASELINE_WIDTHS, PROPOSED_ENTRY_DIVISOR,
};

use crate::usage;

#[derive(Subcommand)]
pub enum ArchCmd {
    /// Parameter table by module, flow and head.
    #[command(group(ArgGroup::new("which").required(true).args(["baseline", "proposed"])))]
    Describe {
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        proposed: bool,
        /// List every parameterized layer under its module.
        #[arg(long)]
        layers: bool,
    },
    /// Apply the rewrite passes one at a time and write the ledger.
    Squeeze {
        #[arg(long)]
        out: PathBuf,
    },
}

pub const SQUEEZE_PASSES: [&str; 3] = ["strategy1", "channel-reduce", "fire"];

pub fn run(cmd: ArchCmd) -> Result<()> {
    match cmd {
        ArchCmd::Describe { baseline, layers, .. } => {
            let (name, graph, note) = if baseline {
                ("baseline Xception", build_xception_baseline(), None)
            } else {
                let (g, cal) = calibrate_proposed()?;
                ("proposed squeezed Xception", g, Some(cal.note()))
            };
            let report = count_params(&graph)?;
            let i = graph.input;
            println!("{name}: {} modules, input {}x{}x{}", graph.modules.len(), i.height, i.width, i.channels);
            print!("{}", report.render_table(layers));
            if let Some(note) = note {
                println!("{note}");
            }
            Ok(())
        }
        ArchCmd::Squeeze { out } => {
            if out.is_file() {
                return Err(usage(format!("--out {} is a file", out.display())));
            }
            let (_, cal) = calibrate_proposed()?;
            let reduction = ChannelReduction {
                entry: PROPOSED_ENTRY_DIVISOR,
                middle: BASELINE_WIDTHS.middle as f64 / cal.middle_width as f64,
            };
            let base = build_xception_baseline();
            let steps = PassRegistry::with_defaults(reduction).run(&base, &SQUEEZE_PASSES)?;

            let mut rows = vec![("baseline".to_string(), count_params(&base)?.total)];
            for (name, g) in &steps {
                rows.push((name.clone(), count_params(g)?.total));
            }
            let mut text = format!("{:<16} {:>12} {:>12} {:>8}\n", "pass", "total", "removed", "ratio");
            let mut csv = String::from("pass,total,removed\n");
            let mut prev = None;
            for (name, total) in &rows {
                let (removed, ratio) = match prev {
                    Some(p) => (group_thousands(p - total), format!("{:.3}", *total as f64 / p as f64)),
                    None => ("-".into(), "-".into()),
                };
                let _ = writeln!(text, "{name:<16} {:>12} {removed:>12} {ratio:>8}", group_thousands(*total));
                let _ = writeln!(csv, "{name},{total},{}", prev.map_or(0, |p: u64| p - total));
                prev = Some(*total);
            }
            let _ = writeln!(text, "{}", cal.note());

            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("squeeze_ledger.txt"), &text)?;
            fs::write(out.join("squeeze_ledger.csv"), csv)?;
            let (_, last) = steps.last().expect("three passes");
            fs::write(out.join("proposed.arch"), last.to_text())?;
            print!("{text}");
            Ok(())
        }
    }
}
