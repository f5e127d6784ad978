//! Line-oriented text form of an [`ArchGraph`]. One record per line:
//!
//! ```text
//! arch 1
//! input 3 224 224
//! pass strategy1 0f3c9a...
//! module 2 entry
//! layer m02.sep1 separable_conv in=64 out=128 kernel=3x3 stride=1 padding=same
//! residual 2 3
//! layer m02.res.conv conv in=64 out=128 kernel=1x1 stride=2 padding=same
//! head
//! layer head.dense dense in=2048 out=1 stride=1 padding=same
//! ```
//!
//! `layer` lines attach to the most recent `module`, `residual` or `head`
//! line. Blank lines and `#` comments are ignored.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::{ArchError, ArchGraph, InputSpec, LayerSpec, Module, PassRecord, ResidualLink, Result};

const MAGIC: &str = "arch";
const VERSION: u32 = 1;

fn write_layer(out: &mut String, l: &LayerSpec) {
    let _ = write!(
        out,
        "layer {} {} in={} out={}",
        l.id, l.kind, l.in_channels, l.out_channels
    );
    if let Some((h, w)) = l.kernel {
        let _ = write!(out, " kernel={h}x{w}");
    }
    if let Some(w) = l.window {
        let _ = write!(out, " window={w}");
    }
    let _ = write!(out, " stride={} padding={}", l.stride, l.padding);
    if let Some(r) = l.rate {
        let _ = write!(out, " rate={r}");
    }
    out.push('\n');
}

pub(super) fn write(g: &ArchGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "input {} {} {}", g.input.channels, g.input.height, g.input.width);
    for p in &g.passes {
        let _ = writeln!(out, "pass {} {}", p.name, p.fingerprint);
    }
    for m in &g.modules {
        let _ = writeln!(out, "module {} {}", m.index, m.flow);
        for l in &m.layers {
            write_layer(&mut out, l);
        }
    }
    for r in &g.residuals {
        let _ = writeln!(out, "residual {} {}", r.from, r.to);
        for l in &r.projection {
            write_layer(&mut out, l);
        }
    }
    out.push_str("head\n");
    for l in &g.head {
        write_layer(&mut out, l);
    }
    out
}

enum Target {
    None,
    Module,
    Residual,
    Head,
}

fn num<T: std::str::FromStr>(line: usize, what: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| ArchError::Parse {
        line,
        detail: format!("bad {what} `{s}`"),
    })
}

fn parse_layer(line: usize, fields: &[&str]) -> Result<LayerSpec> {
    let err = |detail: String| ArchError::Parse { line, detail };
    let [id, kind, rest @ ..] = fields else {
        return Err(err("layer needs an id and a kind".into()));
    };
    let kind = kind.parse().map_err(|e: String| err(e))?;
    let mut l = LayerSpec::relu(*id, 0);
    l.kind = kind;
    let (mut seen_in, mut seen_out) = (false, false);
    for kv in rest {
        let (k, v) = kv.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{kv}`")))?;
        match k {
            "in" => {
                l.in_channels = num(line, k, v)?;
                seen_in = true;
            }
            "out" => {
                l.out_channels = num(line, k, v)?;
                seen_out = true;
            }
            "kernel" => {
                let (h, w) = v.split_once('x').ok_or_else(|| err(format!("bad kernel `{v}`")))?;
                l.kernel = Some((num(line, k, h)?, num(line, k, w)?));
            }
            "window" => l.window = Some(num(line, k, v)?),
            "stride" => l.stride = num(line, k, v)?,
            "padding" => l.padding = v.parse().map_err(|e: String| err(e))?,
            "rate" => l.rate = Some(num(line, k, v)?),
            _ => return Err(err(format!("unknown layer key `{k}`"))),
        }
    }
    if !(seen_in && seen_out) {
        return Err(err(format!("layer `{id}` needs in= and out=")));
    }
    Ok(l)
}

pub(super) fn parse(src: &str) -> Result<ArchGraph> {
    let mut g = ArchGraph {
        input: InputSpec::default(),
        modules: Vec::new(),
        residuals: Vec::new(),
        head: Vec::new(),
        passes: Vec::new(),
    };
    let mut target = Target::None;
    let mut header = false;
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let text = raw.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        let err = |detail: String| ArchError::Parse { line, detail };
        if !header {
            match fields.as_slice() {
                [MAGIC, v] if num::<u32>(line, "version", v)? == VERSION => header = true,
                _ => return Err(err(format!("expected `{MAGIC} {VERSION}` header"))),
            }
            continue;
        }
        match fields.as_slice() {
            ["input", c, h, w] => {
                g.input = InputSpec {
                    channels: num(line, "channels", c)?,
                    height: num(line, "height", h)?,
                    width: num(line, "width", w)?,
                }
            }
            ["pass", name, fp] => g.passes.push(PassRecord {
                name: name.to_string(),
                fingerprint: fp.to_string(),
            }),
            ["module", idx, flow] => {
                g.modules.push(Module {
                    index: num(line, "module index", idx)?,
                    flow: flow.parse().map_err(|e: String| err(e))?,
                    layers: Vec::new(),
                });
                target = Target::Module;
            }
            ["residual", from, to] => {
                g.residuals.push(ResidualLink {
                    from: num(line, "boundary", from)?,
                    to: num(line, "boundary", to)?,
                    projection: Vec::new(),
                });
                target = Target::Residual;
            }
            ["head"] => target = Target::Head,
            ["layer", rest @ ..] => {
                let l = parse_layer(line, rest)?;
                match target {
                    Target::Module => g.modules.last_mut().expect("module seen").layers.push(l),
                    Target::Residual => g.residuals.last_mut().expect("residual seen").projection.push(l),
                    Target::Head => g.head.push(l),
                    Target::None => return Err(err("layer outside a module, residual or head".into())),
                }
            }
            _ => return Err(err(format!("unrecognised record `{text}`"))),
        }
    }
    if !header {
        return Err(ArchError::Parse {
            line: 0,
            detail: "empty input".into(),
        });
    }
    Ok(g)
}

pub(super) fn hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub(super) fn hash_hex(text: &str) -> String {
    hash(text).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_xception_baseline, validate};

    #[test]
    fn round_trip_baseline() {
        let g = build_xception_baseline();
        let text = g.to_text();
        let back = ArchGraph::from_text(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.content_hash(), g.content_hash());
        validate(&back).unwrap();
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let g = build_xception_baseline();
        let text = format!("# saved graph\n\n{}", g.to_text().replace("head\n", "head # classifier\n"));
        assert_eq!(ArchGraph::from_text(&text).unwrap(), g);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ArchGraph::from_text("arch 1\ninput 3 224 224\nlayer x relu in=1 out=1\n").unwrap_err();
        assert!(matches!(err, ArchError::Parse { line: 3, .. }), "{err}");
        let err = ArchGraph::from_text("arch 1\nmodule 1 entry\nlayer x blob in=1 out=1\n").unwrap_err();
        assert!(matches!(err, ArchError::Parse { line: 3, .. }));
        assert!(ArchGraph::from_text("graph 2\n").is_err());
        assert!(ArchGraph::from_text("").is_err());
    }

    #[test]
    fn hash_is_stable_hex() {
        let h = hash_hex("abc");
        assert_eq!(h, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
