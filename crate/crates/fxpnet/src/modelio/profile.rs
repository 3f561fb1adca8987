//! Range profile text dump.
//!
//! ```text
//! fxpnet-profile 1
//! samples 2000
//! input 2.8215
//! layer conv1 conv_weights weight 0.7312 output 5.125
//! ```
//!
//! `output -` marks a layer whose outputs were not profiled.

use std::fmt::Write as _;

use fxpnet_core::stats::LayerRange;
use fxpnet_core::{Part, RangeProfile};
use sha2::{Digest, Sha256};

use super::Lines;
use crate::error::Result;

pub const FORMAT: &str = "fxpnet-profile";
pub const VERSION: u32 = 1;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

pub fn profile_to_text(p: &RangeProfile) -> String {
    let mut s = format!("{FORMAT} {VERSION}\nsamples {}\ninput {}\n", p.sample_count, opt(p.input_max_abs));
    for l in &p.layers {
        writeln!(
            s,
            "layer {} {} weight {} output {}",
            l.name,
            l.part.name(),
            l.weight_max_abs,
            opt(l.output_max_abs)
        )
        .unwrap();
    }
    s
}

/// Hex SHA-256 of the text dump; identifies the statistics a scheme was built from.
pub fn profile_sha256(p: &RangeProfile) -> String {
    let digest = Sha256::digest(profile_to_text(p).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn parse_profile(text: &str) -> Result<RangeProfile> {
    let mut lines = Lines::new(FORMAT, text);
    lines.header(VERSION)?;
    let mut profile = RangeProfile {
        layers: Vec::new(),
        input_max_abs: None,
        sample_count: 0,
    };
    let parse_opt = |lines: &Lines<'_>, line, tok: &str| -> Result<Option<f64>> {
        if tok == "-" {
            Ok(None)
        } else {
            lines.parse(line, tok).map(Some)
        }
    };
    while let Some((line, toks)) = lines.next() {
        match toks[0] {
            "samples" => {
                lines.arity(line, &toks, 2)?;
                profile.sample_count = lines.parse(line, toks[1])?;
            }
            "input" => {
                lines.arity(line, &toks, 2)?;
                profile.input_max_abs = parse_opt(&lines, line, toks[1])?;
            }
            "layer" => {
                lines.arity(line, &toks, 7)?;
                if toks[3] != "weight" || toks[5] != "output" {
                    return Err(lines.err(line, "expected `layer NAME PART weight X output Y`"));
                }
                let part = Part::from_name(toks[2]).ok_or_else(|| lines.err(line, format!("unknown part `{}`", toks[2])))?;
                profile.layers.push(LayerRange {
                    name: toks[1].into(),
                    part,
                    weight_max_abs: lines.parse(line, toks[4])?,
                    output_max_abs: parse_opt(&lines, line, toks[6])?,
                });
            }
            other => return Err(lines.err(line, format!("unknown key `{other}`"))),
        }
    }
    Ok(profile)
}
