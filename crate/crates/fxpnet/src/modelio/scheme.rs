//! Quantization scheme text format.
//!
//! ```text
//! fxpnet-scheme 1
//! mode dynamic
//! parts conv_weights fc_weights layer_outputs
//! bits conv_weights 4
//! bits fc_weights 4
//! bits layer_outputs 4
//! input_fl 2
//! layer conv1 weight_fl 5 output_fl 0
//! profile_sha256 3f1a...
//! budget 1
//! trace conv_weights 9:99.1 5:99.05 3:98.2 4:99
//! note widened fc_weights after the combined check
//! ```
//!
//! Everything after `input_fl`/`layer` lines is provenance and optional.

use std::fmt::Write as _;
use std::path::Path;

use fxpnet_core::quantflow::Probe;
use fxpnet_core::stats::{LayerFracLens, PartBits};
use fxpnet_core::{Model, Part, PartSet, QuantScheme, SchemeMode};

use super::{read_text, write_bytes, Lines};
use crate::error::Result;

pub const FORMAT: &str = "fxpnet-scheme";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub profile_sha256: Option<String>,
    pub budget: Option<f64>,
    /// Search trace per part (`"shared"` for a single shared width).
    pub traces: Vec<(String, Vec<Probe>)>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeFile {
    pub scheme: QuantScheme,
    pub provenance: Provenance,
}

fn mode_from(s: &str) -> Option<SchemeMode> {
    match s {
        "dynamic" => Some(SchemeMode::Dynamic),
        "static" => Some(SchemeMode::Static),
        _ => None,
    }
}

impl SchemeFile {
    pub fn new(scheme: QuantScheme) -> Self {
        Self {
            scheme,
            provenance: Provenance::default(),
        }
    }

    pub fn to_text(&self) -> String {
        let s = &self.scheme;
        let mut out = format!("{FORMAT} {VERSION}\nmode {}\n", s.mode.name());
        let parts: Vec<&str> = s.parts.iter().map(|p| p.name()).collect();
        let parts = if parts.is_empty() { "none".to_string() } else { parts.join(" ") };
        writeln!(out, "parts {parts}").unwrap();
        for p in Part::ALL {
            writeln!(out, "bits {} {}", p.name(), s.bits.get(p)).unwrap();
        }
        writeln!(out, "input_fl {}", s.input_frac_len).unwrap();
        for l in &s.layers {
            writeln!(out, "layer {} weight_fl {} output_fl {}", l.name, l.weight, l.output).unwrap();
        }
        let p = &self.provenance;
        if let Some(h) = &p.profile_sha256 {
            writeln!(out, "profile_sha256 {h}").unwrap();
        }
        if let Some(b) = p.budget {
            writeln!(out, "budget {b}").unwrap();
        }
        for (part, trace) in &p.traces {
            write!(out, "trace {part}").unwrap();
            for pr in trace {
                write!(out, " {}:{}", pr.bits, pr.accuracy).unwrap();
            }
            out.push('\n');
        }
        for n in &p.notes {
            writeln!(out, "note {}", n.replace(['\n', '#'], " ")).unwrap();
        }
        out
    }

    /// Parses the text; layer names are not checked against any model.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Lines::new(FORMAT, text);
        lines.header(VERSION)?;
        let mut mode = None;
        let mut parts = None;
        let mut bits: [Option<u32>; 3] = [None; 3];
        let mut input_fl = None;
        let mut layers = Vec::new();
        let mut prov = Provenance::default();
        while let Some((line, toks)) = lines.next() {
            match toks[0] {
                "mode" => {
                    lines.arity(line, &toks, 2)?;
                    mode = Some(mode_from(toks[1]).ok_or_else(|| lines.err(line, format!("unknown mode `{}`", toks[1])))?);
                }
                "parts" => {
                    let mut set = PartSet::NONE;
                    if toks[1..] != ["none"] {
                        for t in &toks[1..] {
                            let p = Part::from_name(t).ok_or_else(|| lines.err(line, format!("unknown part `{t}`")))?;
                            set = set.with(p);
                        }
                    }
                    parts = Some(set);
                }
                "bits" => {
                    lines.arity(line, &toks, 3)?;
                    let p = Part::from_name(toks[1]).ok_or_else(|| lines.err(line, format!("unknown part `{}`", toks[1])))?;
                    bits[p as usize] = Some(lines.parse(line, toks[2])?);
                }
                "input_fl" => {
                    lines.arity(line, &toks, 2)?;
                    input_fl = Some(lines.parse(line, toks[1])?);
                }
                "layer" => {
                    lines.arity(line, &toks, 6)?;
                    if toks[2] != "weight_fl" || toks[4] != "output_fl" {
                        return Err(lines.err(line, "expected `layer NAME weight_fl N output_fl N`"));
                    }
                    layers.push(LayerFracLens {
                        name: toks[1].into(),
                        weight: lines.parse(line, toks[3])?,
                        output: lines.parse(line, toks[5])?,
                    });
                }
                "profile_sha256" => {
                    lines.arity(line, &toks, 2)?;
                    prov.profile_sha256 = Some(toks[1].into());
                }
                "budget" => {
                    lines.arity(line, &toks, 2)?;
                    prov.budget = Some(lines.parse(line, toks[1])?);
                }
                "trace" => {
                    if toks.len() < 2 {
                        return Err(lines.err(line, "`trace` needs a part name"));
                    }
                    let probes = toks[2..]
                        .iter()
                        .map(|t| {
                            let (b, a) = t.split_once(':').ok_or_else(|| lines.err(line, format!("bad probe `{t}`")))?;
                            Ok(Probe {
                                bits: lines.parse(line, b)?,
                                accuracy: lines.parse(line, a)?,
                            })
                        })
                        .collect::<Result<_>>()?;
                    prov.traces.push((toks[1].into(), probes));
                }
                "note" => prov.notes.push(toks[1..].join(" ")),
                other => return Err(lines.err(line, format!("unknown key `{other}`"))),
            }
        }
        let missing = |what: &str| lines.err(1, format!("missing `{what}`"));
        let get_bits = |p: Part| bits[p as usize].ok_or_else(|| missing(&format!("bits {}", p.name())));
        let scheme = QuantScheme {
            mode: mode.ok_or_else(|| missing("mode"))?,
            bits: PartBits {
                conv_weights: get_bits(Part::ConvWeights)?,
                fc_weights: get_bits(Part::FcWeights)?,
                layer_outputs: get_bits(Part::LayerOutputs)?,
            },
            parts: parts.ok_or_else(|| missing("parts"))?,
            input_frac_len: input_fl.ok_or_else(|| missing("input_fl"))?,
            layers,
        };
        Ok(Self {
            scheme,
            provenance: prov,
        })
    }

    /// Parses and checks the scheme against `model`.
    pub fn parse_for(text: &str, model: &Model) -> Result<Self> {
        let f = Self::parse(text)?;
        f.scheme.validate(model)?;
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn load_for(path: &Path, model: &Model) -> Result<Self> {
        Self::parse_for(&read_text(path)?, model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_text())
    }
}
