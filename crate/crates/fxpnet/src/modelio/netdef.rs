//! Network definition text format.
//!
//! ```text
//! fxpnet-netdef 1
//! input 1 28 28
//! meta final_lr 0.00003125
//! layer conv1
//!   kind convolution
//!   num_output 20
//!   kernel 5
//!   stride 1
//!   pad 0
//! end
//! ```
//!
//! `stride` defaults to 1 and `pad` to 0. `meta` lines carry free-form
//! key/value pairs such as the training learning rate or input normalization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use fxpnet_core::data::Normalization;
use fxpnet_core::{LayerKind, LayerSpec, Model};

use super::{read_text, write_bytes, Lines};
use crate::error::{Error, Result};

pub const FORMAT: &str = "fxpnet-netdef";
pub const VERSION: u32 = 1;

pub const META_FINAL_LR: &str = "final_lr";
pub const META_NORM_MEAN: &str = "norm_mean";
pub const META_NORM_STD: &str = "norm_std";

#[derive(Debug, Clone, PartialEq)]
pub struct NetDef {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub meta: BTreeMap<String, String>,
}

impl NetDef {
    pub fn from_model(model: &Model) -> Self {
        Self {
            input_shape: model.input_shape(),
            layers: model.layers().to_vec(),
            meta: BTreeMap::new(),
        }
    }

    /// Builds the model with zeroed parameters.
    pub fn model(&self) -> Result<Model> {
        Ok(Model::new(self.input_shape, self.layers.clone())?)
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta_f64(&self, key: &str) -> Result<Option<f64>> {
        self.meta
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Usage(format!("netdef meta `{key}` is not a number: `{v}`")))
            })
            .transpose()
    }

    /// Input normalization recorded in the metadata, MNIST statistics otherwise.
    pub fn normalization(&self) -> Result<Normalization> {
        let d = Normalization::default();
        Ok(Normalization {
            mean: self.meta_f64(META_NORM_MEAN)?.map_or(d.mean, |v| v as f32),
            std: self.meta_f64(META_NORM_STD)?.map_or(d.std, |v| v as f32),
        })
    }

    pub fn set_normalization(&mut self, norm: Normalization) {
        self.set_meta(META_NORM_MEAN, norm.mean);
        self.set_meta(META_NORM_STD, norm.std);
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{FORMAT} {VERSION}\n");
        let [c, h, w] = self.input_shape;
        writeln!(s, "input {c} {h} {w}").unwrap();
        for (k, v) in &self.meta {
            writeln!(s, "meta {k} {v}").unwrap();
        }
        for l in &self.layers {
            writeln!(s, "layer {}", l.name).unwrap();
            writeln!(s, "  kind {}", l.kind.type_name()).unwrap();
            match l.kind {
                LayerKind::Convolution { num_output, kernel, stride, pad } => {
                    writeln!(s, "  num_output {num_output}\n  kernel {kernel}\n  stride {stride}\n  pad {pad}").unwrap();
                }
                LayerKind::InnerProduct { num_output } => writeln!(s, "  num_output {num_output}").unwrap(),
                LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                    writeln!(s, "  kernel {kernel}\n  stride {stride}").unwrap();
                }
                LayerKind::ReLU | LayerKind::SoftmaxLoss => {}
            }
            s.push_str("end\n");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Lines::new(FORMAT, text);
        lines.header(VERSION)?;
        let mut input = None;
        let mut meta = BTreeMap::new();
        let mut layers = Vec::new();
        let mut open: Option<(usize, String, Fields)> = None;
        while let Some((line, toks)) = lines.next() {
            if let Some((start, name, fields)) = &mut open {
                if toks[0] == "end" {
                    lines.arity(line, &toks, 1)?;
                    let (start, name, fields) = (*start, std::mem::take(name), std::mem::take(fields));
                    layers.push(layer_from_fields(&lines, start, name, fields)?);
                    open = None;
                } else {
                    lines.arity(line, &toks, 2)?;
                    if fields.insert(toks[0].into(), (line, toks[1].into())).is_some() {
                        return Err(lines.err(line, format!("`{}` given twice", toks[0])));
                    }
                }
                continue;
            }
            match toks[0] {
                "input" => {
                    lines.arity(line, &toks, 4)?;
                    if input.is_some() {
                        return Err(lines.err(line, "`input` given twice"));
                    }
                    input = Some([
                        lines.parse(line, toks[1])?,
                        lines.parse(line, toks[2])?,
                        lines.parse(line, toks[3])?,
                    ]);
                }
                "meta" => {
                    lines.arity(line, &toks, 3)?;
                    meta.insert(toks[1].to_string(), toks[2].to_string());
                }
                "layer" => {
                    lines.arity(line, &toks, 2)?;
                    open = Some((line, toks[1].into(), BTreeMap::new()));
                }
                other => return Err(lines.err(line, format!("unknown key `{other}`"))),
            }
        }
        if let Some((start, name, _)) = open {
            return Err(lines.err(start, format!("layer `{name}` has no `end`")));
        }
        let input_shape = input.ok_or_else(|| lines.err(1, "missing `input`"))?;
        let def = Self {
            input_shape,
            layers,
            meta,
        };
        def.model()?;
        Ok(def)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_text())
    }
}

/// Field name to (line, value) within one layer block.
type Fields = BTreeMap<String, (usize, String)>;

fn layer_from_fields(lines: &Lines<'_>, start: usize, name: String, mut fields: Fields) -> Result<LayerSpec> {
    let Some((_, kind_name)) = fields.remove("kind") else {
        return Err(lines.err(start, format!("layer `{name}` needs `kind`")));
    };
    let mut take = |key: &str, default: Option<usize>| -> Result<usize> {
        match fields.remove(key) {
            Some((line, v)) => lines.parse(line, &v),
            None => default.ok_or_else(|| lines.err(start, format!("layer `{name}` needs `{key}`"))),
        }
    };
    let kind = match kind_name.as_str() {
        "convolution" => LayerKind::Convolution {
            num_output: take("num_output", None)?,
            kernel: take("kernel", None)?,
            stride: take("stride", Some(1))?,
            pad: take("pad", Some(0))?,
        },
        "inner_product" => LayerKind::InnerProduct {
            num_output: take("num_output", None)?,
        },
        "relu" => LayerKind::ReLU,
        "max_pool" => LayerKind::MaxPool {
            kernel: take("kernel", None)?,
            stride: take("stride", Some(1))?,
        },
        "avg_pool" => LayerKind::AvgPool {
            kernel: take("kernel", None)?,
            stride: take("stride", Some(1))?,
        },
        "softmax_loss" => LayerKind::SoftmaxLoss,
        other => return Err(lines.err(start, format!("unknown layer kind `{other}`"))),
    };
    if let Some((key, (line, _))) = fields.into_iter().next() {
        return Err(lines.err(line, format!("unknown key `{key}` for {kind_name} layer")));
    }
    Ok(LayerSpec::new(name, kind))
}
