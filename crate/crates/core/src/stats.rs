//! Dynamic-range profiling and quantization scheme assembly.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fxp::{FixedPointFormat, MAX_ABS_FRAC_LEN, MAX_BIT_WIDTH, MIN_BIT_WIDTH};
use crate::net::{forward_float_observed, LayerSpec, Model};

/// Profiling sample count used when the caller does not pick one.
pub const DEFAULT_PROFILE_IMAGES: usize = 2000;

/// The three number groups that receive independent bit widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    ConvWeights,
    FcWeights,
    LayerOutputs,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::ConvWeights, Part::FcWeights, Part::LayerOutputs];

    pub fn name(&self) -> &'static str {
        match self {
            Part::ConvWeights => "conv_weights",
            Part::FcWeights => "fc_weights",
            Part::LayerOutputs => "layer_outputs",
        }
    }

    pub fn from_name(s: &str) -> Option<Part> {
        Part::ALL.into_iter().find(|p| p.name() == s)
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

/// Subset of [`Part`]s that a scheme casts to fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PartSet(u8);

impl PartSet {
    pub const NONE: PartSet = PartSet(0);
    pub const ALL: PartSet = PartSet(0b111);

    pub fn only(part: Part) -> Self {
        PartSet(part.bit())
    }

    pub fn contains(&self, part: Part) -> bool {
        self.0 & part.bit() != 0
    }

    pub fn with(self, part: Part) -> Self {
        PartSet(self.0 | part.bit())
    }

    pub fn iter(&self) -> impl Iterator<Item = Part> + '_ {
        Part::ALL.into_iter().filter(|p| self.contains(*p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeMode {
    /// Per-layer fractional lengths for each group.
    Dynamic,
    /// One `(B, fl)` pair for every number in the network.
    Static,
}

impl SchemeMode {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeMode::Dynamic => "dynamic",
            SchemeMode::Static => "static",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PartBits {
    pub conv_weights: u32,
    pub fc_weights: u32,
    pub layer_outputs: u32,
}

impl PartBits {
    pub fn uniform(bits: u32) -> Self {
        Self {
            conv_weights: bits,
            fc_weights: bits,
            layer_outputs: bits,
        }
    }

    pub fn get(&self, part: Part) -> u32 {
        match part {
            Part::ConvWeights => self.conv_weights,
            Part::FcWeights => self.fc_weights,
            Part::LayerOutputs => self.layer_outputs,
        }
    }

    pub fn set(&mut self, part: Part, bits: u32) {
        match part {
            Part::ConvWeights => self.conv_weights = bits,
            Part::FcWeights => self.fc_weights = bits,
            Part::LayerOutputs => self.layer_outputs = bits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerFracLens {
    pub name: String,
    pub weight: i32,
    pub output: i32,
}

/// Bit widths per part plus fractional lengths per layer and group.
///
/// The network input is quantized in the layer-output width with its own
/// fractional length, so the first layer sees grid values too.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantScheme {
    pub mode: SchemeMode,
    pub bits: PartBits,
    pub parts: PartSet,
    pub input_frac_len: i32,
    pub layers: Vec<LayerFracLens>,
}

impl QuantScheme {
    pub fn bits_for(&self, part: Part) -> u32 {
        self.bits.get(part)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerFracLens> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Same formats, but only `parts` are cast to fixed point.
    pub fn restricted_to(&self, parts: PartSet) -> Self {
        Self {
            parts,
            ..self.clone()
        }
    }

    fn fl_for(&self, name: &str) -> Result<&LayerFracLens> {
        self.layer(name)
            .ok_or_else(|| Error::MissingLayerFormat(name.into()))
    }

    /// Weight format of a conv or inner-product layer, `None` if its part is
    /// left in float.
    pub fn weight_format(&self, layer: &LayerSpec) -> Result<Option<FixedPointFormat>> {
        let part = layer
            .kind
            .weight_part()
            .ok_or_else(|| Error::NotQuantizable(layer.name.clone()))?;
        if !self.parts.contains(part) {
            return Ok(None);
        }
        let fl = self.fl_for(&layer.name)?.weight;
        FixedPointFormat::new(self.bits.get(part), fl).map(Some)
    }

    pub fn output_format(&self, name: &str) -> Result<Option<FixedPointFormat>> {
        if !self.parts.contains(Part::LayerOutputs) {
            return Ok(None);
        }
        let fl = self.fl_for(name)?.output;
        FixedPointFormat::new(self.bits.layer_outputs, fl).map(Some)
    }

    pub fn input_format(&self) -> Result<Option<FixedPointFormat>> {
        if !self.parts.contains(Part::LayerOutputs) {
            return Ok(None);
        }
        FixedPointFormat::new(self.bits.layer_outputs, self.input_frac_len).map(Some)
    }

    /// Checks internal consistency and that the scheme covers exactly the
    /// model's quantizable layers.
    pub fn validate(&self, model: &Model) -> Result<()> {
        for part in Part::ALL {
            let b = self.bits.get(part);
            if !(MIN_BIT_WIDTH..=MAX_BIT_WIDTH).contains(&b) {
                return Err(Error::InvalidBitWidth(b));
            }
        }
        let fls = self
            .layers
            .iter()
            .flat_map(|l| [l.weight, l.output])
            .chain([self.input_frac_len]);
        for fl in fls.clone() {
            if fl.abs() > MAX_ABS_FRAC_LEN {
                return Err(Error::InvalidFracLen(fl));
            }
        }
        if self.mode == SchemeMode::Static {
            let b = self.bits.conv_weights;
            if self.bits != PartBits::uniform(b) {
                return Err(Error::InvalidScheme("static scheme needs one shared bit width".into()));
            }
            let mut fls = fls;
            let first = fls.next().unwrap_or(0);
            if fls.any(|fl| fl != first) {
                return Err(Error::InvalidScheme(
                    "static scheme needs one shared fractional length".into(),
                ));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::InvalidScheme(format!("layer `{}` listed twice", l.name)));
            }
            match model.layer_index(&l.name) {
                None => return Err(Error::DanglingReference(l.name.clone())),
                Some(idx) if !model.layers()[idx].kind.is_quantizable() => {
                    return Err(Error::NotQuantizable(l.name.clone()))
                }
                Some(_) => {}
            }
        }
        for (_, l) in model.quantizable_layers() {
            self.fl_for(&l.name)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRange {
    pub name: String,
    /// Weight group of the layer.
    pub part: Part,
    pub weight_max_abs: f64,
    pub output_max_abs: Option<f64>,
}

/// Per-layer maxima of |weight| and |layer output|.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeProfile {
    pub layers: Vec<LayerRange>,
    pub input_max_abs: Option<f64>,
    pub sample_count: usize,
}

impl RangeProfile {
    pub fn layer(&self, name: &str) -> Option<&LayerRange> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn has_outputs(&self) -> bool {
        self.input_max_abs.is_some() && self.layers.iter().all(|l| l.output_max_abs.is_some())
    }

    /// Folds another profile of the same model into this one.
    pub fn merge_outputs(&mut self, other: &RangeProfile) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::IncompleteProfile("profiles of different models".into()));
        }
        let max = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.output_max_abs = max(a.output_max_abs, b.output_max_abs);
        }
        self.input_max_abs = max(self.input_max_abs, other.input_max_abs);
        self.sample_count += other.sample_count;
        Ok(())
    }
}

/// Maximum |weight| of every conv and inner-product layer; biases are not included.
pub fn analyze_weight_ranges(model: &Model) -> Result<RangeProfile> {
    let layers = model
        .quantizable_layers()
        .map(|(idx, l)| {
            let p = model.params().layer(idx).unwrap();
            if p.weight.is_empty() {
                return Err(Error::Empty("weight tensor"));
            }
            Ok(LayerRange {
                name: l.name.clone(),
                part: l.kind.weight_part().unwrap(),
                weight_max_abs: p.weight.max_abs() as f64,
                output_max_abs: None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RangeProfile {
        layers,
        input_max_abs: None,
        sample_count: 0,
    })
}

/// Output maxima from one float forward pass over `batch`, taken right after
/// bias addition (before any following nonlinearity).
pub fn observe_batch(model: &Model, batch: &crate::tensor::Tensor) -> Result<RangeProfile> {
    let mut profile = analyze_weight_ranges(model)?;
    let slots: Vec<Option<usize>> = {
        let mut next = 0;
        model
            .layers()
            .iter()
            .map(|l| {
                l.kind.is_quantizable().then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let mut maxima = alloc::vec![0.0f64; profile.layers.len()];
    forward_float_observed(model, batch, &mut |idx, y| {
        if let Some(slot) = slots[idx] {
            maxima[slot] = maxima[slot].max(y.max_abs() as f64);
        }
    })?;
    for (l, m) in profile.layers.iter_mut().zip(maxima) {
        l.output_max_abs = Some(m);
    }
    profile.input_max_abs = Some(batch.max_abs() as f64);
    profile.sample_count = batch.shape()[0];
    Ok(profile)
}

/// Runs the first `n_images` of `dataset` through the float model and records
/// output maxima for every quantizable layer.
pub fn profile_activations(
    model: &Model,
    dataset: &Dataset,
    n_images: usize,
    batch_size: usize,
) -> Result<RangeProfile> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if n_images == 0 || batch_size == 0 {
        return Err(Error::InvalidConfig("profiling needs at least one image".into()));
    }
    let n = n_images.min(dataset.len());
    let mut profile = analyze_weight_ranges(model)?;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let (images, _) = dataset.batch(start, end)?;
        profile.merge_outputs(&observe_batch(model, &images)?)?;
        start = end;
    }
    Ok(profile)
}

/// Fractional length leaving enough integer bits (sign included) that
/// `2^(il-1) > max_abs`; `max_abs == 0` gives `fl = B - 1`.
pub fn choose_frac_len(max_abs: f64, bit_width: u32) -> i32 {
    let il = if max_abs > 0.0 && max_abs.is_finite() {
        // max_abs = f * 2^e with f in [0.5, 1), so floor(lg2 max_abs) = e - 1
        let (_, e) = libm::frexp(max_abs);
        e + 1
    } else {
        1
    };
    (bit_width as i32 - il).clamp(-MAX_ABS_FRAC_LEN, MAX_ABS_FRAC_LEN)
}

/// Assembles a scheme covering all three parts from a complete profile.
pub fn build_scheme(profile: &RangeProfile, bits: PartBits, mode: SchemeMode) -> Result<QuantScheme> {
    for part in Part::ALL {
        let b = bits.get(part);
        if !(MIN_BIT_WIDTH..=MAX_BIT_WIDTH).contains(&b) {
            return Err(Error::InvalidBitWidth(b));
        }
    }
    let input_max = profile
        .input_max_abs
        .ok_or_else(|| Error::IncompleteProfile("input range not profiled".into()))?;
    let outputs = profile
        .layers
        .iter()
        .map(|l| {
            l.output_max_abs
                .ok_or_else(|| Error::IncompleteProfile(format!("no output range for `{}`", l.name)))
        })
        .collect::<Result<Vec<f64>>>()?;
    match mode {
        SchemeMode::Dynamic => Ok(QuantScheme {
            mode,
            bits,
            parts: PartSet::ALL,
            input_frac_len: choose_frac_len(input_max, bits.layer_outputs),
            layers: profile
                .layers
                .iter()
                .zip(outputs)
                .map(|(l, out)| {
                    LayerFracLens {
                        name: l.name.clone(),
                        weight: choose_frac_len(l.weight_max_abs, bits.get(l.part)),
                        output: choose_frac_len(out, bits.layer_outputs),
                    }
                })
                .collect(),
        }),
        SchemeMode::Static => {
            let b = bits.conv_weights;
            if bits != PartBits::uniform(b) {
                return Err(Error::InvalidScheme("static scheme needs one shared bit width".into()));
            }
            let global = profile
                .layers
                .iter()
                .map(|l| l.weight_max_abs)
                .chain(outputs)
                .fold(input_max, f64::max);
            let fl = choose_frac_len(global, b);
            Ok(QuantScheme {
                mode,
                bits,
                parts: PartSet::ALL,
                input_frac_len: fl,
                layers: profile
                    .layers
                    .iter()
                    .map(|l| LayerFracLens {
                        name: l.name.clone(),
                        weight: fl,
                        output: fl,
                    })
                    .collect(),
            })
        }
    }
}
