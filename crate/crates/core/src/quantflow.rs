//! Condensation flow: weight analysis, activation profiling, a binary search
//! for the bit width of each part, and a combined re-check.
//!
//! Fine-tuning is the last stage and lives in [`crate::finetune`].

use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::Evaluator;
use crate::fxp::{MAX_BIT_WIDTH, MIN_BIT_WIDTH};
use crate::net::Model;
use crate::stats::{
    analyze_weight_ranges, build_scheme, profile_activations, Part, PartBits, PartSet, QuantScheme, RangeProfile,
    SchemeMode, DEFAULT_PROFILE_IMAGES,
};

/// Largest accepted drop in top-1 accuracy (absolute percentage points)
/// relative to a float baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToleranceBudget {
    pub max_accuracy_drop: f64,
    pub baseline_accuracy: f64,
}

impl ToleranceBudget {
    pub fn new(max_accuracy_drop: f64, baseline_accuracy: f64) -> Result<Self> {
        if !(max_accuracy_drop.is_finite() && max_accuracy_drop >= 0.0) || !baseline_accuracy.is_finite() {
            return Err(Error::InvalidConfig(alloc::format!(
                "tolerance {max_accuracy_drop} against baseline {baseline_accuracy}"
            )));
        }
        Ok(Self {
            max_accuracy_drop,
            baseline_accuracy,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.baseline_accuracy - self.max_accuracy_drop
    }

    pub fn admits(&self, accuracy: f64) -> bool {
        accuracy >= self.threshold()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub bits: u32,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// The searched part; `None` when all parts share one width.
    pub part: Option<Part>,
    pub chosen_bits: u32,
    pub accuracy_at_chosen: f64,
    /// Probes in the order they were made.
    pub trace: Vec<Probe>,
    /// No width in range met the budget; `chosen_bits` is then the upper bound.
    pub unmeetable: bool,
}

/// Upper bound on probes made by [`search_bits`] over `[b_lo, b_hi]`.
pub fn max_probes(b_lo: u32, b_hi: u32) -> usize {
    // candidates plus the "none feasible" outcome
    crate::net::ceil_log2((b_hi - b_lo + 2) as usize) as usize
}

fn check_range(b_lo: u32, b_hi: u32) -> Result<()> {
    if b_lo > b_hi {
        return Err(Error::InvalidConfig(alloc::format!("empty bit range [{b_lo}, {b_hi}]")));
    }
    for b in [b_lo, b_hi] {
        if !(MIN_BIT_WIDTH..=MAX_BIT_WIDTH).contains(&b) {
            return Err(Error::InvalidBitWidth(b));
        }
    }
    Ok(())
}

/// Smallest `B` in `[b_lo, b_hi]` whose probed accuracy meets the budget,
/// assuming accuracy does not decrease with `B`.
pub fn search_bits(
    b_lo: u32,
    b_hi: u32,
    budget: &ToleranceBudget,
    probe: &mut dyn FnMut(u32) -> Result<f64>,
) -> Result<SearchOutcome> {
    check_range(b_lo, b_hi)?;
    let mut trace = Vec::new();
    // answer lies in [lo, hi]; hi = b_hi + 1 stands for "none"
    let (mut lo, mut hi) = (b_lo, b_hi + 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        let accuracy = probe(mid)?;
        trace.push(Probe { bits: mid, accuracy });
        if budget.admits(accuracy) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let unmeetable = lo > b_hi;
    let chosen_bits = lo.min(b_hi);
    let accuracy_at_chosen = trace
        .iter()
        .find(|p| p.bits == chosen_bits)
        .map(|p| p.accuracy)
        .expect("the final interval always probes its answer");
    Ok(SearchOutcome {
        part: None,
        chosen_bits,
        accuracy_at_chosen,
        trace,
        unmeetable,
    })
}

/// Scheme at `bits` that casts only `part` to fixed point.
pub fn part_scheme(profile: &RangeProfile, part: Part, bits: u32) -> Result<QuantScheme> {
    Ok(build_scheme(profile, PartBits::uniform(bits), SchemeMode::Dynamic)?.restricted_to(PartSet::only(part)))
}

/// Binary search for the bit width of one part, the rest staying in float.
pub fn search_part_bits(
    model: &Model,
    part: Part,
    profile: &RangeProfile,
    budget: &ToleranceBudget,
    evaluator: &mut dyn Evaluator,
    b_lo: u32,
    b_hi: u32,
) -> Result<SearchOutcome> {
    let mut out = search_bits(b_lo, b_hi, budget, &mut |b| {
        evaluator.accuracy(model, Some(&part_scheme(profile, part, b)?))
    })?;
    out.part = Some(part);
    Ok(out)
}

/// Smallest shared width meeting the budget with every part quantized.
pub fn search_shared_bits(
    model: &Model,
    profile: &RangeProfile,
    mode: SchemeMode,
    budget: &ToleranceBudget,
    evaluator: &mut dyn Evaluator,
    b_lo: u32,
    b_hi: u32,
) -> Result<SearchOutcome> {
    search_bits(b_lo, b_hi, budget, &mut |b| {
        evaluator.accuracy(model, Some(&build_scheme(profile, PartBits::uniform(b), mode)?))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub max_accuracy_drop: f64,
    pub b_lo: u32,
    pub b_hi: u32,
    /// Dynamic searches each part on its own; static searches one shared width.
    pub mode: SchemeMode,
    pub profile_images: usize,
    pub profile_batch: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            max_accuracy_drop: 1.0,
            b_lo: 2,
            b_hi: 16,
            mode: SchemeMode::Dynamic,
            profile_images: DEFAULT_PROFILE_IMAGES,
            profile_batch: 100,
        }
    }
}

/// One combined re-check in the trade-off stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recheck {
    pub bits: PartBits,
    pub accuracy: f64,
    /// Part widened before this check (`None` for the first check).
    pub widened: Option<Part>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowEvent {
    Baseline { calibration: f64, validation: f64 },
    Profiled { samples: usize },
    Probe { part: Option<Part>, bits: u32, accuracy: f64 },
    Recheck(Recheck),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutcome {
    pub config: FlowConfig,
    /// Float accuracy on the calibration set (reference for the searches).
    pub calibration_baseline: f64,
    /// Float accuracy on the validation set (reference for the re-check).
    pub validation_baseline: f64,
    pub profile: RangeProfile,
    pub searches: Vec<SearchOutcome>,
    pub rechecks: Vec<Recheck>,
    pub scheme: QuantScheme,
    /// Validation accuracy of `scheme`.
    pub combined_accuracy: f64,
    pub unmeetable: bool,
}

impl FlowOutcome {
    pub fn probe_count(&self) -> usize {
        self.searches.iter().map(|s| s.trace.len()).sum()
    }
}

/// Runs the flow on a trained float model.
///
/// `profile_data` feeds the activation statistics; `calibration` scores the
/// per-part searches and `validation` the combined scheme. If the combined
/// scheme misses the budget, the part whose own search scored lowest at its
/// current width is widened by one bit and the scheme checked again, until
/// it passes or every part sits at `b_hi`.
pub fn run_flow(
    model: &Model,
    profile_data: &Dataset,
    calibration: &mut dyn Evaluator,
    validation: &mut dyn Evaluator,
    cfg: &FlowConfig,
    progress: &mut dyn FnMut(&FlowEvent),
) -> Result<FlowOutcome> {
    check_range(cfg.b_lo, cfg.b_hi)?;
    let calibration_baseline = calibration.accuracy(model, None)?;
    let validation_baseline = validation.accuracy(model, None)?;
    progress(&FlowEvent::Baseline {
        calibration: calibration_baseline,
        validation: validation_baseline,
    });
    let search_budget = ToleranceBudget::new(cfg.max_accuracy_drop, calibration_baseline)?;
    let final_budget = ToleranceBudget::new(cfg.max_accuracy_drop, validation_baseline)?;

    let weights = analyze_weight_ranges(model)?;
    let mut profile = profile_activations(model, profile_data, cfg.profile_images, cfg.profile_batch)?;
    debug_assert_eq!(weights.layers.len(), profile.layers.len());
    profile.layers = profile
        .layers
        .into_iter()
        .zip(weights.layers)
        .map(|(mut p, w)| {
            p.weight_max_abs = w.weight_max_abs;
            p
        })
        .collect();
    progress(&FlowEvent::Profiled {
        samples: profile.sample_count,
    });

    let mut searches = Vec::new();
    let mut bits;
    {
        let mut emitting = |part: Option<Part>, b: u32, accuracy: f64| {
            progress(&FlowEvent::Probe { part, bits: b, accuracy })
        };
        match cfg.mode {
            SchemeMode::Dynamic => {
                bits = PartBits::uniform(cfg.b_hi);
                for part in Part::ALL {
                    let mut out = search_bits(cfg.b_lo, cfg.b_hi, &search_budget, &mut |b| {
                        let acc = calibration.accuracy(model, Some(&part_scheme(&profile, part, b)?))?;
                        emitting(Some(part), b, acc);
                        Ok(acc)
                    })?;
                    out.part = Some(part);
                    bits.set(part, out.chosen_bits);
                    searches.push(out);
                }
            }
            SchemeMode::Static => {
                let out = search_bits(cfg.b_lo, cfg.b_hi, &search_budget, &mut |b| {
                    let s = build_scheme(&profile, PartBits::uniform(b), SchemeMode::Static)?;
                    let acc = calibration.accuracy(model, Some(&s))?;
                    emitting(None, b, acc);
                    Ok(acc)
                })?;
                bits = PartBits::uniform(out.chosen_bits);
                searches.push(out);
            }
        }
    }

    // sensitivity of each part at its current width, from the calibration set
    let mut sensitivity: Vec<(Part, u32, f64)> = searches
        .iter()
        .filter_map(|s| s.part.map(|p| (p, s.chosen_bits, s.accuracy_at_chosen)))
        .collect();
    let mut rechecks = Vec::new();
    let mut widened = None;
    let (scheme, combined_accuracy, unmeetable) = loop {
        let scheme = build_scheme(&profile, bits, cfg.mode)?;
        let accuracy = validation.accuracy(model, Some(&scheme))?;
        let check = Recheck { bits, accuracy, widened };
        progress(&FlowEvent::Recheck(check));
        rechecks.push(check);
        if final_budget.admits(accuracy) {
            break (scheme, accuracy, false);
        }
        let next = match cfg.mode {
            SchemeMode::Dynamic => sensitivity
                .iter()
                .filter(|(p, _, _)| bits.get(*p) < cfg.b_hi)
                .min_by(|a, b| a.2.total_cmp(&b.2))
                .map(|(p, _, _)| *p),
            SchemeMode::Static => (bits.conv_weights < cfg.b_hi).then_some(Part::ConvWeights),
        };
        let Some(part) = next else {
            break (scheme, accuracy, true);
        };
        match cfg.mode {
            SchemeMode::Dynamic => {
                let b = bits.get(part) + 1;
                bits.set(part, b);
                let acc = calibration.accuracy(model, Some(&part_scheme(&profile, part, b)?))?;
                for entry in sensitivity.iter_mut().filter(|e| e.0 == part) {
                    *entry = (part, b, acc);
                }
                widened = Some(part);
            }
            SchemeMode::Static => {
                bits = PartBits::uniform(bits.conv_weights + 1);
                widened = None;
            }
        }
    };
    let unmeetable = unmeetable || searches.iter().any(|s| s.unmeetable);
    Ok(FlowOutcome {
        config: cfg.clone(),
        calibration_baseline,
        validation_baseline,
        profile,
        searches,
        rechecks,
        scheme,
        combined_accuracy,
        unmeetable,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub bits: u32,
    pub static_accuracy: f64,
    pub dynamic_accuracy: f64,
}

/// Accuracy with every part at one shared width, in both modes.
pub fn mode_sweep(
    model: &Model,
    profile: &RangeProfile,
    widths: &[u32],
    evaluator: &mut dyn Evaluator,
) -> Result<Vec<SweepRow>> {
    widths
        .iter()
        .map(|&b| {
            let mut acc = |mode| evaluator.accuracy(model, Some(&build_scheme(profile, PartBits::uniform(b), mode)?));
            Ok(SweepRow {
                bits: b,
                static_accuracy: acc(SchemeMode::Static)?,
                dynamic_accuracy: acc(SchemeMode::Dynamic)?,
            })
        })
        .collect()
}
