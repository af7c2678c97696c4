//! ZSL/GZSL evaluation and attention-map export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dan::{self, check_lambda};
use crate::data::DatasetBundle;
use crate::dedn::{argmax_among, cexp_forward, class_scores, fexp_forward, DednModel, Mode};
use crate::error::{DataError, Error, Result};
use crate::objectives::margin_scores;
use crate::tensor::Tensor;

/// Accuracies in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GzslMetrics {
    pub t: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub lambda_e: f64,
    pub lambda_rc: f64,
    /// Seen scores lowered and unseen scores raised by this amount before the
    /// argmax. Zero scores raw.
    pub calibration_epsilon: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            lambda_e: 0.9,
            lambda_rc: 0.8,
            calibration_epsilon: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub seen: bool,
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub t: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
    /// Per-class accuracy under `mode`: ZSL lists the unseen classes with
    /// unseen-restricted predictions, GZSL lists every tested class.
    pub per_class: BTreeMap<usize, ClassResult>,
    pub mode: Mode,
    /// Sample-level accuracies, for comparison with the class means.
    pub micro_t: f64,
    pub micro_u: f64,
    pub micro_s: f64,
    pub test_samples: usize,
    pub options: EvalOptions,
}

impl EvalReport {
    pub fn metrics(&self) -> GzslMetrics {
        GzslMetrics {
            t: self.t,
            u: self.u,
            s: self.s,
            h: self.h,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn harmonic_mean(u: f64, s: f64) -> Result<f64> {
    if !(u >= 0.0 && s >= 0.0) {
        return Err(Error::contract(format!("harmonic mean of negative accuracies ({u}, {s})")));
    }
    if u + s == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * u * s / (u + s))
}

/// Both experts' class scores for one sample.
pub fn expert_scores(model: &DednModel, bundle: &DatasetBundle, sample: usize, lambda_rc: f64) -> Result<(Tensor, Tensor)> {
    let f = bundle.feature(sample);
    let (o_ec, _) = cexp_forward(model, &bundle.attr_vectors, &f, lambda_rc)?;
    let (o_ef, _) = fexp_forward(model, &bundle.attr_vectors, &f, lambda_rc)?;
    Ok((
        class_scores(&o_ec, &bundle.attributes)?,
        class_scores(&o_ef, &bundle.attributes)?,
    ))
}

#[derive(Default, Clone, Copy)]
struct Tally {
    samples: usize,
    correct: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.samples += 1;
        self.correct += hit as usize;
    }

    fn pct(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.samples as f64
        }
    }
}

fn class_mean(tallies: &BTreeMap<usize, Tally>, classes: impl Fn(usize) -> bool) -> f64 {
    let accs: Vec<f64> = tallies
        .iter()
        .filter(|(&c, t)| classes(c) && t.samples > 0)
        .map(|(_, t)| t.pct())
        .collect();
    if accs.is_empty() {
        0.0
    } else {
        accs.iter().sum::<f64>() / accs.len() as f64
    }
}

fn micro(tallies: &BTreeMap<usize, Tally>, classes: impl Fn(usize) -> bool) -> f64 {
    let mut total = Tally::default();
    for (_, t) in tallies.iter().filter(|(&c, _)| classes(c)) {
        total.samples += t.samples;
        total.correct += t.correct;
    }
    total.pct()
}

fn check_model(model: &DednModel, bundle: &DatasetBundle) -> Result<()> {
    model.validate()?;
    let d = &model.dims;
    if (d.c, d.r, d.g, d.d) != (bundle.c(), bundle.r(), bundle.g(), bundle.d()) {
        return Err(Error::contract(format!(
            "model dims (c={}, r={}, g={}, d={}) do not match bundle (c={}, r={}, g={}, d={})",
            d.c,
            d.r,
            d.g,
            d.d,
            bundle.c(),
            bundle.r(),
            bundle.g(),
            bundle.d()
        )));
    }
    Ok(())
}

/// Scores every test sample and reports T, U, S and H.
///
/// U and S are means of per-class GZSL accuracies over unseen and seen test
/// classes; T is the mean per-class accuracy on unseen test samples with
/// predictions restricted to unseen classes.
pub fn evaluate_report(model: &DednModel, bundle: &DatasetBundle, opts: &EvalOptions, mode: Mode) -> Result<EvalReport> {
    check_lambda("lambda_e", opts.lambda_e)?;
    check_lambda("lambda_rc", opts.lambda_rc)?;
    if !(opts.calibration_epsilon.is_finite()) {
        return Err(Error::config("calibration_epsilon must be finite"));
    }
    check_model(model, bundle)?;
    let splits = &bundle.splits;
    if splits.test_indices.is_empty() {
        return Err(DataError::IncompleteTestSplit.into());
    }
    let all: Vec<usize> = (0..bundle.k()).collect();
    let mut gzsl: BTreeMap<usize, Tally> = BTreeMap::new();
    let mut zsl: BTreeMap<usize, Tally> = BTreeMap::new();
    for &i in &splits.test_indices {
        let y = bundle.label(i);
        let (p_ec, p_ef) = expert_scores(model, bundle, i, opts.lambda_rc)?;
        let combined = dan::combine_outputs(&p_ec, &p_ef, opts.lambda_e)?;
        let combined = margin_scores(&combined, opts.calibration_epsilon, splits)?;
        let pred = argmax_among(combined.data(), &all).expect("at least one class");
        gzsl.entry(y).or_default().add(pred == y);
        if splits.is_unseen(y) {
            let pred = argmax_among(combined.data(), &splits.unseen_classes).expect("unseen classes exist");
            zsl.entry(y).or_default().add(pred == y);
        }
    }

    let seen = |c: usize| splits.is_seen(c);
    let unseen = |c: usize| splits.is_unseen(c);
    let u = class_mean(&gzsl, unseen);
    let s = class_mean(&gzsl, seen);
    let per_class = match mode {
        Mode::Zsl => &zsl,
        Mode::Gzsl => &gzsl,
    }
    .iter()
    .map(|(&c, t)| {
        (
            c,
            ClassResult {
                seen: splits.is_seen(c),
                samples: t.samples,
                correct: t.correct,
                accuracy: t.pct(),
            },
        )
    })
    .collect();
    Ok(EvalReport {
        t: class_mean(&zsl, unseen),
        u,
        s,
        h: harmonic_mean(u, s)?,
        per_class,
        mode,
        micro_t: micro(&zsl, unseen),
        micro_u: micro(&gzsl, unseen),
        micro_s: micro(&gzsl, seen),
        test_samples: splits.test_indices.len(),
        options: *opts,
    })
}

pub fn evaluate(model: &DednModel, bundle: &DatasetBundle, lambda_e: f64, lambda_rc: f64, mode: Mode) -> Result<GzslMetrics> {
    let opts = EvalOptions {
        lambda_e,
        lambda_rc,
        calibration_epsilon: 0.0,
    };
    Ok(evaluate_report(model, bundle, &opts, mode)?.metrics())
}

/// Fraction (percent) of the given samples whose GZSL prediction is correct.
pub fn sample_accuracy(model: &DednModel, bundle: &DatasetBundle, samples: &[usize], opts: &EvalOptions) -> Result<f64> {
    check_model(model, bundle)?;
    let all: Vec<usize> = (0..bundle.k()).collect();
    let mut tally = Tally::default();
    for &i in samples {
        let (p_ec, p_ef) = expert_scores(model, bundle, i, opts.lambda_rc)?;
        let combined = dan::combine_outputs(&p_ec, &p_ef, opts.lambda_e)?;
        let combined = margin_scores(&combined, opts.calibration_epsilon, &bundle.splits)?;
        tally.add(argmax_among(combined.data(), &all) == Some(bundle.label(i)));
    }
    Ok(tally.pct())
}

/// `x` with six significant digits, printf `%g` style.
pub fn format_sig6(x: f32) -> String {
    let x = x as f64;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp) as usize, x);
        trim_zeros(&s).to_string()
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Region-attention maps (`D × R`, canonical attribute order) of both experts
/// for one sample.
pub fn attention_maps(model: &DednModel, bundle: &DatasetBundle, sample: usize, lambda_rc: f64) -> Result<(Tensor, Tensor)> {
    if sample >= bundle.n() {
        return Err(DataError::SampleOutOfRange {
            index: sample,
            n: bundle.n(),
        }
        .into());
    }
    check_model(model, bundle)?;
    let f = bundle.feature(sample);
    let (_, coarse) = cexp_forward(model, &bundle.attr_vectors, &f, lambda_rc)?;
    let (_, fine) = fexp_forward(model, &bundle.attr_vectors, &f, lambda_rc)?;
    let coarse = coarse.a_region.expect("attention retained");
    let r = bundle.r();
    let mut canon = vec![0.0f32; bundle.d() * r];
    for (out, rows) in fine.iter().zip(model.partition.clusters()) {
        let a = out.a_region.as_ref().expect("attention retained");
        for (local, &attr) in rows.iter().enumerate() {
            canon[attr * r..(attr + 1) * r].copy_from_slice(a.row_slice(local));
        }
    }
    Ok((coarse, Tensor::new(vec![bundle.d(), r], canon)?))
}

/// CSV text of both experts' region-attention maps: a `# expert=... sample=...`
/// line, then one row per attribute with one column per region.
pub fn attention_csv(model: &DednModel, bundle: &DatasetBundle, sample: usize, lambda_rc: f64) -> Result<String> {
    let (coarse, fine) = attention_maps(model, bundle, sample, lambda_rc)?;
    let mut out = String::new();
    for (name, map) in [("cexp", &coarse), ("fexp", &fine)] {
        writeln!(out, "# expert={name} sample={sample}").unwrap();
        for i in 0..map.rows() {
            let row: Vec<String> = map.row_slice(i).iter().map(|&x| format_sig6(x)).collect();
            writeln!(out, "{}", row.join(",")).unwrap();
        }
    }
    Ok(out)
}

pub fn export_attention_maps(
    model: &DednModel,
    bundle: &DatasetBundle,
    sample: usize,
    lambda_rc: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let csv = attention_csv(model, bundle, sample, lambda_rc)?;
    fs::write(path, csv).map_err(|e| Error::io(path, e))
}
