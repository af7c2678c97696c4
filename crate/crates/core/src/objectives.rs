//! Classification losses and the composite training objective.

use serde::{Deserialize, Serialize};

use crate::dan;
use crate::data::SplitSpec;
use crate::dedn::{self, ClusterPartition, DednModel, ModelVars, SampleNodes, SharedNodes};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the branch alignment losses.
    pub beta: f64,
    /// Weight of the distillation loss.
    pub gamma: f64,
    /// Margin of the margin-aware loss. `0` reduces it to cross-entropy.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.001,
            gamma: 0.1,
            epsilon: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("epsilon", self.epsilon)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_class(y: usize, k: usize) -> Result<()> {
    if y >= k {
        return Err(Error::contract(format!("class {y} out of range for {k} classes")));
    }
    Ok(())
}

/// `-log softmax(p)[y]`.
pub fn ce_loss<T: Scalar>(p: &Tensor<T>, y: usize) -> Result<T> {
    check_class(y, p.numel())?;
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let l = tape.cross_entropy(pv, y)?;
    tape.value(l).item()
}

/// Seen-class scores lowered by `epsilon`, unseen raised by `epsilon`.
pub fn margin_scores<T: Scalar>(p: &Tensor<T>, epsilon: f64, splits: &SplitSpec) -> Result<Tensor<T>> {
    let k = p.numel();
    if splits.num_classes() != k {
        return Err(Error::shape("margin_scores", p.shape(), &[splits.num_classes()]));
    }
    let eps = T::lit(epsilon);
    let mut out = p.clone();
    for &c in &splits.seen_classes {
        out.data_mut()[c] = out.data()[c] - eps;
    }
    for &c in &splits.unseen_classes {
        out.data_mut()[c] = out.data()[c] + eps;
    }
    Ok(out)
}

/// Logit offsets under which cross-entropy becomes the margin-aware loss:
/// `-2ε` on the target, `+ε` on every other seen class, `0` on unseen ones.
fn mal_offsets<T: Scalar>(k: usize, y: usize, epsilon: f64, splits: &SplitSpec) -> Result<Vec<T>> {
    check_class(y, k)?;
    if splits.num_classes() != k {
        return Err(Error::contract(format!(
            "{k} class scores but the split defines {} classes",
            splits.num_classes()
        )));
    }
    if !splits.is_seen(y) {
        return Err(Error::contract(format!("margin-aware loss target {y} is not a seen class")));
    }
    let mut off = vec![T::zero(); k];
    for &c in &splits.seen_classes {
        off[c] = T::lit(epsilon);
    }
    off[y] = T::lit(-2.0 * epsilon);
    Ok(off)
}

pub fn mal_loss_on<T: Scalar>(tape: &mut Tape<T>, p: Var, y: usize, epsilon: f64, splits: &SplitSpec) -> Result<Var> {
    let shape = tape.value(p).shape().to_vec();
    let off = mal_offsets(tape.value(p).numel(), y, epsilon, splits)?;
    let off = tape.constant(Tensor::new(shape, off)?);
    let shifted = tape.add(p, off)?;
    tape.cross_entropy(shifted, y)
}

/// Margin-aware loss for a seen target `y`.
pub fn mal_loss<T: Scalar>(p: &Tensor<T>, y: usize, epsilon: f64, splits: &SplitSpec) -> Result<T> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let l = mal_loss_on(&mut tape, pv, y, epsilon, splits)?;
    tape.value(l).item()
}

/// Inputs of one training batch. `features` are `C × R` per sample.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a, T> {
    pub v: &'a Tensor<T>,
    pub attributes: &'a Tensor<T>,
    pub features: &'a [Tensor<T>],
    pub labels: &'a [usize],
    pub splits: &'a SplitSpec,
}

/// Batch-mean loss terms. `total = mal_ec + mal_ef + β(align_ec + align_ef) + γ·distill`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mal_ec: Var,
    pub mal_ef: Var,
    pub align_ec: Var,
    pub align_ef: Var,
    pub distill: Var,
}

/// Alignment losses of one sample: cExp's, and the mean over fExp subnetworks.
pub fn sample_align_on<T: Scalar>(tape: &mut Tape<T>, s: &SampleNodes) -> Result<(Var, Var)> {
    if s.fexp.is_empty() {
        return Err(Error::contract("missing fine-expert branch outputs"));
    }
    let ec = dan::align_loss_on(tape, s.cexp.region.output, s.cexp.channel.output)?;
    let mut acc: Option<Var> = None;
    for n in &s.fexp {
        let l = dan::align_loss_on(tape, n.region.output, n.channel.output)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    let sum = acc.expect("non-empty");
    let ef = tape.scale(sum, T::lit(1.0 / s.fexp.len() as f64));
    Ok((ec, ef))
}

/// Builds the full objective for `batch` on `tape`. Per-sample terms are
/// summed in ascending sample order and divided by the batch size.
pub fn total_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    partition: &ClusterPartition,
    batch: &Batch<'_, T>,
    weights: &LossWeights,
    lambda_rc: f64,
) -> Result<LossTerms> {
    weights.validate()?;
    let n = batch.features.len();
    if n == 0 || batch.labels.len() != n {
        return Err(Error::contract(format!(
            "batch has {n} features and {} labels",
            batch.labels.len()
        )));
    }
    let shared = SharedNodes::new(tape, vars, partition, batch.v, batch.attributes)?;

    let mut sums: Option<[Var; 5]> = None;
    for (f, &y) in batch.features.iter().zip(batch.labels) {
        let s = shared.sample(tape, partition, f, lambda_rc)?;
        let mal_ec = mal_loss_on(tape, s.p_ec, y, weights.epsilon, batch.splits)?;
        let mal_ef = mal_loss_on(tape, s.p_ef, y, weights.epsilon, batch.splits)?;
        let (align_ec, align_ef) = sample_align_on(tape, &s)?;
        let distill = dedn::distill_loss_on(tape, s.p_ec, s.p_ef)?;
        let terms = [mal_ec, mal_ef, align_ec, align_ef, distill];
        sums = Some(match sums {
            None => terms,
            Some(prev) => {
                let mut next = prev;
                for (acc, t) in next.iter_mut().zip(terms) {
                    *acc = tape.add(*acc, t)?;
                }
                next
            }
        });
    }
    let inv = T::lit(1.0 / n as f64);
    let [mal_ec, mal_ef, align_ec, align_ef, distill] = sums.expect("non-empty batch").map(|v| tape.scale(v, inv));

    let basic = tape.add(mal_ec, mal_ef)?;
    let align = tape.add(align_ec, align_ef)?;
    let align_w = tape.scale(align, T::lit(weights.beta));
    let distill_w = tape.scale(distill, T::lit(weights.gamma));
    let total = tape.add(basic, align_w)?;
    let total = tape.add(total, distill_w)?;
    Ok(LossTerms {
        total,
        mal_ec,
        mal_ef,
        align_ec,
        align_ef,
        distill,
    })
}

/// Values of the [`LossTerms`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mal_ec: f64,
    pub mal_ef: f64,
    pub align_ec: f64,
    pub align_ef: f64,
    pub distill: f64,
}

impl LossBreakdown {
    pub fn read<T: Scalar>(tape: &Tape<T>, t: &LossTerms) -> Result<Self> {
        let get = |v: Var| -> Result<f64> { Ok(tape.value(v).item()?.to_f64().unwrap_or(f64::NAN)) };
        Ok(Self {
            total: get(t.total)?,
            mal_ec: get(t.mal_ec)?,
            mal_ef: get(t.mal_ef)?,
            align_ec: get(t.align_ec)?,
            align_ef: get(t.align_ef)?,
            distill: get(t.distill)?,
        })
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("mal_ec", self.mal_ec),
            ("mal_ef", self.mal_ef),
            ("align_ec", self.align_ec),
            ("align_ef", self.align_ef),
            ("distill", self.distill),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Value of the composite objective for `model` on `batch`.
pub fn total_loss<T: Scalar>(
    model: &DednModel<T>,
    batch: &Batch<'_, T>,
    weights: &LossWeights,
    lambda_rc: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = model.to_tape_frozen(&mut tape);
    let terms = total_loss_on(&mut tape, &vars, &model.partition, batch, weights, lambda_rc)?;
    LossBreakdown::read(&tape, &terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn splits(seen: &[usize], unseen: &[usize]) -> SplitSpec {
        SplitSpec {
            seen_classes: seen.to_vec(),
            unseen_classes: unseen.to_vec(),
            train_indices: vec![],
            test_indices: vec![],
        }
    }

    #[test]
    fn ce_examples() {
        let u = Tensor::row(vec![0.3f64; 4]);
        assert!((ce_loss(&u, 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        let confident = ce_loss(&Tensor::row(vec![10.0f64, -10.0]), 0).unwrap();
        assert!((confident - 2.06e-9).abs() < 1e-10, "{confident}");
        let v = ce_loss(&Tensor::row(vec![0.0f64, 0.0]), 1).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(ce_loss(&Tensor::row(vec![0.0f64, 0.0]), 2).is_err());
    }

    #[test]
    fn margin_examples() {
        let s = splits(&[0], &[1]);
        let p = Tensor::row(vec![1.0f64, 1.0]);
        assert_eq!(margin_scores(&p, 0.0, &s).unwrap(), p);
        assert_eq!(margin_scores(&p, 0.5, &s).unwrap().data(), &[0.5, 1.5]);
    }

    #[test]
    fn mal_examples() {
        let s = splits(&[0], &[1]);
        let p = Tensor::row(vec![0.0f64, 0.0]);
        let v = mal_loss(&p, 0, 0.5, &s).unwrap();
        let want = -((-1f64).exp() / ((-1f64).exp() + 1.0)).ln();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 1.3133).abs() < 1e-3);

        let both = splits(&[0, 1], &[]);
        let v = mal_loss(&p, 0, 1.0, &both).unwrap();
        assert!((v - 3.0486).abs() < 1e-3);

        let q = Tensor::row(vec![0.4f64, -1.2, 2.2]);
        let s3 = splits(&[0, 2], &[1]);
        assert!((mal_loss(&q, 2, 0.0, &s3).unwrap() - ce_loss(&q, 2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mal_rejects_unseen_or_out_of_range_targets() {
        let s = splits(&[0], &[1]);
        let p = Tensor::row(vec![0.0f64, 0.0]);
        assert!(matches!(mal_loss(&p, 1, 1.0, &s), Err(Error::Contract(_))));
        assert!(matches!(mal_loss(&p, 5, 1.0, &s), Err(Error::Contract(_))));
    }

    #[test]
    fn mal_is_stable_for_huge_scores() {
        let s = splits(&[0, 1], &[2]);
        let p = Tensor::row(vec![1e4f32, -1e4, 5e3]);
        assert!(mal_loss(&p, 1, 1.0, &s).unwrap().is_finite());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            epsilon: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
