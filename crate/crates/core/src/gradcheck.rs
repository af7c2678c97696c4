//! Finite-difference verification of every training gradient in 64-bit mode.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dan;
use crate::data::SplitSpec;
use crate::dedn::{distill_loss_on, ClusterPartition, DednModel, ModelDims, ModelVars, SharedNodes};
use crate::error::Result;
use crate::objectives::{mal_loss_on, total_loss_on, Batch, LossWeights};
use crate::tensor::{Tape, Tensor, Var};

/// Step of the five-point central difference.
pub const STEP: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// A random small problem: model, inputs and labels.
#[derive(Clone, Debug)]
pub struct Instance {
    pub model: DednModel<f64>,
    pub v: Tensor<f64>,
    pub attributes: Tensor<f64>,
    pub features: Vec<Tensor<f64>>,
    pub labels: Vec<usize>,
    pub splits: SplitSpec,
    pub weights: LossWeights,
    pub lambda_rc: f64,
}

fn normal_tensor(rng: &mut impl Rng, shape: [usize; 2], scale: f64) -> Tensor<f64> {
    let data = (0..shape[0] * shape[1])
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

impl Instance {
    /// Dimensions `C, R, G, D, K` are drawn from `1..=6` (`K ≥ 2`), with `q`
    /// attribute clusters.
    pub fn random(rng: &mut impl Rng, q: usize) -> Result<Self> {
        let c = rng.random_range(1..=6);
        let r = rng.random_range(1..=6);
        let g = rng.random_range(1..=6);
        let d = rng.random_range(q.max(1)..=6);
        let k = rng.random_range(2..=6);

        let mut order: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut sizes = vec![1; q];
        for _ in q..d {
            sizes[rng.random_range(0..q)] += 1;
        }
        let mut clusters = Vec::with_capacity(q);
        let mut at = 0;
        for s in sizes {
            clusters.push(order[at..at + s].to_vec());
            at += s;
        }
        let partition = ClusterPartition::new(clusters, d)?;

        let dims = ModelDims { c, r, g, d };
        let mut model = DednModel::<f64>::zeros(dims, partition)?;
        for w in model.matrices_mut() {
            for x in w.data_mut() {
                *x = rng.random_range(-0.8..0.8);
            }
        }

        let n_seen = rng.random_range(1..k);
        let splits = SplitSpec {
            seen_classes: (0..n_seen).collect(),
            unseen_classes: (n_seen..k).collect(),
            train_indices: vec![],
            test_indices: vec![],
        };
        let n = rng.random_range(1..=3);
        let features = (0..n).map(|_| normal_tensor(rng, [c, r], 1.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..n_seen)).collect();
        Ok(Self {
            model,
            v: normal_tensor(rng, [d, g], 0.7),
            attributes: normal_tensor(rng, [k, d], 0.7),
            features,
            labels,
            splits,
            weights: LossWeights {
                beta: rng.random_range(0.0..1.0),
                gamma: rng.random_range(0.0..1.0),
                epsilon: rng.random_range(0.0..1.5),
            },
            lambda_rc: rng.random_range(0.0..1.0),
        })
    }

    fn batch(&self) -> Batch<'_, f64> {
        Batch {
            v: &self.v,
            attributes: &self.attributes,
            features: &self.features,
            labels: &self.labels,
            splits: &self.splits,
        }
    }
}

/// The differentiable objectives under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Region/channel alignment of both experts on the first sample.
    Align,
    Distill,
    CrossEntropy,
    MarginAware,
    Total,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Align,
        Objective::Distill,
        Objective::CrossEntropy,
        Objective::MarginAware,
        Objective::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Align => "align",
            Objective::Distill => "distill",
            Objective::CrossEntropy => "cross_entropy",
            Objective::MarginAware => "margin_aware",
            Objective::Total => "total",
        }
    }

    /// Builds the scalar loss on `tape`.
    pub fn build(self, tape: &mut Tape<f64>, vars: &ModelVars, inst: &Instance) -> Result<Var> {
        let part = &inst.model.partition;
        if self == Objective::Total {
            return Ok(total_loss_on(tape, vars, part, &inst.batch(), &inst.weights, inst.lambda_rc)?.total);
        }
        let shared = SharedNodes::new(tape, vars, part, &inst.v, &inst.attributes)?;
        let s = shared.sample(tape, part, &inst.features[0], inst.lambda_rc)?;
        let y = inst.labels[0];
        match self {
            Objective::Align => {
                let mut loss = dan::align_loss_on(tape, s.cexp.region.output, s.cexp.channel.output)?;
                for n in &s.fexp {
                    let l = dan::align_loss_on(tape, n.region.output, n.channel.output)?;
                    loss = tape.add(loss, l)?;
                }
                Ok(loss)
            }
            Objective::Distill => distill_loss_on(tape, s.p_ec, s.p_ef),
            Objective::CrossEntropy => {
                let a = tape.cross_entropy(s.p_ec, y)?;
                let b = tape.cross_entropy(s.p_ef, y)?;
                tape.add(a, b)
            }
            Objective::MarginAware => {
                let eps = inst.weights.epsilon;
                let a = mal_loss_on(tape, s.p_ec, y, eps, &inst.splits)?;
                let b = mal_loss_on(tape, s.p_ef, y, eps, &inst.splits)?;
                tape.add(a, b)
            }
            Objective::Total => unreachable!(),
        }
    }
}

fn loss_value(obj: Objective, model: &DednModel<f64>, inst: &Instance) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.to_tape_frozen(&mut tape);
    let l = obj.build(&mut tape, &vars, inst)?;
    tape.value(l).item()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between backward and central-difference
/// gradients over every entry of every matrix.
pub fn check_instance(obj: Objective, inst: &Instance) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inst.model.to_tape(&mut tape);
    let loss = obj.build(&mut tape, &vars, inst)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.all().into_iter().map(|v| grads.wrt(v)).collect();

    let mut worst = 0.0f64;
    let mut probe = inst.model.clone();
    for (m, g) in analytic.iter().enumerate() {
        for j in 0..g.numel() {
            let orig = probe.matrices()[m].data()[j];
            let mut at = |x: f64| -> Result<f64> {
                probe.matrices_mut()[m].data_mut()[j] = x;
                loss_value(obj, &probe, inst)
            };
            let (p1, m1) = (at(orig + STEP)?, at(orig - STEP)?);
            let (p2, m2) = (at(orig + 2.0 * STEP)?, at(orig - 2.0 * STEP)?);
            probe.matrices_mut()[m].data_mut()[j] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * STEP);
            worst = worst.max(relative_error(g.data()[j], numeric));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub objective: Objective,
    pub instances: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_error < self.tolerance)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>9} {:>14}  status", "objective", "instances", "max_rel_error")?;
        for r in &self.rows {
            let status = if r.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<14} {:>9} {:>14.3e}  {status}",
                r.objective.name(),
                r.instances,
                r.max_rel_error
            )?;
        }
        Ok(())
    }
}

/// Checks every objective on `per_q` random instances for each of one and two
/// attribute clusters.
pub fn run_gradcheck(seed: u64, per_q: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(2 * per_q);
    for q in [1, 2] {
        for _ in 0..per_q {
            instances.push(Instance::random(&mut rng, q)?);
        }
    }
    let mut rows = Vec::new();
    for obj in Objective::ALL {
        let mut worst = 0.0f64;
        for inst in &instances {
            worst = worst.max(check_instance(obj, inst)?);
        }
        rows.push(CheckRow {
            objective: obj,
            instances: instances.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradcheckReport {
        rows,
        tolerance: TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn random_instances_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for q in [1, 2] {
            for _ in 0..20 {
                let inst = Instance::random(&mut rng, q).unwrap();
                assert_eq!(inst.model.partition.q(), q);
                inst.model.validate().unwrap();
                assert!(inst.labels.iter().all(|&y| inst.splits.is_seen(y)));
            }
        }
    }

    #[test]
    fn suite_passes_for_one_seed() {
        let report = run_gradcheck(11, 1).unwrap();
        assert!(report.passed(), "{report}");
    }
}
