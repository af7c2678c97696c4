//! The expert pair: a coarse expert (one attention network over every
//! attribute) and a fine expert (one attention network per attribute
//! cluster), class scoring, mutual distillation and the combined decision rule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dan::{self, DanDims, DanNodes, DanOutput, DanParams, DanVars, Projected};
use crate::data::SplitSpec;
use crate::error::{Error, PartitionError, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Disjoint, covering, non-empty groups of attribute indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct ClusterPartition {
    clusters: Vec<Vec<usize>>,
    d: usize,
}

impl ClusterPartition {
    /// Validates `clusters` as a partition of `0..d`.
    pub fn new(clusters: Vec<Vec<usize>>, d: usize) -> Result<Self, PartitionError> {
        if clusters.is_empty() {
            return Err(PartitionError::Empty);
        }
        if let Some(cluster) = clusters.iter().position(Vec::is_empty) {
            return Err(PartitionError::EmptyCluster { cluster });
        }
        let mut seen = vec![false; d];
        for &index in clusters.iter().flatten() {
            if index >= d {
                return Err(PartitionError::OutOfRange { index, d });
            }
            if std::mem::replace(&mut seen[index], true) {
                return Err(PartitionError::Overlap { index });
            }
        }
        if let Some(index) = seen.iter().position(|s| !s) {
            return Err(PartitionError::Gap { index });
        }
        Ok(Self { clusters, d })
    }

    /// Validates `clusters`, taking `D` to be the total number of indices.
    pub fn from_clusters(clusters: Vec<Vec<usize>>) -> Result<Self, PartitionError> {
        let d = clusters.iter().map(Vec::len).sum();
        Self::new(clusters, d)
    }

    /// The trivial partition `{0..d}`.
    pub fn single(d: usize) -> Result<Self, PartitionError> {
        Self::new(vec![(0..d).collect()], d)
    }

    /// Consecutive blocks of the given sizes.
    pub fn contiguous(sizes: &[usize]) -> Result<Self, PartitionError> {
        let mut start = 0;
        let clusters = sizes
            .iter()
            .map(|&n| {
                let c = (start..start + n).collect();
                start += n;
                c
            })
            .collect();
        Self::new(clusters, start)
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn q(&self) -> usize {
        self.clusters.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }

    /// Cluster id of every attribute.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![0; self.d];
        for (q, c) in self.clusters.iter().enumerate() {
            for &i in c {
                out[i] = q;
            }
        }
        out
    }
}

impl TryFrom<Vec<Vec<usize>>> for ClusterPartition {
    type Error = PartitionError;

    fn try_from(clusters: Vec<Vec<usize>>) -> Result<Self, PartitionError> {
        Self::from_clusters(clusters)
    }
}

impl From<ClusterPartition> for Vec<Vec<usize>> {
    fn from(p: ClusterPartition) -> Self {
        p.clusters
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub c: usize,
    pub r: usize,
    pub g: usize,
    pub d: usize,
}

impl ModelDims {
    pub fn dan(&self) -> DanDims {
        DanDims {
            g: self.g,
            c: self.c,
            r: self.r,
        }
    }
}

/// Candidate set for a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Unseen classes only.
    Zsl,
    /// All classes.
    Gzsl,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zsl" => Ok(Mode::Zsl),
            "gzsl" => Ok(Mode::Gzsl),
            other => Err(Error::config(format!("unknown mode `{other}` (expected zsl or gzsl)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DednModel<T = f32> {
    pub cexp: DanParams<T>,
    pub fexp: Vec<DanParams<T>>,
    pub partition: ClusterPartition,
    pub dims: ModelDims,
}

impl<T: Scalar> DednModel<T> {
    pub fn new(cexp: DanParams<T>, fexp: Vec<DanParams<T>>, partition: ClusterPartition, d: usize) -> Result<Self> {
        let dd = cexp.dims()?;
        let dims = ModelDims {
            c: dd.c,
            r: dd.r,
            g: dd.g,
            d,
        };
        let model = Self {
            cexp,
            fexp,
            partition,
            dims,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn zeros(dims: ModelDims, partition: ClusterPartition) -> Result<Self> {
        let fexp = vec![DanParams::zeros(dims.dan()); partition.q()];
        Self::new(DanParams::zeros(dims.dan()), fexp, partition, dims.d)
    }

    /// Draws every matrix uniformly from `[-1/√(G·C), 1/√(G·C)]` (`W1`, `W2`)
    /// or `[-1/√(G·R), 1/√(G·R)]` (`W3`, `W4`), in the order cExp `W1..W4`,
    /// then each fExp subnetwork's `W1..W4`.
    pub fn init_uniform(dims: ModelDims, partition: ClusterPartition, rng: &mut impl Rng) -> Result<Self> {
        let mut model = Self::zeros(dims, partition)?;
        let fan_in = [dims.g * dims.c, dims.g * dims.c, dims.g * dims.r, dims.g * dims.r];
        for (i, w) in model.matrices_mut().into_iter().enumerate() {
            let bound = 1.0 / (fan_in[i % 4] as f64).sqrt();
            for x in w.data_mut() {
                *x = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.partition.d() != self.dims.d {
            return Err(Error::contract(format!(
                "partition covers {} attributes, model has {}",
                self.partition.d(),
                self.dims.d
            )));
        }
        if self.fexp.len() != self.partition.q() {
            return Err(Error::contract(format!(
                "{} fine subnetworks for {} clusters",
                self.fexp.len(),
                self.partition.q()
            )));
        }
        let want = self.dims.dan();
        for p in std::iter::once(&self.cexp).chain(&self.fexp) {
            if p.dims()? != want {
                return Err(Error::contract("attention networks disagree on (G, C, R)"));
            }
        }
        Ok(())
    }

    /// Every weight matrix, cExp first, in checkpoint order.
    pub fn matrices(&self) -> Vec<&Tensor<T>> {
        std::iter::once(&self.cexp)
            .chain(&self.fexp)
            .flat_map(|p| p.matrices())
            .collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Tensor<T>> {
        std::iter::once(&mut self.cexp)
            .chain(self.fexp.iter_mut())
            .flat_map(|p| p.matrices_mut())
            .collect()
    }

    /// Names matching [`DednModel::matrices`].
    pub fn matrix_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=4).map(|i| format!("cexp.w{i}")).collect();
        for q in 0..self.fexp.len() {
            names.extend((1..=4).map(|i| format!("fexp{q}.w{i}")));
        }
        names
    }

    pub fn cast<U: Scalar>(&self) -> DednModel<U> {
        DednModel {
            cexp: self.cexp.cast(),
            fexp: self.fexp.iter().map(DanParams::cast).collect(),
            partition: self.partition.clone(),
            dims: self.dims,
        }
    }

    pub fn to_tape(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            cexp: self.cexp.to_tape(tape),
            fexp: self.fexp.iter().map(|p| p.to_tape(tape)).collect(),
        }
    }

    pub fn to_tape_frozen(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            cexp: self.cexp.to_tape_frozen(tape),
            fexp: self.fexp.iter().map(|p| p.to_tape_frozen(tape)).collect(),
        }
    }

    pub(crate) fn check_inputs(&self, v: &Tensor<T>, f: &Tensor<T>) -> Result<()> {
        let ModelDims { c, r, g, d } = self.dims;
        if v.shape() != [d, g] {
            return Err(Error::shape("attribute vectors", v.shape(), &[d, g]));
        }
        if f.shape() != [c, r] {
            return Err(Error::shape("feature", f.shape(), &[c, r]));
        }
        Ok(())
    }
}

/// Tape handles for every matrix of a [`DednModel`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub cexp: DanVars,
    pub fexp: Vec<DanVars>,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        std::iter::once(&self.cexp)
            .chain(&self.fexp)
            .flat_map(|p| p.w)
            .collect()
    }
}

/// Per-tape quantities shared by every sample: projected attribute vectors
/// and the transposed class-attribute matrix.
#[derive(Clone, Debug)]
pub struct SharedNodes {
    cexp: Projected,
    fexp: Vec<Projected>,
    attributes_t: Var,
}

/// Everything one sample contributes to the losses.
#[derive(Clone, Debug)]
pub struct SampleNodes {
    pub cexp: DanNodes,
    pub fexp: Vec<DanNodes>,
    /// `D × 1`, canonical attribute order.
    pub o_ec: Var,
    pub o_ef: Var,
    /// `1 × K`.
    pub p_ec: Var,
    pub p_ef: Var,
}

impl SharedNodes {
    /// `v` is `D × G`, `attributes` is `K × D`.
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        vars: &ModelVars,
        partition: &ClusterPartition,
        v: &Tensor<T>,
        attributes: &Tensor<T>,
    ) -> Result<Self> {
        if vars.fexp.len() != partition.q() {
            return Err(Error::contract("fine subnetwork count differs from cluster count"));
        }
        let vv = tape.constant(v.clone());
        let cexp = vars.cexp.project(tape, vv)?;
        let mut fexp = Vec::with_capacity(partition.q());
        for (sub, rows) in vars.fexp.iter().zip(partition.clusters()) {
            let vq = tape.constant(v.select_rows(rows));
            fexp.push(sub.project(tape, vq)?);
        }
        let attributes_t = tape.constant(attributes.transpose());
        Ok(Self {
            cexp,
            fexp,
            attributes_t,
        })
    }

    /// Forward pass of both experts on one `C × R` feature. Expert outputs
    /// fuse the two branches with `lambda_rc`; the fine expert's cluster
    /// outputs are scattered back to canonical attribute order.
    pub fn sample<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        partition: &ClusterPartition,
        f: &Tensor<T>,
        lambda_rc: f64,
    ) -> Result<SampleNodes> {
        let f_t = tape.constant(f.transpose());
        let fv = tape.constant(f.clone());

        let cexp = self.cexp.forward(tape, fv, f_t)?;
        let o_ec = dan::combine_on(tape, cexp.region.output, cexp.channel.output, lambda_rc)?;

        let mut fexp = Vec::with_capacity(self.fexp.len());
        let mut parts = Vec::with_capacity(self.fexp.len());
        for proj in &self.fexp {
            let nodes = proj.forward(tape, fv, f_t)?;
            parts.push(dan::combine_on(tape, nodes.region.output, nodes.channel.output, lambda_rc)?);
            fexp.push(nodes);
        }
        let o_ef = tape.scatter_rows(&parts, partition.clusters())?;

        let p_ec = scores_on(tape, o_ec, self.attributes_t)?;
        let p_ef = scores_on(tape, o_ef, self.attributes_t)?;
        Ok(SampleNodes {
            cexp,
            fexp,
            o_ec,
            o_ef,
            p_ec,
            p_ef,
        })
    }
}

fn scores_on<T: Scalar>(tape: &mut Tape<T>, o: Var, attributes_t: Var) -> Result<Var> {
    let row = tape.transpose(o);
    tape.matmul(row, attributes_t)
}

/// Mutual distillation between the two experts' class scores.
pub fn distill_loss_on<T: Scalar>(tape: &mut Tape<T>, p_ec: Var, p_ef: Var) -> Result<Var> {
    dan::consistency_loss_on(tape, p_ec, p_ef)
}

/// Coarse-expert attribute scores for one sample, with its branch outputs.
pub fn cexp_forward<T: Scalar>(
    model: &DednModel<T>,
    v: &Tensor<T>,
    f: &Tensor<T>,
    lambda_rc: f64,
) -> Result<(Tensor<T>, DanOutput<T>)> {
    model.check_inputs(v, f)?;
    let out = dan::dan_forward(v, f, &model.cexp, true)?;
    Ok((out.fused(lambda_rc)?, out))
}

/// Fine-expert attribute scores for one sample in canonical attribute order,
/// with per-cluster branch outputs.
pub fn fexp_forward<T: Scalar>(
    model: &DednModel<T>,
    v: &Tensor<T>,
    f: &Tensor<T>,
    lambda_rc: f64,
) -> Result<(Tensor<T>, Vec<DanOutput<T>>)> {
    model.check_inputs(v, f)?;
    model.validate()?;
    let mut fused = vec![T::zero(); model.dims.d];
    let mut per_cluster = Vec::with_capacity(model.fexp.len());
    for (params, rows) in model.fexp.iter().zip(model.partition.clusters()) {
        let out = dan::dan_forward(&v.select_rows(rows), f, params, true)?;
        let o = out.fused(lambda_rc)?;
        for (&i, &x) in rows.iter().zip(o.data()) {
            fused[i] = x;
        }
        per_cluster.push(out);
    }
    Ok((Tensor::column(fused), per_cluster))
}

/// `p = o · Aᵀ`: one score per class. `o` holds `D` entries, `a` is `K × D`.
pub fn class_scores<T: Scalar>(o: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = a.dim2();
    if o.numel() != d {
        return Err(Error::shape("class_scores", o.shape(), a.shape()));
    }
    let scores = (0..a.rows())
        .map(|k| a.row_slice(k).iter().zip(o.data()).map(|(&x, &y)| x * y).sum())
        .collect();
    Ok(Tensor::row(scores))
}

pub fn distill_loss<T: Scalar>(p_ec: &Tensor<T>, p_ef: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let a = tape.constant(p_ec.clone());
    let b = tape.constant(p_ef.clone());
    let l = distill_loss_on(&mut tape, a, b)?;
    tape.value(l).item()
}

/// Index of the largest value among `candidates`; ties go to the lowest id.
pub fn argmax_among<T: Scalar>(scores: &[T], candidates: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    for k in sorted {
        match best {
            Some(b) if scores[k] <= scores[b] => {}
            _ => best = Some(k),
        }
    }
    best
}

/// `argmax λ_e·p_ec + (1-λ_e)·p_ef` over all classes (GZSL) or the unseen
/// classes (ZSL).
pub fn combined_prediction<T: Scalar>(
    p_ec: &Tensor<T>,
    p_ef: &Tensor<T>,
    lambda_e: f64,
    mode: Mode,
    splits: &SplitSpec,
) -> Result<usize> {
    let combined = dan::combine_outputs(p_ec, p_ef, lambda_e)?;
    let candidates: Vec<usize> = match mode {
        Mode::Gzsl => (0..combined.numel()).collect(),
        Mode::Zsl => splits.unseen_classes.clone(),
    };
    if let Some(&bad) = candidates.iter().find(|&&k| k >= combined.numel()) {
        return Err(Error::contract(format!("candidate class {bad} out of range")));
    }
    argmax_among(combined.data(), &candidates)
        .ok_or_else(|| Error::contract("empty candidate set for prediction"))
}
