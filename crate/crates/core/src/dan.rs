//! Dual attention network: a region branch that attends over the `R`
//! spatial positions of a feature map and a channel branch that attends over
//! its `C` channels, each producing one score per attribute.
//!
//! Shapes used throughout: `v` is `D' × G` (one semantic vector per
//! attribute), `f` is the flattened feature `C × R` and `f_t` its transpose.
//! Attribute scores are `D' × 1` columns.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// The four learnable matrices of one attention network.
#[derive(Clone, Debug, PartialEq)]
pub struct DanParams<T = f32> {
    /// Region similarity map, `G × C`.
    pub w1: Tensor<T>,
    /// Region attention map, `G × C`.
    pub w2: Tensor<T>,
    /// Channel similarity map, `G × R`.
    pub w3: Tensor<T>,
    /// Channel attention map, `G × R`.
    pub w4: Tensor<T>,
}

/// `(G, C, R)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DanDims {
    pub g: usize,
    pub c: usize,
    pub r: usize,
}

impl<T: Scalar> DanParams<T> {
    pub fn new(w1: Tensor<T>, w2: Tensor<T>, w3: Tensor<T>, w4: Tensor<T>) -> Result<Self> {
        let p = Self { w1, w2, w3, w4 };
        p.dims()?;
        Ok(p)
    }

    pub fn zeros(dims: DanDims) -> Self {
        Self {
            w1: Tensor::zeros([dims.g, dims.c]),
            w2: Tensor::zeros([dims.g, dims.c]),
            w3: Tensor::zeros([dims.g, dims.r]),
            w4: Tensor::zeros([dims.g, dims.r]),
        }
    }

    /// Validates that the matrices agree on one `(G, C, R)` and returns it.
    pub fn dims(&self) -> Result<DanDims> {
        let (g, c) = self.w1.dim2();
        let (_, r) = self.w3.dim2();
        let dims = DanDims { g, c, r };
        for (w, want) in [(&self.w1, [g, c]), (&self.w2, [g, c]), (&self.w3, [g, r]), (&self.w4, [g, r])] {
            if w.shape() != want {
                return Err(Error::shape("DanParams", w.shape(), &want));
            }
        }
        if !self.matrices().iter().all(|w| w.is_finite()) {
            return Err(Error::contract("DanParams hold non-finite values"));
        }
        Ok(dims)
    }

    pub fn matrices(&self) -> [&Tensor<T>; 4] {
        [&self.w1, &self.w2, &self.w3, &self.w4]
    }

    pub fn matrices_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w1, &mut self.w2, &mut self.w3, &mut self.w4]
    }

    pub fn cast<U: Scalar>(&self) -> DanParams<U> {
        DanParams {
            w1: self.w1.cast(),
            w2: self.w2.cast(),
            w3: self.w3.cast(),
            w4: self.w4.cast(),
        }
    }

    /// Registers the matrices as differentiable leaves.
    pub fn to_tape(&self, tape: &mut Tape<T>) -> DanVars {
        DanVars {
            w: self.matrices().map(|w| tape.leaf(w.clone())),
        }
    }

    /// Registers the matrices as constants (inference only).
    pub fn to_tape_frozen(&self, tape: &mut Tape<T>) -> DanVars {
        DanVars {
            w: self.matrices().map(|w| tape.constant(w.clone())),
        }
    }
}

/// Tape handles of one network's `[W1, W2, W3, W4]`.
#[derive(Clone, Copy, Debug)]
pub struct DanVars {
    pub w: [Var; 4],
}

/// `V · W_i` for the four matrices. These do not depend on the sample, so
/// they are computed once and reused for every sample on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Projected {
    vw: [Var; 4],
}

impl DanVars {
    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, v: Var) -> Result<Projected> {
        let mut vw = [v; 4];
        for (out, &w) in vw.iter_mut().zip(&self.w) {
            *out = tape.matmul(v, w)?;
        }
        Ok(Projected { vw })
    }
}

/// Score, attention and output nodes of one branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchNodes {
    /// `D' × R` (region) or `D' × C` (channel).
    pub score: Var,
    pub attention: Var,
    /// `D' × 1`.
    pub output: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DanNodes {
    pub region: BranchNodes,
    pub channel: BranchNodes,
}

fn branch<T: Scalar>(tape: &mut Tape<T>, vw_score: Var, vw_attn: Var, feat: Var) -> Result<BranchNodes> {
    let score = tape.matmul(vw_score, feat)?;
    let logits = tape.matmul(vw_attn, feat)?;
    let attention = tape.softmax_rows(logits);
    let weighted = tape.mul(score, attention)?;
    let output = tape.row_sums(weighted);
    Ok(BranchNodes { score, attention, output })
}

impl Projected {
    /// Both branches for one sample. `f` is `C × R`, `f_t` is `R × C`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, f: Var, f_t: Var) -> Result<DanNodes> {
        let [vw1, vw2, vw3, vw4] = self.vw;
        Ok(DanNodes {
            region: branch(tape, vw1, vw2, f)?,
            channel: branch(tape, vw3, vw4, f_t)?,
        })
    }
}

fn as_row<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Var {
    if tape.value(v).dim2().0 == 1 {
        v
    } else {
        tape.transpose(v)
    }
}

/// `½(KL(σ(a)‖σ(b)) + KL(σ(b)‖σ(a))) + ‖a − b‖²`, with `σ` the softmax over
/// all entries of a score vector (row or column). Used both for aligning the
/// two branches and for distilling between the two experts.
pub fn consistency_loss_on<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.value(a).shape().to_vec(), tape.value(b).shape().to_vec());
    if sa != sb {
        return Err(Error::shape("consistency_loss", &sa, &sb));
    }
    let ar = as_row(tape, a);
    let br = as_row(tape, b);
    let p = tape.softmax_rows(ar);
    let q = tape.softmax_rows(br);
    let kl_pq = tape.kl_div(p, q)?;
    let kl_qp = tape.kl_div(q, p)?;
    let kl = tape.add(kl_pq, kl_qp)?;
    let half = tape.scale(kl, T::lit(0.5));
    let sq = tape.sq_dist(a, b)?;
    tape.add(half, sq)
}

/// Alignment between region and channel attribute scores.
pub fn align_loss_on<T: Scalar>(tape: &mut Tape<T>, o_r: Var, o_c: Var) -> Result<Var> {
    consistency_loss_on(tape, o_r, o_c)
}

pub fn check_lambda(name: &str, lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in [0, 1], got {lambda}")))
    }
}

/// `λ·a + (1-λ)·b`.
pub fn combine_on<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, lambda: f64) -> Result<Var> {
    check_lambda("lambda", lambda)?;
    let wa = tape.scale(a, T::lit(lambda));
    let wb = tape.scale(b, T::lit(1.0 - lambda));
    tape.add(wa, wb)
}

/// Value-level result of one branch.
#[derive(Clone, Debug)]
pub struct BranchOutput<T = f32> {
    pub score: Tensor<T>,
    pub attention: Tensor<T>,
    /// Length-`D'` column.
    pub output: Tensor<T>,
}

/// Branch outputs of one network for one sample.
#[derive(Clone, Debug)]
pub struct DanOutput<T = f32> {
    /// `O_r`, `D' × 1`.
    pub o_region: Tensor<T>,
    /// `O_c`, `D' × 1`.
    pub o_channel: Tensor<T>,
    /// Region attention `D' × R`, kept only on request.
    pub a_region: Option<Tensor<T>>,
    /// Channel attention `D' × C`, kept only on request.
    pub a_channel: Option<Tensor<T>>,
}

impl<T: Scalar> DanOutput<T> {
    pub fn fused(&self, lambda_rc: f64) -> Result<Tensor<T>> {
        combine_outputs(&self.o_region, &self.o_channel, lambda_rc)
    }

    pub(crate) fn from_nodes(tape: &Tape<T>, nodes: &DanNodes, keep_attention: bool) -> Self {
        Self {
            o_region: tape.value(nodes.region.output).clone(),
            o_channel: tape.value(nodes.channel.output).clone(),
            a_region: keep_attention.then(|| tape.value(nodes.region.attention).clone()),
            a_channel: keep_attention.then(|| tape.value(nodes.channel.attention).clone()),
        }
    }
}

fn run_branch<T: Scalar>(
    v: &Tensor<T>,
    feat: &Tensor<T>,
    w_score: &Tensor<T>,
    w_attn: &Tensor<T>,
) -> Result<BranchOutput<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(v.clone());
    let feat = tape.constant(feat.clone());
    let ws = tape.constant(w_score.clone());
    let wa = tape.constant(w_attn.clone());
    let vws = tape.matmul(v, ws)?;
    let vwa = tape.matmul(v, wa)?;
    let b = branch(&mut tape, vws, vwa, feat)?;
    Ok(BranchOutput {
        score: tape.value(b.score).clone(),
        attention: tape.value(b.attention).clone(),
        output: tape.value(b.output).clone(),
    })
}

/// Region branch: scores `v·w1·f`, attention softmax over regions of
/// `v·w2·f`, output the attention-weighted score per attribute.
pub fn region_branch<T: Scalar>(
    v: &Tensor<T>,
    f: &Tensor<T>,
    w1: &Tensor<T>,
    w2: &Tensor<T>,
) -> Result<BranchOutput<T>> {
    run_branch(v, f, w1, w2)
}

/// Channel branch: the mirror of [`region_branch`] on `f_t` (`R × C`),
/// attending over channels.
pub fn channel_branch<T: Scalar>(
    v: &Tensor<T>,
    f_t: &Tensor<T>,
    w3: &Tensor<T>,
    w4: &Tensor<T>,
) -> Result<BranchOutput<T>> {
    run_branch(v, f_t, w3, w4)
}

pub fn align_loss<T: Scalar>(o_r: &Tensor<T>, o_c: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let a = tape.constant(o_r.clone());
    let b = tape.constant(o_c.clone());
    let l = align_loss_on(&mut tape, a, b)?;
    tape.value(l).item()
}

pub fn combine_outputs<T: Scalar>(o_r: &Tensor<T>, o_c: &Tensor<T>, lambda_rc: f64) -> Result<Tensor<T>> {
    check_lambda("lambda_rc", lambda_rc)?;
    let a = o_r.scale(T::lit(lambda_rc));
    let b = o_c.scale(T::lit(1.0 - lambda_rc));
    a.add(&b).map_err(|_| Error::shape("combine_outputs", o_r.shape(), o_c.shape()))
}

/// Runs both branches of `params` on one sample.
pub fn dan_forward<T: Scalar>(
    v: &Tensor<T>,
    f: &Tensor<T>,
    params: &DanParams<T>,
    keep_attention: bool,
) -> Result<DanOutput<T>> {
    let mut tape = Tape::new();
    let vars = params.to_tape_frozen(&mut tape);
    let v = tape.constant(v.clone());
    let f_t = tape.constant(f.transpose());
    let f = tape.constant(f.clone());
    let nodes = vars.project(&mut tape, v)?.forward(&mut tape, f, f_t)?;
    Ok(DanOutput::from_nodes(&tape, &nodes, keep_attention))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn region_branch_hand_example() {
        let one = m(&[&[1.0]]);
        let out = region_branch(&one, &m(&[&[1.0, 3.0]]), &one, &one).unwrap();
        assert_eq!(out.score.data(), &[1.0, 3.0]);
        assert!((out.attention.data()[0] - 0.11920).abs() < 1e-4);
        assert!((out.attention.data()[1] - 0.88080).abs() < 1e-4);
        assert!((out.output.data()[0] - 2.7616).abs() < 1e-3);
    }

    #[test]
    fn region_branch_constant_regions_and_zero_scores() {
        let one = m(&[&[1.0]]);
        let out = region_branch(&one, &m(&[&[2.0, 2.0]]), &one, &one).unwrap();
        assert_eq!(out.attention.data(), &[0.5, 0.5]);
        assert_eq!(out.output.data(), &[2.0]);
        let zero = m(&[&[0.0]]);
        let out = region_branch(&one, &m(&[&[1.0, 3.0]]), &zero, &m(&[&[5.0]])).unwrap();
        assert_eq!(out.output.data(), &[0.0]);
    }

    #[test]
    fn channel_branch_mirrors_region_branch() {
        let one = m(&[&[1.0]]);
        let out = channel_branch(&one, &m(&[&[1.0, 3.0]]), &one, &one).unwrap();
        assert!((out.output.data()[0] - 2.7616).abs() < 1e-3);
        let out = channel_branch(&one, &m(&[&[4.0, 4.0]]), &one, &one).unwrap();
        assert_eq!(out.attention.data(), &[0.5, 0.5]);
        assert_eq!(out.output.data(), &[4.0]);
        let out = channel_branch(&one, &m(&[&[1.0, 3.0]]), &m(&[&[0.0]]), &one).unwrap();
        assert_eq!(out.output.data(), &[0.0]);
    }

    #[test]
    fn branch_dimension_mismatch() {
        let v = Tensor::<f64>::zeros([2, 3]);
        let f = Tensor::zeros([4, 5]);
        assert!(region_branch(&v, &f, &Tensor::zeros([2, 4]), &Tensor::zeros([3, 4])).is_err());
    }

    #[test]
    fn align_loss_examples() {
        let a = Tensor::column(vec![1.0, 1.0]);
        let b = Tensor::column(vec![1.0, 3.0]);
        assert_eq!(align_loss(&a, &a).unwrap(), 0.0);
        let ab: f64 = align_loss(&a, &b).unwrap();
        assert!((ab - 4.3808).abs() < 1e-3, "{ab}");
        assert_eq!(ab, align_loss(&b, &a).unwrap());
        assert!(align_loss(&a, &Tensor::column(vec![1.0])).is_err());
    }

    #[test]
    fn align_loss_single_attribute_keeps_only_squared_term() {
        let a = Tensor::column(vec![2.0f64]);
        let b = Tensor::column(vec![-1.0]);
        assert_eq!(align_loss(&a, &b).unwrap(), 9.0);
    }

    #[test]
    fn combine_examples() {
        let r = Tensor::column(vec![0.0f64]);
        let c = Tensor::column(vec![4.0]);
        assert_eq!(combine_outputs(&r, &c, 1.0).unwrap(), r);
        assert_eq!(combine_outputs(&r, &c, 0.0).unwrap(), c);
        let x = combine_outputs(&r, &c, 0.8).unwrap();
        assert!((x.data()[0] - 0.8).abs() < 1e-12);
        assert!(matches!(combine_outputs(&r, &c, 1.5), Err(Error::Config(_))));
        assert!(matches!(combine_outputs(&r, &c, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let dims = DanDims { g: 2, c: 3, r: 4 };
        let p = DanParams::<f64>::zeros(dims);
        let v = Tensor::full([5, 2], 0.7);
        let f = Tensor::full([3, 4], -1.2);
        let out = dan_forward(&v, &f, &p, true).unwrap();
        assert!(out.o_region.data().iter().all(|&x| x == 0.0));
        assert!(out.o_channel.data().iter().all(|&x| x == 0.0));
        assert_eq!(out.a_region.unwrap().shape(), &[5, 4]);
        assert_eq!(out.a_channel.unwrap().shape(), &[5, 3]);
    }

    #[test]
    fn params_reject_inconsistent_shapes() {
        let ok = DanParams::<f32>::zeros(DanDims { g: 2, c: 3, r: 4 });
        assert!(ok.dims().is_ok());
        let mut bad = ok.clone();
        bad.w4 = Tensor::zeros([2, 5]);
        assert!(bad.dims().is_err());
    }
}
