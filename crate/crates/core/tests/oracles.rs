//! Forward passes and losses recomputed with plain nested loops.

use dedn_core::dan::{dan_forward, DanParams};
use dedn_core::data::SplitSpec;
use dedn_core::objectives::{total_loss, total_loss_on, Batch, LossWeights};
use dedn_core::tensor::Tape;
use dedn_core::{ClusterPartition, DednModel, ModelDims, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn tensor(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

fn transpose(m: &Mat) -> Mat {
    (0..m[0].len()).map(|j| m.iter().map(|row| row[j]).collect()).collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// One branch: `Σ_j (v·ws·f)[i,j] · softmax_j((v·wa·f)[i,·])` per row `i`.
fn branch(v: &Mat, f: &Mat, ws: &Mat, wa: &Mat) -> Vec<f64> {
    let g = ws.len();
    let (c, r) = (f.len(), f[0].len());
    let bilinear = |w: &Mat, i: usize, j: usize| {
        let mut s = 0.0;
        for a in 0..g {
            for b in 0..c {
                s += v[i][a] * w[a][b] * f[b][j];
            }
        }
        s
    };
    (0..v.len())
        .map(|i| {
            let score: Vec<f64> = (0..r).map(|j| bilinear(ws, i, j)).collect();
            let att = softmax(&(0..r).map(|j| bilinear(wa, i, j)).collect::<Vec<_>>());
            score.iter().zip(&att).map(|(s, a)| s * a).sum()
        })
        .collect()
}

struct Net {
    w: [Mat; 4],
}

impl Net {
    fn random(rng: &mut ChaCha8Rng, g: usize, c: usize, r: usize) -> Self {
        Self {
            w: [rand_mat(rng, g, c), rand_mat(rng, g, c), rand_mat(rng, g, r), rand_mat(rng, g, r)],
        }
    }

    fn params(&self) -> DanParams<f64> {
        let [a, b, c, d] = &self.w;
        DanParams::new(tensor(a), tensor(b), tensor(c), tensor(d)).unwrap()
    }

    /// (region output, channel output).
    fn forward(&self, v: &Mat, f: &Mat) -> (Vec<f64>, Vec<f64>) {
        let region = branch(v, f, &self.w[0], &self.w[1]);
        let channel = branch(v, &transpose(f), &self.w[2], &self.w[3]);
        (region, channel)
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn consistency(a: &[f64], b: &[f64]) -> f64 {
    let (sa, sb) = (softmax(a), softmax(b));
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    0.5 * (kl(&sa, &sb) + kl(&sb, &sa)) + sq
}

fn fuse(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect()
}

#[test]
fn dan_forward_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (d, g, c, r) = (
            rng.random_range(1..=5),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=5),
        );
        let net = Net::random(&mut rng, g, c, r);
        let v = rand_mat(&mut rng, d, g);
        let f = rand_mat(&mut rng, c, r);
        let out = dan_forward(&tensor(&v), &tensor(&f), &net.params(), true).unwrap();
        let (o_r, o_c) = net.forward(&v, &f);
        for (x, y) in out.o_region.data().iter().zip(&o_r) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in out.o_channel.data().iter().zip(&o_c) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(out.a_region.unwrap().shape(), &[d, r]);
        assert_eq!(out.a_channel.unwrap().shape(), &[d, c]);
    }
}

struct Problem {
    cexp: Net,
    fexp: Vec<Net>,
    clusters: Vec<Vec<usize>>,
    v: Mat,
    attrs: Mat,
    feats: Vec<Mat>,
    labels: Vec<usize>,
    splits: SplitSpec,
}

const K: usize = 3;
const D: usize = 4;
const C: usize = 2;
const R: usize = 2;
const G: usize = 3;

impl Problem {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            cexp: Net::random(&mut rng, G, C, R),
            fexp: vec![Net::random(&mut rng, G, C, R), Net::random(&mut rng, G, C, R)],
            clusters: vec![vec![0, 2], vec![1, 3]],
            v: rand_mat(&mut rng, D, G),
            attrs: rand_mat(&mut rng, K, D),
            feats: (0..3).map(|_| rand_mat(&mut rng, C, R)).collect(),
            labels: vec![0, 1, 0],
            splits: SplitSpec {
                seen_classes: vec![0, 1],
                unseen_classes: vec![2],
                train_indices: vec![],
                test_indices: vec![],
            },
        }
    }

    fn model(&self) -> DednModel<f64> {
        DednModel::new(
            self.cexp.params(),
            self.fexp.iter().map(Net::params).collect(),
            ClusterPartition::new(self.clusters.clone(), D).unwrap(),
            D,
        )
        .unwrap()
    }

    fn class_scores(&self, o: &[f64]) -> Vec<f64> {
        self.attrs.iter().map(|a| a.iter().zip(o).map(|(x, y)| x * y).sum()).collect()
    }

    fn mal(&self, p: &[f64], y: usize, eps: f64) -> f64 {
        let shifted: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(c, &s)| {
                if c == y {
                    s - 2.0 * eps
                } else if self.splits.is_seen(c) {
                    s + eps
                } else {
                    s
                }
            })
            .collect();
        -softmax(&shifted)[y].ln()
    }

    fn total(&self, w: &LossWeights, lambda_rc: f64) -> f64 {
        let mut sum = 0.0;
        for (f, &y) in self.feats.iter().zip(&self.labels) {
            let (cr, cc) = self.cexp.forward(&self.v, f);
            let o_ec = fuse(&cr, &cc, lambda_rc);
            let mut o_ef = vec![0.0; D];
            let mut align_ef = 0.0;
            for (net, rows) in self.fexp.iter().zip(&self.clusters) {
                let vq: Mat = rows.iter().map(|&i| self.v[i].clone()).collect();
                let (fr, fc) = net.forward(&vq, f);
                for (&i, x) in rows.iter().zip(fuse(&fr, &fc, lambda_rc)) {
                    o_ef[i] = x;
                }
                align_ef += consistency(&fr, &fc) / self.fexp.len() as f64;
            }
            let (p_ec, p_ef) = (self.class_scores(&o_ec), self.class_scores(&o_ef));
            sum += self.mal(&p_ec, y, w.epsilon)
                + self.mal(&p_ef, y, w.epsilon)
                + w.beta * (consistency(&cr, &cc) + align_ef)
                + w.gamma * consistency(&p_ec, &p_ef);
        }
        sum / self.feats.len() as f64
    }
}

#[test]
fn total_loss_matches_loops() {
    for seed in 0..10 {
        let pb = Problem::new(seed);
        let model = pb.model();
        let v = tensor(&pb.v);
        let attrs = tensor(&pb.attrs);
        let feats: Vec<Tensor<f64>> = pb.feats.iter().map(tensor).collect();
        let batch = Batch {
            v: &v,
            attributes: &attrs,
            features: &feats,
            labels: &pb.labels,
            splits: &pb.splits,
        };
        for (w, lambda_rc) in [
            (LossWeights::default(), 0.8),
            (LossWeights { beta: 0.5, gamma: 2.0, epsilon: 0.3 }, 0.25),
            (LossWeights { beta: 0.0, gamma: 0.0, epsilon: 0.0 }, 1.0),
        ] {
            let got = total_loss(&model, &batch, &w, lambda_rc).unwrap();
            let want = pb.total(&w, lambda_rc);
            assert!((got.total - want).abs() < 1e-5, "seed {seed}: {} vs {want}", got.total);
        }
    }
}

/// Without distillation the coarse expert's gradient cannot depend on the
/// fine expert's parameters.
#[test]
fn without_distillation_coarse_gradient_ignores_fine_expert() {
    let pb = Problem::new(3);
    let v = tensor(&pb.v);
    let attrs = tensor(&pb.attrs);
    let feats: Vec<Tensor<f64>> = pb.feats.iter().map(tensor).collect();
    let batch = Batch {
        v: &v,
        attributes: &attrs,
        features: &feats,
        labels: &pb.labels,
        splits: &pb.splits,
    };
    let grads_of = |model: &DednModel<f64>, gamma: f64| {
        let mut tape = Tape::new();
        let vars = model.to_tape(&mut tape);
        let w = LossWeights { beta: 0.3, gamma, epsilon: 1.0 };
        let t = total_loss_on(&mut tape, &vars, &model.partition, &batch, &w, 0.6).unwrap();
        let g = tape.backward(t.total).unwrap();
        vars.all()[..4].iter().map(|&x| g.wrt(x)).collect::<Vec<_>>()
    };
    let a = pb.model();
    let mut b = a.clone();
    for w in b.fexp.iter_mut().flat_map(|p| p.matrices_mut()) {
        w.data_mut().iter_mut().for_each(|x| *x = -2.0 * *x + 0.1);
    }
    let (ga, gb) = (grads_of(&a, 0.0), grads_of(&b, 0.0));
    for (x, y) in ga.iter().zip(&gb) {
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
    let (ga, gb) = (grads_of(&a, 0.5), grads_of(&b, 0.5));
    let differs = ga.iter().zip(&gb).any(|(x, y)| x.data().iter().zip(y.data()).any(|(p, q)| (p - q).abs() > 1e-9));
    assert!(differs, "distillation should couple the experts");
}

#[test]
fn model_dims_follow_the_parameters() {
    let pb = Problem::new(0);
    assert_eq!(pb.model().dims, ModelDims { c: C, r: R, g: G, d: D });
}
