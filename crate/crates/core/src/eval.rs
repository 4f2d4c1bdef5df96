//! Zero-shot classification, cross-modal retrieval, linear probing.
//!
//! Rankings break ties toward the lower index.

use serde::{Deserialize, Serialize};

use crate::data::{PairedEmbeddingSet, SyntheticWorld};
use crate::error::{Error, Result};
use crate::graph::softmax_in_place;
use crate::model::{DfeParameters, Modality};
use crate::optim::{AdamConfig, OptimizerState};
use crate::tensor::{matmul_kernel, Real, Tensor};
use crate::train::{head_step, ClassifierHead, HeadConfig};

/// One modality-2 embedding per class: the stand-in for class-name text.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypeSet {
    pub names: Vec<String>,
    pub proto2: Tensor<f32>,
}

impl ClassPrototypeSet {
    pub fn new(names: Vec<String>, proto2: Tensor<f32>) -> Result<Self> {
        if proto2.rank() != 2 || proto2.rows() != names.len() {
            return Err(Error::contract(format!(
                "{} names for prototype tensor {:?}",
                names.len(),
                proto2.shape()
            )));
        }
        if names.len() < 2 {
            return Err(Error::contract("need at least two classes"));
        }
        if let Some(row) = (0..proto2.rows()).find(|&i| !proto2.row(i).iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite {
                what: "prototype",
                row,
            });
        }
        Ok(ClassPrototypeSet { names, proto2 })
    }

    /// Noise-free modality-2 images of the class means of `world`.
    pub fn from_world(world: &SyntheticWorld) -> Self {
        let p = world.prototypes();
        let names = (0..p.n()).map(|c| format!("class{c}")).collect();
        ClassPrototypeSet {
            names,
            proto2: p.m2().clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub direction: Option<String>,
    pub value: f64,
    pub support: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class: Option<Vec<f64>>,
}

impl EvalReport {
    fn new(metric: &str, k: Option<usize>, direction: Option<&str>, value: f64, support: usize) -> Self {
        EvalReport {
            metric: metric.to_string(),
            k,
            direction: direction.map(str::to_string),
            value,
            support,
            per_class: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Position of `target` in `row` sorted descending, lower index first on ties.
pub fn rank_of<F: Real>(row: &[F], target: usize) -> usize {
    let v = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < target))
        .count()
}

fn check_ks(ks: &[usize], limit: usize, what: &str) -> Result<()> {
    match ks.iter().find(|&&k| k == 0 || k > limit) {
        Some(k) => Err(Error::contract(format!("k = {k} outside 1..={limit} {what}"))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug)]
pub struct ZeroShotResult<F> {
    /// Row-stochastic `[n×C]` class probabilities.
    pub probabilities: Tensor<F>,
    pub predictions: Vec<u32>,
    pub reports: Vec<EvalReport>,
}

/// Zero-shot scoring from a precomputed `[n×C]` similarity matrix.
pub fn zero_shot_from_similarity<F: Real>(
    sim: &Tensor<F>,
    labels: &[u32],
    tau: F,
    topk: &[usize],
) -> Result<ZeroShotResult<F>> {
    let (n, c) = (sim.rows(), sim.cols());
    if labels.len() != n {
        return Err(Error::contract(format!("{} labels for {n} queries", labels.len())));
    }
    check_ks(topk, c, "classes")?;
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= c) {
        return Err(Error::contract(format!("label {y} outside {c} classes")));
    }
    let mut probs = sim.data().to_vec();
    for row in probs.chunks_mut(c) {
        for v in row.iter_mut() {
            *v /= tau;
        }
        softmax_in_place(row);
    }
    let probabilities = Tensor::new(&[n, c], probs)?;
    let ranks: Vec<usize> = (0..n)
        .map(|i| rank_of(probabilities.row(i), labels[i] as usize))
        .collect();
    let predictions = (0..n)
        .map(|i| crate::train::argmax(probabilities.row(i)) as u32)
        .collect();
    let reports = topk
        .iter()
        .map(|&k| {
            let mut hits = vec![0usize; c];
            let mut support = vec![0usize; c];
            for (i, &r) in ranks.iter().enumerate() {
                support[labels[i] as usize] += 1;
                if r < k {
                    hits[labels[i] as usize] += 1;
                }
            }
            let total: usize = hits.iter().sum();
            let mut rep = EvalReport::new("zeroshot_top", Some(k), None, total as f64 / n as f64, n);
            rep.per_class = Some(
                hits.iter()
                    .zip(&support)
                    .map(|(&h, &s)| if s == 0 { 0.0 } else { h as f64 / s as f64 })
                    .collect(),
            );
            rep
        })
        .collect();
    Ok(ZeroShotResult {
        probabilities,
        predictions,
        reports,
    })
}

/// Encodes queries with context 1 and prototypes with context 2, then
/// scores top-k accuracy of the softmax over classes.
pub fn zero_shot_classify<F: Real>(
    params: &DfeParameters<F>,
    queries1: &Tensor<f32>,
    labels: &[u32],
    protos: &ClassPrototypeSet,
    topk: &[usize],
) -> Result<ZeroShotResult<F>> {
    let zq = params.encode(&queries1.cast(), Modality::First)?;
    let zp = params.encode(&protos.proto2.cast(), Modality::Second)?;
    let sim = similarity(&zq, &zp);
    zero_shot_from_similarity(&sim, labels, params.tau(), topk)
}

/// `a · bᵀ` for row-major `a[n×d]`, `b[m×d]`.
pub fn similarity<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (n, d, m) = (a.rows(), a.cols(), b.rows());
    let mut bt = vec![F::zero(); d * m];
    for j in 0..m {
        for (p, &v) in b.row(j).iter().enumerate() {
            bt[p * m + j] = v;
        }
    }
    Tensor::new(&[n, m], matmul_kernel(a.data(), &bt, n, d, m)).expect("non-empty")
}

/// Recall@k in both directions for latents whose row `i` on each side
/// is a true pair.
pub fn recall_at_k_latents<F: Real>(z1: &Tensor<F>, z2: &Tensor<F>, ks: &[usize]) -> Result<Vec<EvalReport>> {
    if z1.shape() != z2.shape() || z1.rank() != 2 {
        return Err(Error::Shape {
            op: "recall_at_k",
            lhs: z1.shape().to_vec(),
            rhs: z2.shape().to_vec(),
        });
    }
    let n = z1.rows();
    check_ks(ks, n, "pairs")?;
    let sim = similarity(z1, z2);
    let simt = similarity(z2, z1);
    let mut out = Vec::new();
    for (dir, s) in [("1to2", &sim), ("2to1", &simt)] {
        let ranks: Vec<usize> = (0..n).map(|i| rank_of(s.row(i), i)).collect();
        for &k in ks {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            out.push(EvalReport::new("recall", Some(k), Some(dir), hits as f64 / n as f64, n));
        }
    }
    Ok(out)
}

/// Encodes both sides of `pairs` and reports recall@k per direction.
pub fn retrieval_recall_at_k<F: Real>(
    params: &DfeParameters<F>,
    pairs: &PairedEmbeddingSet,
    ks: &[usize],
) -> Result<Vec<EvalReport>> {
    check_ks(ks, pairs.n(), "pairs")?;
    let z1 = params.encode(&pairs.m1().cast(), Modality::First)?;
    let z2 = params.encode(&pairs.m2().cast(), Modality::Second)?;
    recall_at_k_latents(&z1, &z2, ks)
}

#[derive(Clone, Debug)]
pub struct ProbeResult<F> {
    pub head: ClassifierHead<F>,
    /// `(epoch, test accuracy)`; the last entry is the final epoch.
    pub curve: Vec<(usize, f64)>,
    pub final_accuracy: f64,
    pub losses: Vec<f64>,
}

/// Trains a zero-initialized linear head on cached modality-1 features of
/// the frozen encoder, evaluating on `test` every `eval_every` epochs.
pub fn train_linear_probe<F: Real>(
    params: &DfeParameters<F>,
    train: &PairedEmbeddingSet,
    test: &PairedEmbeddingSet,
    config: &HeadConfig,
) -> Result<ProbeResult<F>> {
    let train_labels = train.require_labels("linear probe")?;
    let test_labels = test.require_labels("linear probe")?;
    let classes = train.num_classes().max(test.num_classes());
    if classes < 2 {
        return Err(Error::contract("need at least two classes"));
    }
    let before = params.clone();
    let f_train = params.encode(&train.m1().cast(), Modality::First)?;
    let f_test = params.encode(&test.m1().cast(), Modality::First)?;
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut head = ClassifierHead::zeros(params.config.d_out, classes);
    let mut state = OptimizerState::for_params(&head.params);
    let every = config.eval_every.max(1);
    let mut curve = Vec::new();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        losses.push(head_step(&mut head, &mut state, &f_train, train_labels, &adam)?);
        if epoch % every == 0 || epoch == config.epochs {
            curve.push((epoch, head.accuracy(&f_test, test_labels)?));
        }
    }
    if config.epochs == 0 {
        curve.push((0, head.accuracy(&f_test, test_labels)?));
    }
    assert_eq!(&before, params, "linear probe mutated the encoder");
    let final_accuracy = curve.last().expect("non-empty").1;
    Ok(ProbeResult {
        head,
        curve,
        final_accuracy,
        losses,
    })
}

pub fn accuracy(pred: &[u32], truth: &[u32]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    /// `matrix[true][pred]` counts.
    pub matrix: Vec<Vec<usize>>,
    pub report: EvalReport,
}

pub fn confusion_and_accuracy(pred: &[u32], truth: &[u32]) -> Result<Confusion> {
    let acc = accuracy(pred, truth)?;
    let c = pred.iter().chain(truth).map(|&v| v as usize + 1).max().unwrap_or(0);
    let mut matrix = vec![vec![0usize; c]; c];
    for (&p, &t) in pred.iter().zip(truth) {
        matrix[t as usize][p as usize] += 1;
    }
    let per_class = matrix
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let s: usize = row.iter().sum();
            if s == 0 {
                0.0
            } else {
                row[i] as f64 / s as f64
            }
        })
        .collect();
    let mut report = EvalReport::new("accuracy", None, None, acc, pred.len());
    report.per_class = Some(per_class);
    Ok(Confusion { matrix, report })
}
