//! Reference implementations shared by the integration tests. Nothing in
//! here calls into the objective module.
#![allow(dead_code)]

use lightcrl::data::{SplitTag, SyntheticSpec, SyntheticWorld};
use lightcrl::gradcheck::{finite_difference_check_with, FdConfig, GradCheckReport};
use lightcrl::model::{encode_modality, Dfe};
use lightcrl::objective::{gram, soft_targets, total_loss_with_targets};
use lightcrl::rng::Rng;
use lightcrl::{DfeParameters, Graph, Modality, PairedEmbeddingSet, Tensor, Var};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_unit_rows(k: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let n = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows)
}

/// `t_ij`: softmax over `k` of `(⟨u_i,u_k⟩ + ⟨v_i,v_k⟩) / 2τ`, evaluated at `j`.
pub fn oracle_target(u: &[Vec<f64>], v: &[Vec<f64>], tau: f64, i: usize, j: usize) -> f64 {
    let s = |k: usize| ((dot(&u[i], &u[k]) + dot(&v[i], &v[k])) / (2.0 * tau)).exp();
    s(j) / (0..u.len()).map(s).sum::<f64>()
}

/// `ℓ_ij = −log(exp(⟨a_i,b_j⟩/τ) / Σ_k exp(⟨a_i,b_k⟩/τ))`.
pub fn oracle_pair_loss(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64, i: usize, j: usize) -> f64 {
    let s = |k: usize| (dot(&a[i], &b[k]) / tau).exp();
    -(s(j) / (0..b.len()).map(s).sum::<f64>()).ln()
}

/// `(1/2K) Σ_i Σ_j t_ij·ℓ_ij + t_ji·ℓ_ji`, where `ℓ_ji` anchors on the
/// modality-2 row `j` and ranks modality-1 rows.
pub fn oracle_loss(u: &[Vec<f64>], v: &[Vec<f64>], tau: f64) -> f64 {
    let k = u.len();
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            let t_ij = oracle_target(u, v, tau, i, j);
            let l_ij = oracle_pair_loss(u, v, tau, i, j);
            let t_ji = oracle_target(u, v, tau, j, i);
            let l_ji = oracle_pair_loss(v, u, tau, j, i);
            acc += t_ij * l_ij + t_ji * l_ji;
        }
    }
    acc / (2.0 * k as f64)
}

/// The same loss with hard diagonal targets (InfoNCE).
pub fn oracle_infonce(u: &[Vec<f64>], v: &[Vec<f64>], tau: f64) -> f64 {
    let k = u.len();
    let mut acc = 0.0;
    for i in 0..k {
        acc += oracle_pair_loss(u, v, tau, i, i) + oracle_pair_loss(v, u, tau, i, i);
    }
    acc / (2.0 * k as f64)
}

pub fn random_batch(k: usize, d: usize, rng: &mut Rng) -> Tensor<f64> {
    let v: Vec<f64> = (0..k * d).map(|_| rng.normal()).collect();
    Tensor::new(&[k, d], v).unwrap()
}

fn bound_loss(
    g: &mut Graph<f64>,
    bound: &Dfe<Var>,
    x1: &Tensor<f64>,
    x2: &Tensor<f64>,
    targets: &Tensor<f64>,
) -> lightcrl::Result<Var> {
    let a = g.constant(x1.clone());
    let b = g.constant(x2.clone());
    let z1 = encode_modality(g, bound, a, Modality::First)?;
    let z2 = encode_modality(g, bound, b, Modality::Second)?;
    let tau = g.exp(bound.log_tau);
    Ok(total_loss_with_targets(g, z1, z2, tau, targets)?.0)
}

/// Full-model gradient check on one batch. Soft targets are computed once
/// at `params` and held fixed, matching their detachment in training.
pub fn dfe_gradcheck(
    params: &DfeParameters<f64>,
    x1: &Tensor<f64>,
    x2: &Tensor<f64>,
    cfg: &FdConfig,
) -> GradCheckReport {
    let mut p = params.clone();
    p.set_trainable(true);
    p.zero_grad();
    let z1 = p.encode(x1, Modality::First).unwrap();
    let z2 = p.encode(x2, Modality::Second).unwrap();
    let targets = soft_targets(&gram(&z1), &gram(&z2), p.tau()).unwrap();

    let mut g = Graph::new();
    let bound = p.bind(&mut g);
    let loss = bound_loss(&mut g, &bound, x1, x2, &targets).unwrap();
    g.backward(loss).unwrap();
    p.absorb_grads(&g, &bound).unwrap();

    finite_difference_check_with(
        |q: &DfeParameters<f64>| {
            let mut g = Graph::new();
            let bound = q.bind_frozen(&mut g);
            let loss = bound_loss(&mut g, &bound, x1, x2, &targets)?;
            Ok(g.value(loss).item())
        },
        &p,
        cfg,
    )
    .unwrap()
}

/// The reference desk-scale data: 512 training and 128 held-out pairs.
pub fn standard_data(seed: u64) -> (SyntheticWorld, PairedEmbeddingSet, PairedEmbeddingSet) {
    let world = SyntheticWorld::new(&SyntheticSpec::standard(512, seed)).unwrap();
    let train = world.sample(512, SplitTag::Train).unwrap();
    let test = world.sample(128, SplitTag::Test).unwrap();
    (world, train, test)
}
