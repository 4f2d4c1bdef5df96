mod common;

use common::*;
use lightcrl::gradcheck::{finite_difference_check_with, FdConfig};
use lightcrl::objective::{evaluate_loss, gram, soft_targets, total_loss, total_loss_with_targets};
use lightcrl::rng::Rng;
use lightcrl::{Graph, Tensor};

#[test]
fn total_loss_matches_brute_force() {
    for k in [1, 2, 3, 5] {
        for seed in 0..20 {
            let mut rng = Rng::new(seed * 31 + k as u64);
            let d = 4;
            let u = random_unit_rows(k, d, &mut rng);
            let v = random_unit_rows(k, d, &mut rng);
            let tau = rng.uniform_range(0.05, 2.0);
            let got = evaluate_loss(&tensor(&u), &tensor(&v), tau).unwrap().total;
            let want = oracle_loss(&u, &v, tau);
            assert!((got - want).abs() <= 1e-10, "K={k} seed={seed}: {got} vs {want}");
        }
    }
}

#[test]
fn hard_diagonal_targets_reduce_to_infonce() {
    let mut rng = Rng::new(4);
    for k in [2, 3, 6] {
        let u = random_unit_rows(k, 5, &mut rng);
        let v = random_unit_rows(k, 5, &mut rng);
        let mut eye = Tensor::<f64>::zeros(&[k, k]);
        for i in 0..k {
            eye.data_mut()[i * k + i] = 1.0;
        }
        let mut g = Graph::new();
        let (a, b, tau) = (g.constant(tensor(&u)), g.constant(tensor(&v)), g.scalar(0.3));
        let (loss, _) = total_loss_with_targets(&mut g, a, b, tau, &eye).unwrap();
        let want = oracle_infonce(&u, &v, 0.3);
        assert!((g.value(loss).item() - want).abs() <= 1e-10);
    }
}

#[test]
fn targets_match_the_oracle_elementwise() {
    let mut rng = Rng::new(8);
    let u = random_unit_rows(4, 3, &mut rng);
    let v = random_unit_rows(4, 3, &mut rng);
    let t = soft_targets(&gram(&tensor(&u)), &gram(&tensor(&v)), 0.2).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            assert!((t.at(i, j) - oracle_target(&u, &v, 0.2, i, j)).abs() <= 1e-12);
        }
    }
}

/// Gradients of the loss with respect to the latents and `τ`, with the
/// targets held constant as in training. The latents are reached through
/// a normalization so perturbed points stay on the unit sphere.
#[test]
fn gradients_treat_targets_as_constants() {
    for seed in 0..5 {
        let mut rng = Rng::new(100 + seed);
        let u = random_unit_rows(4, 3, &mut rng);
        let v = random_unit_rows(4, 3, &mut rng);
        let tau0 = 0.5f64;
        let targets = soft_targets(&gram(&tensor(&u)), &gram(&tensor(&v)), tau0).unwrap();
        let loss_of = |p: &Vec<Tensor<f64>>, g: &mut Graph<f64>| {
            let a = g.leaf(&p[0]);
            let b = g.leaf(&p[1]);
            let lt = g.leaf(&p[2]);
            let tau = g.exp(lt);
            let an = g.l2_normalize(a).unwrap();
            let bn = g.l2_normalize(b).unwrap();
            let (l, _) = total_loss_with_targets(g, an, bn, tau, &targets).unwrap();
            (l, [a, b, lt])
        };
        let mut params = vec![
            tensor(&u).with_grad(),
            tensor(&v).with_grad(),
            Tensor::scalar(tau0.ln()).with_grad(),
        ];
        let mut g = Graph::new();
        let (l, vars) = loss_of(&params, &mut g);
        g.backward(l).unwrap();
        for (t, v) in params.iter_mut().zip(vars) {
            t.accumulate_grad(g.grad(v).unwrap()).unwrap();
        }
        let r = finite_difference_check_with(
            |p: &Vec<Tensor<f64>>| {
                let mut g = Graph::new();
                let (l, _) = loss_of(p, &mut g);
                Ok(g.value(l).item())
            },
            &params,
            &FdConfig::precise(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }
}

#[test]
fn live_targets_do_not_receive_gradient() {
    // total_loss recomputes targets from the batch; its gradient must equal
    // the fixed-target gradient at the same point.
    let mut rng = Rng::new(17);
    let u = tensor(&random_unit_rows(3, 4, &mut rng)).with_grad();
    let v = tensor(&random_unit_rows(3, 4, &mut rng)).with_grad();
    let mut g1 = Graph::new();
    let (a, b, t) = (g1.leaf(&u), g1.leaf(&v), g1.scalar(0.7));
    let (l1, report) = total_loss(&mut g1, a, b, t).unwrap();
    g1.backward(l1).unwrap();

    let mut g2 = Graph::new();
    let (c, d, t2) = (g2.leaf(&u), g2.leaf(&v), g2.scalar(0.7));
    let (l2, _) = total_loss_with_targets(&mut g2, c, d, t2, &report.targets12).unwrap();
    g2.backward(l2).unwrap();
    assert_eq!(g1.grad(a).unwrap(), g2.grad(c).unwrap());
    assert_eq!(g1.grad(b).unwrap(), g2.grad(d).unwrap());
}

#[test]
fn swapping_modalities_leaves_the_loss_unchanged() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let k = 2 + seed as usize % 5;
        let u = tensor(&random_unit_rows(k, 6, &mut rng));
        let v = tensor(&random_unit_rows(k, 6, &mut rng));
        let a = evaluate_loss(&u, &v, 0.1).unwrap().total;
        let b = evaluate_loss(&v, &u, 0.1).unwrap().total;
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn single_pair_batch_has_zero_loss() {
    let mut rng = Rng::new(2);
    for _ in 0..5 {
        let u = tensor(&random_unit_rows(1, 7, &mut rng));
        let v = tensor(&random_unit_rows(1, 7, &mut rng));
        assert_eq!(evaluate_loss(&u, &v, 0.1).unwrap().total, 0.0);
    }
}

#[test]
fn orthonormal_identity_pair_value() {
    let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let want = oracle_loss(&e, &e, 1.0);
    assert!((want - 0.5822).abs() <= 1e-3);
    let got = evaluate_loss(&tensor(&e), &tensor(&e), 1.0).unwrap().total;
    assert!((got - want).abs() <= 1e-12);
}
