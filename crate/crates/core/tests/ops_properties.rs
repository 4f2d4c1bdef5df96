//! Property tests for the differentiable ops: every gradient against
//! finite differences, plus matmul, softmax and normalization invariants.

use lightcrl::gradcheck::{finite_difference_check_with, FdConfig};
use lightcrl::rng::Rng;
use lightcrl::{Graph, Result, Tensor, Var};
use proptest::prelude::*;

const TOL: f64 = 1e-6;

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(0.5, 2.0)).collect()).unwrap()
}

/// Entries with `|x| ≥ 0.05`, away from the ReLU kink.
fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let x = rng.normal();
            x.signum() * (0.05 + x.abs())
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

/// Max relative gradient error of `loss = Σ W ⊙ build(inputs)` for a
/// random fixed `W`.
fn op_error(
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let mut params: Vec<Tensor<f64>> = inputs.into_iter().map(Tensor::with_grad).collect();
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| g.leaf(t)).collect();
        let y = build(&mut g, &vars).unwrap();
        normal(g.value(y).shape(), &mut Rng::with_stream(seed, 99))
    };
    let forward = |p: &Vec<Tensor<f64>>, g: &mut Graph<f64>| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = p.iter().map(|t| g.leaf(t)).collect();
        let y = build(g, &vars)?;
        let w = g.constant(weights.clone());
        let wy = g.mul(w, y)?;
        Ok((g.sum(wy), vars))
    };

    let mut g = Graph::new();
    let (loss, vars) = forward(&params, &mut g).unwrap();
    g.backward(loss).unwrap();
    for (t, v) in params.iter_mut().zip(&vars) {
        t.accumulate_grad(g.grad(*v).unwrap()).unwrap();
    }
    let report = finite_difference_check_with(
        |p: &Vec<Tensor<f64>>| {
            let mut g = Graph::new();
            let (loss, _) = forward(p, &mut g)?;
            Ok(g.value(loss).item())
        },
        &params,
        &FdConfig::precise(),
    )
    .unwrap();
    report.max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradient(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed: u64) {
        let mut rng = Rng::new(seed);
        let ins = vec![normal(&[m, k], &mut rng), normal(&[k, n], &mut rng)];
        prop_assert!(op_error(ins, seed, |g, v| g.matmul(v[0], v[1])) <= TOL);
    }

    #[test]
    fn transpose_and_reshape_gradient(m in 1usize..5, n in 1usize..5, seed: u64) {
        let mut rng = Rng::new(seed);
        let ins = vec![normal(&[m, n], &mut rng)];
        prop_assert!(op_error(ins.clone(), seed, |g, v| g.transpose(v[0])) <= TOL);
        prop_assert!(op_error(ins, seed, |g, v| g.reshape(v[0], &[n * m])) <= TOL);
    }

    #[test]
    fn binary_elementwise_gradients(m in 1usize..4, n in 1usize..4, seed: u64) {
        let mut rng = Rng::new(seed);
        let ins = vec![normal(&[m, n], &mut rng), normal(&[m, n], &mut rng)];
        prop_assert!(op_error(ins.clone(), seed, |g, v| g.add(v[0], v[1])) <= TOL);
        prop_assert!(op_error(ins.clone(), seed, |g, v| g.sub(v[0], v[1])) <= TOL);
        prop_assert!(op_error(ins, seed, |g, v| g.mul(v[0], v[1])) <= TOL);
    }

    #[test]
    fn scalar_broadcast_gradients(m in 1usize..4, n in 1usize..4, seed: u64) {
        let mut rng = Rng::new(seed);
        let ins = vec![normal(&[m, n], &mut rng), normal(&[], &mut rng)];
        prop_assert!(op_error(ins.clone(), seed, |g, v| g.add(v[0], v[1])) <= TOL);
        prop_assert!(op_error(ins.clone(), seed, |g, v| g.sub(v[1], v[0])) <= TOL);
        prop_assert!(op_error(ins, seed, |g, v| g.mul(v[1], v[0])) <= TOL);
    }

    #[test]
    fn unary_gradients(m in 1usize..4, n in 1usize..4, seed: u64) {
        let mut rng = Rng::new(seed);
        let x = vec![normal(&[m, n], &mut rng)];
        let pos = vec![positive(&[m, n], &mut rng)];
        prop_assert!(op_error(x.clone(), seed, |g, v| Ok(g.neg(v[0]))) <= TOL);
        prop_assert!(op_error(x.clone(), seed, |g, v| Ok(g.exp(v[0]))) <= TOL);
        prop_assert!(op_error(x.clone(), seed, |g, v| Ok(g.scale(v[0], -1.7))) <= TOL);
        prop_assert!(op_error(x, seed, |g, v| Ok(g.sum(v[0]))) <= TOL);
        prop_assert!(op_error(pos.clone(), seed, |g, v| g.log(v[0])) <= TOL);
        prop_assert!(op_error(pos, seed, |g, v| g.recip(v[0])) <= TOL);
        let off = vec![off_zero(&[m, n], &mut rng)];
        prop_assert!(op_error(off, seed, |g, v| Ok(g.relu(v[0]))) <= TOL);
    }

    #[test]
    fn row_op_gradients(m in 1usize..4, n in 1usize..5, seed: u64) {
        let mut rng = Rng::new(seed);
        let x = vec![normal(&[m, n], &mut rng)];
        prop_assert!(op_error(x.clone(), seed, |g, v| g.softmax_rows(v[0])) <= TOL);
        prop_assert!(op_error(x.clone(), seed, |g, v| g.log_softmax_rows(v[0])) <= TOL);
        prop_assert!(op_error(x.clone(), seed, |g, v| g.l2_normalize(v[0])) <= TOL);
        let with_bias = vec![normal(&[m, n], &mut rng), normal(&[n], &mut rng)];
        prop_assert!(op_error(with_bias, seed, |g, v| g.add_bias(v[0], v[1])) <= TOL);
    }

    #[test]
    fn layer_norm_gradient(m in 1usize..4, d in 2usize..6, seed: u64) {
        let mut rng = Rng::new(seed);
        let ins = vec![normal(&[m, d], &mut rng), normal(&[d], &mut rng), normal(&[d], &mut rng)];
        prop_assert!(op_error(ins, seed, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)) <= TOL);
    }

    #[test]
    fn row_shuffling_gradients(m in 1usize..4, d in 1usize..4, seed: u64) {
        let mut rng = Rng::new(seed);
        let row = vec![normal(&[d], &mut rng)];
        prop_assert!(op_error(row, seed, |g, v| g.repeat_rows(v[0], m + 1)) <= TOL);
        let table = vec![normal(&[m, d], &mut rng)];
        let idx: Vec<usize> = (0..m + 2).map(|i| (i * 7 + seed as usize) % m).collect();
        prop_assert!(op_error(table, seed, |g, v| g.gather_rows(v[0], &idx)) <= TOL);
        let pair = vec![normal(&[m, d], &mut rng), normal(&[m, d + 1], &mut rng)];
        prop_assert!(op_error(pair, seed, |g, v| g.concat_cols(v[0], v[1])) <= TOL);
    }

    #[test]
    fn token_gradients(k in 1usize..4, d in 1usize..4, seed: u64) {
        let mut rng = Rng::new(seed);
        let parts = vec![normal(&[k, d], &mut rng), normal(&[k, d], &mut rng)];
        let err = op_error(parts, seed, |g, v| {
            let s = g.stack_tokens(&[v[0], v[1]])?;
            let t = g.token(s, 1)?;
            let u = g.token(s, 0)?;
            g.mul(t, u)
        });
        prop_assert!(err <= TOL, "{}", err);
    }

    #[test]
    fn attention_gradient(k in 1usize..3, t in 1usize..3, heads in 1usize..3, dh in 1usize..3, seed: u64) {
        let mut rng = Rng::new(seed);
        let d = heads * dh;
        let ins = vec![
            normal(&[k, t, d], &mut rng),
            normal(&[k, t, d], &mut rng),
            normal(&[k, t, d], &mut rng),
        ];
        prop_assert!(op_error(ins, seed, |g, v| g.attention(v[0], v[1], v[2], heads)) <= TOL);
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..17, k in 1usize..17, n in 1usize..17, seed: u64) {
        let mut rng = Rng::new(seed);
        let a = normal(&[m, k], &mut rng);
        let b = normal(&[k, n], &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        let c = g.value(c);
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for p in 0..k {
                    want += a.data()[i * k + p] * b.data()[p * n + j];
                }
                let got = c.data()[i * n + j];
                prop_assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn softmax_rows_normalize_and_ignore_shifts(m in 1usize..6, n in 1usize..8, shift in -50.0f64..50.0, seed: u64) {
        let mut rng = Rng::new(seed);
        let x = normal(&[m, n], &mut rng);
        let shifted = Tensor::new(&[m, n], x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(x), g.constant(shifted));
        let (sa, sb) = (g.softmax_rows(a).unwrap(), g.softmax_rows(b).unwrap());
        for i in 0..m {
            let row = g.value(sa).row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            for (p, q) in row.iter().zip(g.value(sb).row(i)) {
                prop_assert!((p - q).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn l2_normalize_is_idempotent(m in 1usize..6, d in 1usize..8, seed: u64) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let x = g.constant(normal(&[m, d], &mut rng));
        let once = g.l2_normalize(x).unwrap();
        let twice = g.l2_normalize(once).unwrap();
        for i in 0..m {
            let r = g.value(once).row(i);
            prop_assert!((r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-6);
        }
        for (a, b) in g.value(once).data().iter().zip(g.value(twice).data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}
