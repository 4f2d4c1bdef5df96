//! Soft-target bidirectional contrastive loss.
//!
//! For a batch of `K` aligned latents `m̂¹`, `m̂²` (unit rows) and
//! temperature `τ`:
//!
//! ```text
//! ℓ_ij = −log softmax_j(⟨m̂¹_i, m̂²_j⟩ / τ)          (modality 1 → 2)
//! ℓ_ji = −log softmax_i(⟨m̂²_j, m̂¹_i⟩ / τ)          (modality 2 → 1)
//! t_ij = softmax_j((⟨m̂¹_i, m̂¹_j⟩ + ⟨m̂²_i, m̂²_j⟩) / 2τ)
//! 𝓛    = 1/(2K) · Σ_ij (t_ij·ℓ_ij + t_ji·ℓ_ji)
//! ```
//!
//! `t_ji` is the same row-softmax evaluated with the row index `j`, so in
//! anchor-row layout both directions use the same target matrix. Targets
//! are constants: no gradient flows through them (including their
//! dependence on `τ`).

use crate::error::{Error, Result};
use crate::graph::{softmax_in_place, Graph, Var};
use crate::tensor::{matmul_kernel, Real, Tensor};

/// Tolerance for the unit-row precondition of the similarity matrix.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Intermediate values of one loss evaluation. `l21` and `targets21` are
/// in anchor-row layout: row `j` is the modality-2 anchor, column `i` the
/// modality-1 candidate, so `l21[j][i] = ℓ_ji` and every target row sums
/// to one.
#[derive(Clone, Debug)]
pub struct LossReport<F> {
    pub total: F,
    pub l12: Tensor<F>,
    pub l21: Tensor<F>,
    pub targets12: Tensor<F>,
    pub targets21: Tensor<F>,
    pub tau: F,
}

fn check_unit_rows<F: Real>(t: &Tensor<F>, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|&v| v * v).sum::<F>().sqrt().as_f64();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::contract(format!(
                "{what} row {i} has norm {n}, expected unit rows"
            )));
        }
    }
    Ok(())
}

/// `⟨a_i, b_j⟩` for unit-row `a[K×d]`, `b[K'×d]`.
pub fn cosine_similarity_matrix<F: Real>(g: &mut Graph<F>, a: Var, b: Var) -> Result<Var> {
    check_unit_rows(g.value(a), "lhs")?;
    check_unit_rows(g.value(b), "rhs")?;
    let bt = g.transpose(b)?;
    g.matmul(a, bt)
}

fn check_tau<F: Real>(g: &Graph<F>, tau: Var) -> Result<()> {
    let t = g.value(tau);
    if t.numel() != 1 || !(t.item() > F::zero()) {
        return Err(Error::contract(format!(
            "temperature must be a positive scalar, got {:?}",
            t.data()
        )));
    }
    Ok(())
}

/// `ℓ_ij = −log softmax_j(sim_ij / τ)`, row-max stabilized.
pub fn pairwise_contrastive_loss<F: Real>(g: &mut Graph<F>, sim: Var, tau: Var) -> Result<Var> {
    check_tau(g, tau)?;
    let inv = g.recip(tau)?;
    let logits = g.mul(sim, inv)?;
    let logp = g.log_softmax_rows(logits)?;
    Ok(g.neg(logp))
}

/// Row-softmax of `(sim11 + sim22) / 2τ`, detached from any graph.
pub fn soft_targets<F: Real>(sim11: &Tensor<F>, sim22: &Tensor<F>, tau: F) -> Result<Tensor<F>> {
    if sim11.shape() != sim22.shape() || sim11.rank() != 2 {
        return Err(Error::Shape {
            op: "soft_targets",
            lhs: sim11.shape().to_vec(),
            rhs: sim22.shape().to_vec(),
        });
    }
    if !(tau > F::zero()) {
        return Err(Error::contract(format!("temperature {tau} is not positive")));
    }
    let denom = F::of(2.0) * tau;
    let k = sim11.cols();
    let mut data: Vec<F> = sim11
        .data()
        .iter()
        .zip(sim22.data())
        .map(|(&a, &b)| (a + b) / denom)
        .collect();
    data.chunks_mut(k).for_each(softmax_in_place);
    Tensor::new(sim11.shape(), data)
}

/// `x·xᵀ` for a rank-2 tensor.
pub fn gram<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (k, d) = (x.rows(), x.cols());
    let mut xt = vec![F::zero(); k * d];
    for i in 0..k {
        for j in 0..d {
            xt[j * k + i] = x.data()[i * d + j];
        }
    }
    Tensor::new(&[k, k], matmul_kernel(x.data(), &xt, k, d, k)).expect("k ≥ 1")
}

/// The full objective with targets computed from the current batch.
/// Returns the loss node and its report.
pub fn total_loss<F: Real>(
    g: &mut Graph<F>,
    m1hat: Var,
    m2hat: Var,
    tau: Var,
) -> Result<(Var, LossReport<F>)> {
    check_pair(g, m1hat, m2hat)?;
    check_tau(g, tau)?;
    let targets = soft_targets(
        &gram(g.value(m1hat)),
        &gram(g.value(m2hat)),
        g.value(tau).item(),
    )?;
    total_loss_with_targets(g, m1hat, m2hat, tau, &targets)
}

fn check_pair<F: Real>(g: &Graph<F>, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::Shape {
            op: "total_loss",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

/// The objective with caller-supplied constant targets `t[K×K]`.
pub fn total_loss_with_targets<F: Real>(
    g: &mut Graph<F>,
    m1hat: Var,
    m2hat: Var,
    tau: Var,
    targets: &Tensor<F>,
) -> Result<(Var, LossReport<F>)> {
    check_pair(g, m1hat, m2hat)?;
    let k = g.value(m1hat).rows();
    if targets.shape() != [k, k] {
        return Err(Error::Shape {
            op: "total_loss targets",
            lhs: targets.shape().to_vec(),
            rhs: vec![k, k],
        });
    }
    let sim12 = cosine_similarity_matrix(g, m1hat, m2hat)?;
    let sim21 = g.transpose(sim12)?;
    let l12 = pairwise_contrastive_loss(g, sim12, tau)?;
    let l21 = pairwise_contrastive_loss(g, sim21, tau)?;
    let t = g.constant(targets.detached());
    let w12 = g.mul(t, l12)?;
    let w21 = g.mul(t, l21)?;
    let s12 = g.sum(w12);
    let s21 = g.sum(w21);
    let both = g.add(s12, s21)?;
    let total = g.scale(both, 1.0 / (2.0 * k as f64));
    let report = LossReport {
        total: g.value(total).item(),
        l12: g.value(l12).clone(),
        l21: g.value(l21).clone(),
        targets12: targets.detached(),
        targets21: targets.detached(),
        tau: g.value(tau).item(),
    };
    Ok((total, report))
}

/// Loss value for fixed latents, without gradients.
pub fn evaluate_loss<F: Real>(m1hat: &Tensor<F>, m2hat: &Tensor<F>, tau: F) -> Result<LossReport<F>> {
    let mut g = Graph::new();
    let a = g.constant(m1hat.detached());
    let b = g.constant(m2hat.detached());
    let t = g.scalar(tau);
    Ok(total_loss(&mut g, a, b, t)?.1)
}
