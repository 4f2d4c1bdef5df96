//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// A collection of named tensors that can be perturbed coordinate-wise.
pub trait Parameters<F: Real>: Clone {
    fn named_tensors(&self) -> Vec<(String, &Tensor<F>)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)>;

    /// Hook run after every optimizer update (e.g. clamping).
    fn post_update(&mut self) {}

    fn zero_grad(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    /// Total number of trainable scalars.
    fn trainable_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }
}

impl<F: Real> Parameters<F> for Vec<Tensor<F>> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        self.iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        self.iter_mut().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of [`relative_error`].
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub per_tensor: Vec<TensorCheck>,
    /// Coordinates re-evaluated with a smaller step after a kink.
    pub refined: usize,
}

impl GradCheckReport {
    pub fn coords_checked(&self) -> usize {
        self.per_tensor.iter().map(|t| t.coords).sum()
    }
}

/// Largest relative disagreement between the h and h/2 fourth-order
/// estimates accepted as smooth.
const SMOOTHNESS_TOL: f64 = 1e-9;

/// Default denominator floor of [`relative_error`].
pub const GRAD_FLOOR: f64 = 1e-8;

/// Denominator floor of [`FdConfig::precise`]. Exactly-zero gradients
/// (dead ReLU units, the softmax-invariant key bias) still pick up
/// ~1e-13 of rounding noise in the numeric estimate, so they are held to
/// an absolute 1e-12 rather than a relative bound.
pub const PRECISE_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, GRAD_FLOOR)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(θ+h) − f(θ−h)) / 2h`
    Central2,
    /// `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h`
    Central4,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    pub stencil: Stencil,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Times a coordinate may be retried with the step divided by 10 when
    /// the function is not smooth across the stencil (`Central4` only).
    pub refinements: usize,
    /// Check at most this many evenly strided coordinates per tensor.
    pub max_coords: Option<usize>,
}

impl FdConfig {
    /// Plain two-point central differences.
    pub fn central(step: f64) -> Self {
        FdConfig {
            step,
            stencil: Stencil::Central2,
            floor: GRAD_FLOOR,
            refinements: 0,
            max_coords: None,
        }
    }

    /// Fourth-order central differences with kink detection. Truncation
    /// error is O(h⁴), so a larger step keeps rounding noise small.
    pub fn precise() -> Self {
        FdConfig {
            step: 2e-3,
            stencil: Stencil::Central4,
            floor: PRECISE_FLOOR,
            refinements: 3,
            max_coords: None,
        }
    }
}

/// Two-point central differences with step `h`; see
/// [`finite_difference_check_with`].
pub fn finite_difference_check<F, P>(
    f: impl FnMut(&P) -> Result<F>,
    params: &P,
    h: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Real,
    P: Parameters<F>,
{
    let cfg = FdConfig {
        max_coords,
        ..FdConfig::central(h)
    };
    finite_difference_check_with(f, params, &cfg)
}

/// Compares the gradients already stored in `params` against numeric
/// derivatives of `f`, one coordinate at a time.
///
/// Only trainable tensors are checked. Tensors larger than
/// `cfg.max_coords` are subsampled at evenly strided flat indices.
///
/// With [`Stencil::Central4`], each coordinate is estimated at steps `h`
/// and `h/2`. On smooth functions the two agree to O(h⁴); a kink (e.g. a
/// ReLU switching) inside `[θ−2h, θ+2h]` breaks that agreement, and the
/// coordinate is retried with a step four times smaller.
pub fn finite_difference_check_with<F, P>(
    mut f: impl FnMut(&P) -> Result<F>,
    params: &P,
    cfg: &FdConfig,
) -> Result<GradCheckReport>
where
    F: Real,
    P: Parameters<F>,
{
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_tensor: Vec::new(),
        refined: 0,
    };
    let layout: Vec<(String, usize, Vec<F>)> = params
        .named_tensors()
        .into_iter()
        .filter_map(|(name, t)| t.grad().map(|g| (name, t.numel(), g.to_vec())))
        .collect();

    for (ti, (name, numel, analytic)) in layout.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < *numel => (0..m).map(|j| j * numel / m).collect(),
            _ => (0..*numel).collect(),
        };
        let mut tensor_max = 0.0f64;
        for &c in &coords {
            let original = nth_trainable(&mut work, ti).data()[c];
            let mut at = |dx: f64| -> Result<f64> {
                nth_trainable(&mut work, ti).data_mut()[c] = original + F::of(dx);
                f(&work).map(|v| v.as_f64())
            };
            let numeric = match cfg.stencil {
                Stencil::Central2 => (at(cfg.step)? - at(-cfg.step)?) / (2.0 * cfg.step),
                Stencil::Central4 => {
                    let mut c4 = |h: f64| -> Result<f64> {
                        let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
                        Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
                    };
                    let mut step = cfg.step;
                    let mut attempt = 0;
                    loop {
                        let coarse = c4(step)?;
                        let fine = c4(step / 2.0)?;
                        if (coarse - fine).abs() <= SMOOTHNESS_TOL * fine.abs().max(1.0) {
                            break coarse;
                        }
                        if attempt == cfg.refinements {
                            break fine;
                        }
                        report.refined += 1;
                        attempt += 1;
                        step /= 4.0;
                    }
                }
            };
            nth_trainable(&mut work, ti).data_mut()[c] = original;

            let err = relative_error_with_floor(analytic[c].as_f64(), numeric, cfg.floor);
            tensor_max = tensor_max.max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), c));
            }
        }
        report.per_tensor.push(TensorCheck {
            name: name.clone(),
            coords: coords.len(),
            max_rel_error: tensor_max,
        });
    }
    Ok(report)
}

fn nth_trainable<F: Real, P: Parameters<F>>(p: &mut P, n: usize) -> &mut Tensor<F> {
    p.named_tensors_mut()
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .nth(n)
        .map(|(_, t)| t)
        .expect("trainable tensor index in range")
}
