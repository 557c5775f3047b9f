//! Local-linearity regularizers and the baselines they are compared with.
//!
//! Every term is built inside a caller-provided graph from an [`InputLoss`]
//! and returns a rank-0 node holding the batch mean, so the trainer can add
//! `λ·term` to the classification loss and run a single backward pass.
//!
//! * `elle`, `elle_2p`, `elle_5pt` only evaluate the loss at a few points and
//!   need first-order differentiation in θ.
//! * `gradalign`, `llr_sq`, `cure` contain input gradients recorded with
//!   [`Graph::grad`]; their θ-gradient is a double backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::sample_ball;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::InputLoss;
use crate::tensor::Tensor;

/// Norms below this count as zero in the cosine and gradient-norm terms.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    None,
    Elle,
    ElleA,
    #[serde(rename = "elle_2p")]
    Elle2p,
    #[serde(rename = "elle_5pt")]
    Elle5pt,
    Gradalign,
    LlrSq,
    Cure,
}

impl RegularizerKind {
    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::Elle => "elle",
            RegularizerKind::ElleA => "elle_a",
            RegularizerKind::Elle2p => "elle_2p",
            RegularizerKind::Elle5pt => "elle_5pt",
            RegularizerKind::Gradalign => "gradalign",
            RegularizerKind::LlrSq => "llr_sq",
            RegularizerKind::Cure => "cure",
        }
    }

    pub fn needs_double_backprop(self) -> bool {
        matches!(
            self,
            RegularizerKind::Gradalign | RegularizerKind::LlrSq | RegularizerKind::Cure
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// One α per example.
    #[default]
    PerExample,
    /// A single α for the whole batch.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    /// Weight of the term; for `elle_a` this is λ_max.
    #[serde(default)]
    pub lambda: f64,
    /// Decay of the adaptive weight.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub alpha_mode: AlphaMode,
    /// Clamp the random ball samples to `[0, 1]^d`.
    #[serde(default = "default_true")]
    pub clamp_samples: bool,
}

pub fn default_gamma() -> f64 {
    0.99
}

fn default_true() -> bool {
    true
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        Self {
            kind: RegularizerKind::None,
            lambda: 0.0,
            gamma: 0.99,
            alpha_mode: AlphaMode::PerExample,
            clamp_samples: true,
        }
    }
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind, lambda: f64) -> Self {
        Self {
            kind,
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("regularizer.lambda must be >= 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("regularizer.gamma must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One `(x_a, x_b, α)` draw for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearityDraw {
    pub xa: Tensor,
    pub xb: Tensor,
    /// One entry per example (repeated in shared mode).
    pub alpha: Vec<f64>,
}

impl LinearityDraw {
    /// Draws `x_a`, then `x_b`, then α, always in that order.
    pub fn sample(x: &Tensor, eps: f64, mode: AlphaMode, clamp: bool, rng: &mut impl Rng) -> Self {
        let n = x.shape()[0];
        let xa = sample_ball(x, eps, rng, clamp);
        let xb = sample_ball(x, eps, rng, clamp);
        let alpha = match mode {
            AlphaMode::PerExample => (0..n).map(|_| rng.random::<f64>()).collect(),
            AlphaMode::Shared => vec![rng.random::<f64>(); n],
        };
        Self { xa, xb, alpha }
    }

    /// `(1-α)·x_a + α·x_b`, row by row.
    pub fn mixed(&self) -> Tensor {
        mix(&self.xa, &self.xb, &self.alpha)
    }
}

pub fn mix(xa: &Tensor, xb: &Tensor, alpha: &[f64]) -> Tensor {
    let mut out = xa.clone();
    let (n, _) = xa.dims2().expect("mix expects matrices");
    for (i, &a) in alpha.iter().enumerate().take(n) {
        for (o, &b) in out.row_mut(i).iter_mut().zip(xb.row(i)) {
            *o = (1.0 - a) * *o + a * b;
        }
    }
    out
}

/// Per-example record of one ELLE evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearitySample {
    pub xa: Tensor,
    pub xb: Tensor,
    pub alpha: Vec<f64>,
    pub xc: Tensor,
    /// `L(x_c) - (1-α)L(x_a) - αL(x_b)`
    pub residual: Vec<f64>,
    /// `residual²`
    pub e_lin: Vec<f64>,
}

/// Squared three-point residual, averaged over the batch.
pub fn elle_term(
    g: &mut Graph,
    loss: &dyn InputLoss,
    draw: &LinearityDraw,
) -> Result<(Var, LinearitySample)> {
    let xc = draw.mixed();
    let n = draw.alpha.len();
    let xa = g.input(draw.xa.clone());
    let xb = g.input(draw.xb.clone());
    let xcv = g.input(xc.clone());
    let alpha = g.constant(Tensor::from_raw(vec![n], draw.alpha.clone()));
    let [la, lb, lc] = loss.three_point(g, xa, xb, xcv, alpha)?;
    let residual = linear_residual(g, la, lb, lc, alpha)?;
    let sq = g.square(residual)?;
    let term = g.mean(sq)?;
    let residual_vals = g.value(residual).data().to_vec();
    let sample = LinearitySample {
        xa: draw.xa.clone(),
        xb: draw.xb.clone(),
        alpha: draw.alpha.clone(),
        xc,
        e_lin: residual_vals.iter().map(|r| r * r).collect(),
        residual: residual_vals,
    };
    Ok((term, sample))
}

/// `lc - (1-α)·la - α·lb`
fn linear_residual(g: &mut Graph, la: Var, lb: Var, lc: Var, alpha: Var) -> Result<Var> {
    let one_minus = g.affine(alpha, -1.0, 1.0)?;
    let wa = g.mul(one_minus, la)?;
    let wb = g.mul(alpha, lb)?;
    let r = g.sub(lc, wa)?;
    g.sub(r, wb)
}

/// Two-sample variant reusing the FGSM point as the second endpoint:
/// `|L(x_c) - (1-α)L(x_a) - αL(x_fgsm)|` with `x_c` on `[x_a, x_fgsm]`,
/// averaged over the batch.
pub fn elle_2p_term(
    g: &mut Graph,
    loss: &dyn InputLoss,
    xa: &Tensor,
    x_fgsm: &Tensor,
    alpha: &[f64],
) -> Result<(Var, Vec<f64>)> {
    let xc = mix(xa, x_fgsm, alpha);
    let n = alpha.len();
    let xav = g.input(xa.clone());
    let xfv = g.input(x_fgsm.clone());
    let xcv = g.input(xc);
    let al = g.constant(Tensor::from_raw(vec![n], alpha.to_vec()));
    let [la, lf, lc] = loss.three_point(g, xav, xfv, xcv, al)?;
    let residual = linear_residual(g, la, lf, lc, al)?;
    let abs = g.abs(residual)?;
    let term = g.mean(abs)?;
    Ok((term, g.value(residual).data().to_vec()))
}

/// Fractions of the segment `x_a → x_b` where the five-point stencil is
/// evaluated. Spacing `|x_b - x_a|/5` around the midpoint makes the
/// combination equal `D²_{x_a-x_b} L(x_d) / 25` on quadratics.
pub const FIVE_POINT_NODES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Stencil placed at the segment endpoints and quarter points; its
/// combination equals `D²_{x_a-x_b} L(x_d) / 16` on quadratics.
pub const FIVE_POINT_NODES_ENDPOINTS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Second-derivative weights of the five-point central stencil.
pub const FIVE_POINT_WEIGHTS: [f64; 5] =
    [-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0];

/// Unsquared per-example five-point combination as a `[n]` node.
pub fn five_point_combination(
    g: &mut Graph,
    loss: &dyn InputLoss,
    xa: &Tensor,
    xb: &Tensor,
    nodes: &[f64; 5],
) -> Result<Var> {
    let n = xa.shape()[0];
    let mut acc: Option<Var> = None;
    for (&t, &w) in nodes.iter().zip(&FIVE_POINT_WEIGHTS) {
        let p = mix(xa, xb, &vec![t; n]);
        let pv = g.input(p);
        let l = loss.per_example(g, pv)?;
        let wl = g.scale(l, w)?;
        acc = Some(match acc {
            None => wl,
            Some(a) => g.add(a, wl)?,
        });
    }
    Ok(acc.expect("five nodes"))
}

/// Squared five-point combination averaged over the batch.
pub fn elle_5pt_term(
    g: &mut Graph,
    loss: &dyn InputLoss,
    draw: &LinearityDraw,
) -> Result<(Var, Vec<f64>)> {
    let c = five_point_combination(g, loss, &draw.xa, &draw.xb, &FIVE_POINT_NODES)?;
    let sq = g.square(c)?;
    let term = g.mean(sq)?;
    Ok((term, g.value(c).data().to_vec()))
}

/// Per-example input gradients `[n, d]`, recorded for double backprop.
fn recorded_input_grad(g: &mut Graph, loss: &dyn InputLoss, x: &Tensor) -> Result<(Var, Var)> {
    let xv = g.input(x.clone());
    let per = loss.per_example(g, xv)?;
    let total = g.sum(per)?;
    let grad = g.grad(total, &[xv])?[0];
    Ok((per, grad))
}

/// Row-wise Euclidean norms with rows of (near) zero norm masked out:
/// returns `(norms, mask)` where masked rows have norm 1 and mask 0, so the
/// square root is never differentiated at zero.
fn masked_row_norms(g: &mut Graph, v: Var) -> Result<(Var, Vec<f64>)> {
    let sq = g.square(v)?;
    let ss = g.row_sum(sq)?;
    let mask: Vec<f64> = g
        .value(ss)
        .data()
        .iter()
        .map(|&s| if s.sqrt() < ZERO_NORM { 0.0 } else { 1.0 })
        .collect();
    let n = mask.len();
    let pad = g.constant(Tensor::from_raw(
        vec![n],
        mask.iter().map(|m| 1.0 - m).collect(),
    ));
    let padded = g.add(ss, pad)?;
    Ok((g.sqrt(padded)?, mask))
}

/// `1 - cos(∇_x L(x), ∇_x L(x + η))` averaged over the batch; a row with a
/// zero-norm gradient contributes 0.
pub fn gradalign_term(
    g: &mut Graph,
    loss: &dyn InputLoss,
    x: &Tensor,
    x_noisy: &Tensor,
) -> Result<Var> {
    let (_, g1) = recorded_input_grad(g, loss, x)?;
    let (_, g2) = recorded_input_grad(g, loss, x_noisy)?;
    cosine_misalignment(g, g1, g2)
}

/// Batch mean of `1 - cos(a_i, b_i)` over rows, zero-norm rows giving 0.
pub fn cosine_misalignment(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (na, ma) = masked_row_norms(g, a)?;
    let (nb, mb) = masked_row_norms(g, b)?;
    let ab = g.mul(a, b)?;
    let dot = g.row_sum(ab)?;
    let den = g.mul(na, nb)?;
    let cos = g.div(dot, den)?;
    let one_minus = g.affine(cos, -1.0, 1.0)?;
    let mask: Vec<f64> = ma.iter().zip(&mb).map(|(x, y)| x * y).collect();
    let n = mask.len();
    let maskv = g.constant(Tensor::from_raw(vec![n], mask));
    let masked = g.mul(one_minus, maskv)?;
    g.mean(masked)
}

/// `(L(x+δ) - L(x) - δᵀ∇_x L(x))²` averaged over the batch.
pub fn llr_sq_term(
    g: &mut Graph,
    loss: &dyn InputLoss,
    x: &Tensor,
    x_shifted: &Tensor,
) -> Result<(Var, Vec<f64>)> {
    let (lx, gx) = recorded_input_grad(g, loss, x)?;
    let xs = g.input(x_shifted.clone());
    let ls = loss.per_example(g, xs)?;
    let delta = g.constant(x_shifted.zip_map(x, |a, b| a - b));
    let dg = g.mul(delta, gx)?;
    let lin = g.row_sum(dg)?;
    let r = g.sub(ls, lx)?;
    let r = g.sub(r, lin)?;
    let sq = g.square(r)?;
    let term = g.mean(sq)?;
    Ok((term, g.value(r).data().to_vec()))
}

/// `‖∇_x L(x) - ∇_x L(x_fgsm)‖₂` averaged over the batch.
pub fn cure_term(g: &mut Graph, loss: &dyn InputLoss, x: &Tensor, x_fgsm: &Tensor) -> Result<Var> {
    let (_, g1) = recorded_input_grad(g, loss, x)?;
    let (_, g2) = recorded_input_grad(g, loss, x_fgsm)?;
    let diff = g.sub(g1, g2)?;
    let (norms, mask) = masked_row_norms(g, diff)?;
    let n = mask.len();
    let maskv = g.constant(Tensor::from_raw(vec![n], mask));
    let masked = g.mul(norms, maskv)?;
    g.mean(masked)
}

/// `‖∇_x L‖₂²` summed over the batch, as a recorded scalar.
pub fn input_grad_norm_sq(g: &mut Graph, loss: &dyn InputLoss, x: &Tensor) -> Result<Var> {
    let (_, gx) = recorded_input_grad(g, loss, x)?;
    let sq = g.square(gx)?;
    g.sum(sq)
}

/// Streaming state of the adaptive weight rule.
///
/// Each call to [`AdaptiveLambda::update`] first compares the new error with
/// `μ + 2σ` of all previously recorded errors (population σ; both 0 for an
/// empty history), sets λ to λ_max on a strictly larger value and to `γ·λ`
/// otherwise, and only then records the new error.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveLambda {
    count: u64,
    mean: f64,
    m2: f64,
    lambda: f64,
    lambda_max: f64,
    gamma: f64,
}

impl AdaptiveLambda {
    pub fn new(lambda_max: f64, gamma: f64) -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            lambda: 0.0,
            lambda_max,
            gamma,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn threshold(&self) -> f64 {
        self.mean + 2.0 * self.std()
    }

    /// Returns the λ to apply this step.
    pub fn update(&mut self, e_lin: f64) -> f64 {
        self.lambda = if e_lin > self.threshold() {
            self.lambda_max
        } else {
            self.gamma * self.lambda
        };
        self.count += 1;
        let delta = e_lin - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (e_lin - self.mean);
        self.lambda
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::toy::{Affine, Quadratic};

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_three_point_residual() {
        let q = Quadratic::norm_squared(2);
        let draw = LinearityDraw {
            xa: row(&[1.0, 0.0]),
            xb: row(&[0.0, 1.0]),
            alpha: vec![0.5],
        };
        let mut g = Graph::new();
        let (term, s) = elle_term(&mut g, &q, &draw).unwrap();
        assert_eq!(s.residual, vec![-0.5]);
        assert_eq!(g.value(term).item(), 0.25);
        assert_eq!(s.xc.data(), &[0.5, 0.5]);
    }

    #[test]
    fn five_point_on_norm_squared() {
        let q = Quadratic::norm_squared(2);
        let mut g = Graph::new();
        let c = five_point_combination(
            &mut g,
            &q,
            &row(&[1.0, 0.0]),
            &row(&[0.0, 1.0]),
            &FIVE_POINT_NODES,
        )
        .unwrap();
        assert!((g.value(c).data()[0] - 0.16).abs() < 1e-14);
        let c = five_point_combination(
            &mut g,
            &q,
            &row(&[1.0, 0.0]),
            &row(&[0.0, 1.0]),
            &FIVE_POINT_NODES_ENDPOINTS,
        )
        .unwrap();
        assert!((g.value(c).data()[0] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn llr_on_norm_squared() {
        let q = Quadratic::norm_squared(2);
        let mut g = Graph::new();
        let (term, r) = llr_sq_term(&mut g, &q, &row(&[0.0, 0.0]), &row(&[1.0, 1.0])).unwrap();
        assert_eq!(r, vec![2.0]);
        assert_eq!(g.value(term).item(), 4.0);
    }

    #[test]
    fn cure_on_norm_squared() {
        let q = Quadratic::norm_squared(3);
        let x = row(&[0.5, 0.5, 0.5]);
        let xf = row(&[0.6, 0.4, 0.6]);
        let mut g = Graph::new();
        let t = cure_term(&mut g, &q, &x, &xf).unwrap();
        assert!((g.value(t).item() - 2.0 * 0.1 * 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gradalign_orthogonal_and_opposite() {
        // ∇L = w on each side of a crease; pick losses whose gradients at the
        // two points are chosen directly.
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let b = g.input(Tensor::matrix(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap());
        let t = cosine_misalignment(&mut g, a, b).unwrap();
        assert!((g.value(t).item() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn gradalign_zero_gradient_convention() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let b = g.input(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let t = cosine_misalignment(&mut g, a, b).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
    }

    #[test]
    fn affine_terms_vanish() {
        let aff = Affine {
            w: Tensor::vector(vec![0.3, -1.2]).unwrap(),
            b: 0.7,
        };
        let x = row(&[0.4, 0.6]);
        let xs = row(&[0.5, 0.45]);
        let mut g = Graph::new();
        let t = gradalign_term(&mut g, &aff, &x, &xs).unwrap();
        assert!(g.value(t).item().abs() < 1e-15);
        let t = cure_term(&mut g, &aff, &x, &xs).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
    }

    #[test]
    fn adaptive_rule_examples() {
        let mut s = AdaptiveLambda::new(5000.0, 0.99);
        // Empty history: μ = σ = 0, any positive error triggers.
        assert_eq!(s.update(1.0), 5000.0);
        for _ in 0..3 {
            s.update(1.0);
        }
        assert_eq!(s.count(), 4);
        let before = s.lambda();
        assert_eq!(s.update(1.0), 0.99 * before);
        let mut s = AdaptiveLambda::new(5000.0, 0.99);
        for _ in 0..4 {
            s.update(1.0);
        }
        assert_eq!(s.update(1.01), 5000.0);
    }

    #[test]
    fn draw_order_and_shared_alpha() {
        let x = Tensor::full(&[3, 2], 0.5);
        let d = LinearityDraw::sample(
            &x,
            0.1,
            AlphaMode::Shared,
            true,
            &mut crate::rng::stream(1, &[]),
        );
        assert!(d.alpha.windows(2).all(|w| w[0] == w[1]));
        let e = LinearityDraw::sample(
            &x,
            0.1,
            AlphaMode::PerExample,
            true,
            &mut crate::rng::stream(1, &[]),
        );
        assert_eq!(d.xa, e.xa);
        assert_eq!(d.xb, e.xb);
        assert_eq!(d.alpha[0], e.alpha[0]);
    }
}
