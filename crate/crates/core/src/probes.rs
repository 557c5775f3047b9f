//! Measurement-only instruments. Nothing here is differentiated with respect
//! to the parameters and no probe mutates its model.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attacks::{input_grad, per_example_loss, sample_ball, LossSource};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::InputLoss;
use crate::regularizers::{AlphaMode, LinearityDraw, ZERO_NORM};
use crate::rng::uniform_box;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub metric: String,
    pub value: f64,
    /// Standard error of `value` over the independent draws, 0 for one draw.
    pub std_error: f64,
    pub samples: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl ProbeReport {
    fn from_draws(metric: &str, draws: &[f64], epsilon: f64, seed: u64) -> Result<Self> {
        let n = draws.len();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        if !mean.is_finite() {
            return Err(Error::Contract(format!(
                "probe {metric} produced a non-finite value"
            )));
        }
        Ok(Self {
            metric: metric.to_string(),
            value: mean,
            std_error,
            samples: n,
            epsilon,
            seed,
        })
    }
}

/// Per-example three-point residuals `L(x_c) - (1-α)L(x_a) - αL(x_b)`.
pub fn linearity_residuals(src: &dyn LossSource, draw: &LinearityDraw) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let loss = src.bind(&mut g)?;
    let n = draw.alpha.len();
    let xa = g.input(draw.xa.clone());
    let xb = g.input(draw.xb.clone());
    let xc = g.input(draw.mixed());
    let alpha = g.constant(Tensor::from_raw(vec![n], draw.alpha.clone()));
    let [la, lb, lc] = loss.three_point(&mut g, xa, xb, xc, alpha)?;
    let (la, lb, lc) = (g.value(la).data(), g.value(lb).data(), g.value(lc).data());
    Ok((0..n)
        .map(|i| lc[i] - (1.0 - draw.alpha[i]) * la[i] - draw.alpha[i] * lb[i])
        .collect())
}

/// Monte-Carlo estimate of the expected absolute three-point residual over
/// `x_a, x_b ~ Unif(ε-ball)` and `α ~ Unif[0,1]`, averaged over the rows of
/// `x`. Each of the `n_samples` draws resamples every row once.
pub fn estimate_elin(
    src: &dyn LossSource,
    x: &Tensor,
    eps: f64,
    n_samples: usize,
    clamp: bool,
    rng: &mut impl Rng,
    seed: u64,
) -> Result<ProbeReport> {
    if n_samples == 0 {
        return Err(Error::Contract("estimate_elin needs n_samples >= 1".into()));
    }
    let mut draws = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let draw = LinearityDraw::sample(x, eps, AlphaMode::PerExample, clamp, rng);
        let r = linearity_residuals(src, &draw)?;
        draws.push(r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64);
    }
    ProbeReport::from_draws("elin", &draws, eps, seed)
}

pub fn default_fd_step(v: &[f64]) -> f64 {
    1e-4 * v.iter().fold(1.0f64, |m, a| m.max(a.abs()))
}

fn point_loss(loss: &dyn InputLoss, x: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.input(Tensor::matrix(1, x.len(), x.to_vec())?);
    let l = loss.per_example(&mut g, xv)?;
    Ok(g.value(l).data()[0])
}

/// `(L(x+hv) - 2L(x) + L(x-hv)) / h²`
pub fn second_dir_derivative_fd(loss: &dyn InputLoss, x: &[f64], v: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Contract(
            "finite-difference step must be positive".into(),
        ));
    }
    let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let (lp, l0, lm) = (
        point_loss(loss, &plus)?,
        point_loss(loss, x)?,
        point_loss(loss, &minus)?,
    );
    Ok((lp - 2.0 * l0 + lm) / (h * h))
}

/// `vᵀ ∇²L(x) v` by differentiating `⟨∇L(x), v⟩` once more.
pub fn second_dir_derivative_ad(loss: &dyn InputLoss, x: &[f64], v: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.input(Tensor::matrix(1, x.len(), x.to_vec())?);
    let l = loss.per_example(&mut g, xv)?;
    let l = g.sum(l)?;
    let gx = g.grad(l, &[xv])?[0];
    let vv = g.constant(Tensor::matrix(1, v.len(), v.to_vec())?);
    let gv = g.mul(gx, vv)?;
    let s = g.sum(gv)?;
    let hv = g.backward(s, &[xv])?.remove(0);
    Ok(hv.data().iter().zip(v).map(|(a, b)| a * b).sum())
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `1 - cos(g_i, h_i)` per row; rows with a zero-norm side give 0.
pub fn row_misalignment(g: &Tensor, h: &Tensor) -> Vec<f64> {
    let n = g.shape()[0];
    (0..n)
        .map(|i| cosine(g.row(i), h.row(i)).map_or(0.0, |c| 1.0 - c))
        .collect()
}

/// Batch mean of `1 - cos(∇L(x), ∇L(x+η))` with `η ~ Unif(ε-ball)`.
pub fn grad_misalignment(
    src: &dyn LossSource,
    x: &Tensor,
    eps: f64,
    clamp: bool,
    rng: &mut impl Rng,
    seed: u64,
) -> Result<ProbeReport> {
    let xn = sample_ball(x, eps, rng, clamp);
    let (_, g1) = input_grad(src, x)?;
    let (_, g2) = input_grad(src, &xn)?;
    let per = row_misalignment(&g1, &g2);
    let mut report = ProbeReport::from_draws("misalignment", &per, eps, seed)?;
    report.samples = per.len();
    Ok(report)
}

/// Per-row zeroth-order misalignment
/// `1 - sign[(L(x+σu) - L(x))(L(x+η+σv) - L(x+η))]·cos(u, v)`.
pub fn fd_gradalign_values(
    src: &dyn LossSource,
    x: &Tensor,
    eta: &Tensor,
    u: &Tensor,
    v: &Tensor,
    sigma: f64,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Contract("sigma must be positive".into()));
    }
    let xe = x.zip_map(eta, |a, b| a + b);
    let xu = x.zip_map(u, |a, b| a + sigma * b);
    let xev = xe.zip_map(v, |a, b| a + sigma * b);
    let l0 = per_example_loss(src, x)?;
    let lu = per_example_loss(src, &xu)?;
    let le = per_example_loss(src, &xe)?;
    let lv = per_example_loss(src, &xev)?;
    let n = x.shape()[0];
    Ok((0..n)
        .map(|i| {
            let s = crate::attacks::sign((lu[i] - l0[i]) * (lv[i] - le[i]));
            1.0 - s * cosine(u.row(i), v.row(i)).unwrap_or(0.0)
        })
        .collect())
}

/// Batch mean of [`fd_gradalign_values`] with `η ~ Unif[-ε, ε]^d` and
/// `u, v ~ N(0, I)`, drawn in that order.
pub fn fd_gradalign_estimate(
    src: &dyn LossSource,
    x: &Tensor,
    eps: f64,
    sigma: f64,
    rng: &mut impl Rng,
    seed: u64,
) -> Result<ProbeReport> {
    let eta = uniform_box(rng, x.shape(), eps);
    let mut normal = || {
        let data = (0..x.numel())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::from_raw(x.shape().to_vec(), data)
    };
    let u = normal();
    let v = normal();
    let per = fd_gradalign_values(src, x, &eta, &u, &v, sigma)?;
    ProbeReport::from_draws("fd_gradalign", &per, eps, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Var;
    use crate::loss::toy::{Affine, Quadratic};

    #[derive(Clone)]
    struct Exp1d;

    impl InputLoss for Exp1d {
        fn per_example(&self, g: &mut Graph, x: Var) -> Result<Var> {
            // exp(x) = sigmoid(x) / sigmoid(-x)
            let s = g.sigmoid(x)?;
            let n = g.neg(x)?;
            let t = g.sigmoid(n)?;
            let r = g.div(s, t)?;
            g.row_sum(r)
        }
    }

    #[test]
    fn fd_on_norm_squared_and_exp() {
        let q = Quadratic::norm_squared(3);
        let v = [0.3, -1.0, 2.0];
        let d2 = second_dir_derivative_fd(&q, &[0.1, 0.2, 0.3], &v, default_fd_step(&v)).unwrap();
        assert!((d2 - 2.0 * (0.09 + 1.0 + 4.0)).abs() < 1e-6);
        let e = second_dir_derivative_fd(&Exp1d, &[0.0], &[1.0], 1e-4).unwrap();
        assert!((e - 1.0).abs() < 1e-7);
        let ad = second_dir_derivative_ad(&q, &[0.1, 0.2, 0.3], &v).unwrap();
        assert!((ad - 10.18).abs() < 1e-12);
    }

    #[test]
    fn affine_probes_vanish() {
        let aff = Affine {
            w: Tensor::vector(vec![0.5, -0.25]).unwrap(),
            b: 1.0,
        };
        let x = Tensor::matrix(2, 2, vec![0.2, 0.3, 0.7, 0.1]).unwrap();
        let mut rng = crate::rng::stream(3, &[]);
        let r = estimate_elin(&aff, &x, 0.1, 20, true, &mut rng, 3).unwrap();
        assert!(r.value < 1e-10);
        let r = grad_misalignment(&aff, &x, 0.1, true, &mut rng, 3).unwrap();
        assert!(r.value.abs() < 1e-12);
        let u = Tensor::matrix(2, 2, vec![1.0, -2.0, -1.0, 0.5]).unwrap();
        let vals = fd_gradalign_values(&aff, &x, &Tensor::zeros(&[2, 2]), &u, &u, 1e-3).unwrap();
        assert!(vals.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn orthogonal_directions_give_one() {
        let q = Quadratic::norm_squared(2);
        let x = Tensor::matrix(1, 2, vec![0.3, 0.6]).unwrap();
        let u = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let v = Tensor::matrix(1, 2, vec![0.0, 3.0]).unwrap();
        let vals = fd_gradalign_values(&q, &x, &Tensor::zeros(&[1, 2]), &u, &v, 1e-3).unwrap();
        assert_eq!(vals, vec![1.0]);
    }

    #[test]
    fn misalignment_hand_cases() {
        let g = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        let h = Tensor::matrix(3, 2, vec![0.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let m = row_misalignment(&g, &h);
        assert!((m[0] - 1.0).abs() < 1e-15);
        assert_eq!(m[1], 0.0);
        assert!(m[2].abs() < 1e-15);
    }
}
