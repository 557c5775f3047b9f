//! ℓ∞ inner maximization: FGSM, PGD with restarts, N-FGSM, and uniform
//! ε-ball sampling. Every output lies in the data box `[0, 1]^d`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{ClassifierLoss, InputLoss};
use crate::models::{one_hot, Mlp};
use crate::rng::uniform_box;
use crate::tensor::Tensor;

/// Something that can place a per-example input loss into a fresh graph.
pub trait LossSource {
    fn bind(&self, g: &mut Graph) -> Result<Box<dyn InputLoss + '_>>;
}

/// Cross-entropy of a classifier on a fixed label batch.
pub struct Classifier<'a> {
    pub model: &'a Mlp,
    pub labels: &'a [usize],
}

impl LossSource for Classifier<'_> {
    fn bind(&self, g: &mut Graph) -> Result<Box<dyn InputLoss + '_>> {
        let model = self.model.bind(g);
        let onehot = g.constant(one_hot(self.labels, self.model.config.classes)?);
        Ok(Box::new(ClassifierLoss { model, onehot }))
    }
}

/// Any graph-independent loss is its own source.
impl<T: InputLoss + Clone> LossSource for T {
    fn bind(&self, _g: &mut Graph) -> Result<Box<dyn InputLoss + '_>> {
        Ok(Box::new(self.clone()))
    }
}

/// Per-example losses and their input gradients (row `i` is `∇_{x_i} L_i`).
pub fn input_grad(src: &dyn LossSource, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let mut g = Graph::new();
    let loss = src.bind(&mut g)?;
    let xv = g.input(x.clone());
    let per = loss.per_example(&mut g, xv)?;
    let total = g.sum(per)?;
    let losses = g.value(per).data().to_vec();
    let grad = g.backward(total, &[xv])?.remove(0);
    Ok((losses, grad))
}

pub fn per_example_loss(src: &dyn LossSource, x: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let loss = src.bind(&mut g)?;
    let xv = g.input(x.clone());
    let per = loss.per_example(&mut g, xv)?;
    Ok(g.value(per).data().to_vec())
}

pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn clamp_unit(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Projects `x_adv` onto `{‖x_adv - x‖∞ ≤ ε} ∩ [0, 1]^d`.
pub fn project(x_adv: &mut Tensor, x: &Tensor, eps: f64) {
    for (a, &c) in x_adv.data_mut().iter_mut().zip(x.data()) {
        *a = a.clamp(c - eps, c + eps).clamp(0.0, 1.0);
    }
}

/// `clamp(x + ε·sign(∇_x L(x)))`
pub fn fgsm(src: &dyn LossSource, x: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, grad) = input_grad(src, x)?;
    let mut out = x.zip_map(&grad, |xi, gi| xi + eps * sign(gi));
    clamp_unit(&mut out);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgdOptions {
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    /// Start each restart at a uniform draw from the ε-ball; otherwise at `x`.
    pub random_start: bool,
}

impl PgdOptions {
    pub fn new(eps: f64, steps: usize, restarts: usize) -> Self {
        Self {
            steps,
            step_size: default_pgd_step(eps, steps),
            restarts,
            random_start: true,
        }
    }
}

pub fn default_pgd_step(eps: f64, steps: usize) -> f64 {
    2.5 * eps / steps as f64
}

/// Signed-gradient ascent projected to the ε-ball after every step; keeps
/// the per-example best final iterate over restarts.
pub fn pgd(
    src: &dyn LossSource,
    x: &Tensor,
    eps: f64,
    opts: PgdOptions,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if opts.steps == 0 || opts.step_size <= 0.0 {
        return Err(Error::Contract(
            "pgd needs steps >= 1 and step_size > 0".into(),
        ));
    }
    let (n, d) = x
        .dims2()
        .ok_or_else(|| Error::Contract("pgd expects a [n, d] batch".into()))?;
    let mut best: Option<(Tensor, Vec<f64>)> = None;
    for _ in 0..opts.restarts.max(1) {
        let mut cur = if opts.random_start {
            let noise = uniform_box(rng, &[n, d], eps);
            let mut s = x.zip_map(&noise, |a, b| a + b);
            clamp_unit(&mut s);
            s
        } else {
            x.clone()
        };
        for _ in 0..opts.steps {
            let (_, grad) = input_grad(src, &cur)?;
            cur = cur.zip_map(&grad, |c, gi| c + opts.step_size * sign(gi));
            project(&mut cur, x, eps);
        }
        best = Some(match best {
            None if opts.restarts <= 1 => (cur, Vec::new()),
            None => {
                let l = per_example_loss(src, &cur)?;
                (cur, l)
            }
            Some((mut bx, mut bl)) => {
                let l = per_example_loss(src, &cur)?;
                for i in 0..n {
                    if l[i] > bl[i] {
                        bl[i] = l[i];
                        bx.row_mut(i).copy_from_slice(cur.row(i));
                    }
                }
                (bx, bl)
            }
        });
    }
    Ok(best.expect("at least one restart").0)
}

/// N-FGSM: noise of half-width `noise_factor·ε`, then an FGSM step of size ε
/// from the noisy point. The combined perturbation is not projected back to
/// the ε-ball; only the data box is enforced.
pub fn nfgsm(
    src: &dyn LossSource,
    x: &Tensor,
    eps: f64,
    noise_factor: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let noise = uniform_box(rng, x.shape(), noise_factor * eps);
    let mut start = x.zip_map(&noise, |a, b| a + b);
    clamp_unit(&mut start);
    let (_, grad) = input_grad(src, &start)?;
    let mut out = start.zip_map(&grad, |s, gi| s + eps * sign(gi));
    clamp_unit(&mut out);
    Ok(out)
}

/// `x + Unif[-ε, ε]^d`, optionally clamped to the data box.
pub fn sample_ball(x: &Tensor, eps: f64, rng: &mut impl Rng, clamp: bool) -> Tensor {
    let noise = uniform_box(rng, x.shape(), eps);
    let mut out = x.zip_map(&noise, |a, b| a + b);
    if clamp {
        clamp_unit(&mut out);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Fgsm,
    Pgd,
    Nfgsm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Defaults to `2.5·ε/steps` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_noise_factor")]
    pub noise_factor: f64,
}

fn default_steps() -> usize {
    10
}
fn default_restarts() -> usize {
    1
}
fn default_noise_factor() -> f64 {
    2.0
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: None,
            restarts: 1,
            noise_factor: 2.0,
        }
    }

    pub fn pgd(epsilon: f64, steps: usize, restarts: usize) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            steps,
            step_size: None,
            restarts,
            noise_factor: 2.0,
        }
    }

    pub fn nfgsm(epsilon: f64, noise_factor: f64) -> Self {
        Self {
            kind: AttackKind::Nfgsm,
            epsilon,
            steps: 1,
            step_size: None,
            restarts: 1,
            noise_factor,
        }
    }

    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            epsilon: 0.0,
            steps: 1,
            step_size: None,
            restarts: 1,
            noise_factor: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("attack.epsilon must be >= 0".into()));
        }
        if self.kind == AttackKind::Pgd && self.steps == 0 {
            return Err(Error::Config("attack.steps must be >= 1 for pgd".into()));
        }
        if matches!(self.step_size, Some(s) if !(s > 0.0)) {
            return Err(Error::Config("attack.step_size must be > 0".into()));
        }
        if !(self.noise_factor >= 0.0) {
            return Err(Error::Config("attack.noise_factor must be >= 0".into()));
        }
        Ok(())
    }

    pub fn pgd_options(&self) -> PgdOptions {
        PgdOptions {
            steps: self.steps,
            step_size: self
                .step_size
                .unwrap_or_else(|| default_pgd_step(self.epsilon, self.steps)),
            restarts: self.restarts,
            random_start: true,
        }
    }

    pub fn run(&self, src: &dyn LossSource, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        match self.kind {
            AttackKind::None => Ok(x.clone()),
            AttackKind::Fgsm => fgsm(src, x, self.epsilon),
            AttackKind::Pgd => pgd(src, x, self.epsilon, self.pgd_options(), rng),
            AttackKind::Nfgsm => nfgsm(src, x, self.epsilon, self.noise_factor, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::toy::{Affine, Quadratic};
    use crate::rng::stream;

    fn linear() -> Affine {
        Affine {
            w: Tensor::vector(vec![1.0, -2.0]).unwrap(),
            b: 0.0,
        }
    }

    #[test]
    fn fgsm_follows_gradient_sign() {
        let x = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let adv = fgsm(&linear(), &x, 0.1).unwrap();
        assert!((adv.data()[0] - 0.6).abs() < 1e-15 && (adv.data()[1] - 0.4).abs() < 1e-15);
        assert_eq!(fgsm(&linear(), &x, 0.0).unwrap(), x);
    }

    #[test]
    fn pgd_single_centered_step_is_fgsm() {
        let x = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.2, 0.9]).unwrap();
        let opts = PgdOptions {
            steps: 1,
            step_size: 0.1,
            restarts: 1,
            random_start: false,
        };
        let a = pgd(&linear(), &x, 0.1, opts, &mut stream(0, &[])).unwrap();
        assert_eq!(a, fgsm(&linear(), &x, 0.1).unwrap());
    }

    #[test]
    fn pgd_reaches_quadratic_corner() {
        let q = Quadratic::norm_squared(2);
        let x = Tensor::matrix(1, 2, vec![0.4, 0.6]).unwrap();
        let q = Quadratic {
            center: Tensor::vector(vec![0.4, 0.6]).unwrap(),
            ..q
        };
        let adv = pgd(
            &q,
            &x,
            0.1,
            PgdOptions::new(0.1, 20, 1),
            &mut stream(3, &[]),
        )
        .unwrap();
        let l = per_example_loss(&q, &adv).unwrap()[0];
        assert!((l - 0.02).abs() < 1e-6, "{l}");
    }

    #[test]
    fn nfgsm_without_noise_is_fgsm() {
        let x = Tensor::matrix(1, 2, vec![0.3, 0.7]).unwrap();
        let a = nfgsm(&linear(), &x, 0.2, 0.0, &mut stream(1, &[])).unwrap();
        assert_eq!(a, fgsm(&linear(), &x, 0.2).unwrap());
    }

    #[test]
    fn sample_ball_zero_radius_is_identity() {
        let x = Tensor::matrix(1, 3, vec![0.1, 0.5, 0.9]).unwrap();
        assert_eq!(sample_ball(&x, 0.0, &mut stream(5, &[]), true), x);
    }
}
