//! Losses viewed as functions of the input batch.
//!
//! Attacks, regularizers and probes only need `x ↦ [L(x_1), ..., L(x_n)]`
//! built inside a graph; [`InputLoss`] is that interface. The classifier
//! loss is the production case, [`toy`] holds closed-form losses used to
//! check the curvature identities.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::models::{cross_entropy_per_example, BoundMlp};
use crate::tensor::Tensor;

pub trait InputLoss {
    /// Per-example losses `[n]` for inputs `[n, d]`.
    fn per_example(&self, g: &mut Graph, x: Var) -> Result<Var>;

    /// Per-example losses at `x_a`, `x_b` and `x_c = (1-α)x_a + αx_b`,
    /// where `alpha` is a `[n]` node. Implementations may exploit the
    /// convex structure; `x_c` is the explicitly mixed input.
    fn three_point(
        &self,
        g: &mut Graph,
        xa: Var,
        xb: Var,
        xc: Var,
        alpha: Var,
    ) -> Result<[Var; 3]> {
        let _ = alpha;
        Ok([
            self.per_example(g, xa)?,
            self.per_example(g, xb)?,
            self.per_example(g, xc)?,
        ])
    }
}

/// Cross-entropy of a bound classifier against fixed labels.
#[derive(Clone, Debug)]
pub struct ClassifierLoss {
    pub model: BoundMlp,
    /// Constant `[n, classes]` one-hot labels.
    pub onehot: Var,
}

impl InputLoss for ClassifierLoss {
    fn per_example(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let logits = self.model.forward(g, x)?;
        cross_entropy_per_example(g, logits, self.onehot)
    }

    fn three_point(
        &self,
        g: &mut Graph,
        xa: Var,
        xb: Var,
        _xc: Var,
        alpha: Var,
    ) -> Result<[Var; 3]> {
        let za = self.model.first_layer(g, xa)?;
        let zb = self.model.first_layer(g, xb)?;
        let la = self.model.from_first_layer(g, za)?;
        let la = cross_entropy_per_example(g, la, self.onehot)?;
        let lb = self.model.from_first_layer(g, zb)?;
        let lb = cross_entropy_per_example(g, lb, self.onehot)?;
        let lc = self.model.forward_mixed(g, za, zb, alpha)?;
        let lc = cross_entropy_per_example(g, lc, self.onehot)?;
        Ok([la, lb, lc])
    }
}

/// Sum of per-example losses; its input gradient holds per-example
/// gradients in each row.
pub fn summed(loss: &dyn InputLoss, g: &mut Graph, x: Var) -> Result<Var> {
    let per = loss.per_example(g, x)?;
    g.sum(per)
}

/// Per-row dot product of a `[n, d]` node with a constant row vector.
fn row_dot_const(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let n = g.value(x).shape()[0];
    let wv = g.constant(w.clone());
    let wb = g.broadcast_rows(wv, n)?;
    let p = g.mul(x, wb)?;
    g.row_sum(p)
}

pub mod toy {
    //! Closed-form losses with known curvature.

    use super::*;

    /// `L(x) = w·x + b`
    #[derive(Clone, Debug)]
    pub struct Affine {
        pub w: Tensor,
        pub b: f64,
    }

    impl InputLoss for Affine {
        fn per_example(&self, g: &mut Graph, x: Var) -> Result<Var> {
            let d = row_dot_const(g, x, &self.w)?;
            g.affine(d, 1.0, self.b)
        }
    }

    /// `L(x) = (x - c)ᵀ A (x - c)`
    #[derive(Clone, Debug)]
    pub struct Quadratic {
        pub a: Tensor,
        pub center: Tensor,
    }

    impl Quadratic {
        pub fn norm_squared(d: usize) -> Self {
            let mut a = Tensor::zeros(&[d, d]);
            for i in 0..d {
                a.data_mut()[i * d + i] = 1.0;
            }
            Self {
                a,
                center: Tensor::zeros(&[d]),
            }
        }

        /// `vᵀ (A + Aᵀ) v`, the exact second directional derivative.
        pub fn second_directional(&self, v: &[f64]) -> f64 {
            let d = v.len();
            let a = self.a.data();
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += v[i] * (a[i * d + j] + a[j * d + i]) * v[j];
                }
            }
            s
        }

        pub fn value(&self, x: &[f64]) -> f64 {
            let d = x.len();
            let c = self.center.data();
            let a = self.a.data();
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += (x[i] - c[i]) * a[i * d + j] * (x[j] - c[j]);
                }
            }
            s
        }
    }

    impl InputLoss for Quadratic {
        fn per_example(&self, g: &mut Graph, x: Var) -> Result<Var> {
            let neg_c = g.constant(self.center.map(|v| -v));
            let diff = g.add_row(x, neg_c)?;
            let a = g.constant(self.a.clone());
            let y = g.matmul(diff, a)?;
            let p = g.mul(y, diff)?;
            g.row_sum(p)
        }
    }

    /// Continuous piecewise-linear `f(x) = ⟨w₂, x⟩ - ½ relu(⟨v, x⟩)` on ℝ²
    /// with `w₁ = (-1,-1)`, `w₂ = (0,-3/2)`, `v = (2,-1)`; it equals
    /// `⟨w₁, x⟩` where `⟨v, x⟩ ≥ 0` and `⟨w₂, x⟩` elsewhere.
    #[derive(Clone, Debug, Default)]
    pub struct TwoPiece;

    impl TwoPiece {
        pub const W1: [f64; 2] = [-1.0, -1.0];
        pub const W2: [f64; 2] = [0.0, -1.5];
        pub const V: [f64; 2] = [2.0, -1.0];

        pub fn value(x: &[f64]) -> f64 {
            let dot = |w: [f64; 2]| w[0] * x[0] + w[1] * x[1];
            if dot(Self::V) >= 0.0 {
                dot(Self::W1)
            } else {
                dot(Self::W2)
            }
        }
    }

    impl InputLoss for TwoPiece {
        fn per_example(&self, g: &mut Graph, x: Var) -> Result<Var> {
            let base = row_dot_const(g, x, &Tensor::vector(Self::W2.to_vec())?)?;
            let side = row_dot_const(g, x, &Tensor::vector(Self::V.to_vec())?)?;
            let hinge = g.relu(side)?;
            let hinge = g.scale(hinge, -0.5)?;
            g.add(base, hinge)
        }
    }

    /// `L(x) = p(⟨u, x⟩)` with `p(t) = Σ_k coeffs[k] t^k`.
    #[derive(Clone, Debug)]
    pub struct Polynomial1d {
        pub direction: Tensor,
        pub coeffs: Vec<f64>,
    }

    impl Polynomial1d {
        pub fn eval(&self, t: f64) -> f64 {
            self.coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
        }

        pub fn second_derivative(&self, t: f64) -> f64 {
            self.coeffs
                .iter()
                .enumerate()
                .skip(2)
                .map(|(k, c)| (k * (k - 1)) as f64 * c * t.powi(k as i32 - 2))
                .sum()
        }
    }

    impl InputLoss for Polynomial1d {
        fn per_example(&self, g: &mut Graph, x: Var) -> Result<Var> {
            let t = row_dot_const(g, x, &self.direction)?;
            let k = self.coeffs.len();
            if k == 1 {
                let z = g.scale(t, 0.0)?;
                return g.affine(z, 1.0, self.coeffs[0]);
            }
            let mut acc = g.affine(t, self.coeffs[k - 1], self.coeffs[k - 2])?;
            for c in self.coeffs[..k - 2].iter().rev() {
                let m = g.mul(acc, t)?;
                acc = g.affine(m, 1.0, *c)?;
            }
            Ok(acc)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::toy::*;
    use super::*;

    fn eval(loss: &dyn InputLoss, x: Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.input(x);
        let l = loss.per_example(&mut g, xv).unwrap();
        g.value(l).data().to_vec()
    }

    #[test]
    fn toy_losses_match_closed_forms() {
        let x = Tensor::matrix(2, 2, vec![0.3, -0.2, 0.9, 0.4]).unwrap();
        let aff = Affine {
            w: Tensor::vector(vec![1.0, -2.0]).unwrap(),
            b: 0.5,
        };
        assert_eq!(
            eval(&aff, x.clone()),
            vec![0.3 + 0.4 + 0.5, 0.9 - 0.8 + 0.5]
        );

        let q = Quadratic {
            a: Tensor::matrix(2, 2, vec![2.0, 1.0, 0.0, -1.0]).unwrap(),
            center: Tensor::vector(vec![0.1, 0.2]).unwrap(),
        };
        let got = eval(&q, x.clone());
        for (i, v) in got.iter().enumerate() {
            assert!((v - q.value(x.row(i))).abs() < 1e-15);
        }

        let got = eval(&TwoPiece, x.clone());
        for (i, v) in got.iter().enumerate() {
            assert!((v - TwoPiece::value(x.row(i))).abs() < 1e-15);
        }

        let p = Polynomial1d {
            direction: Tensor::vector(vec![1.0, 1.0]).unwrap(),
            coeffs: vec![1.0, -1.0, 0.5, 2.0],
        };
        let got = eval(&p, x.clone());
        assert!((got[0] - p.eval(0.1)).abs() < 1e-15);
        assert!((got[1] - p.eval(1.3)).abs() < 1e-14);
    }
}
