//! Central finite-difference check of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, LeafKind, Var};
use crate::tensor::Tensor;

/// Denominator floor for per-coordinate relative errors, so coordinates
/// whose true derivative is zero are compared in absolute terms.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |ad_i - fd_i| / max(|ad_i|, |fd_i|, floor)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compares the AD gradient of `build` at `point` with central differences.
///
/// `build` receives a fresh graph and the leaf bound to `point` and returns a
/// scalar node. The perturbed evaluations go through [`Graph::forward_eval`]
/// on the same graph.
pub fn finite_diff_check<F>(mut build: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_with(&mut build, point, h, LeafKind::Input, DEFAULT_FLOOR)
}

pub fn finite_diff_check_with<F>(
    build: &mut F,
    point: &Tensor,
    h: f64,
    kind: LeafKind,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut g = Graph::new();
    let leaf = g.leaf(kind, point.clone());
    let root = build(&mut g, leaf)?;
    let analytic = g.backward(root, &[leaf])?.remove(0);

    let mut numeric = vec![0.0; point.numel()];
    let mut probe = point.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = g.forward_eval(root, &[(leaf, probe.clone())])?.item();
        probe.data_mut()[i] = x0 - h;
        let fm = g.forward_eval(root, &[(leaf, probe.clone())])?.item();
        probe.data_mut()[i] = x0;
        *slot = (fp - fm) / (2.0 * h);
    }
    let numeric = Tensor::new(point.shape().to_vec(), numeric)?;
    let (max_rel_error, worst_index) = max_relative_error(&analytic, &numeric, floor);
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> (f64, usize) {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .enumerate()
        .fold(
            (0.0, 0),
            |(m, mi), (i, e)| if e > m { (e, i) } else { (m, mi) },
        )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = finite_diff_check(|g, x| g.square(x), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert_eq!(r.analytic.item(), 6.0);
        assert!(r.max_rel_error <= 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn softplus_at_zero() {
        let r = finite_diff_check(
            |g, x| {
                let y = g.softplus(x)?;
                g.sum(y)
            },
            &Tensor::scalar(0.0),
            1e-5,
        )
        .unwrap();
        assert_eq!(r.analytic.item(), 0.5);
        assert!(r.max_rel_error <= 1e-8);
    }
}
