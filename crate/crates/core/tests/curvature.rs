//! Curvature identities on smooth networks.

use rand::Rng;

use elle_core::attacks::{per_example_loss, Classifier, LossSource};
use elle_core::models::{Activation, Mlp, ModelConfig};
use elle_core::probes::linearity_residuals;
use elle_core::regularizers::LinearityDraw;
use elle_core::rng::stream;
use elle_core::{Graph, Tensor};

fn softplus_net(seed: u64) -> Mlp {
    let cfg = ModelConfig {
        input_dim: 6,
        hidden: vec![8, 8],
        classes: 3,
        activation: Activation::Softplus,
        init_seed: seed,
    };
    let mut m = Mlp::new(cfg).unwrap();
    let mut r = stream(seed, &[99]);
    for t in m.tensors_mut() {
        for v in t.data_mut() {
            *v = r.random_range(-1.5..1.5);
        }
    }
    m
}

/// `vᵀ ∇²_x L(x) v` for one example, by double backprop.
fn hessian_quad(src: &dyn LossSource, x: &[f64], v: &[f64]) -> f64 {
    let mut g = Graph::new();
    let loss = src.bind(&mut g).unwrap();
    let xv = g.input(Tensor::matrix(1, x.len(), x.to_vec()).unwrap());
    let l = loss.per_example(&mut g, xv).unwrap();
    let l = g.sum(l).unwrap();
    let gx = g.grad(l, &[xv]).unwrap()[0];
    let vv = g.constant(Tensor::matrix(1, v.len(), v.to_vec()).unwrap());
    let p = g.mul(gx, vv).unwrap();
    let s = g.sum(p).unwrap();
    let hv = g.backward(s, &[xv]).unwrap().remove(0);
    hv.data().iter().zip(v).map(|(a, b)| a * b).sum()
}

struct Fixed<'a>(&'a Mlp, usize);

impl Fixed<'_> {
    fn src(&self) -> Classifier<'_> {
        Classifier {
            model: self.0,
            labels: std::slice::from_ref(&self.1),
        }
    }
}

/// `(L(x+hv) - 2L(x) + L(x-hv)) / h²` for one example.
fn fd_quad(src: &dyn LossSource, x: &[f64], v: &[f64], h: f64) -> f64 {
    let at = |s: f64| {
        let p: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + s * b).collect();
        per_example_loss(src, &Tensor::matrix(1, p.len(), p).unwrap()).unwrap()[0]
    };
    (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h)
}

#[test]
fn small_segment_residual_follows_midpoint_curvature() {
    let eps = 1e-2;
    let mut rng = stream(11, &[0]);
    let mut ratios = Vec::new();
    for k in 0..200 {
        let net = Mlp::new(ModelConfig {
            init_seed: k,
            ..softplus_net(k).config
        })
        .unwrap();
        let f = Fixed(&net, k as usize % 3);
        let x = Tensor::matrix(1, 6, (0..6).map(|_| rng.random_range(0.2..0.8)).collect()).unwrap();
        let draw = LinearityDraw::sample(&x, eps, Default::default(), false, &mut rng);
        let alpha = draw.alpha[0];
        let r = linearity_residuals(&f.src(), &draw).unwrap()[0];
        let xc = draw.mixed().into_data();
        let v: Vec<f64> = draw
            .xa
            .data()
            .iter()
            .zip(draw.xb.data())
            .map(|(a, b)| a - b)
            .collect();
        let d2 = fd_quad(&f.src(), &xc, &v, 1e-2);
        ratios.push(r.abs() / (alpha * (1.0 - alpha) / 2.0 * d2.abs()));
    }
    ratios.sort_by(f64::total_cmp);
    let outside = ratios
        .iter()
        .filter(|r| !(0.95..=1.05).contains(*r))
        .count();
    assert_eq!(
        outside,
        0,
        "{outside} of {} ratios outside [0.95, 1.05]",
        ratios.len()
    );
}

#[test]
fn hessian_quadratic_form_matches_finite_differences() {
    let mut rng = stream(12, &[0]);
    for k in 0..50 {
        let net = softplus_net(100 + k);
        let f = Fixed(&net, 1);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ad = hessian_quad(&f.src(), &x, &v);
        let fd = fd_quad(&f.src(), &x, &v, 1e-4);
        assert!(
            (ad - fd).abs() <= 1e-5 * ad.abs().max(1.0),
            "ad {ad} fd {fd}"
        );
    }
}

#[test]
fn residual_is_exact_combination_of_point_losses() {
    let net = softplus_net(7);
    let labels = [0, 1, 2, 0];
    let src = Classifier {
        model: &net,
        labels: &labels,
    };
    let x = Tensor::matrix(4, 6, (0..24).map(|i| (i as f64 * 0.37).fract()).collect()).unwrap();
    let draw = LinearityDraw::sample(&x, 0.3, Default::default(), true, &mut stream(3, &[1]));
    let r = linearity_residuals(&src, &draw).unwrap();
    let la = per_example_loss(&src, &draw.xa).unwrap();
    let lb = per_example_loss(&src, &draw.xb).unwrap();
    let lc = per_example_loss(&src, &draw.mixed()).unwrap();
    for i in 0..4 {
        let a = draw.alpha[i];
        let direct = lc[i] - (1.0 - a) * la[i] - a * lb[i];
        assert!(
            (r[i] - direct).abs() <= 1e-12,
            "row {i}: {} vs {direct}",
            r[i]
        );
    }
}
