//! Browser bindings for three small experiments.
//!
//! Every entry point returns a JSON string; the page parses it and draws.

use elle_core::config::RunConfig;
use elle_core::data;
use elle_core::graph::Graph;
use elle_core::loss::toy::{Quadratic, TwoPiece};
use elle_core::loss::InputLoss;
use elle_core::regularizers::{self as reg, AlphaMode, LinearityDraw};
use elle_core::rng::{purpose, stream};
use elle_core::trainer::{self, Event};
use elle_core::Tensor;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Out = std::result::Result<String, String>;

fn to_js<T: Serialize>(v: &T) -> Out {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn js(e: elle_core::Error) -> String {
    e.to_string()
}

fn wrap(r: Out) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[derive(Serialize)]
struct TwoPieceReport {
    x_fgsm: [f64; 2],
    /// Per-draw unsquared three-point residuals.
    elle: Vec<f64>,
    /// Per-draw two-sample residuals against `x_fgsm`.
    elle_2p: Vec<f64>,
    xa: Vec<[f64; 2]>,
    xb: Vec<[f64; 2]>,
}

/// Three-point and two-sample residuals of the piecewise-linear toy at `x`.
#[wasm_bindgen]
pub fn two_piece(x0: f64, x1: f64, eps: f64, draws: usize, seed: u64) -> Result<String, JsError> {
    wrap(run_two_piece(x0, x1, eps, draws, seed))
}

pub fn run_two_piece(x0: f64, x1: f64, eps: f64, draws: usize, seed: u64) -> Out {
    let draws = draws.clamp(1, 5000);
    let x = Tensor::matrix(draws, 2, [x0, x1].repeat(draws)).map_err(js)?;
    let mut rng = stream(seed, &[purpose::REGULARIZER]);
    let draw = LinearityDraw::sample(&x, eps, AlphaMode::PerExample, false, &mut rng);

    // Sign of the input gradient gives the FGSM point.
    let mut g = Graph::new();
    let xv = g.input(x.slice_rows(0, 1));
    let l = TwoPiece.per_example(&mut g, xv).map_err(js)?;
    let l = g.sum(l).map_err(js)?;
    let grad = g.backward(l, &[xv]).map_err(js)?.remove(0);
    let x_fgsm = [
        x0 + eps * grad.data()[0].signum(),
        x1 + eps * grad.data()[1].signum(),
    ];
    let xf = Tensor::matrix(draws, 2, x_fgsm.repeat(draws)).map_err(js)?;

    let mut g = Graph::new();
    let (_, sample) = reg::elle_term(&mut g, &TwoPiece, &draw).map_err(js)?;
    let (_, two) = reg::elle_2p_term(&mut g, &TwoPiece, &draw.xa, &xf, &draw.alpha).map_err(js)?;
    let pts = |t: &Tensor| t.data().chunks(2).map(|c| [c[0], c[1]]).collect();
    to_js(&TwoPieceReport {
        x_fgsm,
        elle: sample.residual.iter().map(|r| r.abs()).collect(),
        elle_2p: two.iter().map(|r| r.abs()).collect(),
        xa: pts(&draw.xa),
        xb: pts(&draw.xb),
    })
}

#[derive(Serialize)]
struct QuadraticReport {
    three_point: f64,
    three_point_predicted: f64,
    five_point: f64,
    five_point_predicted: f64,
}

/// Residuals of `L(x) = xᵀAx` on the segment `[x_a, x_b]` next to their
/// closed forms in the second directional derivative.
#[wasm_bindgen]
pub fn quadratic(a: &[f64], xa: &[f64], xb: &[f64], alpha: f64) -> Result<String, JsError> {
    wrap(run_quadratic(a, xa, xb, alpha))
}

pub fn run_quadratic(a: &[f64], xa: &[f64], xb: &[f64], alpha: f64) -> Out {
    if a.len() != 4 || xa.len() != 2 || xb.len() != 2 {
        return Err("expected a 2x2 matrix and two 2-D points".to_string());
    }
    let q = Quadratic {
        a: Tensor::matrix(2, 2, a.to_vec()).map_err(js)?,
        center: Tensor::zeros(&[2]),
    };
    let v = [xa[0] - xb[0], xa[1] - xb[1]];
    let d2 = q.second_directional(&v);
    let draw = LinearityDraw {
        xa: Tensor::matrix(1, 2, xa.to_vec()).map_err(js)?,
        xb: Tensor::matrix(1, 2, xb.to_vec()).map_err(js)?,
        alpha: vec![alpha],
    };
    let mut g = Graph::new();
    let (_, three) = reg::elle_term(&mut g, &q, &draw).map_err(js)?;
    let (_, five) = reg::elle_5pt_term(&mut g, &q, &draw).map_err(js)?;
    to_js(&QuadraticReport {
        three_point: three.residual[0].abs(),
        three_point_predicted: alpha * (1.0 - alpha) / 2.0 * d2.abs(),
        five_point: five[0].abs(),
        five_point_predicted: d2.abs() / 25.0,
    })
}

#[derive(Serialize)]
struct TrainReport {
    epochs: Vec<trainer::EpochRecord>,
    co_epoch: Option<usize>,
    diverged: Option<String>,
    /// Test points and predicted labels for a scatter plot.
    points: Vec<[f64; 2]>,
    labels: Vec<usize>,
    predicted: Vec<usize>,
}

/// Trains on 2-D blobs with the given TOML config and returns the curves.
#[wasm_bindgen]
pub fn train(config_toml: &str) -> Result<String, JsError> {
    wrap(run_train(config_toml))
}

pub fn run_train(config_toml: &str) -> Out {
    let cfg = RunConfig::parse(config_toml).map_err(js)?;
    if cfg.model.input_dim != 2 {
        return Err("the demo trains on 2-D inputs; set model.input_dim = 2".to_string());
    }
    let ds = data::synth_mixture(
        2,
        cfg.data.classes,
        cfg.data.modes,
        cfg.data.per_class,
        cfg.data.margin,
        cfg.data.spread,
        cfg.seed,
    )
    .map_err(js)?;
    let n_test = cfg.data.test_size.min(ds.len() / 2);
    let (train_ds, test) = data::split(&ds, n_test, cfg.seed).map_err(js)?;
    let mut diverged = None;
    let outcome = trainer::train(&cfg, &train_ds, &test, &mut |ev| {
        if let Event::Diverged { message, .. } = ev {
            diverged = Some(message.clone());
        }
    });
    let (epochs, co_epoch, predicted) = match outcome {
        Ok(o) => {
            let p = o.model.predict(test.inputs()).map_err(js)?;
            (o.epochs, o.co_epoch, p)
        }
        Err(_) if diverged.is_some() => (Vec::new(), None, Vec::new()),
        Err(e) => return Err(js(e)),
    };
    to_js(&TrainReport {
        epochs,
        co_epoch,
        diverged,
        points: test
            .inputs()
            .data()
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect(),
        labels: test.labels().to_vec(),
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn two_piece_blind_spot() {
        let v: Value =
            serde_json::from_str(&run_two_piece(0.5, 0.5, 0.5, 200, 0).unwrap()).unwrap();
        assert_eq!(v["x_fgsm"], serde_json::json!([0.0, 0.0]));
        let max = |k: &str| {
            v[k].as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_f64().unwrap())
                .fold(0.0, f64::max)
        };
        assert!(max("elle_2p") < 1e-12);
        assert!(max("elle") > 1e-4);
    }

    #[test]
    fn quadratic_matches_closed_forms() {
        let v: Value = serde_json::from_str(
            &run_quadratic(&[2.0, 0.5, -0.3, 1.0], &[1.0, 0.0], &[0.0, 1.0], 0.3).unwrap(),
        )
        .unwrap();
        let f = |k: &str| v[k].as_f64().unwrap();
        assert!((f("three_point") - f("three_point_predicted")).abs() < 1e-12);
        assert!((f("five_point") - f("five_point_predicted")).abs() < 1e-12);
    }

    #[test]
    fn shipped_page_config_trains() {
        let v: Value =
            serde_json::from_str(&run_train(include_str!("../www/default.toml")).unwrap()).unwrap();
        assert_eq!(v["epochs"].as_array().unwrap().len(), 15);
        assert_eq!(v["predicted"].as_array().unwrap().len(), 200);
    }
}
