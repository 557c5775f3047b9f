use elle_core::config::RunConfig;
use elle_core::data::{self, Dataset};
use elle_core::models::{Layer, Mlp};
use elle_core::regularizers::RegularizerKind;
use elle_core::trainer::{self, evaluate, Trainer};
use elle_core::Tensor;

const LINEAR: &str = r#"
[model]
input_dim = 2
hidden = []
classes = 2

[data]
dim = 2
classes = 2

[schedule]
momentum = 0.9
weight_decay = 0.01
batch_size = 1
"#;

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn sgd_step_on_linear_model_matches_hand_computation() {
    let cfg = RunConfig::parse(LINEAR).unwrap();
    let w = [0.2, -0.4, 0.1, 0.3];
    let b = [0.05, -0.05];
    let model = Mlp::from_layers(
        cfg.model.clone(),
        vec![Layer {
            weight: Tensor::matrix(2, 2, w.to_vec()).unwrap(),
            bias: Tensor::vector(b.to_vec()).unwrap(),
        }],
    )
    .unwrap();
    let x = [0.7, 0.2];
    let y = 1;
    let ds = Dataset::new(Tensor::matrix(1, 2, x.to_vec()).unwrap(), vec![y], 2, "one").unwrap();
    let mut t = Trainer::with_model(cfg, &ds, model).unwrap();
    let lr = 0.5;

    let z = [
        w[0] * x[0] + w[1] * x[1] + b[0],
        w[2] * x[0] + w[3] * x[1] + b[1],
    ];
    let p = softmax(&z);
    let dz = [p[0], p[1] - 1.0];
    // First step: the velocity is just the gradient plus decay.
    let mut w_new = w;
    for r in 0..2 {
        for c in 0..2 {
            w_new[r * 2 + c] -= lr * (dz[r] * x[c] + 0.01 * w[r * 2 + c]);
        }
    }
    let b_new = [
        b[0] - lr * (dz[0] + 0.01 * b[0]),
        b[1] - lr * (dz[1] + 0.01 * b[1]),
    ];
    let loss = -p[y].ln();

    let rec = t.step(0, 0, &[0], lr).unwrap();
    assert!((rec.loss - loss).abs() < 1e-14);
    let l = &t.model().layers[0];
    for (got, want) in l.weight.data().iter().zip(&w_new) {
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }
    for (got, want) in l.bias.data().iter().zip(&b_new) {
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }
}

const SMALL: &str = r#"
seed = 5

[model]
input_dim = 16
hidden = [12]
classes = 3

[data]
dim = 16
classes = 3
per_class = 40
test_size = 30

[attack]
kind = "fgsm"
epsilon = 0.1

[schedule]
epochs = 2
batch_size = 16
lr = 0.1

[eval]
probe_size = 30
"#;

fn small(kind: RegularizerKind, lambda: f64) -> RunConfig {
    let mut cfg = RunConfig::parse(SMALL).unwrap();
    cfg.regularizer.kind = kind;
    cfg.regularizer.lambda = lambda;
    cfg
}

#[test]
fn zero_lambda_elle_reproduces_unregularized_run() {
    let base = small(RegularizerKind::None, 0.0);
    let (train_ds, test) = trainer::load_data(&base).unwrap();
    let a = trainer::train(&base, &train_ds, &test, &mut |_| {}).unwrap();
    let b = trainer::train(
        &small(RegularizerKind::Elle, 0.0),
        &train_ds,
        &test,
        &mut |_| {},
    )
    .unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.epochs, b.epochs);
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
    }
}

#[test]
fn positive_lambda_changes_the_trajectory() {
    let base = small(RegularizerKind::None, 0.0);
    let (train_ds, test) = trainer::load_data(&base).unwrap();
    let a = trainer::train(&base, &train_ds, &test, &mut |_| {}).unwrap();
    let b = trainer::train(
        &small(RegularizerKind::Elle, 1.0),
        &train_ds,
        &test,
        &mut |_| {},
    )
    .unwrap();
    assert_ne!(a.model, b.model);
    assert!(b.steps.iter().all(|s| s.e_lin.is_some_and(|e| e >= 0.0)));
}

#[test]
fn every_regularizer_trains_deterministically() {
    for kind in [
        RegularizerKind::Elle,
        RegularizerKind::ElleA,
        RegularizerKind::Elle2p,
        RegularizerKind::Elle5pt,
        RegularizerKind::Gradalign,
        RegularizerKind::LlrSq,
        RegularizerKind::Cure,
    ] {
        let cfg = small(kind, 0.5);
        let (train_ds, test) = trainer::load_data(&cfg).unwrap();
        let a = trainer::train(&cfg, &train_ds, &test, &mut |_| {}).unwrap();
        let b = trainer::train(&cfg, &train_ds, &test, &mut |_| {}).unwrap();
        assert_eq!(a.model, b.model, "{kind:?}");
        assert_eq!(a.epochs, b.epochs, "{kind:?}");
        assert!(a.model.tensors().all(|t| t.all_finite()), "{kind:?}");
    }
}

#[test]
fn tied_logits_predict_the_lowest_class() {
    let cfg = RunConfig::parse(LINEAR).unwrap();
    let model = Mlp::from_layers(
        cfg.model.clone(),
        vec![Layer {
            weight: Tensor::zeros(&[2, 2]),
            bias: Tensor::zeros(&[2]),
        }],
    )
    .unwrap();
    let x = Tensor::matrix(3, 2, vec![0.1, 0.9, 0.5, 0.5, 1.0, 0.0]).unwrap();
    assert_eq!(model.predict(&x).unwrap(), vec![0, 0, 0]);
    let zeros = Dataset::new(x.clone(), vec![0, 0, 0], 2, "t").unwrap();
    let ones = Dataset::new(x, vec![1, 1, 1], 2, "t").unwrap();
    assert_eq!(evaluate(&model, &zeros, None, 0).unwrap(), 1.0);
    assert_eq!(evaluate(&model, &ones, None, 0).unwrap(), 0.0);
}

#[test]
fn training_reduces_loss_on_separable_blobs() {
    let mut cfg = small(RegularizerKind::None, 0.0);
    cfg.schedule.epochs = 5;
    let ds = data::synth_blobs(16, 3, 60, 0.8, 0.2, 1).unwrap();
    let (train_ds, test) = data::split(&ds, 30, 1).unwrap();
    let o = trainer::train(&cfg, &train_ds, &test, &mut |_| {}).unwrap();
    assert!(o.epochs.last().unwrap().clean_acc >= 0.9);
}

#[test]
fn stroke_source_needs_a_square_dimension() {
    let text = |d: usize| {
        format!("[model]\ninput_dim = {d}\nhidden = [4]\nclasses = 3\n[data]\nsource = \"strokes\"\ndim = {d}\nclasses = 3\nper_class = 10\ntest_size = 6\n")
    };
    let (train, test) = trainer::load_data(&RunConfig::parse(&text(100)).unwrap()).unwrap();
    assert_eq!((train.len(), test.len(), train.dim()), (24, 6, 100));
    assert!(trainer::load_data(&RunConfig::parse(&text(50)).unwrap()).is_err());
}
