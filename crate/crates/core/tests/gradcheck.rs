mod common;

use camalign_core::model::LossWeights;
use camalign_core::tape::Var;
use camalign_core::{ModelConfig, ReportModel, Tape, Tensor, Variant};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PRIMITIVE_TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_primitive(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let worst = check_primitive(inputs, f, 17);
    assert!(worst < PRIMITIVE_TOL, "{name}: relative error {worst:e}");
}

#[test]
fn products_and_arithmetic() {
    let mut r = rng(1);
    let a = random_tensor(&mut r, 3, 4, -1.0, 1.0);
    let b = random_tensor(&mut r, 4, 2, -1.0, 1.0);
    let c = random_tensor(&mut r, 3, 4, -1.0, 1.0);
    let row = random_tensor(&mut r, 1, 4, -1.0, 1.0);
    let col = random_tensor(&mut r, 3, 1, -1.0, 1.0);
    assert_primitive("matmul", &[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]).unwrap());
    assert_primitive("matmul_nt", &[a.clone(), c.clone()], |t, v| t.matmul_nt(v[0], v[1]).unwrap());
    assert_primitive("add", &[a.clone(), c.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    assert_primitive("sub", &[a.clone(), c.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
    assert_primitive("mul", &[a.clone(), c.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    assert_primitive("add_row", &[a.clone(), row], |t, v| t.add_row(v[0], v[1]).unwrap());
    assert_primitive("scale", std::slice::from_ref(&a), |t, v| t.scale(v[0], -0.7));
    assert_primitive("mul_col", &[a, col], |t, v| t.mul_col(v[0], v[1]).unwrap());
}

#[test]
fn activations_and_normalization() {
    let mut r = rng(2);
    let x = random_tensor(&mut r, 3, 5, -2.0, 2.0);
    // keep ReLU inputs away from the kink
    let away = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    assert_primitive("relu", &[away], |t, v| t.relu(v[0]));
    assert_primitive("sigmoid", std::slice::from_ref(&x), |t, v| t.sigmoid(v[0]));
    assert_primitive("softmax", std::slice::from_ref(&x), |t, v| t.softmax_rows(v[0]));
    assert_primitive("causal_softmax", std::slice::from_ref(&x), |t, v| t.causal_softmax_rows(v[0], 2));
    assert_primitive("log_softmax", std::slice::from_ref(&x), |t, v| t.log_softmax_rows(v[0]));
    let gain = random_tensor(&mut r, 1, 5, 0.5, 1.5);
    let bias = random_tensor(&mut r, 1, 5, -0.5, 0.5);
    assert_primitive("layer_norm", &[x, gain, bias], |t, v| {
        t.layer_norm_rows(v[0], v[1], v[2], 1e-5).unwrap()
    });
}

#[test]
fn shape_ops_and_reductions() {
    let mut r = rng(3);
    let a = random_tensor(&mut r, 4, 3, -1.0, 1.0);
    let b = random_tensor(&mut r, 2, 3, -1.0, 1.0);
    let c = random_tensor(&mut r, 4, 2, -1.0, 1.0);
    assert_primitive("slice_rows", std::slice::from_ref(&a), |t, v| t.slice_rows(v[0], 1, 3).unwrap());
    assert_primitive("slice_cols", std::slice::from_ref(&a), |t, v| t.slice_cols(v[0], 1, 3).unwrap());
    assert_primitive("concat_rows", &[a.clone(), b], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap());
    assert_primitive("concat_cols", &[a.clone(), c], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap());
    assert_primitive("gather", std::slice::from_ref(&a), |t, v| t.gather_rows(v[0], vec![3, 0, 0, 2], 2).unwrap());
    assert_primitive("mean_rows", std::slice::from_ref(&a), |t, v| t.mean_rows(v[0]).unwrap());
    assert_primitive("max_rows", std::slice::from_ref(&a), |t, v| t.max_rows(v[0]).unwrap());
    assert_primitive("sum", std::slice::from_ref(&a), |t, v| t.sum(v[0]));
    assert_primitive("mean", &[a], |t, v| t.mean(v[0]).unwrap());
}

#[test]
fn map_and_loss_ops() {
    let mut r = rng(4);
    let a = random_tensor(&mut r, 3, 5, -1.0, 1.0);
    assert_primitive("relu_min_max", std::slice::from_ref(&a), |t, v| t.relu_min_max_rows(v[0]));
    let words = random_tensor(&mut r, 4, 3, -1.0, 1.0);
    let anchor = random_tensor(&mut r, 1, 3, -1.0, 1.0);
    assert_primitive("cosine", &[words, anchor], |t, v| t.cosine_rows(v[0], v[1]).unwrap());
    assert_primitive("nll", std::slice::from_ref(&a), |t, v| {
        let lp = t.log_softmax_rows(v[0]);
        t.nll(lp, vec![Some(1), None, Some(4)]).unwrap()
    });
    let p = random_tensor(&mut r, 1, 4, 0.1, 0.9);
    assert_primitive("bce", &[p], |t, v| t.bce(v[0], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    assert_primitive("mse", &[a], |t, v| t.mse(v[0], (0..15).map(|i| i as f64 / 15.0).collect()).unwrap());
}

#[test]
fn backward_is_linear() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, 3, 4, -1.0, 1.0);
    let grad_of = |which: u8| -> Tensor {
        let mut t = Tape::new();
        let v = t.leaf(x.clone().with_grad());
        let s = t.softmax_rows(v);
        let l1 = t.mse(s, vec![0.25; 12]).unwrap();
        let q = t.mul(v, v).unwrap();
        let l2 = t.sum(q);
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => t.add(l1, l2).unwrap(),
        };
        t.backward(loss).unwrap().wrt(v)
    };
    let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(3));
    for i in 0..12 {
        assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-12);
    }
}

fn check_model(variant: Variant) {
    let cfg = ModelConfig::micro();
    let (model, store) = ReportModel::build(&cfg, variant, 21).unwrap();
    let ex = micro_example(cfg.image_size, 4);
    let samples = model_gradcheck(&model, &store, &ex, &LossWeights::default(), 1, 9);
    assert!(samples.len() >= 20);
    let worst = samples.iter().max_by(|a, b| a.rel.total_cmp(&b.rel)).unwrap();
    assert!(worst.rel < 1e-4, "{variant}: {worst:?}");
}

#[test]
fn base_model_gradients() {
    check_model(Variant::Base);
}

#[test]
fn vdmae_model_gradients() {
    check_model(Variant::Vdmae);
}

#[test]
fn full_model_gradients() {
    check_model(Variant::Full);
}
