mod common;

use curriculum_core::model::{LanguageModel, ModelConfig, TokenId};
use curriculum_core::tensor::{grad, hvp, GradientSet, ParamKind, ParameterSet, Tape, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gradients_match_central_differences() {
    common::gradient_suite().assert();
}

fn params_of(name: &str, shape: &[usize], data: Vec<f64>) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    p.insert(name, ParamKind::Dense, Tensor::new(shape.to_vec(), data).unwrap())
        .unwrap();
    p
}

#[test]
fn two_layer_mlp_with_coarse_step() {
    // Same check with the coarser finite-difference step of 1e-3.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = ParameterSet::new();
    for (name, shape) in [("x", [3, 4]), ("w1", [4, 6]), ("w2", [6, 2])] {
        let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.insert(name, ParamKind::Dense, Tensor::new(shape.to_vec(), data).unwrap())
            .unwrap();
    }
    let objective = |t: &mut Tape<f64>, v: &curriculum_core::tensor::ParamVars| {
        let h = t.matmul(v.get("x")?, v.get("w1")?)?;
        let h = t.gelu(h)?;
        let y = t.matmul(h, v.get("w2")?)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    };
    let (_, g) = grad(&objective, &p).unwrap();
    let step = 1e-3;
    for name in ["x", "w1", "w2"] {
        for i in 0..p.get(name).unwrap().len() {
            let eval = |delta: f64| {
                let mut q = p.clone();
                q.get_mut(name).unwrap().data_mut()[i] += delta;
                grad(&objective, &q).unwrap().0
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let a = g.get(name).unwrap().data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-3, "{name}[{i}]: analytic {a} numeric {numeric}");
        }
    }
}

/// `0.5 * theta^T A theta` for a row vector `theta`.
fn quadratic(
    a: Tensor<f64>,
) -> impl Fn(&mut Tape<f64>, &curriculum_core::tensor::ParamVars) -> curriculum_core::Result<curriculum_core::tensor::Var>
{
    move |t, v| {
        let theta = v.get("theta")?;
        let m = t.constant(a.clone())?;
        let at = t.matmul(theta, m)?;
        let y = t.mul(at, theta)?;
        let s = t.sum(y)?;
        t.scale(s, 0.5)
    }
}

fn direction(name: &str, shape: &[usize], data: Vec<f64>) -> GradientSet<f64> {
    let mut v = GradientSet::new();
    v.insert(name, Tensor::new(shape.to_vec(), data).unwrap());
    v
}

#[test]
fn hvp_of_diagonal_quadratic() {
    let a = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
    let p = params_of("theta", &[1, 2], vec![0.4, -1.2]);
    let hv = hvp(&quadratic(a), &p, &direction("theta", &[1, 2], vec![1.0, 0.0]), 1e-3).unwrap();
    let got = hv.get("theta").unwrap().data();
    assert!((got[0] - 3.0).abs() < 1e-4 && got[1].abs() < 1e-4, "{got:?}");
}

#[test]
fn hvp_of_random_symmetric_quadratic_matches_matrix_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 5;
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let sym = (&m + m.transpose()) * 0.5;
    let a = Tensor::new(vec![n, n], sym.transpose().as_slice().to_vec()).unwrap();
    let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = params_of("theta", &[1, n], theta);
    let hv = hvp(&quadratic(a), &p, &direction("theta", &[1, n], v.clone()), 1e-3).unwrap();
    let want = &sym * DVector::from_vec(v);
    let got = DVector::from_column_slice(hv.get("theta").unwrap().data());
    assert!((&got - &want).norm() / want.norm() < 1e-3, "{got} vs {want}");
}

#[test]
fn hvp_of_linear_loss_is_zero() {
    let c = Tensor::new(vec![3, 1], vec![0.5, -2.0, 1.5]).unwrap();
    let objective = move |t: &mut Tape<f64>, v: &curriculum_core::tensor::ParamVars| {
        let m = t.constant(c.clone())?;
        let y = t.matmul(v.get("theta")?, m)?;
        t.sum(y)
    };
    let p = params_of("theta", &[1, 3], vec![1.0, 2.0, 3.0]);
    let hv = hvp(&objective, &p, &direction("theta", &[1, 3], vec![0.3, 0.1, -0.7]), 1e-3).unwrap();
    assert!(hv.get("theta").unwrap().data().iter().all(|x| x.abs() < 1e-4));
}

fn small_model() -> LanguageModel {
    LanguageModel::init(
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            vocab_size: 64,
            context_len: 10,
        },
        4,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sequence_loss_is_nonnegative(tokens in prop::collection::vec(0u32..64, 2..=10)) {
        let model = small_model();
        let tokens: Vec<TokenId> = tokens;
        let loss = model.sequence_loss(&tokens).unwrap();
        prop_assert!(loss >= 0.0);
    }
}
