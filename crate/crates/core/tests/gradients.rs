//! Backpropagated gradients of every tape primitive against central differences.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sevlm::tensor::gradcheck::{check_named, DEFAULT_EPS};
use sevlm::{Result, Tape, Tensor, Var};

const TOL: f64 = 1e-6;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape, |_| n.sample(&mut rng))
}

/// Checks `op` on `inputs`, reducing its output with fixed random weights.
fn check(inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let forward = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let out = op(tape, vars)?;
        let shape = tape.shape(out).to_vec();
        let w = tape.constant(randn(&shape, 99));
        let prod = tape.mul(out, w)?;
        Ok(tape.sum_all(prod))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = forward(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v).expect("leaf gradient")).collect();
    let mut named: Vec<(String, Tensor<f64>)> = inputs.into_iter().enumerate().map(|(i, t)| (format!("x{i}"), t)).collect();
    let report = check_named(&mut named, &analytic, DEFAULT_EPS, None, 0, |ins| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let loss = forward(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    })
    .unwrap();
    assert!(report.max_rel_err < TOL, "max rel err {:e} at {:?}", report.max_rel_err, report.worst);
    report.max_rel_err
}

#[test]
fn matmul_batched_and_broadcast() {
    check(vec![randn(&[2, 3, 4], 1), randn(&[2, 4, 5], 2)], |t, v| t.matmul(v[0], v[1]));
    check(vec![randn(&[2, 3, 4], 3), randn(&[4, 2], 4)], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn matmul_nt() {
    check(vec![randn(&[2, 3, 4], 5), randn(&[2, 6, 4], 6)], |t, v| t.matmul_nt(v[0], v[1]));
    check(vec![randn(&[3, 4], 7), randn(&[5, 4], 8)], |t, v| t.matmul_nt(v[0], v[1]));
}

#[test]
fn elementwise() {
    check(vec![randn(&[2, 3, 4], 9), randn(&[4], 10)], |t, v| t.add(v[0], v[1]));
    check(vec![randn(&[3, 4], 11), randn(&[3, 4], 12)], |t, v| t.sub(v[0], v[1]));
    check(vec![randn(&[3, 4], 13), randn(&[3, 4], 14)], |t, v| t.mul(v[0], v[1]));
    check(vec![randn(&[3, 4], 15)], |t, v| Ok(t.scale(v[0], -1.7)));
    check(vec![randn(&[3, 4], 16)], |t, v| Ok(t.gelu(v[0])));
}

#[test]
fn softmax_family() {
    check(vec![randn(&[2, 3, 5], 17)], |t, v| t.softmax_last(v[0], None));
    let allowed: Arc<[bool]> = (0..15).map(|i| i % 5 <= i / 5 + 1).collect();
    check(vec![randn(&[3, 5], 18)], move |t, v| t.softmax_last(v[0], Some(allowed.clone())));
    check(vec![randn(&[2, 3, 5], 19)], |t, v| t.log_softmax_last(v[0]));
}

#[test]
fn layer_norm() {
    check(vec![randn(&[2, 3, 6], 20), randn(&[6], 21), randn(&[6], 22)], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn gathers_and_layout() {
    check(vec![randn(&[7, 3], 23)], |t, v| t.embedding(v[0], &[1, 4, 4, 0, 6, 1], &[2, 3]));
    check(vec![randn(&[2, 3], 24), randn(&[2, 4], 25)], |t, v| t.concat_last(v[0], v[1]));
    check(vec![randn(&[2, 3], 26), randn(&[4, 3], 27)], |t, v| t.concat_rows(v[0], v[1]));
    check(vec![randn(&[4, 3], 28)], |t, v| t.index_rows(v[0], &[0, 3, 3, 1, 0]));
    check(vec![randn(&[2, 3, 2], 29), randn(&[2, 3, 2], 30)], |t, v| {
        t.where_rows(&[true, false, true, false, false, true], v[0], v[1])
    });
    check(vec![randn(&[2, 3, 4], 31)], |t, v| t.permute(v[0], &[1, 0, 2]));
    check(vec![randn(&[2, 3, 4], 32)], |t, v| t.permute(v[0], &[2, 0, 1]));
    check(vec![randn(&[2, 6], 33)], |t, v| t.reshape(v[0], &[3, 4]));
}

#[test]
fn reductions() {
    check(vec![randn(&[2, 3, 4], 34)], |t, v| t.mean_axis(v[0], 1));
    check(vec![randn(&[2, 3, 4], 35)], |t, v| t.mean_axis(v[0], 0));
    check(vec![randn(&[3, 4], 36)], |t, v| Ok(t.sum_all(v[0])));
    check(vec![randn(&[3, 4], 37)], |t, v| Ok(t.mean_all(v[0])));
}

#[test]
fn losses() {
    check(vec![randn(&[4, 6], 38)], |t, v| t.cross_entropy(v[0], &[1, 5, 0, 2], &[true, true, false, true]));
    check(vec![randn(&[2, 2, 5], 39)], |t, v| t.cross_entropy(v[0], &[4, 0, 3, 3], &[true, false, true, true]));
    let target = randn(&[4, 3], 40);
    check(vec![randn(&[4, 3], 41)], move |t, v| t.mse(v[0], target.clone(), &[true, false, true, true]));
    check(vec![randn(&[2, 5], 42)], |t, v| {
        t.dropout(v[0], &[true, false, true, true, false, true, true, true, false, true], 0.3)
    });
}

#[test]
fn composite_attention_block() {
    // softmax(q kᵀ / √d) v with a causal mask: the pattern every attention layer uses.
    let allowed: Arc<[bool]> = (0..9).map(|i| i % 3 <= i / 3).collect();
    check(vec![randn(&[3, 4], 43), randn(&[3, 4], 44), randn(&[3, 4], 45)], move |t, v| {
        let s = t.matmul_nt(v[0], v[1])?;
        let s = t.scale(s, 0.5);
        let p = t.softmax_last(s, Some(allowed.clone()))?;
        t.matmul(p, v[2])
    });
}

#[test]
fn input_used_twice_accumulates() {
    check(vec![randn(&[3, 3], 46)], |t, v| {
        let a = t.matmul(v[0], v[0])?;
        t.add(a, v[0])
    });
}
