//! Finite-difference gradient checks.
//!
//! The oracle is central differencing of a scalar function of flat inputs —
//! it never touches the tape's backward rules. Every differentiable
//! operation and a full multi-layer pipeline are checked against it.

use dynfuse::nn::{Activation, Mlp, ParamStore};
use dynfuse::tensor::{Tape, Tensor, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Central-difference gradient of `f` at `x`.
fn numerical_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe);
        probe[i] = x[i] - STEP;
        let down = f(&probe);
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * STEP));
    }
    grad
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-8)
}

fn assert_grads_match(analytic: &[f64], numeric: &[f64], what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        assert!(
            rel_err(a, n) < TOL,
            "{what}[{i}]: analytic {a} vs numeric {n} (rel err {})",
            rel_err(a, n)
        );
    }
}

/// Check the tape gradient of `build` (a scalar-valued graph over one input
/// tensor of the given shape) against the finite-difference oracle.
fn check_unary(
    what: &str,
    shape: Vec<usize>,
    seed: u64,
    build: impl Fn(&mut Tape, Value) -> Value,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();

    let f = |xs: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let t = Tensor::new(shape.clone(), xs.to_vec()).unwrap();
        let v = tape.leaf(&t);
        let out = build(&mut tape, v);
        tape.data(out)[0]
    };

    let mut tape = Tape::new();
    let t = Tensor::new(shape.clone(), x.clone()).unwrap().with_grad();
    let v = tape.leaf(&t);
    let out = build(&mut tape, v);
    tape.backward(out).unwrap();
    let analytic = tape.grad(v).unwrap().to_vec();

    let numeric = numerical_grad(&f, &x);
    assert_grads_match(&analytic, &numeric, what);
}

#[test]
fn grad_elementwise_and_scalar_ops() {
    check_unary("add", vec![2, 3], 1, |tape, v| {
        let c = tape.constant(vec![2, 3], vec![0.5; 6]).unwrap();
        let s = tape.add(v, c).unwrap();
        let m = tape.mul(s, s).unwrap();
        tape.sum(m, None).unwrap()
    });
    check_unary("sub_mul", vec![4], 2, |tape, v| {
        let c = tape.constant(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let d = tape.sub(v, c).unwrap();
        let m = tape.mul(d, v).unwrap();
        tape.sum(m, None).unwrap()
    });
    check_unary("scalar_ops", vec![3], 3, |tape, v| {
        let a = tape.add_scalar(v, 0.7);
        let b = tape.mul_scalar(a, -1.3);
        let sq = tape.mul(b, b).unwrap();
        tape.sum(sq, None).unwrap()
    });
}

#[test]
fn grad_activations() {
    // Inputs away from the relu kink so the finite difference is valid.
    check_unary("relu", vec![5], 4, |tape, v| {
        let c = tape.constant(vec![5], vec![0.31; 5]).unwrap();
        let shifted = tape.add(v, c).unwrap();
        let r = tape.relu(shifted);
        let sq = tape.mul(r, r).unwrap();
        tape.sum(sq, None).unwrap()
    });
    check_unary("sigmoid", vec![6], 5, |tape, v| {
        let s = tape.sigmoid(v);
        let m = tape.mul(s, s).unwrap();
        tape.sum(m, None).unwrap()
    });
    check_unary("tanh", vec![6], 6, |tape, v| {
        let t = tape.tanh(v);
        let m = tape.mul(t, t).unwrap();
        tape.sum(m, None).unwrap()
    });
}

#[test]
fn grad_softmax_and_reductions() {
    check_unary("softmax_1d", vec![5], 7, |tape, v| {
        let s = tape.softmax(v, 0).unwrap();
        let w = tape
            .constant(vec![5], vec![0.9, -1.4, 2.0, 0.3, -0.6])
            .unwrap();
        let m = tape.mul(s, w).unwrap();
        tape.sum(m, None).unwrap()
    });
    check_unary("softmax_rows", vec![3, 4], 8, |tape, v| {
        let s = tape.softmax(v, 1).unwrap();
        let w = tape
            .constant(vec![3, 4], (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect())
            .unwrap();
        let m = tape.mul(s, w).unwrap();
        tape.sum(m, None).unwrap()
    });
    check_unary("mean_axis", vec![3, 4], 9, |tape, v| {
        let m = tape.mean(v, Some(1)).unwrap();
        let sq = tape.mul(m, m).unwrap();
        tape.sum(sq, None).unwrap()
    });
    check_unary("sum_axis0", vec![3, 4], 10, |tape, v| {
        let s = tape.sum(v, Some(0)).unwrap();
        let sq = tape.mul(s, s).unwrap();
        tape.mean(sq, None).unwrap()
    });
}

#[test]
fn grad_matmul_both_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let loss = |av: &[f64], bv: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let at = tape.constant(vec![2, 3], av.to_vec()).unwrap();
        let bt = tape.constant(vec![3, 4], bv.to_vec()).unwrap();
        let c = tape.matmul(at, bt).unwrap();
        let sq = tape.mul(c, c).unwrap();
        let l = tape.sum(sq, None).unwrap();
        tape.data(l)[0]
    };

    let mut tape = Tape::new();
    let at = Tensor::new(vec![2, 3], a.clone()).unwrap().with_grad();
    let bt = Tensor::new(vec![3, 4], b.clone()).unwrap().with_grad();
    let av = tape.leaf(&at);
    let bv = tape.leaf(&bt);
    let c = tape.matmul(av, bv).unwrap();
    let sq = tape.mul(c, c).unwrap();
    let l = tape.sum(sq, None).unwrap();
    tape.backward(l).unwrap();

    let na = numerical_grad(&|xs: &[f64]| loss(xs, &b), &a);
    let nb = numerical_grad(&|xs: &[f64]| loss(&a, xs), &b);
    assert_grads_match(tape.grad(av).unwrap(), &na, "matmul lhs");
    assert_grads_match(tape.grad(bv).unwrap(), &nb, "matmul rhs");
}

#[test]
fn grad_structural_ops() {
    check_unary("concat_slice", vec![2, 3], 12, |tape, v| {
        let other = tape.constant(vec![2, 2], vec![0.3; 4]).unwrap();
        let cat = tape.concat(&[v, other], 1).unwrap();
        let row = tape.slice_row(cat, 1).unwrap();
        let seg = tape.slice_1d(row, 0, 4).unwrap();
        let sq = tape.mul(seg, seg).unwrap();
        tape.sum(sq, None).unwrap()
    });
    check_unary("select_mul_scalarv", vec![4], 13, |tape, v| {
        let s = tape.select(v, 2).unwrap();
        let c = tape.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let scaled = tape.mul_scalarv(c, s).unwrap();
        let picked = tape.select(v, 0).unwrap();
        let both = tape.mul_scalarv(scaled, picked).unwrap();
        tape.sum(both, None).unwrap()
    });
    check_unary("gather_rows", vec![3, 2], 21, |tape, v| {
        // Duplicated row: its gradient must accumulate from both copies.
        let g = tape.gather_rows(v, &[2, 0, 2]).unwrap();
        let sq = tape.mul(g, g).unwrap();
        tape.sum(sq, None).unwrap()
    });
    check_unary("assemble_rows", vec![2, 3], 14, |tape, v| {
        let other = tape.constant(vec![1, 3], vec![0.2, -0.4, 0.8]).unwrap();
        let out = tape.assemble_rows(&[v, other], &[vec![0, 2], vec![1]]).unwrap();
        let sq = tape.mul(out, out).unwrap();
        tape.sum(sq, None).unwrap()
    });
    check_unary("stack_ops", vec![3], 15, |tape, v| {
        let r2 = tape.constant(vec![3], vec![0.5, 0.1, -0.2]).unwrap();
        let m = tape.stack_rows(&[v, r2]).unwrap();
        let col = tape.stack_selects(&[(v, 0), (v, 2)]).unwrap();
        let scaled = tape.mul_col(m, col).unwrap();
        let sq = tape.mul(scaled, scaled).unwrap();
        tape.sum(sq, None).unwrap()
    });
    check_unary("row_broadcasts", vec![2, 3], 16, |tape, v| {
        let row = tape.constant(vec![3], vec![0.7, -1.1, 0.4]).unwrap();
        let a = tape.add_row_broadcast(v, row).unwrap();
        let b = tape.mul_row_broadcast(a, row).unwrap();
        let sq = tape.mul(b, b).unwrap();
        tape.sum(sq, None).unwrap()
    });
}

#[test]
fn grad_losses() {
    check_unary("cross_entropy", vec![4, 3], 17, |tape, v| {
        tape.cross_entropy(v, &[0, 2, 1, 2]).unwrap()
    });
    check_unary("bce", vec![5], 18, |tape, v| {
        tape.binary_cross_entropy(v, &[1.0, 0.0, 1.0, 1.0, 0.0]).unwrap()
    });
    check_unary("mse", vec![4], 19, |tape, v| {
        tape.mse_loss(v, &[0.3, -0.7, 1.2, 0.0]).unwrap()
    });
    check_unary("mae", vec![4], 20, |tape, v| {
        // Targets offset so no residual sits exactly at the |.| kink.
        tape.mae_loss(v, &[10.0, -10.0, 10.0, -10.0]).unwrap()
    });
}

#[test]
fn grad_straight_through_passes_soft_gradient_unchanged() {
    // d(readout ∘ straight_through ∘ softmax)/d logits must equal the pure
    // soft path bit for bit.
    let logits = vec![0.4, -1.2, 0.9];
    let readout = vec![2.0, -1.0, 0.5];

    let grad_of = |harden: bool| -> Vec<f64> {
        let mut tape = Tape::new();
        let t = Tensor::from_vec(logits.clone()).with_grad();
        let v = tape.leaf(&t);
        let soft = tape.softmax(v, 0).unwrap();
        let row = if harden {
            tape.straight_through(soft).unwrap()
        } else {
            soft
        };
        let c = tape.constant(vec![3], readout.clone()).unwrap();
        let m = tape.mul(row, c).unwrap();
        let y = tape.sum(m, None).unwrap();
        tape.backward(y).unwrap();
        tape.grad(v).unwrap().to_vec()
    };

    let hard = grad_of(true);
    let soft = grad_of(false);
    assert_eq!(hard, soft, "straight-through must not alter the gradient");

    // And the soft path itself agrees with the oracle.
    let f = |xs: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let t = Tensor::new(vec![3], xs.to_vec()).unwrap();
        let v = tape.leaf(&t);
        let s = tape.softmax(v, 0).unwrap();
        let c = tape.constant(vec![3], readout.clone()).unwrap();
        let m = tape.mul(s, c).unwrap();
        let y = tape.sum(m, None).unwrap();
        tape.data(y)[0]
    };
    let numeric = numerical_grad(&f, &logits);
    assert_grads_match(&soft, &numeric, "soft readout");
}

/// Whole-pipeline check: a 3-layer MLP with relu and cross-entropy, all
/// parameters and the input checked against the oracle, over many seeds.
#[test]
fn grad_full_mlp_pipeline_many_seeds() {
    let start = std::time::Instant::now();
    for seed in 0..10u64 {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "net", &[6, 8, 8, 3], Activation::Relu).unwrap();
        store.init(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let targets = vec![seed as usize % 3, (seed as usize + 1) % 3];

        let run = |store: &ParamStore, xs: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let xt = Tensor::new(vec![2, 6], xs.to_vec()).unwrap();
            let v = tape.leaf(&xt);
            let out = mlp.forward(store, &mut tape, v).unwrap();
            let loss = tape.cross_entropy(out, &targets).unwrap();
            tape.data(loss)[0]
        };

        // Analytic gradients for parameters and input in one pass.
        let mut tape = Tape::new();
        let xt = Tensor::new(vec![2, 6], x.clone()).unwrap().with_grad();
        let v = tape.leaf(&xt);
        let out = mlp.forward(&store, &mut tape, v).unwrap();
        let loss = tape.cross_entropy(out, &targets).unwrap();
        tape.backward(loss).unwrap();
        let mut grads = store.clone();
        grads.zero_grads();
        tape.accumulate_param_grads(grads.tensors_mut());

        // Oracle over every parameter of every layer.
        for id in mlp.param_ids() {
            let base = store.tensor(id).data.clone();
            let f = |ws: &[f64]| -> f64 {
                let mut probe = store.clone();
                probe.tensor_mut(id).data = ws.to_vec();
                run(&probe, &x)
            };
            let numeric = numerical_grad(&f, &base);
            let analytic = grads.tensor(id).grad.as_deref().unwrap();
            assert_grads_match(analytic, &numeric, &format!("seed {seed} param {id}"));
        }

        // Oracle over the input.
        let numeric = numerical_grad(&|xs: &[f64]| run(&store, xs), &x);
        assert_grads_match(tape.grad(v).unwrap(), &numeric, &format!("seed {seed} input"));
    }
    assert!(
        start.elapsed().as_secs() < 30,
        "gradient checks exceeded their time budget"
    );
}
