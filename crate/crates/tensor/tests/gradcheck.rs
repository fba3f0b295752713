//! Finite-difference verification of every backward rule.
//!
//! The oracle rebuilds the forward computation from scratch for each probe,
//! so it shares no code path with the tape's backward sweep.

use msas_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;
const SKIP_BELOW: f64 = 1e-8;

type Graph = dyn Fn(&mut Tape, &[Var]) -> Var;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(lo..hi))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn eval_scalar(build: &Graph, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let root = build(&mut tape, &vars);
    tape.value(root).item().expect("graph root must be scalar")
}

/// Central finite differences for every coordinate of every input.
fn finite_diff(build: &Graph, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut grads = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[which].shape().to_vec());
        for coord in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[coord] += STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[coord] -= STEP;
            grad.data_mut()[coord] =
                (eval_scalar(build, &plus) - eval_scalar(build, &minus)) / (2.0 * STEP);
        }
        grads.push(grad);
    }
    grads
}

/// Assert analytic gradients match finite differences for all inputs.
fn check(build: &Graph, inputs: &[Tensor]) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &vars);
    tape.backward(root).unwrap();
    let numeric = finite_diff(build, inputs);
    for (which, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).unwrap_or_else(|| {
            panic!("input {which} expected a gradient buffer");
        });
        for (coord, (&a, &n)) in analytic.data().iter().zip(numeric[which].data()).enumerate() {
            if a.abs() <= SKIP_BELOW && n.abs() <= 1e-6 {
                continue;
            }
            let rel = (a - n).abs() / a.abs().max(n.abs());
            assert!(
                rel < REL_TOL,
                "input {which} coord {coord}: analytic {a} vs numeric {n} (rel {rel:e})"
            );
        }
    }
}

#[test]
fn grad_add_scale_div() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        let a = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        check(
            &|t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let s = t.scale(s, 1.7).unwrap();
                let s = t.scalar_div(s, 3.0).unwrap();
                t.sum_all(s).unwrap()
            },
            &[a, b],
        );
    }
}

#[test]
fn grad_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..3 {
        let a = rand_tensor(&mut rng, &[3, 4], -1.5, 1.5);
        let b = rand_tensor(&mut rng, &[4, 2], -1.5, 1.5);
        let w = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        // weighted sum makes the upstream gradient non-uniform
        check(
            &move |t, v| {
                let prod = t.matmul(v[0], v[1]).unwrap();
                let weighted = t.rowdot(prod, v[2]).unwrap();
                t.sum_all(weighted).unwrap()
            },
            &[a, b, w],
        );
    }
}

#[test]
fn grad_linear_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..3 {
        let x = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[5], -0.5, 0.5);
        check(
            &|t, v| {
                let y = t.linear(v[0], v[1], v[2]).unwrap();
                t.sum_all(y).unwrap()
            },
            &[x, w, b],
        );
    }
}

#[test]
fn grad_relu_away_from_kink() {
    // spec case: d/dx sum(relu([-1, 2])) = [0, 1]
    let x = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
    check(
        &|t, v| {
            let y = t.relu(v[0]).unwrap();
            t.sum_all(y).unwrap()
        },
        &[x],
    );
}

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for &(stride, padding) in &[(1usize, 1usize), (2, 1), (1, 0)] {
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        check(
            &move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, padding).unwrap();
                t.sum_all(y).unwrap()
            },
            &[x, w, b],
        );
    }
}

#[test]
fn grad_batchnorm_training_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for &training in &[true, false] {
        let x = rand_tensor(&mut rng, &[3, 2, 3, 3], -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[2], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[2], -0.5, 0.5);
        // weight the outputs so per-channel gradients are not degenerate
        // (a plain sum is invariant to the batch statistics)
        let weights = rand_tensor(&mut rng, &[3, 18], -1.0, 1.0);
        check(
            &move |t, v| {
                let mut rm = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
                let mut rv = Tensor::new(vec![2], vec![0.8, 1.3]).unwrap();
                let y = t
                    .batchnorm2d(v[0], v[1], v[2], &mut rm, &mut rv, 1e-5, 0.1, training)
                    .unwrap();
                let flat = t.flatten(y).unwrap();
                let wc = t.constant(weights.clone());
                let s = t.rowdot(flat, wc).unwrap();
                t.sum_all(s).unwrap()
            },
            &[x, gamma, beta],
        );
    }
}

#[test]
fn grad_maxpool_and_avgpool() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_tensor(&mut rng, &[2, 2, 6, 6], -2.0, 2.0);
    check(
        &|t, v| {
            let y = t.maxpool2d(v[0], 3, 2, 1).unwrap();
            t.sum_all(y).unwrap()
        },
        &[x.clone()],
    );
    // each input cell of global average pooling receives 1/(H*W) upstream
    check(
        &|t, v| {
            let y = t.adaptive_avg_pool2d(v[0], 1).unwrap();
            let y = t.scale(y, 3.0).unwrap();
            t.sum_all(y).unwrap()
        },
        &[x],
    );
}

#[test]
fn grad_l2_normalize_including_clamped_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
    let w = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    check(
        &|t, v| {
            let y = t.l2_normalize(v[0], 1e-12).unwrap();
            let s = t.rowdot(y, v[1]).unwrap();
            t.sum_all(s).unwrap()
        },
        &[x, w.clone()],
    );
    // a row far below eps takes the linear x/eps branch
    let tiny = Tensor::new(vec![3, 4], vec![1e-9; 12]).unwrap();
    check(
        &|t, v| {
            let y = t.l2_normalize(v[0], 1e-3).unwrap();
            let s = t.rowdot(y, v[1]).unwrap();
            t.sum_all(s).unwrap()
        },
        &[tiny, w],
    );
}

#[test]
fn grad_concat_and_softmax_xent() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..3 {
        let a = rand_tensor(&mut rng, &[3, 2], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        check(
            &|t, v| {
                let cat = t.concat_cols(v[0], v[1]).unwrap();
                t.softmax_xent(cat, &[0, 3, 5]).unwrap()
            },
            &[a, b],
        );
    }
}

#[test]
fn grad_composite_conv_bn_relu_pool_linear_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_tensor(&mut rng, &[2, 1, 8, 8], -1.0, 1.0);
    let cw = rand_tensor(&mut rng, &[4, 1, 3, 3], -0.8, 0.8);
    let cb = rand_tensor(&mut rng, &[4], -0.3, 0.3);
    let gamma = rand_tensor(&mut rng, &[4], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[4], -0.3, 0.3);
    let lw = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let lb = rand_tensor(&mut rng, &[3], -0.3, 0.3);
    check(
        &|t, v| {
            let mut rm = Tensor::zeros(vec![4]);
            let mut rv = Tensor::full(vec![4], 1.0);
            let c = t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            let n = t.batchnorm2d(c, v[3], v[4], &mut rm, &mut rv, 1e-5, 0.1, true).unwrap();
            let r = t.relu(n).unwrap();
            let p = t.maxpool2d(r, 3, 2, 1).unwrap();
            let g = t.adaptive_avg_pool2d(p, 1).unwrap();
            let f = t.flatten(g).unwrap();
            let y = t.linear(f, v[5], v[6]).unwrap();
            t.softmax_xent(y, &[0, 2]).unwrap()
        },
        &[x, cw, cb, gamma, beta, lw, lb],
    );
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = rand_tensor(&mut rng, &[4, 2, 6, 6], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let wv = tape.leaf(w.clone(), true);
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        let r = tape.relu(y).unwrap();
        let s = tape.sum_all(r).unwrap();
        tape.backward(s).unwrap();
        (tape.grad(xv).unwrap().clone(), tape.grad(wv).unwrap().clone())
    };
    let (gx1, gw1) = run();
    let (gx2, gw2) = run();
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}

#[test]
fn constants_never_get_gradient_buffers() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), true);
    let frozen = tape.constant(Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap());
    let y = tape.rowdot(x, frozen).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(frozen).is_none());
    assert!(tape.grad(x).is_some());
}
