use super::*;
use crate::rng;
use rand::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Central finite differences against the tape gradient. `build` maps input
/// vars to an arbitrary-shaped output, which is contracted with fixed random
/// weights into a scalar.
fn check_grad(inputs: &[Tensor], build: impl Fn(&Tape, &[Var]) -> Result<Var>) -> f64 {
    let scalarize = |tape: &Tape, out: Var| -> Var {
        let shape = tape.shape(out);
        let w = tape.constant(random(&shape, 99));
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod)
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&tape, &vars).unwrap();
        let s = scalarize(&tape, out);
        tape.scalar(s).unwrap()
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = build(&tape, &vars).unwrap();
    let loss = scalarize(&tape, out);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[i]).map(|g| g.to_vec()).unwrap_or(vec![0.0; x.numel()]);
        let mut numeric = vec![0.0; x.numel()];
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let fp = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let fm = eval(&xs);
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-6));
    }
    worst
}

#[test]
fn matmul_identity_and_hand_case() {
    let tape = Tape::new();
    let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = tape.matmul(i2, i2).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0, 1.0]);

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 1]);
    assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_gradients() {
    let err = check_grad(&[random(&[5, 4], 1), random(&[4, 3], 2)], |t, v| t.matmul(v[0], v[1]));
    assert!(err <= 1e-4, "{err}");
    let err = check_grad(&[random(&[2, 3, 4], 3), random(&[2, 4, 2], 4)], |t, v| t.matmul(v[0], v[1]));
    assert!(err <= 1e-4, "{err}");
    let err = check_grad(&[random(&[2, 3, 4], 5), random(&[4, 2], 6)], |t, v| t.matmul(v[0], v[1]));
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.value(tape.softmax(x, 0).unwrap());
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[3], &[1000.0, 0.0, 0.0]));
    let y = tape.value(tape.softmax(x, 0).unwrap());
    assert!(y.is_finite());
    assert!((y.data()[0] - 1.0).abs() < 1e-12);
    assert!(y.data()[1] < 1e-300);
}

#[test]
fn softmax_rows_sum_to_one_and_gradient() {
    let tape = Tape::new();
    let x = tape.constant(random(&[3, 7], 11));
    for axis in [0, 1] {
        let y = tape.value(tape.softmax(x, axis).unwrap());
        let (rows, cols) = (3, 7);
        if axis == 1 {
            for r in 0..rows {
                let s: f64 = y.data()[r * cols..(r + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        } else {
            for c in 0..cols {
                let s: f64 = (0..rows).map(|r| y.data()[r * cols + c]).sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }
    for axis in [0, 1] {
        let err = check_grad(&[random(&[3, 7], 12)], |t, v| t.softmax(v[0], axis));
        assert!(err <= 1e-4, "{err}");
    }
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = tape.value(tape.layer_norm(x, g, b, 0.0).unwrap());
    assert_eq!(y.data(), &[-1.0, 1.0]);

    let g4 = tape.constant(Tensor::full(&[4], 1.0));
    let b4 = tape.constant(Tensor::zeros(&[4]));
    let c = tape.constant(Tensor::full(&[1, 4], 3.5));
    let y = tape.value(tape.layer_norm(c, g4, b4, 1e-5).unwrap());
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_gradient() {
    let err = check_grad(&[random(&[4, 8], 21), random(&[8], 22), random(&[8], 23)], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.input(t(&[3], &[0.5, -1.0, 2.0]));
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.of(x).unwrap(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.input(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.of(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_contract_errors() {
    let tape = Tape::new();
    let x = tape.input(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(crate::Error::Contract(_))));
    tape.reset_grad();
    assert!(tape.backward(loss).is_ok());
}

#[test]
fn shared_subexpressions_accumulate() {
    // f(x) = sum((x*x) + (x*x)*x) ; df/dx = 2x + 3x^2
    let tape = Tape::new();
    let x = tape.input(t(&[3], &[1.0, -2.0, 0.5]));
    let sq = tape.mul(x, x).unwrap();
    let cube = tape.mul(sq, x).unwrap();
    let s = tape.add(sq, cube).unwrap();
    let loss = tape.sum(s);
    let g = tape.backward(loss).unwrap();
    let want: Vec<f64> = [1.0f64, -2.0, 0.5].iter().map(|x| 2.0 * x + 3.0 * x * x).collect();
    for (a, b) in g.of(x).unwrap().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn elementwise_gradients() {
    let a = random(&[3, 4], 31);
    let b = random(&[3, 4], 32);
    let bias = random(&[4], 33);
    let cases: Vec<(&str, f64)> = vec![
        ("add", check_grad(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))),
        ("add_bcast", check_grad(&[a.clone(), bias.clone()], |t, v| t.add(v[0], v[1]))),
        ("sub", check_grad(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]))),
        ("mul", check_grad(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]))),
        ("scale", check_grad(&[a.clone()], |t, v| Ok(t.scale(v[0], -1.7)))),
        ("sigmoid", check_grad(&[a.clone()], |t, v| Ok(t.sigmoid(v[0])))),
        ("gelu", check_grad(&[a.clone()], |t, v| Ok(t.gelu(v[0])))),
        ("relu", check_grad(&[a.clone()], |t, v| Ok(t.relu(v[0])))),
        ("mean", check_grad(&[a.clone()], |t, v| Ok(t.mean(v[0])))),
        ("mse", check_grad(&[a.clone(), b.clone()], |t, v| t.mse(v[0], v[1]))),
    ];
    for (name, err) in cases {
        assert!(err <= 1e-4, "{name}: {err}");
    }
}

#[test]
fn structural_gradients() {
    let x = random(&[2, 3, 4], 41);
    let err = check_grad(&[x.clone()], |t, v| t.permute(v[0], &[2, 0, 1]));
    assert!(err <= 1e-4, "permute {err}");
    let err = check_grad(&[x.clone()], |t, v| t.reshape(v[0], &[6, 4]));
    assert!(err <= 1e-4, "reshape {err}");
    let err = check_grad(&[x.clone(), random(&[2, 2, 4], 42)], |t, v| t.concat(&[v[0], v[1]], 1));
    assert!(err <= 1e-4, "concat {err}");
    let err = check_grad(&[random(&[5, 3], 43)], |t, v| t.embedding(v[0], &[4, 0, 4, 2]));
    assert!(err <= 1e-4, "embedding {err}");
}

#[test]
fn loss_gradients() {
    let logits = random(&[4, 6], 51);
    for smoothing in [0.0, 0.1] {
        let err = check_grad(&[logits.clone()], |t, v| t.cross_entropy(v[0], &[0, 5, 2, 2], smoothing));
        assert!(err <= 1e-4, "ce {smoothing}: {err}");
    }
    let q: Vec<f64> = {
        let raw = random(&[4, 6], 52);
        let tape = Tape::new();
        let s = tape.softmax(tape.constant(raw), 1).unwrap();
        tape.value(s).into_data()
    };
    let err = check_grad(&[logits], |t, v| t.soft_cross_entropy(v[0], &q));
    assert!(err <= 1e-4, "soft ce: {err}");
}

#[test]
fn cross_entropy_matches_scalar_formula() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let l = tape.scalar(tape.cross_entropy(x, &[2], 0.0).unwrap()).unwrap();
    let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
    assert!((l - (lse - 3.0)).abs() < 1e-12);
    let l = tape.scalar(tape.cross_entropy(x, &[2], 0.3).unwrap()).unwrap();
    let want = 0.7 * (lse - 3.0) + 0.3 * (lse - 2.0);
    assert!((l - want).abs() < 1e-12);
    assert!(matches!(tape.cross_entropy(x, &[3], 0.0), Err(crate::Error::Range(_))));
}

#[test]
fn conv2d_gradient_and_shape() {
    for (stride, padding) in [(1, 1), (2, 1), (2, 0)] {
        let inputs = [random(&[2, 6, 5], 61), random(&[3, 2, 3, 3], 62), random(&[3], 63)];
        let tape = Tape::new();
        let v: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = tape.conv2d(v[0], v[1], v[2], stride, padding).unwrap();
        let shape = tape.shape(y);
        assert_eq!(shape[1], (6 + 2 * padding - 3) / stride + 1);
        assert_eq!(shape[2], (5 + 2 * padding - 3) / stride + 1);
        let err = check_grad(&inputs, |t, v| t.conv2d(v[0], v[1], v[2], stride, padding));
        assert!(err <= 1e-4, "conv s{stride} p{padding}: {err}");
    }
}

#[test]
fn conv2d_matches_direct_sum() {
    let x = random(&[2, 4, 4], 71);
    let w = random(&[1, 2, 3, 3], 72);
    let tape = Tape::new();
    let y = tape
        .conv2d(tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(Tensor::zeros(&[1])), 1, 1)
        .unwrap();
    let y = tape.value(y);
    for oy in 0..4 {
        for ox in 0..4 {
            let mut s = 0.0;
            for c in 0..2 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            s += x.data()[c * 16 + iy as usize * 4 + ix as usize] * w.data()[c * 9 + ky * 3 + kx];
                        }
                    }
                }
            }
            assert!((y.data()[oy * 4 + ox] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn dropout_train_mask_and_eval_identity() {
    let x = random(&[4, 5], 81);
    let err = check_grad(&[x.clone()], |t, v| t.dropout_seeded(v[0], 0.3, 7));
    assert!(err <= 1e-4, "{err}");

    let tape = Tape::new();
    let v = tape.constant(x.clone());
    assert_eq!(tape.dropout(v, 0.5).unwrap(), v);

    let store = ParamStore::new();
    let run = |seed| {
        let tape = Tape::training(&store, seed);
        let v = tape.constant(x.clone());
        tape.value(tape.dropout(v, 0.5).unwrap())
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", t(&[2], &[1.0, 2.0]));
    let b = store.add("b", t(&[2], &[3.0, 4.0]));
    store.set_trainable_prefix("b", false);
    let tape = Tape::with_params(&store);
    let prod = tape.mul(tape.param(a), tape.param(b)).unwrap();
    let g = tape.backward(tape.sum(prod)).unwrap();
    assert_eq!(g.param(a).unwrap(), &[3.0, 4.0]);
    assert!(g.param(b).is_none());
}
