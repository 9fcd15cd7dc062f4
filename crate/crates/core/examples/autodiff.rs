//! Reverse-mode gradients of a small two-layer network, checked against
//! central finite differences.

use iimt::{ParamStore, Tape, Tensor};

fn loss(t: &Tape, w1: iimt::Var, w2: iimt::Var, x: &Tensor, y: &Tensor) -> iimt::Result<iimt::Var> {
    let h = t.gelu(t.matmul(t.constant(x.clone()), w1)?);
    let out = t.matmul(h, w2)?;
    t.mse(out, t.constant(y.clone()))
}

fn main() -> iimt::Result<()> {
    let mut rng = iimt::rng::rng(1);
    let mut ps = ParamStore::new();
    let w1 = ps.normal("w1", &[3, 4], 0.5, &mut rng);
    let w2 = ps.normal("w2", &[4, 2], 0.5, &mut rng);
    let x = Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.37).sin());
    let y = Tensor::from_fn(&[5, 2], |i| (i as f64 * 0.11).cos());

    let t = Tape::with_params(&ps);
    let l = loss(&t, t.param(w1), t.param(w2), &x, &y)?;
    println!("loss {:.6}", t.scalar(l)?);
    let grads = t.backward(l)?;
    let analytic = grads.param(w1).expect("w1 is trainable").to_vec();

    let h = 1e-6;
    let mut worst = 0.0f64;
    for j in 0..analytic.len() {
        let eval = |delta: f64| -> iimt::Result<f64> {
            let mut p = ps.clone();
            p.value_mut(w1).data_mut()[j] += delta;
            let t = Tape::with_params(&p);
            let l = loss(&t, t.param(w1), t.param(w2), &x, &y)?;
            t.scalar(l)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max((numeric - analytic[j]).abs());
    }
    println!("dL/dw1 = {:?}", analytic.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>());
    println!("max |analytic - numeric| = {worst:.2e}");
    Ok(())
}
