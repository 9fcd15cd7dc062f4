//! Central finite-difference checks in double precision.

use iimt::rng;
use iimt::{GradBuffer, ParamStore, Result, Tape, Tensor, Var};
use rand::Rng;

pub const STEP: f64 = 1e-5;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Contracts any output with fixed random weights into a scalar, so every
/// output element influences the check.
pub fn contract(t: &Tape, out: Var) -> Var {
    let w = t.constant(random(&t.shape(out), 0xC0FFEE));
    let p = t.mul(out, w).unwrap();
    t.sum(p)
}

/// Floor on the gradient norm in [`rel_err`]. Some gradients are zero by
/// symmetry (a key bias shifts every attention score of a row equally) and
/// their finite differences are rounding noise of order 1e-10, so below the
/// floor the check is effectively absolute: 1e-4 relative means 1e-8.
pub const ZERO_FLOOR: f64 = 1e-4;

/// ‖a − n‖ / max(‖a‖, ‖n‖, [`ZERO_FLOOR`]).
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(ZERO_FLOOR)
}

/// Worst relative error over the input tensors of `build`.
pub fn check_inputs(inputs: &[Tensor], build: impl Fn(&Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&t, &vars).unwrap();
        let s = contract(&t, out);
        t.scalar(s).unwrap()
    };
    let t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
    let out = build(&t, &vars).unwrap();
    let loss = contract(&t, out);
    let grads = t.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[i]).map(|g| g.to_vec()).unwrap_or(vec![0.0; x.numel()]);
        let numeric: Vec<f64> = (0..x.numel())
            .map(|j| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += STEP;
                let fp = eval(&xs);
                xs[i].data_mut()[j] -= 2.0 * STEP;
                (fp - eval(&xs)) / (2.0 * STEP)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Per-parameter relative errors of a scalar loss over a parameter store.
/// At most `per_tensor` coordinates of each tensor are probed, chosen at
/// random; `None` probes them all. `tape` builds the tape for each
/// evaluation, so seeded dropout masks repeat.
pub fn check_params(
    store: &ParamStore,
    per_tensor: Option<usize>,
    tape: impl for<'a> Fn(&'a ParamStore) -> Tape<'a>,
    loss: impl for<'a> Fn(&Tape<'a>) -> Result<Var>,
) -> Vec<(String, f64)> {
    let t = tape(store);
    let l = loss(&t).unwrap();
    let mut analytic = GradBuffer::zeros_like(store);
    analytic.accumulate(&t.backward(l).unwrap(), 1.0);
    let value = |s: &ParamStore| {
        let t = tape(s);
        let l = loss(&t).unwrap();
        t.scalar(l).unwrap()
    };
    let mut probe = store.clone();
    let mut r = rng::rng(17);
    let mut out = Vec::new();
    for (i, p) in store.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let n = p.value.numel();
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < n => (0..k).map(|_| r.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let mut a = Vec::with_capacity(coords.len());
        let mut num = Vec::with_capacity(coords.len());
        for &j in &coords {
            let orig = probe.value(i).data()[j];
            probe.value_mut(i).data_mut()[j] = orig + STEP;
            let fp = value(&probe);
            probe.value_mut(i).data_mut()[j] = orig - STEP;
            let fm = value(&probe);
            probe.value_mut(i).data_mut()[j] = orig;
            num.push((fp - fm) / (2.0 * STEP));
            a.push(analytic.grads[i][j]);
        }
        out.push((p.name.clone(), rel_err(&a, &num)));
    }
    out
}

pub fn worst(errs: &[(String, f64)]) -> (String, f64) {
    errs.iter().cloned().fold((String::new(), 0.0), |w, e| if e.1 > w.1 { e } else { w })
}
