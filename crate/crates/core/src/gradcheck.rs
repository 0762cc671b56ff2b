//! Central-difference gradient oracle, and checks of tape gradients
//! against it.

use rand::seq::index::sample;
use rand::Rng;

use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::Result;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Tensor<T> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        grad.data_mut()[i] = central_difference(&mut f, &mut probe, i, h);
    }
    grad
}

/// Single-coordinate central difference; `probe` is restored afterwards.
pub fn central_difference<T: Scalar>(f: &mut impl FnMut(&Tensor<T>) -> T, probe: &mut Tensor<T>, i: usize, h: T) -> T {
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + h;
    let up = f(probe);
    probe.data_mut()[i] = orig - h;
    let down = f(probe);
    probe.data_mut()[i] = orig;
    (up - down) / (h + h)
}

/// Symmetric relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error between tape gradients and central differences.
///
/// `build` maps leaf vars to an output; the checked loss is
/// `sum(output * weights)` with fixed random weights, so that
/// shift-invariant ops (softmax, normalization) still see a nonzero signal.
/// At most `max_elems` coordinates per input are probed.
pub fn grad_check(
    inputs: &[crate::Tensor],
    build: &dyn Fn(&mut crate::Tape, &[Var]) -> Result<Var>,
    h: f64,
    max_elems: usize,
    rng: &mut impl Rng,
) -> f64 {
    let out_shape = {
        let mut tape = crate::Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).expect("forward");
        tape.shape(out).to_vec()
    };
    let weights = crate::Tensor::uniform(&out_shape, -1.0, 1.0, rng);

    let loss_of = |ins: &[crate::Tensor]| -> f64 {
        let mut tape = crate::Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).expect("forward");
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.value(loss).item()
    };

    let mut tape = crate::Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| crate::Tensor::zeros(input.shape()));
        let picks: Vec<usize> = if input.len() <= max_elems {
            (0..input.len()).collect()
        } else {
            sample(rng, input.len(), max_elems).into_vec()
        };
        let mut probe = input.clone();
        for e in picks {
            let mut f = |t: &crate::Tensor| {
                let mut ins = inputs.to_vec();
                ins[i] = t.clone();
                loss_of(&ins)
            };
            let fd = central_difference(&mut f, &mut probe, e, h);
            let err = rel_err(analytic.data()[e], fd, 1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Worst relative error between the tape gradient of a scalar loss with
/// respect to store parameters and central differences, probing
/// `probes` random coordinates of every unfrozen parameter at steps `h`,
/// `h/10` and `h/100`, keeping the closest estimate. Returns the
/// error and the parameter where it occurred.
pub fn store_grad_check(
    store: &crate::ParamStore,
    loss: &dyn Fn(&mut crate::Tape, &crate::optim::Bindings) -> Result<Var>,
    h: f64,
    probes: usize,
    rng: &mut impl Rng,
) -> (f64, String) {
    let mut tape = crate::Tape::new();
    let b = store.bind(&mut tape);
    let l = loss(&mut tape, &b).expect("forward");
    assert_eq!(tape.shape(l).iter().product::<usize>(), 1, "loss must be scalar");
    tape.backward(l).unwrap();
    let grads = store.collect_grads(&tape, &b);

    let mut worst = (0.0f64, String::new());
    let mut probe_store = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        if store.is_frozen(&name) {
            continue;
        }
        let n = store.get(&name).unwrap().len();
        let analytic = grads
            .get(&name)
            .cloned()
            .unwrap_or_else(|| crate::Tensor::zeros(store.get(&name).unwrap().shape()));
        let picks: Vec<usize> = if n <= probes {
            (0..n).collect()
        } else {
            sample(rng, n, probes).into_vec()
        };
        for e in picks {
            let orig = store.get(&name).unwrap().data()[e];
            let mut eval_at = |v: f64| {
                probe_store.get_mut(&name).unwrap().data_mut()[e] = v;
                let mut tape = crate::Tape::new();
                let b = probe_store.bind(&mut tape);
                let l = loss(&mut tape, &b).expect("forward");
                tape.value(l).item()
            };
            // a step that straddles a ReLU kink is retried with a shorter one;
            // a wrong analytic gradient misses at every step size
            let mut err = f64::INFINITY;
            let mut fd = f64::NAN;
            for step in [h, h / 10.0, h / 100.0] {
                let d = (eval_at(orig + step) - eval_at(orig - step)) / (2.0 * step);
                let e2 = rel_err(analytic.data()[e], d, 1e-6);
                if e2 < err {
                    (err, fd) = (e2, d);
                }
                if err < 1e-5 {
                    break;
                }
            }
            probe_store.get_mut(&name).unwrap().data_mut()[e] = orig;
            if err > worst.0 {
                worst = (err, format!("{name}[{e}] analytic {} fd {fd}", analytic.data()[e]));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.3 - 1.0);
        let g = finite_diff_grad(|t: &Tensor<f64>| t.sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff_grad(|t: &Tensor<f64>| t.item() * t.item(), &x, 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-6);
    }
}
