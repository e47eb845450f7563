#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sintermon::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0f32..1.0) as f64))
}

/// Direct nested-loop 3×3 "same" convolution (cross-correlation), `[N,C,H,W]`.
pub fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f32> {
    let &[n, ci, h, w] = x.shape() else { panic!() };
    let co = k.shape()[0];
    let mut out = vec![0.0f32; n * co * h * w];
    for bn in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b.data()[o] as f64;
                    for c in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((bn * ci + c) * h + sy as usize) * w + sx as usize];
                                let kv = k.data()[((o * ci + c) * 3 + ky) * 3 + kx];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((bn * co + o) * h + y) * w + xx] = acc as f32;
                }
            }
        }
    }
    out
}

pub struct FdReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

/// Compares the analytic gradient of every listed parameter element against
/// central differences of `loss`. Elements whose analytic gradient is at most
/// `min_grad` in magnitude are skipped.
pub fn finite_difference_check<T: Real, F>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    elements: Option<&dyn Fn(ParamId, &[T]) -> Vec<usize>>,
    step: f64,
    rel_tol: f64,
    min_grad: f64,
    forward: F,
) -> FdReport
where
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Var,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store);
    tape.backward(loss, store).unwrap();
    let analytic: Vec<Vec<T>> = ids.iter().map(|&id| store.get(id).grad.clone()).collect();
    store.zero_grad();

    let eval = |store: &ParamStore<T>| -> f64 {
        let mut t = Tape::new();
        let l = forward(&mut t, store);
        t.value(l).data()[0].as_f64()
    };

    let mut report = FdReport {
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    for (pi, &id) in ids.iter().enumerate() {
        let idxs: Vec<usize> = match elements {
            Some(pick) => pick(id, &analytic[pi]),
            None => (0..analytic[pi].len()).collect(),
        };
        for i in idxs {
            let g = analytic[pi][i].as_f64();
            if g.abs() <= min_grad {
                continue;
            }
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + T::from_f64(step);
            let up = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - T::from_f64(step);
            let down = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = (numeric - g).abs() / g.abs().max(numeric.abs());
            report.checked += 1;
            report.worst_rel = report.worst_rel.max(rel);
            if rel >= rel_tol {
                report.failures.push(format!(
                    "{}[{i}]: analytic {g:e}, numeric {numeric:e}, rel {rel:.3e}",
                    store.get(id).name
                ));
            }
        }
    }
    report
}
