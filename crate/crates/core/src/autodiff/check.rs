//! Finite-difference gradient checks in `f64`.

use alloc::vec::Vec;

use rand::Rng as _;
use rand::SeedableRng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-4;

/// Worst mismatch found by [`check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of `build` with respect to every input against
/// central finite differences. Non-scalar outputs are reduced to
/// `sum(out * R)` with a fixed random `R`.
pub fn check<F>(inputs: &[Tensor<f64>], build: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = if g.value(out).len() == 1 {
            out
        } else {
            let mut rng = Rng::seed_from_u64(0x5eed);
            let r: Vec<f64> = (0..g.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let shape = g.shape(out).to_vec();
            let rv = g.constant(Tensor::new(shape, r)?);
            let prod = g.mul(out, rv)?;
            g.sum(prod)?
        };
        let value = g.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(v, t)| g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| alloc::vec![0.0; t.len()]))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut report = CheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let (plus, _) = eval(&xs, false)?;
            xs[i].data_mut()[j] = orig - STEP;
            let (minus, _) = eval(&xs, false)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[i][j];
            report.max_rel_error = report.max_rel_error.max(rel(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Random tensor with entries in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Like [`check`], but perturbs the entries of a parameter store. At most
/// `per_tensor` evenly spaced entries of each tensor are checked.
pub fn check_params<F>(store: &ParamStore<f64>, per_tensor: usize, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let loss_of = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    g.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate_grads(&g);
    let mut report = CheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut s = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = s.get(id).data()[j];
            s.get_mut(id).data_mut()[j] = orig + STEP;
            let plus = loss_of(&s)?;
            s.get_mut(id).data_mut()[j] = orig - STEP;
            let minus = loss_of(&s)?;
            s.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.grad(id)[j];
            report.max_rel_error = report.max_rel_error.max(rel(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
