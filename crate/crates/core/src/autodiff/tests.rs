use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;

use super::check::{check, random_tensor};
use super::*;
use crate::error::Error;
use crate::rng::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 4], &[3.0; 4]));
    let y = g.layer_norm(x, None).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn identity_matmul() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = g.matmul(i, a).unwrap();
    assert_eq!(g.value(y).data(), g.value(a).data());
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("{other:?}"),
    }
    let c = g.constant(Tensor::zeros(&[3]));
    assert!(g.add(a, c).is_err());
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[3], &[1.0, -2.0, 5.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::scalar(2.0));
    let b = store.add("b", Tensor::scalar(5.0));
    let mut g = Graph::new();
    let va = g.param(&store, a);
    let _vb = g.param(&store, b);
    let y = g.mul(va, va).unwrap();
    g.backward(y).unwrap();
    store.accumulate_grads(&g);
    assert_eq!(store.grad(a), &[4.0]);
    assert_eq!(store.grad(b), &[0.0]);
}

#[test]
fn backward_twice_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(1.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(Error::BackwardTwice)));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
    let l = g.cross_entropy_logits(x, &[0], 0.0, 99).unwrap();
    assert!((g.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
    let l = g.cross_entropy_logits(x, &[1], 0.1, 99).unwrap();
    assert!((g.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
    assert!(matches!(g.cross_entropy_logits(x, &[0], 0.0, 0), Err(Error::Empty(_))));
    assert!(matches!(g.cross_entropy_logits(x, &[2], 0.0, 99), Err(Error::TokenOutOfRange { .. })));
}

#[test]
fn unsmoothed_cross_entropy_is_negative_log_softmax() {
    let logits = [0.3, -1.2, 2.0, 0.5, 0.5, -0.1];
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 3], &logits));
    let l = g.cross_entropy_logits(x, &[2, 0], 0.0, 99).unwrap();
    let ls = g.log_softmax(x, 1).unwrap();
    let expect = -(g.value(ls).data()[2] + g.value(ls).data()[3]) / 2.0;
    assert!((g.value(l).item() - expect).abs() < 1e-12);
    let p = g.softmax(x, 1).unwrap();
    let lp = g.cross_entropy_probs(p, &[2, 0], 0.0, 99).unwrap();
    assert!((g.value(lp).item() - expect).abs() < 1e-12);
}

#[test]
fn pad_rows_do_not_count() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 2], &[0.0, 0.0, 5.0, -5.0]));
    let l = g.cross_entropy_logits(x, &[1, 0], 0.0, 0).unwrap();
    assert!((g.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn log_softmax_exponentiates_to_one() {
    let mut r = rng(4);
    let x = random_tensor(&[3, 7], 20.0, &mut r);
    let mut g = Graph::<f64>::new();
    let v = g.constant(x);
    let y = g.log_softmax(v, 1).unwrap();
    for row in g.value(y).data().chunks(7) {
        let s: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn dropout_is_identity_at_inference_and_seeded_in_training() {
    let x = t(&[4, 8], &[1.0; 32]);
    let mut g = Graph::<f64>::new();
    let v = g.constant(x.clone());
    assert_eq!(g.dropout(v, 0.5).unwrap(), v);
    let run = || {
        let mut g = Graph::<f64>::training(rng(11));
        let v = g.constant(x.clone());
        let y = g.dropout(v, 0.5).unwrap();
        g.value(y).data().to_vec()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.iter().all(|v| *v == 0.0 || *v == 2.0));
    assert!(a.contains(&0.0) && a.contains(&2.0));
}

fn assert_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>) {
    let report = check(inputs, build).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn mlp_matches_finite_differences() {
    let mut r = rng(1);
    let inputs = vec![
        random_tensor(&[4, 5], 1.0, &mut r),
        random_tensor(&[5, 6], 0.5, &mut r),
        random_tensor(&[6], 0.1, &mut r),
        random_tensor(&[6, 3], 0.5, &mut r),
        random_tensor(&[3], 0.1, &mut r),
    ];
    assert_check(&inputs, |g, v| {
        let h = g.linear(v[0], v[1], Some(v[2]))?;
        let h = g.relu(h)?;
        let o = g.linear(h, v[3], Some(v[4]))?;
        g.cross_entropy_logits(o, &[0, 2, 1, 1], 0.1, 99)
    });
}

#[test]
fn elementwise_ops_gradcheck() {
    let mut r = rng(2);
    let a = random_tensor(&[3, 4], 1.0, &mut r);
    let b = random_tensor(&[3, 4], 1.0, &mut r);
    let row = random_tensor(&[4], 1.0, &mut r);
    let col = random_tensor(&[3], 1.0, &mut r);
    assert_check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    assert_check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    assert_check(&[a.clone(), row], |g, v| g.add_row(v[0], v[1]));
    assert_check(&[a.clone(), col], |g, v| g.mul_col(v[0], v[1]));
    assert_check(&[a.clone()], |g, v| g.affine(v[0], -1.5, 0.25));
    assert_check(&[a.clone()], |g, v| g.sigmoid(v[0]));
    assert_check(&[a.clone()], |g, v| g.mean(v[0]));
    assert_check(&[a.clone(), b.clone()], |g, v| {
        let bt = g.reshape(v[1], &[4, 3])?;
        g.matmul(v[0], bt)
    });
    assert_check(&[a], |g, v| {
        let r = g.reshape(v[0], &[2, 6])?;
        g.relu(r)
    });
}

#[test]
fn softmax_family_gradcheck() {
    let mut r = rng(3);
    let x = random_tensor(&[2, 3, 4], 2.0, &mut r);
    for axis in 0..3 {
        assert_check(&[x.clone()], |g, v| g.softmax(v[0], axis));
        assert_check(&[x.clone()], |g, v| g.log_softmax(v[0], axis));
    }
}

#[test]
fn layer_norm_gradcheck() {
    let mut r = rng(5);
    let x = random_tensor(&[3, 5], 2.0, &mut r);
    let gamma = random_tensor(&[5], 1.0, &mut r);
    let beta = random_tensor(&[5], 1.0, &mut r);
    assert_check(&[x.clone()], |g, v| g.layer_norm(v[0], None));
    assert_check(&[x, gamma, beta], |g, v| g.layer_norm(v[0], Some((v[1], v[2]))));
}

#[test]
fn structural_ops_gradcheck() {
    let mut r = rng(6);
    let a = random_tensor(&[2, 3, 2], 1.0, &mut r);
    let b = random_tensor(&[2, 1, 2], 1.0, &mut r);
    assert_check(&[a.clone(), b.clone()], |g, v| g.concat(&[v[0], v[1], v[0]], 1));
    assert_check(&[a.clone()], |g, v| g.slice(v[0], 1, 1, 2));
    assert_check(&[a.clone()], |g, v| g.slice(v[0], 2, 1, 1));
    let m = random_tensor(&[4, 3], 1.0, &mut r);
    assert_check(&[m.clone()], |g, v| g.gather_rows(v[0], &[Some(2), None, Some(0), Some(2)]));
    assert_check(&[m], |g, v| {
        let e = g.embedding(v[0], &[1, 3, 1])?;
        g.sigmoid(e)
    });
}

#[test]
fn cross_entropy_gradcheck() {
    let mut r = rng(7);
    let x = random_tensor(&[4, 6], 2.0, &mut r);
    assert_check(&[x.clone()], |g, v| g.cross_entropy_logits(v[0], &[1, 0, 5, 3], 0.1, 0));
    assert_check(&[x], |g, v| {
        let p = g.softmax(v[0], 1)?;
        g.cross_entropy_probs(p, &[1, 2, 5, 3], 0.1, 0)
    });
}

#[test]
fn attention_gradcheck() {
    let mut r = rng(8);
    let (batch, lq, lk, dim) = (2, 3, 4, 6);
    let q = random_tensor(&[batch * lq, dim], 1.0, &mut r);
    let k = random_tensor(&[batch * lk, dim], 1.0, &mut r);
    let v = random_tensor(&[batch * lk, dim], 1.0, &mut r);
    let valid = vec![true, true, false, true, true, true, true, false];
    let layout = AttnLayout::new(batch, lq, lk, 2, valid.clone());
    assert_check(&[q.clone(), k.clone(), v.clone()], |g, x| g.attention(x[0], x[1], x[2], &layout));
    let kq = random_tensor(&[batch * lk, dim], 1.0, &mut r);
    let causal = AttnLayout::new(batch, lk, lk, 3, vec![true; batch * lk]).causal();
    assert_check(&[kq.clone(), k.clone(), v.clone()], |g, x| g.attention(x[0], x[1], x[2], &causal));
    let single = AttnLayout::new(batch, lq, lk, 1, valid).scaled(1.0);
    assert_check(&[q, k, v], |g, x| {
        let p = g.attention_probs(x[0], x[1], &single)?;
        g.attend_values(p, x[2], &single)
    });
}

#[test]
fn masked_keys_receive_no_attention() {
    let mut r = rng(9);
    let q = random_tensor(&[2, 4], 1.0, &mut r);
    let k = random_tensor(&[3, 4], 1.0, &mut r);
    let layout = AttnLayout::new(1, 2, 3, 1, vec![true, false, true]);
    let mut g = Graph::<f64>::new();
    let (qv, kv) = (g.constant(q), g.constant(k));
    let p = g.attention_probs(qv, kv, &layout).unwrap();
    for row in g.value(p).data().chunks(3) {
        assert_eq!(row[1], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn copy_scatter_gradcheck_and_mass() {
    let mut r = rng(10);
    let logits = random_tensor(&[4, 5], 1.0, &mut r);
    let layout = CopyLayout {
        batch: 2,
        rows_per_batch: 2,
        mem_len: 5,
        tokens: vec![Some(1), Some(3), None, Some(1), Some(0), Some(2), None, None, Some(4), Some(4)],
        vocab: 6,
    };
    assert_check(&[logits.clone()], |g, v| {
        let a = g.softmax(v[0], 1)?;
        g.copy_scatter(a, &layout)
    });
    let mut g = Graph::<f64>::new();
    let x = g.constant(logits);
    let a = g.softmax(x, 1).unwrap();
    let c = g.copy_scatter(a, &layout).unwrap();
    for row in g.value(c).data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn f32_gradients_agree_with_f64() {
    let mut r = rng(12);
    let x = random_tensor(&[3, 4], 1.0, &mut r);
    let w = random_tensor(&[4, 5], 1.0, &mut r);
    let grads = |xs: &[Vec<f64>]| -> Vec<f64> {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::new(vec![3, 4], xs[0].iter().map(|v| *v as f32).collect()).unwrap());
        let b = g.input(Tensor::new(vec![4, 5], xs[1].iter().map(|v| *v as f32).collect()).unwrap());
        let h = g.matmul(a, b).unwrap();
        let l = g.cross_entropy_logits(h, &[1, 2, 3], 0.1, 0).unwrap();
        g.backward(l).unwrap();
        g.grad(b).unwrap().iter().map(|v| *v as f64).collect()
    };
    let g32 = grads(&[x.data().to_vec(), w.data().to_vec()]);
    let mut g = Graph::<f64>::new();
    let a = g.input(x);
    let b = g.input(w);
    let h = g.matmul(a, b).unwrap();
    let l = g.cross_entropy_logits(h, &[1, 2, 3], 0.1, 0).unwrap();
    g.backward(l).unwrap();
    for (u, v) in g32.iter().zip(g.grad(b).unwrap()) {
        assert!((u - v).abs() / v.abs().max(1e-3) < 1e-3);
    }
}

#[test]
fn repeated_param_lookup_shares_a_node() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::scalar(1.5));
    let mut g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a, b);
    let y = g.mul(a, b).unwrap();
    g.backward(y).unwrap();
    store.accumulate_grads(&g);
    assert_eq!(store.grad(id), &[3.0]);
}
