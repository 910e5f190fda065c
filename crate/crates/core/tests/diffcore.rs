use ecl_core::diff::{check_gradient, Tape, Var};
use ecl_core::{Result, Tensor};
use proptest::prelude::*;

const EPS: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-7;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
}

/// Entries bounded away from zero so the probe never crosses a ReLU kink.
fn off_kink(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec((0.01f64..1.0, any::<bool>()), rows * cols).prop_map(move |d| {
        let d = d
            .into_iter()
            .map(|(v, neg)| if neg { -v } else { v })
            .collect();
        Tensor::new(rows, cols, d).unwrap()
    })
}

/// Contracts a node with fixed weights so every output entry reaches the root.
fn contract<'t>(t: &'t Tape, v: Var<'t>) -> Result<Var<'t>> {
    let (r, c) = v.shape();
    let w: Vec<f64> = (0..r * c)
        .map(|k| 0.3 + 0.7 * ((k * 7 + 3) % 11) as f64 / 11.0)
        .collect();
    Ok(v.mul(t.constant(Tensor::new(r, c, w)?))?.sum())
}

fn max_err<F>(f: F, params: &[Tensor]) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_gradient(f, params, EPS).unwrap().max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn add_sub_mul_scale(a in tensor(3, 4), b in tensor(3, 4), s in -2.0f64..2.0) {
        let e = max_err(|t, v| contract(t, v[0].add(v[1])?), &[a.clone(), b.clone()]);
        prop_assert!(e <= PRIMITIVE_TOL, "add {e}");
        let e = max_err(|t, v| contract(t, v[0].sub(v[1])?), &[a.clone(), b.clone()]);
        prop_assert!(e <= PRIMITIVE_TOL, "sub {e}");
        let e = max_err(|t, v| contract(t, v[0].mul(v[1])?), &[a.clone(), b.clone()]);
        prop_assert!(e <= PRIMITIVE_TOL, "mul {e}");
        let e = max_err(move |t, v| contract(t, v[0].scale(s)), &[a]);
        prop_assert!(e <= PRIMITIVE_TOL, "scale {e}");
    }

    #[test]
    fn matmul_and_transpose(a in tensor(3, 4), b in tensor(4, 2)) {
        let e = max_err(|t, v| contract(t, v[0].matmul(v[1])?), &[a.clone(), b]);
        prop_assert!(e <= PRIMITIVE_TOL, "matmul {e}");
        let e = max_err(|t, v| contract(t, v[0].transpose()), &[a]);
        prop_assert!(e <= PRIMITIVE_TOL, "transpose {e}");
    }

    #[test]
    fn exp_log_relu(a in tensor(2, 5), k in off_kink(2, 5)) {
        let e = max_err(|t, v| contract(t, v[0].exp()), std::slice::from_ref(&a));
        prop_assert!(e <= PRIMITIVE_TOL, "exp {e}");
        let pos = a.map(|x| x + 1.5);
        let e = max_err(|t, v| contract(t, v[0].log()?), &[pos]);
        prop_assert!(e <= PRIMITIVE_TOL, "log {e}");
        let e = max_err(|t, v| contract(t, v[0].relu()), &[k]);
        prop_assert!(e <= PRIMITIVE_TOL, "relu {e}");
    }

    #[test]
    fn normalization_and_norms(k in off_kink(3, 4)) {
        let e = max_err(|t, v| contract(t, v[0].normalize_rows()?), std::slice::from_ref(&k));
        prop_assert!(e <= PRIMITIVE_TOL, "normalize rows {e}");
        let e = max_err(|t, v| contract(t, v[0].normalize_cols()?), std::slice::from_ref(&k));
        prop_assert!(e <= PRIMITIVE_TOL, "normalize cols {e}");
        let e = max_err(|_, v| Ok(v[0].frobenius_norm()), &[k]);
        prop_assert!(e <= PRIMITIVE_TOL, "frobenius {e}");
    }

    #[test]
    fn reductions(
        a in tensor(4, 3),
        b in tensor(2, 3),
        w in tensor(4, 3),
        i in 0usize..4,
        j in 0usize..2,
    ) {
        let e = max_err(|_, v| Ok(v[0].sum()), std::slice::from_ref(&a));
        prop_assert!(e <= PRIMITIVE_TOL, "sum {e}");
        let e = max_err(|_, v| Ok(v[0].mean()), std::slice::from_ref(&a));
        prop_assert!(e <= PRIMITIVE_TOL, "mean {e}");
        let e = max_err(|t, v| contract(t, v[0].row_sum()), std::slice::from_ref(&a));
        prop_assert!(e <= PRIMITIVE_TOL, "row sum {e}");
        let e = max_err(|t, v| contract(t, v[0].weighted_row_sum(w.clone())?), std::slice::from_ref(&a));
        prop_assert!(e <= PRIMITIVE_TOL, "weighted row sum {e}");
        let e = max_err(|t, v| contract(t, v[0].mean_rows(&[0, 2, 3])?), std::slice::from_ref(&a));
        prop_assert!(e <= PRIMITIVE_TOL, "mean rows {e}");
        let e = max_err(move |_, v| v[0].dot_rows(i, v[1], j), &[a.clone(), b.clone()]);
        prop_assert!(e <= PRIMITIVE_TOL, "dot rows {e}");
        let e = max_err(|t, v| contract(t, Var::stack_rows(&[v[0], v[1]])?), &[a, b]);
        prop_assert!(e <= PRIMITIVE_TOL, "stack rows {e}");
    }

    #[test]
    fn broadcast_and_softmax(a in tensor(3, 4), r in tensor(1, 4), s in 0.5f64..2.0) {
        let e = max_err(|t, v| contract(t, v[0].add_row(v[1])?), &[a.clone(), r]);
        prop_assert!(e <= PRIMITIVE_TOL, "add row {e}");
        let d = Tensor::scalar(s);
        let e = max_err(|t, v| contract(t, v[0].div_scalar(v[1])?), &[a.clone(), d]);
        prop_assert!(e <= PRIMITIVE_TOL, "div scalar {e}");
        let e = max_err(|t, v| contract(t, v[0].log_softmax_rows()), &[a]);
        prop_assert!(e <= PRIMITIVE_TOL, "log softmax {e}");
    }

    #[test]
    fn exp_log_round_trip(a in tensor(3, 3)) {
        let pos = a.map(|x| x + 1.5);
        let tape = Tape::new();
        let back = tape.leaf(pos.clone()).log().unwrap().exp().value();
        prop_assert!(back.max_abs_diff(&pos) <= 1e-12);
    }

    #[test]
    fn forward_and_backward_are_deterministic(a in tensor(3, 4), b in tensor(4, 3)) {
        let run = || {
            let tape = Tape::new();
            let (x, y) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
            let out = x.matmul(y).unwrap().exp().log_softmax_rows().sum();
            let g = out.backward().unwrap();
            (out.item().to_bits(), g.wrt(&x), g.wrt(&y))
        };
        let (v1, gx1, gy1) = run();
        let (v2, gx2, gy2) = run();
        prop_assert_eq!(v1, v2);
        prop_assert_eq!(gx1, gx2);
        prop_assert_eq!(gy1, gy2);
    }

    #[test]
    fn fan_out_order_does_not_change_gradient(a in tensor(3, 3)) {
        let grad = |flip: bool| {
            let tape = Tape::new();
            let x = tape.leaf(a.clone());
            let p = x.exp();
            let q = x.matmul(x.transpose()).unwrap();
            let (l, r) = if flip { (q.sum(), p.sum()) } else { (p.sum(), q.sum()) };
            let out = l.add(r).unwrap();
            out.backward().unwrap().wrt(&x)
        };
        prop_assert!(grad(false).max_abs_diff(&grad(true)) <= 1e-14);
    }
}

#[test]
fn identity_matmul_is_exact() {
    let a = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.5, 0.7]]).unwrap();
    let tape = Tape::new();
    let out = tape
        .constant(Tensor::identity(2))
        .matmul(tape.leaf(a.clone()))
        .unwrap();
    assert_eq!(out.value(), a);
}
