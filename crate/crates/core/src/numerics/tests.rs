use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn softmax_uniform_input() {
    let out = masked_softmax(&t(&[1, 3], &[2.5, 2.5, 2.5]), None).unwrap();
    for &w in out.weights.data() {
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_ln2_gap() {
    let out = masked_softmax(&t(&[1, 2], &[0.0, 2f64.ln()]), None).unwrap();
    assert!((out.weights.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((out.weights.data()[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_masked_entry_is_exactly_zero() {
    let mask = Mask::keys(1, &[true, true, false]);
    let out = masked_softmax(&t(&[1, 3], &[5.0, 1.0, 9.0]), Some(&mask)).unwrap();
    let w = out.weights.data();
    assert_eq!(w[2], 0.0);
    assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
    assert_eq!(out.degenerate_rows, 0);
}

#[test]
fn softmax_fully_masked_row_is_uniform_and_flagged() {
    let mask = Mask::keys(1, &[false, false, false, false]);
    let out = masked_softmax(&t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]), Some(&mask)).unwrap();
    assert!(out.weights.data().iter().all(|&w| w == 0.25));
    assert_eq!(out.degenerate_rows, 1);
}

#[test]
fn attention_single_key_returns_its_value() {
    let q = t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 0.0, -2.0]);
    let k = t(&[1, 3], &[1.0, 2.0, 3.0]);
    let v = t(&[1, 3], &[7.0, -8.0, 9.0]);
    let out = attention(&q, &k, &v, None).unwrap();
    for r in 0..2 {
        assert_eq!(out.row(r), v.row(0));
    }
}

#[test]
fn attention_identical_keys_average_values() {
    let q = t(&[1, 2], &[0.4, -0.7]);
    let k = t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]);
    let v = t(&[2, 2], &[2.0, 4.0, 6.0, 8.0]);
    let out = attention(&q, &k, &v, None).unwrap();
    assert!((out.data()[0] - 4.0).abs() < 1e-12);
    assert!((out.data()[1] - 6.0).abs() < 1e-12);
}

#[test]
fn attention_ignores_masked_values_bitwise() {
    let q = t(&[2, 2], &[0.1, 0.2, -0.3, 0.4]);
    let k = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let v1 = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let v2 = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, -1e6, 1e9]);
    let mask = Mask::keys(2, &[true, true, false]);
    let a = attention(&q, &k, &v1, Some(&mask)).unwrap();
    let b = attention(&q, &k, &v2, Some(&mask)).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn attention_rejects_mismatched_widths() {
    let q = Tensor::<f64>::zeros(&[2, 3]);
    let k = Tensor::<f64>::zeros(&[2, 2]);
    assert!(attention(&q, &k, &k, None).is_err());
}

#[test]
fn gru_zero_params_halves_state() {
    let x = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.5, 0.5]);
    let h = t(&[2, 3], &[0.2, 0.4, -0.6, 1.0, 2.0, 3.0]);
    let out = gru_cell(&x, &h, &GruParams::zeros(3)).unwrap();
    for (o, hv) in out.data().iter().zip(h.data()) {
        assert!((o - 0.5 * hv).abs() < 1e-15);
    }
}

#[test]
fn gru_saturated_update_gate_carries_state() {
    let x = t(&[1, 3], &[1.0, -2.0, 3.0]);
    let h = t(&[1, 3], &[0.2, 0.4, -0.6]);
    let mut p = GruParams::zeros(3);
    p.b_z = Tensor::full(&[3], -1e6);
    let out = gru_cell(&x, &h, &p).unwrap();
    assert_eq!(out.data(), h.data());
}

#[test]
fn gru_shape_errors() {
    let x = Tensor::<f64>::zeros(&[1, 3]);
    let h = Tensor::<f64>::zeros(&[2, 3]);
    assert!(gru_cell(&x, &h, &GruParams::zeros(3)).is_err());
    assert!(gru_cell(&x, &x, &GruParams::zeros(4)).is_err());
}

#[test]
fn cross_entropy_uniform_logits() {
    let logits = Tensor::<f64>::zeros(&[3, 8]);
    let ce = cross_entropy(&logits, &[0, 5, 7]).unwrap();
    assert!((ce - 3.0 * 8f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_certain_prediction() {
    let mut logits = Tensor::<f64>::zeros(&[1, 4]);
    logits.data_mut()[2] = 1e6;
    assert!(cross_entropy(&logits, &[2]).unwrap().abs() < 1e-12);
}

#[test]
fn cross_entropy_out_of_range_target() {
    let logits = Tensor::<f64>::zeros(&[1, 4]);
    assert_eq!(cross_entropy(&logits, &[4]), Err(NumericsError::Index { index: 4, bound: 4 }));
}

#[test]
fn grad_check_sum_of_squares() {
    let x = t(&[3], &[1.0, 2.0, 3.0]);
    let f = |g: &mut Graph<'_, f64>, v: &[Var]| {
        let sq = g.mul(v[0], v[0])?;
        g.sum(sq)
    };
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone()).unwrap();
    let out = f(&mut g, &[leaf]).unwrap();
    let grads = g.backward(out).unwrap();
    assert_eq!(grads.get(leaf).unwrap().data(), &[2.0, 4.0, 6.0]);
    let report = grad_check(f, &[x], &GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn non_finite_values_name_the_op() {
    let mut g = Graph::<f64>::new();
    let a = g.input(t(&[1], &[1e308])).unwrap();
    let err = g.scale(a, 10.0).unwrap_err();
    assert_eq!(err, NumericsError::NonFinite { op: "scale" });
}

#[test]
fn unused_leaf_gets_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(t(&[2], &[1.0, 2.0])).unwrap();
    let b = g.leaf(t(&[2], &[3.0, 4.0])).unwrap();
    let s = g.sum(a).unwrap();
    let _ = g.sum(b).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(b).is_none());
}
