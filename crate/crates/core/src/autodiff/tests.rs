use proptest::prelude::*;

use super::*;
use crate::gradcheck::{check, ProbePlan, REL_TOL};
use crate::rng::Prng;

fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn uniform_store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = Prng::new(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.insert(*name, Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)).unwrap();
    }
    s
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct amount to the scalar under test.
fn weighted_sum(t: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    let w = Tensor::rand_uniform(&shape, -1.0, 1.0, &mut Prng::new(seed));
    let w = t.constant(w);
    let p = t.mul(x, w)?;
    t.sum(p)
}

fn assert_fd<F>(store: &ParamStore<f64>, coords: usize, f: F)
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let report = check(store, &ProbePlan::new(coords, 99), f).unwrap();
    assert!(report.passed(REL_TOL), "failures: {:?}", report.failures(REL_TOL));
}

#[test]
fn matmul_identity_cases() {
    let mut t = Tape::<f32>::new();
    let i2 = t.constant(Tensor::eye(2));
    let out = t.matmul(i2, i2).unwrap();
    assert_eq!(t.value(out).data(), Tensor::<f32>::eye(2).data());

    let a = t.constant(t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = t.matmul(a, i2).unwrap();
    assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(t.matmul(a, b), Err(AsuError::Dimension(_))));
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let store = uniform_store(&[("a", &[3, 4]), ("b", &[4, 2])], 5);
    let mut t = Tape::<f64>::new();
    let a = t.param(&store, "a").unwrap();
    let b = t.param(&store, "b").unwrap();
    let c = t.matmul(a, b).unwrap();
    let loss = t.sum(c).unwrap();
    t.backward(loss).unwrap();
    let ga = t.grad(a).unwrap();
    let bd = store.tensor("b").unwrap().data();
    for i in 0..3 {
        for k in 0..4 {
            let expected: f64 = (0..2).map(|j| bd[k * 2 + j]).sum();
            assert!((ga.data()[i * 4 + k] - expected).abs() < 1e-12);
        }
    }
    assert_fd(&store, 20, |t, s| {
        let a = t.param(s, "a")?;
        let b = t.param(s, "b")?;
        let c = t.matmul(a, b)?;
        t.sum(c)
    });
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(t32(&[3], &[0.0, 0.0, 0.0]));
    let y = t.softmax(x, 0).unwrap();
    assert!(close(t.value(y).data(), &[1.0 / 3.0; 3], 1e-7));

    let x = t.constant(t32(&[2], &[1000.0, 1000.0]));
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);

    let x = t.constant(t32(&[3], &[1.0, 2.0, 3.0]));
    let y = t.softmax(x, 0).unwrap();
    assert!(close(t.value(y).data(), &[0.09003, 0.24473, 0.66524], 1e-5));
}

#[test]
fn softmax_along_first_axis() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_rows(&[vec![0.0, 5.0], vec![0.0, 5.0]]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    assert!(t.softmax(x, 2).is_err());
}

proptest! {
    #[test]
    fn softmax_lanes_sum_to_one(
        data in proptest::collection::vec(-50.0f32..50.0, 24),
        axis in 0usize..3,
        shift in -100.0f32..100.0,
    ) {
        let shape = [2usize, 3, 4];
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(&shape, data.clone()).unwrap());
        let y = t.softmax(x, axis).unwrap();
        let (outer, len, inner) = kernels::axis_layout(&shape, axis);
        let yd = t.value(y).data();
        for o in 0..outer {
            for i in 0..inner {
                let s: f32 = (0..len).map(|j| yd[o * len * inner + i + j * inner]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
        prop_assert!(yd.iter().all(|&p| p >= 0.0));
        let xs = t.constant(Tensor::new(&shape, data.iter().map(|v| v + shift).collect()).unwrap());
        let ys = t.softmax(xs, axis).unwrap();
        let diff = t.value(y).max_abs_diff(t.value(ys));
        prop_assert!(diff < 1e-5, "shift changed softmax by {}", diff);
    }
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::<f32>::new();
    let g = t.constant(Tensor::ones(&[4]));
    let b = t.constant(Tensor::zeros(&[4]));
    let x = t.constant(t32(&[1, 4], &[3.0; 4]));
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.0; 4]);

    let g2 = t.constant(Tensor::ones(&[2]));
    let b2 = t.constant(Tensor::zeros(&[2]));
    let x = t.constant(t32(&[1, 2], &[1.0, -1.0]));
    let y = t.layer_norm(x, g2, b2, 1e-12).unwrap();
    assert!(close(t.value(y).data(), &[1.0, -1.0], 1e-6));

    // Unit gain: each output row has mean equal to the (constant) bias and unit variance around it.
    let mut rng = Prng::new(4);
    let x = t.constant(Tensor::randn(&[5, 8], 3.0, &mut rng));
    let g8 = t.constant(Tensor::ones(&[8]));
    let b8 = t.constant(Tensor::full(&[8], 0.7));
    let y = t.layer_norm(x, g8, b8, 1e-5).unwrap();
    for r in 0..5 {
        let row = t.value(y).row(r);
        let mean: f32 = row.iter().sum::<f32>() / 8.0;
        let var: f32 = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 8.0;
        assert!((mean - 0.7).abs() < 1e-5 && (var - 1.0).abs() < 1e-4, "mean {mean} var {var}");
    }
}

#[test]
fn attention_single_key_returns_value_row() {
    let mut rng = Prng::new(8);
    let mut t = Tape::<f32>::new();
    let q = t.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
    let k = t.constant(Tensor::randn(&[1, 8], 1.0, &mut rng));
    let v = t.constant(Tensor::randn(&[1, 8], 1.0, &mut rng));
    let out = t.attention(q, k, v, 2, 1, None).unwrap();
    for r in 0..3 {
        assert_eq!(t.value(out).row(r), t.value(v).row(0));
    }
}

#[test]
fn attention_rows_are_convex_combinations() {
    let mut rng = Prng::new(9);
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::rand_uniform(&[3, 8], -1.0, 1.0, &mut rng));
    let out = t.attention(x, x, x, 1, 1, None).unwrap();
    let xv = t.value(x).clone();
    for r in 0..3 {
        for c in 0..8 {
            let col: Vec<f64> = (0..3).map(|j| xv.row(j)[c]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = t.value(out).row(r)[c];
            assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
    }
}

#[test]
fn masked_keys_get_exactly_zero_weight() {
    let mut rng = Prng::new(10);
    let mut t = Tape::<f32>::new();
    let q = t.constant(Tensor::randn(&[2, 4], 1.0, &mut rng));
    let k = t.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
    let mut vdata = vec![0.0f32; 12];
    vdata[8..].copy_from_slice(&[1e6; 4]); // a huge value behind the masked key
    let v = t.constant(t32(&[3, 4], &vdata));
    let mask = AttnMask::new(2, 3, vec![true, true, false, true, true, false]).unwrap();
    let out = t.attention(q, k, v, 1, 1, Some(&mask)).unwrap();
    assert!(t.value(out).data().iter().all(|&x| x == 0.0));
}

#[test]
fn fully_masked_row_is_a_contract_error() {
    let err = AttnMask::new(2, 2, vec![true, false, false, false]).unwrap_err();
    assert!(matches!(err, AsuError::Contract(_)));
}

#[test]
fn attention_width_must_divide_heads() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(&[2, 6]));
    assert!(matches!(t.attention(x, x, x, 4, 1, None), Err(AsuError::Dimension(_))));
}

fn naive_conv(x: &[f64], kernel: &[f64], t_len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t_len * d];
    for t in 0..t_len {
        for c in 0..d {
            let mut s = 0.0;
            for tap in 0..3 {
                let src = t as i64 + tap as i64 - 1;
                if (0..t_len as i64).contains(&src) {
                    s += kernel[c * 3 + tap] * x[src as usize * d + c];
                }
            }
            out[t * d + c] = s;
        }
    }
    out
}

#[test]
fn conv_identity_and_boundary() {
    let mut rng = Prng::new(12);
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::randn(&[5, 3], 1.0, &mut rng));
    let k = t.constant(t32(&[3, 3], &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]));
    let y = t.conv1d_depthwise(x, k, 5).unwrap();
    assert_eq!(t.value(y).data(), t.value(x).data());

    let x1 = t.constant(t32(&[1, 2], &[0.5, -2.0]));
    let k1 = t.constant(Tensor::ones(&[2, 3]));
    let y1 = t.conv1d_depthwise(x1, k1, 1).unwrap();
    assert_eq!(t.value(y1).data(), &[0.5, -2.0]);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = Prng::new(13);
    let x = Tensor::<f64>::randn(&[5, 2], 1.0, &mut rng);
    let k = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let kv = t.constant(k.clone());
    let y = t.conv1d_depthwise(xv, kv, 5).unwrap();
    assert_eq!(t.value(y).data(), naive_conv(x.data(), k.data(), 5, 2).as_slice());
}

#[test]
fn conv_sequences_do_not_leak_into_each_other() {
    let mut rng = Prng::new(14);
    let x = Tensor::<f64>::randn(&[8, 3], 1.0, &mut rng);
    let k = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let kv = t.constant(k.clone());
    let y = t.conv1d_depthwise(xv, kv, 4).unwrap();
    let first = naive_conv(&x.data()[..12], k.data(), 4, 3);
    let second = naive_conv(&x.data()[12..], k.data(), 4, 3);
    assert_eq!(&t.value(y).data()[..12], first.as_slice());
    assert_eq!(&t.value(y).data()[12..], second.as_slice());
}

#[test]
fn backward_simple_sums() {
    let store = uniform_store(&[("p", &[2, 3])], 1);
    let mut t = Tape::<f64>::new();
    let p = t.param(&store, "p").unwrap();
    let loss = t.sum(p).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(p).unwrap().data(), &[1.0; 6]);

    let mut t = Tape::<f64>::new();
    let p = t.param(&store, "p").unwrap();
    let sq = t.mul(p, p).unwrap();
    let loss = t.sum(sq).unwrap();
    t.backward(loss).unwrap();
    let expect: Vec<f64> = store.tensor("p").unwrap().data().iter().map(|x| 2.0 * x).collect();
    assert_eq!(t.grad(p).unwrap().data(), expect.as_slice());
}

#[test]
fn backward_requires_scalar() {
    let store = uniform_store(&[("p", &[2, 3])], 1);
    let mut t = Tape::<f64>::new();
    let p = t.param(&store, "p").unwrap();
    assert!(matches!(t.backward(p), Err(AsuError::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let store = uniform_store(&[("p", &[2, 2])], 1);
    let mut t = Tape::<f64>::new();
    let p = t.param(&store, "p").unwrap();
    let c = t.constant(Tensor::ones(&[2, 2]));
    let m = t.matmul(p, c).unwrap();
    let loss = t.sum(m).unwrap();
    t.backward(loss).unwrap();
    assert!(t.grad(c).is_none());
    assert!(t.grad(p).is_some());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(t32(&[2], &[1e30, 1e30]));
    assert!(matches!(t.mul(x, x), Err(AsuError::NonFinite("mul"))));
}

#[test]
fn finite_differences_elementwise_and_shape_ops() {
    let store = uniform_store(&[("a", &[4, 3]), ("b", &[4, 3]), ("r", &[1, 3]), ("tile", &[2, 3])], 21);
    assert_fd(&store, 30, |t, s| {
        let a = t.param(s, "a")?;
        let b = t.param(s, "b")?;
        let r = t.param(s, "r")?;
        let tile = t.param(s, "tile")?;
        let x = t.add(a, b)?;
        let x = t.mul(x, a)?;
        let x = t.sub(x, b)?;
        let x = t.scale(x, 0.7)?;
        let x = t.add_tiled(x, r)?;
        let x = t.add_tiled(x, tile)?;
        let x = t.gelu(x)?;
        let x = t.gather_rows(x, &[3, 0, 0, 2])?;
        let y = t.concat_rows(&[x, b])?;
        let y = t.transpose(y)?;
        let y = t.reshape(y, &[8, 3])?;
        let y = t.mean_rows_grouped(y, 2)?;
        weighted_sum(t, y, 3)
    });
}

#[test]
fn finite_differences_normalizations() {
    let store = uniform_store(&[("x", &[3, 6]), ("g", &[6]), ("b", &[6])], 22);
    assert_fd(&store, 30, |t, s| {
        let x = t.param(s, "x")?;
        let g = t.param(s, "g")?;
        let b = t.param(s, "b")?;
        let y = t.layer_norm(x, g, b, 1e-5)?;
        let n = t.l2_normalize_rows(x)?;
        let sm = t.softmax(x, 1)?;
        let sm0 = t.softmax(x, 0)?;
        let y = t.add(y, n)?;
        let y = t.add(y, sm)?;
        let y = t.add(y, sm0)?;
        weighted_sum(t, y, 4)
    });
}

#[test]
fn finite_differences_attention_and_conv() {
    let store = uniform_store(
        &[("q", &[4, 8]), ("k", &[6, 8]), ("v", &[6, 8]), ("x", &[6, 4]), ("kern", &[4, 3])],
        23,
    );
    let mask = AttnMask::new(2, 3, vec![true, false, true, false, true, true]).unwrap();
    assert_fd(&store, 40, |t, s| {
        let q = t.param(s, "q")?;
        let k = t.param(s, "k")?;
        let v = t.param(s, "v")?;
        let a = t.attention(q, k, v, 2, 2, Some(&mask))?;
        let la = weighted_sum(t, a, 5)?;
        let x = t.param(s, "x")?;
        let kern = t.param(s, "kern")?;
        let c = t.conv1d_depthwise(x, kern, 3)?;
        let lc = weighted_sum(t, c, 6)?;
        t.add(la, lc)
    });
}

#[test]
fn finite_differences_cross_entropy() {
    let store = uniform_store(&[("logits", &[4, 5])], 24);
    assert_fd(&store, 20, |t, s| {
        let l = t.param(s, "logits")?;
        let l = t.scale(l, 3.0)?;
        t.cross_entropy(l, &[0, 4, 2, 2])
    });
}

#[test]
fn cross_entropy_values() {
    let mut t = Tape::<f64>::new();
    let one = t.constant(Tensor::from_rows(&[vec![3.7]]).unwrap());
    let l = t.cross_entropy(one, &[0]).unwrap();
    assert_eq!(t.value(l).data()[0], 0.0);

    let two = t.constant(Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap());
    let l = t.cross_entropy(two, &[0]).unwrap();
    let expect = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
    assert!((t.value(l).data()[0] - expect).abs() < 1e-12);
}

#[test]
fn reruns_are_bit_identical() {
    let run = || {
        let mut rng = Prng::new(77);
        let mut t = Tape::<f32>::new();
        let q = t.constant(Tensor::randn(&[6, 8], 1.0, &mut rng));
        let k = t.constant(Tensor::randn(&[6, 8], 1.0, &mut rng));
        let a = t.attention(q, k, k, 2, 2, None).unwrap();
        let g = t.gelu(a).unwrap();
        t.value(g).clone()
    };
    assert_eq!(run().data(), run().data());
}
