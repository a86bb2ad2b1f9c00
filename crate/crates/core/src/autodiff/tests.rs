use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::CatrError;
use crate::tensor::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Triple-loop product, independent of the GEMM kernel.
fn loop_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    c
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut tape = Tape::new();
    let x = t(&[2, 2], &[0.3, -1.0, 2.5, 4.0]);
    let i = tape.constant(&Tensor::identity(2));
    let xv = tape.constant(&x);
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(y), x.data());

    let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(&t(&[2, 1], &[1.0, 1.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[3.0, 7.0]);
    assert_eq!(tape.shape(c), &[2, 1]);
}

#[test]
fn matmul_matches_loop_oracle() {
    let a = rand_t(&[4, 7], 1);
    let b = rand_t(&[7, 3], 2);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(&a), tape.constant(&b));
    let c = tape.matmul(av, bv).unwrap();
    for (x, y) in tape.value(c).iter().zip(loop_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, CatrError::Dimension(_)));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = rand_t(&[3, 4], 3);
    let b = rand_t(&[4, 2], 4);
    let err = gradcheck_many(
        |tape, v| {
            let c = tape.matmul(v[0], v[1])?;
            Ok(tape.sum_all(c))
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn batched_and_transposed_matmul_gradients() {
    let a = rand_t(&[2, 3, 4], 5);
    let b = rand_t(&[2, 5, 4], 6);
    let w = rand_t(&[3, 5], 7);
    for (ta, tb) in [(false, true), (true, false), (true, true)] {
        let err = gradcheck_many(
            |tape, v| {
                let a = if ta { tape.permute(v[0], &[0, 2, 1])? } else { v[0] };
                let b = if tb { v[1] } else { tape.permute(v[1], &[0, 2, 1])? };
                let c = tape.matmul_t(a, b, ta, tb)?;
                let sq = tape.square(c);
                Ok(tape.sum_all(sq))
            },
            &[a.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "ta={ta} tb={tb}: {err}");
    }
    // rank-3 activations times a shared rank-2 weight
    let err = gradcheck_many(
        |tape, v| {
            let x = tape.permute(v[0], &[0, 2, 1])?;
            let y = tape.matmul(x, v[1])?;
            let sq = tape.square(y);
            Ok(tape.sum_all(sq))
        },
        &[a.clone(), w],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5]);

    let x = tape.constant(&t(&[2], &[1000.0, 1000.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5]);

    // oracle: direct exponentials
    let raw = [1.0f64, 2.0, 3.0];
    let z: f64 = raw.iter().map(|v| v.exp()).sum();
    let want: Vec<f64> = raw.iter().map(|v| v.exp() / z).collect();
    let x = tape.constant(&t(&[3], &raw));
    let y = tape.softmax(x, 0).unwrap();
    for (a, b) in tape.value(y).iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((tape.value(y)[0] - 0.0900).abs() < 5e-5);
    assert!((tape.value(y)[1] - 0.2447).abs() < 5e-5);
    assert!((tape.value(y)[2] - 0.6652).abs() < 5e-5);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2], &[f64::NAN, 0.0]));
    assert!(matches!(tape.softmax(x, 0), Err(CatrError::Numeric(_))));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(&Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s), &[0.5]);

    let row = [1.5, -2.0, 0.25];
    let rows = t(&[3, 3], &[row, row, row].concat());
    let x = tape.constant(&rows);
    let m = tape.mean_pool(x, 0).unwrap();
    assert_eq!(tape.value(m), &row);

    // 1x1 convolution with kernel 2 doubles every value
    let img = rand_t(&[1, 3, 3, 1], 9);
    let x = tape.constant(&img);
    let k = tape.constant(&t(&[1, 1, 1, 1], &[2.0]));
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    for (a, b) in tape.value(y).iter().zip(img.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn conv3x3_matches_loop_oracle() {
    let (b, h, w, cin, cout) = (2, 5, 4, 3, 2);
    let x = rand_t(&[b, h, w, cin], 10);
    let k = rand_t(&[3, 3, cin, cout], 11);
    for stride in [1, 2] {
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(&x), tape.constant(&k));
        let y = tape.conv2d(xv, kv, stride, 1).unwrap();
        let (ho, wo) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
        assert_eq!(tape.shape(y), &[b, ho, wo, cout]);
        let out = tape.tensor(y);
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.at(&[bi, iy as usize, ix as usize, ci]) * k.at(&[ky, kx, ci, co]);
                                }
                            }
                        }
                        assert!((out.at(&[bi, oy, ox, co]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn gradcheck_examples() {
    let x = rand_t(&[3, 4], 12);
    let err = gradcheck(|tape, v| {
        let sq = tape.square(v);
        Ok(tape.sum_all(sq))
    }, &x, 1e-5)
    .unwrap();
    assert!(err < 1e-8, "{err}");

    let err = gradcheck(|tape, v| {
        let s = tape.softmax(v, 1)?;
        Ok(tape.sum_all(s))
    }, &x, 1e-5)
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn corrupted_vjp_is_caught() {
    let x = rand_t(&[4], 13);
    let err = gradcheck(|tape, v| {
        let data: Vec<f64> = tape.value(v).iter().map(|a| a * a).collect();
        let y = tape.custom(&[v], &[4], data, Box::new(|g, ins, _| {
            // wrong on purpose: should be 2x
            vec![g.iter().zip(ins[0]).map(|(g, x)| g * 3.0 * x).collect()]
        }))?;
        Ok(tape.sum_all(y))
    }, &x, 1e-5)
    .unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn broadcasting_is_restricted() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3, 4]));
    let trailing = tape.constant(&Tensor::zeros(&[3, 4]));
    let scalar = tape.constant(&Tensor::scalar(1.0));
    let middle = tape.constant(&Tensor::zeros(&[2, 3]));
    assert!(tape.add(a, trailing).is_ok());
    assert!(tape.mul(scalar, a).is_ok());
    assert!(matches!(tape.add(a, middle), Err(CatrError::Dimension(_))));
}

#[test]
fn layer_norm_statistics() {
    let x = rand_t(&[5, 16], 14);
    let mut tape = Tape::new();
    let v = tape.constant(&x);
    for axis in [0, 1] {
        let y = tape.layer_norm(v, axis).unwrap();
        let out = tape.tensor(y);
        let (outer, len) = if axis == 1 { (5, 16) } else { (16, 5) };
        for o in 0..outer {
            let vals: Vec<f64> = (0..len)
                .map(|l| if axis == 1 { out.at(&[o, l]) } else { out.at(&[l, o]) })
                .collect();
            let mean = vals.iter().sum::<f64>() / len as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let x = rand_t(&[2, 3, 4, 3], 15);
        let k = rand_t(&[3, 3, 3, 2], 16);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.variable(&x), tape.variable(&k));
        let y = tape.conv2d(xv, kv, 1, 1).unwrap();
        let y = tape.layer_norm(y, 3).unwrap();
        let y = tape.softmax(y, 1).unwrap();
        let sq = tape.square(y);
        let s = tape.sum_all(sq);
        let g = tape.backward(s).unwrap();
        (tape.value(s).to_vec(), g.get(xv).unwrap().to_vec(), g.get(kv).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}

#[test]
fn backward_needs_scalar_root() {
    let mut tape = Tape::new();
    let v = tape.variable(&Tensor::zeros(&[2]));
    assert!(tape.backward(v).is_err());
}

/// A weighted sum keeps every coordinate of the op's output in play.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, CatrError> {
    let w = rand_t(tape.shape(y), seed);
    let wv = tape.constant(&w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum_all(p))
}

fn dims() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..4, 2..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_passes_gradcheck(shape in dims(), seed in 0u64..1000, axis_pick in 0usize..8) {
        let axis = axis_pick % shape.len();
        let x = rand_t(&shape, seed);
        let y_ = rand_t(&shape, seed + 1);
        let tail = rand_t(&shape[1..], seed + 2);
        let pos = Tensor::from_fn(&shape, |i| 0.5 + (i as f64 * 0.37).sin().abs());
        type Case<'a> = (&'a str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, CatrError>>);
        let perm: Vec<usize> = (0..shape.len()).rev().collect();
        let cases: Vec<Case> = vec![
            ("add", vec![x.clone(), y_.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
            ("sub_trailing", vec![x.clone(), tail.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
            ("mul_trailing", vec![tail.clone(), x.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
            ("scale_shift", vec![x.clone()], Box::new(|t, v| { let s = t.scale(v[0], -1.7); Ok(t.shift(s, 0.3)) })),
            ("sigmoid", vec![x.clone()], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
            ("relu", vec![x.clone()], Box::new(|t, v| Ok(t.relu(v[0])))),
            ("ln", vec![pos.clone()], Box::new(|t, v| Ok(t.ln(v[0])))),
            ("log_sigmoid", vec![x.clone()], Box::new(|t, v| Ok(t.log_sigmoid(v[0])))),
            ("exp", vec![x.clone()], Box::new(|t, v| Ok(t.exp(v[0])))),
            ("softmax", vec![x.clone()], Box::new(move |t, v| t.softmax(v[0], axis))),
            ("log_softmax", vec![x.clone()], Box::new(move |t, v| t.log_softmax(v[0], axis))),
            ("layer_norm", vec![x.clone()], Box::new(move |t, v| t.layer_norm(v[0], axis))),
            ("mean_pool", vec![x.clone()], Box::new(move |t, v| t.mean_pool(v[0], axis))),
            ("sum_axis", vec![x.clone()], Box::new(move |t, v| t.sum_axis(v[0], axis))),
            ("concat", vec![x.clone(), y_.clone()], Box::new(move |t, v| t.concat(&[v[0], v[1], v[0]], axis))),
            ("slice", vec![x.clone()], Box::new(move |t, v| { let n = t.shape(v[0])[axis]; t.slice(v[0], axis, n / 2, n - n / 2) })),
            ("permute", vec![x.clone()], Box::new(move |t, v| t.permute(v[0], &perm))),
            ("expand", vec![x.clone()], Box::new(move |t, v| t.expand(v[0], axis, 3))),
        ];
        for (name, inputs, f) in cases {
            let err = gradcheck_many(|t, v| { let y = f(t, v)?; weighted_sum(t, y, seed + 7) }, &inputs, 1e-5).unwrap();
            prop_assert!(err < 1e-4, "{} on {:?}: {}", name, shape, err);
        }
    }

    #[test]
    fn conv_pool_upsample_gradcheck(h in 1usize..4, w in 1usize..4, cin in 1usize..3, cout in 1usize..3, stride in 1usize..3, seed in 0u64..1000) {
        let x = rand_t(&[2, 2 * h, 2 * w, cin], seed);
        let k = rand_t(&[3, 3, cin, cout], seed + 1);
        let err = gradcheck_many(|t, v| {
            let y = t.conv2d(v[0], v[1], stride, 1)?;
            weighted_sum(t, y, seed + 2)
        }, &[x.clone(), k], 1e-5).unwrap();
        prop_assert!(err < 1e-4, "conv2d: {}", err);
        let err = gradcheck(|t, v| { let y = t.avg_pool(v, 2)?; weighted_sum(t, y, seed + 3) }, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "avg_pool: {}", err);
        let err = gradcheck(|t, v| { let y = t.upsample2x(v)?; weighted_sum(t, y, seed + 4) }, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "upsample2x: {}", err);
    }

    #[test]
    fn softmax_rows_are_distributions(shape in dims(), seed in 0u64..1000, scale in 0.1f64..50.0) {
        let x = rand_t(&shape, seed);
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let v = tape.scale(v, scale);
        let last = shape.len() - 1;
        tape.softmax(v, last).unwrap();
        for rec in tape.softmax_records() {
            prop_assert!(rec.data.iter().all(|&p| p >= 0.0));
            prop_assert!(rec.max_row_sum_error() < 1e-6);
        }
    }
}
