//! Convolution kernels and operational layers against direct nested-loop oracles.

use opunet::conv::{conv2d, conv_transpose2d, conv_transpose2d_output_size};
use opunet::layers::{OperationalConv2D, TransposedOperationalConv2D};
use opunet::Tensor;
use rand::{RngExt, SeedableRng};
use rand_xoshiro::SplitMix64;

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Cross-correlation by definition.
fn conv2d_naive(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    s: usize,
    p: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (wd + 2 * p - k) / s + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv =
                                    x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * cin + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new([n, cout, ho, wo], out).unwrap()
}

/// Transposed convolution as a scatter of every input pixel through the kernel.
fn conv_transpose2d_naive(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    s: usize,
    p: usize,
    op: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let ho = (h - 1) * s + k + op - 2 * p;
    let wo = (wd - 1) * s + k + op - 2 * p;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.data()[((b * cin + ci) * h + iy) * wd + ix];
                    for co in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (iy * s + ky) as isize - p as isize;
                                let ox = (ix * s + kx) as isize - p as isize;
                                if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                    continue;
                                }
                                let wv = w.data()[((ci * cout + co) * k + ky) * k + kx];
                                out[((b * cout + co) * ho + oy as usize) * wo + ox as usize] +=
                                    xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bb) = bias {
        for (i, v) in out.iter_mut().enumerate() {
            *v += bb[(i / (ho * wo)) % cout];
        }
    }
    Tensor::new([n, cout, ho, wo], out).unwrap()
}

fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Bank slice `q` (0-based) of a `[Q, A, B, k, k]` tensor as `[A, B, k, k]`.
fn bank(w: &Tensor<f64>, q: usize) -> Tensor<f64> {
    w.slice_outer(q, 1)
        .unwrap()
        .reshape(&w.shape()[1..])
        .unwrap()
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = SplitMix64::seed_from_u64(1);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let y = conv2d(&x, &w, None, 2, 1).unwrap();
    assert_eq!(y.shape(), &[1, 3, 3, 3]);
    assert!(max_rel(&y, &conv2d_naive(&x, &w, None, 2, 1)) < 1e-6);

    for &(n, cin, cout, h, k, s, p) in &[
        (2, 3, 4, 7, 3, 1, 1),
        (1, 1, 2, 6, 6, 2, 2),
        (3, 2, 1, 9, 5, 2, 2),
        (1, 4, 3, 4, 1, 1, 0),
        (2, 2, 2, 8, 4, 3, 1),
    ] {
        let x = random(&[n, cin, h, h], &mut rng);
        let w = random(&[cout, cin, k, k], &mut rng);
        let b = random(&[cout], &mut rng);
        let y = conv2d(&x, &w, Some(&b), s, p).unwrap();
        assert!(max_rel(&y, &conv2d_naive(&x, &w, Some(b.data()), s, p)) < 1e-12);
    }
}

#[test]
fn conv_transpose2d_matches_scatter_oracle() {
    let mut rng = SplitMix64::seed_from_u64(2);
    for &(n, cin, cout, h, k, s, p, op) in &[
        (1, 2, 3, 4, 5, 2, 2, 1),
        (2, 3, 1, 3, 6, 2, 2, 0),
        (1, 1, 2, 5, 3, 1, 1, 0),
        (2, 2, 2, 3, 4, 3, 0, 2),
        (1, 3, 2, 2, 1, 2, 0, 1),
    ] {
        let x = random(&[n, cin, h, h], &mut rng);
        let w = random(&[cin, cout, k, k], &mut rng);
        let b = random(&[cout], &mut rng);
        let y = conv_transpose2d(&x, &w, Some(&b), s, p, op).unwrap();
        assert!(
            max_rel(
                &y,
                &conv_transpose2d_naive(&x, &w, Some(b.data()), s, p, op)
            ) < 1e-12
        );
    }
}

#[test]
fn transposed_convolution_is_the_adjoint() {
    let mut rng = SplitMix64::seed_from_u64(3);
    for &(h, k, s, p, op) in &[
        (4, 5, 2, 2, 1),
        (8, 6, 2, 2, 0),
        (5, 3, 1, 1, 0),
        (3, 4, 3, 1, 2),
    ] {
        let x = random(&[2, 3, h, h], &mut rng);
        let w = random(&[3, 2, k, k], &mut rng);
        let up = conv_transpose2d(&x, &w, None, s, p, op).unwrap();
        let g = random(up.shape(), &mut rng);
        let down = conv2d(&g, &w, None, s, p).unwrap();
        assert_eq!(down.shape(), x.shape());
        let lhs = up.dot(&g).unwrap();
        let rhs = down.dot(&x).unwrap();
        assert!(
            (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0),
            "{lhs} vs {rhs}"
        );
    }
}

#[test]
fn transposed_shape_formula_over_grid() {
    let mut checked = 0;
    for h in 1..=16 {
        for k in 1..=6 {
            for s in 1..=3 {
                for p in 0..=2 {
                    for op in 0..s {
                        let full = (h - 1) * s + k + op;
                        let x = Tensor::<f64>::full([1, 1, h, h], 1.0);
                        let w = Tensor::<f64>::full([1, 1, k, k], 1.0);
                        let result = conv_transpose2d(&x, &w, None, s, p, op);
                        if full <= 2 * p {
                            assert!(result.is_err());
                            continue;
                        }
                        let expected = full - 2 * p;
                        assert_eq!(
                            conv_transpose2d_output_size(h, k, s, p, op).unwrap(),
                            expected
                        );
                        assert_eq!(result.unwrap().shape(), &[1, 1, expected, expected]);
                        checked += 1;
                    }
                }
            }
        }
    }
    assert!(checked > 1500);
}

#[test]
fn identity_kernel_is_exact() {
    let mut rng = SplitMix64::seed_from_u64(4);
    let x = random(&[2, 3, 5, 4], &mut rng);
    let mut w = Tensor::<f64>::zeros([3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
}

#[test]
fn operational_layer_matches_power_sum_oracle() {
    let mut rng = SplitMix64::seed_from_u64(5);
    let mut layer = OperationalConv2D::<f64>::new(3, 4, 5, 3, 2, 2).unwrap();
    layer.init_params(9);
    layer.bias = random(&[4], &mut rng);
    let x = random(&[1, 3, 8, 8], &mut rng);
    let y = layer.infer(&x).unwrap();
    assert_eq!(y.shape(), &[1, 4, 4, 4]);

    let mut oracle = Tensor::<f64>::zeros([1, 4, 4, 4]);
    for q in 0..3 {
        let xq = x.map(|v| v.powi(q as i32 + 1));
        let b = if q == 0 {
            Some(layer.bias.data())
        } else {
            None
        };
        oracle
            .add_assign(&conv2d_naive(&xq, &bank(&layer.weights, q), b, 2, 2))
            .unwrap();
    }
    assert!(max_rel(&y, &oracle) < 1e-6);
}

#[test]
fn transposed_operational_layer_matches_power_sum_oracle() {
    let mut rng = SplitMix64::seed_from_u64(6);
    let mut layer = TransposedOperationalConv2D::<f64>::new(3, 2, 5, 2, 2, 2, 1).unwrap();
    layer.init_params(10);
    layer.bias = random(&[2], &mut rng);
    let x = random(&[2, 3, 4, 4], &mut rng);
    let y = layer.infer(&x).unwrap();
    assert_eq!(y.shape(), &[2, 2, 8, 8]);

    let mut oracle = Tensor::<f64>::zeros([2, 2, 8, 8]);
    for q in 0..2 {
        let xq = x.map(|v| v.powi(q as i32 + 1));
        let b = if q == 0 {
            Some(layer.bias.data())
        } else {
            None
        };
        oracle
            .add_assign(&conv_transpose2d_naive(
                &xq,
                &bank(&layer.weights, q),
                b,
                2,
                2,
                1,
            ))
            .unwrap();
    }
    assert!(max_rel(&y, &oracle) < 1e-6);
}

#[test]
fn transposed_layer_shapes_for_both_kernel_regimes() {
    let t5 = TransposedOperationalConv2D::<f32>::new(2, 2, 5, 3, 2, 2, 1).unwrap();
    assert_eq!(t5.output_size(8).unwrap(), 16);
    let t6 = TransposedOperationalConv2D::<f32>::new(2, 1, 6, 3, 2, 2, 0).unwrap();
    assert_eq!(t6.output_size(128).unwrap(), 256);
}

#[test]
fn q1_layers_reduce_to_plain_convolution() {
    let mut rng = SplitMix64::seed_from_u64(7);
    for case in 0..20 {
        let (cin, cout, k, s) = (1 + case % 3, 1 + case % 4, 1 + case % 5, 1 + case % 2);
        let p = (k - 1) / 2;
        let mut op = OperationalConv2D::<f64>::new(cin, cout, k, 1, s, p).unwrap();
        op.init_params(case as u64);
        op.bias = random(&[cout], &mut rng);
        let x = random(&[2, cin, 7, 7], &mut rng);
        let plain = conv2d(&x, &bank(&op.weights, 0), Some(&op.bias), s, p).unwrap();
        assert_eq!(op.infer(&x).unwrap(), plain);

        let opad = if s > 1 { 1 } else { 0 };
        let mut t = TransposedOperationalConv2D::<f64>::new(cin, cout, k, 1, s, p, opad).unwrap();
        t.init_params(case as u64 + 100);
        t.bias = random(&[cout], &mut rng);
        let plain = conv_transpose2d(&x, &bank(&t.weights, 0), Some(&t.bias), s, p, opad).unwrap();
        assert_eq!(t.infer(&x).unwrap(), plain);
    }
}

#[test]
fn additivity_in_q() {
    let mut rng = SplitMix64::seed_from_u64(8);
    let mut q3 = OperationalConv2D::<f64>::new(2, 3, 3, 3, 1, 1).unwrap();
    q3.init_params(11);
    q3.bias = random(&[3], &mut rng);
    let q2 = OperationalConv2D::from_params(
        q3.weights.slice_outer(0, 2).unwrap(),
        q3.bias.clone(),
        q3.stride,
        q3.padding,
    )
    .unwrap();
    let x = random(&[2, 2, 6, 6], &mut rng);
    let cubic = conv2d(&x.map(|v| v * v * v), &bank(&q3.weights, 2), None, 1, 1).unwrap();
    let mut expected = q2.infer(&x).unwrap();
    expected.add_assign(&cubic).unwrap();
    assert!(max_rel(&q3.infer(&x).unwrap(), &expected) < 1e-6);
}

#[test]
fn init_q1_bank_has_zero_mean() {
    // 20×25×25 = 12500 draws, U(−b, b): standard error b/√3/√n.
    let mut layer = OperationalConv2D::<f64>::new(25, 20, 5, 3, 1, 2).unwrap();
    layer.init_params(2024);
    let n = 20 * 25 * 25;
    let q1 = &layer.weights.data()[..n];
    let bound = (6.0 / (45.0 * 25.0f64)).sqrt();
    let mean = q1.iter().sum::<f64>() / n as f64;
    let se = bound / 3f64.sqrt() / (n as f64).sqrt();
    assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
    assert!(q1.iter().all(|w| w.abs() <= bound));
}
