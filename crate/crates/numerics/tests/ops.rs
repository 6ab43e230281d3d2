use msclip_numerics::{finite_diff_grad, Conv2dSpec, NumericsError, RunningStats, Tape, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::<f64>::new();
    let i = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let j = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = tape.matmul(i, j).unwrap();
    assert_eq!(tape.value(y), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn matmul_hand_arithmetic() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.leaf(t(&[2, 1], &[1.0, 1.0]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(y), &[2, 1]);
    assert_eq!(tape.value(y), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::zeros([2, 3]));
    let b = tape.leaf(Tensor::zeros([2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, NumericsError::Dimension { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transposed() {
    let a0 = t(&[2, 3], &[0.3, -1.0, 2.0, 0.5, 0.1, -0.7]);
    let b0 = t(&[3, 2], &[1.0, 2.0, -0.5, 0.25, 3.0, -1.5]);
    let mut tape = Tape::new();
    let a = tape.leaf(a0.clone().with_requires_grad(true));
    let b = tape.leaf(b0.clone());
    let y = tape.matmul(a, b).unwrap();
    let s = tape.sum(y).unwrap();
    let grads = tape.backward(s).unwrap();
    // ones(2x2) · Bᵀ: each row is the row sums of B
    let expected = [3.0, -0.25, 1.5, 3.0, -0.25, 1.5];
    assert!(close(grads.get(a).unwrap(), &expected, 1e-12));
    let numeric = finite_diff_grad(
        |x| {
            let mut tape = Tape::inference();
            let a = tape.constant(x.clone());
            let b = tape.constant(b0.clone());
            let y = tape.matmul(a, b).unwrap();
            let s = tape.sum(y).unwrap();
            tape.item(s).unwrap()
        },
        &a0,
        1e-6,
    );
    assert!(close(numeric.data(), &expected, 1e-8));
}

/// Direct nested-loop convolution, independent of im2col.
fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, groups: usize) -> Tensor<f64> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let og = o / groups;
    let mut out = vec![0.0; b * o * ho * wo];
    for bi in 0..b {
        for oi in 0..o {
            let g = oi / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..cg {
                        let cin = g * cg + ci;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.data()[((bi * c + cin) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oi * cg + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((bi * o + oi) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    Tensor::new(vec![b, o, ho, wo], out).unwrap()
}

#[test]
fn conv_all_ones_kernel_sums_neighbourhoods() {
    let x = Tensor::<f64>::from_fn([1, 1, 4, 4], |i| i as f64);
    let w = Tensor::<f64>::ones([1, 1, 3, 3]);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
    let y = tape.conv2d(xv, wv, None, Conv2dSpec::new(1, 1)).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    // top-left: 0+1+4+5, centre (1,1): 0+1+2+4+5+6+8+9+10
    assert_eq!(tape.value(y)[0], 10.0);
    assert_eq!(tape.value(y)[5], 45.0);
    assert_eq!(tape.value(y), conv_direct(&x, &w, 1, 1, 1).data());
}

#[test]
fn conv_output_extents() {
    let spec = Conv2dSpec::new(2, 1);
    assert_eq!(spec.out_extent(224, 3), Some(112));
    let dw = Conv2dSpec::new(16, 0).groups(4);
    assert_eq!(dw.out_extent(112, 16), Some(7));

    let mut tape = Tape::<f32>::inference();
    let x = tape.constant(Tensor::zeros([1, 4, 112, 112]));
    let w = tape.constant(Tensor::zeros([4, 1, 16, 16]));
    let y = tape.conv2d(x, w, None, dw).unwrap();
    assert_eq!(tape.shape(y), &[1, 4, 7, 7]);
}

#[test]
fn conv_stride_two_halves_224() {
    let mut tape = Tape::<f32>::inference();
    let x = tape.constant(Tensor::zeros([1, 3, 224, 224]));
    let w = tape.constant(Tensor::zeros([8, 3, 3, 3]));
    let y = tape.conv2d(x, w, None, Conv2dSpec::new(2, 1)).unwrap();
    assert_eq!(tape.shape(y), &[1, 8, 112, 112]);
}

#[test]
fn conv_rejects_indivisible_groups() {
    let mut tape = Tape::<f32>::inference();
    let x = tape.constant(Tensor::zeros([1, 6, 5, 5]));
    let w = tape.constant(Tensor::zeros([4, 2, 3, 3]));
    let err = tape.conv2d(x, w, None, Conv2dSpec::new(1, 1).groups(4)).unwrap_err();
    assert!(matches!(err, NumericsError::Config { .. }), "{err}");
}

#[test]
fn conv_rejects_kernel_larger_than_padded_input() {
    let mut tape = Tape::<f32>::inference();
    let x = tape.constant(Tensor::zeros([1, 1, 2, 2]));
    let w = tape.constant(Tensor::zeros([1, 1, 5, 5]));
    assert!(tape.conv2d(x, w, None, Conv2dSpec::new(1, 0)).is_err());
}

#[test]
fn conv_matches_direct_oracle_with_bias_and_groups() {
    let x = Tensor::<f64>::from_fn([2, 4, 6, 5], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);
    let w = Tensor::<f64>::from_fn([6, 2, 3, 2], |i| ((i * 13) % 7) as f64 / 3.0 - 1.0);
    let bias = t(&[6], &[0.1, -0.2, 0.3, 0.0, 1.0, -1.0]);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(bias.clone()));
    let y = tape.conv2d(xv, wv, Some(bv), Conv2dSpec::new(2, 1).groups(2)).unwrap();
    let mut expected = conv_direct(&x, &w, 2, 1, 2);
    let plane = expected.shape()[2] * expected.shape()[3];
    for (i, v) in expected.data_mut().iter_mut().enumerate() {
        *v += bias.data()[(i / plane) % 6];
    }
    assert!(close(tape.value(y), expected.data(), 1e-12));
}

#[test]
fn avg_pool_of_constant_is_constant() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::full([1, 2, 7, 7], 3.5));
    let y = tape.avg_pool2d(x, 3, Conv2dSpec::new(1, 1)).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 7, 7]);
    assert!(tape.value(y).iter().all(|&v| (v - 3.5).abs() < 1e-12));
    let z = tape.avg_pool2d(x, 7, Conv2dSpec::new(7, 0)).unwrap();
    assert_eq!(tape.shape(z), &[1, 2, 1, 1]);
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::full([2, 4], 7.0));
    let g = tape.constant(Tensor::ones([4]));
    let b = tape.constant(Tensor::zeros([4]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_two_values() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(t(&[1, 2], &[0.0, 2.0]));
    let g = tape.constant(Tensor::ones([2]));
    let b = tape.constant(Tensor::zeros([2]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    assert!(close(tape.value(y), &[-1.0, 1.0], 1e-9));
}

#[test]
fn layer_norm_dimension_error() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::zeros([2, 4]));
    let g = tape.constant(Tensor::ones([3]));
    let b = tape.constant(Tensor::zeros([3]));
    assert!(matches!(tape.layer_norm(x, g, b, 1e-5), Err(NumericsError::Dimension { .. })));
}

#[test]
fn batch_norm_training_constant_channel_is_zero() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::full([3, 2, 2, 2], 4.0));
    let g = tape.constant(Tensor::ones([2]));
    let b = tape.constant(Tensor::zeros([2]));
    let stats = RunningStats::empty(2);
    let (y, batch) = tape.batch_norm(x, g, b, &stats, true, 1e-5).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
    let batch = batch.unwrap();
    assert_eq!(batch.mean, vec![4.0, 4.0]);
}

#[test]
fn batch_norm_two_samples() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(t(&[2, 1], &[0.0, 2.0]));
    let g = tape.constant(Tensor::ones([1]));
    let b = tape.constant(Tensor::zeros([1]));
    let (y, _) = tape.batch_norm(x, g, b, &RunningStats::empty(1), true, 1e-12).unwrap();
    assert!(close(tape.value(y), &[-1.0, 1.0], 1e-9));
}

#[test]
fn batch_norm_eval_uses_stored_statistics() {
    let stats = RunningStats::from_parts(vec![1.0], vec![4.0]);
    let run = |data: &[f64]| {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(t(&[data.len(), 1], data));
        let g = tape.constant(Tensor::ones([1]));
        let b = tape.constant(Tensor::zeros([1]));
        let (y, batch) = tape.batch_norm(x, g, b, &stats, false, 0.0).unwrap();
        assert!(batch.is_none());
        tape.value(y).to_vec()
    };
    // (x - 1) / 2 regardless of what else is in the batch
    assert_eq!(run(&[3.0, 5.0])[0], 1.0);
    assert_eq!(run(&[3.0, -100.0, 7.0])[0], 1.0);
}

#[test]
fn batch_norm_eval_without_statistics_is_state_error() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::zeros([2, 3]));
    let g = tape.constant(Tensor::ones([3]));
    let b = tape.constant(Tensor::zeros([3]));
    let err = tape.batch_norm(x, g, b, &RunningStats::empty(3), false, 1e-5).unwrap_err();
    assert!(matches!(err, NumericsError::State(_)));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::inference();
    let a = tape.constant(t(&[3, 2], &[0.0, 0.0, 1000.0, 1000.0, 0.0, 3f64.ln()]));
    let y = tape.softmax_rows(a).unwrap();
    assert!(close(tape.value(y), &[0.5, 0.5, 0.5, 0.5, 0.25, 0.75], 1e-12));
}

#[test]
fn softmax_rejects_nan() {
    let mut tape = Tape::<f64>::inference();
    let a = tape.constant(t(&[2], &[0.0, f64::NAN]));
    assert!(matches!(tape.softmax_rows(a), Err(NumericsError::Numeric { .. })));
}

#[test]
fn causal_mask_first_row_one_hot() {
    let mut tape = Tape::<f64>::inference();
    let a = tape.constant(Tensor::from_fn([1, 3, 3], |i| i as f64 * 0.1));
    let m = tape.causal_mask(a).unwrap();
    let p = tape.softmax_rows(m).unwrap();
    let v = tape.value(p);
    assert_eq!(&v[..3], &[1.0, 0.0, 0.0]);
    assert_eq!(v[5], 0.0);
    assert!((v[3] + v[4] - 1.0).abs() < 1e-12);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]).with_requires_grad(true));
    let s = tape.sum(x).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(NumericsError::Contract(_))));
}

#[test]
fn backward_populates_every_reachable_leaf() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
    let b = tape.leaf(t(&[2], &[3.0, 4.0]).with_requires_grad(true));
    let unused = tape.leaf(t(&[2], &[3.0, 4.0]).with_requires_grad(true));
    let frozen = tape.leaf(t(&[2], &[1.0, 1.0]));
    let ab = tape.mul(a, b).unwrap();
    let y = tape.add(ab, frozen).unwrap();
    let s = tape.sum(y).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
    assert_eq!(grads.get(b).unwrap(), &[1.0, 2.0]);
    assert!(grads.get(unused).is_none());
    assert!(grads.get(frozen).is_none());
}

#[test]
fn keyed_leaf_accumulates_across_uses() {
    let w = t(&[2], &[0.5, -1.0]).with_requires_grad(true);
    let mut tape = Tape::new();
    let first = tape.keyed_leaf(7, &w);
    let second = tape.keyed_leaf(7, &w);
    assert_eq!(first, second);
    let y = tape.add(first, second).unwrap();
    let s = tape.sum(y).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.keyed(7).unwrap(), &[2.0, 2.0]);
    let mut target = w.clone();
    grads.write_into(first, &mut target).unwrap();
    assert_eq!(target.grad().unwrap(), &[2.0, 2.0]);
}

#[test]
fn finite_diff_examples() {
    let x = t(&[3], &[0.2, -4.0, 9.0]);
    let g = finite_diff_grad(|x| x.data().iter().sum(), &x, 1e-4);
    assert!(close(g.data(), &[1.0, 1.0, 1.0], 1e-10));
    let g = finite_diff_grad(|x| x.data().iter().map(|v| v * v).sum(), &t(&[1], &[3.0]), 1e-3);
    assert!((g.data()[0] - 6.0).abs() < 1e-6);
}

#[test]
fn l2_normalize_gives_unit_rows() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(t(&[2, 2], &[3.0, 4.0, 0.0, -2.0]));
    let y = tape.l2_normalize(x).unwrap();
    assert!(close(tape.value(y), &[0.6, 0.8, 0.0, -1.0], 1e-12));
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::zeros([4, 4]));
    let l = tape.cross_entropy(x, &[0, 1, 2, 3]).unwrap();
    assert!((tape.item(l).unwrap() - 4f64.ln()).abs() < 1e-12);
}
