use super::*;
use crate::rng::SeededRng;

/// Central finite differences (64-bit, step 1e-4) against analytic grads.
/// `f` must be a pure function of the leaf tensors it is given.
fn fd_gradcheck<F>(inputs: &[(Vec<f64>, Vec<usize>)], f: F)
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(d, s)| Tensor::leaf(d.clone(), s.clone(), true).unwrap())
        .collect();
    let loss = f(&leaves);
    assert_eq!(loss.numel(), 1, "gradcheck requires a scalar loss");
    loss.backward().unwrap();
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let h = 1e-4;
    for (ti, (data, _)) in inputs.iter().enumerate() {
        for ci in 0..data.len() {
            let eval = |delta: f64| -> f64 {
                let perturbed: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(tj, (d, s))| {
                        let mut dd = d.clone();
                        if tj == ti {
                            dd[ci] += delta;
                        }
                        Tensor::leaf(dd, s.clone(), false).unwrap()
                    })
                    .collect();
                f(&perturbed).value()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads[ti][ci];
            let denom = a.abs().max(fd.abs()).max(1e-3);
            let rel = (a - fd).abs() / denom;
            assert!(
                rel < 1e-4,
                "input {ti} component {ci}: analytic {a} vs fd {fd} (rel {rel:.2e})"
            );
        }
    }
}

fn rand_vec(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect()
}

#[test]
fn matmul_by_identity_is_identity() {
    let eye = Tensor::<f64>::constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
    let x = Tensor::constant(vec![3.0, -1.0, 0.5, 2.0, 7.0, -4.0], vec![2, 3]).unwrap();
    let y = eye.matmul(&x).unwrap();
    assert_eq!(y.data(), x.data());
    assert_eq!(y.shape(), &[2, 3]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let x = Tensor::<f64>::constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
    let s = x.softmax_last();
    for &v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn grad_of_sum_exp_matches_closed_form_and_fd() {
    // d/dx sum(exp(x)) at x = [0, 1] is [1, e]
    let x = Tensor::leaf(vec![0.0f64, 1.0], vec![2], true).unwrap();
    let loss = x.exp().sum();
    loss.backward().unwrap();
    let g = x.grad().unwrap();
    assert!((g[0] - 1.0).abs() < 1e-6);
    assert!((g[1] - std::f64::consts::E).abs() < 1e-6);
    fd_gradcheck(&[(vec![0.0, 1.0], vec![2])], |l| l[0].exp().sum());
}

#[test]
fn backward_of_sum_is_ones_and_mean_is_inv_n() {
    let x = Tensor::leaf(vec![0.3f64; 12], vec![3, 4], true).unwrap();
    x.sum().backward().unwrap();
    assert!(x.grad().unwrap().iter().all(|&g| g == 1.0));

    let y = Tensor::leaf(vec![0.3f64; 12], vec![3, 4], true).unwrap();
    y.mean().backward().unwrap();
    assert!(y.grad().unwrap().iter().all(|&g| (g - 1.0 / 12.0).abs() < 1e-15));
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = SeededRng::new(42);
    let x = (rand_vec(&mut rng, 8, -2.0, 2.0), vec![2, 4]);
    let w1 = (rand_vec(&mut rng, 20, -2.0, 2.0), vec![4, 5]);
    let b1 = (rand_vec(&mut rng, 5, -2.0, 2.0), vec![5]);
    let w2 = (rand_vec(&mut rng, 15, -2.0, 2.0), vec![5, 3]);
    let b2 = (rand_vec(&mut rng, 3, -2.0, 2.0), vec![3]);
    fd_gradcheck(&[x, w1, b1, w2, b2], |l| {
        let h = l[0].matmul(&l[1]).unwrap().add_bias(&l[2]).unwrap().relu();
        let out = h.matmul(&l[3]).unwrap().add_bias(&l[4]).unwrap();
        out.log_softmax_last().gather_last(&[0, 2]).unwrap().mean()
    });
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = SeededRng::new(7);
    let a6 = || (rand_vec(&mut SeededRng::new(11), 6, -2.0, 2.0), vec![2, 3]);
    let b6 = || (rand_vec(&mut SeededRng::new(12), 6, -2.0, 2.0), vec![2, 3]);
    // weighted-sum head so upstream grads are non-uniform
    let w: Vec<f64> = rand_vec(&mut rng, 6, -1.0, 1.0);
    let head = |t: &Tensor<f64>, w: &[f64]| -> Tensor<f64> {
        let wt = Tensor::constant(w[..t.numel()].to_vec(), t.shape().to_vec()).unwrap();
        t.mul(&wt).unwrap().sum()
    };

    fd_gradcheck(&[a6(), b6()], |l| head(&l[0].add(&l[1]).unwrap(), &w));
    fd_gradcheck(&[a6(), b6()], |l| head(&l[0].sub(&l[1]).unwrap(), &w));
    fd_gradcheck(&[a6(), b6()], |l| head(&l[0].mul(&l[1]).unwrap(), &w));
    fd_gradcheck(&[a6(), b6()], |l| head(&l[0].minimum(&l[1]).unwrap(), &w));
    fd_gradcheck(&[a6()], |l| head(&l[0].neg(), &w));
    fd_gradcheck(&[a6()], |l| head(&l[0].exp(), &w));
    fd_gradcheck(&[a6()], |l| head(&l[0].relu(), &w));
    fd_gradcheck(&[a6()], |l| head(&l[0].scale(1.7), &w));
    fd_gradcheck(&[a6()], |l| head(&l[0].add_scalar(-0.4), &w));
    fd_gradcheck(&[a6()], |l| head(&l[0].clamp(-0.8, 0.9).unwrap(), &w));
    fd_gradcheck(&[a6()], |l| head(&l[0].softmax_last(), &w));
    fd_gradcheck(&[a6()], |l| head(&l[0].log_softmax_last(), &w));
    fd_gradcheck(&[a6()], |l| l[0].sum());
    fd_gradcheck(&[a6()], |l| l[0].mean());
    // log on positive inputs
    fd_gradcheck(&[(rand_vec(&mut rng, 6, 0.1, 2.2), vec![2, 3])], |l| {
        head(&l[0].log(), &w)
    });
    // matmul, both operands
    fd_gradcheck(
        &[
            (rand_vec(&mut SeededRng::new(21), 6, -2.0, 2.0), vec![2, 3]),
            (rand_vec(&mut SeededRng::new(22), 12, -2.0, 2.0), vec![3, 4]),
        ],
        |l| l[0].matmul(&l[1]).unwrap().sum(),
    );
    fd_gradcheck(
        &[
            (rand_vec(&mut SeededRng::new(23), 6, -2.0, 2.0), vec![2, 3]),
            (rand_vec(&mut SeededRng::new(24), 12, -2.0, 2.0), vec![4, 3]),
        ],
        |l| l[0].matmul_nt(&l[1]).unwrap().sum(),
    );
    // bias broadcast
    fd_gradcheck(
        &[a6(), (rand_vec(&mut SeededRng::new(25), 3, -2.0, 2.0), vec![3])],
        |l| head(&l[0].add_bias(&l[1]).unwrap(), &w),
    );
    // gather / slice / concat
    fd_gradcheck(&[a6()], |l| l[0].gather_last(&[2, 0]).unwrap().sum());
    fd_gradcheck(&[a6()], |l| head2(&l[0].slice_rows(1, 2).unwrap()));
    fd_gradcheck(&[a6()], |l| head2(&l[0].slice_cols(1, 3).unwrap()));
    fd_gradcheck(&[a6(), b6()], |l| {
        head2(&Tensor::concat_rows(&[l[0].clone(), l[1].clone()]).unwrap())
    });
    fd_gradcheck(&[a6(), b6()], |l| {
        head2(&Tensor::concat_cols(&[l[0].clone(), l[1].clone()]).unwrap())
    });
    // embedding
    fd_gradcheck(
        &[(rand_vec(&mut SeededRng::new(26), 12, -2.0, 2.0), vec![4, 3])],
        |l| head2(&Tensor::embedding(&l[0], &[1, 3, 1]).unwrap()),
    );
    // layer norm, all three operands
    fd_gradcheck(
        &[
            a6(),
            (rand_vec(&mut SeededRng::new(27), 3, 0.5, 1.5), vec![3]),
            (rand_vec(&mut SeededRng::new(28), 3, -0.5, 0.5), vec![3]),
        ],
        |l| head2(&l[0].layer_norm(&l[1], &l[2], 1e-5).unwrap()),
    );
    // causal softmax on a square matrix
    fd_gradcheck(
        &[(rand_vec(&mut SeededRng::new(29), 9, -2.0, 2.0), vec![3, 3])],
        |l| head2(&l[0].causal_softmax().unwrap()),
    );
}

/// Fixed non-uniform head for ops that change shape.
fn head2(t: &Tensor<f64>) -> Tensor<f64> {
    let w: Vec<f64> = (0..t.numel()).map(|i| 0.3 + 0.17 * i as f64).collect();
    let wt = Tensor::constant(w, t.shape().to_vec()).unwrap();
    t.mul(&wt).unwrap().sum()
}

#[test]
fn backward_twice_doubles_gradients() {
    let x = Tensor::leaf(vec![1.0f64, 2.0, 3.0], vec![3], true).unwrap();
    let loss = x.mul(&x).unwrap().sum();
    loss.backward().unwrap();
    let once = x.grad().unwrap();
    loss.backward().unwrap();
    let twice = x.grad().unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(*b, 2.0 * *a);
    }
}

#[test]
fn stop_grad_contributes_zero_gradient() {
    let x = Tensor::leaf(vec![1.5f64, -0.5], vec![2], true).unwrap();
    let detached = x.stop_grad();
    let loss = x.mul(&detached).unwrap().sum();
    loss.backward().unwrap();
    // d/dx (x * const) = const, not 2x
    assert_eq!(x.grad().unwrap(), detached.data().to_vec());
    assert!(detached.grad().is_none());
}

#[test]
fn fan_out_gradients_accumulate() {
    let x = Tensor::leaf(vec![2.0f64], vec![1], true).unwrap();
    let y = x.add(&x).unwrap().sum();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0]);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let a = Tensor::<f32>::constant(vec![0.0; 6], vec![2, 3]).unwrap();
    let b = Tensor::<f32>::constant(vec![0.0; 4], vec![2, 2]).unwrap();
    let err = a.add(&b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");

    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("matmul"), "{err}");
}

#[test]
fn backward_rejects_non_scalar_root() {
    let x = Tensor::leaf(vec![1.0f64, 2.0], vec![2], true).unwrap();
    let y = x.exp();
    let err = y.backward().unwrap_err().to_string();
    assert!(err.contains("scalar"), "{err}");
}

#[test]
fn minimum_splits_gradient_on_ties() {
    let a = Tensor::leaf(vec![1.0f64, 2.0], vec![2], true).unwrap();
    let b = Tensor::leaf(vec![1.0f64, 5.0], vec![2], true).unwrap();
    a.minimum(&b).unwrap().sum().backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![0.5, 1.0]);
    assert_eq!(b.grad().unwrap(), vec![0.5, 0.0]);
}

#[test]
fn clamp_zeroes_gradient_outside_interval() {
    let x = Tensor::leaf(vec![-2.0f64, 0.0, 2.0], vec![3], true).unwrap();
    x.clamp(-1.0, 1.0).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
}

#[test]
fn causal_softmax_rows_are_prefix_distributions() {
    let x = Tensor::<f64>::constant(vec![0.5; 9], vec![3, 3]).unwrap();
    let s = x.causal_softmax().unwrap();
    let d = s.data();
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] == 0.0 && d[2] == 0.0);
    assert!((d[3] - 0.5).abs() < 1e-12 && (d[4] - 0.5).abs() < 1e-12 && d[5] == 0.0);
    let last: f64 = d[6..9].iter().sum();
    assert!((last - 1.0).abs() < 1e-12);
}

#[test]
fn constants_do_not_build_backward_recipes() {
    let a = Tensor::<f32>::constant(vec![1.0, 2.0], vec![2]).unwrap();
    let b = a.exp().sum();
    assert!(!b.requires_grad());
    b.backward().unwrap(); // no-op, no error
    assert!(a.grad().is_none());
}
