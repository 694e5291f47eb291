use super::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    got.iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}

#[test]
fn tensor_of_identity() {
    let t = tensor_of(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(t.shape(), &[2, 2]);
    assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0]);
    assert!(!t.requires_grad());
    assert!(t.grad().is_none());
}

#[test]
fn tensor_of_sum() {
    let t = tensor_of(&[3], &[0.1, 0.2, 0.3]).unwrap();
    assert!((t.data().iter().sum::<f64>() - 0.6).abs() < 1e-15);
}

#[test]
fn tensor_of_rejects_nan_and_bad_shape() {
    assert!(matches!(
        tensor_of(&[2], &[1.0, f64::NAN]),
        Err(Error::Value(_))
    ));
    assert!(matches!(
        tensor_of(&[2, 2], &[1.0, 2.0]),
        Err(Error::Shape(_))
    ));
}

#[test]
fn matmul_identity() {
    let eye = tensor_of(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = tensor_of(&[2, 2], &[3.0, -1.5, 2.0, 7.0]).unwrap();
    let out = eye.matmul(&m).unwrap();
    assert_eq!(out.data(), m.data());
}

#[test]
fn relu_definition() {
    let x = tensor_of(&[3], &[-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn conv2d_one_by_one_kernel_scales() {
    // 1x1x3x3 input, 1x1x1x1 kernel of value 2: convolution is a doubling.
    let x = tensor_of(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
    let k = tensor_of(&[1, 1, 1, 1], &[2.0]).unwrap();
    let out = x.conv2d(&k, 1, 0).unwrap();
    assert_eq!(out.shape(), &[1, 1, 3, 3]);
    let want: Vec<f64> = x.data().iter().map(|v| v * 2.0).collect();
    assert_eq!(out.data(), &want[..]);
}

#[test]
fn conv2d_hand_case_with_padding() {
    // 2x2 input, 2x2 kernel, stride 1, padding 1 -> 3x3 output; checked by
    // writing out the sums.
    let x = tensor_of(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let k = tensor_of(&[1, 1, 2, 2], &[1.0, 10.0, 100.0, 1000.0]).unwrap();
    let out = x.conv2d(&k, 1, 1).unwrap();
    assert_eq!(out.shape(), &[1, 1, 3, 3]);
    assert_eq!(
        out.data(),
        &[1000.0, 2100.0, 200.0, 3010.0, 4321.0, 402.0, 30.0, 43.0, 4.0]
    );
}

#[test]
fn backward_sum_of_squares() {
    let x = Tensor::parameter(&[2], &[1.0, 2.0]).unwrap();
    let loss = x.mul(&x).unwrap().mean().scale(2.0); // sum(x^2) = 2*mean over 2 elems
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_mean() {
    let x = Tensor::parameter(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    x.mean().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
}

#[test]
fn backward_requires_scalar_and_tape() {
    let x = Tensor::parameter(&[2], &[1.0, 2.0]).unwrap();
    let y = x.relu();
    assert!(matches!(y.backward(), Err(Error::Shape(_))));
    let leaf = Tensor::parameter(&[1], &[2.0]).unwrap();
    assert!(matches!(leaf.backward(), Err(Error::Usage(_))));
}

#[test]
fn backward_accumulates_across_consumers() {
    // x feeds two consumers; gradients must sum.
    let x = Tensor::parameter(&[2], &[1.0, 3.0]).unwrap();
    let a = x.scale(2.0);
    let b = x.mul(&x).unwrap();
    let loss = a.add(&b).unwrap().mean();
    loss.backward().unwrap();
    // d/dx mean(2x + x^2) = (2 + 2x)/2
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_twice_doubles_then_clear_resets() {
    let x = Tensor::parameter(&[2], &[1.0, 2.0]).unwrap();
    let loss = x.mul(&x).unwrap().mean();
    loss.backward().unwrap();
    let once = x.grad().unwrap();
    loss.backward().unwrap();
    let twice = x.grad().unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(*b, 2.0 * a);
    }
    x.clear_grad();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), once);
}

#[test]
fn straight_through_round() {
    let x = Tensor::parameter(&[2], &[0.4, 0.6]).unwrap();
    let y = x.straight_through(f64::round);
    assert_eq!(y.data(), &[0.0, 1.0]);
    y.mean().scale(2.0).backward().unwrap();
    // Upstream grad of sum() is [1,1]; STE passes it through unchanged.
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
}

#[test]
fn straight_through_identity_is_noop() {
    let x = Tensor::parameter(&[3], &[-0.5, 0.25, 2.0]).unwrap();
    let y = x.straight_through(|v| v);
    assert_eq!(y.data(), x.data());
    y.mean().backward().unwrap();
    let g_ste = x.grad().unwrap();
    x.clear_grad();
    x.mean().backward().unwrap();
    assert_eq!(g_ste, x.grad().unwrap());
}

#[test]
fn straight_through_matches_smooth_surrogate_gradient() {
    // f(round(x)) under STE must match the finite-difference gradient of
    // f with round replaced by the identity.
    let x0 = tensor_of(&[3], &[0.3, -1.2, 2.6]).unwrap();
    let x = Tensor::parameter(&[3], x0.data()).unwrap();
    let loss = x.straight_through(f64::round).mul(&x).unwrap().mean();
    loss.backward().unwrap();
    // Surrogate: round -> identity, but the rounded VALUE still feeds the
    // product, so the STE gradient is d/dx [round(x0)*x] + [x] * dround/dx
    // with dround/dx = 1: grad = (round(x0) + x0)/n ... cross-check by FD
    // on g(x) = mean((x + c) * x) where c = round(x0) - x0 held fixed.
    let c: Vec<f64> = x0.data().iter().map(|v| v.round() - v).collect();
    let fd = finite_diff_gradient(
        |t| {
            let shifted: Vec<f64> =
                t.data().iter().zip(&c).map(|(v, ci)| (v + ci) * v).collect();
            Ok(shifted.iter().sum::<f64>() / shifted.len() as f64)
        },
        &x0,
        1e-6,
    )
    .unwrap();
    assert!(max_rel_err(&x.grad().unwrap(), fd.data()) < 1e-5);
}

#[test]
fn finite_diff_basics() {
    let x = tensor_of(&[1], &[3.0]).unwrap();
    let g = finite_diff_gradient(
        |t| Ok(t.data().iter().map(|v| v * v).sum()),
        &x,
        1e-6,
    )
    .unwrap();
    assert!((g.data()[0] - 6.0).abs() < 1e-6);

    let g0 = finite_diff_gradient(|_| Ok(42.0), &x, 1e-6).unwrap();
    assert_eq!(g0.data(), &[0.0]);

    let xy = tensor_of(&[2], &[2.0, 5.0]).unwrap();
    let g2 = finite_diff_gradient(|t| Ok(t.data()[0] * t.data()[1]), &xy, 1e-6).unwrap();
    assert!((g2.data()[0] - 5.0).abs() < 1e-6);
    assert!((g2.data()[1] - 2.0).abs() < 1e-6);
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.random::<f64>() - 0.5) * 2.0 * scale).collect()
}

/// Gradient check of a two-layer MLP loss against central differences,
/// parameter tensor by parameter tensor.
#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (batch, d_in, d_h, classes) = (3, 4, 5, 3);
    let x = tensor_of(&[batch, d_in], &random_vec(&mut rng, batch * d_in, 1.0)).unwrap();
    let labels = vec![0usize, 2, 1];
    let w1v = random_vec(&mut rng, d_in * d_h, 0.7);
    let b1v = random_vec(&mut rng, d_h, 0.2);
    let w2v = random_vec(&mut rng, d_h * classes, 0.7);

    let forward = |w1: &Tensor, b1: &Tensor, w2: &Tensor| -> Result<Tensor> {
        let h = x.matmul(w1)?.add_bias(b1)?.relu();
        let logits = h.matmul(w2)?;
        Tensor::cross_entropy(&logits, &labels)
    };

    let w1 = Tensor::parameter(&[d_in, d_h], &w1v).unwrap();
    let b1 = Tensor::parameter(&[d_h], &b1v).unwrap();
    let w2 = Tensor::parameter(&[d_h, classes], &w2v).unwrap();
    forward(&w1, &b1, &w2).unwrap().backward().unwrap();

    let fd_w1 = finite_diff_gradient(
        |t| forward(t, &b1, &w2)?.item(),
        &tensor_of(&[d_in, d_h], &w1v).unwrap(),
        1e-6,
    )
    .unwrap();
    let fd_b1 = finite_diff_gradient(
        |t| forward(&w1, t, &w2)?.item(),
        &tensor_of(&[d_h], &b1v).unwrap(),
        1e-6,
    )
    .unwrap();
    let fd_w2 = finite_diff_gradient(
        |t| forward(&w1, &b1, t)?.item(),
        &tensor_of(&[d_h, classes], &w2v).unwrap(),
        1e-6,
    )
    .unwrap();

    assert!(max_rel_err(&w1.grad().unwrap(), fd_w1.data()) < 1e-5);
    assert!(max_rel_err(&b1.grad().unwrap(), fd_b1.data()) < 1e-5);
    assert!(max_rel_err(&w2.grad().unwrap(), fd_w2.data()) < 1e-5);
}

#[test]
fn conv_pool_bn_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = tensor_of(&[2, 2, 4, 4], &random_vec(&mut rng, 64, 1.0)).unwrap();
    let kv = random_vec(&mut rng, 3 * 2 * 3 * 3, 0.5);
    let gv = vec![1.1, 0.9, 1.3];
    let bv = vec![0.1, -0.2, 0.05];

    let forward = |k: &Tensor, g: &Tensor, b: &Tensor| -> Result<Tensor> {
        let c = x.conv2d(k, 1, 1)?;
        let (n, _, _) = {
            let (t, mean, var) = c.batch_norm_train(g, b, 1e-5)?;
            (t, mean, var)
        };
        Ok(n.relu().max_pool2d(2, 2)?.mean())
    };

    let k = Tensor::parameter(&[3, 2, 3, 3], &kv).unwrap();
    let g = Tensor::parameter(&[3], &gv).unwrap();
    let b = Tensor::parameter(&[3], &bv).unwrap();
    forward(&k, &g, &b).unwrap().backward().unwrap();

    let fd_k = finite_diff_gradient(
        |t| forward(t, &g, &b)?.item(),
        &tensor_of(&[3, 2, 3, 3], &kv).unwrap(),
        1e-6,
    )
    .unwrap();
    let fd_g = finite_diff_gradient(
        |t| forward(&k, t, &b)?.item(),
        &tensor_of(&[3], &gv).unwrap(),
        1e-6,
    )
    .unwrap();
    assert!(max_rel_err(&k.grad().unwrap(), fd_k.data()) < 1e-5);
    assert!(max_rel_err(&g.grad().unwrap(), fd_g.data()) < 1e-5);
}

#[test]
fn backward_counter_increments() {
    let before = backward_call_count();
    let x = Tensor::parameter(&[2], &[1.0, 2.0]).unwrap();
    x.mean().backward().unwrap();
    assert_eq!(backward_call_count(), before + 1);
}
