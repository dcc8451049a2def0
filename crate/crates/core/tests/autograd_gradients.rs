//! Finite-difference checks for every differentiable primitive.

use densecap::autograd::gradcheck::{check_gradients, DEFAULT_FLOOR, DEFAULT_STEP};
use densecap::autograd::nn::{batch_norm1d, dropout, dropout_shared_rows, RunningStats};
use densecap::autograd::{concat, Tape, Tensor, Var};
use densecap::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Reduces any output to a scalar with a fixed random weighting so every
/// output element contributes a distinct sensitivity.
fn project<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = random(&y.shape(), &mut rng);
    Ok(y.mul(y.tape().constant(w))?.sum())
}

fn assert_check<F>(inputs: &[Tensor], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let report = check_gradients::<_, ChaCha8Rng>(inputs, f, DEFAULT_STEP, DEFAULT_FLOOR, None).unwrap();
    assert!(
        report.passes(TOL),
        "max rel err {} worst {:?}",
        report.max_rel_err,
        report.worst
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matmul_grad(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[m, k], &mut rng), random(&[k, n], &mut rng)];
        assert_check(&inputs, |_, v| Ok(v[0].matmul(v[1])?.sum()));
        assert_check(&inputs, move |_, v| project(v[0].matmul(v[1])?, seed));
    }

    #[test]
    fn matmul_t_and_transpose_grad(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[m, k], &mut rng), random(&[n, k], &mut rng)];
        assert_check(&inputs, move |_, v| project(v[0].matmul_t(v[1])?, seed));
        assert_check(&inputs, move |_, v| project(v[1].transpose()?, seed));
    }

    #[test]
    fn elementwise_grad(seed in any::<u64>(), r in 1usize..4, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[r, c], &mut rng), random(&[r, c], &mut rng)];
        assert_check(&inputs, move |_, v| project(v[0].add(v[1])?, seed));
        assert_check(&inputs, move |_, v| project(v[0].sub(v[1])?, seed));
        assert_check(&inputs, move |_, v| project(v[0].mul(v[1])?, seed));
        assert_check(&inputs, move |_, v| project(v[0].scale(-1.7).add_const(0.4), seed));
        assert_check(&inputs, move |_, v| project(v[0].sigmoid(), seed));
        assert_check(&inputs, move |_, v| project(v[0].exp(), seed));
        assert_check(&inputs, move |_, v| project(v[0].mul(v[0])?.add_const(0.5).log()?, seed));
    }

    #[test]
    fn relu_and_clamp_grad(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep values away from the kinks
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.05..1.5);
                if rng.random::<bool>() { v } else { -v }
            })
            .collect();
        let inputs = [Tensor::vector(data)];
        assert_check(&inputs, move |_, v| project(v[0].relu(), seed));
        assert_check(&inputs, move |_, v| project(v[0].clamp(-0.5, 0.7), seed));
    }

    #[test]
    fn broadcast_grad(seed in any::<u64>(), r in 1usize..4, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[r, c], &mut rng), random(&[c], &mut rng), random(&[r], &mut rng), random(&[1], &mut rng)];
        assert_check(&inputs, move |_, v| project(v[0].add_row(v[1])?, seed));
        assert_check(&inputs, move |_, v| project(v[0].mul_row(v[1])?, seed));
        assert_check(&inputs, move |_, v| project(v[0].mul_col(v[2])?, seed));
        assert_check(&inputs, move |_, v| project(v[0].scale_by(v[3])?, seed));
    }

    #[test]
    fn softmax_grad(seed in any::<u64>(), r in 1usize..4, c in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[r, c], &mut rng)];
        assert_check(&inputs, move |_, v| project(v[0].softmax()?, seed));
    }

    #[test]
    fn softmax_rows_are_simplex_points(seed in any::<u64>(), r in 1usize..5, c in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let y = tape.constant(random(&[r, c], &mut rng).reshaped(&[r, c]).unwrap()).softmax().unwrap().value();
        for i in 0..r {
            prop_assert!(y.row(i).iter().all(|p| *p >= 0.0));
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_grad(seed in any::<u64>(), r in 1usize..4, d in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[r, d], &mut rng), random(&[d], &mut rng), random(&[d], &mut rng)];
        assert_check(&inputs, move |_, v| project(v[0].layer_norm(v[1], v[2], 1e-5)?, seed));
    }

    #[test]
    fn batch_norm_grad_train_and_eval(seed in any::<u64>(), n in 2usize..6, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[n, c], &mut rng), random(&[c], &mut rng), random(&[c], &mut rng)];
        let running = RunningStats { mean: vec![0.3; c], var: vec![1.7; c] };
        let r2 = running.clone();
        assert_check(&inputs, move |_, v| {
            let (y, stats) = batch_norm1d(v[0], v[1], v[2], &running, true, 1e-5)?;
            assert!(stats.is_some());
            project(y, seed)
        });
        assert_check(&inputs, move |_, v| {
            let (y, _) = batch_norm1d(v[0], v[1], v[2], &r2, false, 1e-5)?;
            project(y, seed)
        });
    }

    #[test]
    fn conv1d_grad(seed in any::<u64>(), t in 3usize..9, cin in 1usize..3, cout in 1usize..3,
                   k in 1usize..4, stride in 1usize..3, pad in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[t, cin], &mut rng), random(&[k, cin, cout], &mut rng)];
        assert_check(&inputs, move |_, v| project(v[0].conv1d(v[1], stride, pad)?, seed));
    }

    #[test]
    fn structural_ops_grad(seed in any::<u64>(), r in 2usize..4, c in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[r, c], &mut rng), random(&[r, c], &mut rng)];
        assert_check(&inputs, move |_, v| project(concat(&[v[0], v[1]], 0)?, seed));
        assert_check(&inputs, move |_, v| project(concat(&[v[0], v[1]], 1)?, seed));
        assert_check(&inputs, move |_, v| project(v[0].gather_rows(&[1, 0, 1])?, seed));
        assert_check(&inputs, move |_, v| project(v[0].select(&[0, c + 1, 0])?, seed));
        assert_check(&inputs, move |_, v| project(v[0].slice_cols(1, c - 1)?, seed));
        assert_check(&inputs, move |_, v| project(v[0].reshape(&[r * c])?, seed));
        assert_check(&inputs, |_, v| Ok(v[0].mean()));
    }

    #[test]
    fn loss_ops_grad(seed in any::<u64>(), r in 1usize..4, c in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[r, c], &mut rng)];
        let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        let soft: Vec<f64> = (0..r * c).map(|_| rng.random_range(0.0..1.0)).collect();
        let reg: Vec<f64> = (0..r * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert_check(&inputs, move |_, v| v[0].softmax_cross_entropy(&targets));
        assert_check(&inputs, move |_, v| v[0].bce_with_logits(&soft));
        assert_check(&inputs, move |_, v| v[0].scale(3.0).smooth_l1(&reg));
    }

    #[test]
    fn sinusoid_grad(seed in any::<u64>(), pos in 0.0f64..64.0, half in 1usize..6) {
        let inputs = [Tensor::scalar(pos)];
        assert_check(&inputs, move |_, v| project(v[0].sinusoid(2 * half)?, seed));
    }

    #[test]
    fn dropout_with_fixed_mask_grad(seed in any::<u64>(), r in 1usize..4, c in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[r, c], &mut rng)];
        assert_check(&inputs, move |_, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = dropout(v[0], 0.3, true, &mut rng)?;
            let y = dropout_shared_rows(y, 0.3, true, &mut rng)?;
            project(y, seed)
        });
    }
}
