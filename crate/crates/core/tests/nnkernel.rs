use ctmkit_core::nnkernel::gradcheck::{central_difference, relative_error};
use ctmkit_core::nnkernel::{
    adam_step, log_softmax_rows, softmax_backward, softmax_rows, Activation, AdamConfig, BatchNorm, Dense, Matrix,
    Param,
};
use ctmkit_core::RngStream;
use proptest::prelude::*;

fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.standard_normal()).collect()).unwrap()
}

#[test]
fn batchnorm_input_gradient_4x3() {
    let mut rng = RngStream::new(13);
    let x = random(4, 3, &mut rng);
    let weights = random(4, 3, &mut rng);
    for affine in [false, true] {
        let loss = |xs: &[f64]| {
            let mut bn = BatchNorm::new(3, affine);
            let (y, _) = bn.forward_train(&Matrix::from_vec(4, 3, xs.to_vec()).unwrap()).unwrap();
            y.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut bn = BatchNorm::new(3, affine);
        let (_, cache) = bn.forward_train(&x).unwrap();
        let dx = bn.backward(&cache, &weights).unwrap();
        let numeric = central_difference(loss, x.as_slice(), 1e-5);
        for (a, n) in dx.as_slice().iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-4, "affine={affine}: {a} vs {n}");
        }
    }
}

#[test]
fn dense_softplus_gradients() {
    let mut rng = RngStream::new(2);
    let x = random(5, 4, &mut rng);
    let dy = random(5, 3, &mut rng);
    let mut layer = Dense::init(4, 3, &mut rng);
    let out = layer.forward(&x, Activation::Softplus).unwrap();
    let dx = layer.backward(&x, &out, &dy, Activation::Softplus).unwrap();

    let w = layer.weight.value.clone();
    let b = layer.bias.value.clone();
    let loss_w = |ws: &[f64]| {
        let l = Dense::from_weights(Matrix::from_vec(4, 3, ws.to_vec()).unwrap(), b.clone()).unwrap();
        let y = l.forward(&x, Activation::Softplus).unwrap().output;
        y.as_slice().iter().zip(dy.as_slice()).map(|(a, g)| a * g).sum::<f64>()
    };
    for (a, n) in layer.weight.grad.as_slice().iter().zip(central_difference(loss_w, w.as_slice(), 1e-5)) {
        assert!(relative_error(*a, n) < 1e-6, "{a} vs {n}");
    }
    let loss_x = |xs: &[f64]| {
        let l = Dense::from_weights(w.clone(), b.clone()).unwrap();
        let y = l.forward(&Matrix::from_vec(5, 4, xs.to_vec()).unwrap(), Activation::Softplus).unwrap().output;
        y.as_slice().iter().zip(dy.as_slice()).map(|(a, g)| a * g).sum::<f64>()
    };
    for (a, n) in dx.as_slice().iter().zip(central_difference(loss_x, x.as_slice(), 1e-5)) {
        assert!(relative_error(*a, n) < 1e-6, "{a} vs {n}");
    }
}

#[test]
fn adam_matches_scalar_recurrence() {
    let cfg = AdamConfig::default();
    let mut p = Param::new(Matrix::filled(1, 1, 1.0));
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=20 {
        let g = 2.0 * w - 0.3;
        p.grad = Matrix::filled(1, 1, g);
        adam_step([&mut p], &cfg);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w -= 2e-3 * mh / (vh.sqrt() + 1e-8);
        assert!((p.value[(0, 0)] - w).abs() < 1e-15);
    }
}

#[test]
fn softmax_backward_matches_difference() {
    let mut rng = RngStream::new(6);
    let x = random(3, 5, &mut rng);
    let dy = random(3, 5, &mut rng);
    let y = softmax_rows(&x);
    let dx = softmax_backward(&y, &dy);
    let loss = |xs: &[f64]| {
        let y = softmax_rows(&Matrix::from_vec(3, 5, xs.to_vec()).unwrap());
        y.as_slice().iter().zip(dy.as_slice()).map(|(a, g)| a * g).sum::<f64>()
    };
    for (a, n) in dx.as_slice().iter().zip(central_difference(loss, x.as_slice(), 1e-5)) {
        assert!(relative_error(*a, n) < 1e-6);
    }
}

#[test]
fn fork_streams_are_independent_and_reproducible() {
    let base = RngStream::new(99);
    let draw = |mut r: RngStream| -> Vec<u64> { (0..5).map(|_| rand::RngCore::next_u64(&mut r)).collect() };
    let (a, b, c) = (draw(base.fork(1)), draw(base.fork(1)), draw(base.fork(2)));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-50.0f64..50.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_on_simplex(m in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix_strategy(r, c))) {
        let s = softmax_rows(&m);
        let ls = log_softmax_rows(&m);
        for (row, lrow) in s.row_iter().zip(ls.row_iter()) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            for (p, lp) in row.iter().zip(lrow) {
                prop_assert!((p.ln() - lp).abs() < 1e-9 || *p < 1e-300);
            }
        }
    }

    #[test]
    fn matmul_matches_triple_loop(
        (a, b) in (1usize..5, 1usize..5, 1usize..5)
            .prop_flat_map(|(n, k, m)| (matrix_strategy(n, k), matrix_strategy(k, m)))
    ) {
        let c = a.matmul(&b).unwrap();
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for t in 0..a.cols() {
                    s += a[(i, t)] * b[(t, j)];
                }
                prop_assert!((c[(i, j)] - s).abs() <= 1e-9 * (1.0 + s.abs()));
            }
        }
        let bt = Matrix::from_vec(b.cols(), b.rows(), (0..b.cols() * b.rows()).map(|x| b[(x % b.rows(), x / b.rows())]).collect()).unwrap();
        let c2 = a.matmul_t(&bt).unwrap();
        for (x, y) in c.as_slice().iter().zip(c2.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }
}
