use efigp::spectral::{build_fourier_operator, push_covariance};
use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn push_forward_of_a_random_covariance_matches_monte_carlo() {
    let (n, l, draws) = (41, 11, 200_000);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // C = G Gᵀ / n, so x = G ε / √n has covariance C
    let g = Mat::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let c = &g * g.transpose() * faer::scale(1.0 / n as f64);
    let op = build_fourier_operator(n, l).unwrap();
    let exact = push_covariance(&op, c.as_ref()).unwrap();
    let rows = op.rows();
    let mut acc = Mat::<f64>::zeros(rows, rows);
    let mut x = vec![0.0; n];
    for _ in 0..draws {
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = (0..n).map(|k| g.read(i, k) * eps[k]).sum::<f64>() / (n as f64).sqrt();
        }
        let y = op.apply(&x);
        for a in 0..rows {
            for b in 0..rows {
                acc.write(a, b, acc.read(a, b) + y[a] * y[b]);
            }
        }
    }
    let mc = acc * faer::scale(1.0 / draws as f64);
    let rel = (&mc - &exact).norm_l2() / exact.norm_l2();
    assert!(rel < 0.02, "relative Frobenius error {rel}");
}
