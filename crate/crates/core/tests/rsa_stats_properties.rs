use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use repscope::rng::rng_from_seed;
use repscope::rsa::{linear_cka, linear_cka_direct, linear_cka_gram};
use repscope::stats::{kendall_tau_b, smooth_curve, t_test_one_sided};

fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

fn orthogonal(p: usize, seed: u64) -> DMatrix<f64> {
    gaussian(p, p, seed).qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cka_is_symmetric_bounded_and_invariant(
        seed in any::<u64>(),
        n in 3usize..30,
        pa in 1usize..12,
        pb in 1usize..12,
        c in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0],
    ) {
        let a = gaussian(n, pa, seed);
        let b = gaussian(n, pb, seed ^ 0x9e37);
        let ab = linear_cka(&a, &b).unwrap();
        prop_assert!((ab - linear_cka(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-10).contains(&ab));
        prop_assert!((linear_cka(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let rotated = &a * orthogonal(pa, seed.wrapping_add(1)) * c;
        prop_assert!((linear_cka(&rotated, &b).unwrap() - ab).abs() < 1e-10);
        let rotated_b = &b * orthogonal(pb, seed.wrapping_add(2)) * (1.0 / c);
        prop_assert!((linear_cka(&a, &rotated_b).unwrap() - ab).abs() < 1e-10);
        prop_assert!((linear_cka_gram(&a, &b).unwrap() - linear_cka_direct(&a, &b).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn t_statistic_is_monotone_in_the_mean(seed in any::<u64>(), n in 2usize..30, shift in 1e-3f64..2.0) {
        let mut rng = rng_from_seed(seed);
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let raised: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let (a, b) = (t_test_one_sided(&v, 0.5).unwrap(), t_test_one_sided(&raised, 0.5).unwrap());
        prop_assert!(b.t > a.t);
        prop_assert!(b.p <= a.p);
    }

    #[test]
    fn tau_b_is_bounded_and_permutation_symmetric(seed in any::<u64>(), n in 2usize..60, levels in 2u32..10) {
        let mut rng = rng_from_seed(seed);
        let x: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels))).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels))).collect();
        let Ok(r) = kendall_tau_b(&x, &y) else {
            // all-tied draws are undefined by contract
            prop_assert!(x.windows(2).all(|w| w[0] == w[1]) || y.windows(2).all(|w| w[0] == w[1]));
            return Ok(());
        };
        prop_assert!((-1.0..=1.0).contains(&r.tau_b));
        prop_assert!((0.0..=1.0).contains(&r.p));
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let xp: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let yp: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let rp = kendall_tau_b(&xp, &yp).unwrap();
        prop_assert_eq!(rp.tau_b, r.tau_b);
        prop_assert_eq!(rp.concordant_minus_discordant, r.concordant_minus_discordant);
    }

    #[test]
    fn block_smoothing_preserves_the_mean(seed in any::<u64>(), blocks in 1usize..20, window in 1usize..12) {
        let mut rng = rng_from_seed(seed);
        let v: Vec<f64> = (0..blocks * window).map(|_| rng.random::<f64>()).collect();
        let s = smooth_curve(&v, window).unwrap();
        prop_assert_eq!(s.len(), blocks);
        let m1 = v.iter().sum::<f64>() / v.len() as f64;
        let m2 = s.iter().sum::<f64>() / s.len() as f64;
        prop_assert!((m1 - m2).abs() < 1e-12);
    }
}
