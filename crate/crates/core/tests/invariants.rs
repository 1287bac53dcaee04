use proptest::prelude::*;
use sis_extinction::approx::*;
use sis_extinction::exact::{norden_all, quasi_stationary_from};
use sis_extinction::*;

fn staged(r0: f64, n: u32, k: u32) -> ModelParams {
    ModelParams::new(r0, 1.0, n, k).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_stage_times_are_positive_and_increasing(n in 1u32..120, r0 in 0.1f64..3.0) {
        let tau = mean_extinction_times(&staged(r0, n, 1)).unwrap();
        prop_assert!(tau[0] > 0.0);
        prop_assert!(tau.windows(2).all(|w| w[1] >= w[0] * (1.0 - 8.0 * f64::EPSILON)));
        // the top increments are about 1/(gamma N) and drop below one ulp once tau ~ 1e13
        if tau[tau.len() - 1] < 1e10 {
            prop_assert!(tau.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn linear_solve_agrees_with_norden(n in 1u32..150, r0 in 0.1f64..2.5) {
        let p = staged(r0, n, 1);
        let a = mean_extinction_times(&p).unwrap();
        let b = norden_all(&p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-10 * y, "{x} vs {y}");
        }
    }

    #[test]
    fn quasi_stationary_distribution_is_a_distribution(k in 1u32..=3, n in 2u32..25, r0 in 0.3f64..3.0) {
        let p = staged(r0, n, k);
        let qsd = quasi_stationary(&p).unwrap();
        prop_assert!(qsd.q.iter().all(|&v| v >= 0.0));
        prop_assert!((qsd.q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((qsd.tau_q * qsd.lambda - 1.0).abs() < 1e-12);
        let space = StateSpace::for_params(&p).unwrap();
        let mut edge = vec![0u32; k as usize];
        edge[k as usize - 1] = 1;
        let outflow = f64::from(k) * p.gamma * qsd.prob(&space, &edge).unwrap();
        prop_assert!((qsd.lambda - outflow).abs() < 1e-10 * qsd.lambda);
    }

    #[test]
    fn quasi_stationary_distribution_ignores_the_start(
        k in 1u32..=2,
        n in 2u32..20,
        r0 in 0.5f64..2.5,
        weights in prop::collection::vec(0.01f64..1.0, 1..8),
    ) {
        let p = staged(r0, n, k);
        let size = StateSpace::for_params(&p).unwrap().size();
        let start: Vec<f64> = (0..size).map(|i| weights[i % weights.len()]).collect();
        let a = quasi_stationary(&p).unwrap();
        let b = quasi_stationary_from(&p, &start).unwrap();
        for (x, y) in a.q.iter().zip(&b.q) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn stationary_variance_totals_n_over_r0(k in 1u32..=5, n in 10u32..1000, r0 in 1.05f64..4.0) {
        let p = staged(r0, n, k);
        let v = ou_stationary_variance(&p).unwrap();
        let expected = p.n() / r0;
        prop_assert!((v.sum() - expected).abs() < 1e-10 * expected);
        prop_assert!((&v - ou_variance_closed_form(&p)).amax() < 1e-10 * v.amax());
    }

    #[test]
    fn minor_outbreak_probability_is_a_root_in_the_unit_interval(k in 1u32..=6, r0 in 1.01f64..5.0) {
        let p = staged(r0, 50, k);
        let q = p_minor_outbreak(&p).unwrap();
        let kf = f64::from(k);
        prop_assert!((0.0..1.0).contains(&q));
        prop_assert!((q * (1.0 + r0 * (1.0 - q) / kf).powf(kf) - 1.0).abs() < 1e-12);
        // more stages means a less variable infectious period and fewer minor outbreaks
        if k > 1 {
            prop_assert!(q < p_minor_outbreak(&staged(r0, 50, k - 1)).unwrap());
        }
    }

    #[test]
    fn diffusion_exponent_is_below_the_action(r0 in 1.001f64..3.0) {
        prop_assert!(fpe_exponent(r0) < action_closed_form(r0).unwrap());
    }

    #[test]
    fn quasi_potential_at_theta_star_is_minus_the_action(k in 1u32..=5, r0 in 1.05f64..4.0) {
        let p = staged(r0, 100, k);
        let s = s_k(&p, &theta_star(&p).unwrap());
        prop_assert!((s + action_closed_form(r0).unwrap()).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulation_is_reproducible_under_either_policy(seed in any::<u64>(), k in 1u32..=2) {
        let p = staged(1.3, 12, k);
        let start = Start::endemic(&p).unwrap();
        let seq = SimConfig { exec: Execution::Sequential, ..SimConfig::new(seed, 200, start.clone()) };
        let par = SimConfig { exec: Execution::Parallel, ..SimConfig::new(seed, 200, start) };
        let a = simulate_extinction_time(&p, &seq).unwrap();
        let b = simulate_extinction_time(&p, &par).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a.std_error > 0.0 && a.mean > 0.0);
    }
}
