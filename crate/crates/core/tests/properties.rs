use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slowbond::blocks::block_average;
use slowbond::gartner::heights;
use slowbond::harness::{num, RunConfig};
use slowbond::heat_kernel::{max_principle_check, solve_kernel, KernelMethod};
use slowbond::model::{Convention, DerivedConstants, ModelParams, RawParams};
use slowbond::simulator::{init_config, run, InitKind, SimOptions};

fn params(n: u32, beta: f64, slow: Vec<i64>, w: usize) -> ModelParams {
    let mut raw = RawParams::new(n, beta, slow, w);
    raw.strict_mode = false;
    ModelParams::validate(&raw).unwrap()
}

fn spins(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(prop::bool::ANY, len).prop_map(|v| v.into_iter().map(|b| if b { 1 } else { -1 }).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kernel_is_stochastic_positive_and_a_semigroup(
        n in 2u32..=64,
        beta in 0.0f64..0.3,
        half in 4usize..20,
        slow in prop::collection::btree_set(-3i64..=3, 0..3),
        t in 0.05f64..5.0,
        frac in 0.1f64..0.9,
    ) {
        let w = 2 * half + 1;
        let p = params(n, beta, slow.into_iter().collect(), w);
        let c = DerivedConstants::new(&p);
        let t = t / (n as f64).powi(2);
        let conv = Convention::ExactDiffusivity;
        let full = solve_kernel(&p, &c, 0.0, t, KernelMethod::Uniformization, conv).unwrap();
        let a = solve_kernel(&p, &c, 0.0, frac * t, KernelMethod::Uniformization, conv).unwrap();
        let b = solve_kernel(&p, &c, frac * t, t, KernelMethod::Uniformization, conv).unwrap();
        prop_assert!(full.max_row_sum_deviation() < 1e-12);
        prop_assert!(full.min_entry() >= 0.0);
        prop_assert!(a.compose(&b).max_abs_diff(&full) < 1e-10);
        prop_assert!(max_principle_check(&[&a, &full]).pass);
    }

    #[test]
    fn block_average_increments_are_local_products(s in spins(8..40), ell in 1usize..6) {
        let y = 0;
        prop_assume!(y + ell + 1 < s.len());
        let prev = if ell == 1 { 0.0 } else { (ell - 1) as f64 * block_average(&s, ell - 1, y).unwrap() };
        let inc = ell as f64 * block_average(&s, ell, y).unwrap() - prev;
        prop_assert_eq!(inc, (s[y] * s[y + ell]) as f64);
        prop_assert!(block_average(&s, ell, y).unwrap().abs() <= 1.0);
    }

    #[test]
    fn height_increments_follow_spins(s in spins(3..40), flux in -50i64..50, lambda in 0.001f64..1.0) {
        prop_assume!(s.len() % 2 == 1);
        let h = heights(&s, flux, lambda);
        for i in 1..s.len() {
            prop_assert!((h[i] - h[i - 1] - lambda * s[i] as f64).abs() < 1e-12);
        }
        prop_assert_eq!(h[s.len() / 2], 2.0 * lambda * flux as f64);
    }

    #[test]
    fn dynamics_conserve_spin_and_are_seed_deterministic(seed in any::<u64>(), n in 4u32..16) {
        let w = 33;
        let p = params(n, 0.25, vec![0], w);
        let go = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = init_config(&InitKind::BernoulliHalf, w, &mut rng).unwrap();
            let opts = SimOptions { record_log: false, ..Default::default() };
            run(&c, &p, 0.02, 0.005, &mut rng, &opts).unwrap().0
        };
        let a = go();
        let total: i64 = a.spins[0].iter().map(|&v| v as i64).sum();
        for snap in &a.spins {
            prop_assert_eq!(snap.iter().map(|&v| v as i64).sum::<i64>(), total);
        }
        prop_assert_eq!(a, go());
    }

    #[test]
    fn csv_numbers_round_trip(x in prop::num::f64::NORMAL | prop::num::f64::ZERO) {
        prop_assert_eq!(num(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn run_config_round_trips(
        n in 2u32..4096,
        beta in 0.0f64..0.3,
        t_final in 0.001f64..2.0,
        replicas in 1usize..100,
        seed in 0u64..(1u64 << 62),
        wedge in any::<bool>(),
    ) {
        let text = format!(
            "[model]\nN = {n}\nbeta_star = {beta:?}\nslow_bonds = [0]\n[sim]\nt_final = {t_final:?}\nsnapshot_dt = {:?}\nreplicas = {replicas}\nseed = {seed}\n[output]\ndir = \"out\"\n[init]\nkind = \"{}\"\n",
            t_final / 4.0,
            if wedge { "narrow_wedge" } else { "bernoulli_half" },
        );
        let c = RunConfig::from_toml_str(&text).unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(c, back);
    }
}
