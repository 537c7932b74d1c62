use proptest::prelude::*;
use reloadsim::clock::Micros;
use reloadsim::coherence::{active_rates, CoherenceConfig, EnvFlags};
use reloadsim::config::RunConfig;
use reloadsim::experiments::replenishment_requirement;
use reloadsim::layout::ZoneLayout;
use reloadsim::storage::steady_state_population;

#[test]
fn shielding_never_hurts_and_q0_relaxes_slower() {
    let cfg = CoherenceConfig::default();
    for env in EnvFlags::all() {
        let r = active_rates(env, &cfg).unwrap();
        assert!(r.t1_q0() > r.t1_q1(), "{env:?}");
        if !env.shielding_on {
            let s = active_rates(
                EnvFlags {
                    shielding_on: true,
                    ..env
                },
                &cfg,
            )
            .unwrap();
            assert!(s.t2() >= r.t2() && s.t1_q1() >= r.t1_q1(), "{env:?}");
        }
    }
}

#[test]
fn named_conditions_reproduce_configured_times() {
    let cfg = CoherenceConfig::default();
    let t2 = |e| active_rates(e, &cfg).unwrap().t2();
    let t1 = |e| active_rates(e, &cfg).unwrap().t1_q1();
    assert!((t2(EnvFlags::REFERENCE) - cfg.t2_reference).abs() < 1e-12);
    assert!((t2(EnvFlags::MOT) - cfg.t2_mot).abs() < 1e-12);
    assert!((t2(EnvFlags::SHIELDED) - cfg.t2_shielded_prep).abs() < 1e-12);
    assert!((t2(EnvFlags::UNSHIELDED) - cfg.t2_unshielded_prep).abs() < 1e-12);
    assert!((t1(EnvFlags::REFERENCE) - cfg.t1_ref_q1).abs() < 1e-9);
    assert!((t1(EnvFlags::SHIELDED) - cfg.t1_shielded_q1).abs() < 1e-9);
}

proptest! {
    #[test]
    fn steady_state_grows_with_lifetime(fill in 0.5f64..1.0, tau in 1.0f64..500.0, k in 1.01f64..3.0) {
        let l = ZoneLayout::default();
        let p = Micros::from_ms(80);
        let a = steady_state_population(&l, fill, p, tau);
        let b = steady_state_population(&l, fill, p, tau * k);
        prop_assert!(b > a);
        prop_assert!(b < l.storage_sites() as f64 * fill);
    }

    #[test]
    fn replenishment_is_linear(n in 1.0f64..1e6, t in 1e-6f64..1.0, p in 0.0f64..1.0, k in 1.0f64..10.0) {
        let a = replenishment_requirement(n, t, p).unwrap();
        let b = replenishment_requirement(n * k, t, p).unwrap();
        prop_assert!((b - k * a).abs() <= 1e-9 * b.abs().max(1.0));
    }

    #[test]
    fn config_round_trip_for_any_seed(seed in 0u64..i64::MAX as u64, trials in 0usize..1000) {
        let cfg = RunConfig { seed, trials, ..RunConfig::default() };
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
