use std::f64::consts::TAU;

use proptest::prelude::*;

use straycal_core::gmm::{responsibilities, GaussianComponent, GmmParams};
use straycal_core::pso::{init_swarm, step_swarm, Bound, PsoConfig};
use straycal_core::signal::{
    correct_samples, depth_to_phase, phase_to_depth, raw_amplitude, raw_phase, stray_samples, wrap_phase,
    CorrelationSamples, ModulationConfig, SignalComponent, StrayParams,
};

fn cfg() -> ModulationConfig {
    ModulationConfig::default()
}

proptest! {
    #[test]
    fn wrapped_phase_in_range(p in -1e3f64..1e3) {
        let w = wrap_phase(p);
        prop_assert!((0.0..TAU).contains(&w));
        let k = ((p - w) / TAU).round();
        prop_assert!((p - w - k * TAU).abs() < 1e-9);
    }

    #[test]
    fn synthesized_phasor_inverts(a in 1e-3f64..5.0, phi in 0.0f64..TAU) {
        let cfg = cfg();
        let s = CorrelationSamples::synthesize(&SignalComponent::new(a, phi, 0.0).unwrap(), &cfg);
        prop_assert!((raw_amplitude(&s) - a * cfg.correlation_gain()).abs() < 1e-12 * a.max(1.0));
        let gap = (raw_phase(&s).unwrap() - phi).rem_euclid(TAU);
        prop_assert!(gap.min(TAU - gap) < 1e-9);
    }

    #[test]
    fn depth_phase_round_trip(d in 0.0f64..4.79) {
        let cfg = cfg();
        prop_assert!((phase_to_depth(depth_to_phase(d, &cfg).unwrap(), &cfg) - d).abs() < 1e-12);
    }

    #[test]
    fn correction_undoes_stray(a in 0.0f64..1.0, phi in 0.0f64..TAU, sa in 0.0f64..1.0, sphi in 0.0f64..TAU) {
        let cfg = cfg();
        let stray = StrayParams::new(sa, sphi).unwrap();
        let clean = CorrelationSamples::synthesize(&SignalComponent::new(a, phi, 0.0).unwrap(), &cfg);
        let raw = clean + stray_samples(&stray, &cfg);
        let back = correct_samples(&raw, &stray, &cfg);
        for n in 0..4 {
            prop_assert!((back.0[n] - clean.0[n]).abs() < 1e-12);
        }
    }

    #[test]
    fn responsibilities_normalized(
        w in 0.01f64..0.99,
        m0 in -1.0f64..1.0,
        gap in 0.0f64..2.0,
        s0 in 1e-3f64..1.0,
        s1 in 1e-3f64..1.0,
        x in -50.0f64..50.0,
    ) {
        let p = GmmParams::new(
            GaussianComponent { weight: w, mean: m0, std_dev: s0 },
            GaussianComponent { weight: 1.0 - w, mean: m0 + gap, std_dev: s1 },
        ).unwrap();
        let r = responsibilities(&p, x);
        prop_assert!(r.gamma.iter().all(|g| (0.0..=1.0).contains(g)));
        prop_assert!((r.gamma[0] + r.gamma[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn swarm_stays_in_bounds(seed in any::<u64>(), amax in 1e-3f64..10.0) {
        let bounds = [Bound::clamp(0.0, amax), Bound::wrap(0.0, TAU)];
        let cfg = PsoConfig { seed, particle_count: 8, ..PsoConfig::default() };
        let loss = |p: &[f64; 2]| (p[0] - 0.3 * amax).abs() + (1.0 - (p[1] - 2.0).cos());
        let mut s = init_swarm(&loss, &bounds, &cfg).unwrap();
        for _ in 0..15 {
            s = step_swarm(s, &loss, &bounds, &cfg).unwrap();
            for p in &s.particles {
                prop_assert!(bounds[0].contains(p.position[0]) && bounds[1].contains(p.position[1]));
            }
            let best = s.particles.iter().map(|p| p.best_loss).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(best, s.global_best_loss);
        }
        prop_assert!(s.loss_history.windows(2).all(|w| w[1] <= w[0]));
    }
}
