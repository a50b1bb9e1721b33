//! Slot simulator: recursions, sampling laws, determinism and stability probes.

use ehopt_core::policies::{Policy, PolicyKind, PolicyOptions};
use ehopt_core::sim::{
    run_simulation, run_with_policy, sample_channel, stability_probe, step, ArrivalProcess, EnergyModel, SimConfig,
    SimError, StabilityVerdict,
};
use ehopt_core::{SystemParams, SystemState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn base() -> SystemParams {
    SystemParams {
        n_e: 50.0,
        ..SystemParams::default()
    }
}

#[test]
fn step_examples() {
    let p = base();
    let s = SystemState::new(1.3, 4.0, 2.0);
    let idle = step(&s, 0.0, 0.0, 10.0, &p).unwrap();
    assert_eq!(idle.q, 4.0);
    assert_eq!(idle.e, 3.0);

    // Service exceeds the backlog: the queue empties, then arrivals land.
    let small = SystemState::new(1.0, 0.01, 2.0);
    let next = step(&small, 20.0, 1.5, 0.0, &p).unwrap();
    assert!((next.q - 0.15).abs() < 1e-15);

    let full = SystemState::new(1.0, 0.0, 49.9);
    assert_eq!(step(&full, 0.0, 0.0, 10.0, &p).unwrap().e, 50.0);

    let err = step(&SystemState::new(1.0, 1.0, 0.5), 6.0, 0.0, 0.0, &p).unwrap_err();
    assert_eq!(err.e, 0.5);
}

#[test]
fn channel_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 1_000_000;
    let (mut sum, mut below) = (0.0, 0usize);
    for _ in 0..n {
        let g = sample_channel(&mut rng);
        assert!(g >= 0.0);
        sum += g;
        below += usize::from(g <= 1.0);
    }
    assert!((sum / n as f64 - 1.0).abs() < 0.005);
    let cdf = below as f64 / n as f64;
    assert!((cdf - (1.0 - (-1.0f64).exp())).abs() < 0.005, "{cdf}");
}

#[test]
fn arrival_laws() {
    let p = SystemParams {
        block_len: 50,
        ..base()
    };
    let mut arr = ArrivalProcess::new(&p, &EnergyModel::default(), 8);
    let n = 1_000_000;
    let mut sum = 0.0;
    let mut alpha_sum = 0.0;
    let mut prev_alpha = f64::NAN;
    for k in 0..n {
        let (lambda, alpha) = arr.next_arrivals();
        sum += lambda;
        alpha_sum += alpha;
        if k % 50 != 0 {
            assert_eq!(alpha, prev_alpha, "harvest changed inside a block at slot {k}");
        }
        prev_alpha = alpha;
    }
    let mean = sum / n as f64;
    assert!((mean - p.lambda_bar).abs() < 0.01 * p.lambda_bar, "{mean}");
    assert!((alpha_sum / n as f64 - p.alpha_bar).abs() < 0.02 * p.alpha_bar);

    let mut iid = ArrivalProcess::new(&base(), &EnergyModel::default(), 8);
    let draws: Vec<f64> = (0..1000).map(|_| iid.next_arrivals().1).collect();
    assert!(draws.windows(2).filter(|w| w[0] != w[1]).count() > 500);
}

#[test]
fn fixed_seed_is_bit_identical() {
    for kind in [PolicyKind::ClosedForm, PolicyKind::Greedy, PolicyKind::CsiWf, PolicyKind::Qwwf] {
        let cfg = SimConfig::new(base(), kind, 50_000, 17);
        let a = run_simulation(&cfg).unwrap();
        let b = run_simulation(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.avg_queue.to_bits(), b.avg_queue.to_bits());
        assert_eq!(a.avg_delay * cfg.params.lambda_bar, a.avg_queue);
        let other = run_simulation(&SimConfig { seed: 18, ..cfg }).unwrap();
        assert_ne!(a.avg_queue, other.avg_queue);
    }
}

#[test]
fn idle_link_has_no_delay() {
    let p = SystemParams {
        lambda_bar: 0.0,
        ..base()
    };
    let m = run_simulation(&SimConfig::new(p, PolicyKind::Greedy, 20_000, 1)).unwrap();
    assert_eq!(m.avg_delay, 0.0);
    assert_eq!(m.q2_mean, 0.0);
    let probe = stability_probe(&SimConfig::new(p, PolicyKind::Greedy, 20_000, 1), &[10_000, 20_000]).unwrap();
    assert!(probe.checkpoints.iter().all(|&(_, v)| v == 0.0));
    assert_eq!(probe.verdict, StabilityVerdict::Plateau);
}

#[test]
fn silent_policy_queue_grows_linearly() {
    let p = base();
    let horizon = 100_000u64;
    let cfg = SimConfig {
        policy: PolicyKind::Constant,
        warmup: 0,
        ..SimConfig::new(p, PolicyKind::Constant, horizon, 4)
    };
    let m = run_simulation(&cfg).unwrap();
    let want = p.lambda_bar * p.tau * (horizon - 1) as f64 / 2.0;
    assert!((m.avg_queue - want).abs() < 0.01 * want, "{} vs {want}", m.avg_queue);
    assert_eq!(m.avg_power, 0.0);
}

#[test]
fn trace_respects_bounds_for_every_policy() {
    let sets = [base(), SystemParams { lambda_bar: 0.3, alpha_bar: 1.0, n_e: 5.0, ..base() }];
    let mut slots = 0usize;
    for p in sets {
        for kind in [PolicyKind::ClosedForm, PolicyKind::Greedy, PolicyKind::CsiWf, PolicyKind::Qwwf] {
            let cfg = SimConfig::new(p, kind, 1_250_000, 9);
            let policy = Policy::build(kind, &p, &PolicyOptions::default(), None).unwrap();
            let mut trace = Vec::new();
            run_with_policy(&cfg, policy, Some(&mut trace)).unwrap();
            for row in &trace {
                assert!(row.q >= 0.0 && row.e >= 0.0 && row.e <= p.n_e, "{kind}: {row:?}");
                assert!(row.p >= 0.0 && row.p * p.tau <= row.e * (1.0 + 1e-12), "{kind}: {row:?}");
            }
            slots += trace.len();
        }
    }
    assert!(slots >= 10_000_000);
}

#[test]
fn greedy_diverges_above_the_rate_bound() {
    let p = SystemParams {
        lambda_bar: 2.3,
        ..base()
    };
    let cfg = SimConfig::new(p, PolicyKind::Greedy, 400_000, 2);
    let checkpoints: Vec<u64> = (1..=10).map(|k| cfg.warmup + k * (cfg.horizon - cfg.warmup) / 10).collect();
    let probe = stability_probe(&cfg, &checkpoints).unwrap();
    assert_eq!(probe.verdict, StabilityVerdict::Diverging, "{probe:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    let cfg = SimConfig {
        warmup: 10,
        ..SimConfig::new(base(), PolicyKind::Greedy, 10, 1)
    };
    assert!(matches!(run_simulation(&cfg), Err(SimError::Config(_))));
    let table = SimConfig::new(base(), PolicyKind::MdpTable, 100, 1);
    assert!(matches!(run_simulation(&table), Err(SimError::Policy(_))));
}
