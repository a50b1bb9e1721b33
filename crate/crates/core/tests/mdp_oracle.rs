//! Grid MDP against brute-force enumeration and structural properties.

use ehopt_core::mdp::{
    build_kernel, evaluate_policy_on_grid, relative_value_iteration, GridPolicy, GridSpec, Kernel, RviOptions,
};
use ehopt_core::sim::EnergyModel;
use ehopt_core::SystemParams;

fn toy() -> Kernel {
    let params = SystemParams {
        tau: 0.5,
        lambda_bar: 1.0,
        alpha_bar: 2.0,
        n_e: 1.0,
        ..SystemParams::default()
    };
    let grid = GridSpec {
        q_max: 2.0,
        n_q: 3,
        n_e: 3,
        n_h: 2,
        n_p: 1,
        energy_model: EnergyModel::Deterministic,
    };
    build_kernel(&grid, &params).unwrap()
}

type Matrix = Vec<Vec<f64>>;

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik != 0.0 {
                for j in 0..n {
                    c[i][j] += aik * b[k][j];
                }
            }
        }
    }
    c
}

/// Per-start long-run average cost: the lazy chain `(I + P)/2` has the same
/// invariant laws and is aperiodic, so repeated squaring reaches the Cesàro limit.
fn gains(kernel: &Kernel, powers: &[f64]) -> Vec<f64> {
    let g = kernel.grid;
    let n = kernel.n_states();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..g.n_q {
        for j in 0..g.n_e {
            let s = i * g.n_e + j;
            p[s][s] += 0.5;
            for h in 0..g.n_h {
                let pw = powers[s * g.n_h + h];
                for ((i2, j2), pr) in kernel.transitions(i, j, h, pw).unwrap() {
                    p[s][i2 * g.n_e + j2] += 0.5 * kernel.h_prob * pr;
                }
            }
        }
    }
    // Renormalize so rounding in the row sums is not raised to the 2^k-th power.
    for _ in 0..64 {
        p = matmul(&p, &p);
        for row in &mut p {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
    (0..n)
        .map(|s| (0..n).map(|t| p[s][t] * kernel.cost(t / g.n_e)).sum())
        .collect()
}

fn distinct_actions(kernel: &Kernel, j: usize) -> Vec<f64> {
    let mut acts: Vec<f64> = kernel.actions(j).to_vec();
    acts.sort_by(f64::total_cmp);
    acts.dedup();
    acts
}

#[test]
fn theta_matches_exhaustive_enumeration() {
    let kernel = toy();
    let g = kernel.grid;
    let choices: Vec<Vec<f64>> = (0..g.n_q)
        .flat_map(|_| (0..g.n_e).flat_map(|j| std::iter::repeat_n(distinct_actions(&kernel, j), g.n_h)))
        .collect();
    let total: usize = choices.iter().map(Vec::len).product();
    assert!(total > 1000, "toy grid too small to be interesting: {total} policies");

    let mut best = vec![f64::INFINITY; kernel.n_states()];
    let mut digits = vec![0usize; choices.len()];
    for _ in 0..total {
        let powers: Vec<f64> = digits.iter().zip(&choices).map(|(&d, c)| c[d]).collect();
        for (b, v) in best.iter_mut().zip(gains(&kernel, &powers)) {
            *b = b.min(v);
        }
        for (d, c) in digits.iter_mut().zip(&choices) {
            *d += 1;
            if *d < c.len() {
                break;
            }
            *d = 0;
        }
    }

    let sol = relative_value_iteration(&kernel, &RviOptions::default()).unwrap();
    assert!(sol.span <= 1e-6);
    for (s, b) in best.iter().enumerate() {
        assert!((b - sol.theta_star).abs() < 1e-8, "state {s}: brute force {b} vs rvi {}", sol.theta_star);
    }
    let own = gains(&kernel, &sol.powers);
    for v in own {
        assert!((v - sol.theta_star).abs() < 1e-8);
    }
}

#[test]
fn grid_evaluation_matches_enumerated_gain() {
    let kernel = toy();
    let g = kernel.grid;
    // A few fixed unichain rules: full spend, spend only on the good channel, spend
    // only when the queue is non-empty.
    let rules: Vec<Box<dyn Fn(usize, usize, usize) -> f64>> = vec![
        Box::new(|_, j, _| kernel.e_level(j) / kernel.params.tau),
        Box::new(|_, j, h| if h == 1 { kernel.e_level(j) / kernel.params.tau } else { 0.0 }),
        Box::new(|i, j, _| if i > 0 { kernel.e_level(j) / kernel.params.tau } else { 0.0 }),
    ];
    for rule in &rules {
        let mut powers = Vec::new();
        for i in 0..g.n_q {
            for j in 0..g.n_e {
                for h in 0..g.n_h {
                    powers.push(rule(i, j, h));
                }
            }
        }
        let oracle = gains(&kernel, &powers);
        let spread = oracle.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - oracle.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-10, "rule is not unichain");
        let eval = evaluate_policy_on_grid(&kernel, &GridPolicy { powers }, &RviOptions::default()).unwrap();
        assert!((eval.average_cost - oracle[0]).abs() < 1e-8, "{} vs {}", eval.average_cost, oracle[0]);
        assert!((eval.stationary_cost - oracle[0]).abs() < 1e-8);
    }
}

fn medium(n_e: f64) -> Kernel {
    let params = SystemParams {
        tau: 0.1,
        lambda_bar: 0.3,
        alpha_bar: 1.0,
        n_e,
        ..SystemParams::default()
    };
    let grid = GridSpec {
        q_max: 12.0,
        n_q: 36,
        n_e: 12,
        n_h: 4,
        n_p: 6,
        energy_model: EnergyModel::Poisson { quantum: 0.5 },
    };
    build_kernel(&grid, &params).unwrap()
}

#[test]
fn optimal_policy_structure() {
    let kernel = medium(0.4);
    let g = kernel.grid;
    let sol = relative_value_iteration(&kernel, &RviOptions::default()).unwrap();
    assert!(sol.span <= 1e-6);
    for i in 0..g.n_q {
        for j in 0..g.n_e {
            if i + 1 < g.n_q {
                assert!(
                    sol.value(&kernel, i + 1, j) >= sol.value(&kernel, i, j) - 1e-9,
                    "v not monotone in q at ({i}, {j})"
                );
            }
            for h in 0..g.n_h {
                let p = sol.power(&kernel, i, j, h);
                assert!(p >= 0.0 && p * kernel.params.tau <= kernel.e_level(j) * (1.0 + 1e-12));
            }
        }
    }
    let eval = evaluate_policy_on_grid(&kernel, &GridPolicy { powers: sol.powers.clone() }, &RviOptions::default())
        .unwrap();
    assert!((eval.average_cost - sol.theta_star).abs() <= 1e-6);
}

#[test]
fn theta_nonincreasing_in_storage() {
    let thetas: Vec<f64> = [0.2, 0.4, 0.8]
        .iter()
        .map(|&n_e| {
            relative_value_iteration(&medium(n_e), &RviOptions::default())
                .unwrap()
                .theta_star
        })
        .collect();
    assert!(thetas[1] <= thetas[0] + 1e-9 && thetas[2] <= thetas[1] + 1e-9, "{thetas:?}");
}

#[test]
fn never_serving_saturates_at_the_boundary() {
    let kernel = medium(0.4);
    let policy = GridPolicy::from_fn(&kernel, |_| 0.0);
    let eval = evaluate_policy_on_grid(&kernel, &policy, &RviOptions::default()).unwrap();
    assert!(eval.boundary_mass > 0.5, "{eval:?}");
    assert!(eval.warning.is_some());
}
