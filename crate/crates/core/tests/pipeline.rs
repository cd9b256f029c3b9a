use divopt::analysis::{extract_boundaries, Region};
use divopt::grid::{Grid, GridSpec};
use divopt::mc::{simulate_policy, SimConfig};
use divopt::model::{DriftSpec, ModelParams};
use divopt::solver::{
    check_invariants, default_eps_constant, default_penalty, k_continuation, policy_iteration, solve, InvariantTolerances, PolicyField,
    SolverOptions,
};
use divopt::closed_form::solve_auxiliary;
use proptest::prelude::*;

fn small(m: &ModelParams, n: usize) -> Grid {
    Grid::build(GridSpec::default_for(m, n, n), m).unwrap()
}

#[test]
fn regions_agree_with_policy_and_simulation() {
    let m = ModelParams::ou_default();
    let g = small(&m, 60);
    let (v, p, report) = solve(&m, &g, &SolverOptions::default()).unwrap();
    assert!(report.converged());
    let k = default_penalty(&g);
    let b = extract_boundaries(&p, &g, k).unwrap();
    for n in 0..g.len() {
        let (i, j) = g.coords(n);
        if i == 0 || i + 1 == g.nx() {
            continue;
        }
        let retain = p.rates()[n] < 0.5 * k;
        assert_eq!(b.classify_point(g.x(i), g.mu(j)).unwrap() == Region::Retain, retain, "node ({i}, {j})");
    }
    // at a liquidation node the value is the cash itself, in both methods
    let j = 0;
    assert!(g.mu(j) < b.mu_star.unwrap());
    let i = g.nearest_x(0.7);
    let eps_k = default_eps_constant(&m, &g) / k;
    assert!((v.at(&g, i, j) - g.x(i)).abs() <= eps_k, "{} vs {}", v.at(&g, i, j), g.x(i));
    let e = simulate_policy(&m, &b, (g.x(i), g.mu(j)), &SimConfig::new(200, 1e-2, 50.0, 3)).unwrap();
    assert_eq!(e.mean, g.x(i));
}

#[test]
fn continuation_ends_at_the_direct_solution() {
    let m = ModelParams::ou_default();
    let g = small(&m, 40);
    let steps = k_continuation(&m, &g, &[20.0, 200.0, 1000.0], 0.0, 200).unwrap();
    let (v, _, _) = policy_iteration(&m, &g, 1000.0, 0.0, 200, &PolicyField::zeros(g.len())).unwrap();
    let last = &steps.last().unwrap().value;
    assert!(last.sup_distance(&v) < 1e-8, "{}", last.sup_distance(&v));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn invariants_hold_across_parameters(
        sigma in 0.05f64..0.3,
        sigma_tilde in 0.1f64..0.4,
        k in 0.25f64..1.0,
        mu_bar in 0.05f64..0.3,
    ) {
        let m = ModelParams::new(0.05, sigma, 0.0, DriftSpec::OrnsteinUhlenbeck { k, mu_bar, sigma_tilde }).unwrap();
        let g = small(&m, 32);
        let (v, _, report) = solve(&m, &g, &SolverOptions::default()).unwrap();
        prop_assert!(report.converged());
        let aux = solve_auxiliary(&m, g.mus(), None).unwrap();
        let eps_k = default_eps_constant(&m, &g) / default_penalty(&g);
        for c in check_invariants(&g, &v, Some(&aux.values), InvariantTolerances { tol: 1e-8, eps_k }) {
            prop_assert!(c.passed, "{} violated by {} at {:?}", c.name, c.worst, c.node);
        }
    }
}
