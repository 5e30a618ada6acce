use nlmarkov_core::dynamics::integrate_ode;
use nlmarkov_core::finite_n::{
    build_lattice_chain, evolve_distribution, gillespie_simulate, product_form_law,
    stationary_of_chain, InitialCondition, LatticeDistribution,
};
use nlmarkov_core::models::build_model;
use nlmarkov_core::{ModelSpec, SimplexPoint};

#[test]
fn simulated_means_match_the_exact_forward_equation() {
    let m = build_model(&ModelSpec::curie_weiss(1.5)).unwrap();
    let n = 40;
    let t = 1.0;
    let chain = build_lattice_chain(&m, n).unwrap();
    let q = SimplexPoint::new(vec![0.7, 0.3]).unwrap();
    let u0 = product_form_law(&chain, &q);
    let ut = evolve_distribution(&chain, &u0, t, 0.1 / chain.max_exit_rate()).unwrap();
    let exact = ut.mean(&chain)[0];
    let exact_sq: f64 = (0..chain.len())
        .map(|i| ut.mass[i] * chain.point(i)[0].powi(2))
        .sum();
    let sd = (exact_sq - exact * exact).sqrt();

    let replicas = 2000;
    let init = InitialCondition::Iid {
        q: q.weights().to_vec(),
    };
    let sum: f64 = (0..replicas)
        .map(|k| {
            gillespie_simulate(&m, n, &init, t, 99, k)
                .unwrap()
                .at_time(t)[0]
        })
        .sum();
    let mc = sum / replicas as f64;
    let se = sd / (replicas as f64).sqrt();
    assert!(
        (mc - exact).abs() < 4.0 * se,
        "mc {mc} exact {exact} se {se}"
    );
}

#[test]
fn exact_law_concentrates_on_the_ode_solution() {
    let m = build_model(&ModelSpec::curie_weiss(0.5)).unwrap();
    let p0 = SimplexPoint::new(vec![0.2, 0.8]).unwrap();
    let ode = integrate_ode(&m, &p0, 2.0, 1e-3).unwrap();
    let mut errors = Vec::new();
    for n in [20usize, 80] {
        let chain = build_lattice_chain(&m, n).unwrap();
        let u0 = LatticeDistribution::point_mass(&chain, &p0);
        let ut = evolve_distribution(&chain, &u0, 2.0, 0.1 / chain.max_exit_rate()).unwrap();
        let mean = ut.mean(&chain);
        errors.push((mean[0] - ode.final_point()[0]).abs());
    }
    assert!(errors[1] < errors[0]);
}

#[test]
fn stationary_law_is_invariant_under_evolution() {
    let spec: ModelSpec = serde_json::from_str(
        r#"{"variant":"ThreeStateB","params":{"a1":1.0,"a2":2.0,"b2":1.5,"b3":0.5,"kappa":1.0,"c":[0.3,1.0,1.0]}}"#,
    )
    .unwrap();
    let m = build_model(&spec).unwrap();
    let chain = build_lattice_chain(&m, 12).unwrap();
    let st = stationary_of_chain(&chain).unwrap();
    let later = evolve_distribution(&chain, &st, 3.0, 0.1 / chain.max_exit_rate()).unwrap();
    let diff: f64 = st
        .mass
        .iter()
        .zip(&later.mass)
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff < 1e-10);
}
