use nlmarkov_core::dynamics::{find_fixed_points, integrate_ode, Classification};
use nlmarkov_core::hamiltonian::{hamiltonian_h, subsolution_check, Verdict};
use nlmarkov_core::lyapunov::{descent_check, LyapunovCandidate};
use nlmarkov_core::models::build_model;
use nlmarkov_core::{simplex, ModelSpec, SimplexPoint};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn specs() -> Vec<ModelSpec> {
    let docs = [
        r#"{"variant":"GibbsAffine","params":{"V":[0.0,0.3,-0.2],"W":[[0.0,1.0,0.5],[1.0,0.0,0.2],[0.5,0.2,0.0]],"beta":0.8}}"#,
        r#"{"variant":"BirthDeathPhiPsi","params":{"psi":["1 + r1","2 - r3"],"phi":["1 + w","1 + 2*w","0.5 + w"]}}"#,
        r#"{"variant":"MetropolisGGibbs","params":{"K":["r2","r1 + 0.5*r3","0.3*r1*r2"],"R":["log(1 + w)","w","0.5"]}}"#,
        r#"{"variant":"ThreeStateB","params":{"a1":1.0,"a2":2.0,"b2":1.5,"b3":0.5,"kappa":1.0,"c":[0.3,1.0,1.0]}}"#,
        r#"{"variant":"NearestNeighborCost","params":{"a":["1 + w","2"],"b":["1.5","1 + w^2"]}}"#,
        r#"{"variant":"Telecom","params":{"C":3,"lambda":[1.0,0.5],"mu":[1.0,2.0],"gamma":[0.5,0.3],"A":[1,1]}}"#,
    ];
    docs.iter()
        .map(|d| serde_json::from_str(d).unwrap())
        .collect()
}

#[test]
fn configs_round_trip_through_json() {
    for spec in specs() {
        let text = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}

#[test]
fn locally_gibbs_candidates_solve_the_stationary_equation_and_decrease() {
    for spec in specs() {
        let m = build_model(&spec).unwrap();
        let j = LyapunovCandidate::locally_gibbs(&m).unwrap();
        let grid = simplex::interior_grid_with_at_least(m.dim(), 60, 0.02).unwrap();
        let rep = subsolution_check(&m, &j, &grid).unwrap();
        assert_eq!(rep.verdict, Verdict::Solution, "{}", m.label());

        let search = find_fixed_points(&m, 6, 11).unwrap();
        assert!(!search.reports.is_empty(), "{}", m.label());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = simplex::random_interior(m.dim(), 0.05, &mut rng);
        let traj = integrate_ode(&m, &start, 20.0, 1e-2).unwrap();
        let limit = traj.final_point().clone();
        let near = search
            .reports
            .iter()
            .find(|r| r.point.l1_distance(&limit) < 1e-4);
        let near = near.unwrap_or_else(|| {
            panic!("{}: trajectory limit is not a found fixed point", m.label())
        });
        assert_eq!(near.classification, Classification::Stable, "{}", m.label());
        let report = descent_check(&j, &m, &traj, &near.point, 1e-3);
        assert_eq!(report.violations, 0, "{}", m.label());
    }
}

#[test]
fn hamiltonian_vanishes_at_zero_and_is_below_the_linearisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for spec in specs() {
        let m = build_model(&spec).unwrap();
        let d = m.dim();
        for _ in 0..10 {
            let r = simplex::random_interior(d, 0.02, &mut rng);
            assert_eq!(hamiltonian_h(&m, &r, &vec![0.0; d]).unwrap(), 0.0);
            let dir = simplex::random_tangent_direction(d, &mut rng);
            let flow = m.vector_field_at(r.weights());
            let lin = simplex::dot(&dir, &flow);
            assert!(hamiltonian_h(&m, &r, &dir).unwrap() < lin);
        }
    }
}

#[test]
fn uniform_point_is_fixed_for_symmetric_interactions() {
    let m = build_model(&ModelSpec::curie_weiss(3.0)).unwrap();
    let u = SimplexPoint::uniform(2);
    let traj = integrate_ode(&m, &u, 5.0, 1e-2).unwrap();
    assert!(traj.final_point().l1_distance(&u) < 1e-12);
}
