use ccflow::fptd::{risk_level, solve_volterra, Boundary};
use ccflow::scenario::Scenario;

#[test]
fn table_boundary_is_feasible_only_for_loose_levels() {
    let s = Scenario::bundled("table1").unwrap();
    let spec = s.fptd.unwrap();
    let b = s.fptd_boundary().unwrap();
    let (risk, ok) = risk_level(&s.demand, &b, 60.0, spec.t_end, 0.15).unwrap();
    assert!(ok, "risk {risk}");
    let (_, ok) = risk_level(&s.demand, &b, 60.0, spec.t_end, 0.10).unwrap();
    assert!(!ok);
}

#[test]
fn far_boundary_is_never_reached() {
    let s = Scenario::bundled("table1").unwrap();
    let spec = s.fptd.unwrap();
    let b = Boundary::mean_offset(&s.demand, 50.0, 0.0);
    let res = solve_volterra(&s.demand, &b, 60.0, spec.t_end).unwrap();
    assert!(res.risk < 1e-6, "{}", res.risk);
}

#[test]
fn risk_level_rejects_bad_levels() {
    let s = Scenario::bundled("table1").unwrap();
    let b = s.fptd_boundary().unwrap();
    for theta in [0.0, 1.0, -0.2, f64::NAN] {
        assert!(risk_level(&s.demand, &b, 60.0, 600.0, theta).is_err());
    }
}
