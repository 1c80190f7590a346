use ccflow::cost::{excess_revenue, tracking_cost, undersupply_cost};
use ccflow::demand::{MeanLevel, OuProcess};
use ccflow::fptd::{solve_volterra, Boundary};
use ccflow::ControlGrid;
use proptest::prelude::*;

fn process(kappa: f64, sigma: f64, y0: f64) -> OuProcess {
    OuProcess::new(0.0, y0, kappa, sigma, MeanLevel::sinusoidal(1.0, 0.5, 0.3, 0.2)).unwrap()
}

proptest! {
    #[test]
    fn excess_and_undersupply_split_the_mean_gap(
        kappa in 0.1f64..5.0,
        sigma in 0.01f64..1.0,
        y0 in 0.0f64..2.0,
        t in 0.01f64..10.0,
        supply in -1.0f64..3.0,
    ) {
        let p = process(kappa, sigma, y0);
        let gap = supply - p.mean(t).unwrap();
        let ex = excess_revenue(&p, t, supply).unwrap();
        let un = undersupply_cost(&p, t, supply).unwrap();
        prop_assert!(ex >= 0.0 && un <= 0.0);
        prop_assert!((ex + un - gap).abs() <= 1e-10 * (1.0 + gap.abs()));
        let track = tracking_cost(&p, t, supply).unwrap();
        let expected = gap * gap + p.variance(t).unwrap();
        prop_assert!((track - expected).abs() <= 1e-10 * (1.0 + expected));
    }

    #[test]
    fn quantile_grows_as_the_risk_level_shrinks(
        kappa in 0.1f64..5.0,
        sigma in 0.01f64..1.0,
        t in 0.01f64..10.0,
        lo in 0.001f64..0.49,
        gap in 0.001f64..0.5,
    ) {
        let p = process(kappa, sigma, 1.0);
        let tight = p.quantile(t, lo).unwrap();
        let loose = p.quantile(t, lo + gap).unwrap();
        prop_assert!(tight > loose);
        prop_assert!(loose > p.mean(t).unwrap() - 1e-12 || lo + gap > 0.5);
    }

    #[test]
    fn projection_is_idempotent_and_in_bounds(
        values in prop::collection::vec(-5.0f64..5.0, 8),
        upper in 0.5f64..3.0,
    ) {
        let mut g = ControlGrid::uniform(0.0, 1.0, 0.25, 1.0, Some(0.0)).unwrap();
        g.inflow_max = Some(upper);
        let mut x = values.clone();
        g.project(&mut x);
        prop_assert!(x.iter().zip(g.flat_upper()).all(|(v, u)| *v >= 0.0 && *v <= u));
        let mut again = x.clone();
        g.project(&mut again);
        prop_assert_eq!(&again, &x);
        g.set_flat(&x);
        prop_assert_eq!(g.flatten(), x);
    }

    #[test]
    fn first_passage_cdf_is_a_distribution(offset in 0.05f64..0.5, slope in 0.0f64..0.2) {
        let p = process(1.0, 0.2, 1.0);
        let b = Boundary::mean_offset(&p, offset, slope);
        let res = solve_volterra(&p, &b, 0.01, 2.0).unwrap();
        prop_assert!(res.cdf.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        prop_assert!(res.risk >= 0.0 && res.risk <= 1.0);
    }
}
