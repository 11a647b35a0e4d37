use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use rcbf::dynamics::{ControlAffineModel, SimulationTrace, StatusKind, StepStatus, TraceMeta};
use rcbf::estimator::{error_bound, error_bound_floor, make_gain, output_bound};
use rcbf::filters::{
    cascade_coefficients, hocbf_method2_row, method2_row, nominal_cbf_row, BarrierFunction, ClassK, HocbfCascade,
};
use rcbf::harness::{parse_trace_csv, trace_to_csv};
use rcbf::qp::{certificate_is_valid, kkt_residual, oracle_project, solve, AffineConstraint, QpProblem, QpStatus};
use rcbf::scenarios::acc::acc_defaults;

fn vecs(m: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, m)
}

fn weighted_problem() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..=4, 1usize..=5).prop_flat_map(|(m, k)| {
        (vecs(m, 0.1, 10.0), vecs(m, -5.0, 5.0), prop::collection::vec(vecs(m, -3.0, 3.0), k), vecs(k, -5.0, 5.0))
    })
}

fn build(w: &[f64], r: &[f64], rows: &[Vec<f64>], b: &[f64]) -> QpProblem {
    let mut p = QpProblem::new(DVector::from_column_slice(w), DVector::from_column_slice(r));
    for (i, (a, bi)) in rows.iter().zip(b).enumerate() {
        p = p.with_constraint(AffineConstraint::new(DVector::from_column_slice(a), *bi, format!("r{i}")));
    }
    p
}

/// Linear barrier `h = c . x + d` on a random control-affine model.
fn linear_setup(n: usize, m: usize, seed: &[f64]) -> (ControlAffineModel, BarrierFunction, DVector<f64>) {
    let c = DVector::from_fn(n, |i, _| seed[i % seed.len()] + 0.1 * i as f64);
    let a = DMatrix::from_fn(n, n, |i, j| seed[(i + 2 * j) % seed.len()] * 0.3);
    let g = DMatrix::from_fn(n, m, |i, j| seed[(3 * i + j + 1) % seed.len()]);
    let model = ControlAffineModel::new(
        n,
        m,
        Arc::new(move |x: &DVector<f64>| &a * x),
        Arc::new(move |_x: &DVector<f64>| g.clone()),
    )
    .unwrap();
    let (c1, c2) = (c.clone(), c.clone());
    let barrier = BarrierFunction {
        h: Arc::new(move |x: &DVector<f64>| c1.dot(x) + 0.5),
        grad: Arc::new(move |_x: &DVector<f64>| c2.clone()),
        alpha: ClassK::Linear(1.3),
    };
    let x = DVector::from_fn(n, |i, _| seed[(i + 5) % seed.len()]);
    (model, barrier, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn single_row_qp_matches_projection(
        (w, r, a, b) in (1usize..=4).prop_flat_map(|m| (vecs(m, 0.1, 10.0), vecs(m, -5.0, 5.0), vecs(m, -3.0, 3.0), -10.0..10.0f64))
    ) {
        prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let p = build(&w, &r, &[a], &[b]);
        let s = solve(&p).unwrap();
        prop_assert_eq!(s.status, QpStatus::Optimal);
        let o = oracle_project(&p).unwrap();
        prop_assert!((&s.z - &o).amax() <= 1e-8);
    }

    #[test]
    fn qp_solution_is_feasible_and_stationary_or_certified((w, r, rows, b) in weighted_problem()) {
        let p = build(&w, &r, &rows, &b);
        let s = solve(&p).unwrap();
        match s.status {
            QpStatus::Optimal => {
                // Near-dependent rows give large iterates, so tolerances scale
                // with the magnitudes involved.
                let zmax = s.z.amax();
                let rows = p.rows();
                for c in &rows {
                    let scale = 1.0 + c.a.amax() * zmax + c.b.abs();
                    prop_assert!(c.margin(&s.z) >= -1e-9 * scale, "row {} margin {}", c.label, c.margin(&s.z));
                }
                prop_assert!(s.multipliers.iter().all(|m| *m >= 0.0));
                let mu_scale: f64 = rows.iter().zip(&s.multipliers).map(|(c, m)| m * c.a.amax()).sum();
                let scale = 1.0 + mu_scale * (1.0 + zmax);
                let res = kkt_residual(&p, &rows, &s.z, &s.multipliers);
                prop_assert!(res <= 1e-9 * scale, "kkt {} scale {}", res, scale);
                if scale < 1e3 {
                    prop_assert!(res <= 1e-8);
                }
            }
            QpStatus::Infeasible => {
                let ray = s.certificate.clone().expect("infeasible carries a certificate");
                prop_assert!(certificate_is_valid(&p, &ray, 1e-9));
            }
        }
    }

    #[test]
    fn qp_optimum_beats_feasible_perturbations((w, r, rows, b) in weighted_problem(), dir in vecs(4, -1.0, 1.0)) {
        let p = build(&w, &r, &rows, &b);
        let s = solve(&p).unwrap();
        prop_assume!(s.status == QpStatus::Optimal);
        let m = p.dim();
        let d = DVector::from_fn(m, |i, _| dir[i]);
        for step in [1e-3, 1e-2, 1e-1] {
            let z = &s.z + &d * step;
            if p.rows().iter().all(|c| c.margin(&z) >= 0.0) {
                prop_assert!(p.objective(&z) >= p.objective(&s.z) - 1e-9);
            }
        }
    }

    #[test]
    fn warm_start_does_not_change_answer((w, r, rows, b) in weighted_problem()) {
        let p = build(&w, &r, &rows, &b);
        let cold = solve(&p).unwrap();
        prop_assume!(cold.status == QpStatus::Optimal);
        let warm = rcbf::qp::solve_warm(&p, &cold.active_set).unwrap();
        prop_assert!((&warm.z - &cold.z).amax() <= 1e-9);
    }

    #[test]
    fn bounds_are_nonnegative_and_ordered(
        lambda in vecs(3, 0.5, 200.0),
        dl in 0.0..50.0f64,
        db in 0.0..50.0f64,
        t1 in 0.0..2.0f64,
        dt in 0.0..2.0f64,
    ) {
        let g = make_gain(&lambda, dl).unwrap();
        let (e1, e2) = (error_bound(&g, dl, db, t1).unwrap(), error_bound(&g, dl, db, t1 + dt).unwrap());
        let (o1, o2) = (output_bound(&g, db, t1).unwrap(), output_bound(&g, db, t1 + dt).unwrap());
        prop_assert!(e1 >= 0.0 && o1 >= 0.0);
        prop_assert!(o2 >= o1);
        // The error bound moves monotonically from c * delta_b towards its floor.
        let floor = error_bound_floor(&g, dl);
        let start = g.cond * db;
        if start >= floor { prop_assert!(e2 <= e1 + 1e-12 * start.max(1.0)); } else { prop_assert!(e2 >= e1 - 1e-12 * floor.max(1.0)); }
        prop_assert!(e1 <= start.max(floor) * (1.0 + 1e-12) && e1 >= start.min(floor) * (1.0 - 1e-12));
    }

    #[test]
    fn gain_constants(lambda in vecs(4, 0.1, 500.0), dl in 0.0..30.0f64) {
        let g = make_gain(&lambda, dl).unwrap();
        let lmin = lambda.iter().copied().fold(f64::INFINITY, f64::min);
        let lmax = lambda.iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(g.mu_e, lmin / 4.0);
        prop_assert!((g.p_norm - 1.0 / (2.0 * lmin)).abs() <= 1e-15 / lmin);
        prop_assert!((g.cond - (lmax / lmin).sqrt()).abs() <= 1e-12 * g.cond);
        prop_assert!((g.gamma - dl * dl / (2.0 * lmin)).abs() <= 1e-12 * g.gamma.max(1e-300));
        prop_assert_eq!(error_bound(&g, dl, 7.0, 0.0).unwrap(), g.cond * 7.0);
        prop_assert_eq!(output_bound(&g, 7.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn method2_reduces_to_nominal_exactly(seed in vecs(7, -2.0, 2.0), n in 1usize..=4, m in 1usize..=3, t in 0.0..3.0f64) {
        let (model, barrier, x) = linear_setup(n, m.min(n), &seed);
        let g = make_gain(&vec![10.0; n], 0.0).unwrap();
        let nom = nominal_cbf_row(&model, &barrier, &x).unwrap();
        let red = method2_row(&model, &barrier, &DVector::zeros(n), &g, 0.0, 0.0, &x, t).unwrap();
        prop_assert_eq!(nom.a, red.a);
        prop_assert_eq!(nom.b, red.b);
    }

    #[test]
    fn first_order_cascade_equals_method2(
        seed in vecs(7, -2.0, 2.0),
        n in 1usize..=4,
        d in vecs(4, -3.0, 3.0),
        dl in 0.0..5.0f64,
        db in 0.0..5.0f64,
        t in 0.0..3.0f64,
    ) {
        let (model, barrier, x) = linear_setup(n, 1, &seed);
        let g = make_gain(&vec![7.0; n], dl).unwrap();
        let d_hat = DVector::from_fn(n, |i, _| d[i]);
        let cascade = HocbfCascade::from_barrier(&barrier).unwrap();
        let a = method2_row(&model, &barrier, &d_hat, &g, dl, db, &x, t).unwrap();
        let b = hocbf_method2_row(&model, &cascade, &d_hat, &g, dl, db, &x, t).unwrap();
        prop_assert_eq!(a.a, b.a);
        prop_assert_eq!(a.b, b.b);
    }

    #[test]
    fn robust_row_is_monotone_in_estimate_direction(
        v in 5.0..30.0f64, dist in 10.0..80.0f64, k in 0.0..3.0f64, t in 0.0..1.0f64
    ) {
        // An estimate aligned with the barrier gradient relaxes the row.
        let sc = acc_defaults();
        let model = sc.model();
        let barrier = sc.barrier();
        let g = sc.gain().unwrap();
        let x = DVector::from_vec(vec![v, dist]);
        let grad = (barrier.grad)(&x);
        let base = method2_row(&model, &barrier, &DVector::zeros(2), &g, sc.delta_l, sc.delta_b, &x, t).unwrap();
        let along = method2_row(&model, &barrier, &(&grad * k), &g, sc.delta_l, sc.delta_b, &x, t).unwrap();
        prop_assert!(along.b <= base.b + 1e-12);
    }

    #[test]
    fn cascade_coefficients_match_polynomial_product(gains in vecs(4, 0.1, 5.0), s in -2.0..2.0f64) {
        // phi_k corresponds to prod_{i<k} (s + a_i) evaluated at a point.
        let c = cascade_coefficients(&gains);
        for k in 0..=gains.len() {
            let poly: f64 = c[k].iter().enumerate().map(|(j, cj)| cj * s.powi(j as i32)).sum();
            let prod: f64 = gains[..k].iter().map(|a| s + a).product();
            prop_assert!((poly - prod).abs() <= 1e-10 * (1.0 + prod.abs()));
        }
    }

    #[test]
    fn trace_csv_round_trip_is_bit_exact(
        rows in prop::collection::vec(prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 3), 1..20)
    ) {
        let tr = SimulationTrace {
            columns: vec!["t".into(), "a".into(), "b".into()],
            status: rows.iter().enumerate().map(|(i, _)| if i % 2 == 0 {
                StepStatus { kind: StatusKind::Optimal, active: vec!["clf".into()] }
            } else {
                StepStatus::open()
            }).collect(),
            rows,
            meta: TraceMeta::default(),
        };
        let back = parse_trace_csv(&trace_to_csv(&tr)).unwrap();
        for (r, s) in back.rows.iter().zip(&tr.rows) {
            for (x, y) in r.iter().zip(s) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        prop_assert_eq!(back.status, tr.status);
    }
}
