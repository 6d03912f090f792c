use eigenpinn::netcalc::Collocation;
use eigenpinn::oracle::upper_bound_curve;
use eigenpinn::residual::{assemble_loss, loss_and_gradient, mu_schedule};
use eigenpinn::scan::{detect_minima_in, make_grid};
use eigenpinn::{Domain, MlpParams, OperatorSpec, Potential};
use proptest::prelude::*;

fn domains() -> impl Strategy<Value = Domain> {
    prop_oneof![
        (1usize..=4, 0.3f64..3.0).prop_map(|(dim, radius)| Domain::Ball { dim, radius }),
        prop::collection::vec((-2.0f64..1.0, 0.2f64..2.0), 1..=3).prop_map(|b| Domain::Rectangle {
            bounds: b.into_iter().map(|(a, w)| [a, a + w]).collect()
        }),
        (0.1f64..0.8, 0.2f64..1.0).prop_map(|(inner, gap)| Domain::Annulus {
            inner,
            outer: inner + gap
        }),
        Just(Domain::Triangle {
            vertices: [[0.0, 0.0], [1.0, 0.2], [0.4, 1.1]]
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn minima_are_strict_interior_and_below_threshold(
        values in prop::collection::vec(prop_oneof![0.0f64..2.0, Just(f64::INFINITY)], 0..40),
        threshold in 0.01f64..2.0,
    ) {
        let found = detect_minima_in(&values, threshold);
        for &i in &found {
            prop_assert!(i > 0 && i + 1 < values.len());
            prop_assert!(values[i] < values[i - 1] && values[i] <= values[i + 1]);
            prop_assert!(values[i] < threshold);
        }
        prop_assert!(found.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn raising_the_threshold_keeps_every_minimum(
        values in prop::collection::vec(0.0f64..2.0, 0..40),
        a in 0.01f64..2.0,
        b in 0.01f64..2.0,
    ) {
        let (lo, hi) = (a.min(b), a.max(b));
        let strict = detect_minima_in(&values, lo);
        let loose = detect_minima_in(&values, hi);
        prop_assert!(strict.iter().all(|i| loose.contains(i)));
    }

    #[test]
    fn grids_are_uniform_with_exact_ends(lo in -50.0f64..50.0, width in 0.1f64..100.0, j in 2usize..300) {
        let hi = lo + width;
        let g = make_grid(lo, hi, j).unwrap();
        prop_assert_eq!(g.len(), j);
        prop_assert_eq!(g[0], lo);
        prop_assert_eq!(g[j - 1], hi);
        let h = width / (j - 1) as f64;
        for w in g.windows(2) {
            prop_assert!(((w[1] - w[0]) - h).abs() <= 1e-9 * h.max(1.0));
        }
    }

    #[test]
    fn upper_bound_vanishes_on_the_spectrum(
        mut spec in prop::collection::vec(1.0f64..60.0, 1..8),
        extra in prop::collection::vec(0.0f64..70.0, 0..20),
    ) {
        spec.sort_by(f64::total_cmp);
        let mut grid = spec.clone();
        grid.extend(extra);
        let ub = upper_bound_curve(&spec, &grid).unwrap();
        for (i, &(e, u)) in ub.points.iter().enumerate() {
            prop_assert!(u >= 0.0);
            if i < spec.len() {
                prop_assert_eq!(u, 0.0);
            }
            let gap = spec.iter().map(|k| (k - e).abs()).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(u, gap * gap);
        }
    }

    #[test]
    fn samples_lie_inside(domain in domains(), seed in any::<u64>()) {
        let batch = domain.sample_interior(64, seed).unwrap();
        for x in batch.iter() {
            prop_assert!(domain.contains(x).unwrap());
        }
        prop_assert_eq!(batch, domain.sample_interior(64, seed).unwrap());
    }

    #[test]
    fn boundary_factor_vanishes_on_the_boundary(
        domain in domains(),
        t in prop::collection::vec(0.0f64..1.0, 5),
    ) {
        let x = domain.boundary_point(&t[..domain.dim() + 1]);
        let scale: f64 = domain.bounding_box().iter().map(|[a, b]| b - a).fold(0.0, f64::max);
        prop_assert!(domain.boundary_factor(&x).value.abs() <= 1e-12 * scale.powi(2).max(1.0));
    }

    #[test]
    fn p_two_is_the_linear_path_bit_for_bit(
        domain in domains(),
        seed in any::<u64>(),
        energy in 0.5f64..40.0,
    ) {
        let d = domain.dim();
        let params = MlpParams::init(&[d, 5, 4, 1], seed).unwrap();
        let colloc = Collocation::new(&domain, domain.sample_interior(40, seed ^ 1).unwrap()).unwrap();
        let linear = OperatorSpec::Linear { potential: Potential::Zero };
        let p2 = OperatorSpec::PLaplace { p: 2.0, grad_floor: 1e-8 };
        let a = assemble_loss(&params, &colloc, &linear, energy, 100.0, &domain).unwrap();
        let b = assemble_loss(&params, &colloc, &p2, energy, 100.0, &domain).unwrap();
        prop_assert_eq!(a, b);
        let mu = mu_schedule(100.0, energy);
        let (la, ga) = loss_and_gradient(&params, &colloc, &linear, energy, mu, domain.volume()).unwrap();
        let (lb, gb) = loss_and_gradient(&params, &colloc, &p2, energy, mu, domain.volume()).unwrap();
        prop_assert_eq!(la, lb);
        prop_assert_eq!(ga.as_slice(), gb.as_slice());
    }

    #[test]
    fn negating_the_network_leaves_the_loss_unchanged(
        domain in domains(),
        seed in any::<u64>(),
        energy in 0.5f64..40.0,
        p in prop_oneof![Just(2.0), 1.5f64..3.0],
    ) {
        let d = domain.dim();
        let op = if d == 2 {
            OperatorSpec::PLaplace { p, grad_floor: 1e-8 }
        } else {
            OperatorSpec::laplacian()
        };
        let params = MlpParams::init(&[d, 4, 3, 1], seed).unwrap();
        let mut neg = params.clone();
        for w in neg.output_weights_mut() {
            *w = -*w;
        }
        *neg.output_bias_mut() = -*neg.output_bias_mut();
        let colloc = Collocation::new(&domain, domain.sample_interior(32, seed).unwrap()).unwrap();
        let a = assemble_loss(&params, &colloc, &op, energy, 100.0, &domain).unwrap();
        let b = assemble_loss(&neg, &colloc, &op, energy, 100.0, &domain).unwrap();
        prop_assert!((a.total - b.total).abs() <= 1e-12 * a.total.abs().max(1.0));
    }

    #[test]
    fn snapshots_round_trip(dims in (1usize..4, 1usize..9, 1usize..9), seed in any::<u64>()) {
        let p = MlpParams::init(&[dims.0, dims.1, dims.2, 1], seed).unwrap();
        let back = MlpParams::from_snapshot_bytes(&p.to_snapshot_bytes()).unwrap();
        prop_assert_eq!(back.content_id(), p.content_id());
        prop_assert_eq!(back, p);
    }
}
