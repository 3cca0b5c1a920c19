use forge_core::acceptance::loglog_slope;
use forge_core::mesh::{build_box_mesh, BoxDomain};
use forge_core::moser::{unimodular_flow, CurlField};
use forge_core::pushforward::transform;
use forge_core::{ForgeConfig, Mat3, Vec3};
use proptest::prelude::*;

fn spd() -> impl Strategy<Value = Mat3> {
    prop::array::uniform9(-1.0f64..1.0).prop_map(|a| {
        let l = Mat3::from_row_slice(&a);
        l * l.transpose() + Mat3::identity() * 0.5
    })
}

fn invertible() -> impl Strategy<Value = Mat3> {
    prop::array::uniform9(-0.4f64..0.4).prop_map(|a| Mat3::identity() + Mat3::from_row_slice(&a))
        .prop_filter("nonsingular", |d| d.determinant().abs() > 0.05)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mesh_tiles_the_box(r in 2usize..6, lx in 0.5f64..2.0, ly in 0.5f64..2.0, lz in 0.5f64..2.0) {
        let domain = BoxDomain::new([0.0, -0.3, 0.1], [lx, ly - 0.3, lz + 0.1]).unwrap();
        let mesh = build_box_mesh(r, domain).unwrap();
        prop_assert_eq!(mesh.num_vertices(), (r + 1).pow(3));
        prop_assert_eq!(mesh.num_tets(), 6 * r.pow(3));
        let mut total = 0.0;
        for t in 0..mesh.num_tets() {
            let v = mesh.signed_volume(t);
            prop_assert!(v.abs() > 0.0);
            total += v.abs();
        }
        prop_assert!((total - domain.volume()).abs() < 1e-12 * domain.volume());
        prop_assert_eq!(mesh.boundary_nodes().len() + mesh.interior_nodes().len(), mesh.num_vertices());
    }

    #[test]
    fn located_point_is_reproduced(r in 2usize..6, p in prop::array::uniform3(0.0f64..1.0)) {
        let mesh = build_box_mesh(r, BoxDomain::unit()).unwrap();
        let x = Vec3::new(p[0], p[1], p[2]);
        let loc = mesh.locate(&x);
        prop_assert!(loc.bary.iter().all(|&b| b >= -1e-12));
        prop_assert!((loc.bary.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((mesh.point(loc.tet, &loc.bary) - x).norm() < 1e-12);
    }

    #[test]
    fn transform_is_a_symmetric_group_action(g in spd(), a in invertible(), b in invertible()) {
        let t = transform(&g, &a).unwrap();
        prop_assert!((t - t.transpose()).norm() < 1e-12 * t.norm());
        prop_assert!(t.symmetric_eigenvalues().min() > 0.0);
        let composed = transform(&transform(&g, &a).unwrap(), &b).unwrap();
        let direct = transform(&g, &(b * a)).unwrap();
        prop_assert!((composed - direct).norm() < 1e-10 * direct.norm());
        let back = transform(&t, &a.try_inverse().unwrap()).unwrap();
        prop_assert!((back - g).norm() < 1e-10 * g.norm());
    }

    #[test]
    fn unimodular_flow_preserves_volume(p in prop::array::uniform3(0.25f64..0.75), amp in -0.05f64..0.05) {
        let field = CurlField { center: Vec3::new(0.5, 0.5, 0.5), radius: 0.3, amplitude: amp, axis: Vec3::new(0.0, 0.6, 0.8) };
        let flow = unimodular_flow(field, 32);
        let x = Vec3::new(p[0], p[1], p[2]);
        let (y, d) = flow.forward_jacobian(&x);
        prop_assert!((d.determinant() - 1.0).abs() < 1e-6);
        prop_assert!((flow.inverse(&y).unwrap() - x).norm() < 1e-8);
    }

    #[test]
    fn loglog_slope_recovers_power_laws(p in -3.0f64..3.0, c in 0.01f64..100.0) {
        let x = [0.2, 0.1, 0.05, 0.025];
        let y: Vec<f64> = x.iter().map(|v: &f64| c * v.powf(p)).collect();
        prop_assert!((loglog_slope(&x, &y) - p).abs() < 1e-9);
    }

    #[test]
    fn config_round_trips(res in 6usize..20, lambda0 in 1.0f64..60.0, e in 0.01f64..0.5, seed in any::<u64>()) {
        let cfg = ForgeConfig { resolution: res, lambda0, eps: vec![e, e / 2.0], seed, ..ForgeConfig::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        prop_assert_eq!(ForgeConfig::from_json(&text).unwrap(), cfg);
    }
}
