use std::sync::OnceLock;

use proptest::prelude::*;

use hicontrast::fine_grid::harmonic_mean;
use hicontrast::geometry::FineLayout;
use hicontrast::grid::ScalarField;
use hicontrast::harness::{fine_layouts, prepare, Config, Setup};
use hicontrast::io::{pack_bits, rle_decode, rle_encode, unpack_bits};
use hicontrast::limit_system::{
    apply_a, energy_form, inner_alpha, norm_alpha, resolvent_solve, ExtendedState,
};
use hicontrast::projection::{project_pi_epsilon, projection_bound};

const SMALL: &str = r#"
[environment]
lattice_size = 4
p = 0.2
seed = 3
volume_cap = 2

[discretization]
sub_resolution = 4
coarse_grid = 16
modes = 4
"#;

struct Fixture {
    cfg: Config,
    setup: Setup,
    layout: FineLayout,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = Config::from_toml(SMALL).unwrap();
        let setup = prepare(&cfg).unwrap();
        assert!(!setup.bases.is_empty());
        let layout = fine_layouts(&cfg, &setup, &[0.25]).unwrap().remove(0);
        Fixture { cfg, setup, layout }
    })
}

fn state_from(values: &[f64], fx: &Fixture) -> ExtendedState {
    let n = fx.cfg.discretization.coarse_grid;
    let counts = fx.setup.params.mode_counts();
    let mut s = ExtendedState::zeros(n, &counts);
    let mut it = values.iter().cycle();
    let mut fill = |f: &mut ScalarField| f.values.iter_mut().for_each(|v| *v = *it.next().unwrap());
    fill(&mut s.f0);
    s.c.iter_mut().flatten().for_each(&mut fill);
    s
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, 37..300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generator_is_symmetric_and_dissipative(a in values(), b in values()) {
        let fx = fixture();
        let p = &fx.setup.params;
        let (f, g) = (state_from(&a, fx), state_from(&b, fx));
        let (af, ag) = (apply_a(&f, p).unwrap(), apply_a(&g, p).unwrap());
        let lhs = inner_alpha(&af, &g, p);
        let rhs = inner_alpha(&f, &ag, p);
        let scale = norm_alpha(&af, p) * norm_alpha(&g, p) + norm_alpha(&f, p) * norm_alpha(&ag, p);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * scale);
        let e = energy_form(&f, p);
        prop_assert!(e >= 0.0);
        prop_assert!((e + inner_alpha(&af, &f, p)).abs() <= 1e-10 * e.max(1e-300));
    }

    #[test]
    fn resolvent_contracts(a in values(), m in 0.05..50.0f64) {
        let fx = fixture();
        let p = &fx.setup.params;
        let u = state_from(&a, fx);
        let (r, _) = resolvent_solve(m, &u, p, fx.cfg.discretization.cg()).unwrap();
        prop_assert!(m * norm_alpha(&r, p) <= norm_alpha(&u, p) * (1.0 + 1e-8));
    }

    #[test]
    fn projection_is_bounded(a in values()) {
        let fx = fixture();
        let f = state_from(&a, fx);
        let proj = project_pi_epsilon(&f, &fx.layout, &fx.setup.bases).unwrap();
        let bound = projection_bound(&fx.setup.fractions) * norm_alpha(&f, &fx.setup.params);
        prop_assert!(proj.l2_norm() <= bound * (1.0 + 1e-10));
    }

    #[test]
    fn harmonic_mean_lies_between_arguments(a in 1e-6..1e3f64, b in 1e-6..1e3f64) {
        let h = harmonic_mean(a, b);
        prop_assert!(h >= a.min(b) * (1.0 - 1e-14) && h <= a.max(b) * (1.0 + 1e-14));
    }

    #[test]
    fn run_length_round_trip(row in prop::collection::vec(any::<bool>(), 0..80)) {
        let runs = rle_encode(&row);
        prop_assert_eq!(runs.iter().sum::<usize>(), row.len());
        prop_assert!(runs.iter().skip(1).all(|&r| r > 0));
        prop_assert_eq!(rle_decode(&runs), row);
    }

    #[test]
    fn bit_packing_round_trip(mask in prop::collection::vec(any::<bool>(), 0..200)) {
        let bytes = pack_bits(&mask);
        prop_assert_eq!(bytes.len(), mask.len().div_ceil(8));
        prop_assert_eq!(unpack_bits(&bytes, mask.len()), mask);
    }

    #[test]
    fn config_hash_survives_toml_round_trip(seed in 0u64..1000, p in 0.01..0.4f64) {
        let mut cfg = Config::default();
        cfg.environment.seed = seed;
        cfg.environment.p = p;
        let back = Config::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}

#[test]
fn bessel_sums_stay_below_areas() {
    let fx = fixture();
    for b in &fx.setup.bases {
        assert!(b.bessel_sum() <= b.area * (1.0 + 1e-10));
        let partial: Vec<f64> = (1..=b.len()).map(|m| b.truncated(m).bessel_sum()).collect();
        assert!(partial.windows(2).all(|w| w[1] >= w[0]));
    }
}
