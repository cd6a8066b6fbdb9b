//! Randomized invariants of the basis, encoder and GFA.

use odfield::encoding::{hash_index, level_resolution, HashGridConfig};
use odfield::metrics::gfa;
use odfield::sh_basis::{eval_direction, ShBasisSpec};
use proptest::prelude::*;

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 1e-3).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

proptest! {
    #[test]
    fn gfa_lies_in_unit_interval(c in prop::collection::vec(-10.0f64..10.0, 45)) {
        let g = gfa(&c).value;
        prop_assert!((0.0..=1.0).contains(&g));
    }

    #[test]
    fn gfa_is_exactly_invariant_to_dyadic_scaling(
        c in prop::collection::vec(-10.0f64..10.0, 45),
        e in -200i32..200,
    ) {
        let s = 2f64.powi(e);
        let scaled: Vec<f64> = c.iter().map(|x| x * s).collect();
        prop_assert_eq!(gfa(&scaled).value, gfa(&c).value);
    }

    #[test]
    fn basis_is_antipodally_symmetric(v in prop::array::uniform3(-1.0f64..1.0)) {
        let Some(p) = unit(v) else { return Ok(()) };
        let spec = ShBasisSpec::new(8).unwrap();
        let (mut a, mut b) = (vec![0.0; 45], vec![0.0; 45]);
        eval_direction(&p, &spec, &mut a).unwrap();
        eval_direction(&[-p[0], -p[1], -p[2]], &spec, &mut b).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn hash_index_stays_in_table(
        finest in 8usize..300,
        level in 0usize..14,
        frac in prop::array::uniform3(0.0f64..=1.0),
    ) {
        let cfg = HashGridConfig::default_for_extent(finest);
        let res = level_resolution(level, &cfg).unwrap();
        let corner = frac.map(|f| (f * res as f64).floor() as u32);
        let idx = hash_index(corner, level, &cfg).unwrap();
        prop_assert!(idx < 1 << cfg.log2_table_size);
    }
}

#[test]
fn corner_outside_level_is_rejected() {
    let cfg = HashGridConfig::default_for_extent(32);
    let res = level_resolution(0, &cfg).unwrap() as u32;
    assert!(hash_index([res + 1, 0, 0], 0, &cfg).is_err());
    assert!(level_resolution(14, &cfg).is_err());
}
