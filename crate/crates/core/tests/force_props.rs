mod common;

use common::{mask_pair, rect, reference_histogram, rel_close};
use mrcl_core::force::{brute_force_histogram, dominant_direction, force_histogram, symmetric_force_banner, ForceBanner, ForceConfig};
use mrcl_core::Error;
use proptest::prelude::*;

fn cfg() -> ForceConfig {
    ForceConfig::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn fast_path_matches_brute_force_and_reference((a, b) in mask_pair(40)) {
        let fast = force_histogram(&a, &b, &cfg()).unwrap();
        let slow = brute_force_histogram(&a, &b, &cfg()).unwrap();
        let reference = reference_histogram(&a, &b, 64, &[0, 2]);
        for i in 0..fast.values.len() {
            prop_assert!(rel_close(fast.values[i], slow.values[i], 1e-6), "bin {i}: {} vs {}", fast.values[i], slow.values[i]);
            prop_assert!(rel_close(fast.values[i], reference[i], 1e-6), "bin {i}: {} vs {}", fast.values[i], reference[i]);
        }
    }

    #[test]
    fn banner_is_order_invariant_bit_for_bit((a, b) in mask_pair(30)) {
        let ab = symmetric_force_banner(&a, &b, &cfg()).unwrap();
        let ba = symmetric_force_banner(&b, &a, &cfg()).unwrap();
        let bits = |x: &ForceBanner| x.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&ab), bits(&ba));
    }

    #[test]
    fn histogram_is_translation_invariant((a, b) in mask_pair(30), dx in -8isize..8, dy in -8isize..8) {
        let (Some(ta), Some(tb)) = (a.translated(dx, dy), b.translated(dx, dy)) else {
            return Ok(());
        };
        let h0 = force_histogram(&a, &b, &cfg()).unwrap();
        let h1 = force_histogram(&ta, &tb, &cfg()).unwrap();
        for (x, y) in h0.values.iter().zip(&h1.values) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn mirroring_reflects_angle_bins((a, b) in mask_pair(30)) {
        let c = cfg();
        let t = c.theta_bins;
        let nl = c.levels.len();
        let s = symmetric_force_banner(&a, &b, &c).unwrap();
        let m = symmetric_force_banner(&a.mirrored_x(), &b.mirrored_x(), &c).unwrap();
        for bin in 0..t {
            let mb = (t / 2 + t - bin) % t;
            for li in 0..nl {
                prop_assert!(rel_close(s.values[bin * nl + li], m.values[mb * nl + li], 1e-12));
            }
        }
    }

    #[test]
    fn directed_masses_agree((a, b) in mask_pair(30)) {
        let ab = force_histogram(&a, &b, &cfg()).unwrap();
        let ba = force_histogram(&b, &a, &cfg()).unwrap();
        for li in 0..2 {
            prop_assert!((ab.level_mass(li) - ba.level_mass(li)).abs() < 1e-9);
        }
    }

    #[test]
    fn dominant_direction_is_exhaustive_argmax(values in prop::collection::vec(0.0f64..1.0, 16)) {
        let banner = ForceBanner { theta_bins: 8, levels: vec![0, 2], values: values.clone() };
        let mut best = 0;
        for bin in 0..8 {
            if values[bin * 2] > values[best * 2] {
                best = bin;
            }
        }
        if values[best * 2] > 0.0 {
            prop_assert_eq!(dominant_direction(&banner).unwrap(), best);
        }
    }

    // Lattice aliasing dominates below ~12 px per side at 64 bins.
    #[test]
    fn dilation_keeps_distance_free_histogram(
        x0 in 0usize..8, y0 in 0usize..30, w0 in 12usize..16, h0 in 12usize..16,
        x1 in 30usize..34, y1 in 0usize..30, w1 in 12usize..16, h1 in 12usize..16,
    ) {
        let a = rect(48, 48, x0, y0, w0, h0);
        let b = rect(48, 48, x1, y1, w1, h1);
        let c = ForceConfig::new(64, &[0]);
        let small = force_histogram(&a, &b, &c).unwrap();
        let big = force_histogram(&a.dilated(2), &b.dilated(2), &c).unwrap();
        let l1: f64 = small.values.iter().zip(&big.values).map(|(x, y)| (x - y).abs()).sum();
        prop_assert!(l1 <= 0.05, "L1 {l1}");
    }
}

#[test]
fn worked_examples() {
    let c = ForceConfig::new(8, &[0, 2]);
    let a = common::mask_from(8, 8, &[(0, 0)]);
    let b = common::mask_from(8, 8, &[(3, 0)]);
    let h = force_histogram(&a, &b, &c).unwrap();
    assert_eq!(h.get(0, 0), 1.0);
    assert!((h.get(0, 1) - 1.0 / 9.0).abs() < 1e-12);
    assert_eq!(h.level_mass(0), 1.0);
    let s = symmetric_force_banner(&a, &b, &c).unwrap();
    assert_eq!((s.get(0, 0), s.get(4, 0)), (0.5, 0.5));
    assert_eq!(dominant_direction(&s).unwrap(), 0);

    let block = rect(16, 16, 2, 2, 3, 3);
    let shifted = block.translated(0, 5).unwrap();
    let h = brute_force_histogram(&block, &shifted, &c).unwrap();
    assert!((h.level_mass(0) - 1.0).abs() < 1e-12);
}

#[test]
fn error_paths() {
    let c = cfg();
    let a = common::mask_from(8, 8, &[(1, 1)]);
    let empty = mrcl_core::mask::BinaryMask::empty(8, 8);
    assert!(matches!(force_histogram(&a, &empty, &c), Err(Error::DegenerateMask)));
    assert!(matches!(force_histogram(&a, &a, &c), Err(Error::ZeroDistancePair)));
    let zero = ForceBanner { theta_bins: 8, levels: vec![0], values: vec![0.0; 8] };
    assert!(matches!(dominant_direction(&zero), Err(Error::UndefinedDirection)));
}
