use dota_core::evaluation::*;
use dota_core::grid::VoxelGrid;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive all-pairs gamma: every reference voxel is a candidate.
fn brute_force_gamma(pred: &VoxelGrid, reference: &VoxelGrid, dta: f64, dd: f64) -> Vec<f64> {
    let [l, h, w] = reference.dims();
    let s = reference.spacing().map(|v| v as f64);
    let abs = dd * reference.max() as f64;
    let mut out = Vec::new();
    for z in 0..l {
        for y in 0..h {
            for x in 0..w {
                let dp = pred.get(z, y, x) as f64;
                let mut best = f64::INFINITY;
                for zz in 0..l {
                    for yy in 0..h {
                        for xx in 0..w {
                            let d2 = ((z as f64 - zz as f64) * s[0]).powi(2)
                                + ((y as f64 - yy as f64) * s[1]).powi(2)
                                + ((x as f64 - xx as f64) * s[2]).powi(2);
                            let dose = (dp - reference.get(zz, yy, xx) as f64) / abs;
                            best = best.min((d2 / (dta * dta) + dose * dose).sqrt());
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

fn random_grid(dims: [usize; 3], spacing: [f32; 3], rng: &mut impl Rng) -> VoxelGrid {
    let values = (0..dims.iter().product())
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    VoxelGrid::new(dims, spacing, values).unwrap()
}

/// Smooth reference with a noisy prediction, so gamma values straddle 1.
fn smooth_pair(rng: &mut impl Rng) -> (VoxelGrid, VoxelGrid) {
    let dims = [8, 8, 8];
    let spacing = [1.0, 1.0, 3.0];
    let c: [f64; 3] = [
        rng.random_range(2.0..6.0),
        rng.random_range(2.0..6.0),
        rng.random_range(2.0..6.0),
    ];
    let reference = VoxelGrid::from_fn(dims, spacing, |z, y, x| {
        let r2 = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
        (-r2 / 8.0).exp() as f32
    });
    let mut pred = reference.clone();
    for v in pred.values_mut() {
        *v = (*v + rng.random_range(-0.03..0.03f32)).max(0.0);
    }
    (pred, reference)
}

#[test]
fn pruned_gamma_matches_brute_force_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let criteria = GammaCriteria::default();
    for _ in 0..10 {
        let pred = random_grid([8, 8, 8], [1.0, 1.0, 3.0], &mut rng);
        let reference = random_grid([8, 8, 8], [1.0, 1.0, 3.0], &mut rng);
        let fast = gamma_grid(&pred, &reference, &criteria).unwrap();
        let slow = brute_force_gamma(&pred, &reference, 3.0, 0.01);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }
    for _ in 0..10 {
        let (pred, reference) = smooth_pair(&mut rng);
        let fast = gamma_grid(&pred, &reference, &criteria).unwrap();
        let slow = brute_force_gamma(&pred, &reference, 3.0, 0.01);
        assert!(fast.iter().any(|&g| g < 1.0) && fast.iter().any(|&g| g >= 1.0));
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }
}

#[test]
fn single_voxel_gamma_agrees_with_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (pred, reference) = smooth_pair(&mut rng);
    let criteria = GammaCriteria::default();
    let grid = gamma_grid(&pred, &reference, &criteria).unwrap();
    for p in [[0, 0, 0], [3, 4, 5], [7, 7, 7]] {
        let idx = reference.index(p[0], p[1], p[2]);
        assert_eq!(
            gamma_value(p, &pred, &reference, &criteria).unwrap(),
            grid[idx]
        );
    }
}

#[test]
fn gamma_is_asymmetric_in_its_arguments() {
    // reference defines the dose normalisation and the search set
    let reference = VoxelGrid::new([2, 1, 1], [3.0, 1.0, 1.0], vec![1.0, 0.0]).unwrap();
    let pred = VoxelGrid::new([2, 1, 1], [3.0, 1.0, 1.0], vec![2.0, 0.0]).unwrap();
    let c = GammaCriteria::new(3.0, 0.5).unwrap();
    let ab = gamma_grid(&pred, &reference, &c).unwrap();
    let ba = gamma_grid(&reference, &pred, &c).unwrap();
    assert!((ab[0] - 2.0).abs() < 1e-12);
    assert!((ba[0] - 1.0).abs() < 1e-12);
}

#[test]
fn masked_mode_zeroes_low_predicted_dose() {
    let reference = VoxelGrid::new([3, 1, 1], [3.0, 1.0, 1.0], vec![1.0, 0.0, 0.0]).unwrap();
    let pred = VoxelGrid::new([3, 1, 1], [3.0, 1.0, 1.0], vec![1.0, 5e-5, 0.5]).unwrap();
    let mut c = GammaCriteria::default();
    let unmasked = gamma_pass_rate(&pred, &reference, &c).unwrap();
    assert_eq!(unmasked.excluded, 1);
    c.masked = true;
    let masked = gamma_pass_rate(&pred, &reference, &c).unwrap();
    assert_eq!(masked.gamma[1], 0.0);
    assert_eq!(masked.evaluated, 3);
}

#[test]
fn histogram_matches_direct_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let dims = [10, 3, 2];
    let gamma: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..2.0)).collect();
    let h = depth_section_histogram(&gamma, dims, 4).unwrap();
    let mut counts = [0usize; 4];
    for z in 0..10 {
        let section = match z {
            0..=2 => 0,
            3 | 4 => 1,
            5..=7 => 2,
            _ => 3,
        };
        counts[section] += gamma[z * 6..z * 6 + 6]
            .iter()
            .filter(|&&g| g >= 1.0)
            .count();
    }
    let total: usize = counts.iter().sum();
    assert_eq!(h.failures, total);
    for s in 0..4 {
        assert!((h.fractions[s] - counts[s] as f64 / total as f64).abs() < 1e-12);
    }
    assert!((h.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn enlarging_criteria_never_lowers_pass_rate(seed in any::<u64>(), dta in 0.5f64..4.0, dd in 0.005f64..0.05, k in 1.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, reference) = smooth_pair(&mut rng);
        let base = gamma_pass_rate(&pred, &reference, &GammaCriteria::new(dta, dd).unwrap()).unwrap();
        let wider = gamma_pass_rate(&pred, &reference, &GammaCriteria::new(dta * k, dd).unwrap()).unwrap();
        let looser = gamma_pass_rate(&pred, &reference, &GammaCriteria::new(dta, (dd * k).min(0.99)).unwrap()).unwrap();
        prop_assert!(wider.pass_rate >= base.pass_rate);
        prop_assert!(looser.pass_rate >= base.pass_rate);
    }

    #[test]
    fn pass_rate_is_translation_invariant(seed in any::<u64>(), shift in (0usize..3, 0usize..3, 0usize..2)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, reference) = smooth_pair(&mut rng);
        let embed = |g: &VoxelGrid, off: [usize; 3]| {
            VoxelGrid::from_fn([14, 14, 12], [1.0, 1.0, 3.0], |z, y, x| {
                let (z, y, x) = (z as isize - off[0] as isize, y as isize - off[1] as isize, x as isize - off[2] as isize);
                if (0..8).contains(&z) && (0..8).contains(&y) && (0..8).contains(&x) {
                    g.get(z as usize, y as usize, x as usize)
                } else {
                    0.0
                }
            })
        };
        let c = GammaCriteria::default();
        let a = gamma_pass_rate(&embed(&pred, [2, 2, 2]), &embed(&reference, [2, 2, 2]), &c).unwrap();
        let off = [2 + shift.0, 2 + shift.1, 2 + shift.2];
        let b = gamma_pass_rate(&embed(&pred, off), &embed(&reference, off), &c).unwrap();
        prop_assert_eq!(a.pass_rate, b.pass_rate);
        prop_assert_eq!(a.evaluated, b.evaluated);
    }

    #[test]
    fn relative_error_is_scale_invariant(seed in any::<u64>(), scale in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, reference) = smooth_pair(&mut rng);
        let a = relative_error(&pred, &reference).unwrap();
        let b = relative_error(&pred.map(|v| v * scale), &reference.map(|v| v * scale)).unwrap();
        prop_assert!((a - b).abs() <= 1e-4 * a.max(1e-9));
    }
}
