use dota_core::grid::{read_grid, VoxelGrid};
use dota_core::physics::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Straightforward per-voxel evaluation: for every voxel, walk its column
/// from the entrance and evaluate the beam model directly.
fn naive_dose(x: &VoxelGrid, beam: &BeamSpec) -> Vec<f32> {
    let [l, h, w] = x.dims();
    let [dz, dy, dx] = x.spacing().map(|s| s as f64);
    let mut out = Vec::new();
    for z in 0..l {
        for y in 0..h {
            for xi in 0..w {
                let mut wepl = 0.0f64;
                for k in 0..z {
                    wepl += x.get(k, y, xi) as f64 * dz;
                }
                let exit = wepl + x.get(z, y, xi) as f64 * dz;
                let depth = (z as f64 + 0.5) * dz;
                let sigma = beam.sigma0() + 0.02 * depth;
                let ry = (y as f64 + 0.5) * dy - (0.5 * h as f64 * dy + beam.offset_mm.0);
                let rx = (xi as f64 + 0.5) * dx - (0.5 * w as f64 * dx + beam.offset_mm.1);
                let s0 = beam.sigma0();
                let lateral = (-(ry * ry + rx * rx) / (2.0 * sigma * sigma)).exp()
                    * ((s0 * s0) / (sigma * sigma));
                out.push((bragg_voxel_dose(beam.energy, wepl, exit) * lateral) as f32);
            }
        }
    }
    out
}

#[test]
fn radiological_depth_examples() {
    let water = water_phantom([5, 2, 2], [3.0, 1.0, 1.0]);
    let d = radiological_depth(&water);
    for z in 0..5 {
        assert!((d[z * 4] - (z as f64 + 0.5) * 3.0).abs() < 1e-12);
    }
    let dense = VoxelGrid::filled([5, 2, 2], [3.0, 1.0, 1.0], 2.0);
    let d2 = radiological_depth(&dense);
    for (a, b) in d.iter().zip(&d2) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
    // hand computation: slabs 1, 1.5, 0.25, 2 at 3 mm
    let slabs = VoxelGrid::from_fn([4, 1, 1], [3.0, 1.0, 1.0], |z, _, _| {
        [1.0, 1.5, 0.25, 2.0][z]
    });
    let d = radiological_depth(&slabs);
    let expected = [1.5, 3.0 + 2.25, 3.0 + 4.5 + 0.375, 3.0 + 4.5 + 0.75 + 3.0];
    for (a, b) in d.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }
}

#[test]
fn peak_depth_increases_with_energy() {
    let peak = |e: f64| {
        (0..40000)
            .map(|i| i as f64 * 0.005)
            .max_by(|a, b| bragg_depth_dose(e, *a).total_cmp(&bragg_depth_dose(e, *b)))
            .unwrap()
    };
    let mut last = 0.0;
    for e in (80..=130).step_by(5) {
        let p = peak(e as f64);
        assert!(p > last);
        assert!((p - csda_range(e as f64)).abs() < 0.05 * csda_range(e as f64));
        last = p;
    }
    let entry = bragg_depth_dose(100.0, 0.0);
    assert!(entry > 0.0 && entry < 1.0);
}

#[test]
fn water_axis_reproduces_depth_dose() {
    // odd lateral dims put a voxel centre on the beam axis
    let water = water_phantom([40, 9, 9], [3.0, 1.0, 1.0]);
    let mut beam = BeamSpec::new(100.0).unwrap();
    beam.offset_mm = (0.0, 0.0);
    let dose = simulate_dose(&water, &beam);
    for z in 0..40 {
        let depth = (z as f64 + 0.5) * 3.0;
        let sigma = beam.sigma_at(depth);
        let area = beam.sigma0().powi(2) / sigma.powi(2);
        let expected = bragg_voxel_dose(100.0, z as f64 * 3.0, (z + 1) as f64 * 3.0) * area;
        assert!((dose.get(z, 4, 4) as f64 - expected).abs() < 1e-6 * (1.0 + expected));
    }
}

#[test]
fn bone_slab_pulls_peak_upstream() {
    let dims = [64, 16, 8];
    let spacing = [3.0, 1.0, 1.0];
    let water = water_phantom(dims, spacing);
    let bone = VoxelGrid::from_fn(
        dims,
        spacing,
        |z, _, _| if (5..12).contains(&z) { 1.8 } else { 1.0 },
    );
    let beam = BeamSpec::new(110.0).unwrap();
    let argmax = |g: &VoxelGrid| {
        let p = simulate_dose(g, &beam).depth_profile();
        (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap()
    };
    assert!(argmax(&bone) < argmax(&water));
}

#[test]
fn peak_within_one_voxel_of_range_in_water() {
    let water = water_phantom([64, 16, 8], [3.0, 1.0, 1.0]);
    for e in [80.0, 95.5, 104.25, 117.0, 130.0] {
        let p = simulate_dose(&water, &BeamSpec::new(e).unwrap()).depth_profile();
        let z = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        let depth = (z as f64 + 0.5) * 3.0;
        assert!(
            (depth - csda_range(e)).abs() <= 3.0,
            "{} MeV: peak {} mm vs R {}",
            e,
            depth,
            csda_range(e)
        );
    }
}

#[test]
fn lateral_translation_conserves_total_dose() {
    let water = water_phantom([30, 64, 64], [3.0, 1.0, 1.0]);
    let total = |offset: (f64, f64)| {
        let mut beam = BeamSpec::new(90.0).unwrap();
        beam.offset_mm = offset;
        simulate_dose(&water, &beam)
            .values()
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>()
    };
    let base = total((0.0, 0.0));
    for offset in [(5.0, 0.0), (-7.5, 3.25), (2.0, -9.0)] {
        assert!((total(offset) - base).abs() < 0.01 * base);
    }
}

#[test]
fn noise_statistics() {
    let clean = VoxelGrid::filled([100, 100, 100], [1.0, 1.0, 1.0], 2.0);
    assert_eq!(add_pseudo_mc_noise(&clean, 0.0, 1), clean);
    let noisy = add_pseudo_mc_noise(&clean, 0.006, 42);
    assert_eq!(noisy, add_pseudo_mc_noise(&clean, 0.006, 42));
    let n = clean.len() as f64;
    let diffs: Vec<f64> = noisy.values().iter().map(|&v| v as f64 - 2.0).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    let target = 0.006 * 2.0;
    assert!(
        (std - target).abs() < 0.05 * target,
        "std {} vs {}",
        std,
        target
    );
}

#[test]
fn dataset_files_and_determinism() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut spec = DatasetSpec::new(2, PhantomSpec::desk(5, PhantomLayout::Mixed));
    spec.phantom.dims = [16, 8, 4];
    let files = generate_dataset(&spec, dir_a.path()).unwrap();
    generate_dataset(&spec, dir_b.path()).unwrap();
    let geoms = files
        .iter()
        .filter(|p| p.to_string_lossy().contains("geom_"))
        .count();
    let doses = files
        .iter()
        .filter(|p| p.to_string_lossy().contains("dose_"))
        .count();
    assert_eq!((geoms, doses), (2, 8));
    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(
            std::fs::read(f).unwrap(),
            std::fs::read(dir_b.path().join(name)).unwrap()
        );
    }
    for i in 0..2 {
        let geo = read_grid(dir_a.path().join(geometry_file_name(i))).unwrap();
        assert!(geo.energy.is_none());
        for k in 0..4 {
            let dose = read_grid(dir_a.path().join(dose_file_name(i, k))).unwrap();
            let e = dose.energy.unwrap() as f64;
            assert!((80.0..=130.0).contains(&e));
            assert!(((e * 10.0).round() - e * 10.0).abs() < 1e-3);
            // generator output equals the oracle with the 0.6% mask applied
            let clean = simulate_dose(&geo.grid, &BeamSpec::new(e).unwrap());
            assert_eq!(dose.grid, zero_below_fraction(&clean, 0.006));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulate_matches_naive_bitwise(seed in any::<u64>(), energy in 80.0f64..130.0, oy in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geo = generate_phantom(PhantomLayout::Blobs, [24, 8, 6], [3.0, 1.0, 1.0], &mut rng);
        let mut beam = BeamSpec::new(energy).unwrap();
        beam.offset_mm = (oy, 0.5);
        let fast = simulate_dose(&geo, &beam);
        let naive = naive_dose(&geo, &beam);
        prop_assert_eq!(fast.values(), naive.as_slice());
    }

    #[test]
    fn wepl_is_nondecreasing(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geo = generate_phantom(PhantomLayout::Mixed, [32, 4, 4], [3.0, 1.0, 1.0], &mut rng);
        let d = radiological_depth(&geo);
        for z in 1..32 {
            for i in 0..16 {
                prop_assert!(d[z * 16 + i] >= d[(z - 1) * 16 + i]);
            }
        }
    }
}
