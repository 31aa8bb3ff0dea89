use partafford::data::{
    augment_remove_parts, build_split, decode_sample, encode_sample, generate_blueprints, generate_dataset,
    generate_object, read_sample, removal_units, voxelize_cuboids, AffordanceVocab, Axis, Category, Dataset,
    DatasetSpec, GenConfig, PartBlueprint, Placement, Range, SplitSizes, SplitTag,
};
use partafford::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn id(name: &str) -> u8 {
    AffordanceVocab::id(name).unwrap()
}

#[test]
fn generated_samples_satisfy_invariants() {
    let cfg = GenConfig::default();
    for category in Category::ALL {
        for seed in 0..1000 {
            let s = generate_object(category, seed, &cfg).unwrap();
            s.validate().unwrap_or_else(|e| panic!("{category} seed {seed}: {e}"));
            let allowed = category.label_ids();
            assert!(s.affordance_set().iter().all(|l| allowed.contains(l)));
            assert!(s.part_count() <= category.max_set_size());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for part in generate_blueprints(category, &mut rng, &cfg) {
                for b in &part.boxes {
                    for c in b.corners() {
                        assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)), "{category} seed {seed}: {c:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn generation_is_pure_in_the_seed() {
    let cfg = GenConfig::default();
    for category in Category::ALL {
        assert_eq!(generate_object(category, 42, &cfg).unwrap(), generate_object(category, 42, &cfg).unwrap());
    }
}

#[test]
fn coarse_grids_keep_every_part() {
    let cfg = GenConfig::with_res(16);
    for category in Category::ALL {
        for seed in 0..300 {
            let s = generate_object(category, seed, &cfg).unwrap();
            s.validate().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let planned = generate_blueprints(category, &mut rng, &cfg).len();
            assert_eq!(s.part_count(), planned, "{category} seed {seed}");
        }
    }
}

#[test]
fn sittable_with_every_option_has_four_affordances() {
    let mut cfg = GenConfig::default();
    cfg.sittable.p_backrest = 1.0;
    cfg.sittable.p_armrests = 1.0;
    for seed in 0..20 {
        let s = generate_object(Category::Sittable, seed, &cfg).unwrap();
        assert_eq!(s.affordance_names(), vec!["sittable", "backrest", "armrest", "framework"]);
    }
}

fn door_extent(angle: f64) -> (usize, [usize; 3]) {
    let mut cfg = GenConfig::default();
    cfg.openable.door_angle = Range(angle, angle);
    let s = generate_object(Category::Openable, 3, &cfg).unwrap();
    let door = s.part_affordances.iter().position(|&a| a == id("openable")).unwrap() as u8 + 1;
    let res = s.res;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0; 3];
    let mut count = 0;
    for (i, &p) in s.part_grid.iter().enumerate() {
        if p == door {
            count += 1;
            let c = [i / (res * res), (i / res) % res, i % res];
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    (count, [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1])
}

#[test]
fn door_angle_extremes() {
    let (closed, ext0) = door_extent(0.0);
    let (open, ext90) = door_extent(90.0);
    assert!(closed >= 30 && open >= 30, "{closed} {open}");
    // closed: wide in x, thin in z; open: the other way round
    assert!(ext0[0] > 4 * ext0[2], "{ext0:?}");
    assert!(ext90[2] > 4 * ext90[0], "{ext90:?}");
    assert_eq!(ext0[1], ext90[1]);
}

#[test]
fn voxelize_axis_aligned_block() {
    let part = PartBlueprint {
        affordance: id("support"),
        boxes: vec![Placement {
            center: [0.5; 3],
            half: [0.25; 3],
            rotation: None,
        }],
        removable: false,
    };
    let (grid, table) = voxelize_cuboids(&[part], 32).unwrap();
    assert_eq!(table, vec![id("support")]);
    assert_eq!(grid.iter().filter(|&&g| g == 1).count(), 4096);
    for x in 0..32 {
        let inside = (8..24).contains(&x);
        assert_eq!(grid[(x * 32 + 16) * 32 + 16] == 1, inside);
    }
}

#[test]
fn voxelize_disjoint_and_overlapping_parts() {
    let a = PartBlueprint {
        affordance: id("sittable"),
        boxes: vec![Placement { center: [0.25; 3], half: [0.1; 3], rotation: None }],
        removable: false,
    };
    let b = PartBlueprint {
        affordance: id("framework"),
        boxes: vec![Placement { center: [0.75; 3], half: [0.1; 3], rotation: None }],
        removable: false,
    };
    let (grid, table) = voxelize_cuboids(&[a.clone(), b.clone()], 32).unwrap();
    assert_eq!(table.len(), 2);
    assert!(grid.iter().any(|&g| g == 1) && grid.iter().any(|&g| g == 2));

    // a later part covering an earlier one entirely wins, and the hidden part is dropped
    let cover = PartBlueprint {
        boxes: vec![Placement { center: [0.25; 3], half: [0.2; 3], rotation: None }],
        ..b
    };
    let (grid, table) = voxelize_cuboids(&[a, cover], 32).unwrap();
    assert_eq!(table, vec![id("framework")]);
    assert!(grid.iter().all(|&g| g <= 1));

    let outside = PartBlueprint {
        affordance: id("support"),
        boxes: vec![Placement { center: [2.0; 3], half: [0.1; 3], rotation: None }],
        removable: false,
    };
    assert!(voxelize_cuboids(&[outside], 32).is_err());
    assert!(voxelize_cuboids(&[], 32).is_err());
}

fn rotated_slab(center: [f64; 3], half: [f64; 3], axis: Axis) -> (f64, f64) {
    let slab = PartBlueprint {
        affordance: id("support"),
        boxes: vec![Placement {
            center,
            half,
            rotation: Some((axis, std::f64::consts::FRAC_PI_4)),
        }],
        removable: false,
    };
    let (grid, _) = voxelize_cuboids(&[slab], 32).unwrap();
    let count = grid.iter().filter(|&&g| g != 0).count() as f64;
    (count, 8.0 * half[0] * half[1] * half[2] * 32f64.powi(3))
}

#[test]
fn rotated_slab_volume() {
    for axis in [Axis::X, Axis::Y, Axis::Z] {
        let (count, analytic) = rotated_slab([0.5; 3], [0.3, 0.1, 0.3], axis);
        assert!((count / analytic - 1.0).abs() <= 0.10, "{axis:?}: {count} vs {analytic}");
    }
    // Center sampling of a 45 degree slab aliases with the lattice diagonals,
    // so single slabs can be off by more than 10%; the error averages out.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut total = 0.0;
    let trials = 60;
    for i in 0..trials {
        let half = [rng.random_range(0.15..0.3), rng.random_range(0.08..0.12), rng.random_range(0.15..0.3)];
        let center = std::array::from_fn(|_| 0.5 + rng.random_range(0.0..1.0) / 32.0);
        let (count, analytic) = rotated_slab(center, half, [Axis::X, Axis::Y, Axis::Z][i % 3]);
        assert!((count / analytic - 1.0).abs() <= 0.2);
        total += count / analytic;
    }
    assert!((total / trials as f64 - 1.0).abs() <= 0.03, "{}", total / trials as f64);
}

fn full_sittable(seed: u64) -> partafford::data::VoxelSample {
    let mut cfg = GenConfig::default();
    cfg.sittable.p_backrest = 1.0;
    cfg.sittable.p_armrests = 1.0;
    generate_object(Category::Sittable, seed, &cfg).unwrap()
}

#[test]
fn removing_the_backrest_drops_its_label() {
    let s = full_sittable(5);
    let backrest = s.part_affordances.iter().position(|&a| a == id("backrest")).unwrap() as u8 + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seen = false;
    for _ in 0..200 {
        let (out, removed) = augment_remove_parts(&s, &mut rng, 1.0);
        assert!(removed);
        out.validate().unwrap();
        let kept_backrest = out.affordance_set().contains(&id("backrest"));
        let removed_voxels = s.part_grid.iter().zip(&out.part_grid).any(|(&a, &b)| a == backrest && b == 0);
        assert_eq!(kept_backrest, !removed_voxels);
        seen |= !kept_backrest;
        // core parts always survive
        assert!(out.affordance_set().contains(&id("sittable")));
        assert!(out.affordance_set().contains(&id("framework")));
    }
    assert!(seen);
}

#[test]
fn samples_without_removable_parts_are_unchanged() {
    let mut cfg = GenConfig::default();
    cfg.sittable.p_backrest = 0.0;
    cfg.sittable.p_armrests = 0.0;
    let s = generate_object(Category::Sittable, 1, &cfg).unwrap();
    assert!(removal_units(&s).is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (out, removed) = augment_remove_parts(&s, &mut rng, 1.0);
        assert!(!removed);
        assert_eq!(out, s);
    }
}

#[test]
fn support_loses_only_its_back_leg_pair() {
    let s = generate_object(Category::Support, 2, &GenConfig::default()).unwrap();
    let units = removal_units(&s);
    assert_eq!(units.len(), 1);
    assert!(units[0].back_half);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (out, removed) = augment_remove_parts(&s, &mut rng, 1.0);
    assert!(removed);
    assert_eq!(out.affordance_set(), s.affordance_set());
    assert!(out.occupied_count() < s.occupied_count());
    assert!(out.part_grid.iter().enumerate().all(|(i, &p)| p != 2 || i % s.res >= s.res / 2));
}

#[test]
fn augmentation_frequency() {
    let s = full_sittable(9);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut hits = 0;
    for _ in 0..10_000 {
        let (out, removed) = augment_remove_parts(&s, &mut rng, 0.3);
        hits += removed as usize;
        assert!(out.occupied_count() > 0 && !out.affordance_set().is_empty());
    }
    let freq = hits as f64 / 10_000.0;
    assert!((freq - 0.30).abs() <= 0.02, "{freq}");
}

#[test]
fn file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    for category in Category::ALL {
        let s = generate_object(category, 11, &GenConfig::default()).unwrap();
        let path = dir.path().join(format!("{}.pavs", s.id));
        partafford::data::write_sample(&path, &s).unwrap();
        assert_eq!(read_sample(&path).unwrap(), s);
    }

    let s = generate_object(Category::Sittable, 4, &GenConfig::with_res(8)).unwrap();
    let bytes = encode_sample(&s).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_sample(&bad, "x"), Err(Error::Format(_))));
    assert!(matches!(decode_sample(&bytes[..bytes.len() - 3], "x"), Err(Error::Truncated { .. })));
    assert!(matches!(decode_sample(&bytes[..5], "x"), Err(Error::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_sample(&bad, "x"), Err(Error::Version { found: 9, .. })));
    let mut bad = bytes.clone();
    // declare a larger grid than the payload holds
    bad[6] = 9;
    assert!(matches!(decode_sample(&bad, "x"), Err(Error::Truncated { .. })));
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] = 200;
    assert!(matches!(decode_sample(&bad, "x"), Err(Error::Format(_))));
}

#[test]
fn split_sizes_and_determinism() {
    for (n, expect) in [(10, (7, 1, 2)), (100, (70, 10, 20)), (33, (23, 3, 7))] {
        let s = build_split(n, 5, None).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), expect);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert_eq!(build_split(n, 5, None).unwrap(), s);
    }
    assert_ne!(build_split(100, 1, None).unwrap(), build_split(100, 2, None).unwrap());
    assert!(build_split(9, 0, None).is_err());
    let s = build_split(704, 0, Some(SplitSizes { train: 512, val: 64, test: 128 })).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (512, 64, 128));
}

#[test]
fn dataset_generation_is_reproducible() {
    let spec = DatasetSpec {
        category: Category::Openable,
        count: 20,
        seed: 3,
        split: None,
        gen: GenConfig::with_res(16),
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let records = generate_dataset(&spec, a.path()).unwrap();
    generate_dataset(&spec, b.path()).unwrap();
    assert_eq!(records.len(), 20);
    for entry in walk(a.path()) {
        let rel = entry.strip_prefix(a.path()).unwrap();
        assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
    }
    let ds = Dataset::load(a.path()).unwrap();
    assert_eq!(ds.split(SplitTag::Train).len(), 14);
    assert_eq!(ds.split(SplitTag::Val).len(), 2);
    assert_eq!(ds.split(SplitTag::Test).len(), 4);
    assert_eq!(ds.res(), 16);
    assert_eq!(ds.category(), Category::Openable);
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}
