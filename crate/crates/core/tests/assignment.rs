use partafford::assignment::{
    binarize_parts, hungarian_min_cost, mean_part_iou, set_ap, shape_mse, CostMatrix, PartAssignment,
};
use partafford::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive minimum over all injective maps from the smaller side.
fn brute_force(cost: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    let rows = cost.len();
    let cols = cost[0].len();
    let k = rows.min(cols);
    let mut best = (f64::INFINITY, Vec::new());
    let mut used_r = vec![false; rows];
    let mut used_c = vec![false; cols];
    fn rec(
        cost: &[Vec<f64>],
        k: usize,
        start: usize,
        used_r: &mut Vec<bool>,
        used_c: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        sum: f64,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if cur.len() == k {
            if sum < best.0 - 1e-12 {
                *best = (sum, cur.clone());
            }
            return;
        }
        for r in start..cost.len() {
            if used_r[r] {
                continue;
            }
            for c in 0..cost[0].len() {
                if used_c[c] {
                    continue;
                }
                used_r[r] = true;
                used_c[c] = true;
                cur.push((r, c));
                rec(cost, k, r + 1, used_r, used_c, cur, sum + cost[r][c], best);
                cur.pop();
                used_r[r] = false;
                used_c[c] = false;
            }
        }
    }
    rec(cost, k, 0, &mut used_r, &mut used_c, &mut Vec::new(), 0.0, &mut best);
    best
}

fn random_costs(rng: &mut ChaCha8Rng, rows: usize, cols: usize, levels: Option<u32>) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| match levels {
                    Some(l) => rng.random_range(0..l) as f64,
                    None => rng.random_range(0.0..10.0),
                })
                .collect()
        })
        .collect()
}

#[test]
fn spec_examples() {
    let a = hungarian_min_cost(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap());
    assert_eq!(a.matches, vec![(0, 0), (1, 1)]);
    assert_eq!(a.total_cost, 2.0);

    let mut diag = vec![vec![3.0; 3]; 3];
    for (i, row) in diag.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    let a = hungarian_min_cost(&CostMatrix::from_rows(&diag).unwrap());
    assert_eq!(a.matches, vec![(0, 0), (1, 1), (2, 2)]);
    assert_eq!(a.total_cost, 0.0);

    assert!(matches!(CostMatrix::new(0, 3, vec![]), Err(Error::EmptyCostMatrix)));
    assert!(CostMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
}

#[test]
fn random_five_by_five_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let c = random_costs(&mut rng, 5, 5, None);
        let a = hungarian_min_cost(&CostMatrix::from_rows(&c).unwrap());
        let (best, _) = brute_force(&c);
        assert!((a.total_cost - best).abs() < 1e-9);
    }
}

#[test]
fn ties_return_the_lexicographically_smallest_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..300 {
        let rows = rng.random_range(1..5);
        let cols = rng.random_range(1..5);
        // few distinct values, so many optima tie
        let c = random_costs(&mut rng, rows, cols, Some(3));
        let a = hungarian_min_cost(&CostMatrix::from_rows(&c).unwrap());
        // brute force enumerates in lexicographic order and keeps the first strict minimum
        let (best, first) = brute_force(&c);
        assert_eq!(a.total_cost, best);
        assert_eq!(a.matches, first, "{c:?}");
    }
}

fn part_grid_fixture() -> (Vec<u8>, PartAssignment) {
    // 4x4x4 grid split into three parts along x, with one empty slab
    let mut grid = vec![0u8; 64];
    for (i, g) in grid.iter_mut().enumerate() {
        *g = match i / 16 {
            0 => 1,
            1 => 2,
            2 => 3,
            _ => 0,
        };
    }
    let slot = grid.iter().map(|&k| (k as usize).saturating_sub(1)).collect();
    let occupied = grid.iter().map(|&k| k != 0).collect();
    (grid, PartAssignment { slots: 4, slot, occupied })
}

#[test]
fn mean_iou_examples() {
    let (grid, exact) = part_grid_fixture();
    assert_eq!(mean_part_iou(&exact, &grid).unwrap(), 1.0);

    let mut permuted = exact.clone();
    for s in permuted.slot.iter_mut() {
        *s = [2, 3, 1, 0][*s];
    }
    assert_eq!(mean_part_iou(&permuted, &grid).unwrap(), 1.0);

    let disjoint = PartAssignment {
        slots: 4,
        slot: vec![0; 64],
        occupied: grid.iter().map(|&k| k == 0).collect(),
    };
    assert_eq!(mean_part_iou(&disjoint, &grid).unwrap(), 0.0);

    // one slot covering two parts: matched IoU 1/2 for one of them, other unmatched
    let mut merged = exact.clone();
    for s in merged.slot.iter_mut() {
        if *s == 1 {
            *s = 0;
        }
    }
    let v = mean_part_iou(&merged, &grid).unwrap();
    assert!((v - (0.5 + 1.0) / 3.0).abs() < 1e-12);

    assert!(mean_part_iou(&exact, &[0u8; 64]).is_err());
}

#[test]
fn binarize_examples() {
    // three voxels, three slots
    let combined = [0.9, 0.4, 0.7];
    let masks = [
        0.0, 0.2, 0.5, // slot 0
        0.0, 0.3, 0.5, // slot 1
        1.0, 0.5, 0.0, // slot 2
    ];
    let p = binarize_parts(&combined, &masks, 3).unwrap();
    assert_eq!(p.slot, vec![2, 2, 0]);
    assert_eq!(p.occupied, vec![true, false, true]);
}

#[test]
fn mse_examples() {
    let occ: Vec<bool> = (0..32768).map(|i| i % 3 == 0).collect();
    let exact: Vec<f64> = occ.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
    assert_eq!(shape_mse(&exact, &occ).unwrap(), 0.0);
    assert_eq!(shape_mse(&vec![0.5; 32768], &occ).unwrap(), 0.25);
    let mut one_wrong = exact.clone();
    one_wrong[1] = 1.0;
    assert_eq!(shape_mse(&one_wrong, &occ).unwrap(), 1.0 / 32768.0);
}

#[test]
fn set_ap_examples() {
    let gt = vec![vec![1, 4], vec![2, 7]];
    assert_eq!(set_ap(&gt, &gt).unwrap(), 1.0);
    assert_eq!(set_ap(&[vec![1, 4], vec![2, 7, 3]], &gt).unwrap(), 0.5);
    assert_eq!(set_ap(&[vec![4, 1, 1, 0], vec![7, 2, 2]], &gt).unwrap(), 1.0);
    assert!(set_ap(&[], &[]).is_err());
    assert!(set_ap(&[vec![1]], &gt).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn optimal_against_every_enumerated_matching(rows in 1usize..7, cols in 1usize..7, seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_costs(&mut rng, rows, cols, None);
        let a = hungarian_min_cost(&CostMatrix::from_rows(&c).unwrap());
        let (best, _) = brute_force(&c);
        prop_assert!((a.total_cost - best).abs() < 1e-9);
        prop_assert_eq!(a.matches.len(), rows.min(cols));
        let mut seen_c: Vec<usize> = a.matches.iter().map(|m| m.1).collect();
        seen_c.sort();
        seen_c.dedup();
        prop_assert_eq!(seen_c.len(), a.matches.len());
    }

    #[test]
    fn row_and_column_shifts_keep_the_assignment(n in 1usize..6, seed in 0u64..100_000, shift in -5.0f64..5.0, pick in 0usize..6, by_row: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_costs(&mut rng, n, n, None);
        let k = pick % n;
        let mut shifted = c.clone();
        for (i, row) in shifted.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if (by_row && i == k) || (!by_row && j == k) {
                    *v += shift;
                }
            }
        }
        let a = hungarian_min_cost(&CostMatrix::from_rows(&c).unwrap());
        let b = hungarian_min_cost(&CostMatrix::from_rows(&shifted).unwrap());
        prop_assert_eq!(&a.matches, &b.matches);
        prop_assert!((b.total_cost - a.total_cost - shift).abs() < 1e-9);
    }

    #[test]
    fn mean_iou_ignores_slot_order(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 125;
        let grid: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
        prop_assume!(grid.iter().any(|&k| k != 0));
        let pred = PartAssignment {
            slots: 4,
            slot: (0..n).map(|_| rng.random_range(0..4)).collect(),
            occupied: (0..n).map(|_| rng.random_bool(0.6)).collect(),
        };
        let perm = [3usize, 0, 2, 1];
        let mut permuted = pred.clone();
        for s in permuted.slot.iter_mut() {
            *s = perm[*s];
        }
        let a = mean_part_iou(&pred, &grid).unwrap();
        let b = mean_part_iou(&permuted, &grid).unwrap();
        prop_assert!((a - b).abs() < 1e-12);

        let as_pred = PartAssignment {
            slots: 4,
            slot: grid.iter().map(|&k| k as usize).collect(),
            occupied: grid.iter().map(|&k| k != 0).collect(),
        };
        prop_assert_eq!(mean_part_iou(&as_pred, &grid).unwrap(), 1.0);
    }
}
