//! Property tests for domain decomposition, region algebra and object
//! registration.

use std::collections::BTreeMap;

use gridflow::data::{register_objects, Variable};
use gridflow::region::{
    count_touched_instances, decompose_partition_with_width, enumerate_domain_regions, DomainSpec, PartitionIndex,
    Region, MAX_DIMS,
};
use proptest::prelude::*;

/// (extent, partitions, ghost width) with every partition wide enough
/// for its ghost strips.
fn domain() -> impl Strategy<Value = (Vec<i64>, Vec<u32>, i64)> {
    (1usize..=3, 0i64..=2).prop_flat_map(|(dims, w)| {
        let axis = (1u32..=4, (2 * w + 1)..=(2 * w + 3));
        (prop::collection::vec(axis, dims), Just(w)).prop_map(|(axes, w)| {
            let parts: Vec<u32> = axes.iter().map(|(p, _)| *p).collect();
            let extent: Vec<i64> = axes.iter().map(|(p, side)| *p as i64 * side).collect();
            (extent, parts, w)
        })
    })
}

fn spec(extent: &[i64], parts: &[u32], w: i64) -> DomainSpec {
    DomainSpec::new(extent, parts).unwrap().with_default_ghost_width(w).unwrap()
}

/// Strips along one axis for partition `i` of `p`: (owned, touched).
fn strips_on_axis(i: u32, p: u32, w: i64) -> (usize, usize) {
    if p == 1 || w == 0 {
        return (1, 1);
    }
    let missing = (i == 0) as usize + (i + 1 == p) as usize;
    (3 - missing, 5 - 2 * missing)
}

fn region() -> impl Strategy<Value = Region> {
    (1usize..=3).prop_flat_map(|d| {
        prop::collection::vec((-6i64..6, 1i64..6), d).prop_map(|axes| {
            let lo: Vec<i64> = axes.iter().map(|(l, _)| *l).collect();
            let hi: Vec<i64> = axes.iter().map(|(l, n)| l + n).collect();
            Region::new(&lo, &hi).unwrap()
        })
    })
}

fn same_dims_pair() -> impl Strategy<Value = (Region, Region, Region)> {
    (1usize..=3).prop_flat_map(|d| {
        let r = move || {
            prop::collection::vec((-6i64..6, 1i64..8), d).prop_map(|axes| {
                let lo: Vec<i64> = axes.iter().map(|(l, _)| *l).collect();
                let hi: Vec<i64> = axes.iter().map(|(l, n)| l + n).collect();
                Region::new(&lo, &hi).unwrap()
            })
        };
        (r(), r(), r())
    })
}

fn cell_count_in_both(a: &Region, b: &Region) -> u64 {
    a.cells().filter(|c| b.contains_cell(c)).count() as u64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn regions_tile_the_domain((extent, parts, w) in domain()) {
        let d = spec(&extent, &parts, w);
        let regions = enumerate_domain_regions(&d, w).unwrap();
        let bounds = d.bounds();
        let total: u64 = regions.iter().map(Region::volume).sum();
        prop_assert_eq!(total, extent.iter().product::<i64>() as u64);
        for (i, a) in regions.iter().enumerate() {
            prop_assert!(bounds.contains(a));
            for b in &regions[i + 1..] {
                prop_assert_eq!(a.overlap(b), 0, "{:?} overlaps {:?}", a, b);
            }
        }
        // brute force: every cell is covered exactly once
        let mut hits: BTreeMap<[i64; MAX_DIMS], u32> = BTreeMap::new();
        for r in &regions {
            for c in r.cells() {
                *hits.entry(c).or_default() += 1;
            }
        }
        prop_assert_eq!(hits.len() as u64, total);
        prop_assert!(hits.values().all(|n| *n == 1));
    }

    #[test]
    fn strip_counts_follow_neighbours((extent, parts, w) in domain()) {
        let d = spec(&extent, &parts, w);
        let mut touched_total = 0;
        for idx in d.partition_indices() {
            let dec = decompose_partition_with_width(&d, idx, w).unwrap();
            let (mut owned, mut touched) = (1, 1);
            for a in 0..extent.len() {
                let (o, t) = strips_on_axis(idx.0[a], parts[a], w);
                owned *= o;
                touched *= t;
            }
            prop_assert_eq!(dec.owned.len(), owned);
            prop_assert_eq!(dec.touched.len(), touched);
            touched_total += touched;
            let interior = (0..extent.len()).all(|a| idx.0[a] > 0 && idx.0[a] + 1 < parts[a]);
            if interior && w > 0 {
                prop_assert_eq!(owned, 3usize.pow(extent.len() as u32));
                prop_assert_eq!(touched, 5usize.pow(extent.len() as u32));
            }
            let owned_volume: u64 = dec.owned.iter().map(Region::volume).sum();
            prop_assert_eq!(owned_volume, d.partition_box(idx).unwrap().volume());
        }
        prop_assert_eq!(count_touched_instances(&d, w).unwrap(), touched_total);
    }

    #[test]
    fn mirror_partitions_decompose_as_mirrors((extent, parts, w) in domain(), axis_pick in 0usize..3) {
        let d = spec(&extent, &parts, w);
        let axis = axis_pick % extent.len();
        for idx in d.partition_indices() {
            let mut m = idx;
            m.0[axis] = parts[axis] - 1 - idx.0[axis];
            let here = decompose_partition_with_width(&d, idx, w).unwrap();
            let there = decompose_partition_with_width(&d, PartitionIndex(m.0), w).unwrap();
            let mut mirrored: Vec<Region> = here.touched.iter().map(|r| r.mirrored(axis, extent[axis])).collect();
            mirrored.sort();
            prop_assert_eq!(mirrored, there.touched);
            let mut mirrored: Vec<Region> = here.owned.iter().map(|r| r.mirrored(axis, extent[axis])).collect();
            mirrored.sort();
            prop_assert_eq!(mirrored, there.owned);
        }
    }

    #[test]
    fn mirror_is_an_involution(r in region(), extent in 1i64..20) {
        for a in 0..r.dims() {
            let m = r.mirrored(a, extent);
            prop_assert_eq!(m.volume(), r.volume());
            prop_assert_eq!(m.mirrored(a, extent), r);
        }
    }

    #[test]
    fn intersect_laws((a, b, c) in same_dims_pair()) {
        let ab = a.intersect(&b).unwrap();
        prop_assert_eq!(ab, b.intersect(&a).unwrap());
        prop_assert_eq!(a.intersect(&a).unwrap(), Some(a));
        prop_assert_eq!(a.overlap(&b), cell_count_in_both(&a, &b));
        prop_assert_eq!(ab.map_or(0, |r| r.volume()), a.overlap(&b));
        if let Some(x) = ab {
            prop_assert!(a.contains(&x) && b.contains(&x));
        }
        let left = ab.and_then(|x| x.intersect(&c).unwrap());
        let right = b.intersect(&c).unwrap().and_then(|y| a.intersect(&y).unwrap());
        prop_assert_eq!(left, right);
        let hull = a.bounding(&b).unwrap();
        prop_assert!(hull.contains(&a) && hull.contains(&b));
    }

    #[test]
    fn registration_is_deterministic((extent, parts, w) in domain()) {
        let vars = [Variable::cell("u"), Variable::cell("v"), Variable::partition_scalar("dt")];
        let one = register_objects(&spec(&extent, &parts, w), &vars).unwrap();
        let two = register_objects(&spec(&extent, &parts, w), &vars).unwrap();
        prop_assert_eq!(one.objects(), two.objects());
        let regions = enumerate_domain_regions(&spec(&extent, &parts, w), w).unwrap().len();
        let partitions = parts.iter().product::<u32>() as usize;
        prop_assert_eq!(one.len(), 2 * regions + partitions);
    }
}
