//! Integer lattice helpers shared by the voxel, network and sampler modules.

use std::collections::BTreeSet;

use rustc_hash::FxHashSet;

/// A cell of the integer lattice.
pub type Coord = [i32; 3];

pub fn l1(a: Coord, b: Coord) -> i32 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

pub fn add(a: Coord, b: Coord) -> Coord {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn in_bounds(c: Coord, resolution: u32) -> bool {
    let r = resolution as i32;
    c.iter().all(|&v| (0..r).contains(&v))
}

/// Parent cell one level coarser (stride 2).
pub fn parent(c: Coord) -> Coord {
    [c[0].div_euclid(2), c[1].div_euclid(2), c[2].div_euclid(2)]
}

/// Offsets `o` with `|o|_1 <= r`, in lexicographic order.
pub fn l1_ball(r: i32) -> Vec<Coord> {
    let mut out = Vec::new();
    for x in -r..=r {
        for y in -r..=r {
            for z in -r..=r {
                if x.abs() + y.abs() + z.abs() <= r {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Offsets of the 3x3x3 cube, in lexicographic order (center is index 13).
pub fn cube3() -> Vec<Coord> {
    let mut out = Vec::with_capacity(27);
    for x in -1..=1 {
        for y in -1..=1 {
            for z in -1..=1 {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Union of L1 balls of radius `r` around `cells`, clipped to `[0, resolution)^3`,
/// returned sorted.
pub fn dilate<'a, I>(cells: I, r: i32, resolution: u32) -> Vec<Coord>
where
    I: IntoIterator<Item = &'a Coord>,
{
    let ball = l1_ball(r);
    let mut set = FxHashSet::default();
    for &c in cells {
        for &o in &ball {
            let n = add(c, o);
            if in_bounds(n, resolution) {
                set.insert(n);
            }
        }
    }
    let mut out: Vec<Coord> = set.into_iter().collect();
    out.sort_unstable();
    out
}

/// Sorted set of parents of `cells`.
pub fn parents<'a, I>(cells: I) -> Vec<Coord>
where
    I: IntoIterator<Item = &'a Coord>,
{
    let set: BTreeSet<Coord> = cells.into_iter().map(|&c| parent(c)).collect();
    set.into_iter().collect()
}
