use rustc_hash::FxHashMap;

use crate::coord::{add, cube3, parent, Coord};

/// Marks an absent neighbour.
pub(crate) const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// 3³ kernel, output coordinates = input coordinates.
    Submanifold,
    /// 2³ kernel, stride 2, onto the parent coordinates.
    Down,
    /// Transposed 2³ kernel, stride 2, onto a recorded finer coordinate set.
    Up,
}

impl ConvKind {
    pub fn kvol(self) -> usize {
        match self {
            ConvKind::Submanifold => 27,
            ConvKind::Down | ConvKind::Up => 8,
        }
    }
}

/// For every output row, the input row at each kernel slot (or [`NONE`]).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMap {
    pub n_in: usize,
    pub n_out: usize,
    pub kvol: usize,
    pub(crate) nbr: Vec<u32>,
}

fn index(coords: &[Coord]) -> FxHashMap<Coord, u32> {
    let mut m = FxHashMap::default();
    m.reserve(coords.len());
    for (i, &c) in coords.iter().enumerate() {
        m.insert(c, i as u32);
    }
    m
}

fn child_offset(d: usize) -> Coord {
    [(d >> 2) as i32 & 1, (d >> 1) as i32 & 1, d as i32 & 1]
}

impl KernelMap {
    pub fn with_offsets(input: &[Coord], output: &[Coord], offsets: &[Coord]) -> Self {
        let idx = index(input);
        let kvol = offsets.len();
        let mut nbr = Vec::with_capacity(output.len() * kvol);
        for &c in output {
            for &o in offsets {
                nbr.push(idx.get(&add(c, o)).copied().unwrap_or(NONE));
            }
        }
        Self { n_in: input.len(), n_out: output.len(), kvol, nbr }
    }

    pub fn submanifold(coords: &[Coord]) -> Self {
        Self::with_offsets(coords, coords, &cube3())
    }

    /// Map from `fine` onto `coarse` (which must contain every parent of `fine`).
    pub fn down(fine: &[Coord], coarse: &[Coord]) -> Self {
        let idx = index(fine);
        let mut nbr = Vec::with_capacity(coarse.len() * 8);
        for &p in coarse {
            for d in 0..8 {
                let c = add([2 * p[0], 2 * p[1], 2 * p[2]], child_offset(d));
                nbr.push(idx.get(&c).copied().unwrap_or(NONE));
            }
        }
        Self { n_in: fine.len(), n_out: coarse.len(), kvol: 8, nbr }
    }

    /// Transposed map from `coarse` back onto `fine`.
    pub fn up(coarse: &[Coord], fine: &[Coord]) -> Self {
        let idx = index(coarse);
        let mut nbr = vec![NONE; fine.len() * 8];
        for (i, &c) in fine.iter().enumerate() {
            let p = parent(c);
            let d = ((c[0] - 2 * p[0]) << 2 | (c[1] - 2 * p[1]) << 1 | (c[2] - 2 * p[2])) as usize;
            if let Some(&j) = idx.get(&p) {
                nbr[i * 8 + d] = j;
            }
        }
        Self { n_in: coarse.len(), n_out: fine.len(), kvol: 8, nbr }
    }

    pub fn neighbours(&self, row: usize) -> &[u32] {
        &self.nbr[row * self.kvol..(row + 1) * self.kvol]
    }
}
