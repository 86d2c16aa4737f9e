//! Voxel geometry of the 3x3x3 target structure, problem instances and their
//! generator, and the occupancy features fed to the network.
//!
//! Voxels are indexed row-major with `x` fastest: `i = x + 3y + 9z`.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Edge length of the cubic target structure, in unit cubes.
pub const GRID: i32 = 3;
/// Number of voxels in the target structure (the feature width `d`).
pub const VOXELS: usize = 27;
/// Largest part count an instance may hold (27 cells / 3 cells per part).
pub const MAX_PARTS: usize = 9;
/// Smallest admissible part.
pub const MIN_PART_CELLS: usize = 3;
/// Part counts the generator accepts.
pub const GENERATED_PART_COUNTS: [usize; 4] = [4, 5, 6, 7];
/// Default dataset sizes per part count, in the order of [`GENERATED_PART_COUNTS`].
pub const DEFAULT_INSTANCE_COUNTS: [usize; 4] = [272, 301, 483, 728];

const GENERATION_ATTEMPTS: usize = 10_000;
const NO_OWNER: u8 = u8::MAX;

/// The six face-neighbor unit steps, in a fixed order (+x, -x, +y, -y, +z, -z).
pub const FACE_STEPS: [[i32; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("part count {m} is outside 1..={max}", max = MAX_PARTS)]
    PartCount { m: usize },
    #[error("generator supports part counts 4..=7, got {m}")]
    UnsupportedPartCount { m: usize },
    #[error("field `m` is {declared} but {actual} parts are listed")]
    PartCountMismatch { declared: usize, actual: usize },
    #[error("field `grid` must be [3, 3, 3], got {0:?}")]
    GridDims(Vec<usize>),
    #[error("parts[{index}].id is {found}, expected {index}")]
    PartId { index: usize, found: usize },
    #[error("parts[{part}].cells contains {cell} outside the 3x3x3 grid")]
    CellOutOfGrid { part: usize, cell: Cell },
    #[error("parts[{second}].cells overlaps parts[{first}] at {cell}")]
    Overlap { cell: Cell, first: usize, second: usize },
    #[error("parts cover {covered} of 27 cells")]
    Uncovered { covered: usize },
    #[error("parts[{part}].cells has {size} cells, fewer than 3")]
    TooSmall { part: usize, size: usize },
    #[error("parts[{part}].cells is not face-connected")]
    Disconnected { part: usize },
    #[error("instance generation failed after {attempts} attempts")]
    GenerationFailed { attempts: usize },
    #[error("malformed instance document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Integer voxel coordinate. Inside the target structure each axis lies in `[0, 3)`;
/// poses during insertion search may leave that box.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i32; 3]", into = "[i32; 3]")]
pub struct Cell {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Cell { x, y, z }
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < VOXELS, "voxel index {i} out of range");
        let i = i as i32;
        Cell::new(i % GRID, (i / GRID) % GRID, i / (GRID * GRID))
    }

    pub fn in_grid(self) -> bool {
        (0..GRID).contains(&self.x) && (0..GRID).contains(&self.y) && (0..GRID).contains(&self.z)
    }

    /// Row-major voxel index, `None` outside the grid.
    pub fn index(self) -> Option<usize> {
        self.in_grid()
            .then(|| (self.x + GRID * self.y + GRID * GRID * self.z) as usize)
    }

    pub fn shifted(self, d: [i32; 3]) -> Self {
        Cell::new(self.x + d[0], self.y + d[1], self.z + d[2])
    }

    /// Center of the unit cube in continuous coordinates.
    pub fn center(self) -> [f64; 3] {
        [
            f64::from(self.x) + 0.5,
            f64::from(self.y) + 0.5,
            f64::from(self.z) + 0.5,
        ]
    }

    /// Sort key matching voxel index order.
    fn key(self) -> (i32, i32, i32) {
        (self.z, self.y, self.x)
    }
}

impl fmt::Debug for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<[i32; 3]> for Cell {
    fn from(c: [i32; 3]) -> Self {
        Cell::new(c[0], c[1], c[2])
    }
}

impl From<Cell> for [i32; 3] {
    fn from(c: Cell) -> Self {
        [c.x, c.y, c.z]
    }
}

/// A rigid part: its unit cubes at their target placement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Part {
    pub id: usize,
    pub cells: Vec<Cell>,
}

impl Part {
    /// Builds a part with its cells in canonical (voxel index) order.
    pub fn new(id: usize, cells: impl IntoIterator<Item = Cell>) -> Self {
        let mut cells: Vec<Cell> = cells.into_iter().collect();
        cells.sort_by_key(|c| c.key());
        Part { id, cells }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Centroid of the cube centers (uniform density).
    pub fn center_of_mass(&self) -> [f64; 3] {
        let n = self.cells.len() as f64;
        let mut acc = [0.0; 3];
        for c in &self.cells {
            let p = c.center();
            acc[0] += p[0];
            acc[1] += p[1];
            acc[2] += p[2];
        }
        [acc[0] / n, acc[1] / n, acc[2] / n]
    }

    pub fn is_face_connected(&self) -> bool {
        is_face_connected(&self.cells)
    }
}

pub(crate) fn is_face_connected(cells: &[Cell]) -> bool {
    let Some(&first) = cells.first() else {
        return true;
    };
    let mut seen = vec![false; cells.len()];
    seen[0] = true;
    let mut stack = vec![first];
    let mut reached = 1;
    while let Some(c) = stack.pop() {
        for step in FACE_STEPS {
            let n = c.shifted(step);
            if let Some(j) = cells.iter().position(|&o| o == n) {
                if !seen[j] {
                    seen[j] = true;
                    reached += 1;
                    stack.push(n);
                }
            }
        }
    }
    reached == cells.len()
}

/// Set of placed parts, bit `i` set when part `i` is in the subassembly.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubassemblyMask(u32);

impl SubassemblyMask {
    pub const EMPTY: SubassemblyMask = SubassemblyMask(0);

    pub const fn from_bits(bits: u32) -> Self {
        SubassemblyMask(bits)
    }

    pub fn full(m: usize) -> Self {
        assert!(m <= MAX_PARTS);
        SubassemblyMask((1u32 << m) - 1)
    }

    pub fn from_parts(parts: impl IntoIterator<Item = usize>) -> Self {
        parts.into_iter().fold(Self::EMPTY, |acc, p| acc.with(p))
    }

    pub const fn bits(self) -> u32 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn contains(self, p: usize) -> bool {
        self.0 & (1 << p) != 0
    }

    #[must_use]
    pub fn with(self, p: usize) -> Self {
        SubassemblyMask(self.0 | (1 << p))
    }

    #[must_use]
    pub fn without(self, p: usize) -> Self {
        SubassemblyMask(self.0 & !(1 << p))
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_full(self, m: usize) -> bool {
        self == Self::full(m)
    }

    pub fn is_subset_of(self, other: SubassemblyMask) -> bool {
        self.0 & !other.0 == 0
    }

    /// True when no bit at or above `m` is set.
    pub fn is_valid_for(self, m: usize) -> bool {
        m <= MAX_PARTS && self.0 >> m == 0
    }

    /// Placed parts, ascending.
    pub fn parts(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&p| self.contains(p))
    }

    /// Parts of an `m`-part instance not yet placed, ascending.
    pub fn missing(self, m: usize) -> impl Iterator<Item = usize> {
        (0..m).filter(move |&p| !self.contains(p))
    }
}

impl fmt::Debug for SubassemblyMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.parts()).finish()
    }
}

/// A partition of the 27-voxel target structure into `m` parts.
#[derive(Clone, PartialEq, Eq)]
pub struct Instance {
    parts: Vec<Part>,
    owner: [u8; VOXELS],
}

impl fmt::Debug for Instance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Instance").field("parts", &self.parts).finish()
    }
}

impl Instance {
    /// Validates and builds an instance: ids `0..m` in order, cells inside the grid,
    /// disjoint parts covering all 27 voxels, each part face-connected with at least
    /// three cells.
    pub fn new(parts: Vec<Part>) -> Result<Self, WorldError> {
        let m = parts.len();
        if m == 0 || m > MAX_PARTS {
            return Err(WorldError::PartCount { m });
        }
        let mut owner = [NO_OWNER; VOXELS];
        for (index, part) in parts.iter().enumerate() {
            if part.id != index {
                return Err(WorldError::PartId { index, found: part.id });
            }
            for &cell in &part.cells {
                let i = cell
                    .index()
                    .ok_or(WorldError::CellOutOfGrid { part: index, cell })?;
                if owner[i] != NO_OWNER {
                    return Err(WorldError::Overlap {
                        cell,
                        first: owner[i] as usize,
                        second: index,
                    });
                }
                owner[i] = index as u8;
            }
        }
        let covered = owner.iter().filter(|&&o| o != NO_OWNER).count();
        if covered != VOXELS {
            return Err(WorldError::Uncovered { covered });
        }
        for (index, part) in parts.iter().enumerate() {
            if part.len() < MIN_PART_CELLS {
                return Err(WorldError::TooSmall { part: index, size: part.len() });
            }
            if !part.is_face_connected() {
                return Err(WorldError::Disconnected { part: index });
            }
        }
        let parts = parts
            .into_iter()
            .map(|p| Part::new(p.id, p.cells))
            .collect();
        Ok(Instance { parts, owner })
    }

    /// Builds an instance from a 27-entry owner table (`owner[i]` = part id of voxel `i`).
    pub fn from_owner_table(owner: &[usize; VOXELS]) -> Result<Self, WorldError> {
        let m = owner.iter().max().map_or(0, |&o| o + 1);
        let parts = (0..m)
            .map(|id| {
                Part::new(
                    id,
                    (0..VOXELS)
                        .filter(|&i| owner[i] == id)
                        .map(Cell::from_index),
                )
            })
            .collect();
        Instance::new(parts)
    }

    /// Number of parts `M`.
    pub fn m(&self) -> usize {
        self.parts.len()
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    pub fn part(&self, id: usize) -> &Part {
        &self.parts[id]
    }

    pub fn full_mask(&self) -> SubassemblyMask {
        SubassemblyMask::full(self.m())
    }

    /// Part occupying a grid cell, `None` outside the grid.
    pub fn owner_of(&self, cell: Cell) -> Option<usize> {
        cell.index().map(|i| self.owner[i] as usize)
    }

    /// Voxels covered by the parts of `v`.
    pub fn occupancy(&self, v: SubassemblyMask) -> Occupancy {
        let mut occ = [false; VOXELS];
        for (slot, &o) in occ.iter_mut().zip(self.owner.iter()) {
            *slot = v.contains(o as usize);
        }
        Occupancy(occ)
    }

    pub fn to_document(&self) -> InstanceDocument {
        InstanceDocument {
            m: self.m(),
            grid: vec![GRID as usize; 3],
            parts: self.parts.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_document())
            .expect("instance document serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        let doc: InstanceDocument = serde_json::from_str(text)?;
        Instance::try_from(doc)
    }
}

/// On-disk form of an [`Instance`]: `{ "m", "grid", "parts": [{ "id", "cells": [[x,y,z], ...] }] }`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDocument {
    pub m: usize,
    pub grid: Vec<usize>,
    pub parts: Vec<Part>,
}

impl TryFrom<InstanceDocument> for Instance {
    type Error = WorldError;

    fn try_from(doc: InstanceDocument) -> Result<Self, WorldError> {
        if doc.grid != [GRID as usize; 3] {
            return Err(WorldError::GridDims(doc.grid));
        }
        if doc.m != doc.parts.len() {
            return Err(WorldError::PartCountMismatch {
                declared: doc.m,
                actual: doc.parts.len(),
            });
        }
        Instance::new(doc.parts)
    }
}

pub fn save_instance(path: impl AsRef<Path>, instance: &Instance) -> Result<(), WorldError> {
    let path = path.as_ref();
    std::fs::write(path, instance.to_json()).map_err(|source| WorldError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<Instance, WorldError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| WorldError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Instance::from_json(&text)
}

/// Boolean voxel occupancy of the target grid.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Occupancy(pub [bool; VOXELS]);

impl Occupancy {
    pub const EMPTY: Occupancy = Occupancy([false; VOXELS]);

    pub fn from_cells<'a>(cells: impl IntoIterator<Item = &'a Cell>) -> Self {
        let mut occ = [false; VOXELS];
        for c in cells {
            if let Some(i) = c.index() {
                occ[i] = true;
            }
        }
        Occupancy(occ)
    }

    /// Occupied test for any cell; everything outside the grid is free.
    pub fn contains(&self, cell: Cell) -> bool {
        cell.index().is_some_and(|i| self.0[i])
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Binary occupancy feature of a subassembly (`d = 27`).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct FeatureVector {
    pub values: [u8; VOXELS],
}

impl FeatureVector {
    pub fn sum(&self) -> usize {
        self.values.iter().map(|&b| b as usize).sum()
    }
}

pub fn voxelize(instance: &Instance, v: SubassemblyMask) -> FeatureVector {
    debug_assert!(v.is_valid_for(instance.m()));
    let occ = instance.occupancy(v);
    let mut values = [0u8; VOXELS];
    for (dst, &b) in values.iter_mut().zip(occ.0.iter()) {
        *dst = u8::from(b);
    }
    FeatureVector { values }
}

/// Features of every node of the subassembly lattice, indexed by mask bits.
pub fn voxelize_all(instance: &Instance) -> Vec<FeatureVector> {
    (0..1u32 << instance.m())
        .map(|bits| voxelize(instance, SubassemblyMask::from_bits(bits)))
        .collect()
}

/// Balanced part sizes for `m` parts: every size is `floor(27/m)` or `ceil(27/m)`,
/// larger sizes first.
pub fn balanced_part_sizes(m: usize) -> Vec<usize> {
    let q = VOXELS / m;
    let r = VOXELS % m;
    (0..m).map(|i| if i < r { q + 1 } else { q }).collect()
}

/// Random balanced partition of the grid into `m` face-connected parts.
///
/// Seeds `m` mutually distant cells, then grows the parts by random accretion of
/// face-adjacent free cells, always extending the part furthest below its target
/// size. Dead ends (a part with no free neighbor) restart the attempt.
pub fn generate_instance(m: usize, seed: u64) -> Result<Instance, WorldError> {
    if !GENERATED_PART_COUNTS.contains(&m) {
        return Err(WorldError::UnsupportedPartCount { m });
    }
    let sizes = balanced_part_sizes(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..GENERATION_ATTEMPTS {
        if let Some(owner) = grow_partition(&mut rng, &sizes) {
            return Instance::from_owner_table(&owner);
        }
    }
    Err(WorldError::GenerationFailed { attempts: GENERATION_ATTEMPTS })
}

fn grow_partition(rng: &mut ChaCha8Rng, sizes: &[usize]) -> Option<[usize; VOXELS]> {
    let m = sizes.len();
    let mut owner = [usize::MAX; VOXELS];
    let mut members: Vec<Vec<Cell>> = vec![Vec::new(); m];

    // Farthest-point seeding with random tie-breaks.
    let first = rng.gen_range(0..VOXELS);
    let mut seeds = vec![Cell::from_index(first)];
    while seeds.len() < m {
        let dist = |c: Cell| {
            seeds
                .iter()
                .map(|s| (s.x - c.x).abs() + (s.y - c.y).abs() + (s.z - c.z).abs())
                .min()
                .unwrap_or(0)
        };
        let free: Vec<Cell> = (0..VOXELS)
            .map(Cell::from_index)
            .filter(|c| !seeds.contains(c))
            .collect();
        let best = free.iter().map(|&c| dist(c)).max()?;
        let far: Vec<Cell> = free.into_iter().filter(|&c| dist(c) == best).collect();
        seeds.push(*far.choose(rng)?);
    }
    // Which seed receives which target size is random too.
    let mut targets = sizes.to_vec();
    targets.shuffle(rng);
    for (id, &s) in seeds.iter().enumerate() {
        owner[s.index()?] = id;
        members[id].push(s);
    }

    let mut placed = m;
    while placed < VOXELS {
        let deficit = |id: usize| targets[id] - members[id].len();
        let max_deficit = (0..m).map(deficit).max()?;
        let growing: Vec<usize> = (0..m).filter(|&id| deficit(id) == max_deficit).collect();
        let id = *growing.choose(rng)?;
        let mut frontier: Vec<Cell> = Vec::new();
        for c in &members[id] {
            for step in FACE_STEPS {
                let n = c.shifted(step);
                if let Some(i) = n.index() {
                    if owner[i] == usize::MAX && !frontier.contains(&n) {
                        frontier.push(n);
                    }
                }
            }
        }
        let pick = *frontier.choose(rng)?;
        owner[pick.index()?] = id;
        members[id].push(pick);
        placed += 1;
    }
    Some(owner)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive oracle: every way to write 27 as an ordered sum of `m` part sizes
    /// (each >= 3) whose max and min differ by at most one.
    fn balanced_size_multisets(m: usize) -> Vec<Vec<usize>> {
        fn rec(left: usize, slots: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if slots == 0 {
                if left == 0 {
                    out.push(cur.clone());
                }
                return;
            }
            for s in (MIN_PART_CELLS..=max.min(left)).rev() {
                cur.push(s);
                rec(left - s, slots - 1, s, cur, out);
                cur.pop();
            }
        }
        let mut all = Vec::new();
        rec(VOXELS, m, VOXELS, &mut Vec::new(), &mut all);
        all.into_iter()
            .filter(|v| v.iter().max().unwrap() - v.iter().min().unwrap() <= 1)
            .collect()
    }

    #[test]
    fn balanced_sizes_match_enumeration() {
        for m in 1..=MAX_PARTS {
            let oracle = balanced_size_multisets(m);
            assert_eq!(oracle.len(), 1, "m={m}");
            assert_eq!(balanced_part_sizes(m), oracle[0], "m={m}");
        }
        assert_eq!(balanced_part_sizes(4), vec![7, 7, 7, 6]);
        assert_eq!(balanced_part_sizes(7), vec![4, 4, 4, 4, 4, 4, 3]);
    }

    #[test]
    fn generated_sizes_follow_balancing() {
        for (m, expected) in [(4, vec![7, 7, 7, 6]), (7, vec![4, 4, 4, 4, 4, 4, 3])] {
            let inst = generate_instance(m, 12345).unwrap();
            let mut sizes: Vec<usize> = inst.parts().iter().map(Part::len).collect();
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            assert_eq!(sizes, expected);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_instance(4, 99).unwrap();
        let b = generate_instance(4, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn generator_rejects_unsupported_sizes() {
        assert!(matches!(
            generate_instance(3, 0),
            Err(WorldError::UnsupportedPartCount { m: 3 })
        ));
        assert!(matches!(
            generate_instance(8, 0),
            Err(WorldError::UnsupportedPartCount { m: 8 })
        ));
    }

    #[test]
    fn cell_index_round_trip() {
        for i in 0..VOXELS {
            assert_eq!(Cell::from_index(i).index(), Some(i));
        }
        assert_eq!(Cell::new(1, 0, 0).index(), Some(1));
        assert_eq!(Cell::new(0, 1, 0).index(), Some(3));
        assert_eq!(Cell::new(0, 0, 1).index(), Some(9));
        assert_eq!(Cell::new(-1, 0, 0).index(), None);
    }

    #[test]
    fn voxelize_extremes() {
        let inst = generate_instance(5, 7).unwrap();
        assert_eq!(voxelize(&inst, SubassemblyMask::EMPTY).sum(), 0);
        assert_eq!(voxelize(&inst, inst.full_mask()).values, [1; VOXELS]);
    }

    #[test]
    fn voxelize_single_small_part() {
        let inst = generate_instance(7, 3).unwrap();
        let small = inst.parts().iter().find(|p| p.len() == 3).unwrap();
        let f = voxelize(&inst, SubassemblyMask::EMPTY.with(small.id));
        assert_eq!(f.sum(), 3);
        for c in &small.cells {
            assert_eq!(f.values[c.index().unwrap()], 1);
        }
    }

    #[test]
    fn mask_helpers() {
        let v = SubassemblyMask::from_parts([0, 2]);
        assert_eq!(v.bits(), 0b101);
        assert_eq!(v.missing(4).collect::<Vec<_>>(), vec![1, 3]);
        assert!(v.is_subset_of(SubassemblyMask::full(3)));
        assert!(!v.is_valid_for(2));
        assert_eq!(SubassemblyMask::full(4).count(), 4);
    }

    #[test]
    fn rejects_overlap_and_gaps() {
        let inst = generate_instance(4, 1).unwrap();
        let mut parts = inst.parts().to_vec();
        let stolen = parts[0].cells[0];
        parts[1].cells.push(stolen);
        assert!(matches!(Instance::new(parts), Err(WorldError::Overlap { .. })));

        let mut parts = inst.parts().to_vec();
        let big = parts.iter().position(|p| p.len() == 7).unwrap();
        // Drop a cell whose removal keeps the part connected, leaving 26 covered cells.
        let cells = parts[big].cells.clone();
        let drop = (0..cells.len())
            .find(|&k| {
                let mut rest = cells.clone();
                rest.remove(k);
                is_face_connected(&rest)
            })
            .unwrap();
        parts[big].cells.remove(drop);
        assert!(matches!(
            Instance::new(parts),
            Err(WorldError::Uncovered { covered: 26 })
        ));
    }

    #[test]
    fn parse_errors_name_the_field() {
        let inst = generate_instance(4, 2).unwrap();
        let mut doc = inst.to_document();
        doc.m = 5;
        let text = serde_json::to_string(&doc).unwrap();
        let err = Instance::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("`m`"), "{err}");

        let err = Instance::from_json(r#"{"m": 4, "grid": [3,3,3]}"#).unwrap_err();
        assert!(err.to_string().contains("parts"), "{err}");

        let mut doc = inst.to_document();
        doc.parts[1].cells[0] = Cell::new(0, 0, 5);
        let err = Instance::try_from(doc).unwrap_err();
        assert!(err.to_string().contains("parts[1].cells"), "{err}");
    }
}
