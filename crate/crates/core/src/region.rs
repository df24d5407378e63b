//! Integer cell boxes, domain partitioning, and the central/ghost strip
//! decomposition of each partition.
//!
//! Every box is half-open (`lo` inclusive, `hi` exclusive) in global cell
//! coordinates. Axes beyond the domain's dimensionality are pinned to
//! `[0, 1)` so a 1D or 2D region still has a well-defined volume.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_DIMS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("dimensionality {0} not in 1..=3")]
    BadDims(usize),
    #[error("empty region on axis {axis}: [{lo}, {hi})")]
    EmptyRegion { axis: usize, lo: i64, hi: i64 },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(u8, u8),
    #[error("extent {extent} on axis {axis} not divisible by {partitions} partitions")]
    NotDivisible { axis: usize, extent: i64, partitions: u32 },
    #[error("axis {axis}: {reason}")]
    BadAxis { axis: usize, reason: String },
    #[error("ghost width {width} too large for partition side {side}")]
    GhostTooWide { width: i64, side: i64 },
    #[error("central region empty: length {length} <= 2 * ghost width {width}")]
    CentralEmpty { length: i64, width: i64 },
    #[error("partition index {0:?} out of range")]
    IndexOutOfRange(Vec<u32>),
}

/// Axis-aligned, non-empty box of cells.
///
/// The derived ordering is lexicographic on `lo` first, which is the
/// canonical region order used wherever determinism matters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Region {
    lo: [i64; MAX_DIMS],
    hi: [i64; MAX_DIMS],
    dims: u8,
}

impl Region {
    pub fn new(lo: &[i64], hi: &[i64]) -> Result<Self, GeometryError> {
        let dims = lo.len();
        if !(1..=MAX_DIMS).contains(&dims) {
            return Err(GeometryError::BadDims(dims));
        }
        if hi.len() != dims {
            return Err(GeometryError::DimMismatch(dims as u8, hi.len() as u8));
        }
        let mut r = Region { lo: [0; MAX_DIMS], hi: [1; MAX_DIMS], dims: dims as u8 };
        for a in 0..dims {
            if lo[a] >= hi[a] {
                return Err(GeometryError::EmptyRegion { axis: a, lo: lo[a], hi: hi[a] });
            }
            r.lo[a] = lo[a];
            r.hi[a] = hi[a];
        }
        Ok(r)
    }

    pub fn dims(&self) -> usize {
        self.dims as usize
    }

    pub fn lo(&self) -> &[i64] {
        &self.lo[..self.dims()]
    }

    pub fn hi(&self) -> &[i64] {
        &self.hi[..self.dims()]
    }

    pub fn extent(&self, axis: usize) -> i64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn volume(&self) -> u64 {
        (0..MAX_DIMS).map(|a| self.extent(a) as u64).product()
    }

    /// Component-wise intersection; `Ok(None)` when the boxes are disjoint.
    pub fn intersect(&self, other: &Region) -> Result<Option<Region>, GeometryError> {
        if self.dims != other.dims {
            return Err(GeometryError::DimMismatch(self.dims, other.dims));
        }
        let mut out = *self;
        for a in 0..MAX_DIMS {
            out.lo[a] = self.lo[a].max(other.lo[a]);
            out.hi[a] = self.hi[a].min(other.hi[a]);
            if out.lo[a] >= out.hi[a] {
                return Ok(None);
            }
        }
        Ok(Some(out))
    }

    /// Volume of the overlap, zero for disjoint boxes or mismatched dims.
    pub fn overlap(&self, other: &Region) -> u64 {
        match self.intersect(other) {
            Ok(Some(r)) => r.volume(),
            _ => 0,
        }
    }

    pub fn contains(&self, other: &Region) -> bool {
        self.dims == other.dims
            && (0..MAX_DIMS).all(|a| self.lo[a] <= other.lo[a] && other.hi[a] <= self.hi[a])
    }

    pub fn contains_cell(&self, cell: &[i64; MAX_DIMS]) -> bool {
        (0..MAX_DIMS).all(|a| self.lo[a] <= cell[a] && cell[a] < self.hi[a])
    }

    /// Smallest box covering both.
    pub fn bounding(&self, other: &Region) -> Result<Region, GeometryError> {
        if self.dims != other.dims {
            return Err(GeometryError::DimMismatch(self.dims, other.dims));
        }
        let mut out = *self;
        for a in 0..MAX_DIMS {
            out.lo[a] = self.lo[a].min(other.lo[a]);
            out.hi[a] = self.hi[a].max(other.hi[a]);
        }
        Ok(out)
    }

    /// Row-major offset of `cell` inside this box (last axis fastest).
    pub fn offset_of(&self, cell: &[i64; MAX_DIMS]) -> usize {
        let mut off = 0usize;
        for a in 0..MAX_DIMS {
            off = off * self.extent(a) as usize + (cell[a] - self.lo[a]) as usize;
        }
        off
    }

    /// Cells in canonical (row-major, last axis fastest) order.
    pub fn cells(&self) -> impl Iterator<Item = [i64; MAX_DIMS]> + '_ {
        let (lo, hi) = (self.lo, self.hi);
        (lo[0]..hi[0]).flat_map(move |x| {
            (lo[1]..hi[1]).flat_map(move |y| (lo[2]..hi[2]).map(move |z| [x, y, z]))
        })
    }

    /// Mirror across the domain's axis `axis` of total length `extent`.
    pub fn mirrored(&self, axis: usize, extent: i64) -> Region {
        let mut out = *self;
        out.lo[axis] = extent - self.hi[axis];
        out.hi[axis] = extent - self.lo[axis];
        out
    }
}

impl fmt::Debug for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for a in 0..self.dims() {
            if a > 0 {
                write!(f, " x ")?;
            }
            write!(f, "{}..{}", self.lo[a], self.hi[a])?;
        }
        write!(f, "]")
    }
}

/// Role of a strip along one axis of a partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StripKind {
    ReceiveLeft,
    SendLeft,
    Central,
    SendRight,
    ReceiveRight,
}

impl StripKind {
    pub fn is_owned(self) -> bool {
        !matches!(self, StripKind::ReceiveLeft | StripKind::ReceiveRight)
    }
}

/// One interval of a partition's axis, relative to the partition origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisStrip {
    pub kind: StripKind,
    pub lo: i64,
    pub hi: i64,
}

/// Splits one partition axis of `length` cells into up to five strips.
///
/// Receive strips overhang the partition (`[-w, 0)` and `[length, length + w)`).
/// Strips toward a missing neighbor are omitted, as are all ghost strips
/// when `ghost_width` is zero.
pub fn decompose_axis(
    length: i64,
    ghost_width: i64,
    has_left_neighbor: bool,
    has_right_neighbor: bool,
) -> Result<Vec<AxisStrip>, GeometryError> {
    if ghost_width < 0 || length <= 2 * ghost_width {
        return Err(GeometryError::CentralEmpty { length, width: ghost_width });
    }
    let w = ghost_width;
    if w == 0 {
        return Ok(vec![AxisStrip { kind: StripKind::Central, lo: 0, hi: length }]);
    }
    let mut out = Vec::with_capacity(5);
    let mut central_lo = 0;
    let mut central_hi = length;
    if has_left_neighbor {
        out.push(AxisStrip { kind: StripKind::ReceiveLeft, lo: -w, hi: 0 });
        out.push(AxisStrip { kind: StripKind::SendLeft, lo: 0, hi: w });
        central_lo = w;
    }
    if has_right_neighbor {
        central_hi = length - w;
    }
    out.push(AxisStrip { kind: StripKind::Central, lo: central_lo, hi: central_hi });
    if has_right_neighbor {
        out.push(AxisStrip { kind: StripKind::SendRight, lo: length - w, hi: length });
        out.push(AxisStrip { kind: StripKind::ReceiveRight, lo: length, hi: length + w });
    }
    Ok(out)
}

/// Per-axis partition index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartitionIndex(pub [u32; MAX_DIMS]);

/// Simulation domain: extent, uniform partition grid, and per-variable ghost widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    extent: Vec<i64>,
    partitions: Vec<u32>,
    default_ghost_width: i64,
    ghost_widths: BTreeMap<String, i64>,
}

impl DomainSpec {
    pub fn new(extent: &[i64], partitions: &[u32]) -> Result<Self, GeometryError> {
        let dims = extent.len();
        if !(1..=MAX_DIMS).contains(&dims) {
            return Err(GeometryError::BadDims(dims));
        }
        if partitions.len() != dims {
            return Err(GeometryError::DimMismatch(dims as u8, partitions.len() as u8));
        }
        for a in 0..dims {
            if extent[a] <= 0 {
                return Err(GeometryError::BadAxis { axis: a, reason: "extent must be positive".into() });
            }
            if partitions[a] == 0 {
                return Err(GeometryError::BadAxis { axis: a, reason: "zero partitions".into() });
            }
            if extent[a] % partitions[a] as i64 != 0 {
                return Err(GeometryError::NotDivisible {
                    axis: a,
                    extent: extent[a],
                    partitions: partitions[a],
                });
            }
        }
        let spec = DomainSpec {
            extent: extent.to_vec(),
            partitions: partitions.to_vec(),
            default_ghost_width: 0,
            ghost_widths: BTreeMap::new(),
        };
        Ok(spec)
    }

    /// Sets the width used by variables without an explicit entry.
    pub fn with_default_ghost_width(mut self, width: i64) -> Result<Self, GeometryError> {
        self.check_ghost_width(width)?;
        self.default_ghost_width = width;
        Ok(self)
    }

    pub fn with_ghost_width(mut self, variable: &str, width: i64) -> Result<Self, GeometryError> {
        self.check_ghost_width(width)?;
        self.ghost_widths.insert(variable.to_string(), width);
        Ok(self)
    }

    fn check_ghost_width(&self, width: i64) -> Result<(), GeometryError> {
        if width < 0 {
            return Err(GeometryError::GhostTooWide { width, side: 0 });
        }
        for a in 0..self.dims() {
            let side = self.partition_side(a);
            // Only axes that are actually split carry ghost strips.
            if self.partitions[a] > 1 && 2 * width >= side {
                return Err(GeometryError::GhostTooWide { width, side });
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.extent.len()
    }

    pub fn extent(&self) -> &[i64] {
        &self.extent
    }

    pub fn partitions(&self) -> &[u32] {
        &self.partitions
    }

    pub fn partition_side(&self, axis: usize) -> i64 {
        self.extent[axis] / self.partitions[axis] as i64
    }

    pub fn partition_count(&self) -> u32 {
        self.partitions.iter().product()
    }

    pub fn ghost_width(&self, variable: &str) -> i64 {
        self.ghost_widths.get(variable).copied().unwrap_or(self.default_ghost_width)
    }

    pub fn default_ghost_width(&self) -> i64 {
        self.default_ghost_width
    }

    pub fn bounds(&self) -> Region {
        Region::new(&vec![0; self.dims()], &self.extent).expect("validated extent")
    }

    pub fn check_index(&self, index: PartitionIndex) -> Result<(), GeometryError> {
        let ok = (0..MAX_DIMS).all(|a| {
            if a < self.dims() {
                index.0[a] < self.partitions[a]
            } else {
                index.0[a] == 0
            }
        });
        if ok {
            Ok(())
        } else {
            Err(GeometryError::IndexOutOfRange(index.0[..self.dims()].to_vec()))
        }
    }

    /// Row-major linear index (last axis fastest).
    pub fn linear_index(&self, index: PartitionIndex) -> u32 {
        let mut lin = 0u32;
        for a in 0..self.dims() {
            lin = lin * self.partitions[a] + index.0[a];
        }
        lin
    }

    pub fn partition_from_linear(&self, mut lin: u32) -> PartitionIndex {
        let mut idx = [0u32; MAX_DIMS];
        for a in (0..self.dims()).rev() {
            idx[a] = lin % self.partitions[a];
            lin /= self.partitions[a];
        }
        PartitionIndex(idx)
    }

    /// All partition indices in linear order.
    pub fn partition_indices(&self) -> Vec<PartitionIndex> {
        (0..self.partition_count()).map(|l| self.partition_from_linear(l)).collect()
    }

    pub fn partition_box(&self, index: PartitionIndex) -> Result<Region, GeometryError> {
        self.check_index(index)?;
        let d = self.dims();
        let lo: Vec<i64> = (0..d).map(|a| index.0[a] as i64 * self.partition_side(a)).collect();
        let hi: Vec<i64> = (0..d).map(|a| lo[a] + self.partition_side(a)).collect();
        Region::new(&lo, &hi)
    }

    /// Partitions sharing a face with `index` (lattice neighbors along one axis).
    pub fn face_neighbors(&self, index: PartitionIndex) -> Vec<PartitionIndex> {
        let mut out = Vec::new();
        for a in 0..self.dims() {
            if index.0[a] > 0 {
                let mut n = index;
                n.0[a] -= 1;
                out.push(n);
            }
            if index.0[a] + 1 < self.partitions[a] {
                let mut n = index;
                n.0[a] += 1;
                out.push(n);
            }
        }
        out
    }
}

/// Owned and touched regions of one partition for one ghost width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionDecomposition {
    pub partition_index: PartitionIndex,
    /// Central region plus owned send strips; tiles the partition box.
    pub owned: Vec<Region>,
    /// Owned regions plus remote receive strips.
    pub touched: Vec<Region>,
}

pub fn decompose_partition(
    domain: &DomainSpec,
    index: PartitionIndex,
) -> Result<PartitionDecomposition, GeometryError> {
    decompose_partition_with_width(domain, index, domain.default_ghost_width)
}

pub fn decompose_partition_with_width(
    domain: &DomainSpec,
    index: PartitionIndex,
    ghost_width: i64,
) -> Result<PartitionDecomposition, GeometryError> {
    let pbox = domain.partition_box(index)?;
    let d = domain.dims();
    let mut per_axis: Vec<Vec<AxisStrip>> = Vec::with_capacity(d);
    for a in 0..d {
        let left = index.0[a] > 0;
        let right = index.0[a] + 1 < domain.partitions[a];
        // An unsplit axis never has neighbors, so it needs no width check.
        let width = if domain.partitions[a] > 1 { ghost_width } else { 0 };
        per_axis.push(decompose_axis(domain.partition_side(a), width, left, right)?);
    }

    let mut owned = Vec::new();
    let mut touched = Vec::new();
    let mut cursor = vec![0usize; d];
    loop {
        let mut lo = vec![0i64; d];
        let mut hi = vec![0i64; d];
        let mut is_owned = true;
        for a in 0..d {
            let s = per_axis[a][cursor[a]];
            lo[a] = pbox.lo[a] + s.lo;
            hi[a] = pbox.lo[a] + s.hi;
            is_owned &= s.kind.is_owned();
        }
        let r = Region::new(&lo, &hi)?;
        if is_owned {
            owned.push(r);
        }
        touched.push(r);

        // odometer over the per-axis strip lists
        let mut a = d;
        loop {
            if a == 0 {
                owned.sort();
                touched.sort();
                return Ok(PartitionDecomposition { partition_index: index, owned, touched });
            }
            a -= 1;
            cursor[a] += 1;
            if cursor[a] < per_axis[a].len() {
                break;
            }
            cursor[a] = 0;
        }
    }
}

/// Global disjoint tiling: the union of every partition's owned regions, sorted.
pub fn enumerate_domain_regions(domain: &DomainSpec, ghost_width: i64) -> Result<Vec<Region>, GeometryError> {
    let mut out = Vec::new();
    for idx in domain.partition_indices() {
        out.extend(decompose_partition_with_width(domain, idx, ghost_width)?.owned);
    }
    out.sort();
    Ok(out)
}

/// Sum of touched-region counts over all partitions, i.e. the number of
/// physical instances one cell variable needs when every partition is
/// materialized with its ghost copies.
pub fn count_touched_instances(domain: &DomainSpec, ghost_width: i64) -> Result<usize, GeometryError> {
    let mut n = 0;
    for idx in domain.partition_indices() {
        n += decompose_partition_with_width(domain, idx, ghost_width)?.touched.len();
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r1(lo: i64, hi: i64) -> Region {
        Region::new(&[lo], &[hi]).unwrap()
    }

    #[test]
    fn axis_interior_has_five_strips() {
        let s = decompose_axis(8, 1, true, true).unwrap();
        assert_eq!(s.len(), 5);
        let spans: Vec<_> = s.iter().map(|x| (x.lo, x.hi)).collect();
        assert_eq!(spans, vec![(-1, 0), (0, 1), (1, 7), (7, 8), (8, 9)]);
    }

    #[test]
    fn axis_without_ghosts_is_single_central() {
        let s = decompose_axis(8, 0, true, true).unwrap();
        assert_eq!(s, vec![AxisStrip { kind: StripKind::Central, lo: 0, hi: 8 }]);
    }

    #[test]
    fn axis_domain_edge_drops_left_strips() {
        let s = decompose_axis(8, 1, false, true).unwrap();
        let kinds: Vec<_> = s.iter().map(|x| x.kind).collect();
        assert_eq!(
            kinds,
            vec![StripKind::Central, StripKind::SendRight, StripKind::ReceiveRight]
        );
        // enumerate: left has none, right has send + receive, plus central
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn axis_rejects_empty_central() {
        assert!(decompose_axis(2, 1, true, true).is_err());
        assert!(decompose_axis(4, 2, true, false).is_err());
        assert!(decompose_axis(3, 1, true, true).is_ok());
    }

    #[test]
    fn interior_counts_2d_3d() {
        let d3 = DomainSpec::new(&[24, 24, 24], &[3, 3, 3]).unwrap().with_default_ghost_width(1).unwrap();
        let p = decompose_partition(&d3, PartitionIndex([1, 1, 1])).unwrap();
        assert_eq!(p.touched.len(), 125);
        assert_eq!(p.owned.len(), 27);

        let d2 = DomainSpec::new(&[24, 24], &[3, 3]).unwrap().with_default_ghost_width(1).unwrap();
        let p = decompose_partition(&d2, PartitionIndex([1, 1, 0])).unwrap();
        assert_eq!(p.touched.len(), 25);
        assert_eq!(p.owned.len(), 9);
    }

    #[test]
    fn single_partition_is_one_region() {
        let d = DomainSpec::new(&[8, 8, 8], &[1, 1, 1]).unwrap().with_default_ghost_width(1).unwrap();
        let p = decompose_partition(&d, PartitionIndex([0, 0, 0])).unwrap();
        assert_eq!(p.touched.len(), 1);
        assert_eq!(p.owned.len(), 1);
        assert_eq!(enumerate_domain_regions(&d, 1).unwrap(), vec![d.bounds()]);
    }

    #[test]
    fn out_of_range_index_rejected() {
        let d = DomainSpec::new(&[8, 8], &[2, 2]).unwrap();
        assert!(decompose_partition(&d, PartitionIndex([2, 0, 0])).is_err());
        assert!(decompose_partition(&d, PartitionIndex([0, 0, 1])).is_err());
    }

    #[test]
    fn one_dimensional_two_partition_tiling() {
        let d = DomainSpec::new(&[16], &[2]).unwrap();
        let regions = enumerate_domain_regions(&d, 1).unwrap();
        assert_eq!(regions, vec![r1(0, 7), r1(7, 8), r1(8, 9), r1(9, 16)]);
    }

    #[test]
    fn intersect_basics() {
        assert_eq!(r1(0, 4).intersect(&r1(2, 6)).unwrap(), Some(r1(2, 4)));
        assert_eq!(r1(0, 4).intersect(&r1(4, 8)).unwrap(), None);
        assert_eq!(r1(0, 4).intersect(&r1(0, 4)).unwrap(), Some(r1(0, 4)));
        let r2 = Region::new(&[0, 0], &[2, 2]).unwrap();
        assert!(r1(0, 4).intersect(&r2).is_err());
    }

    #[test]
    fn ghost_width_validation() {
        let d = DomainSpec::new(&[16], &[4]).unwrap();
        assert!(d.clone().with_ghost_width("u", 1).is_ok());
        assert!(d.clone().with_ghost_width("u", 2).is_err());
        assert!(DomainSpec::new(&[15], &[4]).is_err());
        assert_eq!(d.with_ghost_width("u", 1).unwrap().ghost_width("v"), 0);
    }

    #[test]
    fn linear_index_round_trip() {
        let d = DomainSpec::new(&[8, 8, 8], &[2, 4, 1]).unwrap();
        for l in 0..d.partition_count() {
            assert_eq!(d.linear_index(d.partition_from_linear(l)), l);
        }
        assert_eq!(d.partition_from_linear(1), PartitionIndex([0, 1, 0]));
    }

    #[test]
    fn cells_follow_offsets() {
        let r = Region::new(&[1, 2], &[3, 5]).unwrap();
        for (i, c) in r.cells().enumerate() {
            assert_eq!(r.offset_of(&c), i);
        }
        assert_eq!(r.cells().count() as u64, r.volume());
    }
}
