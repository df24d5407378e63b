//! Presents disjoint objects of one variable to a kernel as a single
//! contiguous array over their bounding box, and writes back only the
//! objects a job declared as written.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::data::{LogicalObjectId, ObjectRegistry};
use crate::region::{Region, MAX_DIMS};

/// Quiet NaN with a recognisable payload, used as fill in debug builds so
/// a kernel reading outside its gathered regions produces visible garbage.
pub const POISON: f64 = f64::from_bits(0x7FF8_DEAD_BEEF_0000);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TranslateError {
    #[error("object {0:?} is not resident")]
    Missing(LogicalObjectId),
    #[error("object {0:?} is not part of this view")]
    NotInView(LogicalObjectId),
    #[error("view needs at least one object")]
    Empty,
    #[error("object {0:?} belongs to another variable")]
    WrongVariable(LogicalObjectId),
    #[error("payload of {id:?} has {got} elements, expected {expected}")]
    Length { id: LogicalObjectId, expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslatorView {
    pub variable: usize,
    pub bounds: Region,
    pub data: Vec<f64>,
    /// Backing objects with their regions, in canonical region order.
    pub backing: Vec<(LogicalObjectId, Region)>,
}

impl TranslatorView {
    /// An unfilled view over explicit bounds, for outputs nobody read.
    pub fn blank(variable: usize, bounds: Region, fill: f64) -> Self {
        TranslatorView { variable, bounds, data: vec![fill; bounds.volume() as usize], backing: Vec::new() }
    }

    /// Copies `objects` (all of one variable) into a contiguous array over
    /// their bounding box. Cells not covered by any object hold `fill`.
    pub fn gather(
        registry: &ObjectRegistry,
        objects: &[LogicalObjectId],
        payloads: &BTreeMap<LogicalObjectId, Vec<f64>>,
        fill: f64,
    ) -> Result<Self, TranslateError> {
        let mut backing = Vec::with_capacity(objects.len());
        let mut variable = None;
        for id in objects {
            let obj = registry.get(*id).map_err(|_| TranslateError::Missing(*id))?;
            if *variable.get_or_insert(obj.variable) != obj.variable {
                return Err(TranslateError::WrongVariable(*id));
            }
            backing.push((*id, obj.region));
        }
        let variable = variable.ok_or(TranslateError::Empty)?;
        backing.sort_by_key(|(_, r)| *r);
        let mut bounds = backing[0].1;
        for (_, r) in &backing[1..] {
            bounds = bounds.bounding(r).expect("same variable, same dims");
        }
        let mut view = TranslatorView::blank(variable, bounds, fill);
        for (id, region) in &backing {
            let payload = payloads.get(id).ok_or(TranslateError::Missing(*id))?;
            let expected = region.volume() as usize;
            if payload.len() != expected {
                return Err(TranslateError::Length { id: *id, expected, got: payload.len() });
            }
            view.write_region(region, payload);
        }
        view.backing = backing;
        Ok(view)
    }

    fn write_region(&mut self, region: &Region, values: &[f64]) {
        // rows along the last axis are contiguous in both layouts
        let last = self.bounds.dims() - 1;
        let row = region.extent(last) as usize;
        let mut src = 0;
        for cell in region.cells().step_by(row) {
            let dst = self.bounds.offset_of(&cell);
            self.data[dst..dst + row].copy_from_slice(&values[src..src + row]);
            src += row;
        }
    }

    fn read_region(&self, region: &Region) -> Vec<f64> {
        let last = self.bounds.dims() - 1;
        let row = region.extent(last) as usize;
        let mut out = Vec::with_capacity(region.volume() as usize);
        for cell in region.cells().step_by(row) {
            let at = self.bounds.offset_of(&cell);
            out.extend_from_slice(&self.data[at..at + row]);
        }
        out
    }

    pub fn get(&self, cell: [i64; MAX_DIMS]) -> f64 {
        self.data[self.bounds.offset_of(&cell)]
    }

    pub fn set(&mut self, cell: [i64; MAX_DIMS], v: f64) {
        let at = self.bounds.offset_of(&cell);
        self.data[at] = v;
    }

    pub fn contains(&self, cell: &[i64; MAX_DIMS]) -> bool {
        self.bounds.contains_cell(cell)
    }

    /// Extracts the payloads of `writes`; every id must lie inside the view.
    pub fn scatter(
        &self,
        registry: &ObjectRegistry,
        writes: &[LogicalObjectId],
    ) -> Result<BTreeMap<LogicalObjectId, Vec<f64>>, TranslateError> {
        let mut out = BTreeMap::new();
        for id in writes {
            let obj = registry.get(*id).map_err(|_| TranslateError::NotInView(*id))?;
            if obj.variable != self.variable || !self.bounds.contains(&obj.region) {
                return Err(TranslateError::NotInView(*id));
            }
            out.insert(*id, self.read_region(&obj.region));
        }
        Ok(out)
    }
}

pub fn default_fill() -> f64 {
    if cfg!(debug_assertions) {
        POISON
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{register_objects, Variable};
    use crate::region::DomainSpec;

    fn water() -> ObjectRegistry {
        let d = DomainSpec::new(&[16], &[2]).unwrap().with_ghost_width("velocity", 1).unwrap();
        register_objects(&d, &[Variable::cell("velocity")]).unwrap()
    }

    fn payloads(reg: &ObjectRegistry) -> BTreeMap<LogicalObjectId, Vec<f64>> {
        reg.objects()
            .iter()
            .map(|o| (o.id, (0..o.elements()).map(|i| o.id.0 as f64 * 100.0 + i as f64).collect()))
            .collect()
    }

    #[test]
    fn gather_partition_with_ghost() {
        let reg = water();
        let p = payloads(&reg);
        let touched = reg.touched("velocity", 0).unwrap().to_vec();
        let view = TranslatorView::gather(&reg, &touched, &p, 0.0).unwrap();
        // 8 cells of the partition plus one receive-right ghost
        assert_eq!(view.data.len(), 9);
        assert_eq!(view.get([8, 0, 0]), 200.0);
    }

    #[test]
    fn single_object_is_identity() {
        let reg = water();
        let p = payloads(&reg);
        let view = TranslatorView::gather(&reg, &[LogicalObjectId(0)], &p, 0.0).unwrap();
        assert_eq!(view.data, p[&LogicalObjectId(0)]);
    }

    #[test]
    fn scatter_only_written() {
        let reg = water();
        let p = payloads(&reg);
        let touched = reg.touched("velocity", 0).unwrap().to_vec();
        let mut view = TranslatorView::gather(&reg, &touched, &p, 0.0).unwrap();
        for c in 0..9 {
            view.set([c, 0, 0], -1.0);
        }
        let out = view.scatter(&reg, &[LogicalObjectId(0)]).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[&LogicalObjectId(0)].iter().all(|v| *v == -1.0));
        assert!(view.scatter(&reg, &[LogicalObjectId(3)]).is_err());
    }

    #[test]
    fn missing_payload() {
        let reg = water();
        let err = TranslatorView::gather(&reg, &[LogicalObjectId(1)], &BTreeMap::new(), 0.0);
        assert_eq!(err.unwrap_err(), TranslateError::Missing(LogicalObjectId(1)));
    }

    #[test]
    fn poison_is_nan() {
        assert!(POISON.is_nan());
    }
}
