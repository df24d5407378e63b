//! Logical objects (variable x region), version bookkeeping, and the
//! worker-resident physical instances that hold some version of them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::region::{decompose_partition_with_width, DomainSpec, GeometryError, Region};

pub type WorkerId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LogicalObjectId(pub u64);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("duplicate variable name {0:?}")]
    DuplicateVariable(String),
    #[error("unknown logical object {0:?}")]
    UnknownObject(LogicalObjectId),
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("payload length {got} does not match {expected} elements for {id:?}")]
    PayloadLength { id: LogicalObjectId, expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementKind {
    /// One f64 per cell, decomposed into central/ghost regions.
    Cell,
    /// One f64 per partition.
    PartitionScalar,
    /// A single f64 for the whole domain.
    GlobalScalar,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: ElementKind,
}

impl Variable {
    pub fn cell(name: &str) -> Self {
        Variable { name: name.to_string(), kind: ElementKind::Cell }
    }
    pub fn partition_scalar(name: &str) -> Self {
        Variable { name: name.to_string(), kind: ElementKind::PartitionScalar }
    }
    pub fn global_scalar(name: &str) -> Self {
        Variable { name: name.to_string(), kind: ElementKind::GlobalScalar }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogicalObject {
    pub id: LogicalObjectId,
    pub variable: usize,
    pub kind: ElementKind,
    pub region: Region,
    /// Linear index of the partition owning this object; `None` for globals.
    pub owner: Option<u32>,
}

impl LogicalObject {
    /// Number of f64 elements in a payload of this object.
    pub fn elements(&self) -> usize {
        match self.kind {
            ElementKind::Cell => self.region.volume() as usize,
            _ => 1,
        }
    }

    /// Region used for placement decisions; globals belong nowhere.
    pub fn placement_region(&self) -> Option<&Region> {
        match self.kind {
            ElementKind::GlobalScalar => None,
            _ => Some(&self.region),
        }
    }
}

/// All logical objects of one application, with dense deterministic ids.
#[derive(Clone, Debug)]
pub struct ObjectRegistry {
    domain: DomainSpec,
    variables: Vec<Variable>,
    objects: Vec<LogicalObject>,
    by_region: BTreeMap<(usize, Region), LogicalObjectId>,
    owned: BTreeMap<(usize, u32), Vec<LogicalObjectId>>,
    touched: BTreeMap<(usize, u32), Vec<LogicalObjectId>>,
    partition_scalars: BTreeMap<(usize, u32), LogicalObjectId>,
    globals: BTreeMap<usize, LogicalObjectId>,
}

/// Builds the registry: cell variables get one object per region of the
/// global tiling for their ghost width, partition scalars one per
/// partition, and globals exactly one.
pub fn register_objects(domain: &DomainSpec, variables: &[Variable]) -> Result<ObjectRegistry, DataError> {
    let mut reg = ObjectRegistry {
        domain: domain.clone(),
        variables: Vec::new(),
        objects: Vec::new(),
        by_region: BTreeMap::new(),
        owned: BTreeMap::new(),
        touched: BTreeMap::new(),
        partition_scalars: BTreeMap::new(),
        globals: BTreeMap::new(),
    };
    for (vi, var) in variables.iter().enumerate() {
        if reg.variables.iter().any(|v| v.name == var.name) {
            return Err(DataError::DuplicateVariable(var.name.clone()));
        }
        reg.variables.push(var.clone());
        match var.kind {
            ElementKind::Cell => {
                let gw = domain.ghost_width(&var.name);
                let mut decomps = Vec::new();
                for idx in domain.partition_indices() {
                    let lin = domain.linear_index(idx);
                    decomps.push((lin, decompose_partition_with_width(domain, idx, gw)?));
                }
                let mut owned_regions: Vec<(Region, u32)> = decomps
                    .iter()
                    .flat_map(|(lin, d)| d.owned.iter().map(move |r| (*r, *lin)))
                    .collect();
                owned_regions.sort();
                for (region, lin) in owned_regions {
                    let id = reg.push(vi, var.kind, region, Some(lin));
                    reg.by_region.insert((vi, region), id);
                    reg.owned.entry((vi, lin)).or_default().push(id);
                }
                for (lin, d) in &decomps {
                    let ids = d.touched.iter().map(|r| reg.by_region[&(vi, *r)]).collect();
                    reg.touched.insert((vi, *lin), ids);
                }
            }
            ElementKind::PartitionScalar => {
                for idx in domain.partition_indices() {
                    let lin = domain.linear_index(idx);
                    let region = domain.partition_box(idx)?;
                    let id = reg.push(vi, var.kind, region, Some(lin));
                    reg.partition_scalars.insert((vi, lin), id);
                }
            }
            ElementKind::GlobalScalar => {
                let id = reg.push(vi, var.kind, domain.bounds(), None);
                reg.globals.insert(vi, id);
            }
        }
    }
    Ok(reg)
}

impl ObjectRegistry {
    fn push(&mut self, variable: usize, kind: ElementKind, region: Region, owner: Option<u32>) -> LogicalObjectId {
        let id = LogicalObjectId(self.objects.len() as u64);
        self.objects.push(LogicalObject { id, variable, kind, region, owner });
        id
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn objects(&self) -> &[LogicalObject] {
        &self.objects
    }

    pub fn get(&self, id: LogicalObjectId) -> Result<&LogicalObject, DataError> {
        self.objects.get(id.0 as usize).ok_or(DataError::UnknownObject(id))
    }

    pub fn variable_index(&self, name: &str) -> Result<usize, DataError> {
        self.variables
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| DataError::UnknownVariable(name.to_string()))
    }

    pub fn variable_of(&self, id: LogicalObjectId) -> Result<&Variable, DataError> {
        Ok(&self.variables[self.get(id)?.variable])
    }

    pub fn lookup(&self, variable: &str, region: &Region) -> Result<LogicalObjectId, DataError> {
        let vi = self.variable_index(variable)?;
        self.by_region
            .get(&(vi, *region))
            .copied()
            .ok_or_else(|| DataError::UnknownVariable(format!("{variable}@{region:?}")))
    }

    /// Owned objects (central + send strips) of `variable` in partition `lin`.
    pub fn owned(&self, variable: &str, lin: u32) -> Result<&[LogicalObjectId], DataError> {
        let vi = self.variable_index(variable)?;
        Ok(self.owned.get(&(vi, lin)).map(|v| v.as_slice()).unwrap_or(&[]))
    }

    /// Owned plus remote ghost objects of `variable` in partition `lin`.
    pub fn touched(&self, variable: &str, lin: u32) -> Result<&[LogicalObjectId], DataError> {
        let vi = self.variable_index(variable)?;
        Ok(self.touched.get(&(vi, lin)).map(|v| v.as_slice()).unwrap_or(&[]))
    }

    pub fn partition_scalar(&self, variable: &str, lin: u32) -> Result<LogicalObjectId, DataError> {
        let vi = self.variable_index(variable)?;
        self.partition_scalars
            .get(&(vi, lin))
            .copied()
            .ok_or_else(|| DataError::UnknownVariable(format!("{variable}[{lin}]")))
    }

    pub fn global(&self, variable: &str) -> Result<LogicalObjectId, DataError> {
        let vi = self.variable_index(variable)?;
        self.globals.get(&vi).copied().ok_or_else(|| DataError::UnknownVariable(variable.to_string()))
    }

    /// Objects a worker holding `partitions` instantiates at creation:
    /// touched cell objects and partition scalars of those partitions, plus
    /// every global scalar.
    pub fn creation_set(&self, partitions: &[u32]) -> Vec<LogicalObjectId> {
        let mut out: Vec<LogicalObjectId> = Vec::new();
        for &lin in partitions {
            for ((_, p), ids) in &self.touched {
                if *p == lin {
                    out.extend(ids);
                }
            }
            for ((_, p), id) in &self.partition_scalars {
                if *p == lin {
                    out.push(*id);
                }
            }
        }
        out.extend(self.globals.values());
        out.sort();
        out.dedup();
        out
    }

    /// Every object owned by a partition (cell objects and partition scalars).
    pub fn owned_by_partition(&self, lin: u32) -> Vec<LogicalObjectId> {
        self.objects.iter().filter(|o| o.owner == Some(lin)).map(|o| o.id).collect()
    }
}

/// Latest version per logical object and held version per (object, worker).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VersionMap {
    latest: BTreeMap<LogicalObjectId, u64>,
    held: BTreeMap<(LogicalObjectId, WorkerId), u64>,
}

impl VersionMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Instance creation at version 0.
    pub fn create(&mut self, id: LogicalObjectId, worker: WorkerId) {
        self.latest.entry(id).or_insert(0);
        self.held.insert((id, worker), 0);
    }

    pub fn latest(&self, id: LogicalObjectId) -> Option<u64> {
        self.latest.get(&id).copied()
    }

    pub fn held(&self, id: LogicalObjectId, worker: WorkerId) -> Option<u64> {
        self.held.get(&(id, worker)).copied()
    }

    /// A write at `worker` produces the next version of `id`.
    pub fn record_write(&mut self, id: LogicalObjectId, worker: WorkerId) -> u64 {
        let v = self.latest.entry(id).or_insert(0);
        *v += 1;
        self.held.insert((id, worker), *v);
        *v
    }

    pub fn record_copy(&mut self, id: LogicalObjectId, worker: WorkerId, version: u64) {
        self.held.insert((id, worker), version);
    }

    /// Sets state directly (checkpoint restore).
    pub fn restore(&mut self, id: LogicalObjectId, version: u64, holders: &[WorkerId]) {
        self.latest.insert(id, version);
        for &w in holders {
            self.held.insert((id, w), version);
        }
    }

    pub fn holders(&self, id: LogicalObjectId) -> impl Iterator<Item = (WorkerId, u64)> + '_ {
        self.held.range((id, 0)..=(id, WorkerId::MAX)).map(|((_, w), v)| (*w, *v))
    }

    pub fn forget_worker(&mut self, worker: WorkerId) {
        self.held.retain(|(_, w), _| *w != worker);
    }

    pub fn objects(&self) -> impl Iterator<Item = (LogicalObjectId, u64)> + '_ {
        self.latest.iter().map(|(k, v)| (*k, *v))
    }
}

/// Workers holding exactly `needed_version` of `id`, ascending.
pub fn freshest_sources(
    id: LogicalObjectId,
    needed_version: u64,
    vm: &VersionMap,
) -> Result<Vec<WorkerId>, DataError> {
    if vm.latest(id).is_none() {
        return Err(DataError::UnknownObject(id));
    }
    Ok(vm.holders(id).filter(|(_, v)| *v == needed_version).map(|(w, _)| w).collect())
}

/// A worker-resident payload holding some version of a logical object.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalInstance {
    pub logical: LogicalObjectId,
    pub held_version: u64,
    /// Elements in canonical region order.
    pub payload: Vec<f64>,
}

/// Hex SHA-256 over every object in id order: id as u64 LE, then its
/// elements as f64 LE bytes.
pub fn state_hash(state: &BTreeMap<LogicalObjectId, Vec<f64>>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (id, payload) in state {
        h.update(id.0.to_le_bytes());
        for x in payload {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::enumerate_domain_regions;

    fn water_domain() -> DomainSpec {
        DomainSpec::new(&[16], &[2]).unwrap().with_ghost_width("velocity", 1).unwrap()
    }

    #[test]
    fn water_example_has_four_objects() {
        let reg = register_objects(&water_domain(), &[Variable::cell("velocity")]).unwrap();
        assert_eq!(reg.len(), 4);
        let d2 = Region::new(&[7], &[8]).unwrap();
        assert_eq!(reg.lookup("velocity", &d2).unwrap(), LogicalObjectId(1));
        // node 1 touches d1, d2, d'3; node 2 touches d'2, d3, d4
        let ids = |v: &[LogicalObjectId]| v.iter().map(|i| i.0).collect::<Vec<_>>();
        assert_eq!(ids(reg.touched("velocity", 0).unwrap()), vec![0, 1, 2]);
        assert_eq!(ids(reg.touched("velocity", 1).unwrap()), vec![1, 2, 3]);
        assert_eq!(ids(reg.owned("velocity", 0).unwrap()), vec![0, 1]);
    }

    #[test]
    fn zero_variables_is_empty() {
        let reg = register_objects(&water_domain(), &[]).unwrap();
        assert!(reg.is_empty());
    }

    #[test]
    fn duplicate_variables_rejected() {
        let err = register_objects(&water_domain(), &[Variable::cell("a"), Variable::global_scalar("a")]);
        assert!(matches!(err, Err(DataError::DuplicateVariable(_))));
    }

    #[test]
    fn two_d_three_variables_matches_enumeration() {
        let domain = DomainSpec::new(&[16, 16], &[2, 2]).unwrap().with_default_ghost_width(1).unwrap();
        let vars = [Variable::cell("u"), Variable::cell("v"), Variable::cell("w")];
        let reg = register_objects(&domain, &vars).unwrap();
        // owned strips on an axis: central plus one send strip per present neighbor
        let strips = |p: u32, n: u32| 1 + (p > 0) as usize + (p + 1 < n) as usize;
        let mut oracle = 0;
        for _ in &vars {
            for px in 0..2 {
                for py in 0..2 {
                    oracle += strips(px, 2) * strips(py, 2);
                }
            }
        }
        assert_eq!(oracle, 48);
        assert_eq!(reg.len(), oracle);
        assert_eq!(enumerate_domain_regions(&domain, 1).unwrap().len() * 3, oracle);
    }

    #[test]
    fn registration_is_deterministic() {
        let domain = DomainSpec::new(&[16, 8], &[4, 2]).unwrap().with_default_ghost_width(1).unwrap();
        let vars = [Variable::cell("u"), Variable::partition_scalar("m"), Variable::global_scalar("dt")];
        let a = register_objects(&domain, &vars).unwrap();
        let b = register_objects(&domain, &vars).unwrap();
        assert_eq!(a.objects(), b.objects());
        assert_eq!(a.partition_scalar("m", 3).unwrap(), b.partition_scalar("m", 3).unwrap());
    }

    #[test]
    fn freshest_sources_cases() {
        let id = LogicalObjectId(1);
        let mut vm = VersionMap::new();
        vm.create(id, 1);
        vm.create(id, 2);
        assert_eq!(freshest_sources(id, 0, &vm).unwrap(), vec![1, 2]);
        assert_eq!(vm.record_write(id, 1), 1);
        assert_eq!(freshest_sources(id, 1, &vm).unwrap(), vec![1]);
        assert!(freshest_sources(id, 5, &vm).unwrap().is_empty());
        assert!(freshest_sources(LogicalObjectId(9), 0, &vm).is_err());
    }
}
