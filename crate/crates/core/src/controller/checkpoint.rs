//! Checkpoint manifests and their atomic persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{LogicalObjectId, WorkerId};
use crate::graph::JobSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub checkpoint: u64,
    /// First outer iteration not yet started when the snapshot was taken.
    pub iteration: u64,
    pub epoch: u64,
    /// Pending parent jobs, re-dispatched on rewind.
    pub frontier: Vec<JobSpec>,
    /// Version of every object the frontier may touch.
    pub objects: BTreeMap<LogicalObjectId, u64>,
    /// Objects persisted by each worker.
    pub shards: BTreeMap<WorkerId, Vec<LogicalObjectId>>,
}

/// Objects a snapshot of `frontier` must contain: every access, read and
/// write set of the saved parents.
pub fn manifest_objects<'a>(frontier: impl IntoIterator<Item = &'a JobSpec>) -> BTreeSet<LogicalObjectId> {
    let mut out = BTreeSet::new();
    for j in frontier {
        out.extend(j.access.iter().copied());
        out.extend(j.read.iter().copied());
        out.extend(j.write.iter().copied());
    }
    out
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Writes the manifest next to its final name, syncs, then renames over
/// the previous one, so readers see either the old or the new manifest.
pub fn write_manifest(dir: &Path, m: &CheckpointManifest) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let tmp = dir.join("manifest.json.tmp");
    {
        let mut f = File::create(&tmp)?;
        serde_json::to_writer(&mut f, m).map_err(io::Error::from)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, manifest_path(dir))?;
    File::open(dir)?.sync_all()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> io::Result<Option<CheckpointManifest>> {
    match fs::read(manifest_path(dir)) {
        Ok(raw) => serde_json::from_slice(&raw).map(Some).map_err(io::Error::from),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::JobId;

    #[test]
    fn object_table_is_union() {
        let a = JobSpec::parent(JobId(1), "A").accessing([LogicalObjectId(1), LogicalObjectId(2)]);
        let b = JobSpec::parent(JobId(2), "B").reads([LogicalObjectId(5)]);
        let got = manifest_objects([&a, &b]);
        assert_eq!(got, [1, 2, 5].into_iter().map(LogicalObjectId).collect());
        assert!(manifest_objects(std::iter::empty()).is_empty());
    }

    #[test]
    fn manifest_round_trip_and_replace() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), None);
        let mut m = CheckpointManifest {
            checkpoint: 1,
            iteration: 4,
            epoch: 0,
            frontier: vec![JobSpec::parent(JobId(9), "ForLoop").loop_head(4)],
            objects: BTreeMap::from([(LogicalObjectId(0), 7)]),
            shards: BTreeMap::from([(0, vec![LogicalObjectId(0)])]),
        };
        write_manifest(dir.path(), &m).unwrap();
        m.checkpoint = 2;
        write_manifest(dir.path(), &m).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), Some(m));
    }
}
