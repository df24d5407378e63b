//! Placement and load-balancing decisions, kept free of controller state
//! so they can be tested exhaustively.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::data::{ObjectRegistry, WorkerId};
use crate::graph::JobSpec;
use crate::region::DomainSpec;
use crate::transport::ProfileReport;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("no live workers")]
    NoLiveWorkers,
    #[error("worker {0} holds fewer than two partitions")]
    TooFewPartitions(WorkerId),
}

/// Partition assignment: worker → linear partition indices.
pub type Assignment = BTreeMap<WorkerId, BTreeSet<u32>>;

/// Σ over the job's read ∪ write objects of their overlap with each
/// worker's partitions, for every live worker in `assignment`.
pub fn overlap_scores(job: &JobSpec, registry: &ObjectRegistry, assignment: &Assignment) -> BTreeMap<WorkerId, u64> {
    let domain = registry.domain();
    let mut owner_of: BTreeMap<u32, WorkerId> = BTreeMap::new();
    for (w, parts) in assignment {
        for p in parts {
            owner_of.insert(*p, *w);
        }
    }
    let mut scores: BTreeMap<WorkerId, u64> = assignment.keys().map(|w| (*w, 0)).collect();
    for id in job.touched_objects() {
        let Ok(obj) = registry.get(id) else { continue };
        let Some(region) = obj.placement_region() else { continue };
        for idx in domain.partition_indices() {
            let lin = domain.linear_index(idx);
            let Some(w) = owner_of.get(&lin) else { continue };
            let pbox = domain.partition_box(idx).expect("valid index");
            *scores.get_mut(w).expect("assigned worker") += region.overlap(&pbox);
        }
    }
    scores
}

/// Worker with the largest overlap; ties go to the lowest id.
pub fn assign_job(job: &JobSpec, registry: &ObjectRegistry, assignment: &Assignment) -> Result<WorkerId, PolicyError> {
    let scores = overlap_scores(job, registry, assignment);
    let mut best: Option<(WorkerId, u64)> = None;
    for (w, s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((w, s));
        }
    }
    best.map(|(w, _)| w).ok_or(PolicyError::NoLiveWorkers)
}

/// Contiguous near-equal blocks of linear partition indices.
pub fn initial_assignment(partitions: u32, workers: &[WorkerId]) -> Assignment {
    let n = workers.len() as u64;
    workers
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let lo = (k as u64 * partitions as u64 / n) as u32;
            let hi = ((k as u64 + 1) * partitions as u64 / n) as u32;
            (*w, (lo..hi).collect())
        })
        .collect()
}

/// `true` when the partitions form one face-connected block (or none).
pub fn is_contiguous(domain: &DomainSpec, parts: &BTreeSet<u32>) -> bool {
    let Some(&first) = parts.first() else { return true };
    let mut seen = BTreeSet::from([first]);
    let mut queue = VecDeque::from([first]);
    while let Some(p) = queue.pop_front() {
        for n in domain.face_neighbors(domain.partition_from_linear(p)) {
            let lin = domain.linear_index(n);
            if parts.contains(&lin) && seen.insert(lin) {
                queue.push_back(lin);
            }
        }
    }
    seen.len() == parts.len()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StragglerThresholds {
    /// Minimum compute / window ratio of the straggler.
    pub busy: f64,
    /// Minimum blocked-on-straggler / window ratio of some peer.
    pub blocked: f64,
    /// Consecutive windows both conditions must hold.
    pub windows: usize,
}

impl Default for StragglerThresholds {
    fn default() -> Self {
        StragglerThresholds { busy: 0.9, blocked: 0.3, windows: 3 }
    }
}

/// Per-worker report history, oldest first.
pub type ProfileHistory = BTreeMap<WorkerId, Vec<ProfileReport>>;

/// Workers that were busy while some peer was blocked on them, in each of
/// their last `windows` reports.
pub fn detect_stragglers(history: &ProfileHistory, t: &StragglerThresholds) -> BTreeSet<WorkerId> {
    let mut flagged = BTreeSet::new();
    for (w, reports) in history {
        if reports.len() < t.windows || t.windows == 0 {
            continue;
        }
        let sustained = reports[reports.len() - t.windows..].iter().all(|r| {
            r.compute_ratio() > t.busy
                && history.iter().any(|(peer, rs)| {
                    peer != w
                        && rs.iter().any(|pr| pr.window == r.window && pr.blocked_ratio_on(*w) > t.blocked)
                })
        });
        if sustained {
            flagged.insert(*w);
        }
    }
    flagged
}

/// Work units per compute nanosecond over the supplied reports.
pub fn measured_speed(reports: &[ProfileReport]) -> Option<f64> {
    let units: u64 = reports.iter().map(|r| r.work_units).sum();
    let ns: u64 = reports.iter().map(|r| r.compute_ns).sum();
    (units > 0 && ns > 0).then(|| units as f64 / ns as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Move {
    pub partition: u32,
    pub from: WorkerId,
    pub to: WorkerId,
}

fn makespan(assignment: &Assignment, speed: &BTreeMap<WorkerId, f64>) -> f64 {
    assignment.iter().map(|(w, p)| p.len() as f64 / speed[w]).fold(0.0, f64::max)
}

/// Greedily moves boundary partitions of `straggler` to adjacent workers
/// while the predicted makespan (partitions / speed) keeps dropping.
/// Every worker's block stays contiguous. Workers without a measured
/// speed are assumed to run at the mean measured speed.
pub fn rebalance(
    domain: &DomainSpec,
    assignment: &Assignment,
    straggler: WorkerId,
    speeds: &BTreeMap<WorkerId, f64>,
) -> Result<(Assignment, Vec<Move>), PolicyError> {
    let owned = assignment.get(&straggler).map(|s| s.len()).unwrap_or(0);
    if owned < 2 {
        return Err(PolicyError::TooFewPartitions(straggler));
    }
    let known: Vec<f64> = speeds.values().copied().filter(|s| *s > 0.0).collect();
    let mean = if known.is_empty() { 1.0 } else { known.iter().sum::<f64>() / known.len() as f64 };
    let speed: BTreeMap<WorkerId, f64> =
        assignment.keys().map(|w| (*w, speeds.get(w).copied().filter(|s| *s > 0.0).unwrap_or(mean))).collect();

    let mut current = assignment.clone();
    let mut moves = Vec::new();
    loop {
        let span = makespan(&current, &speed);
        let mut best: Option<(f64, f64, u32, WorkerId)> = None;
        let from = &current[&straggler];
        for &p in from {
            let mut rest = from.clone();
            rest.remove(&p);
            if !is_contiguous(domain, &rest) {
                continue;
            }
            let neighbours: BTreeSet<u32> =
                domain.face_neighbors(domain.partition_from_linear(p)).into_iter().map(|n| domain.linear_index(n)).collect();
            for (r, parts) in &current {
                if *r == straggler || parts.is_disjoint(&neighbours) {
                    continue;
                }
                let mut trial = current.clone();
                trial.get_mut(&straggler).unwrap().remove(&p);
                trial.get_mut(r).unwrap().insert(p);
                let new_span = makespan(&trial, &speed);
                let recipient_load = (parts.len() + 1) as f64 / speed[r];
                let better = match best {
                    None => true,
                    Some((s, l, _, _)) => new_span < s || (new_span == s && recipient_load < l),
                };
                if better {
                    best = Some((new_span, recipient_load, p, *r));
                }
            }
        }
        match best {
            Some((new_span, _, p, r)) if new_span < span * (1.0 - 1e-9) => {
                current.get_mut(&straggler).unwrap().remove(&p);
                current.get_mut(&r).unwrap().insert(p);
                moves.push(Move { partition: p, from: straggler, to: r });
            }
            _ => break,
        }
    }
    Ok((current, moves))
}

/// Hands all of `dead`'s partitions to one live worker whose block is
/// adjacent, preferring the one with the fewest partitions. Falls back to
/// the least-loaded live worker when no neighbour is alive.
pub fn absorb_failed(domain: &DomainSpec, assignment: &Assignment, dead: WorkerId) -> Result<Assignment, PolicyError> {
    let mut next = assignment.clone();
    let lost = next.remove(&dead).unwrap_or_default();
    if next.is_empty() {
        return Err(PolicyError::NoLiveWorkers);
    }
    if lost.is_empty() {
        return Ok(next);
    }
    let border: BTreeSet<u32> = lost
        .iter()
        .flat_map(|p| domain.face_neighbors(domain.partition_from_linear(*p)))
        .map(|n| domain.linear_index(n))
        .collect();
    let pick = |adjacent_only: bool| {
        next.iter()
            .filter(|(_, parts)| !adjacent_only || !parts.is_disjoint(&border))
            .min_by_key(|(w, parts)| (parts.len(), **w))
            .map(|(w, _)| *w)
    };
    let to = pick(true).or_else(|| pick(false)).expect("non-empty");
    next.get_mut(&to).unwrap().extend(lost);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{register_objects, LogicalObjectId, Variable};
    use crate::graph::JobId;

    fn report(worker: WorkerId, window: u64, compute: f64, blocked_on: &[(WorkerId, f64)]) -> ProfileReport {
        let total = 1_000_000u64;
        ProfileReport {
            epoch: 0,
            worker,
            window,
            window_ns: total,
            compute_ns: (compute * total as f64) as u64,
            blocked_ns: blocked_on.iter().map(|(_, b)| (b * total as f64) as u64).max().unwrap_or(0),
            blocked_on: blocked_on.iter().map(|(p, b)| (*p, (b * total as f64) as u64)).collect(),
            work_units: 100,
        }
    }

    #[test]
    fn water_left_job_goes_to_left_owner() {
        let d = DomainSpec::new(&[16], &[2]).unwrap();
        let reg = register_objects(&d, &[Variable::cell("velocity")]).unwrap();
        let a = initial_assignment(2, &[1, 2]);
        let job = JobSpec::compute(JobId(1), "AdvanceVelocity").reads((0..3).map(LogicalObjectId));
        assert_eq!(assign_job(&job, &reg, &a).unwrap(), 1);
        let single = initial_assignment(2, &[7]);
        assert_eq!(assign_job(&job, &reg, &single).unwrap(), 7);
        assert_eq!(assign_job(&job, &reg, &Assignment::new()), Err(PolicyError::NoLiveWorkers));
    }

    #[test]
    fn global_only_job_ties_to_lowest() {
        let d = DomainSpec::new(&[16], &[2]).unwrap();
        let reg = register_objects(&d, &[Variable::cell("v"), Variable::global_scalar("g")]).unwrap();
        let g = reg.global("g").unwrap();
        let a = initial_assignment(2, &[3, 4]);
        let job = JobSpec::compute(JobId(1), "Reduce").writes([g]);
        assert!(overlap_scores(&job, &reg, &a).values().all(|s| *s == 0));
        assert_eq!(assign_job(&job, &reg, &a).unwrap(), 3);
    }

    #[test]
    fn symmetric_load_flags_nobody() {
        let mut h = ProfileHistory::new();
        for w in 0..4 {
            h.insert(w, (0..3).map(|i| report(w, i, 0.6, &[])).collect());
        }
        assert!(detect_stragglers(&h, &StragglerThresholds::default()).is_empty());
    }

    #[test]
    fn busy_without_blocked_peer_not_flagged() {
        let mut h = ProfileHistory::new();
        h.insert(0, (0..3).map(|i| report(0, i, 0.99, &[])).collect());
        h.insert(1, (0..3).map(|i| report(1, i, 0.5, &[(0, 0.2)])).collect());
        assert!(detect_stragglers(&h, &StragglerThresholds::default()).is_empty());
        // with the peer blocked in only two of three windows
        h.insert(1, (0..3).map(|i| report(1, i, 0.2, &[(0, if i == 1 { 0.1 } else { 0.8 })])).collect());
        assert!(detect_stragglers(&h, &StragglerThresholds::default()).is_empty());
        h.insert(1, (0..3).map(|i| report(1, i, 0.2, &[(0, 0.8)])).collect());
        assert_eq!(detect_stragglers(&h, &StragglerThresholds::default()), BTreeSet::from([0]));
    }

    #[test]
    fn sixteen_over_eight_moves_two_to_distinct_neighbours() {
        let d = DomainSpec::new(&[64], &[16]).unwrap();
        let workers: Vec<WorkerId> = (0..8).collect();
        let a = initial_assignment(16, &workers);
        let mut speeds: BTreeMap<WorkerId, f64> = workers.iter().map(|w| (*w, 1.0)).collect();
        speeds.insert(3, 0.2);
        let (next, moves) = rebalance(&d, &a, 3, &speeds).unwrap();
        assert_eq!(moves.len(), 2);
        assert_ne!(moves[0].to, moves[1].to);
        for m in &moves {
            assert_eq!(next[&m.to].len(), 3);
        }
        for parts in next.values() {
            assert!(is_contiguous(&d, parts));
        }
    }

    #[test]
    fn single_partition_straggler_is_skipped() {
        let d = DomainSpec::new(&[16], &[4]).unwrap();
        let a = initial_assignment(4, &[0, 1, 2, 3]);
        let speeds = BTreeMap::from([(0, 1.0), (1, 0.2), (2, 1.0), (3, 1.0)]);
        assert_eq!(rebalance(&d, &a, 1, &speeds), Err(PolicyError::TooFewPartitions(1)));
    }

    #[test]
    fn absorb_prefers_adjacent_block() {
        let d = DomainSpec::new(&[32], &[8]).unwrap();
        let a = initial_assignment(8, &[0, 1, 2, 3]);
        let next = absorb_failed(&d, &a, 3).unwrap();
        assert_eq!(next[&2], (4..8).collect());
        assert!(next.values().all(|p| is_contiguous(&d, p)));
    }
}
