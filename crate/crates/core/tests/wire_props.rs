//! Property tests for the frame codec and the simulated network.

use std::collections::BTreeSet;

use gridflow::data::LogicalObjectId;
use gridflow::graph::{IdBlock, JobId, JobSpec};
use gridflow::transport::sim::{FaultPlan, NetConfig, SimEvent, SimNetwork};
use gridflow::transport::{
    decode, encode, Binding, DoneKind, ExecuteJob, Message, Node, ProfileReport, ShardOp, WorkerEntry,
};
use proptest::prelude::*;

fn id() -> impl Strategy<Value = u64> {
    prop_oneof![0u64..64, 0u64..1 << 20, 0u64..u64::MAX - 1]
}

fn ids() -> impl Strategy<Value = BTreeSet<u64>> {
    prop_oneof![
        prop::collection::btree_set(id(), 0..12),
        // dense runs, the common case on the wire
        (0u64..1 << 40, 0u64..300).prop_map(|(s, n)| (s..s + n).collect()),
    ]
}

fn jobs() -> impl Strategy<Value = Vec<JobId>> {
    ids().prop_map(|s| s.into_iter().map(JobId).collect())
}

fn objs() -> impl Strategy<Value = Vec<LogicalObjectId>> {
    ids().prop_map(|s| s.into_iter().map(LogicalObjectId).collect())
}

fn obj_set() -> impl Strategy<Value = BTreeSet<LogicalObjectId>> {
    ids().prop_map(|s| s.into_iter().map(LogicalObjectId).collect())
}

fn bindings() -> impl Strategy<Value = Vec<Binding>> {
    prop::collection::btree_map(id(), any::<u64>(), 0..10)
        .prop_map(|m| m.into_iter().map(|(o, version)| Binding { object: LogicalObjectId(o), version }).collect())
}

fn payload() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0e300f64..1.0e300, 0..40)
}

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_.:/ -]{0,24}"
}

fn job_spec() -> impl Strategy<Value = JobSpec> {
    (
        (id(), text(), prop::collection::vec(any::<u8>(), 0..24)),
        (obj_set(), obj_set(), ids(), obj_set()),
        (any::<bool>(), prop::option::of(any::<u64>())),
    )
        .prop_map(|((id, function, params), (read, write, before, access), (parent, iteration))| JobSpec {
            id: JobId(id),
            function,
            params,
            read,
            write,
            before: before.into_iter().map(JobId).collect(),
            parent,
            access,
            iteration,
        })
}

fn message() -> impl Strategy<Value = Message> {
    let e = any::<u64>;
    prop_oneof![
        (text(), any::<u32>()).prop_map(|(endpoint, threads)| Message::RegisterWorker { endpoint, threads }),
        (e(), id(), prop::collection::vec(job_spec(), 0..4))
            .prop_map(|(epoch, s, jobs)| Message::SpawnBatch { epoch, spawner: JobId(s), jobs }),
        (
            (e(), id(), text(), prop::collection::vec(any::<u8>(), 0..16)),
            (jobs(), bindings(), bindings()),
            prop::option::of((any::<u64>(), any::<u64>()))
        )
            .prop_map(|((epoch, job, function, params), (before, reads, writes), block)| {
                Message::ExecuteJob(ExecuteJob {
                    epoch,
                    job: JobId(job),
                    function,
                    params,
                    before,
                    reads,
                    writes,
                    id_block: block.map(|(start, len)| IdBlock { start, len }),
                })
            }),
        (e(), objs()).prop_map(|(epoch, objects)| Message::CreateData { epoch, objects }),
        (e(), id(), id(), e(), any::<u32>(), jobs()).prop_map(|(epoch, c, o, version, to, before)| {
            Message::CopySend { epoch, copy: JobId(c), object: LogicalObjectId(o), version, to, before }
        }),
        (e(), id(), id(), e(), any::<u32>(), jobs()).prop_map(|(epoch, c, o, version, from, before)| {
            Message::CopyReceive { epoch, copy: JobId(c), object: LogicalObjectId(o), version, from, before }
        }),
        (e(), id(), 0u8..3).prop_map(|(epoch, j, k)| Message::JobDone {
            epoch,
            job: JobId(j),
            kind: [DoneKind::Compute, DoneKind::CopySend, DoneKind::CopyReceive][k as usize],
        }),
        (
            (e(), any::<u32>(), e(), e()),
            (e(), e(), prop::collection::vec((any::<u32>(), any::<u64>()), 0..6), e())
        )
            .prop_map(|((epoch, worker, window, window_ns), (compute_ns, blocked_ns, blocked_on, work_units))| {
                Message::ProfileReport(ProfileReport {
                    epoch,
                    worker,
                    window,
                    window_ns,
                    compute_ns,
                    blocked_ns,
                    blocked_on,
                    work_units,
                })
            }),
        Just(Message::Heartbeat),
        (e(), e(), bindings(), jobs())
            .prop_map(|(epoch, checkpoint, objects, before)| Message::SaveShard { epoch, checkpoint, objects, before }),
        (e(), e(), objs()).prop_map(|(epoch, checkpoint, objects)| Message::RestoreShard { epoch, checkpoint, objects }),
        (
            e(),
            any::<u32>(),
            prop::collection::vec((any::<u32>(), text(), prop::collection::btree_set(any::<u32>(), 0..8)), 0..5)
        )
            .prop_map(|(epoch, you, ws)| Message::ReassignPartitions {
                epoch,
                you,
                workers: ws
                    .into_iter()
                    .map(|(id, endpoint, p)| WorkerEntry { id, endpoint, partitions: p.into_iter().collect() })
                    .collect(),
            }),
        objs().prop_map(|collect| Message::Terminate { collect }),
        (e(), id(), id(), e(), payload()).prop_map(|(epoch, c, o, version, payload)| Message::CopyData {
            epoch,
            copy: JobId(c),
            object: LogicalObjectId(o),
            version,
            payload,
        }),
        (e(), e(), any::<bool>(), bindings(), objs(), e()).prop_map(|(epoch, checkpoint, save, ok, failed, bytes)| {
            Message::ShardAck {
                epoch,
                checkpoint,
                op: if save { ShardOp::Save } else { ShardOp::Restore },
                ok,
                failed,
                bytes,
            }
        }),
        prop::collection::vec((id(), e(), payload()), 0..4).prop_map(|es| Message::StateDump {
            entries: es
                .into_iter()
                .map(|(o, version, p)| (Binding { object: LogicalObjectId(o), version }, p))
                .collect(),
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100_000))]

    #[test]
    fn messages_round_trip(msg in message()) {
        let frame = encode(&msg);
        prop_assert_eq!(u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize, frame.len() - 4);
        prop_assert_eq!(decode(&frame).unwrap(), msg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20_000))]

    #[test]
    fn garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn corrupted_frames_never_panic(msg in message(), flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..6), cut in any::<prop::sample::Index>()) {
        let mut frame = encode(&msg);
        for (at, v) in flips {
            let i = at.index(frame.len());
            frame[i] ^= v.max(1);
        }
        let _ = decode(&frame);
        let n = cut.index(frame.len());
        let _ = decode(&frame[..n]);
    }

    #[test]
    fn payload_bits_survive_copy(bits in prop::collection::vec(any::<u64>(), 0..200)) {
        let payload: Vec<f64> = bits.iter().map(|b| f64::from_bits(*b)).collect();
        let msg = Message::CopyData { epoch: 0, copy: JobId(1), object: LogicalObjectId(2), version: 3, payload };
        match decode(&encode(&msg)).unwrap() {
            Message::CopyData { payload, .. } => {
                let got: Vec<u64> = payload.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(got, bits);
            }
            other => prop_assert!(false, "decoded {:?}", other),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn simulated_links_are_fifo(
        seed in any::<u64>(),
        jitter in 0u64..5_000_000,
        sends in prop::collection::vec((0u32..4, 0u32..4, 0u64..2_000_000, 0usize..5000), 1..200),
    ) {
        let cfg = NetConfig { jitter_ns: jitter, seed, ..NetConfig::default() };
        let mut net: SimNetwork<usize> = SimNetwork::new(cfg, FaultPlan::none());
        let node = |w: u32| if w == 0 { Node::Controller } else { Node::Worker(w) };
        // sends are issued from local events so the clock advances between them
        for (i, (_, _, at, _)) in sends.iter().enumerate() {
            net.schedule(*at, i);
        }
        let mut seen: std::collections::BTreeMap<(Node, Node), Vec<u64>> = Default::default();
        while let Some((_, ev)) = net.step().unwrap() {
            match ev {
                SimEvent::Local(i) => {
                    let (from, to, _, len) = sends[i];
                    let msg = Message::CopyData {
                        epoch: 0,
                        copy: JobId(i as u64),
                        object: LogicalObjectId(0),
                        version: 0,
                        payload: vec![0.0; len],
                    };
                    net.send(node(from), node(to), &msg);
                }
                SimEvent::Deliver { from, to, msg: Message::CopyData { copy, .. } } => {
                    seen.entry((from, to)).or_default().push(copy.0);
                }
                SimEvent::Deliver { msg, .. } => prop_assert!(false, "unexpected {:?}", msg),
            }
        }
        let mut order: Vec<usize> = (0..sends.len()).collect();
        order.sort_by_key(|i| (sends[*i].2, *i));
        for ((from, to), got) in seen {
            let want: Vec<u64> = order
                .iter()
                .filter(|i| node(sends[**i].0) == from && node(sends[**i].1) == to)
                .map(|i| *i as u64)
                .collect();
            prop_assert_eq!(got, want);
        }
    }
}
