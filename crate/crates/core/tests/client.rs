mod common;

use std::time::{Duration, Instant};

use common::{Cluster, NodeSpec};
use disagg_store::arena::{MemoryRegion, RemoteAccessModel};
use disagg_store::client::ClientError;
use disagg_store::id::ObjectId;
use disagg_store::ClientSession;
use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MIB: u64 = 1 << 20;

fn payload(seed: u64, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort_unstable();
    v[v.len() / 2]
}

#[test]
fn bad_socket_path_is_connect_failure() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        ClientSession::connect(dir.path().join("nothing.sock")),
        Err(ClientError::ConnectFailure(_))
    ));
}

#[test]
fn single_node_maps_one_arena() {
    let c = Cluster::start(&[NodeSpec::new(MIB)]);
    let s = c.client(0);
    assert_eq!(s.mapped_nodes(), vec![0]);
}

#[test]
fn large_object_fidelity_local_and_remote() {
    let c = Cluster::start(&[NodeSpec::new(128 * MIB), NodeSpec::new(MIB)]);
    let data = payload(1, 100_000_000);
    let id = ObjectId::from_u64(1);
    c.client(0).create_and_write(id, &data, b"m").unwrap();
    for node in [0, 1] {
        let mut s = c.client(node);
        let v = s.get(&[id], 100).unwrap().pop().unwrap().unwrap();
        assert_eq!(v.data.is_remote(), node == 1);
        assert!(v.data.read_all() == data, "node {node} read different bytes");
        assert_eq!(v.metadata.read_all(), b"m");
    }
    let small = ObjectId::from_u64(2);
    c.client(0).create_and_write(small, &[0x5a], &[]).unwrap();
    let v = c.client(1).get(&[small], 100).unwrap().pop().unwrap().unwrap();
    assert_eq!(v.data.read_all(), vec![0x5a]);
    assert!(v.metadata.is_empty());
    assert!(v.metadata.read_all().is_empty());
}

#[test]
fn object_larger_than_arena_is_out_of_memory() {
    let c = Cluster::start(&[NodeSpec::new(64 * MIB)]);
    let mut s = c.client(0);
    assert!(matches!(s.create(ObjectId::from_u64(1), 100_000_000, 0), Err(ClientError::OutOfMemory)));
    assert!(matches!(s.create(ObjectId::from_u64(1), 0, 0), Err(ClientError::InvalidArgument)));
    assert_eq!(c.store(0).stats().objects, 0);
}

#[test]
fn release_semantics() {
    let c = Cluster::start(&[NodeSpec::new(MIB)]);
    let mut s = c.client(0);
    let id = ObjectId::from_u64(1);
    s.create_and_write(id, &[1; 10], &[]).unwrap();
    assert!(matches!(s.create_and_write(id, &[1; 10], &[]), Err(ClientError::ObjectExists(_))));
    assert_eq!(c.store(0).ref_count(&id), Some(0));
    s.get(&[id], 0).unwrap();
    assert_eq!(c.store(0).ref_count(&id), Some(1));
    s.release(id).unwrap();
    assert_eq!(c.store(0).ref_count(&id), Some(0));
    assert!(matches!(s.release(id), Err(ClientError::NotReferenced(_))));
    assert!(matches!(s.seal(id), Err(ClientError::AlreadySealed(_))));
    assert!(matches!(s.seal(ObjectId::from_u64(2)), Err(ClientError::ObjectNotFound(_))));
}

#[test]
fn writes_outside_the_object_are_refused() {
    let c = Cluster::start(&[NodeSpec::new(MIB)]);
    let mut s = c.client(0);
    let d = s.create(ObjectId::from_u64(1), 16, 4).unwrap();
    assert!(s.write(&d, 0, &[0; 20]).is_ok());
    assert!(matches!(s.write(&d, 1, &[0; 20]), Err(ClientError::InvalidArgument)));
    assert!(matches!(s.write(&d, u64::MAX, &[0; 2]), Err(ClientError::InvalidArgument)));
}

#[test]
fn remote_read_at_half_bandwidth_takes_twice_as_long() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("arena");
    let owner = MemoryRegion::create(0, 8 * MIB, &path).unwrap();
    owner.write_at(0, &payload(3, MIB as usize)).unwrap();
    let model = RemoteAccessModel {
        bandwidth_ratio: 0.5,
        per_access_latency: Duration::ZERO,
        peer_rpc_latency: Duration::ZERO,
    };
    let remote = MemoryRegion::attach_remote(0, &path, model).unwrap();
    let mut buf = vec![0u8; MIB as usize];
    owner.read_into(0, &mut buf).unwrap();
    remote.read_into(0, &mut buf).unwrap();

    let (mut local, mut far) = (Vec::new(), Vec::new());
    for _ in 0..100 {
        let t = Instant::now();
        owner.read_into(0, &mut buf).unwrap();
        local.push(t.elapsed());
        let t = Instant::now();
        remote.read_into(0, &mut buf).unwrap();
        far.push(t.elapsed());
    }
    let (local, far) = (median(local), median(far));
    assert!(far >= local * 2, "remote {far:?} vs local {local:?}");
}

#[test]
fn transparent_model_matches_local_timing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("arena");
    let owner = MemoryRegion::create(0, 8 * MIB, &path).unwrap();
    let remote = MemoryRegion::attach_remote(0, &path, RemoteAccessModel::transparent()).unwrap();
    let mut buf = vec![0u8; 4 * MIB as usize];
    owner.read_into(0, &mut buf).unwrap();
    remote.read_into(0, &mut buf).unwrap();
    let (mut local, mut far) = (Vec::new(), Vec::new());
    for _ in 0..100 {
        let t = Instant::now();
        owner.read_into(0, &mut buf).unwrap();
        local.push(t.elapsed());
        let t = Instant::now();
        remote.read_into(0, &mut buf).unwrap();
        far.push(t.elapsed());
    }
    let ratio = median(far).as_secs_f64() / median(local).as_secs_f64();
    assert!((0.5..2.0).contains(&ratio), "transparent remote/local time ratio {ratio}");
}

#[test]
fn default_model_remote_reads_are_slower() {
    let c = Cluster::start(&[NodeSpec::new(32 * MIB), NodeSpec::new(MIB)].map(|mut n| {
        n.model = RemoteAccessModel::default();
        n
    }));
    let id = ObjectId::from_u64(1);
    c.client(0).create_and_write(id, &payload(4, 4 << 20), &[]).unwrap();
    let mut near = c.client(0);
    let mut far = c.client(1);
    let vn = near.get(&[id], 0).unwrap().pop().unwrap().unwrap();
    let vf = far.get(&[id], 0).unwrap().pop().unwrap().unwrap();
    let mut buf = vec![0u8; 4 << 20];
    let (mut tn, mut tf) = (Vec::new(), Vec::new());
    for _ in 0..100 {
        let t = Instant::now();
        vn.data.read_into(&mut buf);
        tn.push(t.elapsed());
        let t = Instant::now();
        vf.data.read_into(&mut buf);
        tf.push(t.elapsed());
    }
    assert!(median(tf) > median(tn));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bytes_round_trip_through_either_store(
        sizes in prop::collection::vec((1usize..200_000, 0usize..64), 1..6),
        seed in any::<u64>(),
    ) {
        let c = Cluster::start(&[NodeSpec::new(4 * MIB), NodeSpec::new(MIB)]);
        let mut producer = c.client(0);
        let mut far = c.client(1);
        for (i, &(len, meta)) in sizes.iter().enumerate() {
            let id = ObjectId::from_u64(i as u64);
            let data = payload(seed ^ i as u64, len);
            let metadata = payload(!seed, meta);
            producer.create_and_write(id, &data, &metadata).unwrap();
            let v = far.get(&[id], 100).unwrap().pop().unwrap().unwrap();
            prop_assert!(v.data.read_all() == data);
            prop_assert_eq!(v.metadata.read_all(), metadata);
        }
        prop_assert!(c.store(0).audit().unwrap().is_empty());
    }

    #[test]
    fn close_releases_in_any_order(gets in prop::collection::vec(0u64..5, 1..30)) {
        let c = Cluster::start(&[NodeSpec::new(MIB)]);
        let mut p = c.client(0);
        for i in 0..5 {
            p.create_and_write(ObjectId::from_u64(i), &[i as u8; 32], &[]).unwrap();
        }
        let mut s = c.client(0);
        for g in &gets {
            s.get(&[ObjectId::from_u64(*g)], 0).unwrap();
        }
        let total: u32 = (0..5).map(|i| c.store(0).ref_count(&ObjectId::from_u64(i)).unwrap()).sum();
        prop_assert_eq!(total as usize, gets.len());
        s.close().unwrap();
        for i in 0..5 {
            prop_assert_eq!(c.store(0).ref_count(&ObjectId::from_u64(i)), Some(0));
        }
        c.store(0).check_invariants().unwrap();
    }
}
