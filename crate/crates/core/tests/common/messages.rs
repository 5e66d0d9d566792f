//! Proptest strategies covering the full client and peer message algebra.

use std::path::PathBuf;
use std::time::Duration;

use disagg_store::arena::{RegionKind, RemoteAccessModel};
use disagg_store::id::ObjectId;
use disagg_store::ipc::{ArenaSpec, BufferDescriptor, Message, Status, StoreHello};
use disagg_store::peer::{LookupResponse, PeerMessage};
use proptest::prelude::*;

pub fn object_id() -> impl Strategy<Value = ObjectId> {
    any::<[u8; 20]>().prop_map(ObjectId::from_bytes)
}

pub fn status() -> impl Strategy<Value = Status> {
    prop::sample::select(Status::ALL.to_vec())
}

pub fn descriptor() -> impl Strategy<Value = BufferDescriptor> {
    (any::<u32>(), any::<u64>(), any::<u64>(), any::<u64>(), any::<bool>()).prop_map(
        |(node_id, offset, data_size, metadata_size, writable)| BufferDescriptor {
            node_id,
            offset,
            data_size,
            metadata_size,
            writable,
        },
    )
}

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL
}

fn arena_spec() -> impl Strategy<Value = ArenaSpec> {
    (
        any::<u32>(),
        any::<bool>(),
        any::<u64>(),
        "[a-zA-Z0-9/._ -]{0,40}",
        any::<u64>(),
        finite(),
        any::<u64>(),
    )
        .prop_map(|(node_id, remote, capacity, path, lat, ratio, rpc)| ArenaSpec {
            node_id,
            kind: if remote { RegionKind::RemoteView } else { RegionKind::LocalOwned },
            capacity,
            backing_path: PathBuf::from(path),
            access_model: remote.then(|| RemoteAccessModel {
                per_access_latency: Duration::from_nanos(lat),
                bandwidth_ratio: ratio,
                peer_rpc_latency: Duration::from_nanos(rpc),
            }),
        })
}

pub fn message() -> impl Strategy<Value = Message> {
    let ids = prop::collection::vec(object_id(), 0..8);
    prop_oneof![
        (object_id(), any::<u64>(), any::<u64>()).prop_map(|(id, data_size, metadata_size)| Message::CreateRequest {
            id,
            data_size,
            metadata_size
        }),
        (status(), descriptor()).prop_map(|(status, descriptor)| Message::CreateResponse { status, descriptor }),
        object_id().prop_map(|id| Message::SealRequest { id }),
        status().prop_map(|status| Message::SealResponse { status }),
        (ids, any::<u64>()).prop_map(|(ids, timeout_ms)| Message::GetRequest { ids, timeout_ms }),
        prop::collection::vec((status(), descriptor()), 0..8).prop_map(|results| Message::GetResponse { results }),
        object_id().prop_map(|id| Message::ReleaseRequest { id }),
        status().prop_map(|status| Message::ReleaseResponse { status }),
        any::<u32>().prop_map(|protocol_version| Message::HelloRequest { protocol_version }),
        (status(), any::<u32>(), any::<u32>(), finite(), prop::collection::vec(arena_spec(), 0..4)).prop_map(
            |(status, protocol_version, local_node_id, reference_bandwidth, arenas)| Message::HelloResponse {
                status,
                hello: StoreHello {
                    protocol_version,
                    local_node_id,
                    reference_bandwidth,
                    arenas,
                },
            }
        ),
        any::<u64>().prop_map(|bytes| Message::EvictRequest { bytes }),
        (status(), any::<u64>()).prop_map(|(status, freed)| Message::EvictResponse { status, freed }),
    ]
}

fn lookup_record() -> impl Strategy<Value = LookupResponse> {
    prop_oneof![
        Just(LookupResponse::absent()),
        (any::<bool>(), any::<u64>(), any::<u64>(), any::<u64>()).prop_map(|(sealed, offset, data_size, metadata_size)| {
            LookupResponse {
                found: true,
                sealed,
                offset,
                data_size,
                metadata_size,
            }
        }),
    ]
}

pub fn peer_message() -> impl Strategy<Value = PeerMessage> {
    prop_oneof![
        prop::collection::vec(object_id(), 0..8).prop_map(PeerMessage::LookupRequest),
        prop::collection::vec(lookup_record(), 0..8).prop_map(PeerMessage::LookupResponse),
        object_id().prop_map(PeerMessage::ExistsRequest),
        any::<bool>().prop_map(PeerMessage::ExistsResponse),
    ]
}

/// Either protocol's message, for one round-trip property over both.
#[derive(Debug, Clone)]
pub enum AnyMessage {
    Client(Message),
    Peer(PeerMessage),
}

pub fn any_message() -> impl Strategy<Value = AnyMessage> {
    prop_oneof![
        3 => message().prop_map(AnyMessage::Client),
        1 => peer_message().prop_map(AnyMessage::Peer),
    ]
}

/// Encodes, decodes and compares; returns a description on mismatch.
pub fn round_trip(m: &AnyMessage) -> Result<(), String> {
    match m {
        AnyMessage::Client(m) => {
            let bytes = m.encode().map_err(|e| e.to_string())?;
            let back = Message::decode_frame(&bytes).map_err(|e| format!("{m:?}: {e}"))?;
            if &back != m {
                return Err(format!("{m:?} decoded as {back:?}"));
            }
        }
        AnyMessage::Peer(m) => {
            let bytes = m.encode().map_err(|e| e.to_string())?;
            let (kind, payload) = disagg_store::frame::read_frame(&mut bytes.as_slice()).map_err(|e| e.to_string())?;
            let back = PeerMessage::decode(kind, &payload).map_err(|e| format!("{m:?}: {e}"))?;
            if &back != m {
                return Err(format!("{m:?} decoded as {back:?}"));
            }
        }
    }
    Ok(())
}
