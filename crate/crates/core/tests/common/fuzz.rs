//! Malformed-frame generation and delivery against live daemons.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::os::unix::net::UnixStream;
use std::path::Path;
use std::time::Duration;

use disagg_store::frame::MAX_FRAME;
use disagg_store::id::ObjectId;
use disagg_store::ipc::Message;
use disagg_store::peer::PeerMessage;
use rand::Rng;

fn valid_client_frame(rng: &mut impl Rng) -> Vec<u8> {
    let id = ObjectId::random(rng);
    let msg = match rng.gen_range(0..6) {
        0 => Message::CreateRequest {
            id,
            data_size: rng.gen_range(0..4096),
            metadata_size: rng.gen_range(0..64),
        },
        1 => Message::SealRequest { id },
        2 => Message::GetRequest {
            ids: vec![id; rng.gen_range(1..4)],
            timeout_ms: rng.gen_range(0..5),
        },
        3 => Message::ReleaseRequest { id },
        4 => Message::HelloRequest {
            protocol_version: rng.gen(),
        },
        _ => Message::CreateResponse {
            status: disagg_store::ipc::Status::Ok,
            descriptor: Default::default(),
        },
    };
    msg.encode().unwrap()
}

fn valid_peer_frame(rng: &mut impl Rng) -> Vec<u8> {
    let id = ObjectId::random(rng);
    let msg = match rng.gen_range(0..3) {
        0 => PeerMessage::LookupRequest(vec![id; rng.gen_range(0..4)]),
        1 => PeerMessage::ExistsRequest(id),
        _ => PeerMessage::ExistsResponse(true),
    };
    msg.encode().unwrap()
}

/// One malformed (or at least hostile) byte string: random noise, a random
/// type byte, a lying length, an oversized length, or a mutated or truncated
/// valid frame.
pub fn malformed_frame(rng: &mut impl Rng, peer: bool) -> Vec<u8> {
    let mut valid = if peer { valid_peer_frame(rng) } else { valid_client_frame(rng) };
    match rng.gen_range(0..6) {
        0 => {
            let mut v = vec![0u8; rng.gen_range(0..64)];
            rng.fill_bytes(&mut v);
            v
        }
        1 => {
            let len = rng.gen_range(0..48u32);
            let mut v = len.to_le_bytes().to_vec();
            v.push(rng.gen());
            let mut payload = vec![0u8; len as usize];
            rng.fill_bytes(&mut payload);
            v.extend(payload);
            v
        }
        2 => {
            // header claims more bytes than follow
            let claimed = valid.len() as u32 + rng.gen_range(1..100);
            valid[..4].copy_from_slice(&claimed.to_le_bytes());
            valid
        }
        3 => {
            let mut v = rng.gen_range(MAX_FRAME as u32 + 1..=u32::MAX).to_le_bytes().to_vec();
            v.push(valid[4]);
            v
        }
        4 => {
            for _ in 0..rng.gen_range(1..4) {
                let i = rng.gen_range(0..valid.len());
                valid[i] ^= 1 << rng.gen_range(0..8);
            }
            valid
        }
        _ => {
            let keep = rng.gen_range(0..valid.len());
            valid.truncate(keep);
            valid
        }
    }
}

fn drain(mut s: impl Read) {
    let mut sink = [0u8; 4096];
    while matches!(s.read(&mut sink), Ok(n) if n > 0) {}
}

/// Sends `bytes`, half-closes, and reads until the daemon closes its end.
pub fn deliver_unix(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut s = UnixStream::connect(path)?;
    s.set_read_timeout(Some(Duration::from_secs(10)))?;
    let _ = s.write_all(bytes);
    let _ = s.shutdown(Shutdown::Write);
    drain(&s);
    Ok(())
}

pub fn deliver_tcp(addr: SocketAddr, bytes: &[u8]) -> std::io::Result<()> {
    let mut s = TcpStream::connect(addr)?;
    s.set_read_timeout(Some(Duration::from_secs(10)))?;
    let _ = s.write_all(bytes);
    let _ = s.shutdown(Shutdown::Write);
    drain(&s);
    Ok(())
}
