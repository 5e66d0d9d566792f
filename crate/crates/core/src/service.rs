//! Shared plumbing for the two listeners: connection tracking so a shutdown
//! can unblock handler threads stuck in `read`.

use std::collections::HashMap;
use std::net::{Shutdown, TcpStream};
use std::os::unix::net::UnixStream;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

pub(crate) trait Closable: Send + 'static {
    fn close(&self);
}

impl Closable for TcpStream {
    fn close(&self) {
        let _ = self.shutdown(Shutdown::Both);
    }
}

impl Closable for UnixStream {
    fn close(&self) {
        let _ = self.shutdown(Shutdown::Both);
    }
}

pub(crate) struct Connections<C> {
    next: AtomicU64,
    open: Mutex<HashMap<u64, C>>,
    stopping: AtomicBool,
}

impl<C: Closable> Connections<C> {
    pub(crate) fn new() -> Self {
        Self {
            next: AtomicU64::new(0),
            open: Mutex::new(HashMap::new()),
            stopping: AtomicBool::new(false),
        }
    }

    /// Registers a connection so [`stop`](Self::stop) can close it. Returns
    /// `None`, closing the handle, once the service is stopping.
    pub(crate) fn track(&self, handle: C) -> Option<u64> {
        let mut open = self.open.lock().unwrap();
        if self.is_stopping() {
            handle.close();
            return None;
        }
        let key = self.next.fetch_add(1, Ordering::Relaxed);
        open.insert(key, handle);
        Some(key)
    }

    pub(crate) fn forget(&self, key: u64) {
        self.open.lock().unwrap().remove(&key);
    }

    pub(crate) fn is_stopping(&self) -> bool {
        self.stopping.load(Ordering::Acquire)
    }

    /// Marks the service as stopping and closes every tracked connection.
    pub(crate) fn stop(&self) {
        let mut open = self.open.lock().unwrap();
        self.stopping.store(true, Ordering::Release);
        for (_, c) in open.drain() {
            c.close();
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.open.lock().unwrap().len()
    }
}
