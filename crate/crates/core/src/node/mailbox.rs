use std::collections::VecDeque;
use std::sync::{Arc, Mutex, MutexGuard};

use crate::codec::MovementCommand;

pub const DEFAULT_CAPACITY: usize = 64;

#[derive(Debug)]
struct Inner {
    queue: VecDeque<MovementCommand>,
    capacity: usize,
    pushed: u64,
    dropped: u64,
}

/// Bounded FIFO between the node runtime (producer) and the movement controller (consumer).
///
/// Handles are cheap clones of one shared queue. A full mailbox evicts its
/// oldest command to admit the new one.
#[derive(Clone, Debug)]
pub struct Mailbox {
    inner: Arc<Mutex<Inner>>,
}

impl Mailbox {
    pub fn new(capacity: usize) -> Self {
        Mailbox {
            inner: Arc::new(Mutex::new(Inner {
                queue: VecDeque::with_capacity(capacity),
                capacity: capacity.max(1),
                pushed: 0,
                dropped: 0,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        // A panicking holder cannot leave the deque half-updated.
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Enqueues `cmd`, returning the command evicted to make room, if any.
    pub fn push(&self, cmd: MovementCommand) -> Option<MovementCommand> {
        let mut inner = self.lock();
        inner.pushed += 1;
        let evicted = if inner.queue.len() >= inner.capacity {
            inner.dropped += 1;
            inner.queue.pop_front()
        } else {
            None
        };
        inner.queue.push_back(cmd);
        evicted
    }

    pub fn pop(&self) -> Option<MovementCommand> {
        self.lock().queue.pop_front()
    }

    pub fn len(&self) -> usize {
        self.lock().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.lock().capacity
    }

    pub fn dropped(&self) -> u64 {
        self.lock().dropped
    }

    pub fn pushed(&self) -> u64 {
        self.lock().pushed
    }
}

impl Default for Mailbox {
    fn default() -> Self {
        Mailbox::new(DEFAULT_CAPACITY)
    }
}
