//! Hand-off from the simulation thread to the async comms side.
//!
//! The simulation must never block on the network, so [`SimQueue::push`] is
//! synchronous and bounded: when full it evicts the oldest queued message of
//! the same topic (or the oldest overall if the topic has none queued) and
//! counts the drop.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use tokio::sync::Notify;

pub struct SimQueue<T> {
    items: Mutex<VecDeque<(String, T)>>,
    capacity: usize,
    dropped: AtomicU64,
    closed: AtomicBool,
    notify: Notify,
}

impl<T> SimQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            items: Mutex::new(VecDeque::with_capacity(capacity)),
            capacity,
            dropped: AtomicU64::new(0),
            closed: AtomicBool::new(false),
            notify: Notify::new(),
        }
    }

    /// Never blocks on the consumer. Returns `true` if a message was
    /// evicted to make room.
    pub fn push(&self, topic: &str, item: T) -> bool {
        let mut items = self.items.lock().unwrap();
        let evicted = items.len() >= self.capacity;
        if evicted {
            let at = items.iter().position(|(t, _)| t == topic).unwrap_or(0);
            items.remove(at);
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        items.push_back((topic.to_string(), item));
        drop(items);
        self.notify.notify_one();
        evicted
    }

    pub fn try_pop(&self) -> Option<(String, T)> {
        self.items.lock().unwrap().pop_front()
    }

    /// Waits for the next message; `None` once closed and drained. Meant for
    /// a single consumer.
    pub async fn pop(&self) -> Option<(String, T)> {
        loop {
            if let Some(item) = self.try_pop() {
                return Some(item);
            }
            if self.closed.load(Ordering::SeqCst) {
                return None;
            }
            self.notify.notified().await;
        }
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.notify.notify_one();
    }

    pub fn len(&self) -> usize {
        self.items.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}
