use std::collections::VecDeque;
use std::fmt;

use crate::{DomainId, Tick};

pub const DEFAULT_LATENCY: Tick = 1;

/// Unordered domain pair naming a channel. Always stored with `a < b`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId {
    pub a: DomainId,
    pub b: DomainId,
}

impl ChannelId {
    pub fn new(x: DomainId, y: DomainId) -> Self {
        if x <= y {
            Self { a: x, b: y }
        } else {
            Self { a: y, b: x }
        }
    }

    /// 0 for `a -> b`, 1 for `b -> a`.
    pub(crate) fn direction(&self, from: &DomainId) -> usize {
        usize::from(*from != self.a)
    }

    pub fn peer_of(&self, d: &DomainId) -> &DomainId {
        if *d == self.a {
            &self.b
        } else {
            &self.a
        }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}<->{}", self.a, self.b)
    }
}

/// In-memory link between two controllers. Each direction is a FIFO of
/// wire-format envelopes with a fixed delivery latency.
#[derive(Debug, Clone)]
pub struct EastWestChannel {
    pub id: ChannelId,
    pub latency: Tick,
    pub(crate) up: bool,
    pub(crate) queues: [VecDeque<(Tick, String)>; 2],
    pub(crate) next_seq: [u64; 2],
    /// Highest sequence number accepted by the receiver, per direction.
    pub(crate) last_accepted: [u64; 2],
    pub(crate) tamper_next: [bool; 2],
}

impl EastWestChannel {
    pub(crate) fn new(id: ChannelId, latency: Tick) -> Self {
        Self {
            id,
            latency,
            up: true,
            queues: [VecDeque::new(), VecDeque::new()],
            next_seq: [1, 1],
            last_accepted: [0, 0],
            tamper_next: [false, false],
        }
    }

    pub fn is_up(&self) -> bool {
        self.up
    }

    pub fn in_flight(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub(crate) fn next_due(&self) -> Option<Tick> {
        self.queues.iter().filter_map(|q| q.front().map(|(due, _)| *due)).min()
    }
}
