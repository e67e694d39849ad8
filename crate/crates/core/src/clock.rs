//! Lamport logical clocks over procedural events.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A logical timestamp. Serializes as `{"t": .., "agent": ..}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LamportStamp {
    #[serde(rename = "t")]
    pub time: u64,
    pub agent: String,
}

impl LamportStamp {
    pub fn new(time: u64, agent: impl Into<String>) -> Self {
        Self { time, agent: agent.into() }
    }
}

/// Total order: time first, then agent id.
impl Ord for LamportStamp {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.cmp(&other.time).then_with(|| self.agent.cmp(&other.agent))
    }
}

impl PartialOrd for LamportStamp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for LamportStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.time, self.agent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CausalOrder {
    Before,
    After,
    /// Equal times from different agents; `first_is_a` says which one the
    /// agent-id tie-break puts first.
    ConcurrentTiebroken { first_is_a: bool },
    /// Same time and agent: the same event.
    Same,
}

/// Per-agent clock. Starts at 0 and never decreases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockState {
    pub agent: String,
    pub time: u64,
}

impl ClockState {
    pub fn new(agent: impl Into<String>) -> Self {
        Self { agent: agent.into(), time: 0 }
    }

    /// Local event or send: advance by one and stamp.
    pub fn tick(&mut self) -> LamportStamp {
        self.time += 1;
        LamportStamp::new(self.time, self.agent.clone())
    }

    /// Receive: jump past the incoming stamp.
    pub fn merge(&mut self, incoming: &LamportStamp) -> LamportStamp {
        self.time = self.time.max(incoming.time) + 1;
        LamportStamp::new(self.time, self.agent.clone())
    }

    /// Start a new agent from this clock's value, treating the fork as a
    /// message receive.
    pub fn fork(&self, new_agent: impl Into<String>) -> ClockState {
        let mut child = ClockState::new(new_agent);
        child.merge(&LamportStamp::new(self.time, self.agent.clone()));
        child
    }
}

/// Functional form of [`ClockState::tick`].
pub fn tick(state: &ClockState) -> (ClockState, LamportStamp) {
    let mut next = state.clone();
    let stamp = next.tick();
    (next, stamp)
}

/// Functional form of [`ClockState::merge`].
pub fn merge(state: &ClockState, incoming: &LamportStamp) -> ClockState {
    let mut next = state.clone();
    next.merge(incoming);
    next
}

pub fn causal_compare(a: &LamportStamp, b: &LamportStamp) -> CausalOrder {
    match a.time.cmp(&b.time) {
        Ordering::Less => CausalOrder::Before,
        Ordering::Greater => CausalOrder::After,
        Ordering::Equal => match a.agent.cmp(&b.agent) {
            Ordering::Equal => CausalOrder::Same,
            ord => CausalOrder::ConcurrentTiebroken { first_is_a: ord == Ordering::Less },
        },
    }
}
