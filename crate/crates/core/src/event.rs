//! Shared domain types: events, streams, labels and windows.

use std::fmt;
use std::ops::{Deref, Range};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    pub fn from_sign(s: i8) -> Option<Self> {
        match s {
            -1 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }
}

/// One DVS event. Time is integer microseconds since stream start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Resolution {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        u32::from(x) < self.width && u32::from(y) < self.height
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Time-ordered events from one sensor. The event buffer is shared, so
/// cloning a stream or slicing windows out of it does not copy events.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    events: Arc<[Event]>,
    resolution: Resolution,
    duration_us: u64,
}

impl EventStream {
    /// The duration defaults to one microsecond past the latest event.
    pub fn new(events: Vec<Event>, resolution: Resolution) -> Self {
        let duration_us = events.iter().map(|e| e.t + 1).max().unwrap_or(0);
        Self { events: events.into(), resolution, duration_us }
    }

    /// Extends (never shrinks below the last event) the covered time span.
    pub fn with_duration(mut self, duration_us: u64) -> Self {
        let min = self.events.iter().map(|e| e.t + 1).max().unwrap_or(0);
        self.duration_us = duration_us.max(min);
        self
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    /// Stream covers `[0, duration_us)`.
    pub fn duration_us(&self) -> u64 {
        self.duration_us
    }

    /// Index range of events with `t_start <= t < t_end`. Requires sorted events.
    pub fn range_of(&self, t_start: u64, t_end: u64) -> Range<usize> {
        let lo = self.events.partition_point(|e| e.t < t_start);
        let hi = self.events.partition_point(|e| e.t < t_end);
        lo..hi.max(lo)
    }

    pub fn slice(&self, range: Range<usize>) -> EventSlice {
        assert!(range.start <= range.end && range.end <= self.events.len());
        EventSlice { buf: Arc::clone(&self.events), range }
    }
}

/// A contiguous, shared view into an [`EventStream`]'s buffer.
#[derive(Clone, Debug)]
pub struct EventSlice {
    buf: Arc<[Event]>,
    range: Range<usize>,
}

impl EventSlice {
    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }
}

impl Deref for EventSlice {
    type Target = [Event];

    fn deref(&self) -> &[Event] {
        &self.buf[self.range.clone()]
    }
}

impl PartialEq for EventSlice {
    fn eq(&self, other: &Self) -> bool {
        **self == **other
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PupilLabel {
    /// Microseconds; real-valued once interpolated to a window center.
    pub t: f64,
    pub x: f64,
    pub y: f64,
    /// False while the pupil cannot be labeled (e.g. a closed eye).
    pub valid: bool,
}

/// A labeled temporal slice `[t_start, t_end)` of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub t_start: u64,
    pub t_end: u64,
    pub events: EventSlice,
    pub label: PupilLabel,
    /// Center of the fixed window this one was grown from.
    pub nominal_center: f64,
    pub resolution: Resolution,
}

impl Window {
    pub fn span_us(&self) -> u64 {
        self.t_end - self.t_start
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    ZeroResolution,
    OutOfBounds { x: u16, y: u16 },
    Unordered { previous_t: u64, t: u64 },
    PastDuration { t: u64, duration_us: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Index of the offending event; `None` for stream-level violations.
    pub index: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(i) = self.index {
            write!(f, "event {i}: ")?;
        }
        match &self.kind {
            ViolationKind::ZeroResolution => write!(f, "resolution has a zero component"),
            ViolationKind::OutOfBounds { x, y } => write!(f, "({x}, {y}) outside the sensor"),
            ViolationKind::Unordered { previous_t, t } => write!(f, "t = {t} after t = {previous_t}"),
            ViolationKind::PastDuration { t, duration_us } => write!(f, "t = {t} beyond duration {duration_us}"),
        }
    }
}

/// Every broken stream invariant, one entry per offending event.
pub fn validate_stream(stream: &EventStream) -> Vec<Violation> {
    let mut out = Vec::new();
    let res = stream.resolution();
    if res.width == 0 || res.height == 0 {
        out.push(Violation { index: None, kind: ViolationKind::ZeroResolution });
    }
    let mut previous: Option<u64> = None;
    for (i, e) in stream.events().iter().enumerate() {
        if !res.contains(e.x, e.y) {
            out.push(Violation { index: Some(i), kind: ViolationKind::OutOfBounds { x: e.x, y: e.y } });
        }
        if let Some(p) = previous {
            if e.t < p {
                out.push(Violation { index: Some(i), kind: ViolationKind::Unordered { previous_t: p, t: e.t } });
            }
        }
        if e.t >= stream.duration_us() {
            out.push(Violation {
                index: Some(i),
                kind: ViolationKind::PastDuration { t: e.t, duration_us: stream.duration_us() },
            });
        }
        previous = Some(e.t);
    }
    out
}
