//! Latest-value channel store shared between a publisher and the tick loop.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Seconds on the blackboard clock.
    pub stamp: f64,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BlackboardError {
    #[error("channel `{channel}`: timestamp {stamp} precedes previous sample at {previous}")]
    NonMonotonic { channel: String, stamp: f64, previous: f64 },
    #[error("clock cannot move backwards from {now} to {requested}")]
    ClockRewind { now: f64, requested: f64 },
    #[error("non-finite timestamp {0}")]
    BadStamp(f64),
}

#[derive(Debug, Default)]
struct State {
    channels: HashMap<String, Sample>,
    clock: f64,
}

/// Cloneable handle; clones share the same store.
///
/// Reads return the latest sample or `None` and never wait for new data.
#[derive(Debug, Clone, Default)]
pub struct Blackboard {
    inner: Arc<RwLock<State>>,
}

impl Blackboard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, channel: &str, stamp: f64, value: Vec<f64>) -> Result<(), BlackboardError> {
        if !stamp.is_finite() {
            return Err(BlackboardError::BadStamp(stamp));
        }
        let mut st = self.inner.write().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = st.channels.get(channel) {
            if stamp < prev.stamp {
                return Err(BlackboardError::NonMonotonic { channel: channel.to_owned(), stamp, previous: prev.stamp });
            }
        }
        st.channels.insert(channel.to_owned(), Sample { stamp, value });
        Ok(())
    }

    pub fn read(&self, channel: &str) -> Option<Sample> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).channels.get(channel).cloned()
    }

    pub fn now(&self) -> f64 {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clock
    }

    pub fn set_clock(&self, t: f64) -> Result<(), BlackboardError> {
        if !t.is_finite() {
            return Err(BlackboardError::BadStamp(t));
        }
        let mut st = self.inner.write().unwrap_or_else(|e| e.into_inner());
        if t < st.clock {
            return Err(BlackboardError::ClockRewind { now: st.clock, requested: t });
        }
        st.clock = t;
        Ok(())
    }

    pub fn channels(&self) -> Vec<String> {
        let st = self.inner.read().unwrap_or_else(|e| e.into_inner());
        let mut names: Vec<_> = st.channels.keys().cloned().collect();
        names.sort();
        names
    }
}
