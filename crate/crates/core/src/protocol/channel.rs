use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Message;
use crate::time::SimTime;

/// One-way link: fixed latency plus independent per-message loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    #[serde(rename = "delay_ms")]
    pub delay: SimTime,
    #[serde(default)]
    pub drop_rate: f64,
}

impl ChannelModel {
    pub fn lossless(delay: SimTime) -> Self {
        ChannelModel {
            delay,
            drop_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.delay.is_negative() {
            return Err(format!("delay must be non-negative, got {} ms", self.delay));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(format!("drop_rate must be in [0, 1], got {}", self.drop_rate));
        }
        Ok(())
    }
}

/// Stateful link instance. Deliveries never overtake each other.
#[derive(Debug, Clone)]
pub struct Channel {
    model: ChannelModel,
    rng: ChaCha8Rng,
    last_arrival: SimTime,
    sent: u64,
    dropped: u64,
}

impl Channel {
    pub fn new(model: ChannelModel, seed: u64) -> Self {
        Channel {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_arrival: SimTime::ZERO,
            sent: 0,
            dropped: 0,
        }
    }

    pub fn model(&self) -> &ChannelModel {
        &self.model
    }

    /// Arrival time for a message sent at `now`, or `None` if it is lost.
    pub fn transmit(&mut self, now: SimTime) -> Option<SimTime> {
        self.sent += 1;
        if self.model.drop_rate > 0.0 && self.rng.random::<f64>() < self.model.drop_rate {
            self.dropped += 1;
            return None;
        }
        let arrival = (now + self.model.delay).max(self.last_arrival);
        self.last_arrival = arrival;
        Some(arrival)
    }

    /// Pairs a message with its arrival time, `None` if the link lost it.
    pub fn deliver(&mut self, m: Message, now: SimTime) -> Option<(Message, SimTime)> {
        self.transmit(now).map(|t| (m, t))
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}
