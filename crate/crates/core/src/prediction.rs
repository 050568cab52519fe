//! Neighbour tracks built from received Remote ID messages, extrapolated at
//! constant velocity to compensate the reception delay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orca::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictionError {
    #[error("cannot predict {0} s into the past")]
    NegativeHorizon(f64),
}

/// Position and velocity broadcast by a UAV, stamped with the GNSS sample time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemoteIdMessage {
    pub sender_id: usize,
    pub position: Vec3,
    pub velocity: Vec3,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborTrack {
    pub last_message: RemoteIdMessage,
    pub receive_time: f64,
}

impl NeighborTrack {
    /// `p + (t - t_update) v`, with the velocity unchanged.
    pub fn predict(&self, t: f64) -> Result<(Vec3, Vec3), PredictionError> {
        predict_state(&self.last_message, t)
    }

    /// Age of the information at `t`, measured from the GNSS sample.
    pub fn staleness(&self, t: f64) -> f64 {
        t - self.last_message.timestamp
    }
}

pub fn predict_state(msg: &RemoteIdMessage, t: f64) -> Result<(Vec3, Vec3), PredictionError> {
    let dt = t - msg.timestamp;
    if dt < 0.0 {
        return Err(PredictionError::NegativeHorizon(dt));
    }
    Ok((msg.position + msg.velocity * dt, msg.velocity))
}

/// Latest track per sender, ordered by sender id.
#[derive(Debug, Clone, Default)]
pub struct TrackTable {
    tracks: BTreeMap<usize, NeighborTrack>,
}

impl TrackTable {
    pub fn new() -> Self {
        TrackTable::default()
    }

    /// Stores `msg` unless a message at least as new is already held.
    /// Returns whether the table changed.
    pub fn update(&mut self, msg: RemoteIdMessage, receive_time: f64) -> bool {
        match self.tracks.get(&msg.sender_id) {
            Some(track) if track.last_message.timestamp >= msg.timestamp => false,
            _ => {
                self.tracks.insert(
                    msg.sender_id,
                    NeighborTrack {
                        last_message: msg,
                        receive_time: receive_time.max(msg.timestamp),
                    },
                );
                true
            }
        }
    }

    pub fn get(&self, sender: usize) -> Option<&NeighborTrack> {
        self.tracks.get(&sender)
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Drops tracks whose last reception is older than `max_age` at time `t`.
    pub fn evict_older_than(&mut self, t: f64, max_age: f64) {
        self.tracks.retain(|_, track| t - track.receive_time <= max_age);
    }

    pub fn iter(&self) -> impl Iterator<Item = &NeighborTrack> {
        self.tracks.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(sender: usize, t: f64, x: f64) -> RemoteIdMessage {
        RemoteIdMessage {
            sender_id: sender,
            position: Vec3::new(x, 0.0, 0.0),
            velocity: Vec3::new(1.0, 2.0, 0.0),
            timestamp: t,
        }
    }

    #[test]
    fn prediction_examples() {
        let m = RemoteIdMessage {
            sender_id: 1,
            position: Vec3::zeros(),
            velocity: Vec3::new(1.0, 2.0, 0.0),
            timestamp: 3.0,
        };
        assert_eq!(predict_state(&m, 3.0).unwrap(), (Vec3::zeros(), m.velocity));
        assert_eq!(predict_state(&m, 5.0).unwrap().0, Vec3::new(2.0, 4.0, 0.0));
        assert!(predict_state(&m, 2.0).is_err());
    }

    #[test]
    fn table_ordering() {
        let mut table = TrackTable::new();
        assert!(table.update(msg(4, 1.0, 0.0), 1.5));
        assert_eq!(table.len(), 1);
        assert!(!table.update(msg(4, 0.5, 9.0), 2.0));
        assert_eq!(table.get(4).unwrap().last_message.position.x, 0.0);
        assert!(!table.update(msg(4, 1.0, 9.0), 2.0));
        assert!(table.update(msg(4, 2.0, 7.0), 2.1));
        assert_eq!(table.get(4).unwrap().last_message.position.x, 7.0);
    }

    #[test]
    fn eviction() {
        let mut table = TrackTable::new();
        table.update(msg(1, 0.0, 0.0), 0.5);
        table.update(msg(2, 2.0, 0.0), 2.5);
        table.evict_older_than(4.0, 3.0);
        assert!(table.get(1).is_none());
        assert!(table.get(2).is_some());
    }
}
