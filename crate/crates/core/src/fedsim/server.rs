use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::NaturalParams;
use crate::pvi::{PosteriorState, ShardId};

/// A worker's proposed change to its site, `Δ = t_new / t_at_fetch`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDelta {
    pub shard_id: ShardId,
    pub delta: NaturalParams,
    pub new_site: NaturalParams,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub messages_up: u64,
    pub messages_down: u64,
    pub rejected: u64,
    pub simulated_time: f64,
}

/// Parameter server: owns the posterior and applies queued deltas serially.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    state: PosteriorState,
    damping: f64,
    queue: VecDeque<SiteDelta>,
    counters: Counters,
}

impl ServerState {
    pub fn new(state: PosteriorState, damping: f64) -> Result<Self> {
        if !(damping > 0.0 && damping <= 1.0) {
            return Err(PviError::InvalidArgument(format!(
                "server damping must lie in (0, 1], got {damping}"
            )));
        }
        Ok(ServerState {
            state,
            damping,
            queue: VecDeque::new(),
            counters: Counters::default(),
        })
    }

    pub fn state(&self) -> &PosteriorState {
        &self.state
    }

    pub fn into_state(self) -> PosteriorState {
        self.state
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub(crate) fn set_time(&mut self, t: f64) {
        self.counters.simulated_time = t;
    }

    pub(crate) fn count_rejected(&mut self) {
        self.counters.rejected += 1;
    }

    /// Send the current posterior to one worker.
    pub fn broadcast(&mut self) -> PosteriorState {
        self.counters.messages_down += 1;
        self.state.clone()
    }

    /// Receive one worker's delta.
    pub fn receive(&mut self, delta: SiteDelta) {
        self.counters.messages_up += 1;
        self.queue.push_back(delta);
    }

    /// Apply every queued delta in arrival order. Returns how many were
    /// applied; a delta that would make the posterior improper is dropped
    /// and counted.
    pub fn flush(&mut self) -> Result<usize> {
        let mut applied = 0;
        while let Some(d) = self.queue.pop_front() {
            if self.apply(&d)? {
                applied += 1;
            } else {
                self.counters.rejected += 1;
            }
        }
        Ok(applied)
    }

    fn apply(&mut self, d: &SiteDelta) -> Result<bool> {
        let target = if self.damping == 1.0 {
            d.new_site.clone()
        } else {
            let cur = &self.state.site(d.shard_id)?.natural;
            cur.multiply(&d.delta.scale(self.damping))?
        };
        match self.state.with_site(d.shard_id, target) {
            Ok(s) => {
                self.state = s;
                Ok(true)
            }
            Err(PviError::NotNormalizable { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn damping_scales_the_delta() {
        let prior = NaturalParams::isotropic(1, 0.0, 1.0).unwrap();
        let state = PosteriorState::init(prior, &[0]).unwrap();
        let mut server = ServerState::new(state, 0.5).unwrap();
        let site = NaturalParams::new(vec![2.0], vec![-1.0]).unwrap();
        server.receive(SiteDelta {
            shard_id: 0,
            delta: site.clone(),
            new_site: site,
        });
        assert_eq!(server.flush().unwrap(), 1);
        assert_eq!(server.state().site(0).unwrap().natural.eta1(), &[1.0]);
        assert_eq!(server.counters().messages_up, 1);
    }

    #[test]
    fn improper_deltas_are_rejected_and_counted() {
        let prior = NaturalParams::isotropic(1, 0.0, 1.0).unwrap();
        let state = PosteriorState::init(prior, &[0]).unwrap();
        let mut server = ServerState::new(state.clone(), 1.0).unwrap();
        let bad = NaturalParams::new(vec![0.0], vec![2.0]).unwrap();
        server.receive(SiteDelta {
            shard_id: 0,
            delta: bad.clone(),
            new_site: bad,
        });
        assert_eq!(server.flush().unwrap(), 0);
        assert_eq!(server.counters().rejected, 1);
        assert_eq!(server.state(), &state);
    }

    #[test]
    fn damping_must_be_in_range() {
        let prior = NaturalParams::isotropic(1, 0.0, 1.0).unwrap();
        let state = PosteriorState::init(prior, &[0]).unwrap();
        assert!(ServerState::new(state.clone(), 0.0).is_err());
        assert!(ServerState::new(state, 1.5).is_err());
    }
}
