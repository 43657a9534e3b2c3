use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use super::{Result, SacError};
use crate::encoders::Transition;

/// A stored trajectory. `first_index` is the insertion index of its first
/// transition, counted over the buffer's lifetime.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub first_index: u64,
    pub transitions: Vec<Transition>,
}

/// Context draw from the recency window.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSample {
    pub transitions: Vec<Transition>,
    pub indices: Vec<u64>,
    /// The window held fewer transitions than requested, so draws repeat.
    pub with_replacement: bool,
}

/// Per-task FIFO store of whole episodes, capped by transition count.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    len: usize,
    next_index: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    /// Number of stored transitions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Appends an episode, evicting the oldest whole episodes to stay within
    /// capacity.
    pub fn add_episode(&mut self, transitions: Vec<Transition>) -> Result<()> {
        let n = transitions.len();
        if n > self.capacity {
            return Err(SacError::EpisodeTooLong {
                len: n,
                capacity: self.capacity,
            });
        }
        if n == 0 {
            return Ok(());
        }
        if transitions.iter().any(|t| !t.is_finite()) {
            return Err(SacError::NonFinite("transition"));
        }
        while self.len + n > self.capacity {
            let old = self.episodes.pop_front().expect("non-empty while over capacity");
            self.len -= old.transitions.len();
        }
        self.episodes.push_back(Episode {
            first_index: self.next_index,
            transitions,
        });
        self.next_index += n as u64;
        self.len += n;
        Ok(())
    }

    /// `count` episodes drawn uniformly with replacement.
    pub fn sample_episodes<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<&Episode>> {
        if self.episodes.is_empty() {
            return Err(SacError::EmptyBuffer);
        }
        Ok((0..count)
            .map(|_| &self.episodes[rng.random_range(0..self.episodes.len())])
            .collect())
    }

    /// `n` transitions from the most recent `window` ones. Draws are without
    /// replacement when the window holds at least `n`.
    pub fn sample_recent_contexts<R: Rng + ?Sized>(
        &self,
        n: usize,
        window: usize,
        rng: &mut R,
    ) -> Result<ContextSample> {
        if self.is_empty() {
            return Err(SacError::EmptyBuffer);
        }
        let w = window.min(self.len).max(1);
        let with_replacement = n > w;
        let offsets: Vec<usize> = if with_replacement {
            (0..n).map(|_| rng.random_range(0..w)).collect()
        } else {
            index::sample(rng, w, n).into_vec()
        };
        let mut transitions = Vec::with_capacity(n);
        let mut indices = Vec::with_capacity(n);
        for off in offsets {
            // offset counts back from the newest transition
            let global = self.next_index - 1 - off as u64;
            let t = self.get(global).expect("inside the window");
            transitions.push(t.clone());
            indices.push(global);
        }
        Ok(ContextSample {
            transitions,
            indices,
            with_replacement,
        })
    }

    /// Transition by insertion index, if still stored.
    pub fn get(&self, index: u64) -> Option<&Transition> {
        let pos = self
            .episodes
            .partition_point(|e| e.first_index + e.transitions.len() as u64 <= index);
        let ep = self.episodes.get(pos)?;
        if index < ep.first_index {
            return None;
        }
        ep.transitions.get((index - ep.first_index) as usize)
    }

    pub fn clear(&mut self) {
        self.episodes.clear();
        self.len = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(tag: f64, n: usize) -> Vec<Transition> {
        (0..n)
            .map(|i| Transition {
                state: vec![tag],
                action: vec![i as f64],
                reward: 0.0,
                next_state: vec![tag],
                done: false,
            })
            .collect()
    }

    #[test]
    fn eviction_keeps_whole_recent_episodes() {
        let mut buf = ReplayBuffer::new(10);
        for k in 0..5 {
            buf.add_episode(episode(k as f64, 4)).unwrap();
            assert!(buf.len() <= 10);
        }
        let tags: Vec<f64> = buf.episodes().map(|e| e.transitions[0].state[0]).collect();
        assert_eq!(tags, vec![3.0, 4.0]);
        assert_eq!(buf.len(), 8);
        assert!(buf.get(0).is_none());
        assert_eq!(buf.get(19).unwrap().action[0], 3.0);
        assert!(matches!(
            buf.add_episode(episode(0.0, 11)),
            Err(SacError::EpisodeTooLong { .. })
        ));
    }

    #[test]
    fn contexts_come_from_the_window() {
        let mut buf = ReplayBuffer::new(100);
        for k in 0..10 {
            buf.add_episode(episode(k as f64, 5)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let c = buf.sample_recent_contexts(6, 10, &mut rng).unwrap();
            assert!(!c.with_replacement);
            assert!(c.indices.iter().all(|&i| i >= 40));
            let mut d = c.indices.clone();
            d.sort_unstable();
            d.dedup();
            assert_eq!(d.len(), 6);
            assert!(c.transitions.iter().all(|t| t.state[0] >= 8.0));
        }
        let c = buf.sample_recent_contexts(20, 10, &mut rng).unwrap();
        assert!(c.with_replacement);
        assert_eq!(c.transitions.len(), 20);
    }

    #[test]
    fn empty_buffer_errors() {
        let buf = ReplayBuffer::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(buf.sample_episodes(2, &mut rng), Err(SacError::EmptyBuffer)));
        assert!(matches!(
            buf.sample_recent_contexts(2, 5, &mut rng),
            Err(SacError::EmptyBuffer)
        ));
    }
}
