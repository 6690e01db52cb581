//! Left-to-right character HMM topology.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of emitting states per character.
pub const DEFAULT_STATES: usize = 5;

/// An HMM state before tying: `(character class, position)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PositionedState {
    pub class_id: u32,
    pub position: u8,
}

impl PositionedState {
    pub fn new(class_id: u32, position: usize) -> Self {
        Self {
            class_id,
            position: position as u8,
        }
    }
}

/// Left-to-right HMM of one character.
///
/// The initial distribution puts all mass on state 0. State `i` either loops
/// or advances to `i + 1`; the last state loops or exits the character, so
/// every row of the transition matrix (exit included) sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacterHmm {
    pub class_id: u32,
    /// Self-loop probability per state; advancing takes the complement.
    pub self_loop: Vec<f64>,
}

impl CharacterHmm {
    pub fn new(class_id: u32, num_states: usize, self_loop: f64) -> Self {
        Self {
            class_id,
            self_loop: vec![self_loop; num_states],
        }
    }

    pub fn num_states(&self) -> usize {
        self.self_loop.len()
    }

    #[inline]
    pub fn log_self(&self, pos: usize) -> f64 {
        self.self_loop[pos].ln()
    }

    /// Log probability of leaving `pos` (to `pos + 1`, or out of the character).
    #[inline]
    pub fn log_next(&self, pos: usize) -> f64 {
        (1.0 - self.self_loop[pos]).ln()
    }

    /// Initial distribution over states.
    pub fn initial(&self) -> Vec<f64> {
        let mut pi = vec![0.0; self.num_states()];
        pi[0] = 1.0;
        pi
    }

    /// `num_states x (num_states + 1)` matrix whose last column is the exit.
    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.num_states();
        (0..n)
            .map(|i| {
                let mut row = vec![0.0; n + 1];
                row[i] = self.self_loop[i];
                row[i + 1] = 1.0 - self.self_loop[i];
                row
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.self_loop.is_empty() {
            return Err(Error::Invariant(format!("class {} has no states", self.class_id)));
        }
        if self.self_loop.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            return Err(Error::Invariant(format!(
                "class {}: self-loop probabilities must lie in [0, 1)",
                self.class_id
            )));
        }
        Ok(())
    }
}

/// One state of the cascade of character HMMs spelling a transcript.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainState {
    pub class_id: u32,
    pub position: usize,
    pub log_self: f64,
    pub log_next: f64,
}

/// Concatenates the character HMMs of `transcript` into one left-to-right chain.
pub fn build_chain(hmms: &[CharacterHmm], transcript: &[u32]) -> Result<Vec<ChainState>> {
    let mut chain = Vec::new();
    for &c in transcript {
        let h = hmms
            .get(c as usize)
            .ok_or_else(|| Error::InvalidInput(format!("class {c} has no HMM")))?;
        for p in 0..h.num_states() {
            chain.push(ChainState {
                class_id: c,
                position: p,
                log_self: h.log_self(p),
                log_next: h.log_next(p),
            });
        }
    }
    Ok(chain)
}

/// Best path through `chain` over `num_frames` frames.
///
/// The path starts in chain state 0 at frame 0 and must leave the last chain
/// state after the last frame; the exit probability is part of the score. On
/// ties the self-loop is preferred. Returns `None` when the chain is longer
/// than the frame count.
pub fn viterbi_chain(
    chain: &[ChainState],
    num_frames: usize,
    emission: impl Fn(usize, usize) -> f64,
) -> Option<(f64, Vec<usize>)> {
    let n = chain.len();
    if n == 0 || num_frames < n {
        return None;
    }
    let mut delta = vec![f64::NEG_INFINITY; n];
    let mut back = vec![0u8; num_frames * n];
    delta[0] = emission(0, 0);
    let mut next = vec![f64::NEG_INFINITY; n];
    for t in 1..num_frames {
        // state j is reachable only if j <= t and the remaining frames can
        // still cover the remaining states
        let lo = (n + t).saturating_sub(num_frames);
        let hi = t.min(n - 1);
        next.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for j in lo..=hi {
            let stay = delta[j] + chain[j].log_self;
            let adv = if j > 0 {
                delta[j - 1] + chain[j - 1].log_next
            } else {
                f64::NEG_INFINITY
            };
            let (best, from) = if stay >= adv { (stay, 0u8) } else { (adv, 1u8) };
            if best == f64::NEG_INFINITY {
                continue;
            }
            next[j] = best + emission(t, j);
            back[t * n + j] = from;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let total = delta[n - 1] + chain[n - 1].log_next;
    if total == f64::NEG_INFINITY || total.is_nan() {
        return None;
    }
    let mut path = vec![0usize; num_frames];
    let mut j = n - 1;
    for t in (0..num_frames).rev() {
        path[t] = j;
        if t > 0 && back[t * n + j] == 1 {
            j -= 1;
        }
    }
    debug_assert_eq!(j, 0);
    Some((total, path))
}
