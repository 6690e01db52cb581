use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::PositionedState;

/// Association of every positioned state with a tied-state id.
///
/// Ids are dense in `[0, num_tied)` and only states of the same position may
/// share one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateTyingMap {
    num_classes: usize,
    num_positions: usize,
    ids: Vec<u32>,
    num_tied: usize,
}

impl StateTyingMap {
    /// The untied map: each positioned state is its own tied state.
    pub fn identity(num_classes: usize, num_positions: usize) -> Self {
        Self {
            num_classes,
            num_positions,
            ids: (0..(num_classes * num_positions) as u32).collect(),
            num_tied: num_classes * num_positions,
        }
    }

    /// Builds a map from ids indexed by `class * num_positions + position`.
    pub fn from_ids(num_classes: usize, num_positions: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != num_classes * num_positions {
            return Err(Error::Invariant(format!(
                "tying map covers {} of {} positioned states",
                ids.len(),
                num_classes * num_positions
            )));
        }
        let num_tied = ids.iter().map(|&i| i as usize + 1).max().unwrap_or(0);
        let mut position_of = vec![usize::MAX; num_tied];
        for (k, &id) in ids.iter().enumerate() {
            let pos = k % num_positions;
            let slot = &mut position_of[id as usize];
            if *slot == usize::MAX {
                *slot = pos;
            } else if *slot != pos {
                return Err(Error::Invariant(format!(
                    "tied state {id} mixes positions {} and {pos}",
                    *slot
                )));
            }
        }
        if position_of.iter().any(|&p| p == usize::MAX) {
            return Err(Error::Invariant("tied-state ids are not dense".into()));
        }
        Ok(Self {
            num_classes,
            num_positions,
            ids,
            num_tied,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_positions(&self) -> usize {
        self.num_positions
    }

    pub fn num_tied(&self) -> usize {
        self.num_tied
    }

    #[inline]
    pub fn tied_id(&self, class_id: u32, position: usize) -> u32 {
        self.ids[class_id as usize * self.num_positions + position]
    }

    pub fn get(&self, s: PositionedState) -> u32 {
        self.tied_id(s.class_id, s.position as usize)
    }

    /// Ids indexed by `class * num_positions + position`.
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn position_of(&self, tied: u32) -> usize {
        let k = self.ids.iter().position(|&i| i == tied).expect("tied id in range");
        k % self.num_positions
    }

    pub fn members(&self, tied: u32) -> Vec<PositionedState> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &i)| i == tied)
            .map(|(k, _)| PositionedState::new((k / self.num_positions) as u32, k % self.num_positions))
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.num_tied == self.ids.len()
    }

    /// `tying.tsv`: class_id, position, tied_state_id.
    pub fn write_tsv(&self, w: &mut impl Write) -> Result<()> {
        for (k, id) in self.ids.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}", k / self.num_positions, k % self.num_positions, id)?;
        }
        Ok(())
    }

    pub fn read_tsv(r: impl BufRead) -> Result<Self> {
        let mut rows = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<usize> = line
                .split('\t')
                .map(|t| t.parse().map_err(|_| Error::Format(format!("tying.tsv: {line:?}"))))
                .collect::<Result<_>>()?;
            if f.len() != 3 {
                return Err(Error::Format(format!("tying.tsv: {line:?}")));
            }
            rows.push((f[0], f[1], f[2] as u32));
        }
        let num_classes = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let num_positions = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let mut ids = vec![u32::MAX; num_classes * num_positions];
        for (c, p, id) in rows {
            ids[c * num_positions + p] = id;
        }
        if ids.contains(&u32::MAX) {
            return Err(Error::Format("tying.tsv does not cover every positioned state".into()));
        }
        Self::from_ids(num_classes, num_positions, ids)
    }
}
