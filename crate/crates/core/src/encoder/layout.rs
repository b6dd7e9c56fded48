use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Shared,
    Specialized,
}

/// Per-block kinds, bottom block first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout(Vec<BlockKind>);

impl BlockLayout {
    pub fn blocks(&self) -> &[BlockKind] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_specialized(&self) -> usize {
        self.0
            .iter()
            .filter(|k| **k == BlockKind::Specialized)
            .count()
    }

    /// 1-based positions of the specialized blocks.
    pub fn specialized_positions(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == BlockKind::Specialized)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// `period` shared blocks followed by one specialized block, repeated and
/// truncated at `num_blocks`.
pub fn build_layout(num_blocks: usize, period: usize) -> BlockLayout {
    assert!(period >= 1, "interleave period must be at least 1");
    BlockLayout(
        (1..=num_blocks)
            .map(|pos| {
                if pos % (period + 1) == 0 {
                    BlockKind::Specialized
                } else {
                    BlockKind::Shared
                }
            })
            .collect(),
    )
}
