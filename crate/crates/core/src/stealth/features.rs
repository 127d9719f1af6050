//! One-hot encoding of branch windows.
//!
//! Slot 0 is the branch, slot `j` the `j`-th instruction before it. Each
//! slot holds four one-hot groups: opcode, `rs1`, `rs2`, `rd`. Every group
//! has a final "absent" class, used for operands the instruction lacks and
//! for all four groups of slots past the start of a short window. The
//! last feature is `br_up`.

use serde::{Deserialize, Serialize};

use super::dataset::{BbblSample, WindowRecord};
use crate::isa::{Opcode, Reg};

pub const OPCODE_CLASSES: usize = 33;
pub const REG_CLASSES: usize = 33;
pub const SLOT_WIDTH: usize = OPCODE_CLASSES + 3 * REG_CLASSES;

pub fn feature_width(window: usize) -> usize {
    window * SLOT_WIDTH + 1
}

/// Sparse binary vector: indices of the set bits, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureVector {
    width: usize,
    active: Vec<u32>,
}

impl FeatureVector {
    pub fn from_active(width: usize, mut active: Vec<u32>) -> Self {
        active.sort_unstable();
        active.dedup();
        assert!(active.last().is_none_or(|&i| (i as usize) < width));
        FeatureVector { width, active }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn active(&self) -> &[u32] {
        &self.active
    }

    pub fn get(&self, index: usize) -> bool {
        self.active.binary_search(&(index as u32)).is_ok()
    }

    pub fn to_dense(&self) -> Vec<u8> {
        let mut dense = vec![0u8; self.width];
        for &i in &self.active {
            dense[i as usize] = 1;
        }
        dense
    }
}

fn opcode_class(op: Option<Opcode>) -> usize {
    op.map_or(OPCODE_CLASSES - 1, Opcode::index)
}

fn reg_class(r: Option<Reg>) -> usize {
    r.map_or(REG_CLASSES - 1, Reg::index)
}

/// Index of `class` in group `group` (0 opcode, 1 rs1, 2 rs2, 3 rd) of
/// `slot`.
pub fn feature_index(slot: usize, group: usize, class: usize) -> usize {
    let offset = match group {
        0 => 0,
        g => OPCODE_CLASSES + (g - 1) * REG_CLASSES,
    };
    slot * SLOT_WIDTH + offset + class
}

pub fn encode(sample: &BbblSample, window: usize) -> FeatureVector {
    let mut active = Vec::with_capacity(4 * window + 1);
    let mut slots = sample.window.iter().rev();
    for slot in 0..window {
        let rec: Option<&WindowRecord> = slots.next();
        active.push(feature_index(slot, 0, opcode_class(rec.map(|r| r.opcode))) as u32);
        active.push(feature_index(slot, 1, reg_class(rec.and_then(|r| r.rs1))) as u32);
        active.push(feature_index(slot, 2, reg_class(rec.and_then(|r| r.rs2))) as u32);
        active.push(feature_index(slot, 3, reg_class(rec.and_then(|r| r.rd))) as u32);
    }
    if sample.br_up {
        active.push((window * SLOT_WIDTH) as u32);
    }
    FeatureVector::from_active(feature_width(window), active)
}
