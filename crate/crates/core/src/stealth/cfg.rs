//! Basic blocks and instruction windows.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::isa::{InstrKind, Program};

/// Text indices of every basic block, in program order.
///
/// Leaders are the entry, the first instruction, every in-text target of a
/// branch or `jal`, and the instruction after any control transfer.
pub fn basic_blocks(p: &Program) -> Vec<Range<usize>> {
    let text = p.text();
    if text.is_empty() {
        return Vec::new();
    }
    let index_of = |addr: u32| -> Option<usize> {
        (addr >= p.text_base() && addr < p.text_end() && addr.is_multiple_of(4))
            .then(|| ((addr - p.text_base()) / 4) as usize)
    };
    let mut leaders = BTreeSet::new();
    leaders.insert(0);
    if let Some(i) = index_of(p.entry()) {
        leaders.insert(i);
    }
    for (i, instr) in text.iter().enumerate() {
        let transfers = matches!(
            instr.kind(),
            InstrKind::CondBranch | InstrKind::Jal | InstrKind::Jalr
        );
        if let Some(t) = instr.target_address().and_then(index_of) {
            leaders.insert(t);
        }
        if transfers && i + 1 < text.len() {
            leaders.insert(i + 1);
        }
    }
    let starts: Vec<usize> = leaders.into_iter().collect();
    starts
        .iter()
        .enumerate()
        .map(|(k, &s)| s..starts.get(k + 1).copied().unwrap_or(text.len()))
        .collect()
}

/// For each branch, the text range of its window: up to `size` instructions
/// ending at the branch and never crossing the start of its block.
pub fn branch_windows(p: &Program, size: usize) -> Vec<Range<usize>> {
    assert!(size >= 1, "window size must be at least 1");
    let mut out = Vec::new();
    for block in basic_blocks(p) {
        let last = block.end - 1;
        if p.text()[last].is_cond_branch() {
            let start = block.start.max((last + 1).saturating_sub(size));
            out.push(start..last + 1);
        }
    }
    out
}
