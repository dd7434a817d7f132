//! Row adjacency inside the DRAM device: which rows an activation disturbs,
//! including half-row patterns where the two 32-bit halves of a logical row
//! sit next to different physical neighbors.
//!
//! The generative model treats a logical row as two half-rows, one per chip
//! group. Each group orders rows physically by a permutation; rows adjacent
//! in both groups are whole neighbors, rows adjacent in only one group are
//! half neighbors on that group's bit positions. The low group is kept linear
//! and the high group permuted, which reproduces the measured vendor maps:
//! reversing each aligned 8-row group yields exactly the observed pattern of
//! whole rows with half-row seams at 8-row boundaries.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which bit positions of a victim word an adjacency covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VictimKind {
    Whole,
    HalfLow,
    HalfHigh,
}

impl VictimKind {
    pub fn tag(self) -> &'static str {
        match self {
            VictimKind::Whole => "W",
            VictimKind::HalfLow => "HL",
            VictimKind::HalfHigh => "HH",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        Some(match s {
            "W" => VictimKind::Whole,
            "HL" => VictimKind::HalfLow,
            "HH" => VictimKind::HalfHigh,
            _ => None?,
        })
    }
}

/// Word bit positions 0-31 (low) or 32-63 (high).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Half {
    Low,
    High,
}

impl Half {
    pub fn bit_range(self) -> std::ops::Range<u8> {
        match self {
            Half::Low => 0..32,
            Half::High => 32..64,
        }
    }
}

/// One aggressor's adjacency: its victims, plus markers for half-slots that
/// face a spare row or the bank edge and so have no addressable victim.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdjEntry {
    pub victims: Vec<(u32, VictimKind)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spares: Vec<Half>,
}

impl AdjEntry {
    fn normalized(mut self) -> Self {
        self.victims.sort_unstable();
        self.victims.dedup();
        self.spares.sort_unstable();
        self
    }

    pub fn whole_victims(&self) -> impl Iterator<Item = u32> + '_ {
        self.victims
            .iter()
            .filter(|(_, k)| *k == VictimKind::Whole)
            .map(|(r, _)| *r)
    }
}

/// Explicit aggressor -> victims map, the form inference emits and configs
/// carry.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdjacencyMap {
    pub entries: BTreeMap<u32, AdjEntry>,
}

impl AdjacencyMap {
    pub fn insert(&mut self, aggressor: u32, entry: AdjEntry) {
        self.entries.insert(aggressor, entry.normalized());
    }

    /// Exact set comparison; empty diff means the maps agree.
    pub fn diff(&self, other: &AdjacencyMap) -> Vec<MapDiff> {
        let mut out = Vec::new();
        let rows: std::collections::BTreeSet<u32> = self
            .entries
            .keys()
            .chain(other.entries.keys())
            .copied()
            .collect();
        for row in rows {
            match (self.entries.get(&row), other.entries.get(&row)) {
                (Some(a), Some(b)) => {
                    let a = a.clone().normalized();
                    let b = b.clone().normalized();
                    if a != b {
                        out.push(MapDiff::EntryMismatch {
                            aggressor: row,
                            left: a,
                            right: b,
                        });
                    }
                }
                (Some(_), None) => out.push(MapDiff::OnlyLeft(row)),
                (None, Some(_)) => out.push(MapDiff::OnlyRight(row)),
                (None, None) => unreachable!("row came from one of the key sets"),
            }
        }
        out
    }

    /// Every listed victim whose own entry is in the map must list the
    /// aggressor back with the same kind — adjacency is a physical neighbor
    /// relation in one chip group. Victims outside the map (partial
    /// materializations stop at range boundaries) are skipped.
    pub fn check_symmetry(&self) -> Result<(), String> {
        for (agg, entry) in &self.entries {
            for (victim, kind) in &entry.victims {
                let Some(back) = self.entries.get(victim) else {
                    continue;
                };
                if !back.victims.iter().any(|(r, k)| r == agg && k == kind) {
                    return Err(format!(
                        "0x{agg:x} -> 0x{victim:x} ({}) has no symmetric partner",
                        kind.tag()
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MapDiff {
    EntryMismatch {
        aggressor: u32,
        left: AdjEntry,
        right: AdjEntry,
    },
    OnlyLeft(u32),
    OnlyRight(u32),
}

impl std::fmt::Display for MapDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MapDiff::EntryMismatch { aggressor, left, right } => write!(
                f,
                "0x{aggressor:x}: {} vs {}",
                format_entry(left),
                format_entry(right)
            ),
            MapDiff::OnlyLeft(r) => write!(f, "0x{r:x}: only in left map"),
            MapDiff::OnlyRight(r) => write!(f, "0x{r:x}: only in right map"),
        }
    }
}

pub fn format_entry(e: &AdjEntry) -> String {
    let mut parts: Vec<String> = e
        .victims
        .iter()
        .map(|(r, k)| format!("0x{r:x} ({})", k.tag()))
        .collect();
    for s in &e.spares {
        parts.push(format!("spare/edge ({:?})", s));
    }
    parts.join(", ")
}

/// Ground-truth adjacency for a device profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum AdjacencySpec {
    /// Both halves linear: victims are row-1 and row+1.
    Linear,
    /// Low halves linear; high halves permuted by reversing each aligned
    /// `group`-row block.
    GroupReversal { group: u32 },
    /// Low halves linear; high halves ordered by an arbitrary permutation
    /// (position -> row). Used by the synthetic generator.
    HalfPermutation { h_order: Vec<u32> },
    /// Another spec with explicit per-row replacements layered on top.
    Overlay {
        base: Box<AdjacencySpec>,
        overrides: AdjacencyMap,
    },
    /// Only the listed entries; rows without one are unknown (inference
    /// output is carried in this form).
    Explicit(AdjacencyMap),
}

impl AdjacencySpec {
    /// The adjacency entry for `row`, or `None` where the spec has no
    /// knowledge of the row (out of range).
    pub fn entry(&self, row: u32, rows_per_bank: u32) -> Option<AdjEntry> {
        if row >= rows_per_bank {
            return None;
        }
        match self {
            AdjacencySpec::Linear => {
                Some(combine_groups(row, linear_neighbors(row, rows_per_bank), linear_neighbors(row, rows_per_bank)))
            }
            AdjacencySpec::GroupReversal { group } => {
                let h = reversal_neighbors(row, rows_per_bank, *group);
                Some(combine_groups(row, linear_neighbors(row, rows_per_bank), h))
            }
            AdjacencySpec::HalfPermutation { h_order } => {
                if h_order.len() != rows_per_bank as usize {
                    return None;
                }
                let pos = h_order.iter().position(|&r| r == row)? as u32;
                let mut h = Vec::new();
                if pos > 0 {
                    h.push(h_order[pos as usize - 1]);
                }
                if pos + 1 < rows_per_bank {
                    h.push(h_order[pos as usize + 1]);
                }
                Some(combine_groups(row, linear_neighbors(row, rows_per_bank), h))
            }
            AdjacencySpec::Overlay { base, overrides } => overrides
                .entries
                .get(&row)
                .cloned()
                .or_else(|| base.entry(row, rows_per_bank)),
            AdjacencySpec::Explicit(map) => map.entries.get(&row).cloned(),
        }
    }

    /// Materialize entries for a row range into an explicit map.
    pub fn materialize(&self, rows: std::ops::Range<u32>, rows_per_bank: u32) -> AdjacencyMap {
        let mut map = AdjacencyMap::default();
        for row in rows {
            if let Some(e) = self.entry(row, rows_per_bank) {
                map.insert(row, e);
            }
        }
        map
    }
}

fn linear_neighbors(row: u32, rows: u32) -> Vec<u32> {
    let mut v = Vec::with_capacity(2);
    if row > 0 {
        v.push(row - 1);
    }
    if row + 1 < rows {
        v.push(row + 1);
    }
    v
}

/// High-group neighbors under the reverse-each-aligned-group order. With
/// group 8 the physical order runs 7,6,..,0,15,14,..,8,23,..., so interior
/// rows of a group keep whole adjacency while group boundaries produce the
/// measured half-row seams (0x...0 next to 0x...F of the previous block).
fn reversal_neighbors(row: u32, rows: u32, group: u32) -> Vec<u32> {
    let g = row / group;
    let within = row % group;
    let pos = g * group + (group - 1 - within);
    let row_at = |p: u32| -> u32 {
        let g = p / group;
        let w = p % group;
        g * group + (group - 1 - w)
    };
    let mut v = Vec::with_capacity(2);
    if pos > 0 {
        v.push(row_at(pos - 1));
    }
    if pos + 1 < rows {
        v.push(row_at(pos + 1));
    }
    v
}

/// Fold per-group neighbor lists into one entry: a neighbor in both groups is
/// a whole victim, group-exclusive neighbors are half victims, and a group
/// chain end is a spare/bank-edge marker for that half.
fn combine_groups(_row: u32, low: Vec<u32>, high: Vec<u32>) -> AdjEntry {
    let mut entry = AdjEntry::default();
    for &r in &low {
        if high.contains(&r) {
            entry.victims.push((r, VictimKind::Whole));
        } else {
            entry.victims.push((r, VictimKind::HalfLow));
        }
    }
    for &r in &high {
        if !low.contains(&r) {
            entry.victims.push((r, VictimKind::HalfHigh));
        }
    }
    for _ in low.len()..2 {
        entry.spares.push(Half::Low);
    }
    for _ in high.len()..2 {
        entry.spares.push(Half::High);
    }
    entry.normalized()
}

/// Random device geometry for inference oracle tests: the high-group order is
/// built from segments that are either kept linear or reversed in aligned
/// groups of 2, 4 or 8, giving a mix of whole rows, half-row seams and edge
/// spares. Victims always stay within 2*8-1 rows of the aggressor.
pub fn synthetic_spec(seed: u64, rows_per_bank: u32) -> AdjacencySpec {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut h_order: Vec<u32> = Vec::with_capacity(rows_per_bank as usize);
    let mut cursor = 0u32;
    while cursor < rows_per_bank {
        let left = rows_per_bank - cursor;
        let group: u32 = [1, 2, 4, 8][rng.gen_range(0..4usize)];
        let groups = rng.gen_range(1..=4u32);
        let len = (group * groups).min(left - left % group);
        if len == 0 {
            // Tail shorter than the chosen group stays linear.
            h_order.extend(cursor..rows_per_bank);
            break;
        }
        for g in 0..len / group {
            let base = cursor + g * group;
            for w in 0..group {
                h_order.push(base + (group - 1 - w));
            }
        }
        cursor += len;
    }
    debug_assert_eq!(h_order.len(), rows_per_bank as usize);
    AdjacencySpec::HalfPermutation { h_order }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_interior_and_edges() {
        let spec = AdjacencySpec::Linear;
        let e = spec.entry(5, 64).unwrap();
        assert_eq!(
            e.victims,
            vec![(4, VictimKind::Whole), (6, VictimKind::Whole)]
        );
        assert!(e.spares.is_empty());
        let edge = spec.entry(0, 64).unwrap();
        assert_eq!(edge.victims, vec![(1, VictimKind::Whole)]);
        assert_eq!(edge.spares, vec![Half::Low, Half::High]);
    }

    #[test]
    fn group_reversal_reproduces_measured_block() {
        // The 16 consecutive logical rows 0x11408..=0x11417.
        let spec = AdjacencySpec::GroupReversal { group: 8 };
        let rows = 1 << 17;
        let e = |r: u32| spec.entry(r, rows).unwrap();

        // 0x11408: whole 0x11409, halves 0x11407 (low) and 0x11417 (high).
        assert_eq!(
            e(0x11408).victims,
            vec![
                (0x11407, VictimKind::HalfLow),
                (0x11409, VictimKind::Whole),
                (0x11417, VictimKind::HalfHigh)
            ]
        );
        // Interior rows are plain whole pairs.
        assert_eq!(
            e(0x11409).victims,
            vec![(0x11408, VictimKind::Whole), (0x1140a, VictimKind::Whole)]
        );
        assert_eq!(
            e(0x1140f).victims,
            vec![
                (0x11400, VictimKind::HalfHigh),
                (0x1140e, VictimKind::Whole),
                (0x11410, VictimKind::HalfLow)
            ]
        );
        assert_eq!(
            e(0x11410).victims,
            vec![
                (0x1140f, VictimKind::HalfLow),
                (0x11411, VictimKind::Whole),
                (0x1141f, VictimKind::HalfHigh)
            ]
        );
        assert_eq!(
            e(0x11411).victims,
            vec![(0x11410, VictimKind::Whole), (0x11412, VictimKind::Whole)]
        );
        assert_eq!(
            e(0x11417).victims,
            vec![
                (0x11408, VictimKind::HalfHigh),
                (0x11416, VictimKind::Whole),
                (0x11418, VictimKind::HalfLow)
            ]
        );
    }

    #[test]
    fn group_reversal_bank_start_matches_edge_table() {
        let spec = AdjacencySpec::GroupReversal { group: 8 };
        let rows = 1 << 17;
        // Row 0: whole 0x0001, half 0x000F, other half faces the edge.
        let e = spec.entry(0, rows).unwrap();
        assert_eq!(
            e.victims,
            vec![(0x0001, VictimKind::Whole), (0x000f, VictimKind::HalfHigh)]
        );
        assert_eq!(e.spares, vec![Half::Low]);
        // Row 7: whole 0x0006, half 0x0008; high half hits the chain end.
        let e = spec.entry(7, rows).unwrap();
        assert_eq!(
            e.victims,
            vec![(0x0006, VictimKind::Whole), (0x0008, VictimKind::HalfLow)]
        );
        assert_eq!(e.spares, vec![Half::High]);
        // Row 8: whole 0x0009, halves 0x0007 and 0x0017.
        let e = spec.entry(8, rows).unwrap();
        assert_eq!(
            e.victims,
            vec![
                (0x0007, VictimKind::HalfLow),
                (0x0009, VictimKind::Whole),
                (0x0017, VictimKind::HalfHigh)
            ]
        );
    }

    #[test]
    fn materialized_maps_are_symmetric() {
        let rows = 256;
        for spec in [
            AdjacencySpec::Linear,
            AdjacencySpec::GroupReversal { group: 8 },
            synthetic_spec(9, rows),
        ] {
            let map = spec.materialize(0..rows, rows);
            map.check_symmetry().unwrap();
        }
    }

    #[test]
    fn synthetic_specs_mix_kinds() {
        let rows = 64;
        let mut saw_whole = false;
        let mut saw_half = false;
        let mut saw_spare = false;
        for seed in 0..20 {
            let map = synthetic_spec(seed, rows).materialize(0..rows, rows);
            map.check_symmetry().unwrap();
            for e in map.entries.values() {
                for (_, k) in &e.victims {
                    match k {
                        VictimKind::Whole => saw_whole = true,
                        _ => saw_half = true,
                    }
                }
                if !e.spares.is_empty() {
                    saw_spare = true;
                }
            }
        }
        assert!(saw_whole && saw_half && saw_spare);
    }

    #[test]
    fn synthetic_victim_radius_bounded() {
        let rows = 64;
        for seed in 0..50 {
            let map = synthetic_spec(seed, rows).materialize(0..rows, rows);
            for (agg, e) in &map.entries {
                for (v, _) in &e.victims {
                    assert!(
                        (*agg as i64 - *v as i64).abs() < 16,
                        "seed {seed}: 0x{agg:x} -> 0x{v:x}"
                    );
                }
            }
        }
    }

    #[test]
    fn diff_reports_discrepancies() {
        let spec = AdjacencySpec::Linear;
        let a = spec.materialize(0..16, 16);
        let mut b = a.clone();
        assert!(a.diff(&b).is_empty());
        b.entries.get_mut(&3).unwrap().victims.pop();
        assert_eq!(a.diff(&b).len(), 1);
        b.entries.remove(&5);
        assert_eq!(a.diff(&b).len(), 2);
    }

    #[test]
    fn overlay_replaces_entries() {
        let mut overrides = AdjacencyMap::default();
        overrides.insert(
            7,
            AdjEntry {
                victims: vec![(6, VictimKind::Whole), (8, VictimKind::HalfLow), (100, VictimKind::HalfHigh)],
                spares: vec![],
            },
        );
        let spec = AdjacencySpec::Overlay {
            base: Box::new(AdjacencySpec::GroupReversal { group: 8 }),
            overrides,
        };
        let e = spec.entry(7, 1 << 17).unwrap();
        assert!(e.victims.contains(&(100, VictimKind::HalfHigh)));
        // Non-overridden rows come from the base.
        assert_eq!(
            spec.entry(9, 1 << 17),
            AdjacencySpec::GroupReversal { group: 8 }.entry(9, 1 << 17)
        );
    }
}
