use serde::{Deserialize, Serialize};

use super::manifest::{FileMeta, Manifest, PartitionMeta};
use crate::time::{TimeRange, Timestamp};

/// Predicate on the measured value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValuePredicate {
    Gt(f64),
    Ge(f64),
    Lt(f64),
    Le(f64),
    /// Inclusive on both ends.
    Between(f64, f64),
}

impl ValuePredicate {
    pub fn matches(&self, v: f64) -> bool {
        match *self {
            ValuePredicate::Gt(x) => v > x,
            ValuePredicate::Ge(x) => v >= x,
            ValuePredicate::Lt(x) => v < x,
            ValuePredicate::Le(x) => v <= x,
            ValuePredicate::Between(lo, hi) => lo <= v && v <= hi,
        }
    }

    /// False only if no value in `[min, max]` can satisfy the predicate.
    pub fn may_match(&self, min: f64, max: f64) -> bool {
        match *self {
            ValuePredicate::Gt(x) => max > x,
            ValuePredicate::Ge(x) => max >= x,
            ValuePredicate::Lt(x) => min < x,
            ValuePredicate::Le(x) => min <= x,
            ValuePredicate::Between(lo, hi) => max >= lo && min <= hi,
        }
    }

    /// Parses `>0.45`, `>=505`, `<1`, `<=2`, or `lo..hi`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        let num = |t: &str| t.trim().parse::<f64>().ok();
        if let Some(rest) = s.strip_prefix(">=") {
            return num(rest).map(ValuePredicate::Ge);
        }
        if let Some(rest) = s.strip_prefix("<=") {
            return num(rest).map(ValuePredicate::Le);
        }
        if let Some(rest) = s.strip_prefix('>') {
            return num(rest).map(ValuePredicate::Gt);
        }
        if let Some(rest) = s.strip_prefix('<') {
            return num(rest).map(ValuePredicate::Lt);
        }
        let (lo, hi) = s.split_once("..")?;
        Some(ValuePredicate::Between(num(lo)?, num(hi)?))
    }
}

/// Set of element ids, kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ElementPredicate {
    ids: Vec<u32>,
}

impl ElementPredicate {
    pub fn new(ids: impl IntoIterator<Item = u32>) -> Self {
        let mut ids: Vec<u32> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        ElementPredicate { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn matches(&self, id: u32) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    /// Whether two sorted id lists intersect.
    pub fn intersects(&self, sorted: &[u32]) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.ids.len() && j < sorted.len() {
            match self.ids[i].cmp(&sorted[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }

    /// Whether any member falls in `[lo, hi]`.
    pub fn may_match_range(&self, lo: u32, hi: u32) -> bool {
        let start = self.ids.partition_point(|&id| id < lo);
        self.ids.get(start).is_some_and(|&id| id <= hi)
    }
}

impl FromIterator<u32> for ElementPredicate {
    fn from_iter<T: IntoIterator<Item = u32>>(iter: T) -> Self {
        ElementPredicate::new(iter)
    }
}

pub(crate) fn file_may_match(
    f: &FileMeta,
    range: &TimeRange,
    value: Option<&ValuePredicate>,
    elements: Option<&ElementPredicate>,
) -> bool {
    f.row_count > 0
        && range.overlaps_closed(f.min_ts, f.max_ts)
        && value.is_none_or(|p| p.may_match(f.min_value, f.max_value))
        && elements.is_none_or(|e| e.intersects(&f.element_id_set_digest))
}

fn partition_may_match(
    p: &PartitionMeta,
    range: &TimeRange,
    value: Option<&ValuePredicate>,
    elements: Option<&ElementPredicate>,
) -> bool {
    let (Some(min_ts), Some(max_ts)) = (p.min_ts, p.max_ts) else {
        return false;
    };
    if p.row_count == 0 || !range.overlaps_closed(min_ts, max_ts) {
        return false;
    }
    if let (Some(pred), Some(lo), Some(hi)) = (value, p.min_value, p.max_value) {
        if !pred.may_match(lo, hi) {
            return false;
        }
    }
    elements.is_none_or(|e| e.intersects(&p.element_id_set_digest))
}

/// Partitions of `manifest` whose statistics cannot rule out a row matching
/// the range and predicates, in day order.
pub fn prune_partitions<'m>(
    manifest: &'m Manifest,
    range: &TimeRange,
    value: Option<&ValuePredicate>,
    elements: Option<&ElementPredicate>,
) -> Vec<&'m PartitionMeta> {
    if range.start >= range.end {
        return Vec::new();
    }
    let first_day = range.start.day();
    let last_day = Timestamp(range.end.0 - 1).day();
    manifest
        .partitions
        .range(first_day..=last_day)
        .map(|(_, p)| p)
        .filter(|p| partition_may_match(p, range, value, elements))
        .collect()
}
