//! Pinned advisory snapshot and version-range matching for dependency pins.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// One record of the advisory database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Advisory {
    pub advisory_id: String,
    pub ecosystem: String,
    pub package: String,
    /// Comma-separated comparators, e.g. `">=1.0.0, <1.3.0"`.
    pub affected: String,
}

/// A dependency declared by a dataset item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyPin {
    pub ecosystem: String,
    pub package: String,
    pub version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionRange {
    clauses: Vec<(Op, String)>,
}

impl VersionRange {
    pub fn parse(spec: &str) -> Result<Self, String> {
        let mut clauses = Vec::new();
        for raw in spec.split(',') {
            let c = raw.trim();
            if c.is_empty() {
                continue;
            }
            let (op, rest) = if let Some(r) = c.strip_prefix(">=") {
                (Op::Ge, r)
            } else if let Some(r) = c.strip_prefix("<=") {
                (Op::Le, r)
            } else if let Some(r) = c.strip_prefix('>') {
                (Op::Gt, r)
            } else if let Some(r) = c.strip_prefix('<') {
                (Op::Lt, r)
            } else if let Some(r) = c.strip_prefix("==") {
                (Op::Eq, r)
            } else if let Some(r) = c.strip_prefix('=') {
                (Op::Eq, r)
            } else {
                (Op::Eq, c)
            };
            let v = rest.trim();
            if v.is_empty() {
                return Err(format!("comparator `{c}` has no version"));
            }
            clauses.push((op, v.to_string()));
        }
        if clauses.is_empty() {
            return Err("empty version range".into());
        }
        Ok(VersionRange { clauses })
    }

    pub fn contains(&self, version: &str) -> bool {
        self.clauses.iter().all(|(op, bound)| {
            let ord = compare_versions(version, bound);
            match op {
                Op::Lt => ord == Ordering::Less,
                Op::Le => ord != Ordering::Greater,
                Op::Gt => ord == Ordering::Greater,
                Op::Ge => ord != Ordering::Less,
                Op::Eq => ord == Ordering::Equal,
            }
        })
    }
}

/// Dotted-version ordering: numeric components compare numerically,
/// anything else lexicographically; missing components count as zero.
pub fn compare_versions(a: &str, b: &str) -> Ordering {
    let split = |s: &str| -> Vec<String> {
        s.trim()
            .trim_start_matches('v')
            .split(['.', '-', '+'])
            .map(str::to_string)
            .collect()
    };
    let (xa, xb) = (split(a), split(b));
    for i in 0..xa.len().max(xb.len()) {
        let pa = xa.get(i).map(String::as_str).unwrap_or("0");
        let pb = xb.get(i).map(String::as_str).unwrap_or("0");
        let ord = match (pa.parse::<u64>(), pb.parse::<u64>()) {
            (Ok(x), Ok(y)) => x.cmp(&y),
            // A numeric component sorts after a pre-release tag.
            (Ok(_), Err(_)) => Ordering::Greater,
            (Err(_), Ok(_)) => Ordering::Less,
            (Err(_), Err(_)) => pa.cmp(pb),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    Ordering::Equal
}

/// Advisories that affect `pin`.
pub fn matching<'a>(db: &'a [Advisory], pin: &DependencyPin) -> Result<Vec<&'a Advisory>, String> {
    let mut hits = Vec::new();
    for adv in db {
        if adv.ecosystem == pin.ecosystem && adv.package == pin.package {
            let range = VersionRange::parse(&adv.affected)
                .map_err(|e| format!("advisory {}: {e}", adv.advisory_id))?;
            if range.contains(&pin.version) {
                hits.push(adv);
            }
        }
    }
    Ok(hits)
}
