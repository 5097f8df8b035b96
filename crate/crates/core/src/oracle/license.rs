//! License-expression resolution against a known-identifier list and an
//! audit-configured allowlist.

use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LicenseVerdict {
    Resolved(String),
    Missing,
    Unrecognized(String),
    NotAllowed(String),
}

impl LicenseVerdict {
    pub fn is_violation(&self) -> bool {
        !matches!(self, LicenseVerdict::Resolved(_))
    }

    pub fn describe(&self) -> String {
        match self {
            LicenseVerdict::Resolved(id) => format!("resolved: {id}"),
            LicenseVerdict::Missing => "license missing".to_string(),
            LicenseVerdict::Unrecognized(id) => format!("unrecognized identifier: {id}"),
            LicenseVerdict::NotAllowed(id) => format!("not in allowlist: {id}"),
        }
    }
}

/// Evaluate a flat SPDX-style expression (`A`, `A OR B`, `A AND B`, no
/// parentheses). The expression resolves when some `OR` branch has every
/// `AND` term both recognized and allowlisted.
pub fn resolve(expr: &str, known: &BTreeSet<String>, allow: &BTreeSet<String>) -> LicenseVerdict {
    let expr = expr.trim();
    if expr.is_empty() {
        return LicenseVerdict::Missing;
    }
    let mut first_failure = None;
    for branch in expr.split(" OR ") {
        let terms: Vec<&str> = branch.split(" AND ").map(str::trim).collect();
        let mut failure = None;
        for term in &terms {
            if term.is_empty() || term.contains(['(', ')']) || !known.contains(*term) {
                failure = Some(LicenseVerdict::Unrecognized(term.to_string()));
                break;
            }
            if !allow.contains(*term) {
                failure = Some(LicenseVerdict::NotAllowed(term.to_string()));
                break;
            }
        }
        match failure {
            None => return LicenseVerdict::Resolved(branch.trim().to_string()),
            Some(f) => {
                first_failure.get_or_insert(f);
            }
        }
    }
    first_failure.unwrap_or(LicenseVerdict::Missing)
}
