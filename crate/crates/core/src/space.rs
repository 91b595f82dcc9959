//! Exact sizes of the discrete and relaxed cell spaces.
//!
//! Counts ignore graph isomorphism: two genotypes that compute the same
//! function through relabelled nodes are counted twice.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};

/// Size of the space reported for a progressive-search baseline, kept only
/// as a printed reference point.
pub const PROGRESSIVE_REFERENCE: f64 = 5.6e14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceQuery {
    /// Intermediate nodes `n`.
    pub intermediates: usize,
    /// Non-zero candidate ops `p`.
    pub ops: usize,
    /// Retained incoming edges per intermediate.
    pub k: usize,
    pub input_arity: usize,
    /// Independent cell types (e.g. 2 for normal + reduction).
    pub multiplicity: u32,
}

impl SpaceQuery {
    pub fn new(intermediates: usize, ops: usize) -> Self {
        Self {
            intermediates,
            ops,
            k: 2,
            input_arity: 2,
            multiplicity: 1,
        }
    }

    pub fn with_multiplicity(mut self, multiplicity: u32) -> Self {
        self.multiplicity = multiplicity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.intermediates == 0 || self.ops == 0 || self.input_arity == 0 || self.multiplicity == 0 {
            return Err(NasError::Unsupported(format!(
                "need n >= 1, p >= 1, input arity >= 1 and multiplicity >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Edges in the full DAG: node `m` (1-based) has `arity + m − 1`
    /// predecessors.
    pub fn edge_count(&self) -> usize {
        let n = self.intermediates;
        n * self.input_arity + n * (n - 1) / 2
    }
}

pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::ZERO;
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// Genotypes with exactly `k` distinct predecessors per node, each edge
/// carrying one of `p` non-zero ops:
/// `∏_{m=1}^{n} C(arity + m − 1, k) · p^k`, to the power `multiplicity`.
///
/// Defined for `1 ≤ k ≤ arity`, where every node has enough predecessors;
/// other `k` are rejected.
pub fn count_discrete(query: &SpaceQuery) -> Result<BigUint> {
    query.validate()?;
    if query.k == 0 || query.k > query.input_arity {
        return Err(NasError::Unsupported(format!(
            "k = {} is not supported; the count is defined for 1 <= k <= input arity ({})",
            query.k, query.input_arity
        )));
    }
    let per_edge = BigUint::from(query.ops).pow(query.k as u32);
    let mut one_cell = BigUint::from(1u32);
    for m in 1..=query.intermediates {
        one_cell *= binomial(query.input_arity + m - 1, query.k) * &per_edge;
    }
    Ok(one_cell.pow(query.multiplicity))
}

/// Configurations of the relaxed cell where each edge picks one of `p`
/// ops or the zero op: `(p + 1)^E`, to the power `multiplicity`.
pub fn count_relaxed(query: &SpaceQuery) -> Result<BigUint> {
    query.validate()?;
    let edges = query.edge_count() as u32;
    Ok(BigUint::from(query.ops + 1).pow(edges).pow(query.multiplicity))
}

/// `d.dd…e±x` with `digits` places after the point.
pub fn scientific(value: &BigUint, digits: usize) -> String {
    let s = value.to_string();
    let exp = s.len() - 1;
    let take = s.len().min(17);
    let lead: f64 = s[..take].parse().expect("decimal digits");
    let mut mantissa = lead / 10f64.powi(take as i32 - 1);
    let mut exp = exp as i32;
    let mut text = format!("{mantissa:.digits$}");
    if text.starts_with("10") {
        mantissa /= 10.0;
        exp += 1;
        text = format!("{mantissa:.digits$}");
    }
    format!("{text}e{exp}")
}

/// Digits grouped in threes, e.g. `1,037,664,180`.
pub fn grouped(value: &BigUint) -> String {
    let s = value.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_forced_architecture() {
        assert_eq!(count_discrete(&SpaceQuery::new(1, 1)).unwrap(), BigUint::from(1u32));
    }

    #[test]
    fn one_intermediate_relaxed() {
        for p in 1..6usize {
            assert_eq!(count_relaxed(&SpaceQuery::new(1, p)).unwrap(), BigUint::from((p + 1) * (p + 1)));
        }
    }

    #[test]
    fn unsupported_k_rejected() {
        let q = SpaceQuery { k: 3, ..SpaceQuery::new(4, 7) };
        let err = count_discrete(&q).unwrap_err().to_string();
        assert!(err.contains("k = 3"), "{err}");
        assert!(count_discrete(&SpaceQuery { k: 0, ..q }).is_err());
        assert!(count_discrete(&SpaceQuery::new(0, 7)).is_err());
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(5, 2), BigUint::from(10u32));
        assert_eq!(binomial(2, 3), BigUint::ZERO);
        assert_eq!(binomial(40, 20), BigUint::from(137_846_528_820u64));
    }

    #[test]
    fn formatting() {
        let v = BigUint::from(1_037_664_180u64);
        assert_eq!(grouped(&v), "1,037,664,180");
        assert_eq!(scientific(&v, 2), "1.04e9");
        assert_eq!(scientific(&BigUint::from(9_996u32), 2), "1.00e4");
        assert_eq!(scientific(&BigUint::from(7u32), 1), "7.0e0");
        assert_eq!(grouped(&BigUint::from(100u32)), "100");
    }

    #[test]
    fn large_queries_stay_exact() {
        // p^(k·n) divides the count, so the low digits are fixed by it.
        let q = SpaceQuery::new(8, 16).with_multiplicity(2);
        let d = count_discrete(&q).unwrap();
        assert_eq!(&d % BigUint::from(16u32).pow(32), BigUint::ZERO);
        let r = count_relaxed(&q).unwrap();
        assert_eq!(r, BigUint::from(17u32).pow(2 * q.edge_count() as u32));
    }
}
