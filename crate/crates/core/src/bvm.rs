//! Bearing vectors: a cyclic binary code of which angular bins around a
//! junction hold a road, and retrieval filtering by cyclic-shift matching.
//!
//! Bins have width `360 / V` degrees and bin 0 is centred on the reference
//! heading, so its edges sit at half a bin either side. Bins are half-open,
//! lower edge inclusive.
//!
//! `rotate(q, s)` moves bit `i` to `(i + s) mod V`. A reference vector is
//! north-aligned; a query observed while heading at yaw `psi` equals the
//! reference turned back by `round(psi / w)` bins, which is why the yaw check
//! rotates the query forward onto the reference.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geograph::{wrap_degrees, NodeIdx};
use crate::retrieval::RetrievalResult;

pub const DEFAULT_BINS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BvmError {
    #[error("bearing vectors need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("bin count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("yaw-anchored matching needs a yaw")]
    MissingYaw,
    #[error("no reference bearing vector for node {0}")]
    MissingReference(NodeIdx),
    #[error("cannot parse {0:?} as a bitstring or filter mode")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BearingVector {
    bits: Vec<bool>,
}

impl BearingVector {
    pub fn from_bits(bits: Vec<bool>) -> Result<Self, BvmError> {
        if bits.len() < 2 {
            return Err(BvmError::TooFewBins(bits.len()));
        }
        Ok(Self { bits })
    }

    pub fn zeros(v: usize) -> Result<Self, BvmError> {
        Self::from_bits(vec![false; v])
    }

    pub fn bins(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bin_width(&self) -> f64 {
        360.0 / self.bins() as f64
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn rotate(&self, shift: usize) -> BearingVector {
        let v = self.bins();
        let mut bits = vec![false; v];
        for (i, &b) in self.bits.iter().enumerate() {
            bits[(i + shift) % v] = b;
        }
        BearingVector { bits }
    }

    fn and(&self, mask: &BearingVector) -> BearingVector {
        BearingVector {
            bits: self.bits.iter().zip(&mask.bits).map(|(a, b)| *a && *b).collect(),
        }
    }
}

impl fmt::Display for BearingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for BearingVector {
    type Err = BvmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(BvmError::Parse(s.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_bits(bits)
    }
}

fn bin_of(relative: f64, v: usize) -> usize {
    let w = 360.0 / v as f64;
    ((wrap_degrees(relative) + w / 2.0) / w).floor().rem_euclid(v as f64) as usize
}

pub fn quantise_bearings(bearings: &[f64], v: usize, reference_heading: f64) -> Result<BearingVector, BvmError> {
    let mut out = BearingVector::zeros(v)?;
    for &b in bearings {
        out.bits[bin_of(b - reference_heading, v)] = true;
    }
    Ok(out)
}

fn same_len(a: &BearingVector, b: &BearingVector) -> Result<(), BvmError> {
    if a.bins() != b.bins() {
        return Err(BvmError::LengthMismatch(a.bins(), b.bins()));
    }
    Ok(())
}

/// True when some cyclic shift of `reference` equals `query`.
pub fn compatible(query: &BearingVector, reference: &BearingVector) -> Result<bool, BvmError> {
    same_len(query, reference)?;
    Ok((0..reference.bins()).any(|s| reference.rotate(s) == *query))
}

/// The only shift a known vehicle yaw permits.
pub fn yaw_shift(yaw: f64, v: usize) -> usize {
    let w = 360.0 / v as f64;
    ((yaw / w).round() as i64).rem_euclid(v as i64) as usize
}

/// True when `query`, turned by the shift implied by `vehicle_yaw`, equals
/// the north-aligned `reference`.
pub fn compatible_yaw(query: &BearingVector, reference: &BearingVector, vehicle_yaw: f64) -> Result<bool, BvmError> {
    same_len(query, reference)?;
    Ok(query.rotate(yaw_shift(vehicle_yaw, query.bins())) == *reference)
}

/// Optional corruption of observed bearings for robustness experiments.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BearingNoise {
    pub jitter_deg: f64,
    pub miss_prob: f64,
}

/// Query-side bearing code plus the bins the camera could actually see.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBearings {
    pub vector: BearingVector,
    pub visible: BearingVector,
}

impl QueryBearings {
    /// Fully visible query, as for a 360 degree camera.
    pub fn full(vector: BearingVector) -> Self {
        let visible = BearingVector {
            bits: vec![true; vector.bins()],
        };
        Self { vector, visible }
    }

    /// Observes the roads at a junction from `heading`. Bins are anchored on
    /// the heading snapped to the bin grid so a noise-free observation is an
    /// exact rotation of the junction's reference code; only bins whose
    /// centre lies within `fov / 2` of straight ahead are visible.
    pub fn observe<R: Rng + ?Sized>(
        bearings: &[f64],
        heading: f64,
        v: usize,
        fov: f64,
        noise: BearingNoise,
        rng: &mut R,
    ) -> Result<Self, BvmError> {
        let w = 360.0 / v as f64;
        let anchor = yaw_shift(heading, v) as f64 * w;
        let mut seen = Vec::with_capacity(bearings.len());
        for &b in bearings {
            if noise.miss_prob > 0.0 && rng.random_bool(noise.miss_prob.min(1.0)) {
                continue;
            }
            let jitter = if noise.jitter_deg > 0.0 {
                Normal::new(0.0, noise.jitter_deg).unwrap().sample(rng)
            } else {
                0.0
            };
            seen.push(b + jitter);
        }
        let visible = BearingVector {
            bits: (0..v)
                .map(|i| wrap_degrees(i as f64 * w).abs() <= fov / 2.0 + 1e-9)
                .collect(),
        };
        let vector = quantise_bearings(&seen, v, anchor)?.and(&visible);
        Ok(Self { vector, visible })
    }

    /// Does `reference`, seen through this query's visibility mask, match
    /// under some shift (`yaw = None`) or under the yaw-implied shift?
    pub fn matches(&self, reference: &BearingVector, yaw: Option<f64>) -> Result<bool, BvmError> {
        same_len(&self.vector, reference)?;
        let v = reference.bins();
        let fits =
            |s: usize| (0..v).all(|j| !self.visible.bits[j] || self.vector.bits[j] == reference.bits[(j + s) % v]);
        Ok(match yaw {
            Some(y) => fits(yaw_shift(y, v)),
            None => (0..v).any(fits),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterMode {
    None,
    Bvm,
    BvmYaw,
}

impl FilterMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilterMode::None => "none",
            FilterMode::Bvm => "bvm",
            FilterMode::BvmYaw => "bvm-yaw",
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterMode {
    type Err = BvmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(FilterMode::None),
            "bvm" => Ok(FilterMode::Bvm),
            "bvm-yaw" | "bvm_yaw" => Ok(FilterMode::BvmYaw),
            _ => Err(BvmError::Parse(s.to_string())),
        }
    }
}

/// Drops candidates whose junction code is incompatible with the query and
/// keeps at most `k` survivors in distance order. Nothing is backfilled.
pub fn filter_retrievals(
    result: &RetrievalResult,
    query: &QueryBearings,
    references: &HashMap<NodeIdx, BearingVector>,
    mode: FilterMode,
    yaw: Option<f64>,
    k: usize,
) -> Result<RetrievalResult, BvmError> {
    let yaw = match mode {
        FilterMode::BvmYaw => Some(yaw.ok_or(BvmError::MissingYaw)?),
        _ => None,
    };
    let mut ranked = Vec::with_capacity(k.min(result.ranked.len()));
    for c in &result.ranked {
        if ranked.len() == k {
            break;
        }
        let keep = match mode {
            FilterMode::None => true,
            _ => {
                let reference = references.get(&c.node).ok_or(BvmError::MissingReference(c.node))?;
                query.matches(reference, yaw)?
            }
        };
        if keep {
            ranked.push(*c);
        }
    }
    Ok(RetrievalResult {
        query_walk: result.query_walk,
        ranked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Candidate;
    use proptest::prelude::*;

    fn bv(s: &str) -> BearingVector {
        s.parse().unwrap()
    }

    #[test]
    fn quantise_cardinal_roads() {
        // V=4 bins centred on 0, 90, 180, -90 with edges at +-45, 135, 225.
        assert_eq!(quantise_bearings(&[0.0, 90.0, 180.0], 4, 0.0).unwrap(), bv("1110"));
        assert_eq!(quantise_bearings(&[], 4, 0.0).unwrap(), bv("0000"));
        assert_eq!(quantise_bearings(&[45.0], 4, 0.0).unwrap(), bv("0100"));
        assert_eq!(quantise_bearings(&[-45.0], 4, 0.0).unwrap(), bv("1000"));
        assert_eq!(quantise_bearings(&[-180.0], 4, 0.0).unwrap(), bv("0010"));
        assert_eq!(quantise_bearings(&[0.0], 1, 0.0), Err(BvmError::TooFewBins(1)));
    }

    #[test]
    fn shift_matching() {
        assert!(compatible(&bv("1010"), &bv("0101")).unwrap());
        assert!(!compatible(&bv("1100"), &bv("1010")).unwrap());
        assert!(compatible(&bv("1100"), &bv("1100")).unwrap());
        assert_eq!(compatible(&bv("10"), &bv("100")), Err(BvmError::LengthMismatch(2, 3)));
    }

    #[test]
    fn yaw_anchored_matching() {
        assert!(compatible_yaw(&bv("1101"), &bv("1101"), 0.0).unwrap());
        assert!(!compatible_yaw(&bv("1101"), &bv("1110"), 0.0).unwrap());
        assert!(compatible_yaw(&bv("1000"), &bv("0100"), 90.0).unwrap());
        assert!(!compatible_yaw(&bv("1000"), &bv("0010"), 90.0).unwrap());
        assert_eq!(yaw_shift(-90.0, 4), 3);
        assert_eq!(yaw_shift(179.0, 8), 4);
    }

    #[test]
    fn observing_from_a_heading_rotates_the_reference() {
        let roads = [3.0, 88.0, -95.0];
        let reference = quantise_bearings(&roads, 8, 0.0).unwrap();
        let mut rng = crate::seed::stream(0, "t");
        for heading in [-170.0, -40.0, 12.0, 95.0, 180.0] {
            let q = QueryBearings::observe(&roads, heading, 8, 360.0, BearingNoise::default(), &mut rng).unwrap();
            assert!(compatible(&q.vector, &reference).unwrap());
            assert!(compatible_yaw(&q.vector, &reference, heading).unwrap());
            assert!(q.matches(&reference, Some(heading)).unwrap());
        }
    }

    #[test]
    fn limited_fov_masks_rear_bins() {
        let roads = [0.0, 180.0];
        let mut rng = crate::seed::stream(0, "t");
        let q = QueryBearings::observe(&roads, 0.0, 8, 180.0, BearingNoise::default(), &mut rng).unwrap();
        assert_eq!(q.visible, bv("11100011"));
        assert_eq!(q.vector, bv("10000000"));
        let reference = quantise_bearings(&roads, 8, 0.0).unwrap();
        assert!(q.matches(&reference, Some(0.0)).unwrap());
        assert!(!compatible(&q.vector, &reference).unwrap());
    }

    fn result(nodes: &[usize]) -> RetrievalResult {
        RetrievalResult {
            query_walk: 3,
            ranked: nodes
                .iter()
                .enumerate()
                .map(|(i, &n)| Candidate {
                    node: n,
                    walk: i,
                    distance: i as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn figure_scenario_exact_partial_and_mismatch() {
        // Roads leave the true junction to the north, north-east and east.
        let yaw = 90.0;
        let truth = bv("11100000");
        let query = QueryBearings::full(truth.rotate(8 - yaw_shift(yaw, 8)));
        let exact = truth.clone();
        let rotated = truth.rotate(3); // right road pattern, wrong orientation
        let mismatch = bv("10010010");
        let refs: HashMap<usize, BearingVector> = [(0, exact), (1, rotated), (2, mismatch)].into();
        let r = result(&[2, 1, 0]);

        let kept = |mode, yaw| {
            filter_retrievals(&r, &query, &refs, mode, yaw, 10)
                .unwrap()
                .ranked
                .iter()
                .map(|c| c.node)
                .collect::<Vec<_>>()
        };
        assert_eq!(kept(FilterMode::None, None), vec![2, 1, 0]);
        assert_eq!(kept(FilterMode::Bvm, None), vec![1, 0]);
        assert_eq!(kept(FilterMode::BvmYaw, Some(yaw)), vec![0]);
    }

    #[test]
    fn filter_edge_cases() {
        let refs: HashMap<usize, BearingVector> = [(0, bv("1000")), (1, bv("1100"))].into();
        let q = QueryBearings::full(bv("1110"));
        let r = result(&[0, 1, 0]);
        assert!(filter_retrievals(&r, &q, &refs, FilterMode::Bvm, None, 5)
            .unwrap()
            .ranked
            .is_empty());
        assert_eq!(
            filter_retrievals(&r, &q, &refs, FilterMode::None, None, 2)
                .unwrap()
                .ranked
                .len(),
            2
        );
        assert_eq!(
            filter_retrievals(&r, &q, &refs, FilterMode::BvmYaw, None, 2),
            Err(BvmError::MissingYaw)
        );
        assert_eq!(
            filter_retrievals(&result(&[7]), &q, &refs, FilterMode::Bvm, None, 2),
            Err(BvmError::MissingReference(7))
        );
        assert_eq!("bvm-yaw".parse::<FilterMode>().unwrap(), FilterMode::BvmYaw);
        assert_eq!(bv("10100010").to_string(), "10100010");
    }

    fn arb_bv() -> impl Strategy<Value = BearingVector> {
        prop::collection::vec(any::<bool>(), 8).prop_map(|b| BearingVector::from_bits(b).unwrap())
    }

    proptest! {
        #[test]
        fn compatibility_is_reflexive_symmetric_and_rotation_invariant(a in arb_bv(), b in arb_bv(), s in 0usize..8) {
            prop_assert!(compatible(&a, &a).unwrap());
            prop_assert!(compatible(&a, &a.rotate(s)).unwrap());
            prop_assert_eq!(compatible(&a, &b).unwrap(), compatible(&b, &a).unwrap());
            prop_assert_eq!(compatible(&a, &b).unwrap(), compatible(&a.rotate(s), &b.rotate(s)).unwrap());
            if a.count_ones() != b.count_ones() {
                prop_assert!(!compatible(&a, &b).unwrap());
            }
        }

        #[test]
        fn reference_heading_only_rotates(bearings in prop::collection::vec(-180.0f64..180.0, 0..6), s in 0usize..8) {
            let base = quantise_bearings(&bearings, 8, 0.0).unwrap();
            let turned = quantise_bearings(&bearings, 8, s as f64 * 45.0).unwrap();
            prop_assert_eq!(turned.rotate(s), base);
        }
    }
}
