//! Unit-to-arm allocation: COSS and seeded complete randomization.
//!
//! COSS sorts units by covariate (descending) and deals them alternately
//! into the two arms, so ranks `(2i, 2i + 1)` form pair `i`. With the default
//! [`Parity::TreatmentFirst`] the higher-covariate member of every pair is
//! treated. Tied covariates are ordered by a seeded hash of the unit id, so
//! tied units are split at random but reproducibly.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentUnit {
    pub id: String,
    pub covariate: f64,
    pub outcome: Option<f64>,
}

impl ExperimentUnit {
    pub fn new(id: impl Into<String>, covariate: f64) -> Self {
        Self {
            id: id.into(),
            covariate,
            outcome: None,
        }
    }

    pub fn with_outcome(mut self, outcome: f64) -> Self {
        self.outcome = Some(outcome);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Treatment,
    Control,
}

impl Arm {
    pub fn code(self) -> &'static str {
        match self {
            Arm::Treatment => "T",
            Arm::Control => "C",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "T" | "t" | "treatment" | "Treatment" => Ok(Arm::Treatment),
            "C" | "c" | "control" | "Control" => Ok(Arm::Control),
            other => Err(Error::invalid("arm", format!("expected T or C, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Coss,
    Rct,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Coss => "coss",
            Strategy::Rct => "rct",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "coss" => Ok(Strategy::Coss),
            "rct" => Ok(Strategy::Rct),
            other => Err(Error::invalid("strategy", format!("expected coss or rct, got `{other}`"))),
        }
    }
}

/// Which member of each COSS pair is treated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parity {
    /// Even ranks (highest covariate first) are treated.
    #[default]
    TreatmentFirst,
    /// Even ranks go to control; odd ranks are treated.
    ControlFirst,
}

impl Parity {
    pub fn name(self) -> &'static str {
        match self {
            Parity::TreatmentFirst => "treatment-first",
            Parity::ControlFirst => "control-first",
        }
    }

    /// Arm for a paired rank.
    #[inline]
    pub fn arm_for_rank(self, rank: usize) -> Arm {
        let even = rank % 2 == 0;
        match (self, even) {
            (Parity::TreatmentFirst, true) | (Parity::ControlFirst, false) => Arm::Treatment,
            _ => Arm::Control,
        }
    }
}

impl fmt::Display for Parity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Parity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "treatment-first" | "treatment_first" => Ok(Parity::TreatmentFirst),
            "control-first" | "control_first" => Ok(Parity::ControlFirst),
            other => Err(Error::invalid(
                "parity",
                format!("expected treatment-first or control-first, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub id: String,
    pub arm: Arm,
    /// Position in descending covariate order (COSS only).
    pub rank: Option<usize>,
    /// Shared by ranks `2i` and `2i + 1` (COSS only; absent for the odd unit out).
    pub pair_index: Option<usize>,
}

/// A deterministic unit-to-arm map. COSS plans list assignments in rank
/// order; RCT plans list them in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPlan {
    strategy: Strategy,
    seed: u64,
    parity: Option<Parity>,
    assignments: Vec<Assignment>,
    index: BTreeMap<String, usize>,
}

impl AllocationPlan {
    /// Rebuilds a plan from stored assignments, checking ids and pairing.
    pub fn from_assignments(
        strategy: Strategy,
        seed: u64,
        parity: Option<Parity>,
        assignments: Vec<Assignment>,
    ) -> Result<Self> {
        if assignments.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut index = BTreeMap::new();
        for (i, a) in assignments.iter().enumerate() {
            if a.id.is_empty() {
                return Err(Error::invalid("id", "empty unit id"));
            }
            if index.insert(a.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(a.id.clone()));
            }
        }
        let mut pairs: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for a in &assignments {
            if let Some(p) = a.pair_index {
                let e = pairs.entry(p).or_default();
                match a.arm {
                    Arm::Treatment => e.0 += 1,
                    Arm::Control => e.1 += 1,
                }
            }
        }
        if let Some((p, _)) = pairs.iter().find(|(_, &(t, c))| t != 1 || c != 1) {
            return Err(Error::invalid(
                "pair_index",
                format!("pair {p} must hold exactly one T and one C unit"),
            ));
        }
        Ok(Self {
            strategy,
            seed,
            parity,
            assignments,
            index,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// COSS parity; `None` for RCT plans.
    pub fn parity(&self) -> Option<Parity> {
        self.parity
    }

    pub fn assignments(&self) -> &[Assignment] {
        &self.assignments
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Assignment> {
        self.index.get(id).map(|&i| &self.assignments[i])
    }

    pub fn arm_of(&self, id: &str) -> Option<Arm> {
        self.get(id).map(|a| a.arm)
    }

    pub fn pair_index_of(&self, id: &str) -> Option<usize> {
        self.get(id).and_then(|a| a.pair_index)
    }

    pub fn ids_in(&self, arm: Arm) -> impl Iterator<Item = &str> + '_ {
        self.assignments
            .iter()
            .filter(move |a| a.arm == arm)
            .map(|a| a.id.as_str())
    }

    pub fn count(&self, arm: Arm) -> usize {
        self.assignments.iter().filter(|a| a.arm == arm).count()
    }

    pub fn is_paired(&self) -> bool {
        self.assignments.iter().any(|a| a.pair_index.is_some())
    }

    /// `(treatment_id, control_id)` per pair, ordered by pair index.
    pub fn pairs(&self) -> Vec<(&str, &str)> {
        let mut slots: BTreeMap<usize, (Option<&str>, Option<&str>)> = BTreeMap::new();
        for a in &self.assignments {
            if let Some(p) = a.pair_index {
                let e = slots.entry(p).or_default();
                match a.arm {
                    Arm::Treatment => e.0 = Some(&a.id),
                    Arm::Control => e.1 = Some(&a.id),
                }
            }
        }
        slots
            .into_values()
            .filter_map(|(t, c)| Some((t?, c?)))
            .collect()
    }

    /// Units without a pair (the odd unit out of a COSS plan).
    pub fn unpaired(&self) -> impl Iterator<Item = &Assignment> + '_ {
        let coss = self.strategy == Strategy::Coss;
        self.assignments
            .iter()
            .filter(move |a| coss && a.pair_index.is_none())
    }
}

fn validate(units: &[ExperimentUnit]) -> Result<()> {
    if units.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut seen = HashSet::with_capacity(units.len());
    for u in units {
        if !u.covariate.is_finite() {
            return Err(Error::NonFiniteCovariate(u.id.clone()));
        }
        if !seen.insert(u.id.as_str()) {
            return Err(Error::DuplicateId(u.id.clone()));
        }
    }
    Ok(())
}

#[inline]
fn descending(a: f64, b: f64) -> Ordering {
    // Inputs are validated finite, so partial_cmp never fails; -0.0 ties 0.0.
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Rank order (indices, highest covariate first) for a bare covariate slice.
/// Ties break by a seeded key of the slice position, so this is only
/// permutation invariant for distinct values. Values must be finite.
pub fn coss_rank_order(covariates: &[f64], seed: u64) -> Vec<usize> {
    let salt = rng::derive_seed(seed, 0x7469_6562);
    let keys: Vec<u64> = (0..covariates.len()).map(|i| rng::mix64(salt ^ i as u64)).collect();
    let mut order: Vec<usize> = (0..covariates.len()).collect();
    order.sort_by(|&i, &j| {
        descending(covariates[i], covariates[j])
            .then(keys[i].cmp(&keys[j]))
            .then(i.cmp(&j))
    });
    order
}

/// COSS with the default treatment-first parity.
pub fn coss_allocate(units: &[ExperimentUnit], seed: u64) -> Result<AllocationPlan> {
    coss_allocate_with(units, seed, Parity::TreatmentFirst)
}

pub fn coss_allocate_with(units: &[ExperimentUnit], seed: u64, parity: Parity) -> Result<AllocationPlan> {
    validate(units)?;
    let salt = rng::derive_seed(seed, 0x7469_6562);
    let covariates: Vec<f64> = units.iter().map(|u| u.covariate).collect();
    let keys: Vec<u64> = units
        .iter()
        .map(|u| rng::mix64(salt ^ rng::fnv1a(u.id.as_bytes())))
        .collect();
    let mut order: Vec<usize> = (0..units.len()).collect();
    // Hash collisions fall back to id order, never to input order.
    order.sort_by(|&i, &j| {
        descending(covariates[i], covariates[j])
            .then(keys[i].cmp(&keys[j]))
            .then_with(|| units[i].id.cmp(&units[j].id))
    });

    let n = units.len();
    let paired = n - n % 2;
    let assignments = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let (arm, pair_index) = if rank < paired {
                (parity.arm_for_rank(rank), Some(rank / 2))
            } else {
                (Arm::Treatment, None)
            };
            Assignment {
                id: units[i].id.clone(),
                arm,
                rank: Some(rank),
                pair_index,
            }
        })
        .collect();
    AllocationPlan::from_assignments(Strategy::Coss, seed, Some(parity), assignments)
}

/// Complete randomization: a seeded shuffle of the id-sorted units, with the
/// first `ceil(n / 2)` treated.
pub fn rct_allocate(units: &[ExperimentUnit], seed: u64) -> Result<AllocationPlan> {
    validate(units)?;
    let mut ids: Vec<&str> = units.iter().map(|u| u.id.as_str()).collect();
    ids.sort_unstable();
    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut rng::stream(seed, 0x7263_7400));
    let n_treat = units.len().div_ceil(2);
    let treated: HashSet<&str> = shuffled[..n_treat].iter().copied().collect();
    let assignments = ids
        .into_iter()
        .map(|id| Assignment {
            id: id.to_owned(),
            arm: if treated.contains(id) {
                Arm::Treatment
            } else {
                Arm::Control
            },
            rank: None,
            pair_index: None,
        })
        .collect();
    AllocationPlan::from_assignments(Strategy::Rct, seed, None, assignments)
}

pub fn allocate(units: &[ExperimentUnit], strategy: Strategy, seed: u64, parity: Parity) -> Result<AllocationPlan> {
    match strategy {
        Strategy::Coss => coss_allocate_with(units, seed, parity),
        Strategy::Rct => rct_allocate(units, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use proptest::strategy::Strategy as Gen;
    use super::Strategy;

    fn units(pairs: &[(&str, f64)]) -> Vec<ExperimentUnit> {
        pairs.iter().map(|&(id, x)| ExperimentUnit::new(id, x)).collect()
    }

    fn arms(plan: &AllocationPlan, arm: Arm) -> Vec<&str> {
        let mut v: Vec<&str> = plan.ids_in(arm).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn coss_hand_trace() {
        let plan = coss_allocate(&units(&[("u1", 5.0), ("u2", 3.0), ("u3", 9.0), ("u4", 1.0)]), 0).unwrap();
        let order: Vec<&str> = plan.assignments().iter().map(|a| a.id.as_str()).collect();
        assert_eq!(order, ["u3", "u1", "u2", "u4"]);
        assert_eq!(arms(&plan, Arm::Treatment), ["u2", "u3"]);
        assert_eq!(arms(&plan, Arm::Control), ["u1", "u4"]);
        assert_eq!(plan.pair_index_of("u3"), Some(0));
        assert_eq!(plan.pair_index_of("u1"), Some(0));
        assert_eq!(plan.pair_index_of("u2"), Some(1));
        assert_eq!(plan.pair_index_of("u4"), Some(1));
        assert_eq!(plan.pairs(), vec![("u3", "u1"), ("u2", "u4")]);
    }

    #[test]
    fn control_first_swaps_arms() {
        let plan =
            coss_allocate_with(&units(&[("u1", 5.0), ("u2", 3.0), ("u3", 9.0), ("u4", 1.0)]), 0, Parity::ControlFirst)
                .unwrap();
        assert_eq!(arms(&plan, Arm::Treatment), ["u1", "u4"]);
        assert_eq!(plan.pairs(), vec![("u1", "u3"), ("u4", "u2")]);
    }

    #[test]
    fn single_unit_goes_to_treatment() {
        let plan = coss_allocate(&units(&[("u1", 0.0)]), 3).unwrap();
        assert_eq!(plan.arm_of("u1"), Some(Arm::Treatment));
        assert_eq!(plan.count(Arm::Control), 0);
        assert_eq!(plan.pair_index_of("u1"), None);
        assert!(plan.pairs().is_empty());
    }

    #[test]
    fn odd_count_leaves_lowest_unpaired_in_treatment() {
        let plan = coss_allocate(&units(&[("a", 3.0), ("b", 2.0), ("c", 1.0)]), 0).unwrap();
        assert_eq!(plan.arm_of("c"), Some(Arm::Treatment));
        assert_eq!(plan.pair_index_of("c"), None);
        assert_eq!(plan.unpaired().count(), 1);
        assert_eq!(plan.pairs(), vec![("a", "b")]);
    }

    #[test]
    fn total_ties_are_balanced_and_reproducible() {
        let u = units(&[("u1", 2.0), ("u2", 2.0), ("u3", 2.0), ("u4", 2.0)]);
        let a = coss_allocate(&u, 42).unwrap();
        let b = coss_allocate(&u, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(Arm::Treatment), 2);
        assert_eq!(a.count(Arm::Control), 2);
    }

    #[test]
    fn ties_split_differently_across_seeds() {
        let u: Vec<ExperimentUnit> = (0..8).map(|i| ExperimentUnit::new(format!("u{i}"), 1.0)).collect();
        let plans: HashSet<Vec<String>> = (0..20)
            .map(|s| {
                coss_allocate(&u, s)
                    .unwrap()
                    .ids_in(Arm::Treatment)
                    .map(str::to_owned)
                    .collect()
            })
            .collect();
        assert!(plans.len() > 1);
    }

    #[test]
    fn validation_errors() {
        assert_eq!(coss_allocate(&[], 0), Err(Error::EmptyInput));
        assert_eq!(rct_allocate(&[], 0), Err(Error::EmptyInput));
        assert_eq!(
            coss_allocate(&units(&[("a", 1.0), ("a", 2.0)]), 0),
            Err(Error::DuplicateId("a".into()))
        );
        assert_eq!(
            rct_allocate(&units(&[("a", f64::NAN)]), 0),
            Err(Error::NonFiniteCovariate("a".into()))
        );
        assert_eq!(
            coss_allocate(&units(&[("a", f64::INFINITY)]), 0),
            Err(Error::NonFiniteCovariate("a".into()))
        );
    }

    #[test]
    fn rct_is_seeded_and_balanced() {
        let u: Vec<ExperimentUnit> = (0..1000).map(|i| ExperimentUnit::new(format!("u{i}"), i as f64)).collect();
        let a = rct_allocate(&u, 9).unwrap();
        assert_eq!(a, rct_allocate(&u, 9).unwrap());
        assert_ne!(a, rct_allocate(&u, 10).unwrap());
        assert_eq!(a.count(Arm::Treatment), 500);
        assert_eq!(a.count(Arm::Control), 500);
        assert!(!a.is_paired());
    }

    #[test]
    fn rct_odd_count_puts_extra_unit_in_treatment() {
        let u = units(&[("a", 0.0), ("b", 0.0), ("c", 0.0)]);
        let p = rct_allocate(&u, 1).unwrap();
        assert_eq!(p.count(Arm::Treatment), 2);
        assert_eq!(p.count(Arm::Control), 1);
    }

    #[test]
    fn rct_ignores_input_order() {
        let mut u: Vec<ExperimentUnit> = (0..50).map(|i| ExperimentUnit::new(format!("u{i}"), 0.0)).collect();
        let a = rct_allocate(&u, 4).unwrap();
        u.reverse();
        assert_eq!(a, rct_allocate(&u, 4).unwrap());
    }

    #[test]
    fn from_assignments_rejects_broken_pairs() {
        let a = vec![
            Assignment { id: "a".into(), arm: Arm::Treatment, rank: Some(0), pair_index: Some(0) },
            Assignment { id: "b".into(), arm: Arm::Treatment, rank: Some(1), pair_index: Some(0) },
        ];
        assert!(matches!(
            AllocationPlan::from_assignments(Strategy::Coss, 0, None, a),
            Err(Error::InvalidParameter { name: "pair_index", .. })
        ));
    }

    fn distinct_units() -> impl Gen<Value = Vec<ExperimentUnit>> {
        proptest::collection::btree_set(-100_000i64..100_000, 1..60).prop_map(|set| {
            set.into_iter()
                .enumerate()
                .map(|(i, v)| ExperimentUnit::new(format!("id{i:03}"), v as f64 / 8.0))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn coss_permutation_invariant(mut u in distinct_units(), seed: u64, rot in 0usize..60) {
            let a = coss_allocate(&u, seed).unwrap();
            let k = rot % u.len();
            u.rotate_left(k);
            u.reverse();
            prop_assert_eq!(a, coss_allocate(&u, seed).unwrap());
        }

        #[test]
        fn coss_affine_invariant(u in distinct_units(), seed: u64, alpha in 0.01f64..50.0, beta in -1e3f64..1e3) {
            let a = coss_allocate(&u, seed).unwrap();
            let moved: Vec<ExperimentUnit> = u
                .iter()
                .map(|x| ExperimentUnit::new(x.id.clone(), alpha * x.covariate + beta))
                .collect();
            let b = coss_allocate(&moved, seed).unwrap();
            let arms_a: Vec<(String, Arm, Option<usize>)> =
                a.assignments().iter().map(|x| (x.id.clone(), x.arm, x.pair_index)).collect();
            let arms_b: Vec<(String, Arm, Option<usize>)> =
                b.assignments().iter().map(|x| (x.id.clone(), x.arm, x.pair_index)).collect();
            prop_assert_eq!(arms_a, arms_b);
        }

        #[test]
        fn coss_pairs_and_rank_dominance(u in distinct_units(), seed: u64) {
            let plan = coss_allocate(&u, seed).unwrap();
            let cov: BTreeMap<&str, f64> = u.iter().map(|x| (x.id.as_str(), x.covariate)).collect();
            for (t, c) in plan.pairs() {
                prop_assert!(cov[t] >= cov[c]);
            }
            let mut t: Vec<f64> = plan.ids_in(Arm::Treatment).map(|id| cov[id]).collect();
            let mut c: Vec<f64> = plan.ids_in(Arm::Control).map(|id| cov[id]).collect();
            t.sort_by(|a, b| b.total_cmp(a));
            c.sort_by(|a, b| b.total_cmp(a));
            for (x, y) in t.iter().zip(&c) {
                prop_assert!(x >= y);
            }
            if u.len() % 2 == 0 {
                prop_assert_eq!(t.len(), c.len());
            } else {
                prop_assert_eq!(t.len(), c.len() + 1);
            }
        }

        #[test]
        fn rct_balance(n in 1usize..200, seed: u64) {
            let u: Vec<ExperimentUnit> = (0..n).map(|i| ExperimentUnit::new(format!("u{i}"), 0.0)).collect();
            let p = rct_allocate(&u, seed).unwrap();
            prop_assert_eq!(p.count(Arm::Treatment), n.div_ceil(2));
            prop_assert_eq!(p.count(Arm::Control), n / 2);
        }
    }
}
