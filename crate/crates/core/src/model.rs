//! Multi-trial experimental data and transport queries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::scalar::Scalar;

/// Treatment code; `0` is control. Codes mean the same treatment in every trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TreatmentId(pub u32);

impl TreatmentId {
    pub const CONTROL: TreatmentId = TreatmentId(0);
}

impl fmt::Display for TreatmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TrialId(pub u32);

impl fmt::Display for TrialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One randomized comparison of `arm_a` against `arm_b`, administered at
/// `t0` and measured at `t1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSpec<T> {
    pub trial_id: TrialId,
    pub arm_a: TreatmentId,
    pub arm_b: TreatmentId,
    pub t0: i64,
    pub t1: i64,
    /// Design probability of assignment to `arm_a`.
    pub p_arm_a: T,
}

impl<T: Scalar> TrialSpec<T> {
    pub fn has_arm(&self, a: TreatmentId) -> bool {
        a == self.arm_a || a == self.arm_b
    }

    pub fn arms(&self) -> [TreatmentId; 2] {
        [self.arm_a, self.arm_b]
    }

    /// Design probability of receiving `a`; `None` when `a` is not an arm.
    pub fn design_probability(&self, a: TreatmentId) -> Option<T> {
        if a == self.arm_a {
            Some(self.p_arm_a)
        } else if a == self.arm_b {
            Some(T::one() - self.p_arm_a)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T> {
    pub y: T,
    pub a: TreatmentId,
    pub s: TrialId,
    pub x: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub trials: BTreeMap<TrialId, TrialSpec<T>>,
    pub observations: Vec<Observation<T>>,
    /// Covariate dimension shared by every observation.
    pub d: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(trials: Vec<TrialSpec<T>>, observations: Vec<Observation<T>>, d: usize) -> Self {
        Self {
            trials: trials.into_iter().map(|t| (t.trial_id, t)).collect(),
            observations,
            d,
        }
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn trial(&self, k: TrialId) -> Option<&TrialSpec<T>> {
        self.trials.get(&k)
    }

    /// Number of observations in trial `k`.
    pub fn trial_size(&self, k: TrialId) -> usize {
        self.observations.iter().filter(|o| o.s == k).count()
    }

    pub fn cell_size(&self, k: TrialId, a: TreatmentId) -> usize {
        self.observations.iter().filter(|o| o.s == k && o.a == a).count()
    }

    /// Copy with every outcome multiplied by `c`.
    pub fn scale_outcomes(&self, c: T) -> Self {
        let mut out = self.clone();
        for o in &mut out.observations {
            o.y = o.y * c;
        }
        out
    }
}

/// A structural defect found by [`validate_dataset`] or [`validate_query`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    IdenticalArms {
        trial: TrialId,
    },
    MeasuredBeforeAdministered {
        trial: TrialId,
        t0: i64,
        t1: i64,
    },
    DesignProbability {
        trial: TrialId,
        p: f64,
    },
    UnknownTrial {
        observation: usize,
        trial: TrialId,
    },
    ArmNotInTrial {
        observation: usize,
        arm: TreatmentId,
        trial: TrialId,
    },
    CovariateDimension {
        observation: usize,
        got: usize,
        expected: usize,
    },
    NonFiniteValue {
        observation: usize,
    },
    EmptyArm {
        trial: TrialId,
        arm: TreatmentId,
    },
    UnknownQueryTrial {
        trial: TrialId,
    },
    ArmMismatch {
        detail: String,
    },
    TimingMismatch {
        detail: String,
    },
    NoAnchors,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            IdenticalArms { trial } => write!(f, "trial {trial}: arm_a equals arm_b"),
            MeasuredBeforeAdministered { trial, t0, t1 } => {
                write!(f, "trial {trial}: t1 = {t1} precedes t0 = {t0}")
            }
            DesignProbability { trial, p } => {
                write!(f, "trial {trial}: p_arm_a = {p} outside (0, 1)")
            }
            UnknownTrial { observation, trial } => {
                write!(f, "observation {observation}: unknown trial {trial}")
            }
            ArmNotInTrial {
                observation,
                arm,
                trial,
            } => {
                write!(f, "observation {observation}: arm {arm} is not an arm of trial {trial}")
            }
            CovariateDimension {
                observation,
                got,
                expected,
            } => write!(
                f,
                "observation {observation}: covariate dimension {got}, expected {expected}"
            ),
            NonFiniteValue { observation } => {
                write!(f, "observation {observation}: non-finite outcome or covariate")
            }
            EmptyArm { trial, arm } => write!(f, "trial {trial}: arm {arm} has no observations"),
            UnknownQueryTrial { trial } => write!(f, "query references unknown trial {trial}"),
            ArmMismatch { detail } => write!(f, "arm mismatch: {detail}"),
            TimingMismatch { detail } => write!(f, "timing mismatch: {detail}"),
            NoAnchors => write!(f, "common-arm query lists no anchors"),
        }
    }
}

pub fn validate_dataset<T: Scalar>(dataset: &Dataset<T>) -> Vec<Violation> {
    let mut out = Vec::new();
    for t in dataset.trials.values() {
        if t.arm_a == t.arm_b {
            out.push(Violation::IdenticalArms { trial: t.trial_id });
        }
        if t.t1 < t.t0 {
            out.push(Violation::MeasuredBeforeAdministered {
                trial: t.trial_id,
                t0: t.t0,
                t1: t.t1,
            });
        }
        if !(t.p_arm_a > T::zero() && t.p_arm_a < T::one()) {
            out.push(Violation::DesignProbability {
                trial: t.trial_id,
                p: t.p_arm_a.as_f64(),
            });
        }
    }
    let mut seen: BTreeSet<(TrialId, TreatmentId)> = BTreeSet::new();
    for (i, o) in dataset.observations.iter().enumerate() {
        match dataset.trials.get(&o.s) {
            None => out.push(Violation::UnknownTrial {
                observation: i,
                trial: o.s,
            }),
            Some(t) if !t.has_arm(o.a) => out.push(Violation::ArmNotInTrial {
                observation: i,
                arm: o.a,
                trial: o.s,
            }),
            Some(_) => {
                seen.insert((o.s, o.a));
            }
        }
        if o.x.len() != dataset.d {
            out.push(Violation::CovariateDimension {
                observation: i,
                got: o.x.len(),
                expected: dataset.d,
            });
        }
        if !o.y.is_finite() || o.x.iter().any(|v| !v.is_finite()) {
            out.push(Violation::NonFiniteValue { observation: i });
        }
    }
    let referenced: BTreeSet<TrialId> = dataset.observations.iter().map(|o| o.s).collect();
    for k in referenced {
        if let Some(t) = dataset.trials.get(&k) {
            for arm in t.arms() {
                if !seen.contains(&(k, arm)) {
                    out.push(Violation::EmptyArm { trial: k, arm });
                }
            }
        }
    }
    out
}

/// Anchor arm observed at the target measurement time (`trial_at_target`)
/// and at the source measurement time (`trial_at_source`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommonArmAnchor {
    pub arm: TreatmentId,
    pub trial_at_target: TrialId,
    pub trial_at_source: TrialId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Strategy {
    /// Same arm pair replicated at target time (`anchor_j`) and source time (`anchor_jprime`).
    Replicated {
        anchor_j: TrialId,
        anchor_jprime: TrialId,
    },
    CommonArm {
        anchors: Vec<CommonArmAnchor>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportQuery {
    pub target_trial: TrialId,
    pub delta0: i64,
    pub delta1: i64,
    pub strategy: Strategy,
}

pub fn validate_query<T: Scalar>(dataset: &Dataset<T>, query: &TransportQuery) -> Vec<Violation> {
    let mut out = Vec::new();
    let lookup = |k: TrialId, out: &mut Vec<Violation>| {
        let t = dataset.trial(k);
        if t.is_none() {
            out.push(Violation::UnknownQueryTrial { trial: k });
        }
        t
    };
    let Some(target) = lookup(query.target_trial, &mut out) else {
        return out;
    };
    let (src0, src1) = (target.t0, target.t1);
    let (dst0, dst1) = (target.t0 + query.delta0, target.t1 + query.delta1);
    match &query.strategy {
        Strategy::Replicated {
            anchor_j,
            anchor_jprime,
        } => {
            let j = lookup(*anchor_j, &mut out);
            let jp = lookup(*anchor_jprime, &mut out);
            let (Some(j), Some(jp)) = (j, jp) else {
                return out;
            };
            if (j.arm_a, j.arm_b) != (jp.arm_a, jp.arm_b) {
                out.push(Violation::ArmMismatch {
                    detail: format!(
                        "trial {} compares ({}, {}) but trial {} compares ({}, {})",
                        j.trial_id, j.arm_a, j.arm_b, jp.trial_id, jp.arm_a, jp.arm_b
                    ),
                });
            }
            if (j.t0, j.t1) != (dst0, dst1) {
                out.push(Violation::TimingMismatch {
                    detail: format!(
                        "trial {} runs at ({}, {}), target timing is ({dst0}, {dst1})",
                        j.trial_id, j.t0, j.t1
                    ),
                });
            }
            if (jp.t0, jp.t1) != (src0, src1) {
                out.push(Violation::TimingMismatch {
                    detail: format!(
                        "trial {} runs at ({}, {}), source timing is ({src0}, {src1})",
                        jp.trial_id, jp.t0, jp.t1
                    ),
                });
            }
        }
        Strategy::CommonArm { anchors } => {
            if anchors.is_empty() {
                out.push(Violation::NoAnchors);
            }
            for anchor in anchors {
                let at_target = lookup(anchor.trial_at_target, &mut out);
                let at_source = lookup(anchor.trial_at_source, &mut out);
                for t in [at_target, at_source].into_iter().flatten() {
                    if !t.has_arm(anchor.arm) {
                        out.push(Violation::ArmMismatch {
                            detail: format!("arm {} is not an arm of trial {}", anchor.arm, t.trial_id),
                        });
                    }
                }
                if let Some(t) = at_source {
                    if t.t1 != src1 {
                        out.push(Violation::TimingMismatch {
                            detail: format!(
                                "source anchor trial {} measured at {}, target trial measured at {src1}",
                                t.trial_id, t.t1
                            ),
                        });
                    }
                }
                if let Some(t) = at_target {
                    if t.t1 != dst1 {
                        out.push(Violation::TimingMismatch {
                            detail: format!(
                                "target anchor trial {} measured at {}, transport target is {dst1}",
                                t.trial_id, t.t1
                            ),
                        });
                    }
                }
            }
        }
    }
    out
}
