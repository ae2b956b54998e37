use std::fmt;

use serde::{Deserialize, Serialize};

/// Where to insert identity blocks, expressed against base-block indices.
///
/// Each entry `i` in `insert_after` places one new block directly after base
/// block `i`. Entries must be at least two apart: a repeated index stacks
/// blocks in one gap and neighbouring indices fill consecutive gaps, both of
/// which count as consecutive insertion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtensionPlan {
    pub n_base_layers: usize,
    pub insert_after: Vec<usize>,
    #[serde(default)]
    pub overrides: PlanOverrides,
}

/// Escape hatches for deliberately running known-bad configurations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanOverrides {
    /// Downgrade consecutive insertion from an error to a warning.
    #[serde(default)]
    pub allow_consecutive: bool,
    /// Leave the final block frozen in the produced mask.
    #[serde(default)]
    pub freeze_last_block: bool,
    /// Permit a mask whose final block is frozen.
    #[serde(default)]
    pub allow_frozen_last: bool,
    #[serde(default)]
    pub train_final_norm: bool,
}

/// Insertion counts outside this range draw a warning.
pub const EXPLORED_INSERTIONS: std::ops::RangeInclusive<usize> = 6..=10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    IndexOutOfRange { index: usize, n_base_layers: usize },
    ConsecutiveInsertion { first: usize, second: usize, allowed: bool },
    NoLayersInserted,
    CountOutsideExploredRange { count: usize },
    FrozenFinalBlock { allowed: bool },
    BaseSizeMismatch { plan: usize, model: usize },
}

impl Violation {
    pub fn severity(&self) -> Severity {
        match self {
            Violation::IndexOutOfRange { .. } | Violation::BaseSizeMismatch { .. } => Severity::Error,
            Violation::ConsecutiveInsertion { allowed, .. } | Violation::FrozenFinalBlock { allowed } => {
                if *allowed {
                    Severity::Warning
                } else {
                    Severity::Error
                }
            }
            Violation::NoLayersInserted | Violation::CountOutsideExploredRange { .. } => Severity::Warning,
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity() == Severity::Error
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity() {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        match self {
            Violation::IndexOutOfRange { index, n_base_layers } => write!(
                f,
                "{tag}: insertion index {index} out of range for {n_base_layers} base layers"
            ),
            Violation::ConsecutiveInsertion { first, second, .. } if first == second => write!(
                f,
                "{tag}: consecutive insertion: more than one new block in the gap after base block {first}"
            ),
            Violation::ConsecutiveInsertion { first, second, .. } => write!(
                f,
                "{tag}: consecutive insertion in the gaps after base blocks {first} and {second}"
            ),
            Violation::NoLayersInserted => write!(f, "{tag}: no layers inserted"),
            Violation::CountOutsideExploredRange { count } => write!(
                f,
                "{tag}: {count} insertions is outside the explored range {}..={}",
                EXPLORED_INSERTIONS.start(),
                EXPLORED_INSERTIONS.end()
            ),
            Violation::FrozenFinalBlock { .. } => {
                write!(f, "{tag}: the final block is frozen; it must stay trainable")
            }
            Violation::BaseSizeMismatch { plan, model } => write!(
                f,
                "{tag}: plan targets {plan} base layers but the model has {model}"
            ),
        }
    }
}

/// Outcome of [`validate_plan`]: every violation found, errors and warnings.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PlanReport {
    pub violations: Vec<Violation>,
}

impl PlanReport {
    pub fn is_ok(&self) -> bool {
        !self.violations.iter().any(Violation::is_error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.is_error())
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| !v.is_error())
    }
}

impl ExtensionPlan {
    pub fn new(n_base_layers: usize, insert_after: impl Into<Vec<usize>>) -> Self {
        ExtensionPlan {
            n_base_layers,
            insert_after: insert_after.into(),
            overrides: PlanOverrides::default(),
        }
    }

    pub fn sorted_insertions(&self) -> Vec<usize> {
        let mut v = self.insert_after.clone();
        v.sort_unstable();
        v
    }

    pub fn n_extended_layers(&self) -> usize {
        self.n_base_layers + self.insert_after.len()
    }

    /// Spreads `count` insertions over `n_base` blocks, always using the gap
    /// after the last block and keeping neighbours at least two apart.
    pub fn distributed(n_base: usize, count: usize) -> Self {
        let mut picks = Vec::with_capacity(count);
        if count > 0 && n_base > 0 {
            let step = n_base as f64 / count as f64;
            for k in 0..count {
                let ideal = (n_base as f64 - 1.0 - (count - 1 - k) as f64 * step).round();
                picks.push(ideal.max(0.0) as usize);
            }
        }
        ExtensionPlan::new(n_base, picks)
    }

    pub fn from_toml(text: &str) -> crate::Result<Self> {
        toml::from_str(text).map_err(|e| crate::GraftError::Config(format!("plan: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }
}

/// Reports every problem with `plan`; never fails.
pub fn validate_plan(plan: &ExtensionPlan) -> PlanReport {
    let mut violations = Vec::new();
    let sorted = plan.sorted_insertions();
    for &i in &sorted {
        if i >= plan.n_base_layers {
            violations.push(Violation::IndexOutOfRange {
                index: i,
                n_base_layers: plan.n_base_layers,
            });
        }
    }
    for w in sorted.windows(2) {
        if w[1] - w[0] <= 1 {
            violations.push(Violation::ConsecutiveInsertion {
                first: w[0],
                second: w[1],
                allowed: plan.overrides.allow_consecutive,
            });
        }
    }
    if sorted.is_empty() {
        violations.push(Violation::NoLayersInserted);
    } else if !EXPLORED_INSERTIONS.contains(&sorted.len()) {
        violations.push(Violation::CountOutsideExploredRange {
            count: sorted.len(),
        });
    }
    if plan.overrides.freeze_last_block {
        violations.push(Violation::FrozenFinalBlock {
            allowed: plan.overrides.allow_frozen_last,
        });
    }
    PlanReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_plan_on_22_layers_is_ok() {
        let report = validate_plan(&ExtensionPlan::new(22, [2, 5, 8, 11, 14, 17, 19, 21]));
        assert!(report.is_ok());
        assert!(report.violations.is_empty());
    }

    #[test]
    fn neighbouring_gaps_are_consecutive() {
        let report = validate_plan(&ExtensionPlan::new(22, [3, 4]));
        assert!(!report.is_ok());
        let msg = report.errors().next().unwrap().to_string();
        assert!(msg.contains("consecutive insertion"), "{msg}");
        assert!(msg.contains('3') && msg.contains('4'));
    }

    #[test]
    fn repeated_gap_is_consecutive() {
        let report = validate_plan(&ExtensionPlan::new(6, [2, 2]));
        assert!(matches!(
            report.errors().next(),
            Some(Violation::ConsecutiveInsertion { first: 2, second: 2, .. })
        ));
    }

    #[test]
    fn override_downgrades_consecutive() {
        let mut plan = ExtensionPlan::new(6, [2, 2, 2]);
        plan.overrides.allow_consecutive = true;
        assert!(validate_plan(&plan).is_ok());
    }

    #[test]
    fn empty_plan_warns() {
        let report = validate_plan(&ExtensionPlan::new(4, []));
        assert!(report.is_ok());
        assert_eq!(report.violations, vec![Violation::NoLayersInserted]);
        assert_eq!(report.violations[0].to_string(), "warning: no layers inserted");
    }

    #[test]
    fn out_of_range_and_count_warning() {
        let report = validate_plan(&ExtensionPlan::new(4, [1, 4]));
        assert!(!report.is_ok());
        assert!(report
            .errors()
            .any(|v| matches!(v, Violation::IndexOutOfRange { index: 4, .. })));
        assert!(report
            .warnings()
            .any(|v| matches!(v, Violation::CountOutsideExploredRange { count: 2 })));
    }

    #[test]
    fn frozen_last_needs_explicit_permission() {
        let mut plan = ExtensionPlan::new(6, [1, 3]);
        plan.overrides.freeze_last_block = true;
        assert!(!validate_plan(&plan).is_ok());
        plan.overrides.allow_frozen_last = true;
        assert!(validate_plan(&plan).is_ok());
    }

    #[test]
    fn distributed_plans_are_valid() {
        for (n, c) in [(22, 8), (6, 3), (6, 2), (12, 4), (4, 1), (30, 10)] {
            let plan = ExtensionPlan::distributed(n, c);
            assert_eq!(plan.insert_after.len(), c);
            assert_eq!(*plan.insert_after.last().unwrap(), n - 1);
            assert!(validate_plan(&plan).errors().next().is_none(), "{n} {c} {plan:?}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut plan = ExtensionPlan::new(22, [2, 5, 8]);
        plan.overrides.train_final_norm = true;
        assert_eq!(ExtensionPlan::from_toml(&plan.to_toml()).unwrap(), plan);
        assert!(ExtensionPlan::from_toml("n_base_layers = 3\ninsert_after = [1]\nbogus = 1").is_err());
    }
}
