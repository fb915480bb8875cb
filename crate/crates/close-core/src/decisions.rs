//! Decision rules and losses for the three problems: squared-error
//! estimation, utility maximization by selection, and top-m selection.

use crate::error::Error;
use crate::Result;
use serde::{Deserialize, Serialize};

/// The decision problem being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Mse,
    Utilmax,
    Topm,
}

impl Problem {
    pub fn as_str(&self) -> &'static str {
        match self {
            Problem::Mse => "mse",
            Problem::Utilmax => "utilmax",
            Problem::Topm => "topm",
        }
    }
}

impl std::fmt::Display for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Problem::Mse),
            "utilmax" => Ok(Problem::Utilmax),
            "topm" => Ok(Problem::Topm),
            other => Err(Error::invalid(format!(
                "unknown problem '{other}' (expected mse, utilmax, or topm)"
            ))),
        }
    }
}

/// A binary selection over units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<bool>,
    /// The selection budget for top-m problems.
    pub m: Option<usize>,
}

impl SelectionResult {
    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// An action for [`loss`]: point estimates for the squared-error problem,
/// a selection for the others.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Estimates(Vec<f64>),
    Selection(SelectionResult),
}

fn check_finite(theta_hat: &[f64]) -> Result<()> {
    if theta_hat.is_empty() {
        return Err(Error::invalid("selection requires a non-empty vector"));
    }
    if theta_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("selection requires finite posterior means"));
    }
    Ok(())
}

/// Selects every unit whose posterior mean net benefit is nonnegative.
pub fn select_utility(theta_hat: &[f64]) -> Result<SelectionResult> {
    check_finite(theta_hat)?;
    Ok(SelectionResult {
        selected: theta_hat.iter().map(|&t| t >= 0.0).collect(),
        m: None,
    })
}

/// Selects the indices of the `m` largest values, breaking ties by lowest
/// index (a deterministic refinement of arbitrary tie-breaking).
pub fn select_top_m(theta_hat: &[f64], m: usize) -> Result<SelectionResult> {
    check_finite(theta_hat)?;
    let n = theta_hat.len();
    if m < 1 || m > n {
        return Err(Error::invalid(format!(
            "m = {m} must satisfy 1 <= m <= n = {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        theta_hat[b]
            .total_cmp(&theta_hat[a])
            .then_with(|| a.cmp(&b))
    });
    let mut selected = vec![false; n];
    for &i in &order[..m] {
        selected[i] = true;
    }
    Ok(SelectionResult {
        selected,
        m: Some(m),
    })
}

/// Grouped top-m: within each group, selects the top `ceil(fraction * group
/// size)` units by posterior mean. Groups are keyed by the parallel
/// `groups` vector; tie-breaking is by lowest index within each group.
pub fn select_top_fraction_by_group(
    theta_hat: &[f64],
    groups: &[String],
    fraction: f64,
) -> Result<SelectionResult> {
    check_finite(theta_hat)?;
    if groups.len() != theta_hat.len() {
        return Err(Error::invalid(format!(
            "groups has length {} but theta_hat has {}",
            groups.len(),
            theta_hat.len()
        )));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "fraction = {fraction} must lie in (0, 1]"
        )));
    }
    // Preserve first-appearance order of groups for determinism.
    let mut group_order: Vec<&String> = Vec::new();
    let mut members: std::collections::HashMap<&String, Vec<usize>> =
        std::collections::HashMap::new();
    for (i, g) in groups.iter().enumerate() {
        let entry = members.entry(g).or_default();
        if entry.is_empty() {
            group_order.push(g);
        }
        entry.push(i);
    }
    let mut selected = vec![false; theta_hat.len()];
    let mut total = 0usize;
    for g in group_order {
        let idx = &members[g];
        let m_g = ((fraction * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
        let mut order = idx.clone();
        order.sort_by(|&a, &b| {
            theta_hat[b]
                .total_cmp(&theta_hat[a])
                .then_with(|| a.cmp(&b))
        });
        for &i in &order[..m_g] {
            selected[i] = true;
        }
        total += m_g;
    }
    Ok(SelectionResult {
        selected,
        m: Some(total),
    })
}

/// Loss of an action against the true parameters. Selection problems return
/// the negative utility: `-1/n sum delta_i theta_i` for utility
/// maximization and `-1/m sum delta_i theta_i` for top-m.
pub fn loss(problem: Problem, action: &Decision, theta_true: &[f64]) -> Result<f64> {
    let n = theta_true.len();
    match (problem, action) {
        (Problem::Mse, Decision::Estimates(delta)) => {
            if delta.len() != n {
                return Err(Error::invalid("estimate vector length mismatch"));
            }
            Ok(delta
                .iter()
                .zip(theta_true)
                .map(|(&d, &t)| (d - t) * (d - t))
                .sum::<f64>()
                / n as f64)
        }
        (Problem::Utilmax, Decision::Selection(sel)) => {
            if sel.selected.len() != n {
                return Err(Error::invalid("selection length mismatch"));
            }
            let util: f64 = sel
                .selected
                .iter()
                .zip(theta_true)
                .filter(|(&s, _)| s)
                .map(|(_, &t)| t)
                .sum();
            Ok(-util / n as f64)
        }
        (Problem::Topm, Decision::Selection(sel)) => {
            if sel.selected.len() != n {
                return Err(Error::invalid("selection length mismatch"));
            }
            let m = sel
                .m
                .ok_or_else(|| Error::invalid("top-m loss requires the selection budget m"))?;
            let util: f64 = sel
                .selected
                .iter()
                .zip(theta_true)
                .filter(|(&s, _)| s)
                .map(|(_, &t)| t)
                .sum();
            Ok(-util / m as f64)
        }
        _ => Err(Error::invalid(
            "action shape does not match the problem (mse needs estimates, selection problems need a selection)",
        )),
    }
}

/// Root-mean-square distance between two estimate vectors together with the
/// regret bounds it implies: utility-maximization regret is bounded by the
/// rmse itself, and top-m regret by `2 sqrt(n/m) * rmse`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretBounds {
    pub rmse: f64,
    pub utilmax_bound: f64,
    pub topm_bound: f64,
}

pub fn regret_bounds_check(theta_hat: &[f64], theta_star: &[f64], m: usize) -> Result<RegretBounds> {
    let n = theta_hat.len();
    if theta_star.len() != n || n == 0 {
        return Err(Error::invalid("theta_hat and theta_star must have equal non-zero length"));
    }
    if m < 1 || m > n {
        return Err(Error::invalid(format!("m = {m} must satisfy 1 <= m <= n = {n}")));
    }
    let mse = theta_hat
        .iter()
        .zip(theta_star)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64;
    let rmse = mse.sqrt();
    Ok(RegretBounds {
        rmse,
        utilmax_bound: rmse,
        topm_bound: 2.0 * (n as f64 / m as f64).sqrt() * rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn utility_selection_boundary() {
        let s = select_utility(&[-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(s.selected, vec![false, true, true]);
        let s = select_utility(&[-1.0, -0.5]).unwrap();
        assert_eq!(s.count(), 0);
        let s = select_utility(&[0.0, 0.0]).unwrap();
        assert_eq!(s.count(), 2);
    }

    #[test]
    fn top_m_selection_and_ties() {
        let s = select_top_m(&[3.0, 1.0, 2.0], 2).unwrap();
        assert_eq!(s.selected, vec![true, false, true]);
        let s = select_top_m(&[1.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(s.selected, vec![true, false, false]);
        let s = select_top_m(&[1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(s.count(), 3);
        assert!(select_top_m(&[1.0], 2).is_err());
        assert!(select_top_m(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn loss_examples() {
        let theta = vec![3.0, 1.0, 2.0];
        let l = loss(Problem::Mse, &Decision::Estimates(theta.clone()), &theta).unwrap();
        assert_eq!(l, 0.0);

        let sel = select_top_m(&theta, 2).unwrap();
        let l = loss(Problem::Topm, &Decision::Selection(sel), &theta).unwrap();
        assert!((l - (-2.5)).abs() < 1e-14);

        let theta = vec![-1.0, 0.0, 2.0];
        let sel = select_utility(&theta).unwrap();
        let l = loss(Problem::Utilmax, &Decision::Selection(sel), &theta).unwrap();
        assert!((l - (-2.0 / 3.0)).abs() < 1e-14);
    }

    #[test]
    fn loss_shape_mismatch() {
        let sel = SelectionResult {
            selected: vec![true],
            m: Some(1),
        };
        assert!(loss(Problem::Mse, &Decision::Selection(sel), &[1.0]).is_err());
        assert!(loss(
            Problem::Utilmax,
            &Decision::Estimates(vec![1.0]),
            &[1.0]
        )
        .is_err());
    }

    #[test]
    fn regret_bounds_examples() {
        let theta = vec![1.0, 2.0, 3.0];
        let b = regret_bounds_check(&theta, &theta, 1).unwrap();
        assert_eq!(b.rmse, 0.0);
        assert_eq!(b.topm_bound, 0.0);

        let n = 100;
        let star = vec![0.0; n];
        let hat = vec![0.1; n];
        let b = regret_bounds_check(&hat, &star, 25).unwrap();
        assert!((b.rmse - 0.1).abs() < 1e-14);
        assert!((b.topm_bound - 0.4).abs() < 1e-12);
        assert!((b.utilmax_bound - 0.1).abs() < 1e-14);
    }

    #[test]
    fn grouped_top_fraction() {
        let theta = vec![5.0, 1.0, 4.0, 2.0, 3.0, 0.0];
        let groups: Vec<String> = ["a", "a", "a", "b", "b", "b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let s = select_top_fraction_by_group(&theta, &groups, 1.0 / 3.0).unwrap();
        // ceil(3/3) = 1 per group: best of each.
        assert_eq!(s.selected, vec![true, false, false, false, true, false]);
        assert_eq!(s.m, Some(2));
    }

    #[test]
    fn oracle_top_m_is_optimal_bruteforce() {
        // Among all m-subsets, selecting by true theta minimizes the loss.
        let theta = vec![0.3, -1.2, 2.0, 0.9, -0.4, 1.1, 0.0, 0.5];
        let n = theta.len();
        let m = 3;
        let oracle = select_top_m(&theta, m).unwrap();
        let oracle_loss = loss(Problem::Topm, &Decision::Selection(oracle), &theta).unwrap();
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != m {
                continue;
            }
            let sel = SelectionResult {
                selected: (0..n).map(|i| mask & (1 << i) != 0).collect(),
                m: Some(m),
            };
            let l = loss(Problem::Topm, &Decision::Selection(sel), &theta).unwrap();
            assert!(oracle_loss <= l + 1e-12);
        }
    }

    proptest! {
        // Positive affine transforms preserve the top-m selection.
        #[test]
        fn top_m_affine_invariance(
            values in proptest::collection::vec(-100.0..100.0f64, 2..20),
            a in -5.0..5.0f64,
            b in 0.01..10.0f64,
        ) {
            let m = 1 + values.len() / 2;
            let transformed: Vec<f64> = values.iter().map(|&v| a + b * v).collect();
            let s1 = select_top_m(&values, m).unwrap();
            let s2 = select_top_m(&transformed, m).unwrap();
            prop_assert_eq!(s1.selected, s2.selected);
        }

        // Positive scaling preserves the utility selection.
        #[test]
        fn utility_scale_invariance(
            values in proptest::collection::vec(-10.0..10.0f64, 1..20),
            b in 0.01..10.0f64,
        ) {
            let scaled: Vec<f64> = values.iter().map(|&v| b * v).collect();
            let s1 = select_utility(&values).unwrap();
            let s2 = select_utility(&scaled).unwrap();
            prop_assert_eq!(s1.selected, s2.selected);
        }
    }
}
