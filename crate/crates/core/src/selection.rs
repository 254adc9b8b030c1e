//! Benjamini-Hochberg and Benjamini-Yekutieli selection, and realized
//! false-discovery proportion and power against a known truth.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Bh,
    By,
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMethod::Bh => "bh",
            SelectionMethod::By => "by",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: SelectionMethod,
    /// Positions in the p-value vector that were rejected.
    pub rejected: BTreeSet<usize>,
    pub q: f64,
    pub fdp: Option<f64>,
    pub power: Option<f64>,
}

impl SelectionResult {
    /// Fills in `fdp` and `power` from the set of true non-nulls.
    pub fn with_truth(mut self, nonnull: &BTreeSet<usize>) -> Self {
        let (fdp, power) = eval_fdp_power(&self.rejected, nonnull);
        self.fdp = Some(fdp);
        self.power = Some(power);
        self
    }

    /// `method,q,num_rejected,fdp,power`; unknown metrics are left empty.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.method,
            self.q,
            self.rejected.len(),
            opt(self.fdp),
            opt(self.power)
        )
    }

    pub const CSV_HEADER: &'static str = "method,q,num_rejected,fdp,power";
}

/// Rejects every p-value at or below `p_(k0)`, the largest order statistic
/// with `p_(k) <= k q / d`. Equal p-values are always treated alike.
fn step_up(pvalues: &[f64], level: f64) -> BTreeSet<usize> {
    let d = pvalues.len();
    let mut sorted: Vec<f64> = pvalues.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cutoff = (1..=d)
        .rev()
        .find(|&k| sorted[k - 1] <= k as f64 * level / d as f64)
        .map(|k| sorted[k - 1]);
    match cutoff {
        Some(t) => (0..d).filter(|&i| pvalues[i] <= t).collect(),
        None => BTreeSet::new(),
    }
}

pub fn bh_select(pvalues: &[f64], q: f64) -> SelectionResult {
    SelectionResult {
        method: SelectionMethod::Bh,
        rejected: step_up(pvalues, q),
        q,
        fdp: None,
        power: None,
    }
}

/// BH at level `q / H_d` with `H_d` the `d`-th harmonic number; valid under
/// arbitrary dependence between p-values.
pub fn by_select(pvalues: &[f64], q: f64) -> SelectionResult {
    let h: f64 = (1..=pvalues.len()).map(|k| 1.0 / k as f64).sum();
    SelectionResult {
        method: SelectionMethod::By,
        rejected: step_up(pvalues, q / h.max(1.0)),
        q,
        fdp: None,
        power: None,
    }
}

pub fn select(method: SelectionMethod, pvalues: &[f64], q: f64) -> SelectionResult {
    match method {
        SelectionMethod::Bh => bh_select(pvalues, q),
        SelectionMethod::By => by_select(pvalues, q),
    }
}

/// `(|S \ H1| / max(|S|, 1), |S & H1| / |H1|)`; power is 0 when `H1` is empty.
pub fn eval_fdp_power(selected: &BTreeSet<usize>, nonnull: &BTreeSet<usize>) -> (f64, f64) {
    let hits = selected.intersection(nonnull).count();
    let fdp = (selected.len() - hits) as f64 / selected.len().max(1) as f64;
    let power = if nonnull.is_empty() {
        0.0
    } else {
        hits as f64 / nonnull.len() as f64
    };
    (fdp, power)
}
