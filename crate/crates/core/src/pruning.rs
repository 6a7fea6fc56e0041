//! Magnitude-based pruning of hidden neurons (rows of `W_O`).

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::io::{csv_text, fmt_f64};
use crate::linalg::row_norms;
use crate::model::{evaluate, Metrics, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneOrder {
    SmallestFirst,
    LargestFirst,
}

impl PruneOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneOrder::SmallestFirst => "smallest_first",
            PruneOrder::LargestFirst => "largest_first",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneSpec {
    pub rate: f64,
    pub order: PruneOrder,
}

impl PruneSpec {
    pub fn new(rate: f64, order: PruneOrder) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("pruning rate {rate} outside [0, 1]")));
        }
        Ok(PruneSpec { rate, order })
    }

    /// `⌊rate · m⌋`, robust to representation error such as `0.3 · 200`.
    pub fn count(&self, m: usize) -> usize {
        ((self.rate * m as f64) + 1e-9).floor().min(m as f64) as usize
    }
}

/// Neuron indices in pruning order. Equal norms go lower index first.
pub fn pruning_order(params: &Params, order: PruneOrder) -> Vec<usize> {
    let norms = row_norms(&params.w_o);
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&i, &j| {
        let by_norm = match order {
            PruneOrder::SmallestFirst => norms[i].total_cmp(&norms[j]),
            PruneOrder::LargestFirst => norms[j].total_cmp(&norms[i]),
        };
        by_norm.then(i.cmp(&j))
    });
    idx
}

/// Indices of the rows `prune` zeroes.
pub fn pruned_rows(params: &Params, spec: PruneSpec) -> Vec<usize> {
    let mut order = pruning_order(params, spec.order);
    order.truncate(spec.count(params.w_o.rows()));
    order
}

/// Zeroes the selected rows of `W_O`. Everything else is copied unchanged.
pub fn prune(params: &Params, spec: PruneSpec) -> Params {
    let mut out = params.clone();
    for i in pruned_rows(params, spec) {
        out.w_o.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrunePoint {
    pub order: PruneOrder,
    pub rate: f64,
    pub metrics: Metrics,
}

pub fn prune_sweep(params: &Params, rates: &[f64], order: PruneOrder, testset: &Dataset) -> Result<Vec<PrunePoint>> {
    if rates.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("pruning rates must be sorted ascending".into()));
    }
    rates
        .iter()
        .map(|&rate| {
            let spec = PruneSpec::new(rate, order)?;
            Ok(PrunePoint {
                order,
                rate,
                metrics: evaluate(&prune(params, spec), testset)?,
            })
        })
        .collect()
}

pub fn prune_sweep_csv(points: &[PrunePoint]) -> String {
    csv_text(
        "order,rate,hinge,zero_one",
        points.iter().map(|p| {
            vec![
                p.order.as_str().to_string(),
                fmt_f64(p.rate),
                fmt_f64(p.metrics.hinge),
                fmt_f64(p.metrics.zero_one_error),
            ]
        }),
    )
}
