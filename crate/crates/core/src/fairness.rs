//! Jain's fairness index and the derived unfairness measure `sqrt(1 − J)`,
//! over all users and per cell.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FairnessError {
    #[error("fairness needs at least one nonzero value")]
    EmptyOrAllZero,
    #[error("fairness inputs must be finite and nonnegative, got {0}")]
    Negative(f64),
    #[error("{values} values but {groups} group labels")]
    GroupMismatch { values: usize, groups: usize },
}

pub type Result<T, E = FairnessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fairness {
    /// Jain index in `[1/n, 1]`.
    pub jain: f64,
    /// `sqrt(1 − jain)`; 0 when all values are equal.
    pub unfairness: f64,
}

/// `J = (Σx)² / (n Σx²)` and `sqrt(1 − J)`.
pub fn jain_fairness(xs: &[f64]) -> Result<Fairness> {
    if let Some(&x) = xs.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
        return Err(FairnessError::Negative(x));
    }
    let sum: f64 = xs.iter().sum();
    let sq: f64 = xs.iter().map(|x| x * x).sum();
    if xs.is_empty() || sq == 0.0 {
        return Err(FairnessError::EmptyOrAllZero);
    }
    let jain = (sum * sum / (xs.len() as f64 * sq)).min(1.0);
    Ok(Fairness { jain, unfairness: (1.0 - jain).max(0.0).sqrt() })
}

/// Fairness within each cell and across everyone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFairness {
    /// Indexed by cell.
    pub intra_cell: Vec<Fairness>,
    pub total: Fairness,
}

impl CellFairness {
    /// Average intra-cell unfairness over cells.
    pub fn mean_intra_unfairness(&self) -> f64 {
        self.intra_cell.iter().map(|f| f.unfairness).sum::<f64>() / self.intra_cell.len() as f64
    }
}

/// `values[i]` belongs to cell `cells[i]`; cells are numbered from 0 and
/// every cell up to the largest label must have at least one member.
pub fn cell_fairness(values: &[f64], cells: &[usize]) -> Result<CellFairness> {
    if values.len() != cells.len() {
        return Err(FairnessError::GroupMismatch { values: values.len(), groups: cells.len() });
    }
    let n_cells = cells.iter().max().map_or(0, |&c| c + 1);
    let intra_cell = (0..n_cells)
        .map(|k| {
            let members: Vec<f64> = values.iter().zip(cells).filter(|(_, &c)| c == k).map(|(&v, _)| v).collect();
            jain_fairness(&members)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CellFairness { intra_cell, total: jain_fairness(values)? })
}
