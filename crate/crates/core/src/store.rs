//! Cross-iteration signal storage.

use crate::error::{KrilcError, Result};

/// Inputs, outputs, noises and errors of completed iterations.
///
/// Every signal is indexed by time `0..=N_d`. Iterations are numbered from
/// `first_iteration` (0 when an initial experiment is stored, else 1).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStore {
    horizon: usize,
    first_iteration: usize,
    y_d: Vec<f64>,
    u: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
}

impl IterationStore {
    pub fn new(y_d: Vec<f64>, first_iteration: usize) -> Result<Self> {
        if y_d.len() < 2 {
            return Err(KrilcError::Dimension("reference needs at least t = 0, 1".into()));
        }
        if first_iteration > 1 {
            return Err(KrilcError::Index("first iteration must be 0 or 1".into()));
        }
        Ok(IterationStore {
            horizon: y_d.len() - 1,
            first_iteration,
            y_d,
            u: Vec::new(),
            y: Vec::new(),
            v: Vec::new(),
            e: Vec::new(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn first_iteration(&self) -> usize {
        self.first_iteration
    }

    pub fn reference(&self) -> &[f64] {
        &self.y_d
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Index the next pushed iteration will get.
    pub fn next_iteration(&self) -> usize {
        self.first_iteration + self.len()
    }

    pub fn contains(&self, j: usize) -> bool {
        j >= self.first_iteration && j < self.next_iteration()
    }

    /// Appends a completed iteration; enforces `u(0) = 0`, `y(0) = y(1) = 0`
    /// and recomputes `e = y_d − y`.
    pub fn push(&mut self, mut u: Vec<f64>, mut y: Vec<f64>, v: Vec<f64>) -> Result<usize> {
        let n = self.horizon + 1;
        if u.len() != n || y.len() != n || v.len() != n {
            return Err(KrilcError::Dimension(format!("iteration signals need {n} samples")));
        }
        u[0] = 0.0;
        y[0] = 0.0;
        y[1] = 0.0;
        let e = self.y_d.iter().zip(&y).map(|(r, o)| r - o).collect();
        self.u.push(u);
        self.y.push(y);
        self.v.push(v);
        self.e.push(e);
        Ok(self.next_iteration() - 1)
    }

    fn slot(&self, j: usize) -> Result<usize> {
        if self.contains(j) {
            Ok(j - self.first_iteration)
        } else {
            Err(KrilcError::Index(format!(
                "iteration {j} not stored (have {}..{})",
                self.first_iteration,
                self.next_iteration()
            )))
        }
    }

    pub fn u(&self, j: usize) -> Result<&[f64]> {
        Ok(&self.u[self.slot(j)?])
    }

    pub fn y(&self, j: usize) -> Result<&[f64]> {
        Ok(&self.y[self.slot(j)?])
    }

    pub fn v(&self, j: usize) -> Result<&[f64]> {
        Ok(&self.v[self.slot(j)?])
    }

    pub fn e(&self, j: usize) -> Result<&[f64]> {
        Ok(&self.e[self.slot(j)?])
    }

    /// `e_j(t)`, or 0 for iterations before the first stored one.
    pub fn error_or_zero(&self, j: isize, t: usize) -> f64 {
        if j < self.first_iteration as isize {
            return 0.0;
        }
        self.e(j as usize).map(|e| e[t]).unwrap_or(0.0)
    }

    /// Stored iteration indices in order.
    pub fn iterations(&self) -> std::ops::Range<usize> {
        self.first_iteration..self.next_iteration()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_identity_and_conventions() {
        let mut s = IterationStore::new(vec![0.0, 1.0, 2.0, 3.0], 0).unwrap();
        let j = s
            .push(vec![5.0, 1.0, 1.0, 1.0], vec![9.0, 9.0, 1.5, 2.0], vec![0.0; 4])
            .unwrap();
        assert_eq!(j, 0);
        assert_eq!(s.u(0).unwrap()[0], 0.0);
        assert_eq!(s.y(0).unwrap(), &[0.0, 0.0, 1.5, 2.0]);
        assert_eq!(s.e(0).unwrap(), &[0.0, 1.0, 0.5, 1.0]);
        assert!(s.u(1).is_err());
        assert_eq!(s.error_or_zero(-1, 2), 0.0);
        assert_eq!(s.error_or_zero(0, 2), 0.5);
    }
}
