//! DC, TC and DI kernel matrices.
//!
//! Indices `k, l` in the formulas are 1-based; storage is 0-based and the
//! shift is applied when the matrix is filled.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{KrilcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum KernelFamily {
    /// Diagonal correlated: `c * alpha^((k+l)/2) * beta^|k-l|`.
    DC,
    /// Tuned correlated: `c * alpha^max(k,l)`.
    TC,
    /// Diagonal: `c * alpha^k` on the diagonal.
    DI,
}

impl KernelFamily {
    /// Length of the hyper-parameter vector `eta`.
    pub fn n_hyper(self) -> usize {
        match self {
            KernelFamily::DC => 3,
            KernelFamily::TC | KernelFamily::DI => 2,
        }
    }

    pub fn is_diagonal(self) -> bool {
        matches!(self, KernelFamily::DI)
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = KrilcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DC" => Ok(KernelFamily::DC),
            "TC" => Ok(KernelFamily::TC),
            "DI" => Ok(KernelFamily::DI),
            other => Err(KrilcError::Config(format!("unknown kernel family `{other}`"))),
        }
    }
}

/// Kernel family, dimension and hyper-parameters in natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub n: usize,
    pub c: f64,
    pub alpha: f64,
    /// Only read for [`KernelFamily::DC`].
    #[serde(default)]
    pub beta: f64,
}

impl KernelConfig {
    pub fn new(family: KernelFamily, n: usize, eta: &[f64]) -> Result<Self> {
        if eta.len() != family.n_hyper() {
            return Err(KrilcError::Dimension(format!(
                "{family:?} kernel takes {} hyper-parameters, got {}",
                family.n_hyper(),
                eta.len()
            )));
        }
        let cfg = KernelConfig {
            family,
            n,
            c: eta[0],
            alpha: eta[1],
            beta: if family == KernelFamily::DC { eta[2] } else { 0.0 },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn di(n: usize, c: f64, alpha: f64) -> Result<Self> {
        Self::new(KernelFamily::DI, n, &[c, alpha])
    }

    pub fn tc(n: usize, c: f64, alpha: f64) -> Result<Self> {
        Self::new(KernelFamily::TC, n, &[c, alpha])
    }

    pub fn dc(n: usize, c: f64, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(KernelFamily::DC, n, &[c, alpha, beta])
    }

    pub fn eta(&self) -> Vec<f64> {
        match self.family {
            KernelFamily::DC => vec![self.c, self.alpha, self.beta],
            _ => vec![self.c, self.alpha],
        }
    }

    /// Checks membership in the hyper-parameter domain of the family.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(KrilcError::Dimension("kernel size must be at least 1".into()));
        }
        if !(self.c >= 0.0) || !self.c.is_finite() {
            return Err(KrilcError::ParameterDomain {
                param: "c",
                value: self.c,
                bound: "c >= 0",
            });
        }
        if !(self.alpha >= 0.0) {
            return Err(KrilcError::ParameterDomain {
                param: "alpha",
                value: self.alpha,
                bound: "alpha >= 0",
            });
        }
        if !(self.alpha < 1.0) {
            return Err(KrilcError::ParameterDomain {
                param: "alpha",
                value: self.alpha,
                bound: "alpha < 1",
            });
        }
        if self.family == KernelFamily::DC && !(self.beta.abs() <= 1.0) {
            return Err(KrilcError::ParameterDomain {
                param: "beta",
                value: self.beta,
                bound: "|beta| <= 1",
            });
        }
        Ok(())
    }

    /// Entry `(k, l)` with 1-based indices.
    pub fn entry(&self, k: usize, l: usize) -> f64 {
        let c = self.c;
        let a = self.alpha;
        match self.family {
            KernelFamily::DI => {
                if k == l {
                    c * a.powi(k as i32)
                } else {
                    0.0
                }
            }
            KernelFamily::TC => c * a.powi(k.max(l) as i32),
            KernelFamily::DC => {
                let d = k.abs_diff(l) as i32;
                c * a.powf((k + l) as f64 / 2.0) * self.beta.powi(d)
            }
        }
    }

    /// Diagonal of the kernel matrix (0-based storage).
    pub fn diagonal(&self) -> Vec<f64> {
        (1..=self.n).map(|k| self.entry(k, k)).collect()
    }
}

/// A realized kernel matrix along with the block configurations that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: DMatrix<f64>,
    /// One entry for a plain kernel, several for a block-diagonal composition
    /// (in block order).
    pub blocks: Vec<KernelConfig>,
}

impl KernelMatrix {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// True when every block is diagonal, so the matrix itself is diagonal.
    pub fn is_diagonal(&self) -> bool {
        if self.blocks.is_empty() {
            let n = self.dim();
            return (0..n).all(|i| (0..n).all(|j| i == j || self.values[(i, j)] == 0.0));
        }
        self.blocks.iter().all(|b| b.family.is_diagonal())
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let scale = self.values.amax().max(f64::MIN_POSITIVE);
        let n = self.dim();
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.values[(i, j)] - self.values[(j, i)]).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// All eigenvalues >= `-rel_tol * max |eigenvalue|`.
    pub fn is_psd(&self, rel_tol: f64) -> bool {
        let eig = SymmetricEigen::new(self.values.clone()).eigenvalues;
        let scale = eig.amax();
        eig.iter().all(|&e| e >= -rel_tol * scale)
    }

    /// Factor `L` (n × r) with `P = L Lᵀ`, dropping null directions.
    ///
    /// Diagonal kernels give a diagonal square root; otherwise a symmetric
    /// eigendecomposition is used and eigenvalues below `1e-14 * max` are
    /// treated as zero.
    pub fn factor(&self) -> DMatrix<f64> {
        let n = self.dim();
        if self.is_diagonal() {
            let mut l = DMatrix::zeros(n, n);
            for i in 0..n {
                l[(i, i)] = self.values[(i, i)].max(0.0).sqrt();
            }
            return l;
        }
        let eig = SymmetricEigen::new(self.values.clone());
        let top = eig.eigenvalues.amax();
        let keep: Vec<usize> = (0..n)
            .filter(|&i| eig.eigenvalues[i] > 1e-14 * top)
            .collect();
        let mut l = DMatrix::zeros(n, keep.len());
        for (col, &i) in keep.iter().enumerate() {
            let s = eig.eigenvalues[i].sqrt();
            for r in 0..n {
                l[(r, col)] = eig.eigenvectors[(r, i)] * s;
            }
        }
        l
    }
}

pub fn build_kernel(config: &KernelConfig) -> Result<KernelMatrix> {
    config.validate()?;
    let n = config.n;
    let values = DMatrix::from_fn(n, n, |i, j| config.entry(i + 1, j + 1));
    Ok(KernelMatrix {
        values,
        blocks: vec![config.clone()],
    })
}

/// Block-diagonal model kernel: input-side block first, output-side block second,
/// matching the `[θ_b; θ_a]` regressor ordering.
pub fn block_diag_model_kernel(pb: &KernelMatrix, pa: &KernelMatrix) -> KernelMatrix {
    block_diag(&[pb, pa])
}

pub fn block_diag(parts: &[&KernelMatrix]) -> KernelMatrix {
    let n: usize = parts.iter().map(|p| p.dim()).sum();
    let mut values = DMatrix::zeros(n, n);
    let mut offset = 0;
    let mut blocks = Vec::new();
    for p in parts {
        let m = p.dim();
        values.view_mut((offset, offset), (m, m)).copy_from(&p.values);
        offset += m;
        blocks.extend(p.blocks.iter().cloned());
    }
    KernelMatrix { values, blocks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn raw_matrices_report_diagonality_from_entries() {
        let mut k = KernelMatrix {
            values: DMatrix::identity(3, 3),
            blocks: vec![],
        };
        assert!(k.is_diagonal());
        k.values[(0, 2)] = 0.5;
        k.values[(2, 0)] = 0.5;
        assert!(!k.is_diagonal());
    }

    #[test]
    fn di_example() {
        let k = build_kernel(&KernelConfig::di(3, 2.0, 0.5).unwrap()).unwrap();
        assert_eq!(k.values, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 0.25])));
    }

    #[test]
    fn tc_example() {
        let k = build_kernel(&KernelConfig::tc(2, 1.0, 0.5).unwrap()).unwrap();
        assert_eq!(k.values, DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, 0.25]));
    }

    #[test]
    fn dc_beta_one_example() {
        let k = build_kernel(&KernelConfig::dc(2, 1.0, 0.25, 1.0).unwrap()).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.25, 0.125, 0.125, 0.0625]);
        for (a, b) in k.values.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn dc_reduces_to_tc_and_di() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=10 {
            let c: f64 = rng.gen_range(0.0..5.0);
            let a: f64 = rng.gen_range(0.0..1.0);
            let dc = build_kernel(&KernelConfig::dc(n, c, a, a.sqrt()).unwrap()).unwrap();
            let tc = build_kernel(&KernelConfig::tc(n, c, a).unwrap()).unwrap();
            let dc0 = build_kernel(&KernelConfig::dc(n, c, a, 0.0).unwrap()).unwrap();
            let di = build_kernel(&KernelConfig::di(n, c, a).unwrap()).unwrap();
            for (x, y) in dc.values.iter().zip(tc.values.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-14);
            }
            for (x, y) in dc0.values.iter().zip(di.values.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn domain_violations_name_the_bound() {
        let err = KernelConfig::di(3, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, KrilcError::ParameterDomain { param: "alpha", .. }));
        let err = KernelConfig::tc(3, -1.0, 0.5).unwrap_err();
        assert!(matches!(err, KrilcError::ParameterDomain { param: "c", .. }));
        let err = KernelConfig::dc(3, 1.0, 0.5, 1.5).unwrap_err();
        assert!(matches!(err, KrilcError::ParameterDomain { param: "beta", .. }));
        assert!(KernelConfig::di(0, 1.0, 0.5).is_err());
    }

    #[test]
    fn boundary_members_are_valid_and_singular() {
        let k = build_kernel(&KernelConfig::di(4, 1.0, 0.0).unwrap()).unwrap();
        assert!(k.values.iter().all(|&v| v == 0.0));
        let k = build_kernel(&KernelConfig::tc(4, 0.0, 0.7).unwrap()).unwrap();
        assert!(k.values.iter().all(|&v| v == 0.0));
        assert_eq!(k.factor().ncols(), 0);
    }

    #[test]
    fn block_diag_examples() {
        let one = build_kernel(&KernelConfig::di(1, 1.0 / 0.5, 0.5).unwrap()).unwrap();
        let two = build_kernel(&KernelConfig::di(1, 2.0 / 0.5, 0.5).unwrap()).unwrap();
        let bd = block_diag_model_kernel(&one, &two);
        assert_eq!(bd.values, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])));

        let pb = build_kernel(&KernelConfig::tc(2, 1.0, 0.5).unwrap()).unwrap();
        let pa = build_kernel(&KernelConfig::di(1, 1.0, 0.5).unwrap()).unwrap();
        let bd = block_diag_model_kernel(&pb, &pa);
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[0.5, 0.25, 0.0, 0.25, 0.25, 0.0, 0.0, 0.0, 0.5],
        );
        assert_eq!(bd.values, expected);
        assert_eq!(bd.blocks.len(), 2);
    }

    #[test]
    fn identity_blocks() {
        let eye = KernelMatrix {
            values: DMatrix::identity(2, 2),
            blocks: vec![],
        };
        assert_eq!(block_diag_model_kernel(&eye, &eye).values, DMatrix::identity(4, 4));
    }

    #[test]
    fn factor_reproduces_kernel() {
        for cfg in [
            KernelConfig::tc(6, 1.3, 0.8).unwrap(),
            KernelConfig::dc(6, 0.7, 0.6, -0.4).unwrap(),
            KernelConfig::di(6, 2.0, 0.3).unwrap(),
        ] {
            let k = build_kernel(&cfg).unwrap();
            let l = k.factor();
            let back = &l * l.transpose();
            for (a, b) in back.iter().zip(k.values.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn diagonal_decays() {
        for cfg in [
            KernelConfig::tc(8, 1.0, 0.9).unwrap(),
            KernelConfig::dc(8, 1.0, 0.9, 0.5).unwrap(),
            KernelConfig::di(8, 1.0, 0.9).unwrap(),
        ] {
            let d = cfg.diagonal();
            assert!(d.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
