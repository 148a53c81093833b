//! Zero-eigenspace structure of a conservative dispersal matrix.
//!
//! A connectivity matrix `L` (cooperative, zero column sums) decomposes into
//! irreducible diagonal blocks; blocks whose columns carry no off-block mass
//! keep spectral bound zero, the rest are strictly stable. This module
//! classifies the blocks, builds the nonnegative eigenvector matrices `P`
//! (rows: left null vectors) and `Q` (columns: right null vectors) with
//! `PQ = I`, `PL = 0`, `LQ = 0`, aggregates coefficient matrices to
//! `PMQ`, and extracts the sub-problems attached to subsets of zero blocks.

use nalgebra::LU;

use crate::error::{Error, Result};
use crate::matrix::{self, BlockStructure, Matrix};

/// Relative tolerance on column sums when accepting (H1).
pub const H1_COLUMN_TOL: f64 = 1e-12;
/// Absolute tolerance on `s(L) = 0`.
pub const SPECTRAL_BOUND_TOL: f64 = 1e-9;
/// Residual tolerance for the assembled basis identities.
pub const BASIS_RESIDUAL_TOL: f64 = 1e-10;

/// A dispersal matrix together with its Frobenius normal form.
///
/// [`ConnectivityMatrix::new`] enforces the conservative case (zero column
/// sums); [`ConnectivityMatrix::new_unbalanced`] admits the weaker structural
/// variant arising in extracted sub-problems, where columns of stable blocks
/// may have lost mass but the spectral bound is still zero.
#[derive(Debug, Clone)]
pub struct ConnectivityMatrix {
    matrix: Matrix,
    structure: BlockStructure,
}

impl ConnectivityMatrix {
    /// Validates (H1): cooperative with zero column sums (relative tolerance
    /// [`H1_COLUMN_TOL`]); inputs failing it are rejected, not projected.
    pub fn new(matrix: Matrix) -> Result<Self> {
        matrix::check_square_finite(&matrix)?;
        if !matrix::is_cooperative(&matrix) {
            return Err(Error::H1Violation(
                "off-diagonal entries must be nonnegative".into(),
            ));
        }
        let scale = matrix.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let tol = H1_COLUMN_TOL * scale;
        for j in 0..matrix.ncols() {
            let sum: f64 = matrix.column(j).iter().sum();
            if sum.abs() > tol {
                return Err(Error::H1Violation(format!(
                    "column {} sums to {:.3e} (tolerance {:.3e})",
                    j, sum, tol
                )));
            }
        }
        Self::finish(matrix)
    }

    /// Accepts a cooperative matrix with `s(L) = 0` whose zero blocks are
    /// column-isolated, without requiring zero column sums.
    pub fn new_unbalanced(matrix: Matrix) -> Result<Self> {
        matrix::check_square_finite(&matrix)?;
        if !matrix::is_cooperative(&matrix) {
            return Err(Error::H1Violation(
                "off-diagonal entries must be nonnegative".into(),
            ));
        }
        Self::finish(matrix)
    }

    fn finish(matrix: Matrix) -> Result<Self> {
        let s = matrix::spectral_bound(&matrix)?;
        if s.abs() > SPECTRAL_BOUND_TOL {
            return Err(Error::H1Violation(format!(
                "spectral bound {:.3e} differs from zero",
                s
            )));
        }
        let structure = matrix::block_structure(&matrix)?;
        Ok(Self { matrix, structure })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Infinity norm (max absolute row sum), the stiffness scale for `dL`.
    pub fn inf_norm(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.matrix.row(i).iter().map(|x| x.abs()).sum())
            .fold(0.0, f64::max)
    }
}

/// Diagonal blocks split by their spectral bound: zero blocks (no off-block
/// column entries) versus strictly decaying blocks.
#[derive(Debug, Clone)]
pub struct BlockClassification {
    /// Block ids with `s = 0`, in topological order. Never empty.
    pub zero_blocks: Vec<usize>,
    /// Block ids with `s < 0`, in topological order.
    pub decaying_blocks: Vec<usize>,
}

/// Classifies each diagonal block structurally: a block has spectral bound
/// zero iff every off-block entry in its columns is exactly zero.
pub fn classify_blocks(l: &ConnectivityMatrix) -> Result<BlockClassification> {
    let st = l.structure();
    let a = l.matrix();
    let n = l.dim();
    let mut zero_blocks = Vec::new();
    let mut decaying_blocks = Vec::new();
    for b in 0..st.block_count() {
        let isolated = st
            .block(b)
            .iter()
            .all(|&j| (0..n).all(|i| st.block_of(i) == b || a[(i, j)] == 0.0));
        if isolated {
            zero_blocks.push(b);
        } else {
            decaying_blocks.push(b);
        }
    }
    if zero_blocks.is_empty() {
        return Err(Error::Inconsistency(
            "no zero blocks found; contradicts s(L) = 0 under (H1)".into(),
        ));
    }
    Ok(BlockClassification {
        zero_blocks,
        decaying_blocks,
    })
}

/// The zero-eigenspace basis of a connectivity matrix: nonnegative `P`
/// (`alpha0 x n`) and `Q` (`n x alpha0`) with `PQ = I`, `PL = 0`, `LQ = 0`.
///
/// Columns of `Q` sum to one and are each supported on a single zero block;
/// rows of `P` are fixed by `p . q = 1` per block, with their components on
/// decaying blocks solved from the stationarity equations by forward
/// substitution over the block triangular order.
#[derive(Debug, Clone)]
pub struct ZeroEigenBasis {
    source: ConnectivityMatrix,
    p: Matrix,
    q: Matrix,
    zero_blocks: Vec<usize>,
    decaying_blocks: Vec<usize>,
    permutation: Vec<usize>,
}

impl ZeroEigenBasis {
    /// Multiplicity of the zero eigenvalue (number of zero blocks).
    pub fn alpha0(&self) -> usize {
        self.q.ncols()
    }

    pub fn p(&self) -> &Matrix {
        &self.p
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    /// Block ids of the zero blocks, aligned with the columns of `Q`.
    pub fn zero_blocks(&self) -> &[usize] {
        &self.zero_blocks
    }

    pub fn decaying_blocks(&self) -> &[usize] {
        &self.decaying_blocks
    }

    /// The ordering placing decaying blocks first and zero blocks last;
    /// `permutation()[pos]` is the original patch index at `pos`.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn source(&self) -> &ConnectivityMatrix {
        &self.source
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// `P M Q` without any cooperativity bookkeeping; valid for arbitrary
    /// square `M` (similarity class is basis-independent).
    pub fn transform(&self, m: &Matrix) -> Result<Matrix> {
        if m.nrows() != self.dim() || m.ncols() != self.dim() {
            return Err(Error::Precondition(format!(
                "aggregation expects a {0}x{0} matrix, got {1}x{2}",
                self.dim(),
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(&self.p * m * &self.q)
    }

    /// Aggregates a cooperative matrix to the cooperative `alpha0 x alpha0`
    /// matrix `P M Q`, clamping roundoff-scale negative off-diagonals.
    pub fn aggregate(&self, m: &Matrix) -> Result<Matrix> {
        if !matrix::is_cooperative(m) {
            return Err(Error::Precondition(
                "aggregate requires a cooperative matrix".into(),
            ));
        }
        let mut out = self.transform(m)?;
        let tol = 1e-12 * out.amax().max(1.0);
        let k = out.nrows();
        for i in 0..k {
            for j in 0..k {
                if i != j && out[(i, j)] < 0.0 {
                    if out[(i, j)] >= -tol {
                        out[(i, j)] = 0.0;
                    } else {
                        return Err(Error::Inconsistency(format!(
                            "aggregated matrix lost cooperativity at ({}, {}): {:.3e}",
                            i,
                            j,
                            out[(i, j)]
                        )));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Sub-problem attached to a subset of zero blocks: keeps every decaying
    /// block plus the selected zero blocks, restricting `L`, `M` and the
    /// basis to those patches.
    pub fn extract_subproblem(&self, m: &Matrix, selector: &[usize]) -> Result<Subproblem> {
        if selector.is_empty() {
            return Err(Error::Precondition("empty zero-block selector".into()));
        }
        for &b in selector {
            if !self.zero_blocks.contains(&b) {
                return Err(Error::Precondition(format!(
                    "block {} is not a zero block",
                    b
                )));
            }
        }
        if m.nrows() != self.dim() || m.ncols() != self.dim() {
            return Err(Error::Precondition(
                "sub-problem matrix dimension mismatch".into(),
            ));
        }
        if !matrix::is_cooperative(m) {
            return Err(Error::Precondition(
                "extract_subproblem requires a cooperative matrix".into(),
            ));
        }
        let st = self.source.structure();
        let mut patches: Vec<usize> = Vec::new();
        for &b in &self.decaying_blocks {
            patches.extend_from_slice(st.block(b));
        }
        // selected zero blocks keep their order within the basis
        let selected: Vec<usize> = self
            .zero_blocks
            .iter()
            .copied()
            .filter(|b| selector.contains(b))
            .collect();
        for &b in &selected {
            patches.extend_from_slice(st.block(b));
        }

        let k = patches.len();
        let l_sub = Matrix::from_fn(k, k, |r, c| self.source.matrix()[(patches[r], patches[c])]);
        let m_sub = Matrix::from_fn(k, k, |r, c| m[(patches[r], patches[c])]);
        let l_sub = ConnectivityMatrix::new_unbalanced(l_sub)?;

        let cols: Vec<usize> = selected
            .iter()
            .map(|b| self.zero_blocks.iter().position(|z| z == b).unwrap())
            .collect();
        let p_sub = Matrix::from_fn(cols.len(), k, |r, c| self.p[(cols[r], patches[c])]);
        let q_sub = Matrix::from_fn(k, cols.len(), |r, c| self.q[(patches[r], cols[c])]);

        // remap block metadata onto the sub-matrix's own structure
        let sub_st = l_sub.structure().clone();
        let cls = {
            let tmp = classify_blocks(&l_sub)?;
            tmp
        };
        let zero_blocks_sub: Vec<usize> = selected
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let first_patch = st.block(b)[0];
                let local = patches.iter().position(|&p| p == first_patch).unwrap();
                let sb = sub_st.block_of(local);
                debug_assert!(cls.zero_blocks.contains(&sb), "zero block lost in extraction");
                let _ = i;
                sb
            })
            .collect();

        let mut permutation: Vec<usize> = Vec::with_capacity(k);
        for &b in &cls.decaying_blocks {
            permutation.extend_from_slice(sub_st.block(b));
        }
        for &b in &zero_blocks_sub {
            permutation.extend_from_slice(sub_st.block(b));
        }

        let basis = ZeroEigenBasis {
            source: l_sub.clone(),
            p: p_sub,
            q: q_sub,
            zero_blocks: zero_blocks_sub,
            decaying_blocks: cls.decaying_blocks.clone(),
            permutation,
        };
        basis.validate()?;

        // Lemma-level consistency: the sub-aggregation must equal the
        // matching principal sub-block of the full aggregation.
        let full = self.transform(m)?;
        let sub = basis.transform(&m_sub)?;
        for (r, &cr) in cols.iter().enumerate() {
            for (c, &cc) in cols.iter().enumerate() {
                if (full[(cr, cc)] - sub[(r, c)]).abs() > 1e-10 * full.amax().max(1.0) {
                    return Err(Error::Inconsistency(format!(
                        "sub-aggregation mismatch at ({}, {})",
                        r, c
                    )));
                }
            }
        }

        Ok(Subproblem {
            connectivity: l_sub,
            coefficient: m_sub,
            basis,
            patches,
        })
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        let a0 = self.alpha0();
        let l = self.source.matrix();

        let pq = &self.p * &self.q;
        let res_pq = (&pq - Matrix::identity(a0, a0)).amax();
        if res_pq > BASIS_RESIDUAL_TOL {
            return Err(Error::BasisAssembly {
                check: "PQ = I",
                residual: res_pq,
            });
        }
        let res_pl = (&self.p * l).amax();
        if res_pl > BASIS_RESIDUAL_TOL {
            return Err(Error::BasisAssembly {
                check: "PL = 0",
                residual: res_pl,
            });
        }
        let res_lq = (l * &self.q).amax();
        if res_lq > BASIS_RESIDUAL_TOL {
            return Err(Error::BasisAssembly {
                check: "LQ = 0",
                residual: res_lq,
            });
        }
        if self.p.iter().any(|&x| x < 0.0) || self.q.iter().any(|&x| x < 0.0) {
            return Err(Error::BasisAssembly {
                check: "nonnegativity of P and Q",
                residual: self.p.iter().chain(self.q.iter()).cloned().fold(0.0, f64::min),
            });
        }
        let st = self.source.structure();
        for (col, &b) in self.zero_blocks.iter().enumerate() {
            let sum: f64 = self.q.column(col).iter().sum();
            if (sum - 1.0).abs() > BASIS_RESIDUAL_TOL {
                return Err(Error::BasisAssembly {
                    check: "column sums of Q",
                    residual: (sum - 1.0).abs(),
                });
            }
            for i in 0..n {
                let inside = st.block_of(i) == b;
                let v = self.q[(i, col)];
                if inside && v <= 0.0 {
                    return Err(Error::BasisAssembly {
                        check: "strict positivity of Q on its block",
                        residual: v,
                    });
                }
                if !inside && v != 0.0 {
                    return Err(Error::BasisAssembly {
                        check: "support of Q",
                        residual: v,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Result of [`ZeroEigenBasis::extract_subproblem`].
#[derive(Debug, Clone)]
pub struct Subproblem {
    pub connectivity: ConnectivityMatrix,
    pub coefficient: Matrix,
    pub basis: ZeroEigenBasis,
    /// Original patch indices retained, in sub-problem order.
    pub patches: Vec<usize>,
}

/// Builds the zero-eigenspace basis of `l`.
///
/// Each zero block contributes its Perron right null vector (normalized to
/// sum one) as a column of `Q` and its Perron left null vector as the
/// corresponding block of a row of `P`; the remaining components of that row
/// live on the decaying blocks and solve the stationarity equations against
/// the strictly stable block triangular sub-matrix.
pub fn build_basis(l: &ConnectivityMatrix) -> Result<ZeroEigenBasis> {
    let cls = classify_blocks(l)?;
    let st = l.structure();
    let a = l.matrix();
    let n = l.dim();
    let a0 = cls.zero_blocks.len();

    let mut p = Matrix::zeros(a0, n);
    let mut q = Matrix::zeros(n, a0);

    // LU factors of the decaying diagonal blocks, transposed once
    let mut lu_cache: Vec<(usize, LU<f64, nalgebra::Dyn, nalgebra::Dyn>)> = Vec::new();
    for &h in &cls.decaying_blocks {
        let idx = st.block(h);
        let block = Matrix::from_fn(idx.len(), idx.len(), |r, c| a[(idx[r], idx[c])]);
        lu_cache.push((h, block.transpose().lu()));
    }

    for (col, &zb) in cls.zero_blocks.iter().enumerate() {
        let idx = st.block(zb);
        let nb = idx.len();
        let block = Matrix::from_fn(nb, nb, |r, c| a[(idx[r], idx[c])]);
        let pp = matrix::perron_pair(&block)?;
        if pp.value.abs() > SPECTRAL_BOUND_TOL {
            return Err(Error::Inconsistency(format!(
                "zero block {} has spectral bound {:.3e}",
                zb, pp.value
            )));
        }
        for (r, &i) in idx.iter().enumerate() {
            q[(i, col)] = pp.right[r];
            p[(col, i)] = pp.left[r];
        }

        // stationarity on the decaying blocks, solved from the last block
        // upward so every coupling term is already known
        for (pos, &h) in cls.decaying_blocks.iter().enumerate().rev() {
            let hidx = st.block(h);
            let mut rhs = nalgebra::DVector::zeros(hidx.len());
            // contribution of the zero block itself
            for (r, &i) in idx.iter().enumerate() {
                for (c, &j) in hidx.iter().enumerate() {
                    rhs[c] -= pp.left[r] * a[(i, j)];
                }
            }
            // contributions of decaying blocks already solved
            for &h2 in &cls.decaying_blocks[pos + 1..] {
                for &i in st.block(h2) {
                    let pi = p[(col, i)];
                    if pi != 0.0 {
                        for (c, &j) in hidx.iter().enumerate() {
                            rhs[c] -= pi * a[(i, j)];
                        }
                    }
                }
            }
            let lu = &lu_cache.iter().find(|(id, _)| *id == h).unwrap().1;
            let x = lu.solve(&rhs).ok_or_else(|| {
                Error::Inconsistency(format!(
                    "decaying block {} is singular; contradicts s < 0",
                    h
                ))
            })?;
            for (c, &j) in hidx.iter().enumerate() {
                // clamp solver roundoff; the exact solution is nonnegative
                p[(col, j)] = if x[c] > 0.0 {
                    x[c]
                } else if x[c] > -1e-13 {
                    0.0
                } else {
                    x[c]
                };
            }
        }
    }

    let mut permutation: Vec<usize> = Vec::with_capacity(n);
    for &b in &cls.decaying_blocks {
        permutation.extend_from_slice(st.block(b));
    }
    for &b in &cls.zero_blocks {
        permutation.extend_from_slice(st.block(b));
    }

    let basis = ZeroEigenBasis {
        source: l.clone(),
        p,
        q,
        zero_blocks: cls.zero_blocks,
        decaying_blocks: cls.decaying_blocks,
        permutation,
    };
    basis.validate()?;
    Ok(basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Vector;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn mat(rows: &[&[f64]]) -> Matrix {
        let n = rows.len();
        Matrix::from_fn(n, rows[0].len(), |i, j| rows[i][j])
    }

    fn two_block_decoupled() -> ConnectivityMatrix {
        // block-diagonal of two copies of [[-1,1],[1,-1]]
        let mut a = Matrix::zeros(4, 4);
        for off in [0, 2] {
            a[(off, off)] = -1.0;
            a[(off, off + 1)] = 1.0;
            a[(off + 1, off)] = 1.0;
            a[(off + 1, off + 1)] = -1.0;
        }
        ConnectivityMatrix::new(a).unwrap()
    }

    /// Random (H1) matrix: a random block lower triangular pattern with
    /// irreducible diagonal blocks, diagonals fixed up for zero column sums,
    /// then a random symmetric permutation.
    pub(crate) fn random_h1(rng: &mut impl Rng, max_n: usize) -> ConnectivityMatrix {
        loop {
            let n = rng.gen_range(1..=max_n);
            let mut sizes = Vec::new();
            let mut left = n;
            while left > 0 {
                let s = rng.gen_range(1..=left.min(3));
                sizes.push(s);
                left -= s;
            }
            let mut a = Matrix::zeros(n, n);
            let mut start = 0usize;
            let mut starts = Vec::new();
            for &s in &sizes {
                starts.push(start);
                // irreducible block: a cycle plus optional extras
                for k in 0..s {
                    if s > 1 {
                        a[(start + (k + 1) % s, start + k)] = rng.gen_range(0.2..2.0);
                    }
                    if s > 2 && rng.gen_bool(0.5) {
                        let other = (k + 2) % s;
                        a[(start + other, start + k)] = rng.gen_range(0.0..1.0);
                    }
                }
                start += s;
            }
            // random strictly-lower block couplings
            for bi in 1..sizes.len() {
                for bj in 0..bi {
                    if rng.gen_bool(0.4) {
                        let i = starts[bi] + rng.gen_range(0..sizes[bi]);
                        let j = starts[bj] + rng.gen_range(0..sizes[bj]);
                        a[(i, j)] = rng.gen_range(0.1..1.5);
                    }
                }
            }
            // zero column sums via the diagonal
            for j in 0..n {
                let s: f64 = (0..n).filter(|&i| i != j).map(|i| a[(i, j)]).sum();
                a[(j, j)] = -s;
            }
            // random relabeling of patches
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let b = Matrix::from_fn(n, n, |i, j| a[(perm[i], perm[j])]);
            match ConnectivityMatrix::new(b) {
                Ok(c) => return c,
                Err(_) => continue,
            }
        }
    }

    pub(crate) fn random_cooperative(rng: &mut impl Rng, n: usize) -> Matrix {
        Matrix::from_fn(n, n, |i, j| {
            if i == j {
                rng.gen_range(-2.0..2.0)
            } else if rng.gen_bool(0.7) {
                rng.gen_range(0.0..1.5)
            } else {
                0.0
            }
        })
    }

    #[test]
    fn h1_rejects_bad_column_sums() {
        let a = mat(&[&[-1.0, 2.0], &[1.0, -2.001]]);
        assert!(matches!(
            ConnectivityMatrix::new(a),
            Err(Error::H1Violation(_))
        ));
    }

    #[test]
    fn classify_irreducible() {
        let l = ConnectivityMatrix::new(mat(&[&[-1.0, 2.0], &[1.0, -2.0]])).unwrap();
        let cls = classify_blocks(&l).unwrap();
        assert_eq!(cls.zero_blocks.len(), 1);
        assert!(cls.decaying_blocks.is_empty());
    }

    #[test]
    fn classify_chain() {
        let l = ConnectivityMatrix::new(mat(&[
            &[-1.0, 0.0, 0.0],
            &[1.0, -2.0, 0.0],
            &[0.0, 2.0, 0.0],
        ]))
        .unwrap();
        let cls = classify_blocks(&l).unwrap();
        // blocks come out in chain order (1,2,3); only the last is conservative
        assert_eq!(cls.zero_blocks, vec![2]);
        assert_eq!(cls.decaying_blocks, vec![0, 1]);
    }

    #[test]
    fn classify_decoupled_pair() {
        let l = two_block_decoupled();
        let cls = classify_blocks(&l).unwrap();
        assert_eq!(cls.zero_blocks.len(), 2);
        assert!(cls.decaying_blocks.is_empty());
    }

    #[test]
    fn basis_irreducible_two_patch() {
        let l = ConnectivityMatrix::new(mat(&[&[-1.0, 2.0], &[1.0, -2.0]])).unwrap();
        let basis = build_basis(&l).unwrap();
        assert_eq!(basis.alpha0(), 1);
        assert_abs_diff_eq!(basis.q()[(0, 0)], 2.0 / 3.0, epsilon = 1e-11);
        assert_abs_diff_eq!(basis.q()[(1, 0)], 1.0 / 3.0, epsilon = 1e-11);
        assert_abs_diff_eq!(basis.p()[(0, 0)], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(basis.p()[(0, 1)], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn basis_chain_solves_stationarity() {
        let l = ConnectivityMatrix::new(mat(&[
            &[-1.0, 0.0, 0.0],
            &[1.0, -2.0, 0.0],
            &[0.0, 2.0, 0.0],
        ]))
        .unwrap();
        let basis = build_basis(&l).unwrap();
        assert_eq!(basis.alpha0(), 1);
        for (i, expect) in [(0usize, 0.0), (1, 0.0), (2, 1.0)] {
            assert_abs_diff_eq!(basis.q()[(i, 0)], expect, epsilon = 1e-12);
        }
        // stationarity gives p = (1, 1, 1)
        for i in 0..3 {
            assert_abs_diff_eq!(basis.p()[(0, i)], 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn basis_decoupled_pair() {
        let basis = build_basis(&two_block_decoupled()).unwrap();
        assert_eq!(basis.alpha0(), 2);
        let q = basis.q();
        assert_abs_diff_eq!(q[(0, 0)], 0.5, epsilon = 1e-11);
        assert_abs_diff_eq!(q[(1, 0)], 0.5, epsilon = 1e-11);
        assert_abs_diff_eq!(q[(2, 1)], 0.5, epsilon = 1e-11);
        assert_abs_diff_eq!(q[(3, 1)], 0.5, epsilon = 1e-11);
        let p = basis.p();
        assert_abs_diff_eq!(p[(0, 0)], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(p[(0, 1)], 1.0, epsilon = 1e-10);
        assert_eq!(p[(0, 2)], 0.0);
        assert_eq!(p[(1, 0)], 0.0);
    }

    #[test]
    fn aggregate_examples() {
        let l = ConnectivityMatrix::new(mat(&[&[-1.0, 2.0], &[1.0, -2.0]])).unwrap();
        let basis = build_basis(&l).unwrap();
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 5.0]));
        let agg = basis.aggregate(&m).unwrap();
        assert_abs_diff_eq!(agg[(0, 0)], (2.0 * 3.0 + 5.0) / 3.0, epsilon = 1e-10);

        let zero = Matrix::zeros(2, 2);
        assert_eq!(basis.aggregate(&zero).unwrap().amax(), 0.0);

        let basis4 = build_basis(&two_block_decoupled()).unwrap();
        let agg = basis4.aggregate(&Matrix::identity(4, 4)).unwrap();
        assert_abs_diff_eq!((agg - Matrix::identity(2, 2)).amax(), 0.0, epsilon = 1e-11);
    }

    #[test]
    fn aggregate_dimension_mismatch() {
        let l = ConnectivityMatrix::new(mat(&[&[-1.0, 2.0], &[1.0, -2.0]])).unwrap();
        let basis = build_basis(&l).unwrap();
        assert!(matches!(
            basis.aggregate(&Matrix::zeros(3, 3)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn extract_full_selection_is_identity() {
        let l = two_block_decoupled();
        let basis = build_basis(&l).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = random_cooperative(&mut rng, 4);
        let sel: Vec<usize> = basis.zero_blocks().to_vec();
        let sub = basis.extract_subproblem(&m, &sel).unwrap();
        assert_eq!(sub.connectivity.dim(), 4);
        let full = basis.transform(&m).unwrap();
        let again = sub.basis.transform(&sub.coefficient).unwrap();
        assert!((full - again).amax() < 1e-10);
    }

    #[test]
    fn extract_single_block_of_decoupled_pair() {
        let l = two_block_decoupled();
        let basis = build_basis(&l).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let m = random_cooperative(&mut rng, 4);
        let first = basis.zero_blocks()[0];
        let sub = basis.extract_subproblem(&m, &[first]).unwrap();
        assert_eq!(sub.patches, vec![0, 1]);
        let expect = mat(&[&[-1.0, 1.0], &[1.0, -1.0]]);
        assert_abs_diff_eq!((sub.connectivity.matrix() - expect).amax(), 0.0);
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(sub.coefficient[(r, c)], m[(r, c)]);
            }
        }
    }

    #[test]
    fn extract_unbalanced_subproblem() {
        // one decaying source feeding two separate zero patches; dropping one
        // of them unbalances the remaining columns but keeps the structure
        let a = mat(&[&[-2.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        let l = ConnectivityMatrix::new(a).unwrap();
        let basis = build_basis(&l).unwrap();
        assert_eq!(basis.alpha0(), 2);
        let m = Matrix::identity(3, 3);
        let zb = basis.zero_blocks()[0];
        let sub = basis.extract_subproblem(&m, &[zb]).unwrap();
        assert_eq!(sub.connectivity.dim(), 2);
        // the restricted basis still satisfies its identities
        assert!((sub.basis.p() * sub.connectivity.matrix()).amax() < 1e-12);
    }

    #[test]
    fn extract_rejects_non_zero_block() {
        let l = ConnectivityMatrix::new(mat(&[
            &[-1.0, 0.0, 0.0],
            &[1.0, -2.0, 0.0],
            &[0.0, 2.0, 0.0],
        ]))
        .unwrap();
        let basis = build_basis(&l).unwrap();
        let m = Matrix::zeros(3, 3);
        assert!(matches!(
            basis.extract_subproblem(&m, &[0]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn random_bases_satisfy_identities() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..60 {
            let l = random_h1(&mut rng, 8);
            let basis = build_basis(&l).unwrap();
            // multiplicity of the zero eigenvalue matches alpha0
            let zeros = matrix::eigenvalues(l.matrix())
                .unwrap()
                .iter()
                .filter(|z| z.norm() < 1e-7)
                .count();
            assert_eq!(zeros, basis.alpha0(), "alpha0 vs eigensolver multiplicity");
            // aggregation of a cooperative matrix stays cooperative
            let m = random_cooperative(&mut rng, l.dim());
            let agg = basis.aggregate(&m).unwrap();
            let mut clamped = agg.clone();
            clamped.iter_mut().for_each(|x| {
                if x.abs() < 1e-13 {
                    *x = 0.0;
                }
            });
            assert!(matrix::is_cooperative(&clamped));
        }
    }

    #[test]
    fn rescaled_bases_give_similar_aggregations() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..25 {
            let l = random_h1(&mut rng, 6);
            let basis = build_basis(&l).unwrap();
            let m = random_cooperative(&mut rng, l.dim());
            let a0 = basis.alpha0();
            // rescale q_l by c_l > 0 and p_l by 1/c_l: still a valid basis
            let scales: Vec<f64> = (0..a0).map(|_| rng.gen_range(0.2..5.0)).collect();
            let mut p2 = basis.p().clone();
            let mut q2 = basis.q().clone();
            for (k, &c) in scales.iter().enumerate() {
                for j in 0..l.dim() {
                    q2[(j, k)] *= c;
                    p2[(k, j)] /= c;
                }
            }
            let m1 = basis.transform(&m).unwrap();
            let m2 = &p2 * &m * &q2;
            let mut e1 = matrix::eigenvalues(&m1).unwrap();
            let mut e2 = matrix::eigenvalues(&m2).unwrap();
            e1.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
            e2.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
            for (z1, z2) in e1.iter().zip(e2.iter()) {
                assert!((z1 - z2).norm() < 1e-8, "spectra differ: {z1} vs {z2}");
            }
        }
    }
}
