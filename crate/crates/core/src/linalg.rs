use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use faer::{Conj, MatMut};

use crate::error::{Error, Result};

/// Sparse LU factorization of a square system assembled from triplets.
/// Duplicate entries are summed.
pub(crate) struct SparseLu {
    n: usize,
    lu: Lu<usize, f64>,
}

impl SparseLu {
    pub fn solve(&self, rhs: &mut [f64]) -> Result<()> {
        self.lu
            .solve_in_place_with_conj(Conj::No, MatMut::from_column_major_slice_mut(rhs, self.n, 1));
        check(rhs)
    }

    pub fn solve_transpose(&self, rhs: &mut [f64]) -> Result<()> {
        self.lu.solve_transpose_in_place_with_conj(
            Conj::No,
            MatMut::from_column_major_slice_mut(rhs, self.n, 1),
        );
        check(rhs)
    }
}

/// Sparsity analysis shared by systems assembled with the same entry
/// positions in the same order.
#[derive(Clone)]
pub(crate) struct LuPattern {
    n: usize,
    positions: Vec<(usize, usize)>,
    structure: SymbolicSparseColMat<usize>,
    argsort: Argsort<usize>,
    symbolic: SymbolicLu<usize>,
}

impl LuPattern {
    pub fn new(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let pairs: Vec<Pair<usize, usize>> = entries.iter().map(|&(row, col, _)| Pair { row, col }).collect();
        let (structure, argsort) =
            SymbolicSparseColMat::try_new_from_indices(n, n, &pairs).map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
        let symbolic = SymbolicLu::try_new(structure.as_ref()).map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
        Ok(LuPattern {
            n,
            positions: entries.iter().map(|&(i, j, _)| (i, j)).collect(),
            structure,
            argsort,
            symbolic,
        })
    }

    pub fn matches(&self, entries: &[(usize, usize, f64)]) -> bool {
        self.positions.len() == entries.len() && self.positions.iter().zip(entries).all(|(p, e)| *p == (e.0, e.1))
    }

    /// Numeric factorization of entries laid out as in [`LuPattern::new`].
    pub fn factor(&self, entries: &[(usize, usize, f64)]) -> Result<SparseLu> {
        let values: Vec<f64> = entries.iter().map(|e| e.2).collect();
        let mat = SparseColMat::new_from_argsort(self.structure.clone(), &self.argsort, &values)
            .map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
        let lu = Lu::try_new_with_symbolic(self.symbolic.clone(), mat.as_ref())
            .map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
        Ok(SparseLu { n: self.n, lu })
    }
}

fn check(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::LinearSolve("singular system".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_and_transposes() {
        // [[2, 1, 0], [0, 3, 1], [1, 0, 4]] with a duplicated entry
        let entries = [
            (0, 0, 1.0),
            (0, 0, 1.0),
            (0, 1, 1.0),
            (1, 1, 3.0),
            (1, 2, 1.0),
            (2, 0, 1.0),
            (2, 2, 4.0),
        ];
        let lu = LuPattern::new(3, &entries).unwrap().factor(&entries).unwrap();
        let x = [1.0, -2.0, 0.5];
        let mut b = vec![2.0 * x[0] + x[1], 3.0 * x[1] + x[2], x[0] + 4.0 * x[2]];
        lu.solve(&mut b).unwrap();
        for (a, e) in b.iter().zip(&x) {
            assert!((a - e).abs() < 1e-14);
        }
        let mut c = vec![2.0 * x[0] + x[2], x[0] + 3.0 * x[1], x[1] + 4.0 * x[2]];
        lu.solve_transpose(&mut c).unwrap();
        for (a, e) in c.iter().zip(&x) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn pattern_refactors_new_values() {
        let first = [(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)];
        let second = [(0, 0, 0.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 5.0)];
        let pattern = LuPattern::new(2, &first).unwrap();
        assert!(pattern.matches(&second));
        assert!(!pattern.matches(&first[..3]));
        let mut b = vec![1.0, 7.0];
        pattern.factor(&second).unwrap().solve(&mut b).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-14 && (b[1] - 1.0).abs() < 1e-14);
    }
}
