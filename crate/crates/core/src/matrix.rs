//! Dense real matrix utilities: cooperativity and nonnegativity predicates,
//! spectral bound and radius, Frobenius normal form via strongly connected
//! components, and Perron eigenpairs of irreducible cooperative matrices.
//!
//! Irreducibility is decided structurally (graph reachability on the nonzero
//! off-diagonal pattern); an entry counts as zero iff it is exactly `0.0`.

use nalgebra::DMatrix;
use num_complex::Complex;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;

/// Iteration cap for Perron power iterations; exceeding it is a hard error.
pub const POWER_ITERATION_CAP: usize = 100_000;
const POWER_ITERATION_TOL: f64 = 1e-13;

pub(crate) fn check_square_finite(a: &Matrix) -> Result<()> {
    if a.nrows() == 0 || a.nrows() != a.ncols() {
        return Err(Error::InvalidMatrix(format!(
            "expected a nonempty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidMatrix("matrix has non-finite entries".into()));
    }
    Ok(())
}

/// True iff every off-diagonal entry is nonnegative (exact comparison).
pub fn is_cooperative(a: &Matrix) -> bool {
    let n = a.nrows();
    (0..n).all(|i| (0..n).all(|j| i == j || a[(i, j)] >= 0.0))
}

/// True iff every entry is nonnegative.
pub fn is_nonnegative(a: &Matrix) -> bool {
    a.iter().all(|&x| x >= 0.0)
}

/// All eigenvalues by a dense real Schur solve, sorted by real part then
/// imaginary part for deterministic reporting.
pub fn eigenvalues(a: &Matrix) -> Result<Vec<Complex<f64>>> {
    check_square_finite(a)?;
    let n = a.nrows();
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 0)
        .ok_or(Error::EigenConvergence { n })?;
    let mut out: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().copied().collect();
    out.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    Ok(out)
}

/// Spectral bound `s(A)`: the largest real part over eigenvalues.
pub fn spectral_bound(a: &Matrix) -> Result<f64> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Spectral radius `r(A)`: the largest eigenvalue modulus.
pub fn spectral_radius(a: &Matrix) -> Result<f64> {
    Ok(eigenvalues(a)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Frobenius normal form of a square matrix: a permutation bringing it to
/// block lower triangular shape with irreducible diagonal blocks, ordered
/// topologically (no nonzero entry above the block diagonal).
#[derive(Debug, Clone)]
pub struct BlockStructure {
    permutation: Vec<usize>,
    block_sizes: Vec<usize>,
    block_of: Vec<usize>,
    blocks: Vec<Vec<usize>>,
}

impl BlockStructure {
    /// `permutation()[new_index]` is the original index placed at `new_index`.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Block id of an original index.
    pub fn block_of(&self, original: usize) -> usize {
        self.block_of[original]
    }

    /// Original indices of block `b`, ascending.
    pub fn block(&self, b: usize) -> &[usize] {
        &self.blocks[b]
    }

    pub fn is_irreducible(&self) -> bool {
        self.blocks.len() == 1
    }

    pub fn dim(&self) -> usize {
        self.permutation.len()
    }

    /// Applies the permutation: `out[r][c] = a[perm[r]][perm[c]]`.
    pub fn permuted(&self, a: &Matrix) -> Matrix {
        let n = self.dim();
        Matrix::from_fn(n, n, |r, c| a[(self.permutation[r], self.permutation[c])])
    }
}

struct Tarjan<'g> {
    graph: &'g [Vec<usize>],
    index: usize,
    stack: Vec<usize>,
    on_stack: Vec<bool>,
    order: Vec<Option<usize>>,
    low: Vec<usize>,
    components: Vec<Vec<usize>>,
}

impl<'g> Tarjan<'g> {
    fn visit(&mut self, v: usize) {
        self.order[v] = Some(self.index);
        self.low[v] = self.index;
        self.index += 1;
        self.stack.push(v);
        self.on_stack[v] = true;

        for &w in &self.graph[v] {
            if self.order[w].is_none() {
                self.visit(w);
                self.low[v] = self.low[v].min(self.low[w]);
            } else if self.on_stack[w] {
                self.low[v] = self.low[v].min(self.order[w].unwrap());
            }
        }

        if self.low[v] == self.order[v].unwrap() {
            let mut comp = Vec::new();
            loop {
                let w = self.stack.pop().expect("tarjan stack underflow");
                self.on_stack[w] = false;
                comp.push(w);
                if w == v {
                    break;
                }
            }
            comp.sort_unstable();
            self.components.push(comp);
        }
    }
}

/// Strongly-connected-component decomposition of the digraph with an edge
/// `j -> i` iff `a[(i, j)] != 0` for `i != j`. An irreducible matrix yields
/// a single block and the identity permutation.
pub fn block_structure(a: &Matrix) -> Result<BlockStructure> {
    check_square_finite(a)?;
    let n = a.nrows();
    let mut graph = vec![Vec::new(); n];
    for j in 0..n {
        for i in 0..n {
            if i != j && a[(i, j)] != 0.0 {
                graph[j].push(i);
            }
        }
    }
    let mut tarjan = Tarjan {
        graph: &graph,
        index: 0,
        stack: Vec::new(),
        on_stack: vec![false; n],
        order: vec![None; n],
        low: vec![0; n],
        components: Vec::new(),
    };
    for v in 0..n {
        if tarjan.order[v].is_none() {
            tarjan.visit(v);
        }
    }
    // Deterministic topological order of the condensation: sources first
    // (block lower triangular under the j -> i convention), incomparable
    // blocks by smallest original index.
    let blocks = topological_blocks(tarjan.components, &graph, n);

    let mut permutation = Vec::with_capacity(n);
    let mut block_of = vec![0usize; n];
    let mut block_sizes = Vec::with_capacity(blocks.len());
    for (b, comp) in blocks.iter().enumerate() {
        for &v in comp {
            block_of[v] = b;
            permutation.push(v);
        }
        block_sizes.push(comp.len());
    }
    Ok(BlockStructure {
        permutation,
        block_sizes,
        block_of,
        blocks,
    })
}

fn topological_blocks(comps: Vec<Vec<usize>>, graph: &[Vec<usize>], n: usize) -> Vec<Vec<usize>> {
    let k = comps.len();
    let mut comp_of = vec![0usize; n];
    for (c, comp) in comps.iter().enumerate() {
        for &v in comp {
            comp_of[v] = c;
        }
    }
    let mut indegree = vec![0usize; k];
    let mut successors = vec![Vec::new(); k];
    for (j, outs) in graph.iter().enumerate() {
        for &i in outs {
            let (cj, ci) = (comp_of[j], comp_of[i]);
            if cj != ci {
                successors[cj].push(ci);
                indegree[ci] += 1;
            }
        }
    }
    // min-heap keyed by the smallest original index in the component
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    let mut ready: BinaryHeap<Reverse<(usize, usize)>> = (0..k)
        .filter(|&c| indegree[c] == 0)
        .map(|c| Reverse((comps[c][0], c)))
        .collect();
    let mut order = Vec::with_capacity(k);
    while let Some(Reverse((_, c))) = ready.pop() {
        order.push(c);
        for &s in &successors[c] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse((comps[s][0], s)));
            }
        }
    }
    debug_assert_eq!(order.len(), k);
    order.into_iter().map(|c| comps[c].clone()).collect()
}

/// Perron eigenpair of an irreducible cooperative matrix.
#[derive(Debug, Clone)]
pub struct PerronPair {
    /// The spectral bound `s(A)`.
    pub value: f64,
    /// Strictly positive right eigenvector, entries summing to one.
    pub right: Vector,
    /// Strictly positive left eigenvector, scaled so `left . right = 1`.
    pub left: Vector,
}

/// Perron eigenpair by power iteration on `A + cI` with
/// `c = 1 + max |diagonal|`, which is nonnegative and primitive for
/// irreducible cooperative `A`.
pub fn perron_pair(a: &Matrix) -> Result<PerronPair> {
    check_square_finite(a)?;
    if !is_cooperative(a) {
        return Err(Error::Precondition(
            "perron_pair requires a cooperative matrix".into(),
        ));
    }
    if !block_structure(a)?.is_irreducible() {
        return Err(Error::Precondition(
            "perron_pair requires an irreducible matrix".into(),
        ));
    }
    let n = a.nrows();
    let shift = 1.0 + (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let mut b = a.clone();
    for i in 0..n {
        b[(i, i)] += shift;
    }
    let right = power_iterate(&b)?;
    let left_raw = power_iterate(&b.transpose())?;
    let value = left_raw.dot(&(&b * &right)) / left_raw.dot(&right) - shift;
    let left = &left_raw / left_raw.dot(&right);
    Ok(PerronPair { value, right, left })
}

pub(crate) fn power_iterate(b: &Matrix) -> Result<Vector> {
    let n = b.nrows();
    let mut v = Vector::from_element(n, 1.0 / n as f64);
    let mut next = Vector::zeros(n);
    for _ in 0..POWER_ITERATION_CAP {
        b.mul_to(&v, &mut next);
        let sum: f64 = next.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::Inconsistency(
                "power iteration lost positivity; matrix is not irreducible nonnegative".into(),
            ));
        }
        next.unscale_mut(sum);
        let diff = v
            .iter()
            .zip(next.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        if diff < POWER_ITERATION_TOL {
            return Ok(v);
        }
    }
    Err(Error::PowerIterationCap {
        cap: POWER_ITERATION_CAP,
    })
}
