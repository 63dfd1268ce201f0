//! Outer-product representations of second-derivative blocks.
//!
//! A [`FactoredBlock`] is the mixed derivative between two matrix-shaped
//! parameter groups, `X` of shape `R1×R2` (rows) and `Y` of shape `C1×C2`
//! (columns). Densified, row index `(r1, r2)` maps to `r1·R2 + r2` and column
//! index `(c1, c2)` to `c1·C2 + c2`, matching the row-major flattening of the
//! parameters themselves.

use crate::error::{shape_err, Result};
use crate::linalg::{dot, Mat};

/// One summand of a block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockTerm {
    /// `a[r1,c1]·x[r2]·y[c2]`, `a: R1×C1`.
    Kron { a: Mat, x: Vec<f64>, y: Vec<f64> },
    /// `a[r1]·m[r2,c1]·y[c2]`, `m: R2×C1`.
    Cross { a: Vec<f64>, m: Mat, y: Vec<f64> },
    /// `a[c1]·m[c2,r1]·x[r2]`, `m: C2×R1`.
    CrossT { a: Vec<f64>, m: Mat, x: Vec<f64> },
}

impl BlockTerm {
    fn shape(&self) -> (usize, usize, usize, usize) {
        match self {
            BlockTerm::Kron { a, x, y } => (a.rows(), x.len(), a.cols(), y.len()),
            BlockTerm::Cross { a, m, y } => (a.len(), m.rows(), m.cols(), y.len()),
            BlockTerm::CrossT { a, m, x } => (m.cols(), x.len(), a.len(), m.rows()),
        }
    }

    fn entry(&self, r1: usize, r2: usize, c1: usize, c2: usize) -> f64 {
        match self {
            BlockTerm::Kron { a, x, y } => a[(r1, c1)] * x[r2] * y[c2],
            BlockTerm::Cross { a, m, y } => a[r1] * m[(r2, c1)] * y[c2],
            BlockTerm::CrossT { a, m, x } => a[c1] * m[(c2, r1)] * x[r2],
        }
    }

    /// Contract with a column-group matrix `φ: C1×C2`, giving `R1×R2`.
    fn apply(&self, phi: &Mat) -> Mat {
        match self {
            BlockTerm::Kron { a, x, y } => Mat::outer(&a.matvec(&phi.matvec(y)), x),
            BlockTerm::Cross { a, m, y } => Mat::outer(a, &m.matvec(&phi.matvec(y))),
            BlockTerm::CrossT { a, m, x } => Mat::outer(&m.tmatvec(&phi.tmatvec(a)), x),
        }
    }

    fn bilinear(&self, psi: &Mat, phi: &Mat) -> f64 {
        match self {
            BlockTerm::Kron { a, x, y } => dot(&psi.matvec(x), &a.matvec(&phi.matvec(y))),
            BlockTerm::Cross { a, m, y } => dot(&psi.tmatvec(a), &m.matvec(&phi.matvec(y))),
            BlockTerm::CrossT { a, m, x } => dot(&psi.matvec(x), &m.tmatvec(&phi.tmatvec(a))),
        }
    }

    fn transpose(&self) -> BlockTerm {
        match self.clone() {
            BlockTerm::Kron { a, x, y } => BlockTerm::Kron {
                a: a.transpose(),
                x: y,
                y: x,
            },
            BlockTerm::Cross { a, m, y } => BlockTerm::CrossT { a, m, x: y },
            BlockTerm::CrossT { a, m, x } => BlockTerm::Cross { a, m, y: x },
        }
    }

    /// Scalars held by this term.
    pub fn scalar_count(&self) -> usize {
        match self {
            BlockTerm::Kron { a, x, y } => a.len() + x.len() + y.len(),
            BlockTerm::Cross { a, m, y } => a.len() + m.len() + y.len(),
            BlockTerm::CrossT { a, m, x } => a.len() + m.len() + x.len(),
        }
    }
}

/// Sum of [`BlockTerm`]s with fixed row and column group shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredBlock {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub terms: Vec<BlockTerm>,
}

impl FactoredBlock {
    pub fn zero(rows: (usize, usize), cols: (usize, usize)) -> Self {
        FactoredBlock {
            rows,
            cols,
            terms: Vec::new(),
        }
    }

    /// Appends a term after checking its shape against the block.
    pub fn push(&mut self, term: BlockTerm) -> Result<()> {
        let (r1, r2, c1, c2) = term.shape();
        if (r1, r2) != self.rows || (c1, c2) != self.cols {
            return shape_err(format!(
                "term {r1}x{r2} -> {c1}x{c2} does not fit block {:?} -> {:?}",
                self.rows, self.cols
            ));
        }
        self.terms.push(term);
        Ok(())
    }

    pub(crate) fn with(mut self, term: BlockTerm) -> Self {
        self.push(term).expect("term shape fits block");
        self
    }

    pub fn entry(&self, r1: usize, r2: usize, c1: usize, c2: usize) -> f64 {
        self.terms.iter().map(|t| t.entry(r1, r2, c1, c2)).sum()
    }

    /// Dense `(R1·R2) × (C1·C2)` matrix. Debug/test path.
    pub fn densify(&self) -> Mat {
        let mut out = Mat::zeros(self.rows.0 * self.rows.1, self.cols.0 * self.cols.1);
        self.densify_into(&mut out, 0, 0);
        out
    }

    /// Adds the dense block into `out` at offset `(row0, col0)`.
    pub fn densify_into(&self, out: &mut Mat, row0: usize, col0: usize) {
        let (r1n, r2n) = self.rows;
        let (c1n, c2n) = self.cols;
        for t in &self.terms {
            for r1 in 0..r1n {
                for r2 in 0..r2n {
                    let i = row0 + r1 * r2n + r2;
                    for c1 in 0..c1n {
                        for c2 in 0..c2n {
                            out[(i, col0 + c1 * c2n + c2)] += t.entry(r1, r2, c1, c2);
                        }
                    }
                }
            }
        }
    }

    /// Block times a column-group direction `φ: C1×C2`.
    pub fn apply(&self, phi: &Mat) -> Result<Mat> {
        if phi.shape() != self.cols {
            return shape_err(format!("apply: {:?} vs block columns {:?}", phi.shape(), self.cols));
        }
        let mut out = Mat::zeros(self.rows.0, self.rows.1);
        for t in &self.terms {
            out.add_assign_scaled(&t.apply(phi), 1.0);
        }
        Ok(out)
    }

    /// `ψᵀ·B·φ` with `ψ: R1×R2`, `φ: C1×C2`.
    pub fn bilinear(&self, psi: &Mat, phi: &Mat) -> Result<f64> {
        if psi.shape() != self.rows || phi.shape() != self.cols {
            return shape_err("bilinear: direction shapes do not match block");
        }
        Ok(self.terms.iter().map(|t| t.bilinear(psi, phi)).sum())
    }

    pub fn transpose(&self) -> FactoredBlock {
        FactoredBlock {
            rows: self.cols,
            cols: self.rows,
            terms: self.terms.iter().map(BlockTerm::transpose).collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.terms.iter().map(BlockTerm::scalar_count).sum()
    }
}

/// One summand of a [`Factored4`].
#[derive(Debug, Clone, PartialEq)]
pub enum F4Term {
    /// `Σ_b left[j,b]·weight[b]·right[b,m]·side[b,s]·vec[t]`
    Core {
        left: Mat,
        weight: Vec<f64>,
        right: Mat,
        side: Mat,
        vec: Vec<f64>,
    },
    /// `a[j,s]·b[t,m]`
    Pair { a: Mat, b: Mat },
}

/// Derivative of a `J×M` matrix `X` with respect to an `S×T` weight matrix,
/// `∂X[j,m]/∂W[s,t]`, kept as a sum of factored terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Factored4 {
    pub dims: (usize, usize, usize, usize),
    pub terms: Vec<F4Term>,
}

impl Factored4 {
    pub fn zero(dims: (usize, usize, usize, usize)) -> Self {
        Factored4 {
            dims,
            terms: Vec::new(),
        }
    }

    pub fn push(&mut self, term: F4Term) -> Result<()> {
        let (j, m, s, t) = self.dims;
        let ok = match &term {
            F4Term::Core {
                left,
                weight,
                right,
                side,
                vec,
            } => {
                let b = weight.len();
                left.shape() == (j, b)
                    && right.shape() == (b, m)
                    && side.shape() == (b, s)
                    && vec.len() == t
            }
            F4Term::Pair { a, b } => a.shape() == (j, s) && b.shape() == (t, m),
        };
        if !ok {
            return shape_err(format!("term does not fit 4-index shape {:?}", self.dims));
        }
        self.terms.push(term);
        Ok(())
    }

    /// Dense `(J·M) × (S·T)`. Debug/test path.
    pub fn densify(&self) -> Mat {
        let (jn, mn, sn, tn) = self.dims;
        let mut out = Mat::zeros(jn * mn, sn * tn);
        for term in &self.terms {
            match term {
                F4Term::Core {
                    left,
                    weight,
                    right,
                    side,
                    vec,
                } => {
                    for (b, &lam) in weight.iter().enumerate() {
                        if lam == 0.0 {
                            continue;
                        }
                        for j in 0..jn {
                            let lj = left[(j, b)] * lam;
                            for m in 0..mn {
                                let ljm = lj * right[(b, m)];
                                for s in 0..sn {
                                    let ljms = ljm * side[(b, s)];
                                    for t in 0..tn {
                                        out[(j * mn + m, s * tn + t)] += ljms * vec[t];
                                    }
                                }
                            }
                        }
                    }
                }
                F4Term::Pair { a, b } => {
                    for j in 0..jn {
                        for m in 0..mn {
                            for s in 0..sn {
                                for t in 0..tn {
                                    out[(j * mn + m, s * tn + t)] += a[(j, s)] * b[(t, m)];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// `Σ_{j,m} X̄[j,m]·∂X[j,m]/∂W`, an `S×T` matrix.
    pub fn contract_matrix(&self, xbar: &Mat) -> Result<Mat> {
        let (jn, mn, sn, tn) = self.dims;
        if xbar.shape() != (jn, mn) {
            return shape_err(format!("contract_matrix: {:?} vs ({jn}, {mn})", xbar.shape()));
        }
        let mut out = Mat::zeros(sn, tn);
        for term in &self.terms {
            match term {
                F4Term::Core {
                    left,
                    weight,
                    right,
                    side,
                    vec,
                } => {
                    // c_b = λ_b (Lᵀ X̄ Rᵀ)_bb
                    let lx = left.transpose().mul(xbar);
                    let c: Vec<f64> = weight
                        .iter()
                        .enumerate()
                        .map(|(b, &lam)| lam * dot(lx.row(b), right.row(b)))
                        .collect();
                    out.add_assign_scaled(&Mat::outer(&side.tmatvec(&c), vec), 1.0);
                }
                F4Term::Pair { a, b } => {
                    out.add_assign_scaled(&a.transpose().mul(xbar).mul(&b.transpose()), 1.0);
                }
            }
        }
        Ok(out)
    }

    /// Contracts the `j` index with `x` and attaches a trailing vector `right`
    /// on the row side, giving the block with rows `(m, r)` and columns
    /// `(s, t)`:  `Σ_j x[j]·∂X[j,m]/∂W[s,t] · right[r]`.
    pub fn contract_rows(&self, x: &[f64], right: &[f64]) -> Result<FactoredBlock> {
        let (jn, mn, sn, tn) = self.dims;
        if x.len() != jn {
            return shape_err(format!("contract_rows: x has {} entries, want {jn}", x.len()));
        }
        let mut block = FactoredBlock::zero((mn, right.len()), (sn, tn));
        for term in &self.terms {
            match term {
                F4Term::Core {
                    left,
                    weight,
                    right: r,
                    side,
                    vec,
                } => {
                    let c: Vec<f64> = left.tmatvec(x).iter().zip(weight).map(|(a, b)| a * b).collect();
                    block.push(BlockTerm::Kron {
                        a: r.transpose().mul(&side.scale_rows(&c)),
                        x: right.to_vec(),
                        y: vec.clone(),
                    })?;
                }
                F4Term::Pair { a, b } => block.push(BlockTerm::CrossT {
                    a: a.tmatvec(x),
                    m: b.clone(),
                    x: right.to_vec(),
                })?,
            }
        }
        Ok(block)
    }
}
