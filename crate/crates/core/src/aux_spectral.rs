//! Per-block spectral problems `a_i(φ, w) = λ s_i(φ, w)`, auxiliary spaces
//! and the block-wise s-orthogonal projection onto them.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dg_assembly::{AssembledForms, DGDofMap};
use crate::error::{CemError, Result};
use crate::linalg::{dense_generalized_eig_shifted, dot, DenseMat, SparseMat};

/// Shift of the inverted pencil; eigenvalues are dimensionless and the
/// selected ones are of order one.
pub const SPECTRAL_SHIFT: f64 = 1.0;

/// All eigenpairs of one block, ascending, vectors S-orthonormal.
#[derive(Debug, Clone)]
pub struct LocalEigen {
    pub block: usize,
    pub values: Vec<f64>,
    pub vectors: DenseMat,
}

fn block_submatrix(m: &SparseMat, range: std::ops::Range<usize>) -> DenseMat {
    let n = range.len();
    let mut d = DenseMat::zeros(n, n);
    for (li, i) in range.clone().enumerate() {
        let (cols, vals) = m.row(i);
        for (c, v) in cols.iter().zip(vals) {
            if range.contains(c) {
                d[(li, c - range.start)] += v;
            }
        }
    }
    d
}

/// Block stiffness `A_i` (κ-weighted, no edge terms) and κ̃-mass `S_i`.
pub fn local_matrices(block: usize, forms: &AssembledForms, dof: &DGDofMap) -> (DenseMat, DenseMat) {
    let range = dof.block_range(block);
    (block_submatrix(&forms.volume, range.clone()), block_submatrix(&forms.s, range))
}

pub fn solve_local_spectral(block: usize, forms: &AssembledForms, dof: &DGDofMap) -> Result<LocalEigen> {
    let (a, s) = local_matrices(block, forms, dof);
    let eig = dense_generalized_eig_shifted(&a, &s, SPECTRAL_SHIFT).map_err(|e| match e {
        CemError::Definiteness(msg) => {
            CemError::Definiteness(format!("block {block}: κ̃-mass matrix is singular ({msg})"))
        }
        other => other,
    })?;
    Ok(LocalEigen { block, values: eig.values, vectors: eig.vectors })
}

pub fn solve_all_local(forms: &AssembledForms, dof: &DGDofMap) -> Result<Vec<LocalEigen>> {
    (0..dof.n_blocks()).into_par_iter().map(|b| solve_local_spectral(b, forms, dof)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum Selection {
    /// The same number of functions in every block.
    Fixed(usize),
    /// Every eigenvalue strictly below the threshold.
    Threshold(f64),
}

/// Selected auxiliary functions of one block.
#[derive(Debug, Clone)]
pub struct BlockAux {
    pub block: usize,
    pub count: usize,
    /// First `count + 1` eigenvalues.
    pub values: Vec<f64>,
    /// `n_local x count`, columns S-orthonormal.
    pub phi: DenseMat,
    /// `S_i φ`, used for the projection coefficients and the constraints.
    pub s_phi: DenseMat,
}

#[derive(Debug, Clone)]
pub struct AuxBasis {
    pub blocks: Vec<BlockAux>,
    /// `min_i λ_{L_i + 1}`.
    pub lambda: f64,
    /// Index of the first auxiliary function of each block in the global numbering.
    pub offsets: Vec<usize>,
}

impl AuxBasis {
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn count(&self, block: usize) -> usize {
        self.blocks[block].count
    }
}

pub fn build_aux_space(
    selection: Selection,
    eigs: &[LocalEigen],
    forms: &AssembledForms,
    dof: &DGDofMap,
) -> Result<AuxBasis> {
    let mut blocks = Vec::with_capacity(eigs.len());
    let mut offsets = vec![0];
    let mut lambda = f64::INFINITY;
    for e in eigs {
        let n = e.values.len();
        let count = match selection {
            Selection::Fixed(l) => l,
            Selection::Threshold(t) => e.values.iter().take_while(|&&v| v < t).count(),
        };
        if count >= n {
            return Err(CemError::Selection(format!(
                "block {} has {n} local unknowns; cannot select {count} functions and keep one more eigenvalue",
                e.block
            )));
        }
        let phi = DenseMat::from_fn(n, count, |i, j| e.vectors[(i, j)]);
        let range = dof.block_range(e.block);
        let mut s_phi = DenseMat::zeros(n, count);
        for j in 0..count {
            let mut full = vec![0.0; n];
            for (li, i) in range.clone().enumerate() {
                let (cols, vals) = forms.s.row(i);
                full[li] = cols
                    .iter()
                    .zip(vals)
                    .filter(|(c, _)| range.contains(c))
                    .map(|(c, v)| v * phi[(c - range.start, j)])
                    .sum();
            }
            for i in 0..n {
                s_phi[(i, j)] = full[i];
            }
        }
        lambda = lambda.min(e.values[count]);
        offsets.push(offsets.last().unwrap() + count);
        blocks.push(BlockAux { block: e.block, count, values: e.values[..=count].to_vec(), phi, s_phi });
    }
    Ok(AuxBasis { blocks, lambda, offsets })
}

/// Projection coefficients `c_j = s_i(v, φ_j)` per block and the lifted
/// vector `Σ c_j φ_j`.
pub fn apply_pi(v: &[f64], aux: &AuxBasis, dof: &DGDofMap) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut coeffs = Vec::with_capacity(aux.blocks.len());
    let mut lifted = vec![0.0; v.len()];
    for b in &aux.blocks {
        let range = dof.block_range(b.block);
        let vi = &v[range.clone()];
        let c: Vec<f64> = (0..b.count).map(|j| dot(&b.s_phi.col(j), vi)).collect();
        for (j, cj) in c.iter().enumerate() {
            for (li, i) in range.clone().enumerate() {
                lifted[i] += cj * b.phi[(li, j)];
            }
        }
        coeffs.push(c);
    }
    (coeffs, lifted)
}

/// CSV dump `block,j,lambda` of every computed eigenvalue.
pub fn write_eigenvalues_csv(path: &Path, eigs: &[LocalEigen]) -> Result<()> {
    let mut out = String::from("block,j,lambda\n");
    for e in eigs {
        for (j, v) in e.values.iter().enumerate() {
            out.push_str(&format!("{},{},{:.17e}\n", e.block, j + 1, v));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| CemError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| CemError::io(path, e))
}
