//! Constraint energy minimizing multiscale basis functions and the
//! multiscale space they span.
//!
//! Each basis function `ψ_j^(i)` minimizes the DG energy subject to
//! `s(π ψ, φ_l^(k)) = δ_{ik} δ_{jl}` for the auxiliary functions of every
//! block in its patch (hard constraints), or minimizes the relaxed energy
//! `a(ψ, ψ) + s(πψ - φ_j, πψ - φ_j)` on the patch. Localized functions live
//! on an oversampling region with zero trace on the cut part of its boundary.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aux_spectral::AuxBasis;
use crate::dg_assembly::{AssembledForms, DGDofMap};
use crate::error::{CemError, Result};
use crate::grids::{oversample_region, MeshHierarchy, OversampleRegion};
use crate::linalg::{DenseCholesky, SaddleFactor, SparseMat};

/// Relative KKT residual required of every patch solve.
const PATCH_TOL: f64 = 1e-12;
const PATCH_REFINE: usize = 10;
/// Columns whose relative Gram pivot falls below this are reported as dependent.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisMethod {
    Global,
    Lagrange,
    Relaxed,
}

impl BasisMethod {
    pub fn name(self) -> &'static str {
        match self {
            BasisMethod::Global => "global",
            BasisMethod::Lagrange => "lagrange",
            BasisMethod::Relaxed => "relaxed",
        }
    }
}

/// Treatment of the part of the patch boundary interior to the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchBoundary {
    /// Every DOF of the patch blocks is free; the interior-penalty terms on
    /// the cut edges couple to the zero extension outside the patch.
    #[default]
    Free,
    /// Block copies of nodes on the cut boundary are fixed to zero.
    Clamped,
}

/// How the basis of a multiscale space is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisOptions {
    pub method: BasisMethod,
    /// Oversampling layers; ignored by the global construction.
    pub layers: usize,
    #[serde(default)]
    pub boundary: PatchBoundary,
}

impl BasisOptions {
    pub fn new(method: BasisMethod, layers: usize) -> Self {
        BasisOptions { method, layers, boundary: PatchBoundary::Free }
    }
}

impl std::fmt::Display for BasisMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Factored energy minimization problem on one patch.
///
/// Unknowns are ordered as the free patch DOFs (ascending global index)
/// followed by one multiplier per auxiliary function of every patch block.
pub struct PatchSystem {
    pub method: BasisMethod,
    /// Blocks of the patch, ascending.
    pub blocks: Vec<usize>,
    /// Every DOF of the patch blocks, ascending (block ranges concatenated).
    pub dofs: Vec<usize>,
    /// Position in `dofs` of each free unknown.
    free: Vec<usize>,
    /// First constraint index of each patch block.
    con_offsets: Vec<usize>,
    factor: SaddleFactor,
}

impl PatchSystem {
    pub fn new(
        mesh: &MeshHierarchy,
        forms: &AssembledForms,
        aux: &AuxBasis,
        dof: &DGDofMap,
        region: &OversampleRegion,
        method: BasisMethod,
        boundary: PatchBoundary,
    ) -> Result<Self> {
        let coarse = &mesh.coarse;
        let blocks = region.blocks.clone();
        let mut dofs = Vec::new();
        for &b in &blocks {
            dofs.extend(dof.block_range(b));
        }
        let mut free = Vec::with_capacity(dofs.len());
        let mut free_dofs = Vec::with_capacity(dofs.len());
        let mut slot = vec![usize::MAX; dofs.len()];
        for (p, &d) in dofs.iter().enumerate() {
            let (ix, iy) = mesh.fine.node_ij(dof.node_of[d]);
            if boundary == PatchBoundary::Free || !region.is_cut_node(coarse, ix, iy) {
                slot[p] = free.len();
                free.push(p);
                free_dofs.push(d);
            }
        }
        let n_free = free.len();
        let a_patch = forms.a.principal_submatrix(&free_dofs);

        let mut con_offsets = Vec::with_capacity(blocks.len() + 1);
        con_offsets.push(0);
        let mut triplets = Vec::with_capacity(a_patch.nnz() + 2 * dofs.len() * 4);
        for i in 0..n_free {
            let (cols, vals) = a_patch.row(i);
            triplets.extend(cols.iter().zip(vals).map(|(&c, &v)| (i, c, v)));
        }
        let mut min_w2 = f64::INFINITY;
        let mut pos = 0;
        for &b in &blocks {
            let ba = &aux.blocks[b];
            let n_b = dof.block_range(b).len();
            let base = *con_offsets.last().unwrap();
            for l in 0..ba.count {
                let c = n_free + base + l;
                let mut w2 = 0.0;
                for li in 0..n_b {
                    let s = slot[pos + li];
                    let w = ba.s_phi[(li, l)];
                    if s != usize::MAX && w != 0.0 {
                        triplets.push((s, c, w));
                        triplets.push((c, s, w));
                        w2 += w * w;
                    }
                }
                min_w2 = min_w2.min(w2);
                if method == BasisMethod::Relaxed {
                    triplets.push((c, c, -1.0));
                }
            }
            con_offsets.push(base + ba.count);
            pos += n_b;
        }
        let n_con = *con_offsets.last().unwrap();
        let n = n_free + n_con;
        let k = SparseMat::from_triplets(n, n, &triplets);
        let delta = if method == BasisMethod::Relaxed || n_con == 0 {
            0.0
        } else {
            let gersh = (0..n_free)
                .map(|i| a_patch.row(i).1.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max);
            1e-8 * min_w2 / gersh.max(f64::MIN_POSITIVE)
        };
        if method != BasisMethod::Relaxed && min_w2 == 0.0 {
            return Err(CemError::Rank(format!(
                "patch around block {} has a constraint with no free unknowns",
                region.center
            )));
        }
        let factor = SaddleFactor::new(&k, n_free, delta)?;
        Ok(PatchSystem { method, blocks, dofs, free, con_offsets, factor })
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn n_constraints(&self) -> usize {
        *self.con_offsets.last().unwrap()
    }

    /// Constraint index of auxiliary function `j` of `block`, if the block is in the patch.
    pub fn constraint_index(&self, block: usize, j: usize) -> Option<usize> {
        let p = self.blocks.binary_search(&block).ok()?;
        let c = self.con_offsets[p] + j;
        (c < self.con_offsets[p + 1]).then_some(c)
    }

    /// Solves with an arbitrary constraint-side right-hand side `g` (length
    /// `n_constraints`) and returns the values on `dofs` (zero on cut DOFs).
    pub fn solve_constraint_rhs(&self, g: &[f64]) -> Result<Vec<f64>> {
        assert_eq!(g.len(), self.n_constraints());
        let n_free = self.n_free();
        let mut rhs = vec![0.0; n_free + g.len()];
        rhs[n_free..].copy_from_slice(g);
        let x = self.factor.solve(&rhs, PATCH_TOL, PATCH_REFINE)?;
        let mut out = vec![0.0; self.dofs.len()];
        for (i, &p) in self.free.iter().enumerate() {
            out[p] = x[i];
        }
        Ok(out)
    }

    /// Basis function for auxiliary function `j` of `block`, on `dofs`.
    pub fn solve_basis(&self, block: usize, j: usize) -> Result<Vec<f64>> {
        let c = self.constraint_index(block, j).ok_or(CemError::Index { index: j, limit: 0 })?;
        let mut g = vec![0.0; self.n_constraints()];
        g[c] = 1.0;
        self.solve_constraint_rhs(&g)
    }
}

fn scatter(dofs: &[usize], values: &[f64], n_dof: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_dof];
    for (&d, &v) in dofs.iter().zip(values) {
        out[d] = v;
    }
    out
}

fn whole_domain(mesh: &MeshHierarchy, center: usize) -> Result<OversampleRegion> {
    oversample_region(&mesh.coarse, center, mesh.coarse.nx.max(mesh.coarse.ny))
}

/// Global basis function `ψ_j^(i)` as a full DG vector.
pub fn build_global_basis(
    mesh: &MeshHierarchy,
    forms: &AssembledForms,
    aux: &AuxBasis,
    dof: &DGDofMap,
    block: usize,
    j: usize,
) -> Result<Vec<f64>> {
    let region = whole_domain(mesh, block)?;
    let sys = PatchSystem::new(mesh, forms, aux, dof, &region, BasisMethod::Global, PatchBoundary::Free)?;
    Ok(scatter(&sys.dofs, &sys.solve_basis(block, j)?, dof.n_dof))
}

/// Localized basis function `ψ_{j,ms}^(i)` on `region`, extended by zero.
pub fn build_localized_basis(
    mesh: &MeshHierarchy,
    forms: &AssembledForms,
    aux: &AuxBasis,
    dof: &DGDofMap,
    region: &OversampleRegion,
    j: usize,
    boundary: PatchBoundary,
) -> Result<Vec<f64>> {
    let sys = PatchSystem::new(mesh, forms, aux, dof, region, BasisMethod::Lagrange, boundary)?;
    let v = sys.solve_basis(region.center, j).map_err(|e| patch_error(e, region, j))?;
    Ok(scatter(&sys.dofs, &v, dof.n_dof))
}

/// Relaxed basis function on `region`, extended by zero.
pub fn build_relaxed_basis(
    mesh: &MeshHierarchy,
    forms: &AssembledForms,
    aux: &AuxBasis,
    dof: &DGDofMap,
    region: &OversampleRegion,
    j: usize,
    boundary: PatchBoundary,
) -> Result<Vec<f64>> {
    let sys = PatchSystem::new(mesh, forms, aux, dof, region, BasisMethod::Relaxed, boundary)?;
    let v = sys.solve_basis(region.center, j)?;
    Ok(scatter(&sys.dofs, &v, dof.n_dof))
}

fn patch_error(e: CemError, region: &OversampleRegion, j: usize) -> CemError {
    match e {
        CemError::Rank(msg) => CemError::Rank(format!(
            "basis (block {}, j {}, layers {}): {msg}",
            region.center, j, region.layers
        )),
        other => other,
    }
}

/// All basis columns attached to one block: values on a union of whole
/// block DOF ranges, stored column-major.
#[derive(Debug, Clone)]
pub struct BasisGroup {
    pub center: usize,
    pub method: BasisMethod,
    /// Oversampling layers; `None` for the global construction.
    pub layers: Option<usize>,
    /// Blocks covered, ascending.
    pub blocks: Vec<usize>,
    /// Offset of each covered block's range inside `dofs`.
    pub block_starts: Vec<usize>,
    pub dofs: Vec<usize>,
    pub count: usize,
    pub values: Vec<f64>,
}

impl BasisGroup {
    /// Builds a group from explicit columns over the DOFs of `blocks`.
    pub fn from_columns(
        dof: &DGDofMap,
        center: usize,
        method: BasisMethod,
        layers: Option<usize>,
        blocks: Vec<usize>,
        columns: &[Vec<f64>],
    ) -> Self {
        assert!(blocks.windows(2).all(|w| w[0] < w[1]), "blocks must be ascending");
        let mut dofs = Vec::new();
        let mut block_starts = Vec::with_capacity(blocks.len());
        for &b in &blocks {
            block_starts.push(dofs.len());
            dofs.extend(dof.block_range(b));
        }
        let mut values = Vec::with_capacity(dofs.len() * columns.len());
        for c in columns {
            assert_eq!(c.len(), dofs.len());
            values.extend_from_slice(c);
        }
        BasisGroup { center, method, layers, blocks, block_starts, dofs, count: columns.len(), values }
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.dofs.len();
        &self.values[j * n..(j + 1) * n]
    }

    fn block_offset(&self, block: usize) -> Option<usize> {
        self.blocks.binary_search(&block).ok().map(|p| self.block_starts[p])
    }
}

/// Builds the basis columns of one block, factoring its patch system once.
pub fn build_group(
    mesh: &MeshHierarchy,
    forms: &AssembledForms,
    aux: &AuxBasis,
    dof: &DGDofMap,
    block: usize,
    opts: &BasisOptions,
) -> Result<BasisGroup> {
    let region = match opts.method {
        BasisMethod::Global => whole_domain(mesh, block)?,
        _ => oversample_region(&mesh.coarse, block, opts.layers)?,
    };
    let sys = PatchSystem::new(mesh, forms, aux, dof, &region, opts.method, opts.boundary)
        .map_err(|e| patch_error(e, &region, 0))?;
    group_from_system(&sys, aux, dof, &region, opts.method)
}

fn group_from_system(
    sys: &PatchSystem,
    aux: &AuxBasis,
    dof: &DGDofMap,
    region: &OversampleRegion,
    method: BasisMethod,
) -> Result<BasisGroup> {
    let block = region.center;
    let columns = (0..aux.count(block))
        .map(|j| sys.solve_basis(block, j).map_err(|e| patch_error(e, region, j)))
        .collect::<Result<Vec<_>>>()?;
    let layers = (method != BasisMethod::Global).then_some(region.layers);
    Ok(BasisGroup::from_columns(dof, block, method, layers, sys.blocks.clone(), &columns))
}

/// Per-column description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnMeta {
    pub block: usize,
    pub j: usize,
    pub method: BasisMethod,
    pub layers: Option<usize>,
}

/// The multiscale space: the columns of `R` grouped by block, with the
/// factored stiffness Gram matrix `Rᵀ A R`.
pub struct MultiscaleSpace {
    pub n_dof: usize,
    pub groups: Vec<BasisGroup>,
    /// First column index of each group.
    pub col_offsets: Vec<usize>,
    stiffness: DenseCholesky,
}

impl MultiscaleSpace {
    pub fn n_ms(&self) -> usize {
        *self.col_offsets.last().unwrap()
    }

    pub fn meta(&self, col: usize) -> ColumnMeta {
        let g = self.col_offsets.partition_point(|&o| o <= col) - 1;
        let gr = &self.groups[g];
        ColumnMeta { block: gr.center, j: col - self.col_offsets[g], method: gr.method, layers: gr.layers }
    }

    /// Column `col` of `R` as a full DG vector.
    pub fn column(&self, col: usize) -> Vec<f64> {
        let g = self.col_offsets.partition_point(|&o| o <= col) - 1;
        let gr = &self.groups[g];
        scatter(&gr.dofs, gr.column(col - self.col_offsets[g]), self.n_dof)
    }

    /// `R x`.
    pub fn prolong(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_ms());
        let mut out = vec![0.0; self.n_dof];
        for (g, gr) in self.groups.iter().enumerate() {
            for j in 0..gr.count {
                let c = x[self.col_offsets[g] + j];
                if c != 0.0 {
                    for (&d, &v) in gr.dofs.iter().zip(gr.column(j)) {
                        out[d] += c * v;
                    }
                }
            }
        }
        out
    }

    /// `Rᵀ v`.
    pub fn restrict(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n_dof);
        let mut out = Vec::with_capacity(self.n_ms());
        for gr in &self.groups {
            for j in 0..gr.count {
                out.push(gr.dofs.iter().zip(gr.column(j)).map(|(&d, &c)| c * v[d]).sum());
            }
        }
        out
    }

    /// Dense `Rᵀ M R`.
    pub fn gram(&self, m: &SparseMat, dof: &DGDofMap) -> Mat<f64> {
        gram_matrix(&self.groups, &self.col_offsets, m, dof)
    }

    /// Factor of `Rᵀ A R` for the forms the space was assembled with.
    pub fn stiffness_factor(&self) -> &DenseCholesky {
        &self.stiffness
    }
}

fn column_offsets(groups: &[BasisGroup]) -> Vec<usize> {
    let mut off = Vec::with_capacity(groups.len() + 1);
    off.push(0);
    for g in groups {
        off.push(off.last().unwrap() + g.count);
    }
    off
}

/// Dense `Rᵀ M R`, accumulated block by block of DOFs: for each block `b`,
/// `R[b, :]ᵀ (M R)[b, :]` restricted to the groups touching `b` or its
/// matrix neighbours.
fn gram_matrix(groups: &[BasisGroup], col_offsets: &[usize], m: &SparseMat, dof: &DGDofMap) -> Mat<f64> {
    let n_ms = *col_offsets.last().unwrap();
    let n_blocks = dof.n_blocks();
    let mut covering: Vec<Vec<usize>> = vec![Vec::new(); n_blocks];
    for (g, gr) in groups.iter().enumerate() {
        for &b in &gr.blocks {
            covering[b].push(g);
        }
    }
    let mut gram = Mat::<f64>::zeros(n_ms, n_ms);
    let mut touched = vec![false; groups.len()];
    for b in 0..n_blocks {
        let rows = dof.block_range(b);
        let nb = rows.len();
        if nb == 0 || covering[b].is_empty() {
            continue;
        }
        let mut near_blocks: Vec<usize> = rows
            .clone()
            .flat_map(|i| m.row(i).0.iter().map(|&k| dof.block_of[k]))
            .collect();
        near_blocks.sort_unstable();
        near_blocks.dedup();
        let mut near = Vec::new();
        for &nbk in &near_blocks {
            for &g in &covering[nbk] {
                if !touched[g] {
                    touched[g] = true;
                    near.push(g);
                }
            }
        }
        for &g in &near {
            touched[g] = false;
        }
        near.sort_unstable();

        let left: &[usize] = &covering[b];
        let n_left: usize = left.iter().map(|&g| groups[g].count).sum();
        let n_right: usize = near.iter().map(|&g| groups[g].count).sum();
        if n_left == 0 || n_right == 0 {
            continue;
        }
        let mut r_b = Mat::<f64>::zeros(nb, n_left);
        let mut c = 0;
        for &g in left {
            let gr = &groups[g];
            let off = gr.block_offset(b).unwrap();
            for j in 0..gr.count {
                let col = gr.column(j);
                for i in 0..nb {
                    r_b[(i, c)] = col[off + i];
                }
                c += 1;
            }
        }
        let mut z_b = Mat::<f64>::zeros(nb, n_right);
        let mut c = 0;
        for &g in &near {
            let gr = &groups[g];
            for (li, i) in rows.clone().enumerate() {
                let (cols, vals) = m.row(i);
                for (&k, &v) in cols.iter().zip(vals) {
                    let kb = dof.block_of[k];
                    if let Some(off) = gr.block_offset(kb) {
                        let p = off + (k - dof.block_range(kb).start);
                        for j in 0..gr.count {
                            z_b[(li, c + j)] += v * gr.values[j * gr.dofs.len() + p];
                        }
                    }
                }
            }
            c += gr.count;
        }
        let mut prod = Mat::<f64>::zeros(n_left, n_right);
        matmul(prod.as_mut(), Accum::Replace, r_b.transpose(), z_b.as_ref(), 1.0, Par::Seq);
        let left_cols: Vec<usize> = left
            .iter()
            .flat_map(|&g| col_offsets[g]..col_offsets[g] + groups[g].count)
            .collect();
        let right_cols: Vec<usize> = near
            .iter()
            .flat_map(|&g| col_offsets[g]..col_offsets[g] + groups[g].count)
            .collect();
        for (q, &cq) in right_cols.iter().enumerate() {
            for (p, &cp) in left_cols.iter().enumerate() {
                gram[(cp, cq)] += prod[(p, q)];
            }
        }
    }
    for i in 0..n_ms {
        for j in 0..i {
            let v = 0.5 * (gram[(i, j)] + gram[(j, i)]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    gram
}

/// Assembles the space from its groups and factors `Rᵀ A R`; fails with a
/// rank error naming the columns that are (nearly) dependent on earlier ones.
pub fn assemble_multiscale_space(
    groups: Vec<BasisGroup>,
    forms: &AssembledForms,
    dof: &DGDofMap,
) -> Result<MultiscaleSpace> {
    let col_offsets = column_offsets(&groups);
    let gram = gram_matrix(&groups, &col_offsets, &forms.a, dof);
    let describe = |cols: &[usize]| -> String {
        cols.iter()
            .take(10)
            .map(|&c| {
                let g = col_offsets.partition_point(|&o| o <= c) - 1;
                format!("column {c} (block {}, j {})", groups[g].center, c - col_offsets[g])
            })
            .collect::<Vec<_>>()
            .join(", ")
    };
    match DenseCholesky::new(gram) {
        Ok(f) => {
            let weak: Vec<usize> = (0..f.dim()).filter(|&p| f.relative_pivots()[p] < RANK_TOL).collect();
            if !weak.is_empty() {
                return Err(CemError::Rank(format!(
                    "multiscale space is rank deficient; nearly dependent: {}",
                    describe(&weak)
                )));
            }
            Ok(MultiscaleSpace { n_dof: dof.n_dof, groups, col_offsets, stiffness: f })
        }
        Err(p) => Err(CemError::Rank(format!(
            "multiscale space is rank deficient; dependent: {}",
            describe(&[p])
        ))),
    }
}

/// Builds every group with `method` (one factorization per block, or a single
/// shared one for the global construction) and assembles the space.
pub fn build_multiscale_space(
    mesh: &MeshHierarchy,
    forms: &AssembledForms,
    aux: &AuxBasis,
    dof: &DGDofMap,
    opts: &BasisOptions,
) -> Result<MultiscaleSpace> {
    let n_blocks = mesh.coarse.n_blocks();
    let method = opts.method;
    let groups = if method == BasisMethod::Global {
        let region = whole_domain(mesh, 0)?;
        let sys = PatchSystem::new(mesh, forms, aux, dof, &region, method, PatchBoundary::Free)?;
        (0..n_blocks)
            .into_par_iter()
            .map(|i| {
                let region = OversampleRegion { center: i, ..region.clone() };
                group_from_system(&sys, aux, dof, &region, method)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        (0..n_blocks)
            .into_par_iter()
            .map(|i| build_group(mesh, forms, aux, dof, i, opts))
            .collect::<Result<Vec<_>>>()?
    };
    assemble_multiscale_space(groups, forms, dof)
}
