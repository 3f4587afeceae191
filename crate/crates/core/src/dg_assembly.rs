//! Block-discontinuous Q1 space, interior penalty assembly, load vectors,
//! norms and the fine-scale solve.

use std::ops::Range;

use rayon::prelude::*;

use crate::element::{grad_ref, mass, shape, CELL_GAUSS, GAUSS2, STIFFNESS};
use crate::error::{CemError, Result};
use crate::grids::{CoarseEdge, EdgeAdjacency, MeshHierarchy};
use crate::linalg::{dot, SparseMat, SpdFactor};
use crate::msfem_pou::SWeight;
use crate::perm_field::{EdgeKappaBar, PermField};

pub const DEFAULT_GAMMA: f64 = 4.0;

const NONE: usize = usize::MAX;

/// Degree-of-freedom map of the DG space: every block owns a copy of its
/// closure nodes, numbered contiguously block after block (row-major inside
/// a block). Nodes on the domain boundary are dropped when Dirichlet
/// elimination is on.
#[derive(Debug, Clone)]
pub struct DGDofMap {
    pub ratio: usize,
    pub dirichlet: bool,
    pub n_dof: usize,
    offsets: Vec<usize>,
    /// Per block, `(r + 1)^2` entries: global DOF or `NONE`.
    local: Vec<Vec<usize>>,
    /// Fine node of each DOF.
    pub node_of: Vec<usize>,
    /// Block of each DOF.
    pub block_of: Vec<usize>,
}

impl DGDofMap {
    #[inline]
    pub fn dof(&self, block: usize, lx: usize, ly: usize) -> Option<usize> {
        let d = self.local[block][ly * (self.ratio + 1) + lx];
        (d != NONE).then_some(d)
    }

    #[inline]
    fn dof_raw(&self, block: usize, local: usize) -> usize {
        self.local[block][local]
    }

    pub fn block_range(&self, block: usize) -> Range<usize> {
        self.offsets[block]..self.offsets[block + 1]
    }

    pub fn n_blocks(&self) -> usize {
        self.offsets.len() - 1
    }

    /// DOF of the block copy of a fine node, if the node lies in the block closure.
    pub fn dof_of_node(&self, mesh: &MeshHierarchy, block: usize, node: usize) -> Option<usize> {
        let (ix, iy) = mesh.fine.node_ij(node);
        let (bx, by) = mesh.coarse.block_ij(block);
        let r = self.ratio;
        if ix < bx * r || iy < by * r || ix > (bx + 1) * r || iy > (by + 1) * r {
            return None;
        }
        self.dof(block, ix - bx * r, iy - by * r)
    }

    /// Embeds nodal values of a globally continuous function.
    pub fn embed_continuous(&self, nodal: &[f64]) -> Vec<f64> {
        self.node_of.iter().map(|&n| nodal[n]).collect()
    }

    /// Nodal values obtained by averaging the duplicated copies; eliminated
    /// boundary nodes read zero.
    pub fn average_to_nodes(&self, v: &[f64], n_nodes: usize) -> Vec<f64> {
        let mut sum = vec![0.0; n_nodes];
        let mut cnt = vec![0u32; n_nodes];
        for (d, &node) in self.node_of.iter().enumerate() {
            sum[node] += v[d];
            cnt[node] += 1;
        }
        sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
    }
}

pub fn build_dof_map(mesh: &MeshHierarchy) -> DGDofMap {
    build_dof_map_with(mesh, true)
}

pub fn build_dof_map_with(mesh: &MeshHierarchy, dirichlet: bool) -> DGDofMap {
    let coarse = &mesh.coarse;
    let r = coarse.ratio;
    let mut offsets = Vec::with_capacity(coarse.n_blocks() + 1);
    let mut local = Vec::with_capacity(coarse.n_blocks());
    let mut node_of = Vec::new();
    let mut block_of = Vec::new();
    offsets.push(0);
    for block in 0..coarse.n_blocks() {
        let mut map = vec![NONE; (r + 1) * (r + 1)];
        for ly in 0..=r {
            for lx in 0..=r {
                let node = coarse.block_node(block, lx, ly);
                if dirichlet && mesh.fine.is_boundary_node(node) {
                    continue;
                }
                map[ly * (r + 1) + lx] = node_of.len();
                node_of.push(node);
                block_of.push(block);
            }
        }
        local.push(map);
        offsets.push(node_of.len());
    }
    DGDofMap { ratio: r, dirichlet, n_dof: node_of.len(), offsets, local, node_of, block_of }
}

/// Assembled operators of the DG space.
#[derive(Debug, Clone)]
pub struct AssembledForms {
    /// Full interior penalty form.
    pub a: SparseMat,
    /// Block-wise `Σ_K ∫ κ ∇v·∇w` (no edge terms).
    pub volume: SparseMat,
    /// `γ/h Σ_E ∫ κ̄ [[v]][[w]]`.
    pub penalty: SparseMat,
    /// `∫ κ̃ v w`.
    pub s: SparseMat,
    /// `∫ v w`.
    pub m: SparseMat,
    pub gamma: f64,
}

type Triplets = Vec<(usize, usize, f64)>;

pub fn assemble_forms(
    mesh: &MeshHierarchy,
    field: &PermField,
    kbar: &EdgeKappaBar,
    sweight: &SWeight,
    dof: &DGDofMap,
    gamma: f64,
) -> Result<AssembledForms> {
    assemble_forms_with_edges(mesh, &mesh.coarse.edges, field, kbar, sweight, dof, gamma)
}

/// As [`assemble_forms`] but with an explicit edge list (used to check that
/// the result does not depend on edge orientation).
pub fn assemble_forms_with_edges(
    mesh: &MeshHierarchy,
    edges: &[CoarseEdge],
    field: &PermField,
    kbar: &EdgeKappaBar,
    sweight: &SWeight,
    dof: &DGDofMap,
    gamma: f64,
) -> Result<AssembledForms> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(CemError::Config(format!("penalty parameter gamma = {gamma} must be positive")));
    }
    field.check_grid(&mesh.fine)?;
    let coarse = &mesh.coarse;
    let r = coarse.ratio;
    let np = r + 1;
    let h = mesh.fine.h;
    let me = mass(h);

    let per_block: Vec<(Triplets, Triplets, Triplets)> = (0..coarse.n_blocks())
        .into_par_iter()
        .map(|block| {
            let (mut vol, mut sm, mut mm) = (Vec::new(), Vec::new(), Vec::new());
            for (k, &cell) in coarse.block_cells(block).iter().enumerate() {
                let (cx, cy) = (k % r, k / r);
                let loc = [cy * np + cx, cy * np + cx + 1, (cy + 1) * np + cx, (cy + 1) * np + cx + 1];
                let d = loc.map(|l| dof.dof_raw(block, l));
                let kap = field.at(cell);
                let kt = &sweight.values[cell];
                let mut se = [[0.0; 4]; 4];
                for (g, &(xi, eta)) in CELL_GAUSS.iter().enumerate() {
                    let n = shape(xi, eta);
                    let w = 0.25 * h * h * kt[g];
                    for a in 0..4 {
                        for b in 0..4 {
                            se[a][b] += w * n[a] * n[b];
                        }
                    }
                }
                for a in 0..4 {
                    if d[a] == NONE {
                        continue;
                    }
                    for b in 0..4 {
                        if d[b] == NONE {
                            continue;
                        }
                        vol.push((d[a], d[b], kap * STIFFNESS[a][b]));
                        sm.push((d[a], d[b], se[a][b]));
                        mm.push((d[a], d[b], me[a][b]));
                    }
                }
            }
            (vol, sm, mm)
        })
        .collect();

    let per_edge: Vec<(Triplets, Triplets)> = edges
        .par_iter()
        .map(|edge| edge_terms(mesh, edge, field, kbar.values[edge.id], dof, gamma))
        .collect();

    let n = dof.n_dof;
    let mut vol = Vec::new();
    let mut sm = Vec::new();
    let mut mm = Vec::new();
    for (v, s, m) in per_block {
        vol.extend(v);
        sm.extend(s);
        mm.extend(m);
    }
    let mut flux = Vec::new();
    let mut pen = Vec::new();
    for (f, p) in per_edge {
        flux.extend(f);
        pen.extend(p);
    }
    let volume = SparseMat::from_triplets(n, n, &vol);
    let penalty = SparseMat::from_triplets(n, n, &pen);
    let mut all = vol;
    all.extend(flux);
    all.extend(pen.iter().copied());
    let a = SparseMat::from_triplets(n, n, &all);
    Ok(AssembledForms {
        a,
        volume,
        penalty,
        s: SparseMat::from_triplets(n, n, &sm),
        m: SparseMat::from_triplets(n, n, &mm),
        gamma,
    })
}

/// Trace data of one side of a fine segment at a Gauss point: DOFs of the
/// cell corners, their values and their conormal derivatives `κ ∇N·n`.
struct SideTrace {
    dofs: [usize; 4],
    value: [f64; 4],
    flux: [f64; 4],
}

fn side_trace(
    mesh: &MeshHierarchy,
    dof: &DGDofMap,
    field: &PermField,
    cell: usize,
    point: (f64, f64),
    normal: [f64; 2],
) -> SideTrace {
    let r = dof.ratio;
    let np = r + 1;
    let block = mesh.coarse.block_of_cell(cell);
    let (cx, cy) = mesh.fine.cell_ij(cell);
    let (bx, by) = mesh.coarse.block_ij(block);
    let (lx, ly) = (cx - bx * r, cy - by * r);
    let loc = [ly * np + lx, ly * np + lx + 1, (ly + 1) * np + lx, (ly + 1) * np + lx + 1];
    let (xi, eta) = (point.0 - cx as f64, point.1 - cy as f64);
    let n = shape(xi, eta);
    let g = grad_ref(xi, eta);
    let kap = field.at(cell) / mesh.fine.h;
    SideTrace {
        dofs: loc.map(|l| dof.dof_raw(block, l)),
        value: n,
        flux: std::array::from_fn(|a| kap * (g[a][0] * normal[0] + g[a][1] * normal[1])),
    }
}

fn edge_terms(
    mesh: &MeshHierarchy,
    edge: &CoarseEdge,
    field: &PermField,
    kbar: f64,
    dof: &DGDofMap,
    gamma: f64,
) -> (Triplets, Triplets) {
    let h = mesh.fine.h;
    let normal = edge.normal.vector();
    let pen = gamma / h * kbar;
    let interior = matches!(edge.adjacency, EdgeAdjacency::Interior { .. });
    let mut flux = Vec::new();
    let mut penalty = Vec::new();
    for seg in &edge.segments {
        let (x0, y0) = mesh.fine.node_ij(seg.start);
        let (x1, y1) = mesh.fine.node_ij(seg.end);
        for &t in &GAUSS2 {
            // Point in fine-index coordinates; weight = h * 1/2.
            let p = (x0 as f64 + t * (x1 as f64 - x0 as f64), y0 as f64 + t * (y1 as f64 - y0 as f64));
            let w = 0.5 * h;
            let plus = side_trace(mesh, dof, field, seg.plus_cell, p, normal);
            let mut dofs = Vec::with_capacity(8);
            let mut jump = Vec::with_capacity(8);
            let mut avg = Vec::with_capacity(8);
            let half = if interior { 0.5 } else { 1.0 };
            for a in 0..4 {
                dofs.push(plus.dofs[a]);
                jump.push(plus.value[a]);
                avg.push(half * plus.flux[a]);
            }
            if interior {
                let minus = side_trace(mesh, dof, field, seg.minus_cell.expect("interior segment"), p, normal);
                for a in 0..4 {
                    dofs.push(minus.dofs[a]);
                    jump.push(-minus.value[a]);
                    avg.push(0.5 * minus.flux[a]);
                }
            }
            for k in 0..dofs.len() {
                if dofs[k] == NONE {
                    continue;
                }
                for l in 0..dofs.len() {
                    if dofs[l] == NONE {
                        continue;
                    }
                    let f = -w * (avg[k] * jump[l] + jump[k] * avg[l]);
                    if f != 0.0 {
                        flux.push((dofs[k], dofs[l], f));
                    }
                    let q = w * pen * jump[k] * jump[l];
                    if q != 0.0 {
                        penalty.push((dofs[k], dofs[l], q));
                    }
                }
            }
        }
    }
    (flux, penalty)
}

/// `b_k = ∫ f φ_k` with 2x2 Gauss points per fine cell.
pub fn assemble_load(mesh: &MeshHierarchy, dof: &DGDofMap, f: &(dyn Fn(f64, f64) -> f64 + Sync)) -> Vec<f64> {
    let coarse = &mesh.coarse;
    let r = coarse.ratio;
    let np = r + 1;
    let h = mesh.fine.h;
    let mut b = vec![0.0; dof.n_dof];
    for block in 0..coarse.n_blocks() {
        for (k, &cell) in coarse.block_cells(block).iter().enumerate() {
            let (cx, cy) = (k % r, k / r);
            let loc = [cy * np + cx, cy * np + cx + 1, (cy + 1) * np + cx, (cy + 1) * np + cx + 1];
            let (ox, oy) = mesh.fine.cell_origin(cell);
            for &(xi, eta) in &CELL_GAUSS {
                let fv = 0.25 * h * h * f(ox + xi * h, oy + eta * h);
                let n = shape(xi, eta);
                for a in 0..4 {
                    let d = dof.dof_raw(block, loc[a]);
                    if d != NONE {
                        b[d] += fv * n[a];
                    }
                }
            }
        }
    }
    b
}

/// Source of the Darcy experiments, `2π² sin(πx) sin(πy)`.
pub fn sine_source(x: f64, y: f64) -> f64 {
    use std::f64::consts::PI;
    2.0 * PI * PI * (PI * x).sin() * (PI * y).sin()
}

/// Factorized fine operator.
pub struct FineSolver {
    factor: SpdFactor,
}

impl FineSolver {
    pub fn new(forms: &AssembledForms) -> Result<Self> {
        SpdFactor::new(&forms.a)
            .map(|factor| FineSolver { factor })
            .map_err(|e| CemError::Definiteness(format!("DG operator is not positive definite (gamma too small?): {e}")))
    }

    pub fn solve(&self, forms: &AssembledForms, b: &[f64]) -> Vec<f64> {
        let mut x = self.factor.solve(b);
        for _ in 0..2 {
            let ax = forms.a.mul_vec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let d = self.factor.solve(&r);
            x.iter_mut().zip(&d).for_each(|(x, d)| *x += d);
        }
        x
    }
}

pub fn fine_solve(forms: &AssembledForms, b: &[f64]) -> Result<Vec<f64>> {
    Ok(FineSolver::new(forms)?.solve(forms, b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub energy: f64,
    pub dg: f64,
    pub s: f64,
    pub l2: f64,
}

pub fn compute_norms(v: &[f64], forms: &AssembledForms) -> Result<Norms> {
    let energy2 = forms.a.bilinear(v, v);
    let vol = forms.volume.bilinear(v, v);
    let pen = forms.penalty.bilinear(v, v);
    let dg2 = vol + pen;
    if energy2 < -1e-12 * dg2.max(1.0) {
        return Err(CemError::Definiteness(format!(
            "v^T A v = {energy2:e} is negative: the penalty parameter does not ensure coercivity"
        )));
    }
    Ok(Norms {
        energy: energy2.max(0.0).sqrt(),
        dg: dg2.max(0.0).sqrt(),
        s: forms.s.bilinear(v, v).max(0.0).sqrt(),
        l2: forms.m.bilinear(v, v).max(0.0).sqrt(),
    })
}

/// `‖v‖_a` without the coercivity check.
pub fn energy_norm(v: &[f64], forms: &AssembledForms) -> f64 {
    forms.a.bilinear(v, v).max(0.0).sqrt()
}

pub fn l2_norm(v: &[f64], forms: &AssembledForms) -> f64 {
    dot(v, &forms.m.mul_vec(v)).max(0.0).sqrt()
}
