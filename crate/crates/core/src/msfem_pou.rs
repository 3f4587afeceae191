//! Partition of unity over the coarse nodes and the spectral weight
//! `κ̃ = κ Σ_j |∇χ_j|²` sampled at cell Gauss points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::element::{grad_ref, CELL_GAUSS, STIFFNESS};
use crate::error::Result;
use crate::grids::MeshHierarchy;
use crate::linalg::{SparseMat, SpdFactor};
use crate::perm_field::PermField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PouKind {
    Msfem,
    Bilinear,
}

/// Per block and per corner (lexicographic, as in `CoarseGrid::block_corners`),
/// nodal values on the block-local fine nodes `ly * (r + 1) + lx`.
#[derive(Debug, Clone)]
pub struct PartitionOfUnity {
    pub kind: PouKind,
    pub ratio: usize,
    pub values: Vec<[Vec<f64>; 4]>,
}

impl PartitionOfUnity {
    #[inline]
    pub fn local(&self, block: usize, corner: usize, lx: usize, ly: usize) -> f64 {
        self.values[block][corner][ly * (self.ratio + 1) + lx]
    }

    /// Value of `χ_j` (coarse node `j`) at a fine node.
    pub fn value(&self, mesh: &MeshHierarchy, j: usize, fine_node: usize) -> f64 {
        let coarse = &mesh.coarse;
        let r = coarse.ratio;
        let (ix, iy) = mesh.fine.node_ij(fine_node);
        let bx = (ix / r).min(coarse.nx - 1);
        let by = (iy / r).min(coarse.ny - 1);
        let block = coarse.block_index(bx, by);
        let (lx, ly) = (ix - bx * r, iy - by * r);
        match coarse.block_corners(block).iter().position(|&c| c == j) {
            Some(corner) => self.local(block, corner, lx, ly),
            None => 0.0,
        }
    }
}

fn hat(corner: usize, xi: f64, eta: f64) -> f64 {
    let sx = if corner & 1 == 1 { xi } else { 1.0 - xi };
    let sy = if corner & 2 == 2 { eta } else { 1.0 - eta };
    sx * sy
}

pub fn build_pou(kind: PouKind, field: &PermField, mesh: &MeshHierarchy) -> Result<PartitionOfUnity> {
    field.check_grid(&mesh.fine)?;
    let coarse = &mesh.coarse;
    let r = coarse.ratio;
    let bilinear: [Vec<f64>; 4] = std::array::from_fn(|c| {
        let mut v = Vec::with_capacity((r + 1) * (r + 1));
        for ly in 0..=r {
            for lx in 0..=r {
                v.push(hat(c, lx as f64 / r as f64, ly as f64 / r as f64));
            }
        }
        v
    });
    let values = match kind {
        PouKind::Bilinear => vec![bilinear; coarse.n_blocks()],
        PouKind::Msfem => (0..coarse.n_blocks())
            .into_par_iter()
            .map(|b| harmonic_block(field, mesh, b, &bilinear))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(PartitionOfUnity { kind, ratio: r, values })
}

/// κ-harmonic extension of the bilinear boundary data of each corner.
fn harmonic_block(
    field: &PermField,
    mesh: &MeshHierarchy,
    block: usize,
    bilinear: &[Vec<f64>; 4],
) -> Result<[Vec<f64>; 4]> {
    let r = mesh.coarse.ratio;
    if r < 2 {
        return Ok(bilinear.clone());
    }
    let np = r + 1;
    let interior = |lx: usize, ly: usize| lx > 0 && ly > 0 && lx < r && ly < r;
    let ni = r - 1;
    let iidx = |lx: usize, ly: usize| (ly - 1) * ni + (lx - 1);
    let mut trip = Vec::with_capacity(16 * ni * ni);
    // Couplings from interior rows to boundary nodes, per boundary node.
    let mut coupling: Vec<(usize, usize, f64)> = Vec::new();
    for (k, &cell) in mesh.coarse.block_cells(block).iter().enumerate() {
        let (cx, cy) = (k % r, k / r);
        let kap = field.at(cell);
        let nodes = [(cx, cy), (cx + 1, cy), (cx, cy + 1), (cx + 1, cy + 1)];
        for a in 0..4 {
            let (ax, ay) = nodes[a];
            if !interior(ax, ay) {
                continue;
            }
            for b in 0..4 {
                let (bx, by) = nodes[b];
                let v = kap * STIFFNESS[a][b];
                if interior(bx, by) {
                    trip.push((iidx(ax, ay), iidx(bx, by), v));
                } else {
                    coupling.push((iidx(ax, ay), by * np + bx, v));
                }
            }
        }
    }
    let a_ii = SparseMat::from_triplets(ni * ni, ni * ni, &trip);
    let factor = SpdFactor::new(&a_ii)?;
    let mut rhs = vec![0.0; 4 * ni * ni];
    for c in 0..4 {
        let col = &mut rhs[c * ni * ni..(c + 1) * ni * ni];
        for &(row, bnode, v) in &coupling {
            col[row] -= v * bilinear[c][bnode];
        }
    }
    factor.solve_many_in_place(&mut rhs, 4);
    Ok(std::array::from_fn(|c| {
        let mut out = bilinear[c].clone();
        for ly in 1..r {
            for lx in 1..r {
                out[ly * np + lx] = rhs[c * ni * ni + iidx(lx, ly)];
            }
        }
        out
    }))
}

/// `κ̃` at the four Gauss points of every fine cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SWeight {
    pub values: Vec<[f64; 4]>,
}

pub fn build_s_weight(pou: &PartitionOfUnity, field: &PermField, mesh: &MeshHierarchy) -> SWeight {
    let coarse = &mesh.coarse;
    let r = coarse.ratio;
    let np = r + 1;
    let h = mesh.fine.h;
    let mut values = vec![[0.0; 4]; mesh.fine.n_cells()];
    for block in 0..coarse.n_blocks() {
        for (k, &cell) in coarse.block_cells(block).iter().enumerate() {
            let (cx, cy) = (k % r, k / r);
            let local = [cy * np + cx, cy * np + cx + 1, (cy + 1) * np + cx, (cy + 1) * np + cx + 1];
            let kap = field.at(cell);
            for (g, &(xi, eta)) in CELL_GAUSS.iter().enumerate() {
                let grads = grad_ref(xi, eta);
                let mut sum = 0.0;
                for corner in 0..4 {
                    let chi = &pou.values[block][corner];
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for a in 0..4 {
                        gx += chi[local[a]] * grads[a][0];
                        gy += chi[local[a]] * grads[a][1];
                    }
                    sum += (gx * gx + gy * gy) / (h * h);
                }
                values[cell][g] = kap * sum;
            }
        }
    }
    SWeight { values }
}
