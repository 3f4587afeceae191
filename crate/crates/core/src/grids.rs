//! Nested uniform quadrilateral grids on the unit square.
//!
//! The fine grid has `nx * nx` square cells of size `h = 1/nx`; the coarse
//! grid groups them into `Nx * Nx` blocks of `ratio * ratio` fine cells.
//! Nodes and cells are numbered row-major (x fastest).

use crate::error::{CemError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FineGrid {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
}

impl FineGrid {
    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn node_index(&self, ix: usize, iy: usize) -> usize {
        iy * (self.nx + 1) + ix
    }

    #[inline]
    pub fn node_ij(&self, node: usize) -> (usize, usize) {
        (node % (self.nx + 1), node / (self.nx + 1))
    }

    #[inline]
    pub fn node_coords(&self, node: usize) -> (f64, f64) {
        let (ix, iy) = self.node_ij(node);
        (ix as f64 * self.h, iy as f64 * self.h)
    }

    #[inline]
    pub fn cell_index(&self, cx: usize, cy: usize) -> usize {
        cy * self.nx + cx
    }

    #[inline]
    pub fn cell_ij(&self, cell: usize) -> (usize, usize) {
        (cell % self.nx, cell / self.nx)
    }

    /// Lower-left corner of a cell.
    #[inline]
    pub fn cell_origin(&self, cell: usize) -> (f64, f64) {
        let (cx, cy) = self.cell_ij(cell);
        (cx as f64 * self.h, cy as f64 * self.h)
    }

    /// Corner nodes of a cell in lexicographic order: (0,0), (1,0), (0,1), (1,1).
    #[inline]
    pub fn cell_nodes(&self, cell: usize) -> [usize; 4] {
        let (cx, cy) = self.cell_ij(cell);
        [
            self.node_index(cx, cy),
            self.node_index(cx + 1, cy),
            self.node_index(cx, cy + 1),
            self.node_index(cx + 1, cy + 1),
        ]
    }

    pub fn is_boundary_node(&self, node: usize) -> bool {
        let (ix, iy) = self.node_ij(node);
        ix == 0 || iy == 0 || ix == self.nx || iy == self.ny
    }
}

/// Direction of the fixed unit normal on a coarse edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normal {
    PlusX,
    MinusX,
    PlusY,
    MinusY,
}

impl Normal {
    pub fn vector(self) -> [f64; 2] {
        match self {
            Normal::PlusX => [1.0, 0.0],
            Normal::MinusX => [-1.0, 0.0],
            Normal::PlusY => [0.0, 1.0],
            Normal::MinusY => [0.0, -1.0],
        }
    }

    pub fn flipped(self) -> Normal {
        match self {
            Normal::PlusX => Normal::MinusX,
            Normal::MinusX => Normal::PlusX,
            Normal::PlusY => Normal::MinusY,
            Normal::MinusY => Normal::PlusY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeAdjacency {
    /// `plus` is the block the normal points away from.
    Interior { plus: usize, minus: usize },
    /// Edge on the domain boundary; the normal points out of the domain.
    Boundary { block: usize },
}

/// One fine edge of length `h` lying on a coarse edge, with the fine cells
/// on either side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FineSegment {
    pub start: usize,
    pub end: usize,
    pub plus_cell: usize,
    pub minus_cell: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseEdge {
    pub id: usize,
    pub adjacency: EdgeAdjacency,
    pub normal: Normal,
    pub segments: Vec<FineSegment>,
}

impl CoarseEdge {
    pub fn is_boundary(&self) -> bool {
        matches!(self.adjacency, EdgeAdjacency::Boundary { .. })
    }

    /// Same edge with the `plus`/`minus` roles exchanged and the normal
    /// negated. Only meaningful for interior edges.
    pub fn swapped(&self) -> CoarseEdge {
        match self.adjacency {
            EdgeAdjacency::Boundary { .. } => self.clone(),
            EdgeAdjacency::Interior { plus, minus } => CoarseEdge {
                id: self.id,
                adjacency: EdgeAdjacency::Interior { plus: minus, minus: plus },
                normal: self.normal.flipped(),
                segments: self
                    .segments
                    .iter()
                    .map(|s| FineSegment {
                        start: s.start,
                        end: s.end,
                        plus_cell: s.minus_cell.expect("interior segment has two cells"),
                        minus_cell: Some(s.plus_cell),
                    })
                    .collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseGrid {
    pub nx: usize,
    pub ny: usize,
    /// Coarse mesh size `H`.
    pub h: f64,
    /// Fine cells per block along each axis.
    pub ratio: usize,
    pub edges: Vec<CoarseEdge>,
}

impl CoarseGrid {
    pub fn n_blocks(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    #[inline]
    pub fn block_index(&self, bx: usize, by: usize) -> usize {
        by * self.nx + bx
    }

    #[inline]
    pub fn block_ij(&self, block: usize) -> (usize, usize) {
        (block % self.nx, block / self.nx)
    }

    #[inline]
    pub fn node_index(&self, ix: usize, iy: usize) -> usize {
        iy * (self.nx + 1) + ix
    }

    /// Coarse nodes at the corners of a block, lexicographic order.
    pub fn block_corners(&self, block: usize) -> [usize; 4] {
        let (bx, by) = self.block_ij(block);
        [
            self.node_index(bx, by),
            self.node_index(bx + 1, by),
            self.node_index(bx, by + 1),
            self.node_index(bx + 1, by + 1),
        ]
    }

    /// Blocks adjacent to the given coarse node (at most four).
    pub fn node_blocks(&self, node: usize) -> Vec<usize> {
        let ix = node % (self.nx + 1);
        let iy = node / (self.nx + 1);
        let mut out = Vec::with_capacity(4);
        for by in iy.saturating_sub(1)..=iy.min(self.ny - 1) {
            for bx in ix.saturating_sub(1)..=ix.min(self.nx - 1) {
                out.push(self.block_index(bx, by));
            }
        }
        out
    }

    fn fine_nx(&self) -> usize {
        self.nx * self.ratio
    }

    /// Global fine cell ids of a block, row-major within the block.
    pub fn block_cells(&self, block: usize) -> Vec<usize> {
        let (bx, by) = self.block_ij(block);
        let nxf = self.fine_nx();
        let mut cells = Vec::with_capacity(self.ratio * self.ratio);
        for ly in 0..self.ratio {
            for lx in 0..self.ratio {
                cells.push((by * self.ratio + ly) * nxf + bx * self.ratio + lx);
            }
        }
        cells
    }

    #[inline]
    pub fn block_of_cell(&self, cell: usize) -> usize {
        let nxf = self.fine_nx();
        let (cx, cy) = (cell % nxf, cell / nxf);
        self.block_index(cx / self.ratio, cy / self.ratio)
    }

    /// Global fine node id of block-local node `(lx, ly)`, `0 <= lx, ly <= ratio`.
    #[inline]
    pub fn block_node(&self, block: usize, lx: usize, ly: usize) -> usize {
        let (bx, by) = self.block_ij(block);
        (by * self.ratio + ly) * (self.fine_nx() + 1) + bx * self.ratio + lx
    }

    /// Edge-adjacent neighbour blocks.
    pub fn neighbors(&self, block: usize) -> Vec<usize> {
        let (bx, by) = self.block_ij(block);
        let mut out = Vec::with_capacity(4);
        if by > 0 {
            out.push(self.block_index(bx, by - 1));
        }
        if bx > 0 {
            out.push(self.block_index(bx - 1, by));
        }
        if bx + 1 < self.nx {
            out.push(self.block_index(bx + 1, by));
        }
        if by + 1 < self.ny {
            out.push(self.block_index(bx, by + 1));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshHierarchy {
    pub fine: FineGrid,
    pub coarse: CoarseGrid,
}

/// Builds a fine grid with `nx * nx` cells nested in an `coarse_nx * coarse_nx`
/// coarse grid, together with the full coarse-edge topology.
pub fn build_mesh_hierarchy(nx: usize, coarse_nx: usize) -> Result<MeshHierarchy> {
    if nx < 2 || coarse_nx < 1 {
        return Err(CemError::Config(format!(
            "grid sizes must satisfy nx >= 2 and Nx >= 1 (got nx={nx}, Nx={coarse_nx})"
        )));
    }
    if nx % coarse_nx != 0 {
        return Err(CemError::Config(format!(
            "fine cell count nx={nx} is not divisible by coarse block count Nx={coarse_nx}"
        )));
    }
    let fine = FineGrid { nx, ny: nx, h: 1.0 / nx as f64 };
    let ratio = nx / coarse_nx;
    let mut coarse = CoarseGrid {
        nx: coarse_nx,
        ny: coarse_nx,
        h: 1.0 / coarse_nx as f64,
        ratio,
        edges: Vec::new(),
    };
    coarse.edges = build_edges(&fine, &coarse);
    Ok(MeshHierarchy { fine, coarse })
}

fn build_edges(fine: &FineGrid, coarse: &CoarseGrid) -> Vec<CoarseEdge> {
    let r = coarse.ratio;
    let mut edges = Vec::with_capacity(coarse.nx * (coarse.ny + 1) + coarse.ny * (coarse.nx + 1));

    // Horizontal edges (normal along y), row by row.
    for ey in 0..=coarse.ny {
        for bx in 0..coarse.nx {
            let iy = ey * r;
            let segments = (0..r)
                .map(|k| {
                    let ix = bx * r + k;
                    let below = (iy > 0).then(|| fine.cell_index(ix, iy - 1));
                    let above = (iy < fine.ny).then(|| fine.cell_index(ix, iy));
                    let (plus_cell, minus_cell) = match (below, above) {
                        (Some(b), Some(a)) => (b, Some(a)),
                        (Some(b), None) => (b, None),
                        (None, Some(a)) => (a, None),
                        (None, None) => unreachable!(),
                    };
                    FineSegment {
                        start: fine.node_index(ix, iy),
                        end: fine.node_index(ix + 1, iy),
                        plus_cell,
                        minus_cell,
                    }
                })
                .collect();
            let (adjacency, normal) = if ey == 0 {
                (EdgeAdjacency::Boundary { block: coarse.block_index(bx, 0) }, Normal::MinusY)
            } else if ey == coarse.ny {
                (
                    EdgeAdjacency::Boundary { block: coarse.block_index(bx, coarse.ny - 1) },
                    Normal::PlusY,
                )
            } else {
                (
                    EdgeAdjacency::Interior {
                        plus: coarse.block_index(bx, ey - 1),
                        minus: coarse.block_index(bx, ey),
                    },
                    Normal::PlusY,
                )
            };
            edges.push(CoarseEdge { id: edges.len(), adjacency, normal, segments });
        }
    }

    // Vertical edges (normal along x).
    for by in 0..coarse.ny {
        for ex in 0..=coarse.nx {
            let ix = ex * r;
            let segments = (0..r)
                .map(|k| {
                    let iy = by * r + k;
                    let left = (ix > 0).then(|| fine.cell_index(ix - 1, iy));
                    let right = (ix < fine.nx).then(|| fine.cell_index(ix, iy));
                    let (plus_cell, minus_cell) = match (left, right) {
                        (Some(l), Some(rc)) => (l, Some(rc)),
                        (Some(l), None) => (l, None),
                        (None, Some(rc)) => (rc, None),
                        (None, None) => unreachable!(),
                    };
                    FineSegment {
                        start: fine.node_index(ix, iy),
                        end: fine.node_index(ix, iy + 1),
                        plus_cell,
                        minus_cell,
                    }
                })
                .collect();
            let (adjacency, normal) = if ex == 0 {
                (EdgeAdjacency::Boundary { block: coarse.block_index(0, by) }, Normal::MinusX)
            } else if ex == coarse.nx {
                (
                    EdgeAdjacency::Boundary { block: coarse.block_index(coarse.nx - 1, by) },
                    Normal::PlusX,
                )
            } else {
                (
                    EdgeAdjacency::Interior {
                        plus: coarse.block_index(ex - 1, by),
                        minus: coarse.block_index(ex, by),
                    },
                    Normal::PlusX,
                )
            };
            edges.push(CoarseEdge { id: edges.len(), adjacency, normal, segments });
        }
    }
    edges
}

/// Coarse block `center` enlarged by `layers` rings of blocks, clipped to the
/// domain. The region is always a rectangle of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct OversampleRegion {
    pub center: usize,
    pub layers: usize,
    /// Inclusive block-index bounds `(bx0, bx1, by0, by1)`.
    pub bounds: (usize, usize, usize, usize),
    /// Member blocks in ascending order.
    pub blocks: Vec<usize>,
    /// Fine nodes in the closure of the region, ascending.
    pub nodes: Vec<usize>,
    /// Fine nodes on the region boundary that are not on the domain boundary.
    pub boundary_nodes: Vec<usize>,
}

impl OversampleRegion {
    pub fn contains_block(&self, block: usize, coarse: &CoarseGrid) -> bool {
        let (bx, by) = coarse.block_ij(block);
        let (x0, x1, y0, y1) = self.bounds;
        bx >= x0 && bx <= x1 && by >= y0 && by <= y1
    }

    /// True if the fine node at fine indices `(ix, iy)` lies on the region
    /// boundary but not on the domain boundary.
    pub fn is_cut_node(&self, coarse: &CoarseGrid, ix: usize, iy: usize) -> bool {
        let r = coarse.ratio;
        let (x0, x1, y0, y1) = self.bounds;
        let (ixa, ixb, iya, iyb) = (x0 * r, (x1 + 1) * r, y0 * r, (y1 + 1) * r);
        let nxf = coarse.nx * r;
        let nyf = coarse.ny * r;
        if ix < ixa || ix > ixb || iy < iya || iy > iyb {
            return false;
        }
        let on_region_boundary = ix == ixa || ix == ixb || iy == iya || iy == iyb;
        let on_domain_boundary = ix == 0 || iy == 0 || ix == nxf || iy == nyf;
        on_region_boundary && !on_domain_boundary
    }

    pub fn covers_domain(&self, coarse: &CoarseGrid) -> bool {
        self.blocks.len() == coarse.n_blocks()
    }
}

pub fn oversample_region(coarse: &CoarseGrid, center: usize, layers: usize) -> Result<OversampleRegion> {
    if center >= coarse.n_blocks() {
        return Err(CemError::Index { index: center, limit: coarse.n_blocks() });
    }
    let (bx, by) = coarse.block_ij(center);
    let bounds = (
        bx.saturating_sub(layers),
        (bx + layers).min(coarse.nx - 1),
        by.saturating_sub(layers),
        (by + layers).min(coarse.ny - 1),
    );
    let (x0, x1, y0, y1) = bounds;
    let mut blocks = Vec::with_capacity((x1 - x0 + 1) * (y1 - y0 + 1));
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            blocks.push(coarse.block_index(xx, yy));
        }
    }
    let r = coarse.ratio;
    let nxf = coarse.nx * r;
    let mut region = OversampleRegion {
        center,
        layers,
        bounds,
        blocks,
        nodes: Vec::new(),
        boundary_nodes: Vec::new(),
    };
    for iy in y0 * r..=(y1 + 1) * r {
        for ix in x0 * r..=(x1 + 1) * r {
            let node = iy * (nxf + 1) + ix;
            region.nodes.push(node);
            if region.is_cut_node(coarse, ix, iy) {
                region.boundary_nodes.push(node);
            }
        }
    }
    Ok(region)
}
