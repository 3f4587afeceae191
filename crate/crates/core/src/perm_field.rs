//! Cell-wise conductivity fields: generation, raster I/O and the per-edge
//! penalty weights.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CemError, Result};
use crate::grids::{CoarseGrid, EdgeAdjacency, FineGrid};

/// Positive conductivity, constant on each fine cell (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct PermField {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl PermField {
    pub fn uniform(nx: usize, value: f64) -> Self {
        PermField { nx, ny: nx, values: vec![value; nx * nx] }
    }

    pub fn from_fn(grid: &FineGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..grid.n_cells())
            .map(|c| {
                let (x0, y0) = grid.cell_origin(c);
                f(x0 + 0.5 * grid.h, y0 + 0.5 * grid.h)
            })
            .collect();
        PermField { nx: grid.nx, ny: grid.ny, values }
    }

    #[inline]
    pub fn at(&self, cell: usize) -> f64 {
        self.values[cell]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scaled(&self, c: f64) -> Self {
        PermField { nx: self.nx, ny: self.ny, values: self.values.iter().map(|v| v * c).collect() }
    }

    pub fn check_grid(&self, grid: &FineGrid) -> Result<()> {
        if self.nx != grid.nx || self.ny != grid.ny {
            return Err(CemError::Config(format!(
                "field is {}x{} but the fine grid is {}x{}",
                self.nx, self.ny, grid.nx, grid.ny
            )));
        }
        Ok(())
    }

    /// Maximum of the field over each coarse block.
    pub fn block_maxima(&self, coarse: &CoarseGrid) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; coarse.n_blocks()];
        for (cell, &v) in self.values.iter().enumerate() {
            let b = coarse.block_of_cell(cell);
            if v > out[b] {
                out[b] = v;
            }
        }
        out
    }
}

/// Half-open rectangle of fine cells `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl CellRect {
    pub fn contains(&self, cx: usize, cy: usize) -> bool {
        cx >= self.x0 && cx < self.x1 && cy >= self.y0 && cy < self.y1
    }
}

/// Background value with high-conductivity rectangles (channels and inclusions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub background: f64,
    pub contrast: f64,
    pub rects: Vec<CellRect>,
}

pub fn generate_field(spec: &FieldSpec, grid: &FineGrid) -> Result<PermField> {
    if !(spec.background > 0.0 && spec.background.is_finite()) {
        return Err(CemError::Config(format!("background value {} must be positive", spec.background)));
    }
    if !(spec.contrast >= spec.background && spec.contrast.is_finite()) {
        return Err(CemError::Config(format!(
            "channel value {} must be finite and at least the background {}",
            spec.contrast, spec.background
        )));
    }
    for (k, r) in spec.rects.iter().enumerate() {
        if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > grid.nx || r.y1 > grid.ny {
            return Err(CemError::Config(format!(
                "rectangle {k} [{}, {}) x [{}, {}) is empty or exceeds the {}x{} grid",
                r.x0, r.x1, r.y0, r.y1, grid.nx, grid.ny
            )));
        }
    }
    let mut values = vec![spec.background; grid.n_cells()];
    for r in &spec.rects {
        for cy in r.y0..r.y1 {
            for cx in r.x0..r.x1 {
                values[grid.cell_index(cx, cy)] = spec.contrast;
            }
        }
    }
    Ok(PermField { nx: grid.nx, ny: grid.ny, values })
}

/// Parameters of the seeded channel/inclusion generator.
///
/// Geometry is drawn on a 256x256 design lattice and rescaled to the target
/// grid, so the same seed yields the same physical layout at any resolution.
/// Candidates closer than `gap` design cells to an accepted shape, or that
/// would put more than `max_per_block` shapes into one block of the
/// `reference_blocks` coarse grid, are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelLayout {
    pub channels: usize,
    pub inclusions: usize,
    pub background: f64,
    pub contrast: f64,
    /// Channel length range as fractions of the domain side.
    pub channel_length: (f64, f64),
    pub max_per_block: usize,
    pub reference_blocks: usize,
    pub gap: usize,
    pub seed: u64,
}

impl Default for ChannelLayout {
    fn default() -> Self {
        ChannelLayout {
            channels: 14,
            inclusions: 24,
            background: 1.0,
            contrast: 1e4,
            channel_length: (0.3, 0.8),
            max_per_block: 2,
            reference_blocks: 8,
            gap: 4,
            seed: 7,
        }
    }
}

const DESIGN: usize = 256;

impl ChannelLayout {
    /// Shapes on the design lattice.
    pub fn design_rects(&self) -> Vec<CellRect> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let block = DESIGN / self.reference_blocks.max(1);
        let mut accepted: Vec<CellRect> = Vec::new();
        let mut counts = vec![0usize; self.reference_blocks * self.reference_blocks];

        let mut try_place = |cand: CellRect, accepted: &mut Vec<CellRect>| -> bool {
            let g = self.gap;
            let clash = accepted.iter().any(|r| {
                cand.x0 < r.x1 + g && r.x0 < cand.x1 + g && cand.y0 < r.y1 + g && r.y0 < cand.y1 + g
            });
            if clash {
                return false;
            }
            let (bx0, bx1) = (cand.x0 / block, (cand.x1 - 1) / block);
            let (by0, by1) = (cand.y0 / block, (cand.y1 - 1) / block);
            for by in by0..=by1 {
                for bx in bx0..=bx1 {
                    if counts[by * self.reference_blocks + bx] >= self.max_per_block {
                        return false;
                    }
                }
            }
            for by in by0..=by1 {
                for bx in bx0..=bx1 {
                    counts[by * self.reference_blocks + bx] += 1;
                }
            }
            accepted.push(cand);
            true
        };

        let mut placed = 0;
        let mut attempts = 0;
        while placed < self.channels && attempts < 2000 {
            attempts += 1;
            let (lo, hi) = self.channel_length;
            let lo = ((lo * DESIGN as f64) as usize).clamp(2, DESIGN);
            let hi = ((hi * DESIGN as f64) as usize).clamp(lo, DESIGN);
            let len = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let width = 2;
            let horizontal = rng.gen_bool(0.75);
            // Channels longer than the interior run from boundary to boundary.
            let along = if len + 8 < DESIGN { rng.gen_range(4..DESIGN - 4 - len) } else { 0 };
            let len = if len + 8 < DESIGN { len } else { DESIGN };
            let across = rng.gen_range(6..DESIGN - 6 - width);
            let cand = if horizontal {
                CellRect { x0: along, x1: along + len, y0: across, y1: across + width }
            } else {
                CellRect { x0: across, x1: across + width, y0: along, y1: along + len }
            };
            if try_place(cand, &mut accepted) {
                placed += 1;
            }
        }
        let mut placed = 0;
        let mut attempts = 0;
        while placed < self.inclusions && attempts < 4000 {
            attempts += 1;
            let side = rng.gen_range(4..9);
            let x0 = rng.gen_range(6..DESIGN - 6 - side);
            let y0 = rng.gen_range(6..DESIGN - 6 - side);
            let cand = CellRect { x0, x1: x0 + side, y0, y1: y0 + side };
            if try_place(cand, &mut accepted) {
                placed += 1;
            }
        }
        accepted
    }

    /// Field specification rescaled to an `nx x nx` grid.
    pub fn spec(&self, nx: usize) -> FieldSpec {
        let scale = |u: usize| -> usize { ((u * nx) as f64 / DESIGN as f64).round() as usize };
        let rects = self
            .design_rects()
            .into_iter()
            .map(|r| {
                let (mut x0, mut x1, mut y0, mut y1) = (scale(r.x0), scale(r.x1), scale(r.y0), scale(r.y1));
                if x1 <= x0 {
                    x1 = x0 + 1;
                }
                if y1 <= y0 {
                    y1 = y0 + 1;
                }
                x1 = x1.min(nx);
                y1 = y1.min(nx);
                x0 = x0.min(x1 - 1);
                y0 = y0.min(y1 - 1);
                CellRect { x0, x1, y0, y1 }
            })
            .collect();
        FieldSpec { background: self.background, contrast: self.contrast, rects }
    }

    pub fn field(&self, grid: &FineGrid) -> Result<PermField> {
        generate_field(&self.spec(grid.nx), grid)
    }
}

/// Seeded layered medium with undulating interfaces and one fault, used as a
/// stand-in for a crop of a geological velocity model. Values grow with depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayeredLayout {
    pub layers: usize,
    pub min_value: f64,
    pub max_value: f64,
    pub seed: u64,
}

impl Default for LayeredLayout {
    fn default() -> Self {
        LayeredLayout { layers: 9, min_value: 1.0, max_value: 12.0, seed: 3 }
    }
}

impl LayeredLayout {
    pub fn field(&self, grid: &FineGrid) -> PermField {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.layers.max(1);
        // Interface k separates layer k (above) from k+1 (below); depth = 1 - y.
        let interfaces: Vec<(f64, f64, f64, f64)> = (1..n)
            .map(|k| {
                let base = k as f64 / n as f64 + rng.gen_range(-0.3..0.3) / n as f64;
                let amp = rng.gen_range(0.01..0.05);
                let freq = rng.gen_range(0.5..2.0);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (base, amp, freq, phase)
            })
            .collect();
        let values: Vec<f64> = (0..n)
            .map(|k| {
                let t = k as f64 / (n - 1).max(1) as f64;
                let jitter = rng.gen_range(0.85..1.15);
                (self.min_value + t * (self.max_value - self.min_value)) * jitter
            })
            .collect();
        let fault_x = rng.gen_range(0.35..0.65);
        let throw = rng.gen_range(0.04..0.09);
        PermField::from_fn(grid, |x, y| {
            let mut depth = 1.0 - y;
            // Fault: the right block is shifted downwards, with a slanted trace.
            if x > fault_x + 0.3 * (depth - 0.5) {
                depth -= throw;
            }
            let layer = interfaces
                .iter()
                .filter(|&&(b, a, f, p)| depth > b + a * (std::f64::consts::TAU * f * x + p).sin())
                .count();
            values[layer].clamp(self.min_value, self.max_value)
        })
    }
}

const MAGIC: &[u8; 4] = b"KFLD";
const HEADER_LEN: usize = 16;

/// Writes a `KFLD` raster: 16-byte header followed by `nx * ny` little-endian
/// doubles, row-major.
pub fn write_raster(path: &Path, nx: usize, ny: usize, values: &[f64]) -> Result<()> {
    if values.len() != nx * ny {
        return Err(CemError::Config(format!(
            "raster payload has {} values but the header would say {nx}x{ny}",
            values.len()
        )));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(nx as u32).to_le_bytes());
    buf.extend_from_slice(&(ny as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| CemError::io(path, e))?;
    file.write_all(&buf).map_err(|e| CemError::io(path, e))
}

/// Parses a `KFLD` raster without any restriction on the values.
pub fn parse_raster(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < HEADER_LEN {
        return Err(CemError::Format {
            offset: bytes.len() as u64,
            reason: format!("file too short for a {HEADER_LEN}-byte header"),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(CemError::Format { offset: 0, reason: "missing KFLD magic".into() });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (nx, ny, reserved) = (word(4), word(8), word(12));
    if nx == 0 || ny == 0 {
        return Err(CemError::Format { offset: 4, reason: format!("invalid dimensions {nx}x{ny}") });
    }
    if reserved != 0 {
        return Err(CemError::Format { offset: 12, reason: "reserved header word is not zero".into() });
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = nx * ny * 8;
    if payload.len() != expected {
        let offset = (HEADER_LEN + payload.len().min(expected)) as u64;
        return Err(CemError::Format {
            offset,
            reason: format!(
                "header announces {nx}x{ny} = {} values but payload holds {} bytes ({} values)",
                nx * ny,
                payload.len(),
                payload.len() / 8
            ),
        });
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((nx, ny, values))
}

pub fn read_raster(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| CemError::io(path, e))?;
    parse_raster(&bytes)
}

/// Loads a conductivity raster, rejecting non-positive or non-finite values.
pub fn load_field_raster(path: &Path) -> Result<PermField> {
    let (nx, ny, values) = read_raster(path)?;
    if let Some((k, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
        return Err(CemError::Format {
            offset: (HEADER_LEN + 8 * k) as u64,
            reason: format!("conductivity value {v} at cell {k} is not positive"),
        });
    }
    Ok(PermField { nx, ny, values })
}

pub fn save_field_raster(path: &Path, field: &PermField) -> Result<()> {
    write_raster(path, field.nx, field.ny, &field.values)
}

/// Binary 8-bit PGM preview of a row-major raster, min-max scaled, with the
/// first row at the bottom of the image.
pub fn write_pgm(path: &Path, nx: usize, ny: usize, values: &[f64]) -> Result<()> {
    if values.len() != nx * ny {
        return Err(CemError::Config(format!("pgm payload has {} values, expected {nx}x{ny}", values.len())));
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let mut buf = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for row in (0..ny).rev() {
        for &v in &values[row * nx..(row + 1) * nx] {
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            buf.push((t * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, buf).map_err(|e| CemError::io(path, e))
}

/// Per-coarse-edge penalty weight: the mean of the two adjacent block maxima
/// on interior edges, the adjacent block maximum on boundary edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeKappaBar {
    pub values: Vec<f64>,
}

pub fn edge_kappa_bar(field: &PermField, coarse: &CoarseGrid) -> EdgeKappaBar {
    let maxima = field.block_maxima(coarse);
    let values = coarse
        .edges
        .iter()
        .map(|e| match e.adjacency {
            EdgeAdjacency::Interior { plus, minus } => 0.5 * (maxima[plus] + maxima[minus]),
            EdgeAdjacency::Boundary { block } => maxima[block],
        })
        .collect();
    EdgeKappaBar { values }
}
