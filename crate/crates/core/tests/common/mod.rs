//! Dense reference implementation of the discretization, written from the
//! formulas with its own element loops and linear algebra, for comparison
//! against the library on tiny meshes.

#![allow(dead_code)]

pub mod bridge;

pub type Dense = Vec<Vec<f64>>;

pub fn zeros(n: usize, m: usize) -> Dense {
    vec![vec![0.0; m]; n]
}

pub fn matvec(a: &Dense, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn transpose(a: &Dense) -> Dense {
    let (n, m) = (a.len(), a.first().map_or(0, |r| r.len()));
    (0..m).map(|j| (0..n).map(|i| a[i][j]).collect()).collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let m = b.first().map_or(0, |r| r.len());
    a.iter()
        .map(|row| (0..m).map(|j| row.iter().enumerate().map(|(k, v)| v * b[k][j]).sum()).collect())
        .collect()
}

/// Gaussian elimination with partial pivoting; columns of `b` are solved together.
pub fn lu_solve(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let m = b[0].len();
    let mut a = a.clone();
    let mut b = b.clone();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        b.swap(k, p);
        let piv = a[k][k];
        assert!(piv != 0.0, "singular matrix in oracle");
        for i in k + 1..n {
            let f = a[i][k] / piv;
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            for j in 0..m {
                b[i][j] -= f * b[k][j];
            }
        }
    }
    for k in (0..n).rev() {
        for j in 0..m {
            let mut s = b[k][j];
            for i in k + 1..n {
                s -= a[k][i] * b[i][j];
            }
            b[k][j] = s / a[k][k];
        }
    }
    b
}

pub fn solve_vec(a: &Dense, b: &[f64]) -> Vec<f64> {
    let col: Dense = b.iter().map(|&v| vec![v]).collect();
    lu_solve(a, &col).into_iter().map(|r| r[0]).collect()
}

pub fn cholesky(a: &Dense) -> Dense {
    let n = a.len();
    let mut l = zeros(n, n);
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        assert!(d > 0.0, "oracle Cholesky failed");
        l[j][j] = d.sqrt();
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / l[j][j];
        }
    }
    l
}

/// Cyclic Jacobi rotations; eigenvalues ascending, eigenvectors as columns.
pub fn jacobi_eigen(a: &Dense) -> (Vec<f64>, Dense) {
    let n = a.len();
    let mut a = a.clone();
    let mut v = zeros(n, n);
    for i in 0..n {
        v[i][i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let total: f64 = a.iter().flatten().map(|x| x * x).sum();
        if off <= 1e-34 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]));
    let vals = order.iter().map(|&i| a[i][i]).collect();
    let vecs = (0..n).map(|r| order.iter().map(|&i| v[r][i]).collect()).collect();
    (vals, vecs)
}

/// `A x = λ S x` through `S = L Lᵀ` and the symmetric `L⁻¹ A L⁻ᵀ`.
pub fn generalized_eigen(a: &Dense, s: &Dense) -> (Vec<f64>, Dense) {
    let n = a.len();
    let l = cholesky(s);
    let lower_solve = |b: &[f64]| {
        let mut x = vec![0.0; n];
        for i in 0..n {
            let mut v = b[i];
            for k in 0..i {
                v -= l[i][k] * x[k];
            }
            x[i] = v / l[i][i];
        }
        x
    };
    // C = L⁻¹ A L⁻ᵀ, built column by column.
    let y: Dense = transpose(&(0..n).map(|j| lower_solve(&(0..n).map(|i| a[i][j]).collect::<Vec<_>>())).collect());
    let c_cols: Dense = (0..n).map(|i| lower_solve(&y[i])).collect();
    let mut c = c_cols;
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (c[i][j] + c[j][i]);
            c[i][j] = m;
            c[j][i] = m;
        }
    }
    let (vals, w) = jacobi_eigen(&c);
    let mut x = zeros(n, n);
    for col in 0..n {
        for i in (0..n).rev() {
            let mut v = w[i][col];
            for k in i + 1..n {
                v -= l[k][i] * x[k][col];
            }
            x[i][col] = v / l[i][i];
        }
    }
    (vals, x)
}

const G: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

fn shape(xi: f64, eta: f64) -> [f64; 4] {
    [(1.0 - xi) * (1.0 - eta), xi * (1.0 - eta), (1.0 - xi) * eta, xi * eta]
}

fn dshape(xi: f64, eta: f64) -> [[f64; 2]; 4] {
    [[-(1.0 - eta), -(1.0 - xi)], [1.0 - eta, -xi], [-eta, 1.0 - xi], [eta, xi]]
}

/// Symmetric interior penalty DG with `Q1` elements on each block of an
/// `nx x nx` grid, blocks of `r x r` cells, zero Dirichlet data eliminated.
pub struct Oracle {
    pub nx: usize,
    pub nc: usize,
    pub r: usize,
    pub h: f64,
    pub kappa: Vec<f64>,
    /// `(block, lx, ly)` of each oracle unknown, blocks in `by * nc + bx` order.
    pub dofs: Vec<(usize, usize, usize)>,
    index: Vec<Vec<Option<usize>>>,
    pub a: Dense,
    pub volume: Dense,
    pub s: Dense,
    pub m: Dense,
    /// `κ̃` at the four Gauss points of every cell.
    pub kt: Vec<[f64; 4]>,
}

impl Oracle {
    pub fn new(nx: usize, nc: usize, kappa: impl Fn(usize, usize) -> f64, gamma: f64) -> Self {
        let r = nx / nc;
        let h = 1.0 / nx as f64;
        let kappa: Vec<f64> = (0..nx * nx).map(|c| kappa(c % nx, c / nx)).collect();
        let mut dofs = Vec::new();
        let mut index = vec![vec![None; (r + 1) * (r + 1)]; nc * nc];
        for b in 0..nc * nc {
            let (bx, by) = (b % nc, b / nc);
            for ly in 0..=r {
                for lx in 0..=r {
                    let (ix, iy) = (bx * r + lx, by * r + ly);
                    if ix == 0 || iy == 0 || ix == nx || iy == nx {
                        continue;
                    }
                    index[b][ly * (r + 1) + lx] = Some(dofs.len());
                    dofs.push((b, lx, ly));
                }
            }
        }
        let n = dofs.len();
        let mut o = Oracle {
            nx,
            nc,
            r,
            h,
            kappa,
            dofs,
            index,
            a: zeros(n, n),
            volume: zeros(n, n),
            s: zeros(n, n),
            m: zeros(n, n),
            kt: Vec::new(),
        };
        o.kt = o.weights();
        o.assemble(gamma);
        o
    }

    pub fn n(&self) -> usize {
        self.dofs.len()
    }

    pub fn idx(&self, b: usize, lx: usize, ly: usize) -> Option<usize> {
        self.index[b][ly * (self.r + 1) + lx]
    }

    fn k(&self, cx: usize, cy: usize) -> f64 {
        self.kappa[cy * self.nx + cx]
    }

    /// Corner `c` MsFEM function of block `b` at the block-local nodes:
    /// κ-harmonic inside, linear along the block edges.
    pub fn msfem(&self, b: usize) -> [Vec<f64>; 4] {
        let r = self.r;
        let np = r + 1;
        let (bx, by) = (b % self.nc, b / self.nc);
        let hat = |c: usize, s: f64, t: f64| {
            let fx = if c % 2 == 0 { 1.0 - s } else { s };
            let fy = if c / 2 == 0 { 1.0 - t } else { t };
            fx * fy
        };
        let mut stiff = zeros(np * np, np * np);
        for cy in 0..r {
            for cx in 0..r {
                let kap = self.k(bx * r + cx, by * r + cy);
                let nodes = [cy * np + cx, cy * np + cx + 1, (cy + 1) * np + cx, (cy + 1) * np + cx + 1];
                for &xi in &G {
                    for &eta in &G {
                        let d = dshape(xi, eta);
                        for a in 0..4 {
                            for c in 0..4 {
                                stiff[nodes[a]][nodes[c]] += 0.25 * kap * (d[a][0] * d[c][0] + d[a][1] * d[c][1]);
                            }
                        }
                    }
                }
            }
        }
        let interior: Vec<usize> =
            (0..np * np).filter(|&k| k % np > 0 && k % np < r && k / np > 0 && k / np < r).collect();
        std::array::from_fn(|c| {
            let mut u: Vec<f64> = (0..np * np).map(|k| hat(c, (k % np) as f64 / r as f64, (k / np) as f64 / r as f64)).collect();
            if !interior.is_empty() {
                let aii: Dense = interior.iter().map(|&i| interior.iter().map(|&j| stiff[i][j]).collect()).collect();
                let rhs: Vec<f64> = interior
                    .iter()
                    .map(|&i| -(0..np * np).filter(|j| !interior.contains(j)).map(|j| stiff[i][j] * u[j]).sum::<f64>())
                    .collect();
                let x = solve_vec(&aii, &rhs);
                for (k, &i) in interior.iter().enumerate() {
                    u[i] = x[k];
                }
            }
            u
        })
    }

    fn weights(&self) -> Vec<[f64; 4]> {
        let r = self.r;
        let np = r + 1;
        let mut kt = vec![[0.0; 4]; self.nx * self.nx];
        for b in 0..self.nc * self.nc {
            let chi = self.msfem(b);
            let (bx, by) = (b % self.nc, b / self.nc);
            for cy in 0..r {
                for cx in 0..r {
                    let (gx, gy) = (bx * r + cx, by * r + cy);
                    let nodes = [cy * np + cx, cy * np + cx + 1, (cy + 1) * np + cx, (cy + 1) * np + cx + 1];
                    let mut g = 0;
                    for &eta in &G {
                        for &xi in &G {
                            let d = dshape(xi, eta);
                            let mut sum = 0.0;
                            for ch in &chi {
                                let gxv: f64 = (0..4).map(|a| ch[nodes[a]] * d[a][0]).sum::<f64>() / self.h;
                                let gyv: f64 = (0..4).map(|a| ch[nodes[a]] * d[a][1]).sum::<f64>() / self.h;
                                sum += gxv * gxv + gyv * gyv;
                            }
                            kt[gy * self.nx + gx][g] = self.k(gx, gy) * sum;
                            g += 1;
                        }
                    }
                }
            }
        }
        kt
    }

    fn block_max(&self, b: usize) -> f64 {
        let (bx, by) = (b % self.nc, b / self.nc);
        let mut m = 0.0f64;
        for cy in 0..self.r {
            for cx in 0..self.r {
                m = m.max(self.k(bx * self.r + cx, by * self.r + cy));
            }
        }
        m
    }

    /// Unknowns, values and `κ ∂_n` of the cell `(gx, gy)` at the point with
    /// local coordinates `(xi, eta)`.
    fn trace(&self, gx: usize, gy: usize, xi: f64, eta: f64, normal: [f64; 2]) -> Vec<(usize, f64, f64)> {
        let r = self.r;
        let b = (gy / r) * self.nc + gx / r;
        let (lx, ly) = (gx % r, gy % r);
        let corners = [(lx, ly), (lx + 1, ly), (lx, ly + 1), (lx + 1, ly + 1)];
        let n = shape(xi, eta);
        let d = dshape(xi, eta);
        let kap = self.k(gx, gy) / self.h;
        (0..4)
            .filter_map(|a| {
                self.idx(b, corners[a].0, corners[a].1)
                    .map(|i| (i, n[a], kap * (d[a][0] * normal[0] + d[a][1] * normal[1])))
            })
            .collect()
    }

    fn assemble(&mut self, gamma: f64) {
        let (r, nc, h) = (self.r, self.nc, self.h);
        for b in 0..nc * nc {
            let (bx, by) = (b % nc, b / nc);
            for cy in 0..r {
                for cx in 0..r {
                    let (gx, gy) = (bx * r + cx, by * r + cy);
                    let kap = self.k(gx, gy);
                    let corners = [(cx, cy), (cx + 1, cy), (cx, cy + 1), (cx + 1, cy + 1)];
                    let ids: Vec<Option<usize>> = corners.iter().map(|&(x, y)| self.idx(b, x, y)).collect();
                    let mut g = 0;
                    for &eta in &G {
                        for &xi in &G {
                            let n = shape(xi, eta);
                            let d = dshape(xi, eta);
                            let kt = self.kt[gy * self.nx + gx][g];
                            g += 1;
                            for p in 0..4 {
                                let Some(i) = ids[p] else { continue };
                                for q in 0..4 {
                                    let Some(j) = ids[q] else { continue };
                                    let grad = kap * 0.25 * (d[p][0] * d[q][0] + d[p][1] * d[q][1]);
                                    self.volume[i][j] += grad;
                                    self.a[i][j] += grad;
                                    self.s[i][j] += 0.25 * h * h * kt * n[p] * n[q];
                                    self.m[i][j] += 0.25 * h * h * n[p] * n[q];
                                }
                            }
                        }
                    }
                }
            }
        }
        // Interior coarse edges: vertical ones between (bx, by) and (bx + 1, by),
        // horizontal ones between (bx, by) and (bx, by + 1).
        for by in 0..nc {
            for bx in 0..nc {
                let minus = by * nc + bx;
                for dir in 0..2 {
                    let (nbx, nby) = if dir == 0 { (bx + 1, by) } else { (bx, by + 1) };
                    if nbx >= nc || nby >= nc {
                        continue;
                    }
                    let plus = nby * nc + nbx;
                    let kbar = 0.5 * (self.block_max(minus) + self.block_max(plus));
                    let normal = if dir == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
                    for k in 0..r {
                        for &t in &G {
                            let (mc, pc, mloc, ploc) = if dir == 0 {
                                let gy = by * r + k;
                                ((nbx * r - 1, gy), (nbx * r, gy), (1.0, t), (0.0, t))
                            } else {
                                let gx = bx * r + k;
                                ((gx, nby * r - 1), (gx, nby * r), (t, 1.0), (t, 0.0))
                            };
                            let tm = self.trace(mc.0, mc.1, mloc.0, mloc.1, normal);
                            let tp = self.trace(pc.0, pc.1, ploc.0, ploc.1, normal);
                            let mut terms: Vec<(usize, f64, f64)> = Vec::new();
                            terms.extend(tm.iter().map(|&(i, v, f)| (i, v, 0.5 * f)));
                            terms.extend(tp.iter().map(|&(i, v, f)| (i, -v, 0.5 * f)));
                            let w = 0.5 * h;
                            for &(i, ji, ai) in &terms {
                                for &(j, jj, aj) in &terms {
                                    self.a[i][j] += w * (-(ai * jj + ji * aj) + gamma / h * kbar * ji * jj);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `∫ f v` with the 2x2 Gauss rule per fine cell.
    pub fn load(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let mut b = vec![0.0; self.n()];
        let (r, h) = (self.r, self.h);
        for (i, &(blk, lx, ly)) in self.dofs.iter().enumerate() {
            let (bx, by) = (blk % self.nc, blk / self.nc);
            for (cx, a) in [(lx.wrapping_sub(1), 1usize), (lx, 0)] {
                for (cy, c) in [(ly.wrapping_sub(1), 1usize), (ly, 0)] {
                    if cx >= r || cy >= r {
                        continue;
                    }
                    let corner = c * 2 + a;
                    let (ox, oy) = ((bx * r + cx) as f64 * h, (by * r + cy) as f64 * h);
                    for &eta in &G {
                        for &xi in &G {
                            b[i] += 0.25 * h * h * f(ox + xi * h, oy + eta * h) * shape(xi, eta)[corner];
                        }
                    }
                }
            }
        }
        b
    }

    pub fn block_dofs(&self, b: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.dofs[i].0 == b).collect()
    }

    pub fn sub(&self, a: &Dense, rows: &[usize], cols: &[usize]) -> Dense {
        rows.iter().map(|&i| cols.iter().map(|&j| a[i][j]).collect()).collect()
    }

    /// First `count` local eigenpairs per block, each eigenvector as a full
    /// oracle vector.
    pub fn aux(&self, count: usize) -> Vec<(Vec<f64>, Vec<Vec<f64>>)> {
        (0..self.nc * self.nc)
            .map(|b| {
                let d = self.block_dofs(b);
                let (vals, vecs) = generalized_eigen(&self.sub(&self.volume, &d, &d), &self.sub(&self.s, &d, &d));
                let phis = (0..count)
                    .map(|j| {
                        let mut full = vec![0.0; self.n()];
                        for (k, &i) in d.iter().enumerate() {
                            full[i] = vecs[k][j];
                        }
                        full
                    })
                    .collect();
                (vals, phis)
            })
            .collect()
    }

    /// Blocks within `layers` of `center` in the max-norm.
    pub fn patch(&self, center: usize, layers: usize) -> Vec<usize> {
        let (cx, cy) = ((center % self.nc) as isize, (center / self.nc) as isize);
        (0..self.nc * self.nc)
            .filter(|&b| {
                let (bx, by) = ((b % self.nc) as isize, (b / self.nc) as isize);
                (bx - cx).abs() <= layers as isize && (by - cy).abs() <= layers as isize
            })
            .collect()
    }

    /// Constrained (`relaxed = false`) or penalized energy minimizer on the
    /// unknowns of `blocks`, for the auxiliary function `target`.
    pub fn basis(&self, phis: &[Vec<Vec<f64>>], blocks: &[usize], target: (usize, usize), relaxed: bool) -> Vec<f64> {
        let dofs: Vec<usize> = (0..self.n()).filter(|&i| blocks.contains(&self.dofs[i].0)).collect();
        let mut w_cols: Vec<Vec<f64>> = Vec::new();
        let mut which = 0;
        for &b in blocks {
            for (j, phi) in phis[b].iter().enumerate() {
                if (b, j) == target {
                    which = w_cols.len();
                }
                let sphi = matvec(&self.s, phi);
                w_cols.push(dofs.iter().map(|&i| sphi[i]).collect());
            }
        }
        let (np, nw) = (dofs.len(), w_cols.len());
        let ap = self.sub(&self.a, &dofs, &dofs);
        let local = if relaxed {
            let mut k = ap;
            let mut rhs = vec![0.0; np];
            for i in 0..np {
                for j in 0..np {
                    k[i][j] += w_cols.iter().map(|w| w[i] * w[j]).sum::<f64>();
                }
                rhs[i] = w_cols[which][i];
            }
            solve_vec(&k, &rhs)
        } else {
            let mut k = zeros(np + nw, np + nw);
            for i in 0..np {
                k[i][..np].copy_from_slice(&ap[i]);
                for (c, w) in w_cols.iter().enumerate() {
                    k[i][np + c] = w[i];
                    k[np + c][i] = w[i];
                }
            }
            let mut rhs = vec![0.0; np + nw];
            rhs[np + which] = 1.0;
            solve_vec(&k, &rhs)[..np].to_vec()
        };
        let mut full = vec![0.0; self.n()];
        for (k, &i) in dofs.iter().enumerate() {
            full[i] = local[k];
        }
        full
    }

    /// Galerkin solution in the span of `cols`.
    pub fn coarse_solve(&self, cols: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let ac: Vec<Vec<f64>> = cols.iter().map(|c| matvec(&self.a, c)).collect();
        let g: Dense = cols.iter().map(|ci| ac.iter().map(|aj| dot(ci, aj)).collect()).collect();
        let rhs: Vec<f64> = cols.iter().map(|c| dot(c, b)).collect();
        let x = solve_vec(&g, &rhs);
        let mut u = vec![0.0; self.n()];
        for (c, xi) in cols.iter().zip(&x) {
            for (u, v) in u.iter_mut().zip(c) {
                *u += xi * v;
            }
        }
        u
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// `‖a - b‖∞ / ‖b‖∞`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    max_abs(&d) / max_abs(b).max(f64::MIN_POSITIVE)
}
