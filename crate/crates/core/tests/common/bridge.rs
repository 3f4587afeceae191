//! Runs the library and the dense reference side by side on tiny meshes and
//! reports the worst relative discrepancy of each compared quantity.

use super::{rel_diff, Dense, Oracle};
use cem_dg::aux_spectral::{build_aux_space, solve_all_local, AuxBasis, Selection};
use cem_dg::cem_basis::{
    build_global_basis, build_localized_basis, build_multiscale_space, build_relaxed_basis, BasisMethod,
    BasisOptions, PatchBoundary,
};
use cem_dg::darcy_driver::coarse_solve;
use cem_dg::dg_assembly::{assemble_forms, assemble_load, build_dof_map, fine_solve, sine_source, AssembledForms, DGDofMap};
use cem_dg::grids::{build_mesh_hierarchy, oversample_region, FineGrid, MeshHierarchy};
use cem_dg::linalg::SparseMat;
use cem_dg::msfem_pou::{build_pou, build_s_weight, PouKind};
use cem_dg::perm_field::{edge_kappa_bar, generate_field, CellRect, FieldSpec, PermField};
use cem_dg::wave_driver::{leapfrog_run, MassKind, WaveConfig, WaveSystem};

pub struct Lib {
    pub mesh: MeshHierarchy,
    pub dof: DGDofMap,
    pub forms: AssembledForms,
    pub aux: AuxBasis,
    pub load: Vec<f64>,
}

pub type Report = Vec<(String, f64)>;

pub fn two_channels(nx: usize, contrast: f64) -> PermField {
    let spec = FieldSpec {
        background: 1.0,
        contrast,
        rects: vec![CellRect { x0: 0, x1: nx, y0: 2, y1: 3 }, CellRect { x0: 1, x1: 7, y0: 5, y1: 6 }],
    };
    generate_field(&spec, &FineGrid { nx, ny: nx, h: 1.0 / nx as f64 }).unwrap()
}

/// Two channels over a mildly varying background, so no block is symmetric.
pub fn perturbed_channels(nx: usize, contrast: f64) -> PermField {
    let mut field = two_channels(nx, contrast);
    for (c, v) in field.values.iter_mut().enumerate() {
        *v *= 1.0 + 0.3 * ((c * 37 + 5) % 11) as f64 / 11.0;
    }
    field
}

pub fn library(field: &PermField, coarse_nx: usize, l: usize) -> Lib {
    let mesh = build_mesh_hierarchy(field.nx, coarse_nx).unwrap();
    let pou = build_pou(PouKind::Msfem, field, &mesh).unwrap();
    let sweight = build_s_weight(&pou, field, &mesh);
    let kbar = edge_kappa_bar(field, &mesh.coarse);
    let dof = build_dof_map(&mesh);
    let forms = assemble_forms(&mesh, field, &kbar, &sweight, &dof, 4.0).unwrap();
    let eigs = solve_all_local(&forms, &dof).unwrap();
    let aux = build_aux_space(Selection::Fixed(l), &eigs, &forms, &dof).unwrap();
    let load = assemble_load(&mesh, &dof, &sine_source);
    Lib { mesh, dof, forms, aux, load }
}

pub fn oracle_for(field: &PermField, coarse_nx: usize) -> Oracle {
    let nx = field.nx;
    Oracle::new(nx, coarse_nx, |cx, cy| field.values[cy * nx + cx], 4.0)
}

/// Library DOF of each oracle unknown.
pub fn perm(o: &Oracle, lib: &Lib) -> Vec<usize> {
    o.dofs.iter().map(|&(b, lx, ly)| lib.dof.dof(b, lx, ly).unwrap()).collect()
}

pub fn to_oracle(v: &[f64], p: &[usize]) -> Vec<f64> {
    p.iter().map(|&d| v[d]).collect()
}

fn matrix_diff(lib: &SparseMat, dense: &Dense, p: &[usize]) -> f64 {
    let scale = dense.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut worst = 0.0f64;
    for (i, &di) in p.iter().enumerate() {
        for (j, &dj) in p.iter().enumerate() {
            worst = worst.max((lib.get(di, dj) - dense[i][j]).abs());
        }
    }
    worst / scale
}

fn record(report: &mut Report, name: &str, d: f64) {
    match report.iter_mut().find(|(n, _)| n == name) {
        Some((_, w)) => *w = w.max(d),
        None => report.push((name.to_string(), d)),
    }
}

/// Oracle eigenvectors with signs matched to the library's; records the
/// eigenvalue and eigenvector discrepancies.
pub fn aligned_aux(o: &Oracle, lib: &Lib, p: &[usize], l: usize, report: &mut Report) -> Vec<Vec<Vec<f64>>> {
    o.aux(l)
        .into_iter()
        .enumerate()
        .map(|(b, (vals, mut phis))| {
            let lb = &lib.aux.blocks[b];
            let range = lib.dof.block_range(b);
            for j in 0..l {
                let gap = (vals[j + 1] - vals[j]).abs() / vals[j + 1].abs().max(1.0);
                assert!(gap > 1e-6, "block {b}: eigenvalue {j} is nearly repeated");
                record(report, "eigenvalues", (vals[j] - lb.values[j]).abs() / vals[l].abs().max(1.0));
                let lib_phi: Vec<f64> = p
                    .iter()
                    .map(|&d| if range.contains(&d) { lb.phi[(d - range.start, j)] } else { 0.0 })
                    .collect();
                let sp = super::matvec(&o.s, &phis[j]);
                if super::dot(&lib_phi, &sp) < 0.0 {
                    phis[j].iter_mut().for_each(|v| *v = -*v);
                }
                record(report, "eigenvectors", rel_diff(&lib_phi, &phis[j]));
            }
            phis
        })
        .collect()
}

/// `A`, volume, `S`, `M` and the load vector.
pub fn operator_report(field: &PermField, coarse_nx: usize) -> Report {
    let lib = library(field, coarse_nx, 2);
    let o = oracle_for(field, coarse_nx);
    assert_eq!(o.n(), lib.dof.n_dof);
    let p = perm(&o, &lib);
    let mut report = Report::new();
    for (name, m, d) in [
        ("a_dg", &lib.forms.a, &o.a),
        ("volume", &lib.forms.volume, &o.volume),
        ("s", &lib.forms.s, &o.s),
        ("mass", &lib.forms.m, &o.m),
    ] {
        record(&mut report, name, matrix_diff(m, d, &p));
    }
    record(&mut report, "load", rel_diff(&to_oracle(&lib.load, &p), &o.load(sine_source)));
    report
}

/// Fine solve, global, localized (`layers` 2) and relaxed bases, and the
/// coarse solve on a 2x2 coarse grid with `l` auxiliary functions per block.
pub fn two_by_two_report(field: &PermField, l: usize) -> Report {
    let lib = library(field, 2, l);
    let o = oracle_for(field, 2);
    let p = perm(&o, &lib);
    let mut report = Report::new();

    let b = o.load(sine_source);
    let u_ref = super::solve_vec(&o.a, &b);
    let u = fine_solve(&lib.forms, &lib.load).unwrap();
    record(&mut report, "fine solve", rel_diff(&to_oracle(&u, &p), &u_ref));

    let phis = aligned_aux(&o, &lib, &p, l, &mut report);
    let all: Vec<usize> = (0..4).collect();
    let mut global_cols = Vec::new();
    for blk in 0..4 {
        let region = oversample_region(&lib.mesh.coarse, blk, 2).unwrap();
        for j in 0..l {
            let reference = o.basis(&phis, &all, (blk, j), false);
            let g = build_global_basis(&lib.mesh, &lib.forms, &lib.aux, &lib.dof, blk, j).unwrap();
            record(&mut report, "global basis", rel_diff(&to_oracle(&g, &p), &reference));

            let loc = build_localized_basis(&lib.mesh, &lib.forms, &lib.aux, &lib.dof, &region, j, PatchBoundary::Free)
                .unwrap();
            record(&mut report, "localized basis", rel_diff(&to_oracle(&loc, &p), &reference));

            let relaxed_ref = o.basis(&phis, &o.patch(blk, 2), (blk, j), true);
            let rel = build_relaxed_basis(&lib.mesh, &lib.forms, &lib.aux, &lib.dof, &region, j, PatchBoundary::Free)
                .unwrap();
            record(&mut report, "relaxed basis", rel_diff(&to_oracle(&rel, &p), &relaxed_ref));
            global_cols.push(reference);
        }
    }

    let space =
        build_multiscale_space(&lib.mesh, &lib.forms, &lib.aux, &lib.dof, &BasisOptions::new(BasisMethod::Lagrange, 2))
            .unwrap();
    let u_ms = coarse_solve(&space, &lib.load);
    record(&mut report, "coarse solve", rel_diff(&to_oracle(&u_ms, &p), &o.coarse_solve(&global_cols, &b)));
    report
}

/// Localized and relaxed bases with one layer on a 4x4 coarse grid, where
/// patches do not cover the domain, and the resulting coarse solves.
pub fn small_patch_report(field: &PermField, l: usize) -> Report {
    let lib = library(field, 4, l);
    let o = oracle_for(field, 4);
    let p = perm(&o, &lib);
    let mut report = Report::new();
    let phis = aligned_aux(&o, &lib, &p, l, &mut report);
    let b = o.load(sine_source);
    for (method, relaxed) in [(BasisMethod::Lagrange, false), (BasisMethod::Relaxed, true)] {
        let mut cols = Vec::new();
        for blk in 0..16 {
            let region = oversample_region(&lib.mesh.coarse, blk, 1).unwrap();
            for j in 0..l {
                let reference = o.basis(&phis, &o.patch(blk, 1), (blk, j), relaxed);
                let v = if relaxed {
                    build_relaxed_basis(&lib.mesh, &lib.forms, &lib.aux, &lib.dof, &region, j, PatchBoundary::Free)
                } else {
                    build_localized_basis(&lib.mesh, &lib.forms, &lib.aux, &lib.dof, &region, j, PatchBoundary::Free)
                }
                .unwrap();
                record(&mut report, &format!("{method} basis"), rel_diff(&to_oracle(&v, &p), &reference));
                cols.push(reference);
            }
        }
        let space =
            build_multiscale_space(&lib.mesh, &lib.forms, &lib.aux, &lib.dof, &BasisOptions::new(method, 1)).unwrap();
        let u_ms = coarse_solve(&space, &lib.load);
        record(&mut report, &format!("{method} coarse solve"), rel_diff(&to_oracle(&u_ms, &p), &o.coarse_solve(&cols, &b)));
    }
    report
}

/// Ten leapfrog steps from rest with `u^{n+1} = 2uⁿ - u^{n-1} + dt² M⁻¹(g(t_n) b - A uⁿ)`,
/// in the span of `cols` (or the full space when `cols` is empty).
fn reference_leapfrog(o: &Oracle, cols: &[Vec<f64>], b: &[f64], dt: f64, g: impl Fn(f64) -> f64) -> Vec<f64> {
    let (a, m, rhs) = if cols.is_empty() {
        (o.a.clone(), o.m.clone(), b.to_vec())
    } else {
        let rt: Dense = cols.to_vec();
        let r = super::transpose(&rt);
        (
            super::matmul(&rt, &super::matmul(&o.a, &r)),
            super::matmul(&rt, &super::matmul(&o.m, &r)),
            super::matvec(&rt, b),
        )
    };
    let n = a.len();
    let mut prev = vec![0.0; n];
    let mut curr = vec![0.0; n];
    for step in 1..11 {
        let t = step as f64 * dt;
        let au = super::matvec(&a, &curr);
        let force: Vec<f64> = (0..n).map(|i| g(t) * rhs[i] - au[i]).collect();
        let acc = super::solve_vec(&m, &force);
        let next: Vec<f64> = (0..n).map(|i| 2.0 * curr[i] - prev[i] + dt * dt * acc[i]).collect();
        prev = std::mem::replace(&mut curr, next);
    }
    if cols.is_empty() {
        curr
    } else {
        (0..o.n()).map(|i| cols.iter().zip(&curr).map(|(c, x)| c[i] * x).sum()).collect()
    }
}

/// Ten steps of the fine and of the globally reduced wave system.
pub fn wave_report(field: &PermField, l: usize) -> Report {
    let lib = library(field, 2, l);
    let o = oracle_for(field, 2);
    let p = perm(&o, &lib);
    let mut report = Report::new();
    let h = 1.0 / field.nx as f64;
    let bump = |x: f64, y: f64| (-((x - 0.5).powi(2) + (y - 0.5).powi(2)) / (4.0 * h * h)).exp();
    let b_lib = assemble_load(&lib.mesh, &lib.dof, &bump);
    let b = o.load(bump);
    let g = |t: f64| 1.0 + 300.0 * t;

    let fine = WaveSystem::fine(&lib.forms, &b_lib, MassKind::Consistent).unwrap();
    let dt = 0.5 * fine.cfl_limit(200);
    let cfg = WaveConfig { final_time: 11.0 * dt, dt, f0: 20.0, stride: 0, mass: MassKind::Consistent };
    assert_eq!(cfg.n_steps(), 11);
    let run = leapfrog_run(&fine, &cfg, &g).unwrap();
    let reference = reference_leapfrog(&o, &[], &b, dt, g);
    record(&mut report, "fine wave", rel_diff(&to_oracle(&run.final_dg(&fine), &p), &reference));

    let phis = aligned_aux(&o, &lib, &p, l, &mut report);
    let all: Vec<usize> = (0..4).collect();
    let cols: Vec<Vec<f64>> =
        (0..4).flat_map(|blk| (0..l).map(move |j| (blk, j))).map(|t| o.basis(&phis, &all, t, false)).collect();
    let space =
        build_multiscale_space(&lib.mesh, &lib.forms, &lib.aux, &lib.dof, &BasisOptions::new(BasisMethod::Global, 0))
            .unwrap();
    let reduced = WaveSystem::reduced(&space, &lib.forms, &lib.dof, &b_lib, MassKind::Consistent).unwrap();
    let run = leapfrog_run(&reduced, &cfg, &g).unwrap();
    let reference = reference_leapfrog(&o, &cols, &b, dt, g);
    record(&mut report, "reduced wave", rel_diff(&to_oracle(&run.final_dg(&reduced), &p), &reference));
    report
}

/// Largest discrepancy, excluding the eigen diagnostics.
pub fn worst(report: &Report) -> (String, f64) {
    report
        .iter()
        .filter(|(n, _)| !n.starts_with("eigen"))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default()
}
