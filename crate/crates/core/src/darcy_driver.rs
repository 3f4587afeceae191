//! Coarse-scale Darcy solves in the multiscale space, error reports against
//! the fine DG solution, and the convergence and contrast studies.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aux_spectral::{build_aux_space, solve_all_local, AuxBasis, LocalEigen, Selection};
use crate::cem_basis::{build_multiscale_space, BasisMethod, BasisOptions, MultiscaleSpace};
use crate::dg_assembly::{
    assemble_forms, assemble_load, build_dof_map, energy_norm, l2_norm, AssembledForms, DGDofMap, FineSolver,
};
use crate::element::CELL_GAUSS;
use crate::error::{CemError, Result};
use crate::grids::{build_mesh_hierarchy, MeshHierarchy};
use crate::linalg::{dot, norm2};
use crate::msfem_pou::{build_pou, build_s_weight, PouKind, SWeight};
use crate::perm_field::{edge_kappa_bar, ChannelLayout, PermField};

pub type Source = dyn Fn(f64, f64) -> f64 + Sync;

pub const CSV_HEADER: &str = "H,m,method,contrast,energy_err_pct,l2_err_pct,lambda,lemma1_bound";

/// `u_ms = R x` with `(Rᵀ A R) x = Rᵀ b`.
pub fn coarse_solve(space: &MultiscaleSpace, b: &[f64]) -> Vec<f64> {
    let rhs = space.restrict(b);
    let x = space.stiffness_factor().solve(&rhs);
    space.prolong(&x)
}

/// `max_k |ψ_kᵀ (A u - b)| / max_k |ψ_kᵀ b|`.
pub fn galerkin_defect(space: &MultiscaleSpace, forms: &AssembledForms, u: &[f64], b: &[f64]) -> f64 {
    let au = forms.a.mul_vec(u);
    let r: Vec<f64> = au.iter().zip(b).map(|(a, b)| a - b).collect();
    let inf = |v: Vec<f64>| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    inf(space.restrict(&r)) / inf(space.restrict(b)).max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorReport {
    pub energy_pct: f64,
    pub l2_pct: f64,
    pub lambda: f64,
    pub lemma1_bound: f64,
}

/// `‖κ̃^{-1/2} f‖_{L²}` with the same 2x2 Gauss rule as the load vector and
/// the weighted mass; infinite if `κ̃` vanishes where `f` does not.
pub fn weighted_source_norm(mesh: &MeshHierarchy, sweight: &SWeight, f: &Source) -> f64 {
    let h = mesh.fine.h;
    let mut sum = 0.0;
    for cell in 0..mesh.fine.n_cells() {
        let (ox, oy) = mesh.fine.cell_origin(cell);
        for (g, &(xi, eta)) in CELL_GAUSS.iter().enumerate() {
            let fv = f(ox + xi * h, oy + eta * h);
            if fv == 0.0 {
                continue;
            }
            let k = sweight.values[cell][g];
            if k <= 0.0 {
                return f64::INFINITY;
            }
            sum += 0.25 * h * h * fv * fv / k;
        }
    }
    sum.sqrt()
}

/// Relative errors of `u_ms` against `u_h`, in percent.
pub fn error_report(u_h: &[f64], u_ms: &[f64], forms: &AssembledForms, lambda: f64, source_norm: f64) -> ErrorReport {
    let diff: Vec<f64> = u_h.iter().zip(u_ms).map(|(a, b)| a - b).collect();
    let ratio = |num: f64, den: f64| if den > 0.0 { 100.0 * num / den } else { 100.0 * num };
    ErrorReport {
        energy_pct: ratio(energy_norm(&diff, forms), energy_norm(u_h, forms)),
        l2_pct: ratio(l2_norm(&diff, forms), l2_norm(u_h, forms)),
        lambda,
        lemma1_bound: lambda.powf(-0.5) * source_norm,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DarcyConfig {
    pub coarse_nx: usize,
    pub pou: PouKind,
    pub selection: Selection,
    pub gamma: f64,
}

/// Everything shared by the coarse solves of one `(field, H)` pair.
pub struct DarcySetup {
    pub mesh: MeshHierarchy,
    pub dof: DGDofMap,
    pub forms: AssembledForms,
    pub sweight: SWeight,
    pub eigs: Vec<LocalEigen>,
    pub aux: AuxBasis,
    pub load: Vec<f64>,
    pub u_fine: Vec<f64>,
    pub source_norm: f64,
    pub contrast: f64,
}

pub fn prepare_darcy(field: &PermField, cfg: &DarcyConfig, f: &Source) -> Result<DarcySetup> {
    let mesh = build_mesh_hierarchy(field.nx, cfg.coarse_nx)?;
    field.check_grid(&mesh.fine)?;
    let pou = build_pou(cfg.pou, field, &mesh)?;
    let sweight = build_s_weight(&pou, field, &mesh);
    let kbar = edge_kappa_bar(field, &mesh.coarse);
    let dof = build_dof_map(&mesh);
    let forms = assemble_forms(&mesh, field, &kbar, &sweight, &dof, cfg.gamma)?;
    let eigs = solve_all_local(&forms, &dof)?;
    let aux = build_aux_space(cfg.selection, &eigs, &forms, &dof)?;
    let load = assemble_load(&mesh, &dof, f);
    let u_fine = FineSolver::new(&forms)?.solve(&forms, &load);
    let source_norm = weighted_source_norm(&mesh, &sweight, f);
    let contrast = field.max() / field.min();
    Ok(DarcySetup { mesh, dof, forms, sweight, eigs, aux, load, u_fine, source_norm, contrast })
}

pub struct DarcyRun {
    pub space: MultiscaleSpace,
    pub u_ms: Vec<f64>,
    pub report: ErrorReport,
}

impl DarcySetup {
    pub fn space(&self, opts: &BasisOptions) -> Result<MultiscaleSpace> {
        build_multiscale_space(&self.mesh, &self.forms, &self.aux, &self.dof, opts)
    }

    pub fn run(&self, opts: &BasisOptions) -> Result<DarcyRun> {
        let space = self.space(opts)?;
        let u_ms = coarse_solve(&space, &self.load);
        if u_ms.iter().any(|v| !v.is_finite()) {
            return Err(CemError::Rank("coarse solution is not finite".into()));
        }
        let report = error_report(&self.u_fine, &u_ms, &self.forms, self.aux.lambda, self.source_norm);
        Ok(DarcyRun { space, u_ms, report })
    }
}

/// One line of a study table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub coarse_nx: usize,
    /// `None` for the global construction.
    pub layers: Option<usize>,
    pub method: BasisMethod,
    pub contrast: f64,
    pub report: ErrorReport,
}

impl StudyRow {
    pub fn csv_line(&self) -> String {
        let m = self.layers.map_or_else(|| "inf".to_string(), |m| m.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            1.0 / self.coarse_nx as f64,
            m,
            self.method,
            self.contrast,
            self.report.energy_pct,
            self.report.l2_pct,
            self.report.lambda,
            self.report.lemma1_bound
        )
    }
}

fn row(setup: &DarcySetup, coarse_nx: usize, opts: &BasisOptions) -> Result<StudyRow> {
    let run = setup.run(opts)?;
    Ok(StudyRow {
        coarse_nx,
        layers: (opts.method != BasisMethod::Global).then_some(opts.layers),
        method: opts.method,
        contrast: setup.contrast,
        report: run.report,
    })
}

/// One row per `(Nx, m)` pair on a fixed field and source.
pub fn convergence_study(
    field: &PermField,
    cases: &[(usize, usize)],
    base: &DarcyConfig,
    basis: &BasisOptions,
    f: &Source,
) -> Result<Vec<StudyRow>> {
    let mut rows = Vec::with_capacity(cases.len());
    let mut current: Option<(usize, DarcySetup)> = None;
    for &(coarse_nx, m) in cases {
        if current.as_ref().map(|c| c.0) != Some(coarse_nx) {
            let cfg = DarcyConfig { coarse_nx, ..*base };
            current = Some((coarse_nx, prepare_darcy(field, &cfg, f)?));
        }
        let setup = &current.as_ref().unwrap().1;
        rows.push(row(setup, coarse_nx, &BasisOptions { layers: m, ..*basis })?);
    }
    Ok(rows)
}

/// Rows for every contrast and method on the channel layout at fine size
/// `nx`; `basis` supplies the layers and patch boundary.
pub fn contrast_study(
    layout: &ChannelLayout,
    nx: usize,
    contrasts: &[f64],
    cfg: &DarcyConfig,
    basis: &BasisOptions,
    methods: &[BasisMethod],
    f: &Source,
) -> Result<Vec<StudyRow>> {
    let mut rows = Vec::new();
    for &c in contrasts {
        let lay = ChannelLayout { contrast: c, ..layout.clone() };
        let mesh = build_mesh_hierarchy(nx, cfg.coarse_nx)?;
        let field = lay.field(&mesh.fine)?;
        let setup = prepare_darcy(&field, cfg, f)?;
        for &method in methods {
            rows.push(row(&setup, cfg.coarse_nx, &BasisOptions { method, ..*basis })?);
        }
    }
    Ok(rows)
}

/// The `m` of the coarse-size rule `m ≈ 4 log(1/H) / log(10)`, rounded up.
pub fn layers_for(coarse_nx: usize) -> usize {
    (4.0 * (coarse_nx as f64).log10() - 1e-9).ceil().max(1.0) as usize
}

pub fn write_study_csv(path: &Path, rows: &[StudyRow]) -> Result<()> {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| CemError::io(path, e))?;
    file.write_all(s.as_bytes()).map_err(|e| CemError::io(path, e))
}

/// Relative residual `‖A u - b‖ / ‖b‖` of a fine solution.
pub fn fine_residual(forms: &AssembledForms, u: &[f64], b: &[f64]) -> f64 {
    let au = forms.a.mul_vec(u);
    let r: Vec<f64> = au.iter().zip(b).map(|(a, b)| a - b).collect();
    norm2(&r) / norm2(b).max(f64::MIN_POSITIVE)
}

/// `‖u‖²_a` split as `(fᵀu)`: the fine energy identity `a(u, u) = (f, u)`.
pub fn energy_identity_defect(forms: &AssembledForms, u: &[f64], b: &[f64]) -> f64 {
    let e = forms.a.bilinear(u, u);
    (e - dot(b, u)).abs() / e.abs().max(f64::MIN_POSITIVE)
}
