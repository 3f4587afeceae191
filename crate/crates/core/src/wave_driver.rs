//! Explicit leapfrog time stepping of `u_tt - div(κ∇u) = f` in the fine DG
//! space and in a multiscale space, driven by a Ricker wavelet.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aux_spectral::{build_aux_space, solve_all_local, AuxBasis};
use crate::cem_basis::{build_multiscale_space, BasisMethod, BasisOptions, MultiscaleSpace};
use crate::darcy_driver::DarcyConfig;
use crate::dg_assembly::{assemble_forms, assemble_load, build_dof_map, energy_norm, l2_norm, AssembledForms, DGDofMap};
use crate::error::{CemError, Result};
use crate::grids::{build_mesh_hierarchy, MeshHierarchy};
use crate::linalg::{dot, DenseCholesky, SpdFactor};
use crate::msfem_pou::{build_pou, build_s_weight};
use crate::perm_field::{edge_kappa_bar, PermField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MassKind {
    #[default]
    Consistent,
    /// Row-sum lumping of the fine mass matrix.
    Lumped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveConfig {
    pub final_time: f64,
    pub dt: f64,
    pub f0: f64,
    /// Steps between stored snapshots; 0 stores none.
    pub stride: usize,
    #[serde(default)]
    pub mass: MassKind,
}

impl Default for WaveConfig {
    fn default() -> Self {
        WaveConfig { final_time: 0.2, dt: 1e-4, f0: 20.0, stride: 500, mass: MassKind::Consistent }
    }
}

impl WaveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(CemError::Config(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.final_time >= self.dt && self.final_time.is_finite()) {
            return Err(CemError::Config(format!(
                "final_time = {} must be at least dt = {}",
                self.final_time, self.dt
            )));
        }
        if !(self.f0 > 0.0 && self.f0.is_finite()) {
            return Err(CemError::Config(format!("f0 = {} must be positive", self.f0)));
        }
        Ok(())
    }

    /// Index `N` of the last time level, `t_N = N dt ≈ T`.
    pub fn n_steps(&self) -> usize {
        (self.final_time / self.dt).round() as usize
    }
}

/// Temporal factor `(t - 2/f₀)/(4h²) exp(-π² f₀² (t - 2/f₀)²)`.
pub fn ricker_time(t: f64, f0: f64, h: f64) -> f64 {
    let s = t - 2.0 / f0;
    s / (4.0 * h * h) * (-PI * PI * f0 * f0 * s * s).exp()
}

/// Gaussian spatial factor centred at `(0.5, 0.5)` with width `2h`.
pub fn ricker_space(x: f64, y: f64, h: f64) -> f64 {
    let r2 = (x - 0.5).powi(2) + (y - 0.5).powi(2);
    (-r2 / (4.0 * h * h)).exp()
}

pub fn ricker_source(t: f64, x: f64, y: f64, f0: f64, h: f64) -> f64 {
    ricker_time(t, f0, h) * ricker_space(x, y, h)
}

/// Two consecutive time levels `u^{n-1}`, `u^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveState {
    pub prev: Vec<f64>,
    pub curr: Vec<f64>,
    pub step: usize,
}

impl WaveState {
    /// Quiescent start `u⁰ = u¹ = 0`.
    pub fn zeros(n: usize) -> Self {
        WaveState { prev: vec![0.0; n], curr: vec![0.0; n], step: 1 }
    }

    /// The same pair with time running backwards.
    pub fn reversed(&self) -> Self {
        WaveState { prev: self.curr.clone(), curr: self.prev.clone(), step: self.step }
    }

    #[cfg(test)]
    fn max_abs(&self) -> f64 {
        self.curr.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

enum MassSolve {
    Factor(SpdFactor),
    Diagonal(Vec<f64>),
}

impl MassSolve {
    fn new(m: &crate::linalg::SparseMat, kind: MassKind) -> Result<Self> {
        match kind {
            MassKind::Consistent => Ok(MassSolve::Factor(SpdFactor::new(m)?)),
            MassKind::Lumped => {
                let d: Vec<f64> = (0..m.nrows).map(|i| m.row(i).1.iter().sum()).collect();
                if let Some(i) = d.iter().position(|&v| !(v > 0.0)) {
                    return Err(CemError::Definiteness(format!("lumped mass entry {i} is {}", d[i])));
                }
                Ok(MassSolve::Diagonal(d))
            }
        }
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        match self {
            MassSolve::Factor(f) => f.solve_in_place(x),
            MassSolve::Diagonal(d) => x.iter_mut().zip(d).for_each(|(v, d)| *v /= d),
        }
    }
}

enum Propagator<'a> {
    Fine { forms: &'a AssembledForms, mass: MassSolve },
    /// Row-major `M_r⁻¹ A_r`.
    Reduced { space: &'a MultiscaleSpace, k: Vec<f64>, n: usize },
}

/// The semi-discrete system `ü + M⁻¹A u = g(t) M⁻¹ b` in fine or reduced
/// coordinates.
pub struct WaveSystem<'a> {
    prop: Propagator<'a>,
    forcing: Vec<f64>,
}

impl<'a> WaveSystem<'a> {
    /// Fine DG system with spatial load `load`.
    pub fn fine(forms: &'a AssembledForms, load: &[f64], mass: MassKind) -> Result<Self> {
        let mass = MassSolve::new(&forms.m, mass)?;
        let mut forcing = load.to_vec();
        mass.solve_in_place(&mut forcing);
        Ok(WaveSystem { prop: Propagator::Fine { forms, mass }, forcing })
    }

    /// Galerkin projection onto `space`.
    pub fn reduced(
        space: &'a MultiscaleSpace,
        forms: &AssembledForms,
        dof: &DGDofMap,
        load: &[f64],
        mass: MassKind,
    ) -> Result<Self> {
        let n = space.n_ms();
        let m = match mass {
            MassKind::Consistent => space.gram(&forms.m, dof),
            MassKind::Lumped => {
                let d: Vec<f64> = (0..forms.m.nrows).map(|i| forms.m.row(i).1.iter().sum()).collect();
                let lumped = crate::linalg::SparseMat::from_diagonal(&d);
                space.gram(&lumped, dof)
            }
        };
        let mf = DenseCholesky::new(m)
            .map_err(|p| CemError::Rank(format!("reduced mass matrix is singular at pivot {p}")))?;
        let a = space.gram(&forms.a, dof);
        let mut kc: Vec<f64> = (0..n).flat_map(|j| (0..n).map(move |i| (i, j))).map(|(i, j)| a[(i, j)]).collect();
        mf.solve_many_in_place(&mut kc, n);
        let k: Vec<f64> = (0..n * n).map(|idx| kc[(idx % n) * n + idx / n]).collect();
        let forcing = mf.solve(&space.restrict(load));
        Ok(WaveSystem { prop: Propagator::Reduced { space, k, n }, forcing })
    }

    pub fn dim(&self) -> usize {
        self.forcing.len()
    }

    /// `M⁻¹ A x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        match &self.prop {
            Propagator::Fine { forms, mass } => {
                forms.a.mul_vec_into(x, out);
                mass.solve_in_place(out);
            }
            Propagator::Reduced { k, n, .. } => {
                out.par_iter_mut().enumerate().for_each(|(i, o)| *o = dot(&k[i * n..(i + 1) * n], x));
            }
        }
    }

    /// Coefficients in the fine DG space.
    pub fn to_dg(&self, x: &[f64]) -> Vec<f64> {
        match &self.prop {
            Propagator::Fine { .. } => x.to_vec(),
            Propagator::Reduced { space, .. } => space.prolong(x),
        }
    }

    /// Power-iteration estimate of the largest eigenvalue of `M⁻¹A`.
    pub fn spectral_radius(&self, iterations: usize) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 0.0;
        }
        // Deterministic start with components in every direction.
        let mut x: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 101) as f64 / 101.0).collect();
        let mut y = vec![0.0; n];
        let mut rho = 0.0;
        for _ in 0..iterations {
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v /= nx);
            self.apply(&x, &mut y);
            rho = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            std::mem::swap(&mut x, &mut y);
        }
        rho
    }

    /// Largest stable leapfrog step `2/√ρ(M⁻¹A)`.
    pub fn cfl_limit(&self, iterations: usize) -> f64 {
        2.0 / self.spectral_radius(iterations).sqrt()
    }

    /// `u^{n+1} = 2uⁿ - u^{n-1} + dt² (g M⁻¹b - M⁻¹A uⁿ)`.
    pub fn step(&self, state: &mut WaveState, dt: f64, amplitude: f64, work: &mut Vec<f64>) -> Result<()> {
        work.resize(self.dim(), 0.0);
        self.apply(&state.curr, work);
        let dt2 = dt * dt;
        let mut finite = true;
        for i in 0..work.len() {
            let next = 2.0 * state.curr[i] - state.prev[i] + dt2 * (amplitude * self.forcing[i] - work[i]);
            finite &= next.is_finite();
            state.prev[i] = next;
        }
        std::mem::swap(&mut state.prev, &mut state.curr);
        state.step += 1;
        if !finite {
            return Err(CemError::Instability {
                step: state.step,
                reason: format!("non-finite values; reduce dt = {dt:e} below the CFL limit"),
            });
        }
        Ok(())
    }

    /// Source-free steps, used for stability and reversibility checks.
    pub fn free_steps(&self, state: &mut WaveState, dt: f64, n: usize) -> Result<()> {
        let mut work = Vec::new();
        for _ in 0..n {
            self.step(state, dt, 0.0, &mut work)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub time: f64,
    /// Fine DG coefficients.
    pub values: Vec<f64>,
}

pub struct WaveRun {
    pub state: WaveState,
    pub snapshots: Vec<Snapshot>,
}

impl WaveRun {
    pub fn final_dg(&self, system: &WaveSystem) -> Vec<f64> {
        system.to_dg(&self.state.curr)
    }
}

/// Runs from `u⁰ = u¹ = 0` to `t_N`, with `g(t)` the temporal source factor.
pub fn leapfrog_run(system: &WaveSystem, cfg: &WaveConfig, g: &(dyn Fn(f64) -> f64 + Sync)) -> Result<WaveRun> {
    cfg.validate()?;
    let n_steps = cfg.n_steps();
    let mut state = WaveState::zeros(system.dim());
    let mut snapshots = Vec::new();
    let mut work = Vec::new();
    while state.step < n_steps {
        let t = state.step as f64 * cfg.dt;
        system.step(&mut state, cfg.dt, g(t), &mut work)?;
        if cfg.stride > 0 && (state.step % cfg.stride == 0 || state.step == n_steps) {
            snapshots.push(Snapshot {
                step: state.step,
                time: state.step as f64 * cfg.dt,
                values: system.to_dg(&state.curr),
            });
        }
    }
    Ok(WaveRun { state, snapshots })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaveErrors {
    pub energy_pct: f64,
    pub l2_pct: f64,
}

pub fn wave_error(u_fine: &[f64], u_ms: &[f64], forms: &AssembledForms) -> WaveErrors {
    let diff: Vec<f64> = u_fine.iter().zip(u_ms).map(|(a, b)| a - b).collect();
    let ratio = |num: f64, den: f64| if den > 0.0 { 100.0 * num / den } else { 100.0 * num };
    WaveErrors {
        energy_pct: ratio(energy_norm(&diff, forms), energy_norm(u_fine, forms)),
        l2_pct: ratio(l2_norm(&diff, forms), l2_norm(u_fine, forms)),
    }
}

/// Value of a DG function at `(x, y)`, bilinear inside the fine cell and
/// taken from the block containing the point.
pub fn evaluate_at(mesh: &MeshHierarchy, dof: &DGDofMap, v: &[f64], x: f64, y: f64) -> f64 {
    let fine = &mesh.fine;
    let h = fine.h;
    let cx = ((x / h).floor().max(0.0) as usize).min(fine.nx - 1);
    let cy = ((y / h).floor().max(0.0) as usize).min(fine.ny - 1);
    let s = (x / h - cx as f64).clamp(0.0, 1.0);
    let t = (y / h - cy as f64).clamp(0.0, 1.0);
    let block = mesh.coarse.block_of_cell(fine.cell_index(cx, cy));
    let (bx, by) = mesh.coarse.block_ij(block);
    let r = mesh.coarse.ratio;
    let (lx, ly) = (cx - bx * r, cy - by * r);
    let val = |i: usize, j: usize| dof.dof(block, lx + i, ly + j).map_or(0.0, |k| v[k]);
    (1.0 - s) * (1.0 - t) * val(0, 0) + s * (1.0 - t) * val(1, 0) + (1.0 - s) * t * val(0, 1) + s * t * val(1, 1)
}

/// Receiver traces: one row per snapshot, one column per receiver.
pub fn seismogram(
    mesh: &MeshHierarchy,
    dof: &DGDofMap,
    snapshots: &[Snapshot],
    receivers: &[(f64, f64)],
) -> Vec<(f64, Vec<f64>)> {
    snapshots
        .iter()
        .map(|s| (s.time, receivers.iter().map(|&(x, y)| evaluate_at(mesh, dof, &s.values, x, y)).collect()))
        .collect()
}

/// Fine operators, auxiliary space, spatial load and the fine trajectory for
/// one `(field, H)` pair.
pub struct WaveSetup {
    pub mesh: MeshHierarchy,
    pub dof: DGDofMap,
    pub forms: AssembledForms,
    pub aux: AuxBasis,
    pub load: Vec<f64>,
    pub config: WaveConfig,
}

pub fn prepare_wave(field: &PermField, cfg: &DarcyConfig, wave: &WaveConfig) -> Result<WaveSetup> {
    wave.validate()?;
    let mesh = build_mesh_hierarchy(field.nx, cfg.coarse_nx)?;
    field.check_grid(&mesh.fine)?;
    let pou = build_pou(cfg.pou, field, &mesh)?;
    let sweight = build_s_weight(&pou, field, &mesh);
    let kbar = edge_kappa_bar(field, &mesh.coarse);
    let dof = build_dof_map(&mesh);
    let forms = assemble_forms(&mesh, field, &kbar, &sweight, &dof, cfg.gamma)?;
    let eigs = solve_all_local(&forms, &dof)?;
    let aux = build_aux_space(cfg.selection, &eigs, &forms, &dof)?;
    let h = mesh.fine.h;
    let load = assemble_load(&mesh, &dof, &|x, y| ricker_space(x, y, h));
    Ok(WaveSetup { mesh, dof, forms, aux, load, config: *wave })
}

impl WaveSetup {
    pub fn source_time(&self) -> impl Fn(f64) -> f64 + Sync {
        let (f0, h) = (self.config.f0, self.mesh.fine.h);
        move |t| ricker_time(t, f0, h)
    }

    pub fn fine_system(&self) -> Result<WaveSystem<'_>> {
        WaveSystem::fine(&self.forms, &self.load, self.config.mass)
    }

    pub fn space(&self, opts: &BasisOptions) -> Result<MultiscaleSpace> {
        build_multiscale_space(&self.mesh, &self.forms, &self.aux, &self.dof, opts)
    }

    pub fn reduced_system<'a>(&'a self, space: &'a MultiscaleSpace) -> Result<WaveSystem<'a>> {
        WaveSystem::reduced(space, &self.forms, &self.dof, &self.load, self.config.mass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaveStudyRow {
    pub coarse_nx: usize,
    pub layers: usize,
    pub method: BasisMethod,
    pub errors: WaveErrors,
}

/// Reduced-versus-fine errors at the final time for each `(Nx, m)` case.
pub fn wave_study(
    field: &PermField,
    cases: &[(usize, usize)],
    base: &DarcyConfig,
    wave: &WaveConfig,
    basis: &BasisOptions,
) -> Result<Vec<WaveStudyRow>> {
    let mut rows = Vec::with_capacity(cases.len());
    for &(coarse_nx, layers) in cases {
        let setup = prepare_wave(field, &DarcyConfig { coarse_nx, ..*base }, wave)?;
        let g = setup.source_time();
        let reference = leapfrog_run(&setup.fine_system()?, &WaveConfig { stride: 0, ..*wave }, &g)?.state.curr;
        let opts = BasisOptions { layers, ..*basis };
        let space = setup.space(&opts)?;
        let sys = setup.reduced_system(&space)?;
        let run = leapfrog_run(&sys, &WaveConfig { stride: 0, ..*wave }, &g)?;
        let errors = wave_error(&reference, &run.final_dg(&sys), &setup.forms);
        rows.push(WaveStudyRow { coarse_nx, layers, method: opts.method, errors });
    }
    Ok(rows)
}
