//! Command-line front end: a JSON experiment document, optional top-level
//! overrides, and one subcommand per experiment pattern.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aux_spectral::{solve_all_local, write_eigenvalues_csv, Selection};
use crate::cem_basis::{BasisMethod, BasisOptions, PatchBoundary};
use crate::darcy_driver::{
    contrast_study, convergence_study, layers_for, prepare_darcy, write_study_csv, DarcyConfig, Source, StudyRow,
};
use crate::dg_assembly::{assemble_forms, build_dof_map, sine_source, DGDofMap};
use crate::error::{CemError, Result};
use crate::grids::{build_mesh_hierarchy, FineGrid};
use crate::msfem_pou::{build_pou, build_s_weight, PouKind};
use crate::perm_field::{
    edge_kappa_bar, generate_field, load_field_raster, save_field_raster, write_pgm, write_raster, ChannelLayout,
    FieldSpec, LayeredLayout, PermField,
};
use crate::wave_driver::{leapfrog_run, prepare_wave, seismogram, wave_error, wave_study, WaveConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum FieldConfig {
    Channels(ChannelLayout),
    Layered(LayeredLayout),
    Uniform { value: f64 },
    Rects(FieldSpec),
    Raster { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Darcy,
    Wave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// `2π² sin(πx) sin(πy)`.
    Sine,
    Unit,
}

impl SourceKind {
    fn function(self) -> &'static Source {
        match self {
            SourceKind::Sine => &sine_source,
            SourceKind::Unit => &|_, _| 1.0,
        }
    }
}

fn default_gamma() -> f64 {
    4.0
}
fn default_pou() -> PouKind {
    PouKind::Msfem
}
fn default_selection() -> Selection {
    Selection::Fixed(3)
}
fn default_method() -> BasisMethod {
    BasisMethod::Lagrange
}
fn default_methods() -> Vec<BasisMethod> {
    vec![BasisMethod::Lagrange, BasisMethod::Relaxed]
}
fn default_contrasts() -> Vec<f64> {
    vec![1e4, 1e5, 1e6, 1e7, 1e8]
}
fn default_source() -> SourceKind {
    SourceKind::Sine
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub nx: usize,
    pub coarse_nx: Vec<usize>,
    pub field: FieldConfig,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_pou")]
    pub pou: PouKind,
    #[serde(default = "default_selection")]
    pub selection: Selection,
    #[serde(default = "default_method")]
    pub method: BasisMethod,
    /// Methods compared by the contrast study.
    #[serde(default = "default_methods")]
    pub methods: Vec<BasisMethod>,
    /// Oversampling layers per coarse size; empty selects the coarse-size rule.
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default)]
    pub boundary: PatchBoundary,
    #[serde(default = "default_contrasts")]
    pub contrasts: Vec<f64>,
    #[serde(default = "default_problem")]
    pub problem: Problem,
    #[serde(default = "default_source")]
    pub source: SourceKind,
    #[serde(default)]
    pub wave: WaveConfig,
    #[serde(default)]
    pub receivers: Vec<(f64, f64)>,
    /// Block whose basis functions `dump-basis` writes.
    #[serde(default)]
    pub block: usize,
    /// 0 uses every core.
    #[serde(default)]
    pub threads: usize,
    /// Replaces the seed of generated layouts.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_problem() -> Problem {
    Problem::Darcy
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(CemError::Config(format!("{field}: {why}")));
        if self.nx == 0 {
            return bad("nx", "must be positive".into());
        }
        if self.coarse_nx.is_empty() {
            return bad("coarse_nx", "list is empty".into());
        }
        if let Some(c) = self.coarse_nx.iter().find(|&&c| c == 0 || self.nx % c != 0) {
            return bad("coarse_nx", format!("{c} does not divide nx = {}", self.nx));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma", format!("{} must be positive", self.gamma));
        }
        match self.selection {
            Selection::Fixed(0) => return bad("selection", "needs at least one function per block".into()),
            Selection::Threshold(t) if !(t > 0.0 && t.is_finite()) => {
                return bad("selection", format!("threshold {t} must be positive"));
            }
            _ => {}
        }
        if self.methods.is_empty() {
            return bad("methods", "list is empty".into());
        }
        if !self.layers.is_empty() && self.layers.len() != self.coarse_nx.len() {
            return bad(
                "layers",
                format!("has {} entries for {} coarse sizes", self.layers.len(), self.coarse_nx.len()),
            );
        }
        if self.contrasts.is_empty() {
            return bad("contrasts", "list is empty".into());
        }
        if let Some(c) = self.contrasts.iter().find(|&&c| !(c >= 1.0 && c.is_finite())) {
            return bad("contrasts", format!("{c} must be finite and at least 1"));
        }
        self.wave.validate().or_else(|e| bad("wave", e.to_string()))?;
        if let FieldConfig::Uniform { value } = self.field {
            if !(value > 0.0 && value.is_finite()) {
                return bad("field.value", format!("{value} must be positive"));
            }
        }
        if let FieldConfig::Raster { path } = &self.field {
            if !path.exists() {
                return bad("field.path", format!("{} does not exist", path.display()));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> FineGrid {
        FineGrid { nx: self.nx, ny: self.nx, h: 1.0 / self.nx as f64 }
    }

    pub fn build_field(&self) -> Result<PermField> {
        let grid = self.grid();
        let field = match &self.field {
            FieldConfig::Channels(l) => ChannelLayout { seed: self.seed.unwrap_or(l.seed), ..l.clone() }.field(&grid)?,
            FieldConfig::Layered(l) => LayeredLayout { seed: self.seed.unwrap_or(l.seed), ..l.clone() }.field(&grid),
            FieldConfig::Uniform { value } => PermField::uniform(self.nx, *value),
            FieldConfig::Rects(spec) => generate_field(spec, &grid)?,
            FieldConfig::Raster { path } => load_field_raster(path)?,
        };
        field.check_grid(&grid)?;
        Ok(field)
    }

    pub fn darcy_config(&self, coarse_nx: usize) -> DarcyConfig {
        DarcyConfig { coarse_nx, pou: self.pou, selection: self.selection, gamma: self.gamma }
    }

    /// `(Nx, m)` pairs, with the coarse-size rule filling in missing layers.
    pub fn cases(&self) -> Vec<(usize, usize)> {
        self.coarse_nx
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, self.layers.get(i).copied().unwrap_or_else(|| layers_for(c))))
            .collect()
    }

    pub fn basis(&self, layers: usize) -> BasisOptions {
        BasisOptions { method: self.method, layers, boundary: self.boundary }
    }
}

/// Parses `key=value` overrides of top-level keys; values are read as JSON
/// when possible and as strings otherwise.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| CemError::Config("configuration must be a JSON object".into()))?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CemError::Config(format!("override `{o}` is not of the form key=value")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        obj.insert(k.trim().to_string(), value);
    }
    Ok(())
}

pub fn parse_config(doc: Value) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| CemError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CemError::io(path, e))?;
    let mut doc: Value =
        serde_json::from_str(&text).map_err(|e| CemError::Config(format!("{}: {e}", path.display())))?;
    apply_overrides(&mut doc, overrides)?;
    parse_config(doc)
}

#[derive(Debug, Parser)]
#[command(name = "cem-dg", version, about = "Multiscale DG solver for high-contrast flow and waves")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment configuration.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; every artifact path is relative to it.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Override a top-level configuration key, e.g. `--set gamma=8`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (overrides the configuration; CEM_THREADS overrides both).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write the permeability raster and a preview.
    GenerateField,
    /// Fine and multiscale Darcy solves for each coarse size.
    SolveDarcy,
    /// Fine and reduced wave propagation for each coarse size.
    SolveWave,
    /// Error table over the `(Nx, m)` pairs, for the configured problem.
    ConvergenceStudy,
    /// Error table over contrasts and methods.
    ContrastStudy,
    /// Local spectral eigenvalues.
    DumpEigs,
    /// Multiscale basis functions of one block.
    DumpBasis,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenerateField => "generate-field",
            Command::SolveDarcy => "solve-darcy",
            Command::SolveWave => "solve-wave",
            Command::ConvergenceStudy => "convergence-study",
            Command::ContrastStudy => "contrast-study",
            Command::DumpEigs => "dump-eigs",
            Command::DumpBasis => "dump-basis",
        }
    }
}

/// Parses arguments, runs, and maps the outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_count(cli: &Cli, cfg: &ExperimentConfig) -> Result<usize> {
    if let Ok(v) = std::env::var("CEM_THREADS") {
        return v.trim().parse().map_err(|_| CemError::Config(format!("CEM_THREADS: `{v}` is not a thread count")));
    }
    Ok(cli.threads.unwrap_or(cfg.threads))
}

pub fn execute(cli: &Cli) -> Result<()> {
    let path = cli.config.as_ref().ok_or_else(|| CemError::Config("--config is required".into()))?;
    let cfg = load_config(path, &cli.overrides)?;
    let threads = thread_count(cli, &cfg)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| CemError::io(&cli.out, e))?;
    write_manifest(&cli.out.join("manifest.json"), cli.command, &cfg, threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CemError::Config(format!("threads: {e}")))?;
    pool.install(|| run(cli.command, &cfg, &cli.out))
}

pub fn write_manifest(path: &Path, command: Command, cfg: &ExperimentConfig, threads: usize) -> Result<()> {
    let mut doc = BTreeMap::new();
    doc.insert("command", Value::String(command.name().into()));
    doc.insert("version", Value::String(env!("CARGO_PKG_VERSION").into()));
    doc.insert("threads", Value::from(threads));
    doc.insert("config", serde_json::to_value(cfg).map_err(|e| CemError::Config(e.to_string()))?);
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CemError::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CemError::io(path, e))
}

pub fn run(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    match command {
        Command::GenerateField => generate(cfg, out),
        Command::SolveDarcy => solve_darcy(cfg, out),
        Command::SolveWave => solve_wave(cfg, out),
        Command::ConvergenceStudy if cfg.problem == Problem::Wave => wave_convergence(cfg, out),
        Command::ConvergenceStudy => {
            let field = cfg.build_field()?;
            let t = Instant::now();
            let rows = convergence_study(
                &field,
                &cfg.cases(),
                &cfg.darcy_config(cfg.coarse_nx[0]),
                &cfg.basis(0),
                cfg.source.function(),
            )?;
            finish_study(&rows, &out.join("convergence.csv"), t)
        }
        Command::ContrastStudy => {
            let FieldConfig::Channels(layout) = &cfg.field else {
                return Err(CemError::Config("field: the contrast study needs kind = channels".into()));
            };
            let layout = ChannelLayout { seed: cfg.seed.unwrap_or(layout.seed), ..layout.clone() };
            let (coarse_nx, layers) = cfg.cases()[0];
            let t = Instant::now();
            let rows = contrast_study(
                &layout,
                cfg.nx,
                &cfg.contrasts,
                &cfg.darcy_config(coarse_nx),
                &cfg.basis(layers),
                &cfg.methods,
                cfg.source.function(),
            )?;
            finish_study(&rows, &out.join("contrast.csv"), t)
        }
        Command::DumpEigs => dump_eigs(cfg, out),
        Command::DumpBasis => dump_basis(cfg, out),
    }
}

fn summary(row: &StudyRow, secs: f64) {
    let m = row.layers.map_or_else(|| "inf".to_string(), |m| m.to_string());
    println!(
        "H=1/{} m={} {} contrast={:e} energy={:.4}% l2={:.4}% lambda={:.4e} time={:.1}s",
        row.coarse_nx, m, row.method, row.contrast, row.report.energy_pct, row.report.l2_pct, row.report.lambda, secs
    );
}

fn finish_study(rows: &[StudyRow], path: &Path, t: Instant) -> Result<()> {
    let secs = t.elapsed().as_secs_f64() / rows.len().max(1) as f64;
    rows.iter().for_each(|r| summary(r, secs));
    write_study_csv(path, rows)
}

fn write_nodal(out: &Path, stem: &str, dof: &DGDofMap, grid: &FineGrid, v: &[f64]) -> Result<()> {
    let nodal = dof.average_to_nodes(v, grid.n_nodes());
    write_raster(&out.join(format!("{stem}.kfld")), grid.nx + 1, grid.ny + 1, &nodal)?;
    write_pgm(&out.join(format!("{stem}.pgm")), grid.nx + 1, grid.ny + 1, &nodal)
}

fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let t = Instant::now();
    let field = cfg.build_field()?;
    save_field_raster(&out.join("field.kfld"), &field)?;
    let logs: Vec<f64> = field.values.iter().map(|v| v.log10()).collect();
    write_pgm(&out.join("field.pgm"), field.nx, field.ny, &logs)?;
    println!(
        "field {}x{} min={:e} max={:e} time={:.1}s",
        field.nx,
        field.ny,
        field.min(),
        field.max(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn solve_darcy(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let field = cfg.build_field()?;
    let f = cfg.source.function();
    let mut rows = Vec::new();
    for (coarse_nx, layers) in cfg.cases() {
        let t = Instant::now();
        let setup = prepare_darcy(&field, &cfg.darcy_config(coarse_nx), f)?;
        let opts = cfg.basis(layers);
        let run = setup.run(&opts)?;
        let row = StudyRow {
            coarse_nx,
            layers: (opts.method != BasisMethod::Global).then_some(layers),
            method: opts.method,
            contrast: setup.contrast,
            report: run.report,
        };
        summary(&row, t.elapsed().as_secs_f64());
        let grid = &setup.mesh.fine;
        write_nodal(out, &format!("u_fine_H{coarse_nx}"), &setup.dof, grid, &setup.u_fine)?;
        write_nodal(out, &format!("u_ms_H{coarse_nx}"), &setup.dof, grid, &run.u_ms)?;
        rows.push(row);
    }
    write_study_csv(&out.join("darcy.csv"), &rows)
}

fn solve_wave(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let field = cfg.build_field()?;
    let mut table = String::from("H,m,method,energy_err_pct,l2_err_pct\n");
    let mut fine_done = false;
    let mut reference: Vec<f64> = Vec::new();
    for (coarse_nx, layers) in cfg.cases() {
        let t = Instant::now();
        let setup = prepare_wave(&field, &cfg.darcy_config(coarse_nx), &cfg.wave)?;
        let g = setup.source_time();
        if !fine_done {
            let sys = setup.fine_system()?;
            let run = leapfrog_run(&sys, &cfg.wave, &g)?;
            for s in &run.snapshots {
                write_nodal(out, &format!("wave_fine_{:06}", s.step), &setup.dof, &setup.mesh.fine, &s.values)?;
            }
            write_seismogram(&out.join("seismogram_fine.csv"), &setup, &run.snapshots, &cfg.receivers)?;
            reference = run.state.curr;
            fine_done = true;
        }
        let opts = cfg.basis(layers);
        let space = setup.space(&opts)?;
        let sys = setup.reduced_system(&space)?;
        let run = leapfrog_run(&sys, &cfg.wave, &g)?;
        for s in &run.snapshots {
            let stem = format!("wave_ms_H{coarse_nx}_{:06}", s.step);
            write_nodal(out, &stem, &setup.dof, &setup.mesh.fine, &s.values)?;
        }
        let name = format!("seismogram_ms_H{coarse_nx}.csv");
        write_seismogram(&out.join(name), &setup, &run.snapshots, &cfg.receivers)?;
        let e = wave_error(&reference, &run.final_dg(&sys), &setup.forms);
        println!(
            "H=1/{coarse_nx} m={layers} {} energy={:.4}% l2={:.4}% time={:.1}s",
            opts.method,
            e.energy_pct,
            e.l2_pct,
            t.elapsed().as_secs_f64()
        );
        table.push_str(&format!("{},{},{},{},{}\n", 1.0 / coarse_nx as f64, layers, opts.method, e.energy_pct, e.l2_pct));
    }
    let path = out.join("wave.csv");
    std::fs::write(&path, table).map_err(|e| CemError::io(&path, e))
}

fn wave_convergence(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let field = cfg.build_field()?;
    let t = Instant::now();
    let rows = wave_study(&field, &cfg.cases(), &cfg.darcy_config(cfg.coarse_nx[0]), &cfg.wave, &cfg.basis(0))?;
    let secs = t.elapsed().as_secs_f64() / rows.len().max(1) as f64;
    let mut table = String::from("H,m,method,energy_err_pct,l2_err_pct\n");
    for r in &rows {
        println!(
            "H=1/{} m={} {} energy={:.4}% l2={:.4}% time={secs:.1}s",
            r.coarse_nx, r.layers, r.method, r.errors.energy_pct, r.errors.l2_pct
        );
        table.push_str(&format!(
            "{},{},{},{},{}\n",
            1.0 / r.coarse_nx as f64,
            r.layers,
            r.method,
            r.errors.energy_pct,
            r.errors.l2_pct
        ));
    }
    let path = out.join("wave_convergence.csv");
    std::fs::write(&path, table).map_err(|e| CemError::io(&path, e))
}

fn write_seismogram(
    path: &Path,
    setup: &crate::wave_driver::WaveSetup,
    snapshots: &[crate::wave_driver::Snapshot],
    receivers: &[(f64, f64)],
) -> Result<()> {
    let mut s = String::from("t");
    for (i, (x, y)) in receivers.iter().enumerate() {
        s.push_str(&format!(",r{i}({x};{y})"));
    }
    s.push('\n');
    for (t, vals) in seismogram(&setup.mesh, &setup.dof, snapshots, receivers) {
        s.push_str(&t.to_string());
        for v in vals {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| CemError::io(path, e))
}

fn dump_eigs(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let field = cfg.build_field()?;
    for &coarse_nx in &cfg.coarse_nx {
        let t = Instant::now();
        let mesh = build_mesh_hierarchy(field.nx, coarse_nx)?;
        let pou = build_pou(cfg.pou, &field, &mesh)?;
        let sweight = build_s_weight(&pou, &field, &mesh);
        let kbar = edge_kappa_bar(&field, &mesh.coarse);
        let dof = build_dof_map(&mesh);
        let forms = assemble_forms(&mesh, &field, &kbar, &sweight, &dof, cfg.gamma)?;
        let eigs = solve_all_local(&forms, &dof)?;
        write_eigenvalues_csv(&out.join(format!("eigs_H{coarse_nx}.csv")), &eigs)?;
        let smallest = eigs.iter().filter_map(|e| e.values.get(1)).fold(f64::INFINITY, |m, &v| m.min(v));
        println!(
            "H=1/{coarse_nx} blocks={} min_lambda2={smallest:.4e} time={:.1}s",
            eigs.len(),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn dump_basis(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let field = cfg.build_field()?;
    let (coarse_nx, layers) = cfg.cases()[0];
    let t = Instant::now();
    let setup = prepare_darcy(&field, &cfg.darcy_config(coarse_nx), cfg.source.function())?;
    if cfg.block >= setup.mesh.coarse.n_blocks() {
        return Err(CemError::Config(format!(
            "block: {} is out of range for {} coarse blocks",
            cfg.block,
            setup.mesh.coarse.n_blocks()
        )));
    }
    let opts = cfg.basis(layers);
    let group = crate::cem_basis::build_group(&setup.mesh, &setup.forms, &setup.aux, &setup.dof, cfg.block, &opts)?;
    let mut full = vec![0.0; setup.dof.n_dof];
    for j in 0..group.count {
        full.iter_mut().for_each(|v| *v = 0.0);
        let col = group.column(j);
        for (k, &d) in group.dofs.iter().enumerate() {
            full[d] = col[k];
        }
        write_nodal(out, &format!("basis_b{}_j{}", cfg.block, j + 1), &setup.dof, &setup.mesh.fine, &full)?;
    }
    println!(
        "H=1/{coarse_nx} m={layers} {} block={} functions={} time={:.1}s",
        opts.method,
        cfg.block,
        group.count,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
