//! Two-dimensional diffusion with a semi-implicit time step.
//!
//! Every outer iteration computes `dt` from a global max-reduction, forms
//! the explicit half of a theta-scheme, then solves the implicit half with
//! Jacobi sweeps. Each sweep is a separate job per partition followed by a
//! sum-reduction of the per-partition update norms; a solver-loop parent
//! reads the global residual and either spawns another sweep or finishes
//! the step. All stencils use the conservative flux form with zero flux
//! across the domain boundary, so the total of `u` is preserved.

use std::collections::BTreeMap;

use crate::app::{
    decode_params, encode_params, neighbours_within, AppError, Application, IdMinter, JobContext, JobOutcome,
};
use crate::data::{register_objects, ElementKind, LogicalObject, LogicalObjectId, ObjectRegistry, Variable};
use crate::graph::{IdBlock, JobId, JobSpec};
use crate::region::{DomainSpec, Region};
use crate::worker::translator::{default_fill, TranslatorView};

pub const U: &str = "u";
pub const RHS: &str = "b";
pub const X: [&str; 2] = ["xa", "xb"];
pub const UMAX: &str = "umax";
pub const RES: &str = "res";
pub const DT: &str = "dt";
pub const RESID: &str = "resid";

/// Implicit weight of the theta-scheme.
const THETA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitialField {
    /// Smooth product of sines plus an off-centre bump.
    Wave,
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub extent: [i64; 2],
    pub partitions: [u32; 2],
    pub iterations: u64,
    pub solver_cap: u64,
    pub tolerance: f64,
    pub dt_c: f64,
    pub dt_eps: f64,
    pub initial: InitialField,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            extent: [64, 32],
            partitions: [4, 2],
            iterations: 3,
            solver_cap: 10,
            tolerance: 1e-6,
            dt_c: 0.2,
            dt_eps: 1e-3,
            initial: InitialField::Wave,
        }
    }
}

#[derive(Debug)]
pub struct Diffusion2d {
    registry: ObjectRegistry,
    cfg: DiffusionConfig,
}

impl Diffusion2d {
    pub fn new(cfg: DiffusionConfig) -> Result<Self, AppError> {
        if cfg.solver_cap < 1 {
            return Err(AppError::Config("solver cap must be at least 1".into()));
        }
        if !(cfg.tolerance > 0.0) {
            return Err(AppError::Config("solver tolerance must be positive".into()));
        }
        if !(cfg.dt_c > 0.0) || !(cfg.dt_eps > 0.0) {
            return Err(AppError::Config("dt rule constants must be positive".into()));
        }
        let domain = DomainSpec::new(&cfg.extent, &cfg.partitions)?
            .with_ghost_width(U, 1)?
            .with_ghost_width(RHS, 0)?
            .with_ghost_width(X[0], 1)?
            .with_ghost_width(X[1], 1)?;
        let vars = [
            Variable::cell(U),
            Variable::cell(RHS),
            Variable::cell(X[0]),
            Variable::cell(X[1]),
            Variable::partition_scalar(UMAX),
            Variable::partition_scalar(RES),
            Variable::global_scalar(DT),
            Variable::global_scalar(RESID),
        ];
        let registry = register_objects(&domain, &vars)?;
        Ok(Diffusion2d { registry, cfg })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    fn parts(&self) -> u32 {
        self.registry.domain().partition_count()
    }

    fn all_objects(&self) -> Vec<LogicalObjectId> {
        self.registry.objects().iter().map(|o| o.id).collect()
    }

    fn scalars(&self, var: &str) -> Result<Vec<LogicalObjectId>, AppError> {
        (0..self.parts()).map(|p| Ok(self.registry.partition_scalar(var, p)?)).collect()
    }

    fn for_loop(&self, it: u64, ids: &mut IdMinter) -> Result<Vec<JobSpec>, AppError> {
        if it >= self.cfg.iterations {
            return Ok(Vec::new());
        }
        let reg = &self.registry;
        let dt = reg.global(DT)?;
        let mut batch = Vec::new();
        let mut maxes = Vec::new();
        for p in 0..self.parts() {
            let id = ids.mint()?;
            maxes.push(id);
            batch.push(
                JobSpec::compute(id, "LocalMax")
                    .with_params(encode_params(&[p as u64]))
                    .reads(reg.owned(U, p)?.iter().copied())
                    .writes([reg.partition_scalar(UMAX, p)?]),
            );
        }
        let reduce = ids.mint()?;
        batch.push(JobSpec::compute(reduce, "ReduceMax").reads(self.scalars(UMAX)?).writes([dt]).after(maxes));
        let mut stencils = Vec::new();
        for p in 0..self.parts() {
            let id = ids.mint()?;
            stencils.push(id);
            batch.push(
                JobSpec::compute(id, "Stencil")
                    .with_params(encode_params(&[p as u64]))
                    .reads(reg.touched(U, p)?.iter().copied())
                    .reads([dt])
                    .writes(reg.owned(RHS, p)?.iter().copied())
                    .writes(reg.owned(X[0], p)?.iter().copied())
                    .after([reduce]),
            );
        }
        batch.push(
            JobSpec::parent(ids.mint()?, "SolverLoop")
                .with_params(encode_params(&[it, 0]))
                .after(stencils)
                .accessing(self.all_objects()),
        );
        Ok(batch)
    }

    fn solver_loop(&self, ctx: &JobContext<'_>, ids: &mut IdMinter) -> Result<Vec<JobSpec>, AppError> {
        let w = decode_params(ctx.function, ctx.params, 2)?;
        let (it, sweeps) = (w[0], w[1]);
        let reg = &self.registry;
        let dt = reg.global(DT)?;
        let resid = reg.global(RESID)?;
        let done = sweeps > 0 && (ctx.scalar(resid)? < self.cfg.tolerance || sweeps >= self.cfg.solver_cap);
        let x = X[(sweeps % 2) as usize];
        let mut batch = Vec::new();
        if done {
            let mut finals = Vec::new();
            for p in 0..self.parts() {
                let id = ids.mint()?;
                finals.push(id);
                batch.push(
                    JobSpec::compute(id, "Finalize")
                        .with_params(encode_params(&[p as u64, sweeps % 2]))
                        .reads(reg.touched(x, p)?.iter().copied())
                        .reads(reg.owned(RHS, p)?.iter().copied())
                        .reads([dt])
                        .writes(reg.owned(U, p)?.iter().copied()),
                );
            }
            batch.push(
                JobSpec::parent(ids.mint()?, "ForLoop")
                    .with_params(encode_params(&[it + 1]))
                    .after(finals)
                    .accessing(self.all_objects())
                    .loop_head(it + 1),
            );
            return Ok(batch);
        }
        let next = X[((sweeps + 1) % 2) as usize];
        let mut sweep_jobs = Vec::new();
        for p in 0..self.parts() {
            let id = ids.mint()?;
            sweep_jobs.push(id);
            batch.push(
                JobSpec::compute(id, "Sweep")
                    .with_params(encode_params(&[p as u64, sweeps % 2]))
                    .reads(reg.touched(x, p)?.iter().copied())
                    .reads(reg.owned(RHS, p)?.iter().copied())
                    .reads([dt])
                    .writes(reg.owned(next, p)?.iter().copied())
                    .writes([reg.partition_scalar(RES, p)?]),
            );
        }
        let reduce = ids.mint()?;
        batch.push(JobSpec::compute(reduce, "ReduceSum").reads(self.scalars(RES)?).writes([resid]).after(sweep_jobs));
        batch.push(
            JobSpec::parent(ids.mint()?, "SolverLoop")
                .with_params(encode_params(&[it, sweeps + 1]))
                .reads([resid])
                .after([reduce])
                .accessing(self.all_objects()),
        );
        Ok(batch)
    }

    fn gather(&self, ctx: &JobContext<'_>, var: &str, p: u32, touched: bool) -> Result<TranslatorView, AppError> {
        let ids = if touched { self.registry.touched(var, p)? } else { self.registry.owned(var, p)? };
        Ok(TranslatorView::gather(&self.registry, ids, ctx.inputs, default_fill())?)
    }

    fn partition_box(&self, p: u32) -> Result<Region, AppError> {
        let d = self.registry.domain();
        Ok(d.partition_box(d.partition_from_linear(p))?)
    }

    fn kernel(&self, ctx: &JobContext<'_>) -> Result<BTreeMap<LogicalObjectId, Vec<f64>>, AppError> {
        let reg = &self.registry;
        let bounds = reg.domain().bounds();
        let mut out = BTreeMap::new();
        match ctx.function {
            "LocalMax" => {
                let p = decode_params(ctx.function, ctx.params, 1)?[0] as u32;
                let u = self.gather(ctx, U, p, false)?;
                let m = u.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                out.insert(reg.partition_scalar(UMAX, p)?, vec![m]);
            }
            "ReduceMax" => {
                let mut m = 0.0f64;
                for id in self.scalars(UMAX)? {
                    m = m.max(ctx.scalar(id)?);
                }
                out.insert(reg.global(DT)?, vec![self.cfg.dt_c / (m + self.cfg.dt_eps)]);
            }
            "ReduceSum" => {
                let mut s = 0.0;
                for id in self.scalars(RES)? {
                    s += ctx.scalar(id)?;
                }
                out.insert(reg.global(RESID)?, vec![s]);
            }
            "Stencil" => {
                let p = decode_params(ctx.function, ctx.params, 1)?[0] as u32;
                let lambda = ctx.scalar(reg.global(DT)?)?;
                let u = self.gather(ctx, U, p, true)?;
                let pbox = self.partition_box(p)?;
                let mut b = TranslatorView::blank(reg.variable_index(RHS)?, pbox, 0.0);
                for cell in pbox.cells() {
                    let c = u.get(cell);
                    let flux: f64 = neighbours_within(cell, &bounds).map(|n| u.get(n) - c).sum();
                    b.set(cell, c + (1.0 - THETA) * lambda * flux);
                }
                out.extend(b.scatter(reg, reg.owned(RHS, p)?)?);
                let mut x = TranslatorView::blank(reg.variable_index(X[0])?, pbox, 0.0);
                x.data.clone_from(&b.data);
                out.extend(x.scatter(reg, reg.owned(X[0], p)?)?);
            }
            "Sweep" => {
                let w = decode_params(ctx.function, ctx.params, 2)?;
                let (p, slot) = (w[0] as u32, w[1] as usize);
                let lambda = ctx.scalar(reg.global(DT)?)? * THETA;
                let x = self.gather(ctx, X[slot], p, true)?;
                let b = self.gather(ctx, RHS, p, false)?;
                let pbox = self.partition_box(p)?;
                let mut next = TranslatorView::blank(reg.variable_index(X[1 - slot])?, pbox, 0.0);
                let mut res = 0.0;
                for cell in pbox.cells() {
                    let (mut sum, mut n) = (0.0, 0.0);
                    for nb in neighbours_within(cell, &bounds) {
                        sum += x.get(nb);
                        n += 1.0;
                    }
                    let v = (b.get(cell) + lambda * sum) / (1.0 + lambda * n);
                    res += (v - x.get(cell)).abs();
                    next.set(cell, v);
                }
                out.extend(next.scatter(reg, reg.owned(X[1 - slot], p)?)?);
                out.insert(reg.partition_scalar(RES, p)?, vec![res]);
            }
            "Finalize" => {
                let w = decode_params(ctx.function, ctx.params, 2)?;
                let (p, slot) = (w[0] as u32, w[1] as usize);
                let lambda = ctx.scalar(reg.global(DT)?)? * THETA;
                let x = self.gather(ctx, X[slot], p, true)?;
                let b = self.gather(ctx, RHS, p, false)?;
                let pbox = self.partition_box(p)?;
                let mut u = TranslatorView::blank(reg.variable_index(U)?, pbox, 0.0);
                for cell in pbox.cells() {
                    let c = x.get(cell);
                    let flux: f64 = neighbours_within(cell, &bounds).map(|n| x.get(n) - c).sum();
                    u.set(cell, b.get(cell) + lambda * flux);
                }
                out.extend(u.scatter(reg, reg.owned(U, p)?)?);
            }
            other => return Err(AppError::UnknownFunction(other.to_string())),
        }
        Ok(out)
    }
}

/// Initial `u` at a cell for the given extent.
pub fn initial_u(initial: InitialField, cell: [i64; 3], extent: [i64; 2]) -> f64 {
    match initial {
        InitialField::Uniform(v) => v,
        InitialField::Wave => {
            let x = (cell[0] as f64 + 0.5) / extent[0] as f64;
            let y = (cell[1] as f64 + 0.5) / extent[1] as f64;
            let tau = std::f64::consts::TAU;
            let bump = (-((x - 0.3).powi(2) + (y - 0.6).powi(2)) * 40.0).exp();
            1.0 + 0.5 * (tau * x).sin() * (tau * y).cos() + bump
        }
    }
}

impl Application for Diffusion2d {
    fn name(&self) -> &str {
        "diffusion2d"
    }

    fn registry(&self) -> &ObjectRegistry {
        &self.registry
    }

    fn initial_payload(&self, object: &LogicalObject) -> Vec<f64> {
        let is_u = self.registry.variables()[object.variable].name == U;
        match object.kind {
            ElementKind::Cell if is_u => {
                object.region.cells().map(|c| initial_u(self.cfg.initial, c, self.cfg.extent)).collect()
            }
            _ => vec![0.0; object.elements()],
        }
    }

    fn main_job(&self, id: JobId) -> JobSpec {
        JobSpec::parent(id, "Main").accessing(self.all_objects())
    }

    fn run(&self, ctx: &JobContext<'_>, ids: Option<IdBlock>) -> Result<JobOutcome, AppError> {
        let mut minter = IdMinter::new(ids);
        match ctx.function {
            "Main" => Ok(JobOutcome::Spawned(vec![JobSpec::parent(minter.mint()?, "ForLoop")
                .with_params(encode_params(&[0]))
                .accessing(self.all_objects())
                .loop_head(0)])),
            "ForLoop" => {
                let it = decode_params(ctx.function, ctx.params, 1)?[0];
                Ok(JobOutcome::Spawned(self.for_loop(it, &mut minter)?))
            }
            "SolverLoop" => Ok(JobOutcome::Spawned(self.solver_loop(ctx, &mut minter)?)),
            _ => Ok(JobOutcome::Wrote(self.kernel(ctx)?)),
        }
    }
}
