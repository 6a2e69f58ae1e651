//! Minimizers for the finite-λ relaxed functional and the limit Michell
//! functional on a grid, and the λ-sweep harness comparing the two.
//!
//! Both objectives are evaluated on the unknowns of an [`Objective`]: the
//! interior nodes, plus the first ghost ring for the limit problem where the
//! normal derivative is free and only penalized. Boundary values are pinned
//! to `f1`; the remaining ghosts follow from a [`GhostMap`]. Minimization is
//! limited-memory BFGS with Armijo backtracking (steepest descent whenever
//! the quasi-Newton direction is not a descent direction), continued over a
//! decreasing schedule of smoothing widths.

use std::path::Path;
use std::time::Instant;

use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::airy::BoundaryData;
use crate::constructions::{mollifier_c2, recovery_sequence};
use crate::density::{
    g_lambda, g_lambda_smooth_with_grad, limit_density_smooth_with_grad, EnergyParams,
};
use crate::error::{Error, Result};
use crate::grid::{
    apply_clamped_boundary, energy_quadrature, hessian_adjoint, hessian_unchecked, limit_energy,
    Edge, GhostMap, GhostMode, Grid2D, ScalarField,
};
use crate::sym2::Sym2;

/// Fixed iteration budget of the biharmonic-like initial extension.
pub const EXTENSION_ITERS: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct SolveConfig {
    /// `None` for the limit solve.
    pub lambda: Option<f64>,
    /// Strictly decreasing positive smoothing widths.
    pub schedule: Vec<f64>,
    /// Iteration cap per smoothing stage.
    pub max_iters: usize,
    /// Stop when `‖∇E‖_∞ ≤ grad_tol·(1 + |E|)`.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step contraction factor of the backtracking search.
    pub backtrack: f64,
    /// Smallest step tried before declaring step underflow.
    pub min_step: f64,
    /// Number of stored L-BFGS pairs.
    pub memory: usize,
    pub seed: u64,
    /// Amplitude of the seeded initial perturbation, relative to the
    /// extension's sup norm.
    pub perturbation: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            schedule: vec![1e-1, 1e-2, 1e-3],
            max_iters: 1000,
            grad_tol: 1e-9,
            armijo: 1e-4,
            backtrack: 0.5,
            min_step: 1e-20,
            memory: 10,
            seed: 0,
            perturbation: 0.0,
        }
    }
}

impl SolveConfig {
    pub fn finite(lambda: f64) -> Self {
        Self {
            lambda: Some(lambda),
            ..Self::default()
        }
    }

    pub fn limit() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "lambda must be positive, got {l}"
                )));
            }
        }
        if self.schedule.is_empty() {
            return Err(Error::InvalidParameter(
                "smoothing schedule is empty".into(),
            ));
        }
        if self.schedule.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidParameter(
                "smoothing widths must be positive".into(),
            ));
        }
        if self.schedule.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidParameter(
                "smoothing schedule must be strictly decreasing".into(),
            ));
        }
        if !(self.armijo > 0.0 && self.armijo < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "Armijo constant {} outside (0, 0.5)",
                self.armijo
            )));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "backtracking factor {} outside (0, 1)",
                self.backtrack
            )));
        }
        if !(self.grad_tol >= 0.0) || !(self.min_step > 0.0) || !(self.perturbation >= 0.0) {
            return Err(Error::InvalidParameter(
                "tolerances must be nonnegative".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Why the last smoothing stage stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    IterationCap,
    StepUnderflow,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    /// Exact (unsmoothed) energy of the returned field.
    pub energy: f64,
    /// Exact energy of the starting field.
    pub initial_energy: f64,
    /// Smoothed energy after every accepted step.
    pub history: Vec<f64>,
    /// Index into `history` where each smoothing stage begins.
    pub stage_starts: Vec<usize>,
    /// Gradient sup norm at the end of the last stage.
    pub grad_norm: f64,
    pub iterations: usize,
    pub wall_s: f64,
    /// Nodes with `ρ⁰(∇²u) > √λ` (zero for the limit solve).
    pub high_branch_cells: usize,
    pub low_branch_cells: usize,
    pub stop: StopReason,
}

impl SolveReport {
    pub fn high_branch_frac(&self) -> f64 {
        let n = self.high_branch_cells + self.low_branch_cells;
        if n == 0 {
            0.0
        } else {
            self.high_branch_cells as f64 / n as f64
        }
    }

    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Finite(f64),
    Limit,
    /// `Σ w |∇²u|²` with clamped ghosts: the initial extension.
    Biharmonic,
}

/// Discrete objective over the free unknowns of a grid potential.
#[derive(Clone, Debug)]
pub struct Objective {
    grid: Grid2D,
    data: BoundaryData,
    kind: Kind,
    ghosts: GhostMap,
    free: Vec<usize>,
    template: Vec<f64>,
    /// `(idx outer, idx inner, weight·h, target normal derivative)` per
    /// boundary-edge node, limit problem only.
    penalty: Vec<(usize, usize, f64, f64)>,
}

impl Objective {
    /// Smoothed `Σ w G_λ(∇²u)` with clamped ghosts.
    pub fn finite(grid: &Grid2D, data: &BoundaryData, lambda: f64) -> Result<Self> {
        EnergyParams::new(lambda)?;
        Self::build(grid, data, Kind::Finite(lambda))
    }

    /// Smoothed `2Σ w ρ⁰(∇²u) + 2Σ w h |γ₁u − f₂|` with free first ghost ring.
    pub fn limit(grid: &Grid2D, data: &BoundaryData) -> Result<Self> {
        Self::build(grid, data, Kind::Limit)
    }

    fn biharmonic(grid: &Grid2D, data: &BoundaryData) -> Result<Self> {
        Self::build(grid, data, Kind::Biharmonic)
    }

    fn build(grid: &Grid2D, data: &BoundaryData, kind: Kind) -> Result<Self> {
        if data.len() != grid.boundary_len()
            || data.f2.len() != data.len()
            || data.grad.len() != data.len()
        {
            return Err(Error::SizeMismatch {
                expected: grid.boundary_len(),
                got: data.len(),
            });
        }
        if data
            .f1
            .iter()
            .chain(&data.f2)
            .chain(data.grad.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter(
                "boundary data contains non-finite values".into(),
            ));
        }
        let mode = match kind {
            Kind::Limit => GhostMode::Free,
            _ => GhostMode::Clamped,
        };
        let ghosts = GhostMap::new(grid, mode, Some(data))?;
        let mut free = Vec::new();
        for j in 1..grid.ny - 1 {
            for i in 1..grid.nx - 1 {
                free.push(grid.idx(i as isize, j as isize));
            }
        }
        let mut penalty = Vec::new();
        if mode == GhostMode::Free {
            for e in Edge::ALL {
                let n = e.normal();
                let (di, dj) = (n[0] as isize, n[1] as isize);
                let nodes = grid.edge_nodes(e);
                let last = nodes.len() - 1;
                for (m, &(i, j)) in nodes.iter().enumerate() {
                    let (ii, jj) = (i as isize, j as isize);
                    let outer = grid.idx(ii + di, jj + dj);
                    free.push(outer);
                    let k = grid.boundary_index(i, j).expect("boundary node");
                    let target = data.grad[k][0] * n[0] + data.grad[k][1] * n[1];
                    let w = if m == 0 || m == last { 0.5 } else { 1.0 } * grid.h;
                    penalty.push((outer, grid.idx(ii - di, jj - dj), w, target));
                }
            }
        }
        // row-major order keeps the factorized preconditioner banded
        free.sort_unstable();
        let mut u = ScalarField::zeros(grid);
        crate::grid::set_boundary_values(&mut u, data)?;
        Ok(Self {
            grid: grid.clone(),
            data: data.clone(),
            kind,
            ghosts,
            free,
            template: u.raw().to_vec(),
            penalty,
        })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn data(&self) -> &BoundaryData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.free.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free.is_empty()
    }

    fn full(&self, x: &[f64]) -> Vec<f64> {
        let mut u = self.template.clone();
        for (&k, &v) in self.free.iter().zip(x) {
            u[k] = v;
        }
        self.ghosts.apply(&mut u);
        u
    }

    /// Field with pinned boundary values and ghosts filled from `x`.
    pub fn field(&self, x: &[f64]) -> ScalarField {
        let mut u = ScalarField::zeros(&self.grid);
        *u.raw_mut() = self.full(x);
        u.mark_populated();
        u
    }

    /// Free unknowns read off a field (its boundary values are ignored).
    pub fn coords(&self, u: &ScalarField) -> Result<Vec<f64>> {
        if u.grid != self.grid {
            return Err(Error::BoundaryMismatch(
                "field lives on a different grid".into(),
            ));
        }
        if self.kind == Kind::Limit && !u.ghosts_populated() {
            return Err(Error::GhostsNotPopulated);
        }
        Ok(self.free.iter().map(|&k| u.raw()[k]).collect())
    }

    /// Smoothed objective value and its gradient with respect to the free
    /// unknowns.
    pub fn value_and_grad(&self, x: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.free.len() {
            return Err(Error::SizeMismatch {
                expected: self.free.len(),
                got: x.len(),
            });
        }
        let g = &self.grid;
        let u = self.full(x);
        let params = match self.kind {
            Kind::Finite(l) => Some(EnergyParams::with_smoothing(l, eps)?),
            _ => None,
        };
        if self.kind == Kind::Limit && !(eps > 0.0) {
            return Err(Error::ZeroSmoothing);
        }
        let kind = self.kind;
        let rows: Vec<Result<(f64, Vec<Sym2>)>> = (0..g.ny)
            .into_par_iter()
            .map(|j| {
                let mut e = 0.0;
                let mut ws = Vec::with_capacity(g.nx);
                for i in 0..g.nx {
                    let w = g.node_weight(i, j);
                    let hs = hessian_unchecked(&u, g, i as isize, j as isize);
                    let (v, d) = match kind {
                        Kind::Finite(_) => g_lambda_smooth_with_grad(hs, params.as_ref().unwrap())?,
                        Kind::Limit => limit_density_smooth_with_grad(hs, eps)?,
                        Kind::Biharmonic => {
                            (hs.norm_sq(), Sym2::new(2.0 * hs.a, 4.0 * hs.b, 2.0 * hs.d))
                        }
                    };
                    e += w * v;
                    ws.push(w * d);
                }
                Ok((e, ws))
            })
            .collect();
        let mut energy = 0.0;
        let mut grad = vec![0.0; u.len()];
        for (j, r) in rows.into_iter().enumerate() {
            let (e, ws) = r?;
            energy += e;
            for (i, wd) in ws.into_iter().enumerate() {
                hessian_adjoint(&mut grad, g, i as isize, j as isize, wd);
            }
        }
        let ih2 = 0.5 / g.h;
        for &(outer, inner, w, target) in &self.penalty {
            let r = (u[outer] - u[inner]) * ih2 - target;
            let s = (r * r + eps * eps).sqrt();
            energy += 2.0 * w * s;
            let d = 2.0 * w * r / s * ih2;
            grad[outer] += d;
            grad[inner] -= d;
        }
        self.ghosts.adjoint(&mut grad);
        Ok((energy, self.free.iter().map(|&k| grad[k]).collect()))
    }

    /// Exact (unsmoothed) energy.
    pub fn exact(&self, x: &[f64]) -> Result<f64> {
        let u = self.field(x);
        match self.kind {
            Kind::Finite(l) => {
                let p = EnergyParams::new(l)?;
                energy_quadrature(&u, |h| g_lambda(h, &p))
            }
            Kind::Limit => limit_energy(&u, &self.data),
            Kind::Biharmonic => energy_quadrature(&u, |h| h.norm_sq()),
        }
    }
}

/// Factorized `Σ w |∇²u|²` operator on the free unknowns of an objective,
/// used as the initial inverse-Hessian model of the quasi-Newton iteration.
struct Preconditioner {
    matrix: CscMatrix<f64>,
    chol: CscCholesky<f64>,
}

impl Preconditioner {
    fn new(obj: &Objective) -> Result<Self> {
        let g = &obj.grid;
        let n = obj.free.len();
        let mut pos = vec![usize::MAX; obj.template.len()];
        for (k, &f) in obj.free.iter().enumerate() {
            pos[f] = k;
        }
        let expanded = obj.ghosts.expanded();
        let resolve = |entries: &[(usize, f64)]| -> Vec<(usize, f64)> {
            let mut out: Vec<(usize, f64)> = Vec::new();
            let mut push = |k: usize, c: f64| {
                if pos[k] != usize::MAX {
                    out.push((pos[k], c));
                }
            };
            for &(k, c) in entries {
                match expanded.get(&k) {
                    Some((ts, _)) => ts.iter().for_each(|&(kk, cc)| push(kk, c * cc)),
                    None => push(k, c),
                }
            }
            out.sort_unstable_by_key(|e| e.0);
            out.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 += b.1;
                    true
                } else {
                    false
                }
            });
            out
        };
        let ih2 = 1.0 / (g.h * g.h);
        let mut coo = CooMatrix::new(n, n);
        let mut diag = vec![0.0; n];
        for j in 0..g.ny as isize {
            for i in 0..g.nx as isize {
                let w = g.node_weight(i as usize, j as usize);
                let id = |a: isize, b: isize| g.idx(i + a, j + b);
                let rows = [
                    (
                        1.0,
                        vec![(id(1, 0), ih2), (id(0, 0), -2.0 * ih2), (id(-1, 0), ih2)],
                    ),
                    (
                        1.0,
                        vec![(id(0, 1), ih2), (id(0, 0), -2.0 * ih2), (id(0, -1), ih2)],
                    ),
                    (
                        2.0,
                        vec![
                            (id(1, 1), 0.25 * ih2),
                            (id(-1, -1), 0.25 * ih2),
                            (id(1, -1), -0.25 * ih2),
                            (id(-1, 1), -0.25 * ih2),
                        ],
                    ),
                ];
                for (m, entries) in rows {
                    let r = resolve(&entries);
                    for &(a, ca) in &r {
                        for &(b, cb) in &r {
                            let v = 2.0 * w * m * ca * cb;
                            coo.push(a, b, v);
                            if a == b {
                                diag[a] += v;
                            }
                        }
                    }
                }
            }
        }
        let ridge = 1e-10 * diag.iter().cloned().fold(0.0, f64::max).max(1e-300);
        for k in 0..n {
            coo.push(k, k, ridge);
        }
        let matrix = CscMatrix::from(&coo);
        let chol = CscCholesky::factor(&matrix).map_err(|e| {
            Error::InvalidParameter(format!("preconditioner factorization failed: {e}"))
        })?;
        Ok(Self { matrix, chol })
    }

    /// `s·Bs`.
    fn energy_norm_sq(&self, s: &[f64]) -> f64 {
        let m = &self.matrix;
        let (cols, rows, vals) = (m.col_offsets(), m.row_indices(), m.values());
        let mut acc = 0.0;
        for j in 0..s.len() {
            let mut bj = 0.0;
            for k in cols[j]..cols[j + 1] {
                bj += vals[k] * s[rows[k]];
            }
            acc += s[j] * bj;
        }
        acc
    }

    /// `B⁻¹q` by forward and backward substitution with the factor `L`
    /// (columns stored with the diagonal entry first).
    fn solve(&self, q: &[f64]) -> Vec<f64> {
        let l = self.chol.l();
        let (cols, rows, vals) = (l.col_offsets(), l.row_indices(), l.values());
        let mut x = q.to_vec();
        for j in 0..x.len() {
            let (a, b) = (cols[j], cols[j + 1]);
            x[j] /= vals[a];
            let xj = x[j];
            for k in a + 1..b {
                x[rows[k]] -= vals[k] * xj;
            }
        }
        for j in (0..x.len()).rev() {
            let (a, b) = (cols[j], cols[j + 1]);
            let mut acc = x[j];
            for k in a + 1..b {
                acc -= vals[k] * x[rows[k]];
            }
            x[j] = acc / vals[a];
        }
        x
    }
}

/// Clamped extension of the boundary data: a fixed budget of conjugate
/// gradient iterations on `Σ w |∇²u|²` from a zero interior.
pub fn boundary_extension(grid: &Grid2D, data: &BoundaryData, iters: usize) -> Result<ScalarField> {
    let obj = Objective::biharmonic(grid, data)?;
    let n = obj.len();
    let mut x = vec![0.0; n];
    let (_, g0) = obj.value_and_grad(&x, 1.0)?;
    // the gradient is affine: A p = ∇E(p) − ∇E(0)
    let apply = |p: &[f64]| -> Result<Vec<f64>> {
        let (_, gp) = obj.value_and_grad(p, 1.0)?;
        Ok(gp.iter().zip(&g0).map(|(a, b)| a - b).collect())
    };
    let mut r: Vec<f64> = g0.iter().map(|v| -v).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let stop = 1e-28 * rr.max(1e-300);
    for _ in 0..iters {
        if rr <= stop || rr == 0.0 {
            break;
        }
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let a = rr / pap;
        for k in 0..n {
            x[k] += a * p[k];
            r[k] -= a * ap[k];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
    }
    Ok(obj.field(&x))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

struct StageOutcome {
    x: Vec<f64>,
    grad_norm: f64,
    iterations: usize,
    stop: StopReason,
}

/// L-BFGS with Armijo backtracking on one smoothing level.
fn minimize_stage(
    obj: &Objective,
    pre: Option<&Preconditioner>,
    x0: Vec<f64>,
    eps: f64,
    cfg: &SolveConfig,
    history: &mut Vec<f64>,
) -> Result<StageOutcome> {
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = obj.value_and_grad(&x, eps)?;
    history.push(f);
    let mut mem: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut iterations = 0;
    let mut first_step = true;
    loop {
        let gn = sup(&g);
        if n == 0 || gn <= cfg.grad_tol * (1.0 + f.abs()) {
            return Ok(StageOutcome {
                x,
                grad_norm: gn,
                iterations,
                stop: StopReason::Converged,
            });
        }
        if iterations >= cfg.max_iters {
            return Ok(StageOutcome {
                x,
                grad_norm: gn,
                iterations,
                stop: StopReason::IterationCap,
            });
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &d);
            for k in 0..n {
                d[k] -= a * y[k];
            }
            alphas.push(a);
        }
        match pre {
            Some(p) => {
                d = p.solve(&d);
                if let Some((s, y, _)) = mem.back() {
                    let gamma = dot(s, y) / p.energy_norm_sq(s);
                    d.iter_mut().for_each(|v| *v *= gamma);
                }
            }
            None => {
                if let Some((s, y, _)) = mem.back() {
                    let gamma = dot(s, y) / dot(y, y);
                    d.iter_mut().for_each(|v| *v *= gamma);
                }
            }
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &d);
            for k in 0..n {
                d[k] += (a - b) * s[k];
            }
        }
        let mut steepest = mem.is_empty();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            mem.clear();
            steepest = true;
        }
        let mut t = if steepest && first_step {
            // first move: at most a unit change in the largest unknown
            1.0 / sup(&d).max(1e-300)
        } else {
            1.0
        };
        let accepted = loop {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let (ft, gt) = obj.value_and_grad(&xt, eps)?;
            if ft.is_finite() && ft <= f + cfg.armijo * t * slope {
                break Some((xt, ft, gt));
            }
            t *= cfg.backtrack;
            if t < cfg.min_step {
                break None;
            }
        };
        let Some((xt, ft, gt)) = accepted else {
            if !steepest {
                // retry with steepest descent before giving up
                mem.clear();
                continue;
            }
            return Ok(StageOutcome {
                x,
                grad_norm: gn,
                iterations,
                stop: StopReason::StepUnderflow,
            });
        };
        first_step = false;
        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if mem.len() == cfg.memory.max(1) {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        x = xt;
        f = ft;
        g = gt;
        history.push(f);
        iterations += 1;
    }
}

fn branch_counts(u: &ScalarField, lambda: Option<f64>) -> Result<(usize, usize)> {
    let hs = u.hessian_field()?;
    let Some(l) = lambda else {
        return Ok((0, hs.len()));
    };
    let sl = l.sqrt();
    let high = hs.iter().filter(|h| h.rho0() > sl).count();
    Ok((high, hs.len() - high))
}

fn run(
    obj: &Objective,
    init: &ScalarField,
    cfg: &SolveConfig,
) -> Result<(ScalarField, SolveReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut x = obj.coords(init)?;
    if cfg.perturbation > 0.0 {
        let scale = init.max_abs();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for v in x.iter_mut() {
            *v += cfg.perturbation * scale * rng.gen_range(-1.0..=1.0);
        }
    }
    let initial_energy = obj.exact(&x)?;
    let pre = if obj.is_empty() {
        None
    } else {
        Some(Preconditioner::new(obj)?)
    };
    let (mut best_x, mut best_e) = (x.clone(), initial_energy);
    let mut history = Vec::new();
    let mut stage_starts = Vec::new();
    let (mut grad_norm, mut iterations, mut stop) = (0.0, 0, StopReason::Converged);
    for &eps in &cfg.schedule {
        stage_starts.push(history.len());
        let out = minimize_stage(obj, pre.as_ref(), x, eps, cfg, &mut history)?;
        x = out.x;
        grad_norm = out.grad_norm;
        iterations += out.iterations;
        stop = out.stop;
        let e = obj.exact(&x)?;
        if e <= best_e {
            best_e = e;
            best_x = x.clone();
        }
    }
    let u = obj.field(&best_x);
    let (high, low) = branch_counts(&u, cfg.lambda)?;
    Ok((
        u,
        SolveReport {
            energy: best_e,
            initial_energy,
            history,
            stage_starts,
            grad_norm,
            iterations,
            wall_s: start.elapsed().as_secs_f64(),
            high_branch_cells: high,
            low_branch_cells: low,
            stop,
        },
    ))
}

fn require_lambda(cfg: &SolveConfig) -> Result<f64> {
    cfg.lambda
        .ok_or_else(|| Error::InvalidParameter("finite-lambda solve needs lambda".into()))
}

/// Minimizes the smoothed finite-λ functional from the boundary extension.
pub fn minimize_finite_lambda(
    bdata: &BoundaryData,
    grid: &Grid2D,
    cfg: &SolveConfig,
) -> Result<(ScalarField, SolveReport)> {
    let lambda = require_lambda(cfg)?;
    let obj = Objective::finite(grid, bdata, lambda)?;
    let init = boundary_extension(grid, bdata, EXTENSION_ITERS)?;
    run(&obj, &init, cfg)
}

/// As [`minimize_finite_lambda`] from a given starting field; its boundary
/// values and ghosts are replaced by the clamped data.
pub fn minimize_finite_lambda_from(
    bdata: &BoundaryData,
    grid: &Grid2D,
    cfg: &SolveConfig,
    init: &ScalarField,
) -> Result<(ScalarField, SolveReport)> {
    let lambda = require_lambda(cfg)?;
    let obj = Objective::finite(grid, bdata, lambda)?;
    run(&obj, init, cfg)
}

/// Minimizes the smoothed limit functional from the boundary extension.
pub fn minimize_limit(
    bdata: &BoundaryData,
    grid: &Grid2D,
    cfg: &SolveConfig,
) -> Result<(ScalarField, SolveReport)> {
    let cfg = SolveConfig {
        lambda: None,
        ..cfg.clone()
    };
    let obj = Objective::limit(grid, bdata)?;
    let init = boundary_extension(grid, bdata, EXTENSION_ITERS)?;
    run(&obj, &init, &cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub energy: f64,
    pub limit_energy: f64,
    pub gap: f64,
    pub high_branch_frac: f64,
    pub recovery_energy: f64,
    pub iters: usize,
    pub wall_s: f64,
}

pub const SWEEP_HEADER: &str =
    "lambda,energy,limit_energy,gap,high_branch_frac,recovery_energy,iters,wall_s";

#[derive(Debug)]
pub struct SweepTable {
    pub limit_field: ScalarField,
    pub limit_report: SolveReport,
    pub rows: Vec<Result<SweepRow>>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for r in self.rows.iter().flatten() {
            s.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e},{:e},{},{:e}\n",
                r.lambda,
                r.energy,
                r.limit_energy,
                r.gap,
                r.high_branch_frac,
                r.recovery_energy,
                r.iters,
                r.wall_s
            ));
        }
        s
    }
}

/// Parses the sweep CSV back into rows.
pub fn sweep_from_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SWEEP_HEADER) {
        return Err(Error::Parse("missing sweep header".into()));
    }
    let pf = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Parse(format!("{s:?}: {e}")))
    };
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<&str> = l.split(',').collect();
            if v.len() != 8 {
                return Err(Error::Parse(format!("expected 8 columns in {l:?}")));
            }
            Ok(SweepRow {
                lambda: pf(v[0])?,
                energy: pf(v[1])?,
                limit_energy: pf(v[2])?,
                gap: pf(v[3])?,
                high_branch_frac: pf(v[4])?,
                recovery_energy: pf(v[5])?,
                iters: v[6]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("{}: {e}", v[6])))?,
                wall_s: pf(v[7])?,
            })
        })
        .collect()
}

/// Runs the limit solve once (on the data of the largest λ) and, per λ,
/// the finite-λ solve started from the better of the clamped limit
/// minimizer and the recovery field, whose energy is reported alongside.
pub fn lambda_sweep(
    bdata_per_lambda: &[(f64, BoundaryData)],
    grid: &Grid2D,
    cfg: &SolveConfig,
) -> Result<SweepTable> {
    if bdata_per_lambda.is_empty() {
        return Err(Error::InvalidParameter("empty lambda list".into()));
    }
    if bdata_per_lambda.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidParameter(
            "lambda list must be strictly increasing".into(),
        ));
    }
    let limit_data = &bdata_per_lambda.last().expect("nonempty").1;
    let (u_lim, lim_report) = minimize_limit(limit_data, grid, cfg)?;
    let e_lim = lim_report.energy;
    let rows = bdata_per_lambda
        .par_iter()
        .map(|(lambda, data)| {
            let start = Instant::now();
            let cfg = SolveConfig {
                lambda: Some(*lambda),
                ..cfg.clone()
            };
            let p = EnergyParams::new(*lambda)?;
            let ext = boundary_extension(grid, data, EXTENSION_ITERS)?;
            let recovery = recovery_sequence(&u_lim, &ext, *lambda, mollifier_c2())?;
            let rec_e = energy_quadrature(&recovery, |h| g_lambda(h, &p))?;
            let clamped = apply_clamped_boundary(&u_lim, data)?;
            let clamped_e = energy_quadrature(&clamped, |h| g_lambda(h, &p))?;
            let init = if clamped_e <= rec_e {
                &clamped
            } else {
                &recovery
            };
            let (_, rep) = minimize_finite_lambda_from(data, grid, &cfg, init)?;
            Ok(SweepRow {
                lambda: *lambda,
                energy: rep.energy,
                limit_energy: e_lim,
                gap: rep.energy - e_lim,
                high_branch_frac: rep.high_branch_frac(),
                recovery_energy: rec_e,
                iters: rep.iterations,
                wall_s: start.elapsed().as_secs_f64(),
            })
        })
        .collect();
    Ok(SweepTable {
        limit_field: u_lim,
        limit_report: lim_report,
        rows,
    })
}

/// Principal stresses of `σ = cof ∇²u` per node, `(λ₁ ≥ λ₂)`, as two fields.
pub fn stress_eigen_maps(u: &ScalarField) -> Result<(ScalarField, ScalarField)> {
    let g = &u.grid;
    let hs = u.hessian_field()?;
    let mut l1 = ScalarField::zeros(g);
    let mut l2 = ScalarField::zeros(g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let (a, b) = hs[j * g.nx + i].cof().eigenvalues();
            l1.set(i, j, a);
            l2.set(i, j, b);
        }
    }
    Ok((l1, l2))
}

/// Writes `<stem>_sigma1.csv` and `<stem>_sigma2.csv` into `dir`.
pub fn write_eigen_maps(u: &ScalarField, dir: &Path, stem: &str) -> Result<()> {
    let (a, b) = stress_eigen_maps(u)?;
    a.write_csv(&dir.join(format!("{stem}_sigma1.csv")))?;
    b.write_csv(&dir.join(format!("{stem}_sigma2.csv")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airy::{boundary_data_from_traction, BoundaryLoad, PointLoad};
    use crate::density::limit_density;

    fn quadratic_data(g: &Grid2D, xi: Sym2) -> BoundaryData {
        BoundaryData::from_traces(
            g,
            |x, y| 0.5 * (xi.a * x * x + 2.0 * xi.b * x * y + xi.d * y * y),
            |x, y| [xi.a * x + xi.b * y, xi.b * x + xi.d * y],
        )
    }

    fn three_point(g: &Grid2D) -> BoundaryData {
        let loads = vec![
            PointLoad {
                x: [0.25, 0.0],
                v: [0.0, 1.0],
            },
            PointLoad {
                x: [0.5, 0.0],
                v: [0.0, -2.0],
            },
            PointLoad {
                x: [0.75, 0.0],
                v: [0.0, 1.0],
            },
        ];
        boundary_data_from_traction(&BoundaryLoad::Points(loads), &g.boundary_curve()).unwrap()
    }

    /// Traces of a seeded random cubic potential (balanced by construction).
    fn random_data(g: &Grid2D, seed: u64) -> BoundaryData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        BoundaryData::from_traces(
            g,
            |x, y| {
                c[0] * x * x
                    + c[1] * x * y
                    + c[2] * y * y
                    + c[3] * x * x * x
                    + c[4] * x * x * y
                    + c[5] * x * y * y
                    + c[6] * y * y * y
            },
            |x, y| {
                [
                    2.0 * c[0] * x
                        + c[1] * y
                        + 3.0 * c[3] * x * x
                        + 2.0 * c[4] * x * y
                        + c[5] * y * y,
                    c[1] * x
                        + 2.0 * c[2] * y
                        + c[4] * x * x
                        + 2.0 * c[5] * x * y
                        + 3.0 * c[6] * y * y,
                ]
            },
        )
    }

    fn fd_check(obj: &Objective, x: &[f64], eps: f64, seed: u64) -> f64 {
        let (_, g) = obj.value_and_grad(x, eps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let k = rng.gen_range(0..x.len());
            let h = 1e-6 * (1.0 + x[k].abs());
            let mut xp = x.to_vec();
            xp[k] += h;
            let mut xm = x.to_vec();
            xm[k] -= h;
            let fd = (obj.value_and_grad(&xp, eps).unwrap().0
                - obj.value_and_grad(&xm, eps).unwrap().0)
                / (2.0 * h);
            let scale = g[k].abs().max(fd.abs()).max(1e-3);
            worst = worst.max((fd - g[k]).abs() / scale);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = Grid2D::unit_square(17).unwrap();
        let data = random_data(&g, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for obj in [
            Objective::finite(&g, &data, 100.0).unwrap(),
            Objective::limit(&g, &data).unwrap(),
        ] {
            let x: Vec<f64> = (0..obj.len()).map(|_| rng.gen_range(-0.05..0.05)).collect();
            for eps in [1e-1, 1e-2, 1e-3] {
                let err = fd_check(&obj, &x, eps, 5);
                assert!(err <= 1e-4, "eps {eps}: {err}");
            }
        }
    }

    #[test]
    fn zero_data_gives_zero_field() {
        let g = Grid2D::unit_square(12).unwrap();
        let data = BoundaryData::zeros(g.boundary_len());
        let cfg = SolveConfig {
            perturbation: 0.1,
            ..SolveConfig::finite(10.0)
        };
        let (u, rep) = minimize_finite_lambda(&data, &g, &cfg).unwrap();
        assert_eq!(u.max_abs(), 0.0);
        assert_eq!(rep.energy, 0.0);
        let (u, rep) = minimize_limit(&data, &g, &cfg).unwrap();
        assert_eq!(u.max_abs(), 0.0);
        assert_eq!(rep.energy, 0.0);
    }

    #[test]
    fn finite_history_decreases_and_traces_are_pinned() {
        let g = Grid2D::unit_square(32).unwrap();
        let data = random_data(&g, 7);
        let cfg = SolveConfig {
            max_iters: 150,
            perturbation: 0.01,
            seed: 2,
            ..SolveConfig::finite(100.0)
        };
        let (u, rep) = minimize_finite_lambda(&data, &g, &cfg).unwrap();
        let mut ends = rep.stage_starts.clone();
        ends.push(rep.history.len());
        for w in ends.windows(2) {
            for k in w[0] + 1..w[1] {
                assert!(rep.history[k] <= rep.history[k - 1], "stage step {k}");
            }
        }
        assert!(rep.energy <= rep.initial_energy);
        for (k, (i, j)) in g.boundary_nodes().into_iter().enumerate() {
            assert_eq!(u.get(i as isize, j as isize), data.f1[k]);
        }
        // ghost rows reproduce the prescribed normal derivatives
        for e in Edge::ALL {
            let n = e.normal();
            for (i, j) in g.edge_nodes(e) {
                let k = g.boundary_index(i, j).unwrap();
                let target = data.grad[k][0] * n[0] + data.grad[k][1] * n[1];
                assert!((u.normal_derivative(i, j, e) - target).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn high_branch_quadratic_is_recovered() {
        // ρ⁰ = 5 ≫ √λ = 1: the quadratic high branch is convex and the
        // clamped quadratic is its minimizer
        let g = Grid2D::unit_square(24).unwrap();
        let xi = Sym2::new(3.0, 0.5, 2.0);
        let data = quadratic_data(&g, xi);
        let p = EnergyParams::new(1.0).unwrap();
        let exact = g_lambda(xi, &p);
        // linear-solve oracle: the minimizer of Σ w|∇²u|² with this data
        let obj = Objective::biharmonic(&g, &data).unwrap();
        let (_, g0) = obj.value_and_grad(&vec![0.0; obj.len()], 1.0).unwrap();
        let rhs: Vec<f64> = g0.iter().map(|v| -v).collect();
        let oracle = obj.field(&Preconditioner::new(&obj).unwrap().solve(&rhs));
        let oracle_e = energy_quadrature(&oracle, |h| g_lambda(h, &p)).unwrap();
        let quad = apply_clamped_boundary(
            &ScalarField::from_fn(&g, |x, y| {
                0.5 * (xi.a * x * x + 2.0 * xi.b * x * y + xi.d * y * y)
            }),
            &data,
        )
        .unwrap();
        let quad_e = energy_quadrature(&quad, |h| g_lambda(h, &p)).unwrap();
        assert!((quad_e - exact).abs() < 1e-3 * exact, "{quad_e} vs {exact}");
        assert!(oracle_e <= quad_e);
        let cfg = SolveConfig {
            perturbation: 0.05,
            seed: 9,
            max_iters: 300,
            ..SolveConfig::finite(1.0)
        };
        let (_, rep) = minimize_finite_lambda(&data, &g, &cfg).unwrap();
        assert!(rep.energy <= quad_e + 1e-9);
        assert!(
            (rep.energy - quad_e).abs() <= 0.01 * quad_e,
            "{} vs {quad_e}",
            rep.energy
        );
        assert!(
            (rep.energy - oracle_e).abs() <= 1e-6 * oracle_e,
            "{} vs {oracle_e}",
            rep.energy
        );
        assert_eq!(rep.high_branch_frac(), 1.0);
    }

    #[test]
    fn limit_quadratic_bound_and_multistart_agreement() {
        let g = Grid2D::unit_square(24).unwrap();
        let xi = Sym2::new(1.0, 0.3, -0.5);
        let data = quadratic_data(&g, xi);
        let (_, rep) = minimize_limit(&data, &g, &SolveConfig::limit()).unwrap();
        assert!(
            rep.energy <= limit_density(xi) * (1.0 + 1e-3),
            "{}",
            rep.energy
        );

        let data = three_point(&g);
        let run = |seed| {
            let cfg = SolveConfig {
                perturbation: 0.2,
                seed,
                ..SolveConfig::limit()
            };
            minimize_limit(&data, &g, &cfg).unwrap().1.energy
        };
        let (ea, eb) = (run(1), run(2));
        assert!((ea - eb).abs() / ea.abs() <= 1e-3, "{ea} {eb}");
    }

    #[test]
    fn constant_hessian_sweep_matches_closed_form() {
        let g = Grid2D::unit_square(16).unwrap();
        let xi = Sym2::diag(1.0, -1.0);
        let data = quadratic_data(&g, xi);
        let rows: Vec<_> = [10.0, 100.0, 1000.0]
            .iter()
            .map(|&l| (l, data.clone()))
            .collect();
        let cfg = SolveConfig {
            max_iters: 300,
            ..SolveConfig::default()
        };
        let table = lambda_sweep(&rows, &g, &cfg).unwrap();
        for r in &table.rows {
            let r = r.as_ref().unwrap();
            let expect = -2.0 / r.lambda.sqrt();
            assert!((r.gap - expect).abs() <= 0.1 * expect.abs(), "{r:?}");
            assert!(r.recovery_energy >= r.energy - 1e-9);
            assert_eq!(r.high_branch_frac, 0.0);
        }
        let parsed = sweep_from_csv(&table.to_csv()).unwrap();
        let rows: Vec<_> = table
            .rows
            .iter()
            .map(|r| r.as_ref().unwrap().clone())
            .collect();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn zero_load_sweep_is_all_zero() {
        let g = Grid2D::unit_square(10).unwrap();
        let data = BoundaryData::zeros(g.boundary_len());
        let table = lambda_sweep(
            &[(10.0, data.clone()), (100.0, data)],
            &g,
            &SolveConfig::default(),
        )
        .unwrap();
        assert_eq!(table.limit_report.energy, 0.0);
        for r in &table.rows {
            let r = r.as_ref().unwrap();
            assert_eq!((r.energy, r.recovery_energy, r.gap), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn minimizer_obeys_lower_bound_and_mass_bound() {
        let g = Grid2D::unit_square(24).unwrap();
        let data = three_point(&g);
        let cfg = SolveConfig {
            max_iters: 200,
            ..SolveConfig::finite(100.0)
        };
        let (u, rep) = minimize_finite_lambda(&data, &g, &cfg).unwrap();
        let mass = energy_quadrature(&u, |h| h.rho0()).unwrap();
        assert!(rep.energy >= 0.5 * mass);
        // discrete W^{1,1} surrogate bounded by twice the energy plus the
        // first-order part, which only depends on the data here
        let w11 = u.w11_norm().unwrap();
        let grad_part = w11 - mass;
        assert!(w11 <= 2.0 * rep.energy + grad_part + 1e-12);
    }

    #[test]
    fn config_validation_and_determinism() {
        let mut cfg = SolveConfig::finite(10.0);
        cfg.schedule = vec![1e-2, 1e-1];
        assert!(cfg.validate().is_err());
        cfg.schedule = vec![];
        assert!(cfg.validate().is_err());
        let g = Grid2D::unit_square(16).unwrap();
        let data = random_data(&g, 1);
        let cfg = SolveConfig {
            max_iters: 50,
            perturbation: 0.1,
            seed: 4,
            ..SolveConfig::finite(10.0)
        };
        let (a, ra) = minimize_finite_lambda(&data, &g, &cfg).unwrap();
        let (b, rb) = minimize_finite_lambda(&data, &g, &cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(ra.history, rb.history);
        assert!(matches!(
            minimize_finite_lambda(&data, &g, &SolveConfig::limit()),
            Err(Error::InvalidParameter(_))
        ));
        let bad = BoundaryData::zeros(3);
        assert!(matches!(
            Objective::limit(&g, &bad),
            Err(Error::SizeMismatch { .. })
        ));
    }

    #[test]
    fn eigen_maps_of_bending_field() {
        let g = Grid2D::unit_square(9).unwrap();
        let data = quadratic_data(&g, Sym2::diag(1.0, -1.0));
        let u = apply_clamped_boundary(
            &ScalarField::from_fn(&g, |x, y| 0.5 * (x * x - y * y)),
            &data,
        )
        .unwrap();
        let (a, b) = stress_eigen_maps(&u).unwrap();
        for v in a.values() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        for v in b.values() {
            assert!((v + 1.0).abs() < 1e-9);
        }
        let dir = tempfile::tempdir().unwrap();
        write_eigen_maps(&u, dir.path(), "bend").unwrap();
        let back = ScalarField::from_csv(
            &std::fs::read_to_string(dir.path().join("bend_sigma1.csv")).unwrap(),
        )
        .unwrap();
        assert_eq!(back.values(), a.values());
    }
}
