//! Rectangular node grids, scalar fields with ghost layers, and the discrete
//! operators on them.
//!
//! Nodes `(i, j)` with `0 ≤ i < nx`, `0 ≤ j < ny` sit at
//! `origin + h·(i, j)`; the outermost ring is the domain boundary. Every field
//! carries a two-deep ghost ring so the Hessian stencil is defined at
//! boundary nodes. Ghost values are never free-standing: they are produced
//! by a [`GhostMap`], an affine map from the in-domain values (plus the
//! first ghost ring, when it is a free unknown) whose transpose the solver
//! uses to pull gradients back.

use std::fmt::Write as _;
use std::path::Path;

use crate::airy::BoundaryData;
use crate::error::{Error, Result};
use crate::sym2::Sym2;

pub const GHOST: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub origin: [f64; 2],
    pub mask: Vec<bool>,
}

/// Which edge of the rectangle a boundary node is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edge {
    Bottom,
    Right,
    Top,
    Left,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::Bottom, Edge::Right, Edge::Top, Edge::Left];

    pub fn normal(self) -> [f64; 2] {
        match self {
            Edge::Bottom => [0.0, -1.0],
            Edge::Right => [1.0, 0.0],
            Edge::Top => [0.0, 1.0],
            Edge::Left => [-1.0, 0.0],
        }
    }
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, h: f64, origin: [f64; 2]) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(Error::InvalidParameter(format!(
                "grid needs nx, ny >= 4, got {nx}x{ny}"
            )));
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "grid spacing must be positive, got {h}"
            )));
        }
        Ok(Self {
            nx,
            ny,
            h,
            origin,
            mask: vec![true; nx * ny],
        })
    }

    /// `n × n` nodes on `[0, 1]²`.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(n, n, 1.0 / (n as f64 - 1.0), [0.0, 0.0])
    }

    /// Grid on the rectangle `[ox, ox + width] × [oy, oy + height]` with `n`
    /// nodes along the longer side. Both sides must be whole multiples of `h`.
    pub fn rectangle(origin: [f64; 2], width: f64, height: f64, n: usize) -> Result<Self> {
        let long = width.max(height);
        let h = long / (n as f64 - 1.0);
        let nx = (width / h).round() as usize + 1;
        let ny = (height / h).round() as usize + 1;
        if ((nx - 1) as f64 * h - width).abs() > 1e-9 * long
            || ((ny - 1) as f64 * h - height).abs() > 1e-9 * long
        {
            return Err(Error::InvalidParameter(
                "rectangle sides are not commensurate with the grid".into(),
            ));
        }
        Self::new(nx, ny, h, origin)
    }

    pub fn x(&self, i: isize) -> f64 {
        self.origin[0] + self.h * i as f64
    }

    pub fn y(&self, j: isize) -> f64 {
        self.origin[1] + self.h * j as f64
    }

    pub fn width(&self) -> f64 {
        (self.nx - 1) as f64 * self.h
    }

    pub fn height(&self) -> f64 {
        (self.ny - 1) as f64 * self.h
    }

    pub fn center(&self) -> [f64; 2] {
        [
            self.origin[0] + 0.5 * self.width(),
            self.origin[1] + 0.5 * self.height(),
        ]
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.nx - 1 || j == self.ny - 1
    }

    /// Trapezoid weight of node `(i, j)` (area units).
    pub fn node_weight(&self, i: usize, j: usize) -> f64 {
        let wi = if i == 0 || i == self.nx - 1 { 0.5 } else { 1.0 };
        let wj = if j == 0 || j == self.ny - 1 { 0.5 } else { 1.0 };
        let m = if self.mask[j * self.nx + i] { 1.0 } else { 0.0 };
        wi * wj * self.h * self.h * m
    }

    /// Boundary nodes, counterclockwise from the lower-left corner.
    pub fn boundary_nodes(&self) -> Vec<(usize, usize)> {
        let (nx, ny) = (self.nx, self.ny);
        let mut out = Vec::with_capacity(self.boundary_len());
        out.extend((0..nx).map(|i| (i, 0)));
        out.extend((1..ny).map(|j| (nx - 1, j)));
        out.extend((0..nx - 1).rev().map(|i| (i, ny - 1)));
        out.extend((1..ny - 1).rev().map(|j| (0, j)));
        out
    }

    pub fn boundary_len(&self) -> usize {
        2 * (self.nx - 1) + 2 * (self.ny - 1)
    }

    /// Position of a boundary node in [`Self::boundary_nodes`].
    pub fn boundary_index(&self, i: usize, j: usize) -> Option<usize> {
        let (nx, ny) = (self.nx, self.ny);
        if j == 0 {
            Some(i)
        } else if i == nx - 1 {
            Some(nx - 1 + j)
        } else if j == ny - 1 {
            Some(nx - 1 + ny - 1 + (nx - 1 - i))
        } else if i == 0 {
            Some(2 * (nx - 1) + (ny - 1) + (ny - 1 - j))
        } else {
            None
        }
    }

    /// Nodes of one edge in increasing coordinate order, corners included.
    pub fn edge_nodes(&self, edge: Edge) -> Vec<(usize, usize)> {
        let (nx, ny) = (self.nx, self.ny);
        match edge {
            Edge::Bottom => (0..nx).map(|i| (i, 0)).collect(),
            Edge::Top => (0..nx).map(|i| (i, ny - 1)).collect(),
            Edge::Left => (0..ny).map(|j| (0, j)).collect(),
            Edge::Right => (0..ny).map(|j| (nx - 1, j)).collect(),
        }
    }

    /// Boundary polyline through the boundary nodes, counterclockwise.
    pub fn boundary_curve(&self) -> crate::airy::BoundaryCurve {
        let pts = self
            .boundary_nodes()
            .into_iter()
            .map(|(i, j)| [self.x(i as isize), self.y(j as isize)])
            .collect();
        crate::airy::BoundaryCurve::new(pts).expect("grid boundary is a valid curve")
    }

    fn stride(&self) -> usize {
        self.nx + 2 * GHOST
    }

    fn ext_len(&self) -> usize {
        self.stride() * (self.ny + 2 * GHOST)
    }

    /// Index into the ghost-extended storage.
    pub fn idx(&self, i: isize, j: isize) -> usize {
        let g = GHOST as isize;
        debug_assert!(i >= -g && j >= -g && i < self.nx as isize + g && j < self.ny as isize + g);
        ((j + g) as usize) * self.stride() + (i + g) as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: Grid2D,
    data: Vec<f64>,
    ghosts_populated: bool,
}

impl ScalarField {
    pub fn zeros(grid: &Grid2D) -> Self {
        Self {
            data: vec![0.0; grid.ext_len()],
            grid: grid.clone(),
            ghosts_populated: false,
        }
    }

    /// Samples `f` at every node including ghosts.
    pub fn from_fn(grid: &Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut u = Self::zeros(grid);
        let g = GHOST as isize;
        for j in -g..grid.ny as isize + g {
            for i in -g..grid.nx as isize + g {
                let k = grid.idx(i, j);
                u.data[k] = f(grid.x(i), grid.y(j));
            }
        }
        u.ghosts_populated = true;
        u
    }

    pub fn get(&self, i: isize, j: isize) -> f64 {
        self.data[self.grid.idx(i, j)]
    }

    /// Writes an in-domain node value; invalidates ghosts.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.grid.idx(i as isize, j as isize);
        self.data[k] = v;
        self.ghosts_populated = false;
    }

    pub fn ghosts_populated(&self) -> bool {
        self.ghosts_populated
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn raw_mut(&mut self) -> &mut Vec<f64> {
        &mut self.data
    }

    pub(crate) fn mark_populated(&mut self) {
        self.ghosts_populated = true;
    }

    /// In-domain values, row-major (`j` outer).
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.nx * self.grid.ny);
        for j in 0..self.grid.ny {
            for i in 0..self.grid.nx {
                out.push(self.get(i as isize, j as isize));
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn hessian(&self, i: usize, j: usize) -> Result<Sym2> {
        discrete_hessian(self, i, j)
    }

    /// Hessians at all in-domain nodes, row-major.
    pub fn hessian_field(&self) -> Result<Vec<Sym2>> {
        if !self.ghosts_populated {
            return Err(Error::GhostsNotPopulated);
        }
        let g = &self.grid;
        let mut out = Vec::with_capacity(g.nx * g.ny);
        for j in 0..g.ny {
            for i in 0..g.nx {
                out.push(hessian_unchecked(&self.data, g, i as isize, j as isize));
            }
        }
        Ok(out)
    }

    /// Outward normal derivative at boundary node `(i, j)` on `edge`.
    pub fn normal_derivative(&self, i: usize, j: usize, edge: Edge) -> f64 {
        let (i, j) = (i as isize, j as isize);
        let h2 = 2.0 * self.grid.h;
        match edge {
            Edge::Left => -(self.get(i + 1, j) - self.get(i - 1, j)) / h2,
            Edge::Right => (self.get(i + 1, j) - self.get(i - 1, j)) / h2,
            Edge::Bottom => -(self.get(i, j + 1) - self.get(i, j - 1)) / h2,
            Edge::Top => (self.get(i, j + 1) - self.get(i, j - 1)) / h2,
        }
    }

    /// `h²Σ|∇u| + Σ w ρ⁰(∇²u)`: a discrete `W^{1,1}` + Hessian-mass norm.
    pub fn w11_norm(&self) -> Result<f64> {
        let hs = self.hessian_field()?;
        let g = &self.grid;
        let mut s = 0.0;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let (ii, jj) = (i as isize, j as isize);
                let gx = (self.get(ii + 1, jj) - self.get(ii - 1, jj)) / (2.0 * g.h);
                let gy = (self.get(ii, jj + 1) - self.get(ii, jj - 1)) / (2.0 * g.h);
                let w = g.node_weight(i, j);
                s += w * (self.get(ii, jj).abs() + gx.hypot(gy) + hs[j * g.nx + i].rho0());
            }
        }
        Ok(s)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// `# nx ny h ox oy` followed by `ny` rows of `nx` values, `j = 0` first.
    pub fn to_csv(&self) -> String {
        let g = &self.grid;
        let mut s = format!(
            "# {} {} {:e} {:e} {:e}\n",
            g.nx, g.ny, g.h, g.origin[0], g.origin[1]
        );
        for j in 0..g.ny {
            let row: Vec<String> = (0..g.nx)
                .map(|i| format!("{:e}", self.get(i as isize, j as isize)))
                .collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    /// Parses the grid CSV format. Ghosts are left unpopulated.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty field file".into()))?;
        let parts: Vec<&str> = header.trim_start_matches('#').split_whitespace().collect();
        if parts.len() != 5 {
            return Err(Error::Parse("header must be `# nx ny h ox oy`".into()));
        }
        let pf = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("{s}: {e}")))
        };
        let pu = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Parse(format!("{s}: {e}")))
        };
        let grid = Grid2D::new(
            pu(parts[0])?,
            pu(parts[1])?,
            pf(parts[2])?,
            [pf(parts[3])?, pf(parts[4])?],
        )?;
        let mut u = ScalarField::zeros(&grid);
        let mut rows = 0;
        for (j, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let vals: Vec<&str> = line.split(',').collect();
            if j >= grid.ny || vals.len() != grid.nx {
                return Err(Error::Parse(format!("row {j} has wrong shape")));
            }
            for (i, v) in vals.iter().enumerate() {
                u.set(i, j, pf(v.trim())?);
            }
            rows += 1;
        }
        if rows != grid.ny {
            return Err(Error::SizeMismatch {
                expected: grid.ny,
                got: rows,
            });
        }
        Ok(u)
    }
}

#[inline]
pub(crate) fn hessian_unchecked(u: &[f64], g: &Grid2D, i: isize, j: isize) -> Sym2 {
    let c = u[g.idx(i, j)];
    let ih2 = 1.0 / (g.h * g.h);
    let uxx = (u[g.idx(i + 1, j)] - 2.0 * c + u[g.idx(i - 1, j)]) * ih2;
    let uyy = (u[g.idx(i, j + 1)] - 2.0 * c + u[g.idx(i, j - 1)]) * ih2;
    let uxy = (u[g.idx(i + 1, j + 1)] - u[g.idx(i + 1, j - 1)] - u[g.idx(i - 1, j + 1)]
        + u[g.idx(i - 1, j - 1)])
        * 0.25
        * ih2;
    Sym2::new(uxx, uxy, uyy)
}

/// Adds the transpose of the Hessian stencil at `(i, j)` applied to `gh`
/// (a gradient with respect to `(uxx, uxy, uyy)`) into `out`.
#[inline]
pub(crate) fn hessian_adjoint(out: &mut [f64], g: &Grid2D, i: isize, j: isize, gh: Sym2) {
    let ih2 = 1.0 / (g.h * g.h);
    let (a, b, d) = (gh.a * ih2, 0.25 * gh.b * ih2, gh.d * ih2);
    out[g.idx(i, j)] -= 2.0 * (a + d);
    out[g.idx(i + 1, j)] += a;
    out[g.idx(i - 1, j)] += a;
    out[g.idx(i, j + 1)] += d;
    out[g.idx(i, j - 1)] += d;
    out[g.idx(i + 1, j + 1)] += b;
    out[g.idx(i - 1, j - 1)] += b;
    out[g.idx(i + 1, j - 1)] -= b;
    out[g.idx(i - 1, j + 1)] -= b;
}

/// Centered second differences; the mixed term uses the four diagonal
/// neighbours so that the discrete `∂x∂y` and `∂y∂x` coincide.
pub fn discrete_hessian(u: &ScalarField, i: usize, j: usize) -> Result<Sym2> {
    if !u.ghosts_populated {
        return Err(Error::GhostsNotPopulated);
    }
    Ok(hessian_unchecked(&u.data, &u.grid, i as isize, j as isize))
}

/// How the first ghost ring is determined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GhostMode {
    /// Set from prescribed normal derivatives.
    Clamped,
    /// Free unknowns (edge ghosts only); corners and the second ring are
    /// extrapolated.
    Free,
}

#[derive(Clone, Debug)]
struct GhostRule {
    target: usize,
    terms: Vec<(usize, f64)>,
    constant: f64,
}

/// Affine map producing ghost values from in-domain values.
#[derive(Clone, Debug)]
pub struct GhostMap {
    mode: GhostMode,
    rules: Vec<GhostRule>,
}

impl GhostMap {
    pub fn new(grid: &Grid2D, mode: GhostMode, data: Option<&BoundaryData>) -> Result<Self> {
        if mode == GhostMode::Clamped {
            let d = data.ok_or_else(|| {
                Error::InvalidParameter("clamped ghosts need boundary data".into())
            })?;
            check_len(grid, d)?;
        }
        let (nx, ny) = (grid.nx as isize, grid.ny as isize);
        let h = grid.h;
        let mut rules = Vec::new();
        let normal_deriv = |i: usize, j: usize, e: Edge| -> f64 {
            let d = data.expect("checked");
            let k = grid.boundary_index(i, j).expect("boundary node");
            let n = e.normal();
            d.grad[k][0] * n[0] + d.grad[k][1] * n[1]
        };

        // edge ghosts, rings 1 and 2: mirror plus normal-derivative offset
        for e in Edge::ALL {
            for (i, j) in grid.edge_nodes(e) {
                let (ii, jj) = (i as isize, j as isize);
                let (di, dj) = match e {
                    Edge::Left => (-1, 0),
                    Edge::Right => (1, 0),
                    Edge::Bottom => (0, -1),
                    Edge::Top => (0, 1),
                };
                for r in 1..=GHOST as isize {
                    let target = grid.idx(ii + r * di, jj + r * dj);
                    let rule = match mode {
                        GhostMode::Clamped => GhostRule {
                            target,
                            terms: vec![(grid.idx(ii - r * di, jj - r * dj), 1.0)],
                            constant: 2.0 * r as f64 * h * normal_deriv(i, j, e),
                        },
                        GhostMode::Free if r == 1 => continue,
                        GhostMode::Free => GhostRule {
                            // quadratic extrapolation from ring 1, node, first interior
                            target,
                            terms: vec![
                                (grid.idx(ii + di, jj + dj), 3.0),
                                (grid.idx(ii, jj), -3.0),
                                (grid.idx(ii - di, jj - dj), 1.0),
                            ],
                            constant: 0.0,
                        },
                    };
                    rules.push(rule);
                }
            }
        }
        // corner blocks: quadratic extrapolation along the ghost columns
        for &ci in &[-1isize, -2, nx, nx + 1] {
            for (cj, dir) in [(-1isize, 1isize), (-2, 1), (ny, -1), (ny + 1, -1)] {
                let base = if dir > 0 { 0 } else { ny - 1 };
                let dist = (cj - base).abs();
                let (c0, c1, c2) = if dist == 1 {
                    (3.0, -3.0, 1.0)
                } else {
                    (6.0, -8.0, 3.0)
                };
                rules.push(GhostRule {
                    target: grid.idx(ci, cj),
                    terms: vec![
                        (grid.idx(ci, base), c0),
                        (grid.idx(ci, base + dir), c1),
                        (grid.idx(ci, base + 2 * dir), c2),
                    ],
                    constant: 0.0,
                });
            }
        }
        Ok(Self { mode, rules })
    }

    pub fn mode(&self) -> GhostMode {
        self.mode
    }

    pub fn apply(&self, u: &mut [f64]) {
        for r in &self.rules {
            let v = r.constant + r.terms.iter().map(|&(k, c)| c * u[k]).sum::<f64>();
            u[r.target] = v;
        }
    }

    /// Every ghost written by the map as an affine combination
    /// `constant + Σ c·u[k]` of entries the map does not write.
    pub(crate) fn expanded(&self) -> std::collections::HashMap<usize, (Vec<(usize, f64)>, f64)> {
        let mut out: std::collections::HashMap<usize, (Vec<(usize, f64)>, f64)> =
            Default::default();
        for r in &self.rules {
            let mut terms: Vec<(usize, f64)> = Vec::new();
            let mut constant = r.constant;
            for &(k, c) in &r.terms {
                match out.get(&k) {
                    Some((ts, c0)) => {
                        constant += c * c0;
                        terms.extend(ts.iter().map(|&(kk, cc)| (kk, c * cc)));
                    }
                    None => terms.push((k, c)),
                }
            }
            out.insert(r.target, (terms, constant));
        }
        out
    }

    /// Pulls gradient entries on ghost nodes back onto their sources and
    /// zeroes the ghost entries.
    pub fn adjoint(&self, grad: &mut [f64]) {
        for r in self.rules.iter().rev() {
            let gt = grad[r.target];
            grad[r.target] = 0.0;
            if gt != 0.0 {
                for &(k, c) in &r.terms {
                    grad[k] += c * gt;
                }
            }
        }
    }
}

fn check_len(grid: &Grid2D, data: &BoundaryData) -> Result<()> {
    let n = grid.boundary_len();
    for len in [data.f1.len(), data.f2.len(), data.grad.len()] {
        if len != n {
            return Err(Error::SizeMismatch {
                expected: n,
                got: len,
            });
        }
    }
    Ok(())
}

/// Boundary nodes set to `f1`, ghosts set so the centered normal difference
/// reproduces the prescribed normal derivative; interior untouched.
pub fn apply_clamped_boundary(u: &ScalarField, data: &BoundaryData) -> Result<ScalarField> {
    let map = GhostMap::new(&u.grid, GhostMode::Clamped, Some(data))?;
    let mut out = u.clone();
    set_boundary_values(&mut out, data)?;
    map.apply(&mut out.data);
    out.ghosts_populated = true;
    Ok(out)
}

pub(crate) fn set_boundary_values(u: &mut ScalarField, data: &BoundaryData) -> Result<()> {
    check_len(&u.grid, data)?;
    for (k, (i, j)) in u.grid.boundary_nodes().into_iter().enumerate() {
        let idx = u.grid.idx(i as isize, j as isize);
        u.data[idx] = data.f1[k];
    }
    Ok(())
}

/// Fills ghosts treating the first ring as free (already stored) values.
pub fn fill_free_ghosts(u: &mut ScalarField) {
    let map = GhostMap::new(&u.grid, GhostMode::Free, None).expect("free ghosts need no data");
    map.apply(&mut u.data);
    u.ghosts_populated = true;
}

/// `Σ w_ij · density(∇²u_ij)` with trapezoid node weights.
pub fn energy_quadrature(u: &ScalarField, density: impl Fn(Sym2) -> f64) -> Result<f64> {
    let hs = u.hessian_field()?;
    let g = &u.grid;
    let mut e = 0.0;
    for j in 0..g.ny {
        for i in 0..g.nx {
            e += g.node_weight(i, j) * density(hs[j * g.nx + i]);
        }
    }
    Ok(e)
}

/// `Σ_edges Σ w h |γ₁u − f₂|` with composite trapezoid weights per edge.
pub fn boundary_mismatch_l1(u: &ScalarField, data: &BoundaryData) -> Result<f64> {
    if !u.ghosts_populated {
        return Err(Error::GhostsNotPopulated);
    }
    check_len(&u.grid, data)?;
    let g = &u.grid;
    let mut s = 0.0;
    for e in Edge::ALL {
        let nodes = g.edge_nodes(e);
        let last = nodes.len() - 1;
        let n = e.normal();
        for (m, &(i, j)) in nodes.iter().enumerate() {
            let w = if m == 0 || m == last { 0.5 } else { 1.0 } * g.h;
            let k = g.boundary_index(i, j).expect("boundary");
            let target = data.grad[k][0] * n[0] + data.grad[k][1] * n[1];
            s += w * (u.normal_derivative(i, j, e) - target).abs();
        }
    }
    Ok(s)
}

/// Limit functional: `Σ w 2ρ⁰(∇²u) + 2 Σ h |γ₁u − f₂|`.
pub fn limit_energy(u: &ScalarField, data: &BoundaryData) -> Result<f64> {
    Ok(energy_quadrature(u, crate::density::limit_density)? + 2.0 * boundary_mismatch_l1(u, data)?)
}

/// Stress of a grid potential in mimetic (staggered) form: the normal
/// components `σ₁₁ = δ_yy u`, `σ₂₂ = δ_xx u` live on nodes and the shear
/// `σ₁₂ = −δ_x δ_y u` on cell centers. The node average of the shear equals
/// the off-diagonal of `cof` of [`discrete_hessian`].
#[derive(Clone, Debug)]
pub struct StaggeredStress {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    /// `nx·ny` node values, row-major.
    pub s11: Vec<f64>,
    pub s22: Vec<f64>,
    /// `(nx−1)·(ny−1)` cell-center values, row-major.
    pub s12: Vec<f64>,
}

impl StaggeredStress {
    pub fn from_potential(u: &ScalarField) -> Result<Self> {
        if !u.ghosts_populated {
            return Err(Error::GhostsNotPopulated);
        }
        let g = &u.grid;
        let h2 = g.h * g.h;
        let v = |i: isize, j: isize| u.data[g.idx(i, j)];
        let (mut s11, mut s22) = (
            Vec::with_capacity(g.nx * g.ny),
            Vec::with_capacity(g.nx * g.ny),
        );
        for j in 0..g.ny as isize {
            for i in 0..g.nx as isize {
                s11.push((v(i, j + 1) - 2.0 * v(i, j) + v(i, j - 1)) / h2);
                s22.push((v(i + 1, j) - 2.0 * v(i, j) + v(i - 1, j)) / h2);
            }
        }
        let mut s12 = Vec::with_capacity((g.nx - 1) * (g.ny - 1));
        for j in 0..g.ny as isize - 1 {
            for i in 0..g.nx as isize - 1 {
                s12.push(-(v(i + 1, j + 1) - v(i, j + 1) - v(i + 1, j) + v(i, j)) / h2);
            }
        }
        Ok(Self {
            nx: g.nx,
            ny: g.ny,
            h: g.h,
            s11,
            s22,
            s12,
        })
    }

    /// Largest |σ| entry.
    pub fn max_abs(&self) -> f64 {
        self.s11
            .iter()
            .chain(&self.s22)
            .chain(&self.s12)
            .fold(0.0, |a, b| a.max(b.abs()))
    }

    /// Largest row divergence, taken with centered first differences at the
    /// cell-edge midpoints: `δ_x σ₁₁ + δ_y σ₁₂` on horizontal edges and
    /// `δ_x σ₁₂ + δ_y σ₂₂` on vertical edges.
    pub fn max_divergence(&self) -> f64 {
        let (nx, ny, h) = (self.nx, self.ny, self.h);
        let n = |i: usize, j: usize| j * nx + i;
        let c = |i: usize, j: usize| j * (nx - 1) + i;
        let mut r: f64 = 0.0;
        for j in 1..ny - 1 {
            for i in 0..nx - 1 {
                let d = (self.s11[n(i + 1, j)] - self.s11[n(i, j)])
                    + (self.s12[c(i, j)] - self.s12[c(i, j - 1)]);
                r = r.max(d.abs() / h);
            }
        }
        for j in 0..ny - 1 {
            for i in 1..nx - 1 {
                let d = (self.s12[c(i, j)] - self.s12[c(i - 1, j)])
                    + (self.s22[n(i, j + 1)] - self.s22[n(i, j)]);
                r = r.max(d.abs() / h);
            }
        }
        r
    }
}

/// `(max row divergence, max|σ|/h)` of the stress of `u`.
pub fn stress_divergence_residual(u: &ScalarField) -> Result<(f64, f64)> {
    let s = StaggeredStress::from_potential(u)?;
    Ok((s.max_divergence(), s.max_abs() / s.h))
}
