//! Boundary loads and Airy potentials.
//!
//! A divergence-free stress is `σ = cof ∇²u`. For a traction `g` on the
//! boundary, the clamped-plate data of the potential follow from two
//! arc-length integrations of `g⊥ = (−g₂, g₁)`:
//! `(g⊥)⁽¹⁾ = Φ(g⊥)` and `(g⊥)⁽²⁾ = Φ(τ·(g⊥)⁽¹⁾)`, where `Φ` integrates from
//! the first vertex and removes the mean. Both integrals close around the
//! curve exactly when the load is balanced. The boundary data are then
//! `f₁ = −(g⊥)⁽²⁾` and `f₂ = −(g⊥)⁽¹⁾·n`, determined up to an affine function.

use crate::error::{Error, Result};
use crate::grid::{Grid2D, ScalarField};
use crate::sym2::Sym2;

fn perp(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

/// Closed, positively oriented polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryCurve {
    vertices: Vec<[f64; 2]>,
    seg_len: Vec<f64>,
    tangent: Vec<[f64; 2]>,
    normal: Vec<[f64; 2]>,
    arc: Vec<f64>,
    length: f64,
}

impl BoundaryCurve {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::InvalidParameter(
                "boundary curve needs at least 3 vertices".into(),
            ));
        }
        let mut area2 = 0.0;
        let mut seg_len = Vec::with_capacity(n);
        let mut tangent = Vec::with_capacity(n);
        let mut normal = Vec::with_capacity(n);
        let mut arc = Vec::with_capacity(n);
        let mut s = 0.0;
        for k in 0..n {
            let p = vertices[k];
            let q = vertices[(k + 1) % n];
            area2 += p[0] * q[1] - q[0] * p[1];
            let d = sub(q, p);
            let l = norm(d);
            if !(l > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "degenerate boundary segment at vertex {k}"
                )));
            }
            let t = [d[0] / l, d[1] / l];
            arc.push(s);
            s += l;
            seg_len.push(l);
            tangent.push(t);
            // τ = n⊥ ⇒ n = (τ₂, −τ₁)
            normal.push([t[1], -t[0]]);
        }
        if !(area2 > 0.0) {
            return Err(Error::InvalidParameter(
                "boundary curve must be counterclockwise".into(),
            ));
        }
        Ok(Self {
            vertices,
            seg_len,
            tangent,
            normal,
            arc,
            length: s,
        })
    }

    /// Polyline approximating a circle, `n` vertices.
    pub fn circle(center: [f64; 2], radius: f64, n: usize) -> Result<Self> {
        let pts = (0..n)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            })
            .collect();
        Self::new(pts)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn vertex(&self, k: usize) -> [f64; 2] {
        self.vertices[k]
    }

    pub fn segment_length(&self, k: usize) -> f64 {
        self.seg_len[k]
    }

    pub fn segment_tangent(&self, k: usize) -> [f64; 2] {
        self.tangent[k]
    }

    pub fn segment_normal(&self, k: usize) -> [f64; 2] {
        self.normal[k]
    }

    /// Arc length from vertex 0 to vertex `k`.
    pub fn arc_length(&self, k: usize) -> f64 {
        self.arc[k]
    }

    pub fn total_length(&self) -> f64 {
        self.length
    }

    /// Trapezoid weight of vertex `k`.
    pub fn vertex_weight(&self, k: usize) -> f64 {
        let n = self.len();
        0.5 * (self.seg_len[k] + self.seg_len[(k + n - 1) % n])
    }

    /// Unit normal at a vertex: normalized average of the adjacent segments.
    pub fn vertex_normal(&self, k: usize) -> [f64; 2] {
        let n = self.len();
        let a = self.normal[(k + n - 1) % n];
        let b = self.normal[k];
        let m = [a[0] + b[0], a[1] + b[1]];
        let l = norm(m);
        [m[0] / l, m[1] / l]
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.len();
        0.5 * (0..n)
            .map(|k| {
                let p = self.vertices[k];
                let q = self.vertices[(k + 1) % n];
                p[0] * q[1] - q[0] * p[1]
            })
            .sum::<f64>()
    }

    /// Locates `x` on the curve: `(segment, arc length)`; `None` if it is
    /// farther than `tol` from every segment.
    pub fn locate(&self, x: [f64; 2], tol: f64) -> Option<(usize, f64)> {
        let mut best: Option<(f64, usize, f64)> = None;
        for k in 0..self.len() {
            let p = self.vertices[k];
            let d = sub(x, p);
            let s = dot(d, self.tangent[k]).clamp(0.0, self.seg_len[k]);
            let foot = [p[0] + s * self.tangent[k][0], p[1] + s * self.tangent[k][1]];
            let dist = norm(sub(x, foot));
            if best.is_none_or(|b| dist < b.0) {
                best = Some((dist, k, self.arc[k] + s));
            }
        }
        best.filter(|b| b.0 <= tol)
            .map(|(_, k, s)| (k, if s >= self.length { 0.0 } else { s }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointLoad {
    pub x: [f64; 2],
    pub v: [f64; 2],
}

/// Boundary traction: sampled force densities per vertex, or point loads.
#[derive(Clone, Debug, PartialEq)]
pub enum BoundaryLoad {
    Sampled(Vec<[f64; 2]>),
    Points(Vec<PointLoad>),
}

/// Clamped-plate data for the Airy potential, one entry per boundary vertex.
///
/// `grad` is the full boundary gradient `−(g⊥)⁽¹⁾`, so normal derivatives
/// can be taken along either edge at a corner; `f2 = grad · n` with the
/// vertex normal.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryData {
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub grad: Vec<[f64; 2]>,
}

impl BoundaryData {
    pub fn zeros(n: usize) -> Self {
        Self {
            f1: vec![0.0; n],
            f2: vec![0.0; n],
            grad: vec![[0.0; 2]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.f1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f1.is_empty()
    }

    /// Exact traces of a potential `u` with gradient `du` on the grid boundary.
    pub fn from_traces(
        grid: &Grid2D,
        u: impl Fn(f64, f64) -> f64,
        du: impl Fn(f64, f64) -> [f64; 2],
    ) -> Self {
        let curve = grid.boundary_curve();
        let mut out = Self::zeros(grid.boundary_len());
        for (k, (i, j)) in grid.boundary_nodes().into_iter().enumerate() {
            let (x, y) = (grid.x(i as isize), grid.y(j as isize));
            out.f1[k] = u(x, y);
            out.grad[k] = du(x, y);
            out.f2[k] = dot(out.grad[k], curve.vertex_normal(k));
        }
        out
    }

    /// Removes the discrete-L² projection of `f1` onto affine functions and
    /// the matching constant gradient.
    pub fn project_affine(&mut self, curve: &BoundaryCurve) {
        let n = self.len();
        // Gram system in the basis {1, x, y}
        let mut m = [[0.0; 3]; 3];
        let mut r = [0.0; 3];
        for k in 0..n {
            let w = curve.vertex_weight(k);
            let p = curve.vertex(k);
            let b = [1.0, p[0], p[1]];
            for a in 0..3 {
                r[a] += w * b[a] * self.f1[k];
                for c in 0..3 {
                    m[a][c] += w * b[a] * b[c];
                }
            }
        }
        let c = solve3(m, r);
        for k in 0..n {
            let p = curve.vertex(k);
            self.f1[k] -= c[0] + c[1] * p[0] + c[2] * p[1];
            self.grad[k][0] -= c[1];
            self.grad[k][1] -= c[2];
            self.f2[k] = dot(self.grad[k], curve.vertex_normal(k));
        }
    }

    /// `vertex,arc_length,f1,f2,grad_x,grad_y`, one row per boundary vertex.
    pub fn to_csv(&self, curve: &BoundaryCurve) -> String {
        let mut s = String::from("vertex,arc_length,f1,f2,grad_x,grad_y\n");
        for k in 0..self.len() {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e}\n",
                k,
                curve.arc_length(k),
                self.f1[k],
                self.f2[k],
                self.grad[k][0],
                self.grad[k][1]
            ));
        }
        s
    }

    /// Parses the format written by [`BoundaryData::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("vertex,arc_length,f1,f2,grad_x,grad_y") {
            return Err(Error::Parse("missing boundary data header".into()));
        }
        let mut out = Self::zeros(0);
        for (k, line) in lines.enumerate() {
            let v: Vec<&str> = line.split(',').map(str::trim).collect();
            if v.len() != 6 || v[0].parse::<usize>().ok() != Some(k) {
                return Err(Error::Parse(format!(
                    "malformed boundary row {k}: {line:?}"
                )));
            }
            let f = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{s:?}: {e}")))
            };
            out.f1.push(f(v[2])?);
            out.f2.push(f(v[3])?);
            out.grad.push([f(v[4])?, f(v[5])?]);
        }
        Ok(out)
    }
}

fn solve3(m: [[f64; 3]; 3], r: [f64; 3]) -> [f64; 3] {
    let det = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det(m);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let mut mc = m;
        for row in 0..3 {
            mc[row][c] = r[row];
        }
        out[c] = det(mc) / d;
    }
    out
}

/// Resultant force, resultant moment `Σ x⊥·g`, and the load scale used to
/// judge them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalanceResiduals {
    pub resultant: [f64; 2],
    pub moment: f64,
    pub scale: f64,
}

pub fn balance_residuals(load: &BoundaryLoad, curve: &BoundaryCurve) -> Result<BalanceResiduals> {
    let mut res = [0.0; 2];
    let mut mom = 0.0;
    let mut mag = 0.0;
    let mut reach: f64 = 1.0;
    let mut add = |x: [f64; 2], f: [f64; 2], w: f64| {
        res[0] += w * f[0];
        res[1] += w * f[1];
        mom += w * dot(perp(x), f);
        mag += w * norm(f);
        reach = reach.max(norm(x));
    };
    match load {
        BoundaryLoad::Sampled(g) => {
            if g.len() != curve.len() {
                return Err(Error::SizeMismatch {
                    expected: curve.len(),
                    got: g.len(),
                });
            }
            for (k, &gk) in g.iter().enumerate() {
                add(curve.vertex(k), gk, curve.vertex_weight(k));
            }
        }
        BoundaryLoad::Points(ps) => {
            for p in ps {
                add(p.x, p.v, 1.0);
            }
        }
    }
    Ok(BalanceResiduals {
        resultant: res,
        moment: mom,
        scale: mag * reach,
    })
}

/// Default relative tolerance for [`balance_check`].
pub const BALANCE_TOL: f64 = 1e-9;

pub fn balance_check(load: &BoundaryLoad, curve: &BoundaryCurve, tol: f64) -> bool {
    match balance_residuals(load, curve) {
        Ok(r) => norm(r.resultant) <= tol * r.scale && r.moment.abs() <= tol * r.scale,
        Err(_) => false,
    }
}

fn require_balanced(load: &BoundaryLoad, curve: &BoundaryCurve) -> Result<()> {
    let r = balance_residuals(load, curve)?;
    let tol = BALANCE_TOL * r.scale;
    if norm(r.resultant) > tol {
        return Err(Error::Unbalanced(format!(
            "resultant force integral (g·1) = ({:e}, {:e}) is nonzero",
            r.resultant[0], r.resultant[1]
        )));
    }
    if r.moment.abs() > tol {
        return Err(Error::Unbalanced(format!(
            "moment integral (x⊥·g) = {:e} is nonzero",
            r.moment
        )));
    }
    Ok(())
}

/// Integrates per-segment increments from vertex 0 and removes the
/// trapezoid mean. Returns the closure mismatch as well.
fn cumulate(curve: &BoundaryCurve, increments: &[f64]) -> (Vec<f64>, f64) {
    let n = curve.len();
    let mut out = vec![0.0; n];
    for k in 1..n {
        out[k] = out[k - 1] + increments[k - 1];
    }
    let closure = out[n - 1] + increments[n - 1];
    let mean = (0..n).map(|k| curve.vertex_weight(k) * out[k]).sum::<f64>() / curve.total_length();
    for v in &mut out {
        *v -= mean;
    }
    (out, closure)
}

/// `Φ`: trapezoid antiderivative along arc length from vertex 0, shifted to
/// zero mean.
pub fn phi_integral(values: &[f64], curve: &BoundaryCurve) -> Result<Vec<f64>> {
    let n = curve.len();
    if values.len() != n {
        return Err(Error::SizeMismatch {
            expected: n,
            got: values.len(),
        });
    }
    let inc: Vec<f64> = (0..n)
        .map(|k| 0.5 * curve.segment_length(k) * (values[k] + values[(k + 1) % n]))
        .collect();
    let mass: f64 = (0..n)
        .map(|k| curve.vertex_weight(k) * values[k].abs())
        .sum();
    let mean = (0..n)
        .map(|k| curve.vertex_weight(k) * values[k])
        .sum::<f64>()
        / curve.total_length();
    let tol = 1e-9 * mass / curve.total_length() + 1e-300;
    if mean.abs() > tol {
        return Err(Error::NonzeroMean { mean, tol });
    }
    Ok(cumulate(curve, &inc).0)
}

/// First and second boundary integrals of `g⊥`, per vertex, before sign
/// flip and affine projection.
#[derive(Clone, Debug)]
pub struct TractionIntegrals {
    pub first: Vec<[f64; 2]>,
    pub second: Vec<f64>,
    /// For point loads: loads sorted by arc position with the constant value
    /// of the first integral on the arc that follows each load.
    pub arcs: Vec<(PointLoad, f64, [f64; 2])>,
    /// For point loads: the second integral at each load of `arcs`, exact
    /// even when the load sits inside a polyline segment.
    pub second_at_loads: Vec<f64>,
}

pub fn traction_integrals(load: &BoundaryLoad, curve: &BoundaryCurve) -> Result<TractionIntegrals> {
    require_balanced(load, curve)?;
    let n = curve.len();
    match load {
        BoundaryLoad::Sampled(g) => {
            let gp: Vec<[f64; 2]> = g.iter().map(|&v| perp(v)).collect();
            let c0: Vec<f64> = gp.iter().map(|v| v[0]).collect();
            let c1: Vec<f64> = gp.iter().map(|v| v[1]).collect();
            let f0 = phi_integral(&c0, curve)?;
            let f1 = phi_integral(&c1, curve)?;
            let first: Vec<[f64; 2]> = f0.into_iter().zip(f1).map(|(a, b)| [a, b]).collect();
            let inc: Vec<f64> = (0..n)
                .map(|k| {
                    let m = [
                        0.5 * (first[k][0] + first[(k + 1) % n][0]),
                        0.5 * (first[k][1] + first[(k + 1) % n][1]),
                    ];
                    curve.segment_length(k) * dot(curve.segment_tangent(k), m)
                })
                .collect();
            let (second, _) = cumulate(curve, &inc);
            Ok(TractionIntegrals {
                first,
                second,
                arcs: Vec::new(),
                second_at_loads: Vec::new(),
            })
        }
        BoundaryLoad::Points(ps) => point_load_integrals(ps, curve),
    }
}

fn point_load_integrals(ps: &[PointLoad], curve: &BoundaryCurve) -> Result<TractionIntegrals> {
    let n = curve.len();
    let len = curve.total_length();
    let tol = 1e-9 * len;
    let mut located = Vec::with_capacity(ps.len());
    for p in ps {
        let (_, s) = curve.locate(p.x, tol).ok_or_else(|| {
            Error::InvalidParameter(format!("point load at {:?} is not on the boundary", p.x))
        })?;
        // a load at the base vertex is accounted for at the end of the loop
        let s = if s <= tol { len } else { s };
        located.push((*p, s));
    }
    located.sort_by(|a, b| a.1.total_cmp(&b.1));

    // piecewise-constant first integral: value on [s_i, s_{i+1})
    let step = |s: f64, strict: bool| -> [f64; 2] {
        let mut f = [0.0; 2];
        for (p, sp) in &located {
            if *sp < s || (!strict && *sp <= s) {
                let q = perp(p.v);
                f[0] += q[0];
                f[1] += q[1];
            }
        }
        f
    };
    // exact arc integrals of the step function and of τ·step, split at loads
    let mut breaks: Vec<f64> = (0..n)
        .map(|k| curve.arc_length(k))
        .chain(located.iter().map(|l| l.1))
        .collect();
    breaks.push(len);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() <= tol);
    let seg_of = |s: f64| -> usize {
        let mut k = 0;
        while k + 1 < n && curve.arc_length(k + 1) <= s + tol {
            k += 1;
        }
        k
    };
    let mut mean1 = [0.0; 2];
    for w in breaks.windows(2) {
        let f = step(0.5 * (w[0] + w[1]), true);
        mean1[0] += (w[1] - w[0]) * f[0];
        mean1[1] += (w[1] - w[0]) * f[1];
    }
    mean1 = [mean1[0] / len, mean1[1] / len];
    let first_at = |s: f64| -> [f64; 2] {
        let f = step(s, true);
        [f[0] - mean1[0], f[1] - mean1[1]]
    };

    // second integral along the breakpoints: piecewise linear
    let mut second_at_break = vec![0.0; breaks.len()];
    for m in 1..breaks.len() {
        let (a, b) = (breaks[m - 1], breaks[m]);
        let k = seg_of(0.5 * (a + b));
        second_at_break[m] = second_at_break[m - 1]
            + (b - a) * dot(curve.segment_tangent(k), first_at(0.5 * (a + b)));
    }
    let mut mean2 = 0.0;
    for m in 1..breaks.len() {
        mean2 += 0.5 * (breaks[m] - breaks[m - 1]) * (second_at_break[m] + second_at_break[m - 1]);
    }
    mean2 /= len;
    let second_at = |s: f64| -> f64 {
        let m = breaks
            .partition_point(|&b| b < s - tol)
            .min(breaks.len() - 1);
        if (breaks[m] - s).abs() <= tol {
            return second_at_break[m] - mean2;
        }
        let (a, b) = (breaks[m - 1], breaks[m]);
        let w = (s - a) / (b - a);
        (1.0 - w) * second_at_break[m - 1] + w * second_at_break[m] - mean2
    };

    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    for k in 0..n {
        let s = curve.arc_length(k);
        // at a load vertex take the average of the two adjacent arcs
        let before = if k == 0 {
            first_at(len - tol)
        } else {
            first_at(s - tol)
        };
        let after = first_at(s + tol);
        first.push([0.5 * (before[0] + after[0]), 0.5 * (before[1] + after[1])]);
        second.push(second_at(s));
    }
    let arcs = located
        .iter()
        .map(|&(p, s)| {
            let s = if s >= len { 0.0 } else { s };
            (p, s, first_at(s + tol))
        })
        .collect();
    let second_at_loads = located.iter().map(|&(_, s)| second_at(s)).collect();
    Ok(TractionIntegrals {
        first,
        second,
        arcs,
        second_at_loads,
    })
}

/// `f₁ = −(g⊥)⁽²⁾`, `f₂ = −(g⊥)⁽¹⁾·n`, with the affine part projected out.
pub fn boundary_data_from_traction(
    load: &BoundaryLoad,
    curve: &BoundaryCurve,
) -> Result<BoundaryData> {
    let ti = traction_integrals(load, curve)?;
    let n = curve.len();
    let mut d = BoundaryData::zeros(n);
    for k in 0..n {
        d.f1[k] = -ti.second[k];
        d.grad[k] = [-ti.first[k][0], -ti.first[k][1]];
        d.f2[k] = dot(d.grad[k], curve.vertex_normal(k));
    }
    d.project_affine(curve);
    Ok(d)
}

/// `σ = cof ∇²u` at every in-domain node, row-major.
pub fn stress_from_potential(u: &ScalarField) -> Result<Vec<Sym2>> {
    Ok(u.hessian_field()?.into_iter().map(|h| h.cof()).collect())
}

/// Affine piece `u(x) = value + slope·(x − base)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinePiece {
    pub base: [f64; 2],
    pub value: f64,
    pub slope: [f64; 2],
}

impl AffinePiece {
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.value + dot(self.slope, sub(x, self.base))
    }
}

/// Continuous piecewise-affine potential of a balanced set of point loads:
/// one affine sector between consecutive load segments `[xᵢ, x̄ᵢ]`, and a fan
/// triangulation of the inner polygon.
#[derive(Clone, Debug)]
pub struct PointLoadPotential {
    /// Sector polygons `[xᵢ, boundary vertices…, xᵢ₊₁, x̄ᵢ₊₁, x̄ᵢ]`.
    pub sectors: Vec<(Vec<[f64; 2]>, AffinePiece)>,
    /// Fan triangles `(c, x̄ᵢ, x̄ᵢ₊₁)` with their affine interpolants.
    pub fan: Vec<([[f64; 2]; 3], AffinePiece)>,
    pub inner: Vec<[f64; 2]>,
    pub loads: Vec<PointLoad>,
}

fn affine_through(p: [[f64; 2]; 3], v: [f64; 3]) -> AffinePiece {
    let e1 = sub(p[1], p[0]);
    let e2 = sub(p[2], p[0]);
    let det = e1[0] * e2[1] - e1[1] * e2[0];
    let (d1, d2) = (v[1] - v[0], v[2] - v[0]);
    let slope = [
        (d1 * e2[1] - d2 * e1[1]) / det,
        (e1[0] * d2 - e2[0] * d1) / det,
    ];
    AffinePiece {
        base: p[0],
        value: v[0],
        slope,
    }
}

fn point_in_polygon(x: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for k in 0..n {
        let (a, b) = (poly[k], poly[(k + 1) % n]);
        if (a[1] > x[1]) != (b[1] > x[1]) {
            let xc = a[0] + (x[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if x[0] < xc {
                inside = !inside;
            }
        }
    }
    inside
}

impl PointLoadPotential {
    pub fn eval(&self, x: [f64; 2]) -> Option<f64> {
        for (poly, piece) in &self.sectors {
            if point_in_polygon(x, poly) {
                return Some(piece.eval(x));
            }
        }
        for (tri, piece) in &self.fan {
            if point_in_polygon(x, tri) {
                return Some(piece.eval(x));
            }
        }
        None
    }

    /// Largest mismatch of adjacent sector pieces sampled along the shared
    /// load segments, relative to the largest slope.
    pub fn sector_edge_residual(&self, samples: usize) -> f64 {
        let n = self.sectors.len();
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (_, p) in &self.sectors {
            scale = scale.max(norm(p.slope));
        }
        for i in 0..n {
            let (a, b) = (&self.sectors[i].1, &self.sectors[(i + 1) % n].1);
            let (x, xb) = (self.loads[(i + 1) % n].x, self.inner[(i + 1) % n]);
            for m in 0..=samples {
                let w = m as f64 / samples as f64;
                let p = [x[0] + w * (xb[0] - x[0]), x[1] + w * (xb[1] - x[1])];
                worst = worst.max((a.eval(p) - b.eval(p)).abs());
            }
        }
        worst / scale.max(1e-300)
    }

    /// `2 ρ⁰(D²u)(Ω)`: the Hessian of a continuous piecewise-affine function
    /// lives on interior edges as `[∇u]·ν (ν⊗ν)`, so its mass is
    /// `Σ |[∇u]·ν| · length`.
    pub fn limit_energy(&self) -> f64 {
        let n = self.sectors.len();
        let jump = |a: &AffinePiece, b: &AffinePiece, p: [f64; 2], q: [f64; 2]| {
            let e = sub(q, p);
            let l = norm(e);
            let nu = [-e[1] / l, e[0] / l];
            let d = sub(a.slope, b.slope);
            dot(d, nu).abs() * l
        };
        let mut mass = 0.0;
        for i in 0..n {
            let j = (i + 1) % n;
            // sector i | sector i+1 along [x_{i+1}, x̄_{i+1}]
            mass += jump(
                &self.sectors[i].1,
                &self.sectors[j].1,
                self.loads[j].x,
                self.inner[j],
            );
            // sector i | fan triangle i along [x̄_i, x̄_{i+1}]
            mass += jump(
                &self.sectors[i].1,
                &self.fan[i].1,
                self.inner[i],
                self.inner[j],
            );
            // fan triangle i-1 | fan triangle i along [c, x̄_i]
            let prev = (i + n - 1) % n;
            mass += jump(
                &self.fan[prev].1,
                &self.fan[i].1,
                self.fan[i].0[0],
                self.inner[i],
            );
        }
        2.0 * mass
    }
}

/// True when `v` points strictly into (or strictly out of) the domain at
/// the boundary point, i.e. it is not tangent to any adjacent segment.
fn is_transversal(curve: &BoundaryCurve, x: [f64; 2], v: [f64; 2]) -> bool {
    let tol = 1e-9 * curve.total_length();
    let n = curve.len();
    let vn = norm(v);
    let Some((k, s)) = curve.locate(x, tol) else {
        return false;
    };
    let at_vertex = (s - curve.arc_length(k)).abs() <= tol
        || (curve.arc_length(k) + curve.segment_length(k) - s).abs() <= tol;
    let a = dot(v, curve.segment_normal(k)) / vn;
    if !at_vertex {
        return a.abs() > 1e-9;
    }
    let kv = if (s - curve.arc_length(k)).abs() <= tol {
        k
    } else {
        (k + 1) % n
    };
    let (na, nb) = (
        curve.segment_normal((kv + n - 1) % n),
        curve.segment_normal(kv),
    );
    let (a, b) = (dot(v, na) / vn, dot(v, nb) / vn);
    a.abs() > 1e-9 && b.abs() > 1e-9 && a.signum() == b.signum()
}

/// Inner polygon vertices `x̄ᵢ = xᵢ ∓ depth·vᵢ/|vᵢ|`, stepping into the domain,
/// in the arc order of the loads.
pub fn default_inner_polygon(
    loads: &[PointLoad],
    curve: &BoundaryCurve,
    depth: f64,
) -> Result<Vec<[f64; 2]>> {
    let ti = traction_integrals(&BoundaryLoad::Points(loads.to_vec()), curve)?;
    let mut out = Vec::with_capacity(loads.len());
    for (p, s, _) in &ti.arcs {
        let (k, _) = curve
            .locate(p.x, 1e-9 * curve.total_length())
            .expect("located");
        let n = curve.len();
        let at_vertex = (s - curve.arc_length(k)).abs() <= 1e-9 * curve.total_length();
        let nrm = if at_vertex {
            curve.vertex_normal(k)
        } else {
            curve.segment_normal(k)
        };
        let _ = n;
        let vn = norm(p.v);
        let sgn = if dot(p.v, nrm) > 0.0 { -1.0 } else { 1.0 };
        out.push([
            p.x[0] + sgn * depth * p.v[0] / vn,
            p.x[1] + sgn * depth * p.v[1] / vn,
        ]);
    }
    Ok(out)
}

/// Builds the piecewise-affine potential with traces `γ₀u = (g⊥)⁽²⁾` and
/// `γ₁u = (g⊥)⁽¹⁾·n`. `inner_polygon[i]` belongs to the `i`-th load in arc
/// order and must lie on the line through the load along its direction.
pub fn point_load_potential(
    loads: &[PointLoad],
    curve: &BoundaryCurve,
    inner_polygon: &[[f64; 2]],
) -> Result<PointLoadPotential> {
    if loads.len() < 2 {
        return Err(Error::InvalidParameter(
            "need at least two point loads".into(),
        ));
    }
    if inner_polygon.len() != loads.len() {
        return Err(Error::SizeMismatch {
            expected: loads.len(),
            got: inner_polygon.len(),
        });
    }
    for p in loads {
        if !is_transversal(curve, p.x, p.v) {
            return Err(Error::TangentialLoad {
                x: p.x[0],
                y: p.x[1],
            });
        }
    }
    let ti = traction_integrals(&BoundaryLoad::Points(loads.to_vec()), curve)?;
    let len = curve.total_length();
    let tol = 1e-9 * len;
    let sorted: Vec<PointLoad> = ti.arcs.iter().map(|a| a.0).collect();
    for (p, xb) in sorted.iter().zip(inner_polygon) {
        let d = sub(*xb, p.x);
        if (d[0] * p.v[1] - d[1] * p.v[0]).abs() > 1e-9 * norm(d) * norm(p.v) {
            return Err(Error::InvalidParameter(
                "inner polygon vertex is not on the load line".into(),
            ));
        }
    }
    let m = sorted.len();
    let mut sectors = Vec::with_capacity(m);
    for i in 0..m {
        let j = (i + 1) % m;
        let (pi, si, fi) = ti.arcs[i];
        let (pj, sj, _) = ti.arcs[j];
        let piece = AffinePiece {
            base: pi.x,
            value: ti.second_at_loads[i],
            slope: fi,
        };
        let mut poly = vec![pi.x];
        let end = if sj > si { sj } else { sj + len };
        for k in 0..curve.len() {
            for lap in [0.0, len] {
                let s = curve.arc_length(k) + lap;
                if s > si + tol && s < end - tol {
                    poly.push(curve.vertex(k));
                }
            }
        }
        // keep arc order when the sector wraps past vertex 0
        let mut tail: Vec<([f64; 2], f64)> = poly[1..]
            .iter()
            .map(|&v| {
                let (_, s) = curve.locate(v, tol).expect("vertex on curve");
                (v, if s <= si + tol { s + len } else { s })
            })
            .collect();
        tail.sort_by(|a, b| a.1.total_cmp(&b.1));
        poly.truncate(1);
        poly.extend(tail.into_iter().map(|t| t.0));
        poly.push(pj.x);
        poly.push(inner_polygon[j]);
        poly.push(inner_polygon[i]);
        sectors.push((poly, piece));
    }
    let c = {
        let s = inner_polygon
            .iter()
            .fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / m as f64, s[1] / m as f64]
    };
    let inner_vals: Vec<f64> = (0..m)
        .map(|i| sectors[i].1.eval(inner_polygon[i]))
        .collect();
    let cval = inner_vals.iter().sum::<f64>() / m as f64;
    let fan = (0..m)
        .map(|i| {
            let j = (i + 1) % m;
            let tri = [c, inner_polygon[i], inner_polygon[j]];
            (
                tri,
                affine_through(tri, [cval, inner_vals[i], inner_vals[j]]),
            )
        })
        .collect();
    Ok(PointLoadPotential {
        sectors,
        fan,
        inner: inner_polygon.to_vec(),
        loads: sorted,
    })
}
