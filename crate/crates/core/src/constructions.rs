//! Explicit fields used as numerical witnesses: one-dimensional two-slope
//! laminates, their two-dimensional cutoff versions, a two-level laminate
//! realizing the envelope split, and the recovery sequence that turns a
//! limit minimizer into a finite-λ competitor (shrink, then mollify).

use rayon::prelude::*;

use crate::envelope::{rsgl_split, SplitCandidate};
use crate::error::{Error, Result};
use crate::grid::{Grid2D, ScalarField, GHOST};
use crate::sym2::Sym2;

/// Mean-zero periodic square wave `φ` on `[0, 1)`: `amp·(1−t)` on
/// `[q, q+t)`, `−amp·t` elsewhere, together with its first and second
/// antiderivatives `P`, `Q` from 0. With `q = (1−t)/2` both are periodic.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Wave {
    t: f64,
    q: f64,
    amp: f64,
}

impl Wave {
    fn new(t: f64, amp: f64) -> Self {
        Self {
            t,
            q: (1.0 - t) / 2.0,
            amp,
        }
    }

    fn hi(&self) -> f64 {
        self.amp * (1.0 - self.t)
    }

    fn lo(&self) -> f64 {
        -self.amp * self.t
    }

    fn in_phase(&self, y: f64) -> bool {
        let s = y - y.floor();
        s >= self.q && s < self.q + self.t
    }

    fn phi(&self, y: f64) -> f64 {
        if self.in_phase(y) {
            self.hi()
        } else {
            self.lo()
        }
    }

    fn p(&self, y: f64) -> f64 {
        let s = y - y.floor();
        let (a, b, q, t) = (self.hi(), self.lo(), self.q, self.t);
        if s < q {
            b * s
        } else if s < q + t {
            b * q + a * (s - q)
        } else {
            b * q + a * t + b * (s - q - t)
        }
    }

    fn qq(&self, y: f64) -> f64 {
        let s = y - y.floor();
        let (a, b, q, t) = (self.hi(), self.lo(), self.q, self.t);
        if s < q {
            0.5 * b * s * s
        } else if s < q + t {
            let r = s - q;
            0.5 * b * q * q + b * q * r + 0.5 * a * r * r
        } else {
            let r = s - q - t;
            let q1 = 0.5 * b * q * q + b * q * t + 0.5 * a * t * t;
            q1 + (b * q + a * t) * r + 0.5 * b * r * r
        }
    }
}

/// Phase offset making the double integral of the square wave over one
/// period vanish: `∫₀¹ P = −(α−β)·t·(2q + t − 1)/2`, zero at `q = (1−t)/2`.
pub fn q_offset(t: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "q_offset needs 0 < t < 1, got {t}"
        )));
    }
    Ok((1.0 - t) / 2.0)
}

/// Two-slope laminate: `u'' ∈ {α, β}` with fractions `t`, `1−t`, `k` periods.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaminateSpec {
    pub alpha: f64,
    pub beta: f64,
    pub t: f64,
    pub k: usize,
    pub q: f64,
    pub eps_margin: f64,
    pub eta_angle: f64,
}

impl LaminateSpec {
    pub fn new(alpha: f64, beta: f64, t: f64, k: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidParameter(format!(
                "volume fraction t = {t} outside [0, 1]"
            )));
        }
        if k == 0 {
            return Err(Error::InvalidParameter(
                "need at least one oscillation period".into(),
            ));
        }
        let q = if t > 0.0 && t < 1.0 {
            q_offset(t)?
        } else {
            0.0
        };
        Ok(Self {
            alpha,
            beta,
            t,
            k,
            q,
            eps_margin: 0.05,
            eta_angle: 0.0,
        })
    }

    /// Effective second derivative `tα + (1−t)β`.
    pub fn mean(&self) -> f64 {
        if self.alpha == self.beta {
            return self.alpha;
        }
        self.t * self.alpha + (1.0 - self.t) * self.beta
    }

    fn wave(&self) -> Wave {
        Wave {
            t: self.t,
            q: self.q,
            amp: self.alpha - self.beta,
        }
    }
}

/// Samples of `u`, `u'`, `u''` at `n` uniform nodes of `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledProfile {
    pub n: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub du: Vec<f64>,
    pub d2u: Vec<f64>,
}

impl SampledProfile {
    /// Fraction of nodes where `u''` equals `value` (to 1e-12 relative).
    pub fn fraction_equal(&self, value: f64) -> f64 {
        let tol = 1e-12 * value.abs().max(1.0);
        self.d2u
            .iter()
            .filter(|v| (**v - value).abs() <= tol)
            .count() as f64
            / self.n as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,u,du,d2u\n");
        for k in 0..self.n {
            s.push_str(&format!(
                "{:e},{:e},{:e},{:e}\n",
                self.x[k], self.u[k], self.du[k], self.d2u[k]
            ));
        }
        s
    }

    /// Parses the format written by [`SampledProfile::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("x,u,du,d2u") {
            return Err(Error::Parse("missing profile header".into()));
        }
        let mut cols: [Vec<f64>; 4] = Default::default();
        for line in lines {
            let v: Vec<&str> = line.split(',').map(str::trim).collect();
            if v.len() != 4 {
                return Err(Error::Parse(format!("malformed profile row {line:?}")));
            }
            for (c, s) in cols.iter_mut().zip(v) {
                c.push(s.parse().map_err(|e| Error::Parse(format!("{s:?}: {e}")))?);
            }
        }
        let [x, u, du, d2u] = cols;
        Ok(Self {
            n: x.len(),
            x,
            u,
            du,
            d2u,
        })
    }
}

/// `u = u_t + Q(kx)/k²` with `u_t = ½(tα+(1−t)β)x²`; nodes inside the
/// `α`-phase (transitions included) carry `u'' = α`.
pub fn laminate_1d(spec: &LaminateSpec, n: usize) -> Result<SampledProfile> {
    if !(0.0..=1.0).contains(&spec.t) {
        return Err(Error::InvalidParameter(format!(
            "volume fraction t = {} outside [0, 1]",
            spec.t
        )));
    }
    if n < 64 * spec.k {
        return Err(Error::InvalidParameter(format!(
            "need n >= 64·k = {}, got {n}",
            64 * spec.k
        )));
    }
    let w = spec.wave();
    let k = spec.k as f64;
    let m = spec.mean();
    let mut out = SampledProfile {
        n,
        x: vec![],
        u: vec![],
        du: vec![],
        d2u: vec![],
    };
    for i in 0..n {
        let x = i as f64 / (n - 1) as f64;
        let y = k * x;
        let (u, du, d2u) = if spec.t == 0.0 || spec.t == 1.0 || spec.alpha == spec.beta {
            (0.5 * m * x * x, m * x, m)
        } else {
            let d2u = if w.in_phase(y) { spec.alpha } else { spec.beta };
            (0.5 * m * x * x + w.qq(y) / (k * k), m * x + w.p(y) / k, d2u)
        };
        out.x.push(x);
        out.u.push(u);
        out.du.push(du);
        out.d2u.push(d2u);
    }
    Ok(out)
}

/// C² smoothstep `6r⁵ − 15r⁴ + 10r³` clamped to `[0, 1]`, with derivatives.
fn smoothstep(r: f64) -> (f64, f64, f64) {
    if r <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if r >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let r2 = r * r;
        (
            r2 * r * (10.0 - 15.0 * r + 6.0 * r2),
            30.0 * r2 * (1.0 - r) * (1.0 - r),
            60.0 * r * (1.0 - r) * (1.0 - 2.0 * r),
        )
    }
}

/// Cutoff on `[0, 1]`: zero to second order at both ends, one on `[e, 1−e]`.
fn cutoff(x: f64, e: f64) -> (f64, f64, f64) {
    let (a, da, dda) = smoothstep(x / e);
    let (b, db, ddb) = smoothstep((1.0 - x) / e);
    let (da, dda) = (da / e, dda / (e * e));
    let (db, ddb) = (-db / e, ddb / (e * e));
    (a * b, da * b + a * db, dda * b + 2.0 * da * db + a * ddb)
}

/// Writes `ξ₁ − ξ₂ = amp·η⊗η`; returns `(amp, angle of η)`.
pub fn rank_one_decomposition(xi1: Sym2, xi2: Sym2) -> Result<(f64, f64)> {
    let d = xi1 - xi2;
    let scale = d.norm();
    if scale == 0.0 {
        return Ok((0.0, 0.0));
    }
    if d.det().abs() > 1e-10 * d.norm_sq() {
        return Err(Error::NotRankOne);
    }
    let (l1, l2) = d.eigenvalues();
    let (amp, angle) = if l1.abs() >= l2.abs() {
        (l1, d.principal_angle())
    } else {
        (l2, d.principal_angle() + std::f64::consts::FRAC_PI_2)
    };
    if (d - amp * Sym2::outer_dir(angle)).norm() > 1e-10 * scale {
        return Err(Error::NotRankOne);
    }
    Ok((amp, angle))
}

/// Cutoff laminate on the unit square: `u = ½xᵀξ_t x + c(x)·Ψ(x·η)` with
/// `ξ_t = tξ₁ + (1−t)ξ₂`, `Ψ'' ∈ {(1−t)a, −ta}` in `k` periods along `η`,
/// and `c` the product cutoff of width `eps_margin`. Sampled on an
/// `grid_n × grid_n` node grid including ghosts.
pub fn build_laminate_2d(
    xi1: Sym2,
    xi2: Sym2,
    t: f64,
    k: usize,
    eps_margin: f64,
    grid_n: usize,
) -> Result<ScalarField> {
    let (amp, angle) = rank_one_decomposition(xi1, xi2)?;
    if !(eps_margin > 0.0 && eps_margin < 0.25) {
        return Err(Error::InvalidParameter(format!(
            "eps_margin = {eps_margin} outside (0, 1/4)"
        )));
    }
    if !(0.0..=1.0).contains(&t) || k == 0 {
        return Err(Error::InvalidParameter(
            "need t in [0, 1] and k >= 1".into(),
        ));
    }
    let grid = Grid2D::unit_square(grid_n)?;
    let xt = t * xi1 + (1.0 - t) * xi2;
    let (c, s) = (angle.cos(), angle.sin());
    let s0 = [0.0, c, s, c + s].into_iter().fold(f64::INFINITY, f64::min);
    let wave = Wave::new(t.clamp(0.0, 1.0), amp);
    let kf = k as f64;
    let active = amp != 0.0 && t > 0.0 && t < 1.0;
    Ok(ScalarField::from_fn(&grid, |x, y| {
        let base = 0.5 * (xt.a * x * x + 2.0 * xt.b * x * y + xt.d * y * y);
        if !active {
            return base;
        }
        let cut = cutoff(x, eps_margin).0 * cutoff(y, eps_margin).0;
        if cut == 0.0 {
            return base;
        }
        let sp = x * c + y * s - s0;
        base + cut * wave.qq(kf * sp) / (kf * kf)
    }))
}

/// One lamination level along a coordinate axis.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Level {
    wave: Wave,
    k: f64,
}

impl Level {
    fn eval(&self, s: f64) -> (f64, f64, f64) {
        let y = self.k * s;
        (
            self.wave.qq(y) / (self.k * self.k),
            self.wave.p(y) / self.k,
            self.wave.phi(y),
        )
    }
}

/// Two-level laminate realizing `ξ = β ξ₃ + (1−β)(α ξ₄ + (1−α)ξ₅)`:
/// layers in `y` alternate between `ξ₃` and `ξ_mid`, and inside the
/// `ξ_mid` layers a finer lamination in `x` splits `ξ_mid` into `ξ₄`, `ξ₅`.
///
/// `u = ½xᵀξx + c(x)Ψ_out(y) + χ(y)Ψ_in(x)`. Both profiles vanish with their
/// first derivatives at 0 and 1, the `ξ₃` layers touch `y = 0` and `y = 1`,
/// and `χ` switches the inner lamination on inside the `ξ_mid` layers with
/// its transitions placed in the `ξ₃` layers. Only the outer profile needs
/// the cutoff `c` in `x`, so `u` equals the quadratic on `∂[0,1]²` to first
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct NestedLaminate {
    pub xi: Sym2,
    outer: Option<Level>,
    inner: Option<Level>,
    eps_margin: f64,
    /// Width of the boundary blend as a fraction of `eps_margin`; the blend
    /// hugs the boundary so the laminate is intact on `[eps, 1−eps]`.
    cut_fraction: f64,
    /// Width of the inner-lamination fade as a fraction of the half `ξ₃`
    /// strip.
    ramp: f64,
    /// Cosine modes `(A_m, κ_m)` of the inner profile; inside the `ξ₃`
    /// strips each decays like the biharmonic boundary layer
    /// `(1 + κs)e^{−κs}`.
    modes: Vec<(f64, f64)>,
}

/// Number of inner-profile modes given their own boundary layer.
const LAYER_MODES: usize = 96;

impl NestedLaminate {
    /// Builds the laminate from the splits of [`rsgl_split`].
    pub fn from_rsgl(
        xi: Sym2,
        lambda: f64,
        k_out: usize,
        k_in: usize,
        eps_margin: f64,
        ramp: f64,
    ) -> Result<Self> {
        let (_, splits) = rsgl_split(xi, lambda)?;
        let mut outer = None;
        let mut inner = None;
        for sp in &splits {
            if sp.eta_angle == 0.0 {
                inner = Some(*sp);
            } else {
                outer = Some(*sp);
            }
        }
        Self::new(xi, outer, inner, k_out, k_in, eps_margin, ramp)
    }

    /// `outer` must laminate along `e₂`, `inner` along `e₁` (applied to the
    /// second child of `outer`).
    pub fn new(
        xi: Sym2,
        outer: Option<SplitCandidate>,
        inner: Option<SplitCandidate>,
        k_out: usize,
        k_in: usize,
        eps_margin: f64,
        ramp: f64,
    ) -> Result<Self> {
        if !(eps_margin > 0.0 && eps_margin < 0.25) {
            return Err(Error::InvalidParameter(format!(
                "eps_margin = {eps_margin} outside (0, 1/4)"
            )));
        }
        if !(ramp > 0.0 && ramp <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "ramp = {ramp} outside (0, 1]"
            )));
        }
        if k_out == 0 || k_in == 0 {
            return Err(Error::InvalidParameter(
                "oscillation counts must be >= 1".into(),
            ));
        }
        let axis = |sp: &SplitCandidate, angle: f64| {
            if (sp.eta_angle - angle).abs() > 1e-12 || !(sp.t > 0.0 && sp.t < 1.0) {
                Err(Error::InvalidParameter(
                    "nested laminate needs axis-aligned proper splits".into(),
                ))
            } else {
                Ok(())
            }
        };
        let outer = match outer {
            Some(sp) => {
                axis(&sp, std::f64::consts::FRAC_PI_2)?;
                // phase I = second child (fraction 1−t), amplitude ξ₂ − ξ₁ = −a
                Some(Level {
                    wave: Wave::new(1.0 - sp.t, -sp.alpha),
                    k: k_out as f64,
                })
            }
            None => None,
        };
        let inner = match inner {
            Some(sp) => {
                axis(&sp, 0.0)?;
                Some(Level {
                    wave: Wave::new(sp.t, sp.alpha),
                    k: k_in as f64,
                })
            }
            None => None,
        };
        let modes = match (outer, inner) {
            (Some(_), Some(i)) => {
                let w = i.wave;
                let two_pi = 2.0 * std::f64::consts::PI;
                (1..=LAYER_MODES)
                    .map(|m| {
                        let om = two_pi * m as f64;
                        let c = 2.0 * w.amp * ((om * (w.q + w.t)).sin() - (om * w.q).sin()) / om;
                        (-c / (om * om) / (i.k * i.k), om * i.k)
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        Ok(Self {
            xi,
            outer,
            inner,
            eps_margin,
            cut_fraction: 1.0,
            ramp,
            modes,
        })
    }

    pub fn with_cut_fraction(mut self, f: f64) -> Result<Self> {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "cut fraction {f} outside (0, 1]"
            )));
        }
        self.cut_fraction = f;
        Ok(self)
    }

    fn cut(&self, x: f64) -> (f64, f64, f64) {
        cutoff(x, self.eps_margin * self.cut_fraction)
    }

    /// Inner term `w` and its derivatives `[w, w_x, w_y, w_xx, w_xy, w_yy]`
    /// before the boundary blend. In the `ξ_mid` layers `w = Ψ_in(x)`; in the
    /// `ξ₃` strips, at distance `s` from the nearest `ξ_mid` layer,
    /// `w = χ(s)·R(x, s)` with `R = Ψ_in − Σ A_m cos(κ_m x)(1 − g_m(s))`,
    /// `g_m = (1 + κ_m s)e^{−κ_m s}`, so `w` and `∂_s w` match at `s = 0`.
    fn inner_term(&self, i: Level, x: f64, y: f64) -> [f64; 6] {
        let (p, dp, ddp) = i.eval(x);
        let Some(o) = self.outer else {
            return [p, dp, 0.0, ddp, 0.0, 0.0];
        };
        let (q, ti) = (o.wave.q, o.wave.t);
        let sl = o.k * y - (o.k * y).floor();
        if sl >= q && sl < q + ti {
            return [p, dp, 0.0, ddp, 0.0, 0.0];
        }
        let (s, sign) = if sl >= q + ti {
            ((sl - q - ti) / o.k, 1.0)
        } else {
            ((q - sl) / o.k, -1.0)
        };
        let half = q / o.k;
        let sb = self.ramp * half;
        if s >= sb {
            return [0.0; 6];
        }
        let (r, r_x, r_s, r_xx, r_xs, r_ss) = {
            let (mut r, mut r_x, mut r_s, mut r_xx, mut r_xs, mut r_ss) =
                (p, dp, 0.0, ddp, 0.0, 0.0);
            for &(a, k) in &self.modes {
                let z = k * s;
                let e = (-z).exp();
                let (g, dg, ddg) = ((1.0 + z) * e, -k * k * s * e, k * k * (z - 1.0) * e);
                let (sn, cs) = (k * x).sin_cos();
                r -= a * cs * (1.0 - g);
                r_x += a * k * sn * (1.0 - g);
                r_xx += a * k * k * cs * (1.0 - g);
                r_s += a * cs * dg;
                r_ss += a * cs * ddg;
                r_xs -= a * k * sn * dg;
            }
            (r, r_x, r_s, r_xx, r_xs, r_ss)
        };
        let (c, dc, ddc) = {
            let (a, b, cc) = smoothstep(s / sb);
            (1.0 - a, -b / sb, -cc / (sb * sb))
        };
        let w = c * r;
        let w_s = dc * r + c * r_s;
        let w_xs = dc * r_x + c * r_xs;
        let w_ss = ddc * r + 2.0 * dc * r_s + c * r_ss;
        [w, c * r_x, sign * w_s, c * r_xx, sign * w_xs, w_ss]
    }

    /// Inner term with the boundary blend applied when the laminate has an
    /// outer level (there the blend breaks the exact zero phase anyway, and
    /// the unlaminated state is cheaper).
    fn blended_inner(&self, i: Level, x: f64, y: f64) -> [f64; 6] {
        let w = self.inner_term(i, x, y);
        if self.outer.is_none() {
            return w;
        }
        let (d, dd, ddd) = self.cut(x);
        [
            d * w[0],
            dd * w[0] + d * w[1],
            d * w[2],
            ddd * w[0] + 2.0 * dd * w[1] + d * w[3],
            dd * w[2] + d * w[4],
            d * w[5],
        ]
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        let xi = self.xi;
        let mut u = 0.5 * (xi.a * x * x + 2.0 * xi.b * x * y + xi.d * y * y);
        if let Some(o) = self.outer {
            u += self.cut(x).0 * o.eval(y).0;
        }
        if let Some(i) = self.inner {
            u += self.blended_inner(i, x, y)[0];
        }
        u
    }

    /// Exact Hessian at an interior point.
    pub fn hessian(&self, x: f64, y: f64) -> Sym2 {
        let mut h = self.xi;
        if let Some(o) = self.outer {
            let (c, dc, ddc) = self.cut(x);
            let (p, dp, ddp) = o.eval(y);
            h.a += ddc * p;
            h.b += dc * dp;
            h.d += c * ddp;
        }
        if let Some(i) = self.inner {
            let w = self.blended_inner(i, x, y);
            h.a += w[3];
            h.b += w[4];
            h.d += w[5];
        }
        h
    }

    /// Mean of `density(∇²u)` over `[0,1]²` by the midpoint rule on
    /// `cells × cells` cells, with exact Hessians.
    pub fn average_energy(&self, density: impl Fn(Sym2) -> f64 + Sync, cells: usize) -> f64 {
        let h = 1.0 / cells as f64;
        let total: f64 = (0..cells)
            .into_par_iter()
            .map(|j| {
                let y = (j as f64 + 0.5) * h;
                (0..cells)
                    .map(|i| density(self.hessian((i as f64 + 0.5) * h, y)))
                    .sum::<f64>()
            })
            .sum();
        total * h * h
    }

    /// Sampled on the unit-square grid with `n` nodes per side.
    pub fn to_field(&self, n: usize) -> Result<ScalarField> {
        let g = Grid2D::unit_square(n)?;
        Ok(ScalarField::from_fn(&g, |x, y| {
            if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
                self.value(x, y)
            } else {
                0.5 * (self.xi.a * x * x + 2.0 * self.xi.b * x * y + self.xi.d * y * y)
            }
        }))
    }
}

/// Unnormalized mollifier profile `(1 − r²)³` on the unit disk.
fn bump(r2: f64) -> f64 {
    if r2 >= 1.0 {
        0.0
    } else {
        let s = 1.0 - r2;
        s * s * s
    }
}

/// `‖η₁‖_∞` of the normalized unit mollifier: `1 / ∫(1−r²)³ = 4/π`.
/// Then `‖∇²(η_ε * v)‖_∞ ≤ ‖η_ε‖_∞ |D²v|(ℝ²) = C₂ ε⁻² |D²v|(ℝ²)`.
pub fn mollifier_c2() -> f64 {
    4.0 / std::f64::consts::PI
}

/// Diagnostics of a recovery-sequence construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecoveryInfo {
    /// Mollification width used.
    pub eps: f64,
    /// Dilation factor `√(1 + C₁ε)`.
    pub shrink: f64,
    /// Discrete Hessian mass `|D²v|` of the zero-extended difference.
    pub hessian_mass: f64,
    /// Largest Frobenius norm of the discrete Hessian of the mollified part.
    pub hessian_max: f64,
    /// True when no admissible width fits in the domain and the output is
    /// the boundary extension itself.
    pub fallback: bool,
}

/// Hard-coded shrink constant `C₁ = 8(1 + diam Ω)`.
pub fn shrink_constant(grid: &Grid2D) -> f64 {
    8.0 * (1.0 + grid.width().hypot(grid.height()))
}

/// See [`recovery_sequence_with_info`].
pub fn recovery_sequence(
    u_limit: &ScalarField,
    f_lambda_field: &ScalarField,
    lambda: f64,
    c2: f64,
) -> Result<ScalarField> {
    Ok(recovery_sequence_with_info(u_limit, f_lambda_field, lambda, c2)?.0)
}

/// `f + η_ε * (v∘Θ_ε)` with `v = u_limit − f` extended by zero,
/// `Θ_ε(x) = c + (x − c)·√(1+C₁ε)` and `ε = (4 C₂ |D²v| / √λ)^{1/2}`,
/// enlarged by factors of 1.25 until the discrete Hessian of the mollified
/// part is below `√λ/4`. The mollified part is supported a positive
/// distance inside the domain, so the output has the traces of `f`.
pub fn recovery_sequence_with_info(
    u_limit: &ScalarField,
    f_lambda_field: &ScalarField,
    lambda: f64,
    c2: f64,
) -> Result<(ScalarField, RecoveryInfo)> {
    if u_limit.grid != f_lambda_field.grid {
        return Err(Error::BoundaryMismatch(
            "fields live on different grids".into(),
        ));
    }
    if !(lambda > 0.0) || !(c2 > 0.0) {
        return Err(Error::InvalidParameter(
            "lambda and c2 must be positive".into(),
        ));
    }
    let g = &u_limit.grid;
    let (nx, ny, h) = (g.nx, g.ny, g.h);
    let v: Vec<f64> = u_limit
        .values()
        .iter()
        .zip(f_lambda_field.values())
        .map(|(a, b)| a - b)
        .collect();
    let scale = u_limit.max_abs().max(f_lambda_field.max_abs()).max(1e-300);
    for (i, j) in g.boundary_nodes() {
        if v[j * nx + i].abs() > 1e-8 * scale {
            return Err(Error::BoundaryMismatch(format!(
                "trace of u_limit differs from the boundary extension at node ({i}, {j})"
            )));
        }
    }
    let vat = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= nx as isize || j >= ny as isize {
            0.0
        } else {
            v[j as usize * nx + i as usize]
        }
    };
    // |D²v|(ℝ²) of the zero extension, kinks across ∂Ω included
    let mut mass = 0.0;
    for j in -1..=ny as isize {
        for i in -1..=nx as isize {
            let c = vat(i, j);
            let hs = Sym2::new(
                (vat(i + 1, j) - 2.0 * c + vat(i - 1, j)) / (h * h),
                (vat(i + 1, j + 1) - vat(i + 1, j - 1) - vat(i - 1, j + 1) + vat(i - 1, j - 1))
                    / (4.0 * h * h),
                (vat(i, j + 1) - 2.0 * c + vat(i, j - 1)) / (h * h),
            );
            mass += h * h * hs.norm();
        }
    }
    let sl = lambda.sqrt();
    let fallback_out = |eps: f64, shrink: f64| {
        let mut out = f_lambda_field.clone();
        if !out.ghosts_populated() {
            out = ScalarField::from_fn(g, |_, _| 0.0);
            *out.raw_mut() = f_lambda_field.raw().to_vec();
            out.mark_populated();
        }
        (
            out,
            RecoveryInfo {
                eps,
                shrink,
                hessian_mass: mass,
                hessian_max: 0.0,
                fallback: true,
            },
        )
    };
    if mass == 0.0 {
        return Ok(fallback_out(0.0, 1.0)).map(|(o, mut i)| {
            i.fallback = false;
            (o, i)
        });
    }
    let c1 = shrink_constant(g);
    let half = 0.5 * g.width().min(g.height());
    let center = g.center();
    let mut eps = (4.0 * c2 * mass / sl).sqrt();
    loop {
        let shrink = (1.0 + c1 * eps).sqrt();
        // the shrunken support must stay more than ε (plus two cells) inside
        if half * (1.0 - 1.0 / shrink) <= eps + 2.0 * h {
            return Ok(fallback_out(eps, shrink));
        }
        let vs: Vec<f64> = (0..nx * ny)
            .map(|k| {
                let (i, j) = (k % nx, k / nx);
                let px = (center[0] + (g.x(i as isize) - center[0]) * shrink - g.origin[0]) / h;
                let py = (center[1] + (g.y(j as isize) - center[1]) * shrink - g.origin[1]) / h;
                bilinear(&vat, px, py)
            })
            .collect();
        let w = mollify(&vs, nx, ny, h, eps);
        let mut hmax: f64 = 0.0;
        let wat = |i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= nx as isize || j >= ny as isize {
                0.0
            } else {
                w[j as usize * nx + i as usize]
            }
        };
        for j in 0..ny as isize {
            for i in 0..nx as isize {
                let c = wat(i, j);
                let hs = Sym2::new(
                    (wat(i + 1, j) - 2.0 * c + wat(i - 1, j)) / (h * h),
                    (wat(i + 1, j + 1) - wat(i + 1, j - 1) - wat(i - 1, j + 1) + wat(i - 1, j - 1))
                        / (4.0 * h * h),
                    (wat(i, j + 1) - 2.0 * c + wat(i, j - 1)) / (h * h),
                );
                hmax = hmax.max(hs.norm());
            }
        }
        if hmax < sl / 4.0 {
            let mut out = ScalarField::zeros(g);
            let gh = GHOST as isize;
            {
                let data = out.raw_mut();
                for j in -gh..ny as isize + gh {
                    for i in -gh..nx as isize + gh {
                        let k = g.idx(i, j);
                        data[k] = f_lambda_field.raw()[k] + wat(i, j);
                    }
                }
            }
            if f_lambda_field.ghosts_populated() {
                out.mark_populated();
            }
            return Ok((
                out,
                RecoveryInfo {
                    eps,
                    shrink,
                    hessian_mass: mass,
                    hessian_max: hmax,
                    fallback: false,
                },
            ));
        }
        eps *= 1.25;
    }
}

fn bilinear(f: &impl Fn(isize, isize) -> f64, px: f64, py: f64) -> f64 {
    let (i0, j0) = (px.floor(), py.floor());
    let (fx, fy) = (px - i0, py - j0);
    let (i, j) = (i0 as isize, j0 as isize);
    (1.0 - fx) * (1.0 - fy) * f(i, j)
        + fx * (1.0 - fy) * f(i + 1, j)
        + (1.0 - fx) * fy * f(i, j + 1)
        + fx * fy * f(i + 1, j + 1)
}

/// Discrete convolution with the normalized `(1 − |x/ε|²)³` kernel.
fn mollify(v: &[f64], nx: usize, ny: usize, h: f64, eps: f64) -> Vec<f64> {
    let r = (eps / h).floor() as isize;
    let mut kernel = Vec::new();
    let mut total = 0.0;
    for dj in -r..=r {
        for di in -r..=r {
            let w = bump(((di * di + dj * dj) as f64) * h * h / (eps * eps));
            if w > 0.0 {
                kernel.push((di, dj, w));
                total += w;
            }
        }
    }
    if total == 0.0 {
        return v.to_vec();
    }
    for k in &mut kernel {
        k.2 /= total;
    }
    (0..nx * ny)
        .into_par_iter()
        .map(|k| {
            let (i, j) = ((k % nx) as isize, (k / nx) as isize);
            kernel
                .iter()
                .map(|&(di, dj, w)| {
                    let (a, b) = (i + di, j + dj);
                    if a < 0 || b < 0 || a >= nx as isize || b >= ny as isize {
                        0.0
                    } else {
                        w * v[b as usize * nx + a as usize]
                    }
                })
                .sum()
        })
        .collect()
}
