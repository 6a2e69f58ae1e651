//! Closed-form algebra on 2×2 symmetric matrices.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// A symmetric 2×2 matrix `[[a, b], [b, d]]`.
///
/// Used both for Hessians of Airy potentials and for the stresses they
/// generate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sym2 {
    pub a: f64,
    pub b: f64,
    pub d: f64,
}

impl Sym2 {
    pub const ZERO: Sym2 = Sym2 {
        a: 0.0,
        b: 0.0,
        d: 0.0,
    };
    pub const IDENTITY: Sym2 = Sym2 {
        a: 1.0,
        b: 0.0,
        d: 1.0,
    };

    pub const fn new(a: f64, b: f64, d: f64) -> Self {
        Self { a, b, d }
    }

    pub const fn diag(a: f64, d: f64) -> Self {
        Self { a, b: 0.0, d }
    }

    /// `η ⊗ η` for the unit direction at angle `theta`.
    pub fn outer_dir(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(c * c, c * s, s * s)
    }

    pub fn trace(&self) -> f64 {
        self.a + self.d
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.b
    }

    /// Frobenius norm `|m|`, counting the off-diagonal entry twice.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.a * self.a + 2.0 * self.b * self.b + self.d * self.d
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Sym2) -> f64 {
        self.a * other.a + 2.0 * self.b * other.b + self.d * other.d
    }

    /// Half the eigenvalue gap, `hypot((a-d)/2, b)`.
    pub fn half_gap(&self) -> f64 {
        (0.5 * (self.a - self.d)).hypot(self.b)
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let m = 0.5 * self.trace();
        let r = self.half_gap();
        (m + r, m - r)
    }

    /// Angle of the eigenvector belonging to the larger eigenvalue.
    pub fn principal_angle(&self) -> f64 {
        0.5 * (2.0 * self.b).atan2(self.a - self.d)
    }

    /// Sum of absolute eigenvalues.
    pub fn rho0(&self) -> f64 {
        let (l1, l2) = self.eigenvalues();
        l1.abs() + l2.abs()
    }

    /// Cofactor matrix: swaps the diagonal and negates the off-diagonal.
    pub fn cof(&self) -> Self {
        Self::new(self.d, -self.b, self.a)
    }

    /// `Rᵀ m R` for `R = [[cos θ, −sin θ], [sin θ, cos θ]]`.
    pub fn conjugate(&self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        // M R
        let m00 = self.a * c + self.b * s;
        let m01 = -self.a * s + self.b * c;
        let m10 = self.b * c + self.d * s;
        let m11 = -self.b * s + self.d * c;
        // Rᵀ (M R)
        let a = c * m00 + s * m10;
        let b = c * m01 + s * m11;
        let d = -s * m01 + c * m11;
        Self::new(a, b, d)
    }

    pub fn is_zero(&self) -> bool {
        self.a == 0.0 && self.b == 0.0 && self.d == 0.0
    }

    pub fn max_abs(&self) -> f64 {
        self.a.abs().max(self.b.abs()).max(self.d.abs())
    }
}

impl Add for Sym2 {
    type Output = Sym2;
    fn add(self, o: Sym2) -> Sym2 {
        Sym2::new(self.a + o.a, self.b + o.b, self.d + o.d)
    }
}

impl Sub for Sym2 {
    type Output = Sym2;
    fn sub(self, o: Sym2) -> Sym2 {
        Sym2::new(self.a - o.a, self.b - o.b, self.d - o.d)
    }
}

impl Neg for Sym2 {
    type Output = Sym2;
    fn neg(self) -> Sym2 {
        Sym2::new(-self.a, -self.b, -self.d)
    }
}

impl Mul<Sym2> for f64 {
    type Output = Sym2;
    fn mul(self, m: Sym2) -> Sym2 {
        Sym2::new(self * m.a, self * m.b, self * m.d)
    }
}
