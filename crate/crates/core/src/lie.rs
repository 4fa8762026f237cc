//! SE(3) / DSE(3) primitives in linear-first ordering.
//!
//! A [`SpatialVector`] stacks `[linear; angular]`. Twists (velocities,
//! accelerations, joint screws) transport with the adjoint, wrenches and
//! momenta with its transpose, so the pairing `⟨f, v⟩` is frame invariant.
//!
//! A [`Transform`] `T = (R, p)` maps coordinates of a child frame into its
//! parent, `x_parent = R x_child + p`. `Ad_T` therefore maps a child twist to
//! the parent frame and `Ad_Tᵀ` maps a parent wrench down to the child.

use std::ops::{Add, AddAssign, Index, Neg, Sub};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3<T>(pub [T; 3]);

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self([x, y, z])
    }

    pub fn zeros() -> Self {
        Self([T::zero(); 3])
    }

    pub fn from_f64(v: [f64; 3]) -> Self {
        Self(v.map(T::cst))
    }

    pub fn unit_z() -> Self {
        Self([T::zero(), T::zero(), T::one()])
    }

    pub fn value(&self) -> [f64; 3] {
        self.0.map(Real::value)
    }

    pub fn dot(&self, o: &Self) -> T {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(&self, o: &Self) -> Self {
        let [a0, a1, a2] = self.0;
        let [b0, b1, b2] = o.0;
        Self([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])
    }

    pub fn scale(&self, s: T) -> Self {
        Self(self.0.map(|x| x * s))
    }

    pub fn norm_squared(&self) -> T {
        self.dot(self)
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self(self.0.map(|x| -x))
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Real> Mat3<T> {
    pub fn zeros() -> Self {
        Self([[T::zero(); 3]; 3])
    }

    pub fn identity() -> Self {
        Self::from_diagonal(Vec3([T::one(); 3]))
    }

    pub fn from_diagonal(d: Vec3<T>) -> Self {
        let z = T::zero();
        Self([[d.0[0], z, z], [z, d.0[1], z], [z, z, d.0[2]]])
    }

    pub fn from_f64(m: [[f64; 3]; 3]) -> Self {
        Self(m.map(|r| r.map(T::cst)))
    }

    pub fn value(&self) -> [[f64; 3]; 3] {
        self.0.map(|r| r.map(Real::value))
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Self([[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]])
    }

    pub fn mul_vec(&self, v: &Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        Vec3([
            m[0][0] * v.0[0] + m[0][1] * v.0[1] + m[0][2] * v.0[2],
            m[1][0] * v.0[0] + m[1][1] * v.0[1] + m[1][2] * v.0[2],
            m[2][0] * v.0[0] + m[2][1] * v.0[1] + m[2][2] * v.0[2],
        ])
    }

    /// `selfᵀ v` without forming the transpose.
    pub fn tr_mul_vec(&self, v: &Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        Vec3([
            m[0][0] * v.0[0] + m[1][0] * v.0[1] + m[2][0] * v.0[2],
            m[0][1] * v.0[0] + m[1][1] * v.0[1] + m[2][1] * v.0[2],
            m[0][2] * v.0[0] + m[1][2] * v.0[1] + m[2][2] * v.0[2],
        ])
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut out = Self::zeros();
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] = self.0[r][0] * o.0[0][c] + self.0[r][1] * o.0[1][c] + self.0[r][2] * o.0[2][c];
            }
        }
        out
    }

    pub fn scale(&self, s: T) -> Self {
        Self(self.0.map(|r| r.map(|x| x * s)))
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut out = *self;
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] += o.0[r][c];
            }
        }
        out
    }

    pub fn sub(&self, o: &Self) -> Self {
        let mut out = *self;
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] -= o.0[r][c];
            }
        }
        out
    }

    pub fn determinant(&self) -> T {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Elementary rotations (right-hand rule).
    pub fn rot_x(a: T) -> Self {
        let (s, c, z, o) = (a.sin(), a.cos(), T::zero(), T::one());
        Self([[o, z, z], [z, c, -s], [z, s, c]])
    }

    pub fn rot_y(a: T) -> Self {
        let (s, c, z, o) = (a.sin(), a.cos(), T::zero(), T::one());
        Self([[c, z, s], [z, o, z], [-s, z, c]])
    }

    pub fn rot_z(a: T) -> Self {
        let (s, c, z, o) = (a.sin(), a.cos(), T::zero(), T::one());
        Self([[c, -s, z], [s, c, z], [z, z, o]])
    }

    /// `R_z(φz) R_y(φy) R_x(φx)`.
    pub fn from_rpy(rpy: &Vec3<T>) -> Self {
        Self::rot_z(rpy.0[2]).mul_mat(&Self::rot_y(rpy.0[1])).mul_mat(&Self::rot_x(rpy.0[0]))
    }
}

/// `[x]` with `[x] y = x × y`.
pub fn skew<T: Real>(x: &Vec3<T>) -> Mat3<T> {
    let [a, b, c] = x.0;
    let z = T::zero();
    Mat3([[z, -c, b], [c, z, -a], [-b, a, z]])
}

/// Twist, wrench, momentum or screw, stored `[linear; angular]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialVector<T> {
    pub linear: Vec3<T>,
    pub angular: Vec3<T>,
}

impl<T: Real> SpatialVector<T> {
    pub fn new(linear: Vec3<T>, angular: Vec3<T>) -> Self {
        Self { linear, angular }
    }

    pub fn zeros() -> Self {
        Self::new(Vec3::zeros(), Vec3::zeros())
    }

    pub fn from_array(a: [T; 6]) -> Self {
        Self::new(Vec3([a[0], a[1], a[2]]), Vec3([a[3], a[4], a[5]]))
    }

    pub fn from_f64(a: [f64; 6]) -> Self {
        Self::from_array(a.map(T::cst))
    }

    pub fn to_array(&self) -> [T; 6] {
        let (l, w) = (self.linear.0, self.angular.0);
        [l[0], l[1], l[2], w[0], w[1], w[2]]
    }

    pub fn value(&self) -> [f64; 6] {
        self.to_array().map(Real::value)
    }

    pub fn dot(&self, o: &Self) -> T {
        self.linear.dot(&o.linear) + self.angular.dot(&o.angular)
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.linear.scale(s), self.angular.scale(s))
    }
}

impl<T: Real> Add for SpatialVector<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.linear + o.linear, self.angular + o.angular)
    }
}

impl<T: Real> AddAssign for SpatialVector<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for SpatialVector<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.linear - o.linear, self.angular - o.angular)
    }
}

impl<T: Real> Neg for SpatialVector<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.linear, -self.angular)
    }
}

/// Row-major 6×6 matrix acting on linear-first spatial vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat6<T>(pub [[T; 6]; 6]);

impl<T: Real> Mat6<T> {
    pub fn zeros() -> Self {
        Self([[T::zero(); 6]; 6])
    }

    pub fn identity() -> Self {
        let mut m = Self::zeros();
        for i in 0..6 {
            m.0[i][i] = T::one();
        }
        m
    }

    /// `[[a, b], [c, d]]` from 3×3 blocks.
    pub fn from_blocks(a: &Mat3<T>, b: &Mat3<T>, c: &Mat3<T>, d: &Mat3<T>) -> Self {
        let mut m = Self::zeros();
        for r in 0..3 {
            for k in 0..3 {
                m.0[r][k] = a.0[r][k];
                m.0[r][k + 3] = b.0[r][k];
                m.0[r + 3][k] = c.0[r][k];
                m.0[r + 3][k + 3] = d.0[r][k];
            }
        }
        m
    }

    pub fn block(&self, br: usize, bc: usize) -> Mat3<T> {
        let mut out = Mat3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] = self.0[3 * br + r][3 * bc + c];
            }
        }
        out
    }

    pub fn value(&self) -> [[f64; 6]; 6] {
        self.0.map(|r| r.map(Real::value))
    }

    pub fn transpose(&self) -> Self {
        let mut out = *self;
        for r in 0..6 {
            for c in 0..6 {
                out.0[r][c] = self.0[c][r];
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &SpatialVector<T>) -> SpatialVector<T> {
        let x = v.to_array();
        let mut out = [T::zero(); 6];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.0[r];
            let mut acc = row[0] * x[0];
            for c in 1..6 {
                acc += row[c] * x[c];
            }
            *o = acc;
        }
        SpatialVector::from_array(out)
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut out = Self::zeros();
        for r in 0..6 {
            for c in 0..6 {
                let mut acc = self.0[r][0] * o.0[0][c];
                for k in 1..6 {
                    acc += self.0[r][k] * o.0[k][c];
                }
                out.0[r][c] = acc;
            }
        }
        out
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut out = *self;
        for r in 0..6 {
            for c in 0..6 {
                out.0[r][c] += o.0[r][c];
            }
        }
        out
    }

    pub fn sub(&self, o: &Self) -> Self {
        let mut out = *self;
        for r in 0..6 {
            for c in 0..6 {
                out.0[r][c] -= o.0[r][c];
            }
        }
        out
    }

    pub fn scale(&self, s: T) -> Self {
        Self(self.0.map(|r| r.map(|x| x * s)))
    }

    /// `a bᵀ` for spatial vectors.
    pub fn outer(a: &SpatialVector<T>, b: &SpatialVector<T>) -> Self {
        let (x, y) = (a.to_array(), b.to_array());
        let mut out = Self::zeros();
        for r in 0..6 {
            for c in 0..6 {
                out.0[r][c] = x[r] * y[c];
            }
        }
        out
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..6 {
            for c in r + 1..6 {
                worst = worst.max((self.0[r][c].value() - self.0[c][r].value()).abs());
            }
        }
        worst
    }
}

/// Rigid transform `(R, p)` from a child frame into its parent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Transform<T> {
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zeros())
    }

    /// `self · other`: first `other`, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation.mul_mat(&other.rotation),
            self.rotation.mul_vec(&other.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -rt.mul_vec(&self.translation))
    }

    pub fn apply_point(&self, x: &Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(x) + self.translation
    }

    pub fn to_homogeneous(&self) -> [[T; 4]; 4] {
        let (r, p) = (&self.rotation.0, &self.translation.0);
        let (z, o) = (T::zero(), T::one());
        [
            [r[0][0], r[0][1], r[0][2], p[0]],
            [r[1][0], r[1][1], r[1][2], p[1]],
            [r[2][0], r[2][1], r[2][2], p[2]],
            [z, z, z, o],
        ]
    }

    /// `Ad_T v`: child twist expressed in the parent.
    pub fn act_twist(&self, v: &SpatialVector<T>) -> SpatialVector<T> {
        let w = self.rotation.mul_vec(&v.angular);
        let lin = self.rotation.mul_vec(&v.linear) + self.translation.cross(&w);
        SpatialVector::new(lin, w)
    }

    /// `Ad_{T⁻¹} v`: parent twist expressed in the child.
    pub fn inv_act_twist(&self, v: &SpatialVector<T>) -> SpatialVector<T> {
        let w = self.rotation.tr_mul_vec(&v.angular);
        let lin = self.rotation.tr_mul_vec(&(v.linear - self.translation.cross(&v.angular)));
        SpatialVector::new(lin, w)
    }

    /// `Ad_Tᵀ f`: parent wrench expressed in the child.
    pub fn coact_wrench(&self, f: &SpatialVector<T>) -> SpatialVector<T> {
        let lin = self.rotation.tr_mul_vec(&f.linear);
        let ang = self.rotation.tr_mul_vec(&(f.angular - self.translation.cross(&f.linear)));
        SpatialVector::new(lin, ang)
    }

    /// `Ad_{T⁻¹}ᵀ f`: child wrench expressed in the parent.
    pub fn inv_coact_wrench(&self, f: &SpatialVector<T>) -> SpatialVector<T> {
        let lin = self.rotation.mul_vec(&f.linear);
        let ang = self.rotation.mul_vec(&f.angular) + self.translation.cross(&lin);
        SpatialVector::new(lin, ang)
    }

    /// `Ad_T = [[R, [p]R], [0, R]]`.
    pub fn adjoint(&self) -> Mat6<T> {
        let r = &self.rotation;
        Mat6::from_blocks(r, &skew(&self.translation).mul_mat(r), &Mat3::zeros(), r)
    }

    /// `Ad*_T = Ad_Tᵀ`.
    pub fn coadjoint(&self) -> Mat6<T> {
        self.adjoint().transpose()
    }

    pub fn value(&self) -> Transform<f64> {
        Transform::new(Mat3(self.rotation.value()), Vec3(self.translation.value()))
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.value().rotation;
        let rtr = r.transpose().mul_mat(&r);
        let mut err = (r.determinant() - 1.0).abs();
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                err = err.max((rtr.0[i][j] - id).abs());
            }
        }
        err
    }
}

/// Lie bracket operator `ad_v = [[ [ω], [v] ], [0, [ω]]]`.
pub fn ad<T: Real>(v: &SpatialVector<T>) -> Mat6<T> {
    let w = skew(&v.angular);
    Mat6::from_blocks(&w, &skew(&v.linear), &Mat3::zeros(), &w)
}

/// `ad_v s = v × s` without forming the matrix.
pub fn ad_apply<T: Real>(v: &SpatialVector<T>, s: &SpatialVector<T>) -> SpatialVector<T> {
    SpatialVector::new(
        v.angular.cross(&s.linear) + v.linear.cross(&s.angular),
        v.angular.cross(&s.angular),
    )
}

/// The block form `[[ [ω], 0 ], [ [v], [ω] ]]`, equal to `-ad_vᵀ`.
pub fn ad_star<T: Real>(v: &SpatialVector<T>) -> Mat6<T> {
    let w = skew(&v.angular);
    Mat6::from_blocks(&w, &Mat3::zeros(), &skew(&v.linear), &w)
}

/// `ad_star(v) m` without forming the matrix.
pub fn ad_star_apply<T: Real>(v: &SpatialVector<T>, m: &SpatialVector<T>) -> SpatialVector<T> {
    SpatialVector::new(
        v.angular.cross(&m.linear),
        v.linear.cross(&m.linear) + v.angular.cross(&m.angular),
    )
}

/// Generalized (spatial) inertia about a body frame origin:
/// `[[m·I, m[p]ᵀ], [m[p], J]]` with `J` taken about the frame origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizedInertia<T>(pub Mat6<T>);

impl<T: Real> GeneralizedInertia<T> {
    /// From mass, centre of mass and rotational inertia about the *origin*.
    pub fn new(mass: T, com: &Vec3<T>, inertia_origin: &Mat3<T>) -> Self {
        Self::from_moments(mass, &com.scale(mass), inertia_origin)
    }

    /// From the ten standard parameters `(m, h = m·p_m, J)`, linear in each.
    pub fn from_moments(mass: T, first_moment: &Vec3<T>, inertia_origin: &Mat3<T>) -> Self {
        let h = skew(first_moment);
        Self(Mat6::from_blocks(&Mat3::identity().scale(mass), &h.transpose(), &h, inertia_origin))
    }

    /// From `[m, hx, hy, hz, Jxx, Jxy, Jxz, Jyy, Jyz, Jzz]`.
    pub fn from_vector(phi: &[T; 10]) -> Self {
        let [m, hx, hy, hz, xx, xy, xz, yy, yz, zz] = *phi;
        let j = Mat3([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]]);
        Self::from_moments(m, &Vec3([hx, hy, hz]), &j)
    }

    pub fn to_vector(&self) -> [T; 10] {
        let m = &self.0 .0;
        [m[0][0], m[5][1], m[3][2], m[4][0], m[3][3], m[3][4], m[3][5], m[4][4], m[4][5], m[5][5]]
    }

    pub fn mass(&self) -> T {
        self.0 .0[0][0]
    }

    pub fn matrix(&self) -> &Mat6<T> {
        &self.0
    }

    pub fn mul_vec(&self, v: &SpatialVector<T>) -> SpatialVector<T> {
        self.0.mul_vec(v)
    }
}

/// `f = M a - ad_vᵀ M v`, i.e. `M a + ad_star(v) M v`.
pub fn newton_euler_force<T: Real>(
    inertia: &GeneralizedInertia<T>,
    v: &SpatialVector<T>,
    a: &SpatialVector<T>,
) -> SpatialVector<T> {
    inertia.mul_vec(a) + ad_star_apply(v, &inertia.mul_vec(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{gradient, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(rng: &mut ChaCha8Rng) -> Vec3<f64> {
        Vec3([0; 3].map(|_| rng.random_range(-2.0..2.0)))
    }

    fn rs(rng: &mut ChaCha8Rng) -> SpatialVector<f64> {
        SpatialVector::new(rv(rng), rv(rng))
    }

    fn rt(rng: &mut ChaCha8Rng) -> Transform<f64> {
        Transform::new(Mat3::from_rpy(&rv(rng)), rv(rng))
    }

    fn close6(a: &Mat6<f64>, b: &Mat6<f64>, tol: f64) -> bool {
        (0..6).all(|r| (0..6).all(|c| (a.0[r][c] - b.0[r][c]).abs() <= tol))
    }

    fn spd_inertia(rng: &mut ChaCha8Rng) -> GeneralizedInertia<f64> {
        let m = rng.random_range(0.1..2.0);
        let p = rv(rng).scale(0.3);
        let r = Mat3::from_rpy(&rv(rng));
        let d = Vec3([rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)]);
        let jc = r.mul_mat(&Mat3::from_diagonal(d)).mul_mat(&r.transpose());
        let px = skew(&p);
        let jo = jc.sub(&px.mul_mat(&px).scale(m));
        GeneralizedInertia::new(m, &p, &jo)
    }

    #[test]
    fn skew_examples() {
        assert_eq!(skew(&Vec3::<f64>::zeros()), Mat3::zeros());
        let e = skew(&Vec3([1.0, 0.0, 0.0])).mul_vec(&Vec3([0.0, 1.0, 0.0]));
        assert_eq!(e, Vec3([0.0, 0.0, 1.0]));
    }

    #[test]
    fn skew_matches_cross_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (x, y) = (rv(&mut rng), rv(&mut rng));
            let a = skew(&x).mul_vec(&y).value();
            let [x0, x1, x2] = x.0;
            let [y0, y1, y2] = y.0;
            let b = [x1 * y2 - x2 * y1, x2 * y0 - x0 * y2, x0 * y1 - x1 * y0];
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-14);
            }
            let s = skew(&x);
            assert_eq!(s.transpose(), s.scale(-1.0));
        }
    }

    #[test]
    fn compose_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (a, b) = (rt(&mut rng), rt(&mut rng));
            assert_eq!(Transform::identity().compose(&a), a);
            let back = a.inverse().inverse();
            let ident = a.compose(&a.inverse());
            for i in 0..3 {
                assert!((back.translation.0[i] - a.translation.0[i]).abs() < 1e-12);
                for j in 0..3 {
                    assert!((back.rotation.0[i][j] - a.rotation.0[i][j]).abs() < 1e-12);
                    let id = if i == j { 1.0 } else { 0.0 };
                    assert!((ident.rotation.0[i][j] - id).abs() < 1e-12);
                }
                assert!(ident.translation.0[i].abs() < 1e-12);
            }
            // homogeneous-matrix oracle
            let (ha, hb, hc) = (a.to_homogeneous(), b.to_homogeneous(), a.compose(&b).to_homogeneous());
            for i in 0..4 {
                for j in 0..4 {
                    let p: f64 = (0..4).map(|k| ha[i][k] * hb[k][j]).sum();
                    assert!((p - hc[i][j]).abs() < 1e-12);
                }
            }
            assert!(a.compose(&b).orthonormality_error() < 1e-9);
        }
    }

    #[test]
    fn adjoint_identity_and_homomorphism() {
        assert_eq!(Transform::<f64>::identity().adjoint(), Mat6::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (a, b) = (rt(&mut rng), rt(&mut rng));
            let lhs = a.compose(&b).adjoint();
            let rhs = a.adjoint().mul_mat(&b.adjoint());
            assert!(close6(&lhs, &rhs, 1e-12));
            assert_eq!(a.coadjoint(), a.adjoint().transpose());
        }
    }

    #[test]
    fn matrix_free_actions_match_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let t = rt(&mut rng);
            let v = rs(&mut rng);
            let checks = [
                (t.act_twist(&v), t.adjoint().mul_vec(&v)),
                (t.inv_act_twist(&v), t.inverse().adjoint().mul_vec(&v)),
                (t.coact_wrench(&v), t.coadjoint().mul_vec(&v)),
                (t.inv_coact_wrench(&v), t.inverse().coadjoint().mul_vec(&v)),
                (ad_apply(&t.act_twist(&v), &v), ad(&t.act_twist(&v)).mul_vec(&v)),
                (ad_star_apply(&t.act_twist(&v), &v), ad_star(&t.act_twist(&v)).mul_vec(&v)),
            ];
            for (a, b) in checks {
                for (x, y) in a.value().iter().zip(b.value()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn power_is_frame_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (t, f, v) = (rt(&mut rng), rs(&mut rng), rs(&mut rng));
            let lhs = t.coadjoint().mul_vec(&f).dot(&t.inverse().adjoint().mul_vec(&v));
            assert!((lhs - f.dot(&v)).abs() < 1e-12 * (1.0 + f.dot(&v).abs()));
        }
    }

    #[test]
    fn ad_star_block_form() {
        assert_eq!(ad_star(&SpatialVector::<f64>::zeros()), Mat6::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let v = rs(&mut rng);
            let mut hand = [[0.0; 6]; 6];
            let (w, l) = (skew(&v.angular).0, skew(&v.linear).0);
            for r in 0..3 {
                for c in 0..3 {
                    hand[r][c] = w[r][c];
                    hand[r + 3][c] = l[r][c];
                    hand[r + 3][c + 3] = w[r][c];
                }
            }
            assert_eq!(ad_star(&v).0, hand);
            assert_eq!(ad_star(&v), ad(&v).transpose().scale(-1.0));
        }
    }

    #[test]
    fn ad_star_energy_rate_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let v = rs(&mut rng);
            let m = spd_inertia(&mut rng);
            let e = v.dot(&ad_star(&v).mul_vec(&m.mul_vec(&v)));
            assert!(e.abs() < 1e-10);
        }
    }

    #[test]
    fn inertia_block_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = spd_inertia(&mut rng);
        assert!(m.matrix().max_asymmetry() < 1e-12);
        let mass = m.mass();
        for r in 0..3 {
            for c in 0..3 {
                let id = if r == c { mass } else { 0.0 };
                assert_eq!(m.0 .0[r][c], id);
            }
        }
        let back = GeneralizedInertia::from_vector(&m.to_vector());
        assert!(close6(&back.0, &m.0, 1e-12));
    }

    #[test]
    fn newton_euler_without_velocity_is_m_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = spd_inertia(&mut rng);
        let a = rs(&mut rng);
        assert_eq!(newton_euler_force(&m, &SpatialVector::zeros(), &a), m.mul_vec(&a));
    }

    #[test]
    fn point_mass_translating_has_no_bias() {
        let m = GeneralizedInertia::new(2.0, &Vec3::zeros(), &Mat3::zeros());
        let v = SpatialVector::new(Vec3([0.3, -1.0, 2.0]), Vec3::zeros());
        let f = newton_euler_force(&m, &v, &SpatialVector::zeros());
        assert_eq!(f.value(), [0.0; 6]);
    }

    #[test]
    fn spinning_offset_mass_needs_centripetal_force() {
        // mass r along x, spinning about z at rate w: force -m w² r along x.
        let (mass, r, w) = (1.5, 0.4, 3.0);
        let m = GeneralizedInertia::new(mass, &Vec3([r, 0.0, 0.0]), &Mat3::from_diagonal(Vec3([0.0, 0.0, mass * r * r])));
        let v = SpatialVector::new(Vec3::zeros(), Vec3([0.0, 0.0, w]));
        let f = newton_euler_force(&m, &v, &SpatialVector::zeros()).value();
        assert!((f[0] + mass * w * w * r).abs() < 1e-12);
        assert!(f[1].abs() < 1e-12 && f[5].abs() < 1e-12);
    }

    // World-frame momentum of a body following a prescribed screw motion;
    // its time derivative, pulled back to the body frame, is the net wrench.
    #[test]
    fn newton_euler_matches_momentum_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = spd_inertia(&mut rng);
        let v0 = rs(&mut rng);
        let a0 = rs(&mut rng);
        let pose = |t: f64| -> (Transform<f64>, SpatialVector<f64>) {
            // body velocity v(t) = v0 + a0 t, pose by integrating with many RK-free
            // small steps of the exact exponential of a constant twist
            let n = 2000;
            let h = t / n as f64;
            let mut g = Transform::identity();
            for k in 0..n {
                let tv = v0 + a0.scale((k as f64 + 0.5) * h);
                g = g.compose(&exp_twist(&tv.scale(h)));
            }
            (g, v0 + a0.scale(t))
        };
        let world_momentum = |t: f64| {
            let (g, v) = pose(t);
            g.inverse().coact_wrench(&m.mul_vec(&v))
        };
        let t = 0.3;
        let h = 1e-4;
        let (lp, lm) = (world_momentum(t + h), world_momentum(t - h));
        let dl = (lp - lm).scale(1.0 / (2.0 * h));
        let (g, v) = pose(t);
        let f_body = g.coact_wrench(&dl);
        let f = newton_euler_force(&m, &v, &a0);
        let (a, b) = (f.value(), f_body.value());
        let scale = a.iter().fold(0.0f64, |s, x| s.max(x.abs()));
        for k in 0..6 {
            assert!((a[k] - b[k]).abs() / scale < 1e-4, "{a:?} vs {b:?}");
        }
    }

    fn exp_twist(xi: &SpatialVector<f64>) -> Transform<f64> {
        let w = xi.angular;
        let th = w.norm_squared().sqrt();
        let wx = skew(&w);
        let wx2 = wx.mul_mat(&wx);
        let (a, b, c) = if th < 1e-8 {
            (1.0, 0.5, 1.0 / 6.0)
        } else {
            (th.sin() / th, (1.0 - th.cos()) / (th * th), (th - th.sin()) / (th * th * th))
        };
        let r = Mat3::identity().add(&wx.scale(a)).add(&wx2.scale(b));
        let vmat = Mat3::identity().add(&wx.scale(b)).add(&wx2.scale(c));
        Transform::new(r, vmat.mul_vec(&xi.linear))
    }

    #[test]
    fn transport_is_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = rs(&mut rng);
        let v = rs(&mut rng);
        fn loss<T: Real>(x: &[T], f: &SpatialVector<f64>, v: &SpatialVector<f64>) -> T {
            let t = Transform::new(Mat3::from_rpy(&Vec3([x[0], x[1], x[2]])), Vec3([x[3], x[4], x[5]]));
            let fv = SpatialVector::from_f64(f.value());
            let vv = SpatialVector::from_f64(v.value());
            t.coact_wrench(&fv).dot(&t.act_twist(&vv)) + t.inv_act_twist(&vv).linear.norm_squared()
        }
        let tape = Tape::new();
        let vars: Vec<_> = x0.iter().map(|&x| tape.var(x)).collect();
        let g = gradient(loss(&vars, &f, &v), &vars).unwrap();
        for i in 0..6 {
            let h = 1e-6;
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp, &f, &v) - loss(&xm, &f, &v)) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "{i}: {} vs {fd}", g[i]);
        }
    }
}
