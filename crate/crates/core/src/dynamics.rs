//! Forward dynamics (articulated body algorithm) and inverse dynamics
//! (recursive Newton-Euler), both generic over [`Real`] so they can be
//! differentiated with respect to every realized link quantity.
//!
//! Gravity enters as a fictitious base acceleration `ā₀ = [-g; 0]`, so link
//! accelerations in the workspace include it and link wrenches are the
//! total wrench transmitted through each joint.

use thiserror::Error;

use crate::lie::{ad_apply, ad_star_apply, Mat6, SpatialVector, Transform, Vec3};
use crate::model::{JointType, RealizedTree};
use crate::scalar::Real;

/// Joint-space inertia below this is treated as singular.
pub const SINGULAR_EPS: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("articulated inertia of link {link} along its joint axis is {value:e} (singular)")]
    SingularInertia { link: usize, value: f64 },
    #[error("expected {expected} joint values, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Position of the single non-zero entry of a joint screw.
#[inline]
fn screw_index(joint: JointType) -> usize {
    match joint {
        JointType::Revolute => 5,
        JointType::Prismatic => 2,
    }
}

#[inline]
fn screw_times<T: Real>(k: usize, x: T) -> SpatialVector<T> {
    let mut a = [T::zero(); 6];
    a[k] = x;
    SpatialVector::from_array(a)
}

#[inline]
fn component<T: Real>(v: &SpatialVector<T>, k: usize) -> T {
    if k < 3 {
        v.linear.0[k]
    } else {
        v.angular.0[k - 3]
    }
}

fn base_acceleration<T: Real>(gravity: [f64; 3]) -> SpatialVector<T> {
    SpatialVector::new(Vec3::from_f64(gravity.map(|g| -g)), Vec3::zeros())
}

/// `Ad_{T⁻¹}ᵀ Π Ad_{T⁻¹}`: a child inertia expressed about its parent frame.
fn transport_inertia<T: Real>(x: &Transform<T>, pi: &Mat6<T>) -> Mat6<T> {
    let a = x.inverse().adjoint();
    a.transpose().mul_mat(&pi.mul_mat(&a))
}

fn check_dims(n: usize, xs: &[usize]) -> Result<(), DynamicsError> {
    match xs.iter().find(|&&l| l != n) {
        Some(&got) => Err(DynamicsError::Dimension { expected: n, got }),
        None => Ok(()),
    }
}

/// Intermediate and output quantities of one forward-dynamics evaluation.
#[derive(Debug, Clone)]
pub struct AbaWorkspace<T> {
    pub transforms: Vec<Transform<T>>,
    pub v: Vec<SpatialVector<T>>,
    /// Velocity-product acceleration `η̄ᵢ = ad_{v̄ᵢ} sᵢ q̇ᵢ`.
    pub eta: Vec<SpatialVector<T>>,
    /// Articulated inertia `M̄_{i:n}`.
    pub lumped: Vec<Mat6<T>>,
    /// Articulated bias force `f̄_{b,i}`.
    pub bias: Vec<SpatialVector<T>>,
    pub psi: Vec<T>,
    pub pi: Vec<Mat6<T>>,
    pub beta: Vec<SpatialVector<T>>,
    pub qdd: Vec<T>,
    pub a: Vec<SpatialVector<T>>,
    pub f: Vec<SpatialVector<T>>,
}

pub fn aba_forward<T: Real>(tree: &RealizedTree<T>, q: &[T], qd: &[T], u: &[T]) -> Result<AbaWorkspace<T>, DynamicsError> {
    let n = tree.dof();
    check_dims(n, &[q.len(), qd.len(), u.len()])?;
    let transforms: Vec<_> = (0..n).map(|i| tree.link_transform(i, q[i])).collect();
    let axis: Vec<_> = tree.links.iter().map(|l| screw_index(l.joint)).collect();

    // forward kinematics
    let mut v = Vec::with_capacity(n);
    let mut eta = Vec::with_capacity(n);
    let mut bias = Vec::with_capacity(n);
    let mut lumped = Vec::with_capacity(n);
    for i in 0..n {
        let sq = screw_times(axis[i], qd[i]);
        let vi = match tree.parents[i] {
            Some(p) => transforms[i].inv_act_twist(&v[p]) + sq,
            None => sq,
        };
        let m = &tree.links[i].inertia;
        eta.push(ad_apply(&vi, &sq));
        bias.push(ad_star_apply(&vi, &m.mul_vec(&vi)));
        lumped.push(m.0);
        v.push(vi);
    }

    // articulated inertias and bias forces, leaves first
    let mut psi = vec![T::zero(); n];
    let mut pi = vec![Mat6::zeros(); n];
    let mut beta = vec![SpatialVector::zeros(); n];
    for i in (0..n).rev() {
        let k = axis[i];
        let ms = SpatialVector::from_array(std::array::from_fn(|r| lumped[i].0[r][k]));
        let d = component(&ms, k);
        if !(d.value() > SINGULAR_EPS) {
            return Err(DynamicsError::SingularInertia { link: i, value: d.value() });
        }
        psi[i] = T::one() / d;
        pi[i] = lumped[i].sub(&Mat6::outer(&ms, &ms).scale(psi[i]));
        let residual = u[i] - component(&(lumped[i].mul_vec(&eta[i]) + bias[i]), k);
        beta[i] = lumped[i].mul_vec(&(eta[i] + screw_times(k, psi[i] * residual)));
        if let Some(p) = tree.parents[i] {
            let add = transport_inertia(&transforms[i], &pi[i]);
            lumped[p] = lumped[p].add(&add);
            let fb = transforms[i].inv_coact_wrench(&(bias[i] + beta[i]));
            bias[p] += fb;
        }
    }

    // accelerations, root first
    let a0 = base_acceleration::<T>(tree.gravity);
    let mut qdd = vec![T::zero(); n];
    let mut a: Vec<SpatialVector<T>> = Vec::with_capacity(n);
    let mut f = Vec::with_capacity(n);
    for i in 0..n {
        let k = axis[i];
        let ap = match tree.parents[i] {
            Some(p) => transforms[i].inv_act_twist(&a[p]),
            None => transforms[i].inv_act_twist(&a0),
        } + eta[i];
        qdd[i] = psi[i] * (u[i] - component(&(lumped[i].mul_vec(&ap) + bias[i]), k));
        let ai = ap + screw_times(k, qdd[i]);
        f.push(lumped[i].mul_vec(&ai) + bias[i]);
        a.push(ai);
    }

    Ok(AbaWorkspace { transforms, v, eta, lumped, bias, psi, pi, beta, qdd, a, f })
}

/// Joint accelerations only.
pub fn forward_dynamics<T: Real>(tree: &RealizedTree<T>, q: &[T], qd: &[T], u: &[T]) -> Result<Vec<T>, DynamicsError> {
    aba_forward(tree, q, qd, u).map(|w| w.qdd)
}

/// Generalized forces `u` and per-link wrenches `f̄ᵢ`.
pub fn rnea_inverse<T: Real>(
    tree: &RealizedTree<T>,
    q: &[T],
    qd: &[T],
    qdd: &[T],
) -> Result<(Vec<T>, Vec<SpatialVector<T>>), DynamicsError> {
    let n = tree.dof();
    check_dims(n, &[q.len(), qd.len(), qdd.len()])?;
    let a0 = base_acceleration::<T>(tree.gravity);
    let mut transforms = Vec::with_capacity(n);
    let mut v: Vec<SpatialVector<T>> = Vec::with_capacity(n);
    let mut a: Vec<SpatialVector<T>> = Vec::with_capacity(n);
    let mut f = Vec::with_capacity(n);
    for i in 0..n {
        let x = tree.link_transform(i, q[i]);
        let k = screw_index(tree.links[i].joint);
        let sq = screw_times(k, qd[i]);
        let (vp, ap) = match tree.parents[i] {
            Some(p) => (x.inv_act_twist(&v[p]), x.inv_act_twist(&a[p])),
            None => (SpatialVector::zeros(), x.inv_act_twist(&a0)),
        };
        let vi = vp + sq;
        let ai = ap + screw_times(k, qdd[i]) + ad_apply(&vi, &sq);
        f.push(crate::lie::newton_euler_force(&tree.links[i].inertia, &vi, &ai));
        transforms.push(x);
        v.push(vi);
        a.push(ai);
    }
    let mut u = vec![T::zero(); n];
    for i in (0..n).rev() {
        u[i] = component(&f[i], screw_index(tree.links[i].joint));
        if let Some(p) = tree.parents[i] {
            let fp = transforms[i].inv_coact_wrench(&f[i]);
            f[p] += fp;
        }
    }
    Ok((u, f))
}

/// World pose of every link frame.
pub fn link_poses<T: Real>(tree: &RealizedTree<T>, q: &[T]) -> Vec<Transform<T>> {
    let mut poses: Vec<Transform<T>> = Vec::with_capacity(tree.dof());
    for i in 0..tree.dof() {
        let x = tree.link_transform(i, q[i]);
        let pose = match tree.parents[i] {
            Some(p) => poses[p].compose(&x),
            None => x,
        };
        poses.push(pose);
    }
    poses
}

/// `(kinetic, potential)`; potential is zero at base-frame height zero.
pub fn total_energy<T: Real>(tree: &RealizedTree<T>, q: &[T], qd: &[T]) -> Result<(T, T), DynamicsError> {
    let n = tree.dof();
    check_dims(n, &[q.len(), qd.len()])?;
    let poses = link_poses(tree, q);
    let g = Vec3::<T>::from_f64(tree.gravity);
    let mut v: Vec<SpatialVector<T>> = Vec::with_capacity(n);
    let mut kinetic = T::zero();
    let mut potential = T::zero();
    for i in 0..n {
        let x = tree.link_transform(i, q[i]);
        let sq = screw_times(screw_index(tree.links[i].joint), qd[i]);
        let vi = match tree.parents[i] {
            Some(p) => x.inv_act_twist(&v[p]) + sq,
            None => sq,
        };
        let m = &tree.links[i].inertia;
        kinetic += vi.dot(&m.mul_vec(&vi)) * 0.5;
        let [mass, hx, hy, hz, ..] = m.to_vector();
        let moment_world = poses[i].rotation.mul_vec(&Vec3([hx, hy, hz])) + poses[i].translation.scale(mass);
        potential -= g.dot(&moment_world);
        v.push(vi);
    }
    Ok((kinetic, potential))
}

/// Joint-space mass matrix `H(q)` by unit-acceleration RNEA columns.
pub fn mass_matrix(tree: &RealizedTree<f64>, q: &[f64]) -> Result<Vec<Vec<f64>>, DynamicsError> {
    let n = tree.dof();
    let zero = vec![0.0; n];
    let mut no_gravity = tree.clone();
    no_gravity.gravity = [0.0; 3];
    let mut h = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut e = zero.clone();
        e[j] = 1.0;
        let (col, _) = rnea_inverse(&no_gravity, q, &zero, &e)?;
        for i in 0..n {
            h[i][j] = col[i];
        }
    }
    Ok(h)
}
