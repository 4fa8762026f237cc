//! Kinematic trees and the virtual-parameter maps.
//!
//! Every link carries sixteen unconstrained reals: six kinematic (fixed
//! joint offset as RPY angles plus translation) and ten inertial (square
//! roots of the central second moments, square root of the mass, principal
//! axis RPY, centre of mass). Any real vector maps to a valid transform, a
//! non-negative mass and a rotational inertia obeying the triangle
//! inequalities.

use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{skew, GeneralizedInertia, Mat3, SpatialVector, Transform, Vec3};
use crate::scalar::{ParamSet, Real};

/// Virtual parameters per link.
pub const PARAMS_PER_LINK: usize = 16;
pub const KIN_PARAMS: usize = 6;
pub const INERTIAL_PARAMS: usize = 10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("link `{link}`: {reason}")]
    Schema { link: String, reason: String },
    #[error("invalid tree document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("parameter vector has {got} entries, tree needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

/// One-DoF joint moving along or about the local z axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Revolute,
    Prismatic,
}

impl JointType {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "revolute" => Some(Self::Revolute),
            "prismatic" => Some(Self::Prismatic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinParams<T> {
    pub rpy: Vec3<T>,
    pub xyz: Vec3<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InertialParams<T> {
    /// `θ_√L`: square roots of the central second moments of mass.
    pub sqrt_moments: Vec3<T>,
    pub sqrt_mass: T,
    /// Principal-axis orientation `R_J` as RPY angles.
    pub principal_rpy: Vec3<T>,
    pub com: Vec3<T>,
}

/// `T_O = [R_z R_y R_x, p; 0, 1]`.
pub fn fixed_transform<T: Real>(k: &KinParams<T>) -> Transform<T> {
    Transform::new(Mat3::from_rpy(&k.rpy), k.xyz)
}

pub fn joint_transform<T: Real>(joint: JointType, q: T) -> Transform<T> {
    match joint {
        JointType::Revolute => Transform::new(Mat3::rot_z(q), Vec3::zeros()),
        JointType::Prismatic => Transform::new(Mat3::identity(), Vec3::unit_z().scale(q)),
    }
}

pub fn joint_screw<T: Real>(joint: JointType) -> SpatialVector<T> {
    match joint {
        JointType::Revolute => SpatialVector::new(Vec3::zeros(), Vec3::unit_z()),
        JointType::Prismatic => SpatialVector::new(Vec3::unit_z(), Vec3::zeros()),
    }
}

/// Physical quantities realized from [`InertialParams`].
#[derive(Debug, Clone, Copy)]
pub struct RealizedInertia<T> {
    pub mass: T,
    pub com: Vec3<T>,
    /// `J_p`, principal moments at the centre of mass.
    pub principal: Vec3<T>,
    /// Rotational inertia about the link frame origin.
    pub inertia: Mat3<T>,
    pub spatial: GeneralizedInertia<T>,
}

/// `J = R_J J_p R_Jᵀ - m[p_m][p_m]`, then `M̄` from `(m, p_m, J)`.
pub fn realize_inertia<T: Real>(p: &InertialParams<T>) -> RealizedInertia<T> {
    let [l1, l2, l3] = p.sqrt_moments.0.map(|x| x * x);
    let principal = Vec3([l2 + l3, l1 + l3, l1 + l2]);
    let mass = p.sqrt_mass * p.sqrt_mass;
    let r = Mat3::from_rpy(&p.principal_rpy);
    let central = r.mul_mat(&Mat3::from_diagonal(principal)).mul_mat(&r.transpose());
    let px = skew(&p.com);
    let inertia = central.sub(&px.mul_mat(&px).scale(mass));
    let spatial = GeneralizedInertia::new(mass, &p.com, &inertia);
    RealizedInertia { mass, com: p.com, principal, inertia, spatial }
}

/// Triangle inequalities and non-negativity of principal moments.
pub fn is_physical_inertia(principal: [f64; 3], tol: f64) -> bool {
    let [x, y, z] = principal;
    x >= -tol && y >= -tol && z >= -tol && x <= y + z + tol && y <= x + z + tol && z <= x + y + tol
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinDoc {
    pub rpy: [f64; 3],
    pub xyz: [f64; 3],
}

/// Inertia about the centre of mass in link axes, `[xx, xy, xz, yy, yz, zz]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InertialDoc {
    pub mass: f64,
    pub com: [f64; 3],
    pub inertia: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDoc {
    pub name: String,
    /// Parent link name; `null` or `"base"` for the base frame.
    #[serde(default)]
    pub parent: Option<String>,
    pub joint: String,
    pub kin: KinDoc,
    pub inertial: InertialDoc,
    #[serde(default = "yes")]
    pub learn_kin: bool,
    #[serde(default = "yes")]
    pub learn_inertial: bool,
    #[serde(default = "yes")]
    pub actuated: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDoc {
    pub name: String,
    pub gravity: [f64; 3],
    pub links: Vec<LinkDoc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
    pub parent: Option<usize>,
    pub joint: JointType,
    pub kin: KinDoc,
    pub inertial: InertialDoc,
    pub learn_kin: bool,
    pub learn_inertial: bool,
    pub actuated: bool,
}

/// Links in topological order (`parent(i) < i`).
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTree {
    pub name: String,
    pub gravity: [f64; 3],
    pub links: Vec<Link>,
    children: Vec<Vec<usize>>,
}

pub fn tree_from_config(json: &str) -> Result<KinematicTree, ModelError> {
    let doc: TreeDoc = serde_json::from_str(json)?;
    KinematicTree::from_doc(&doc)
}

impl KinematicTree {
    pub fn from_doc(doc: &TreeDoc) -> Result<Self, ModelError> {
        let mut links = Vec::with_capacity(doc.links.len());
        for (i, l) in doc.links.iter().enumerate() {
            let err = |reason: String| ModelError::Schema { link: l.name.clone(), reason };
            let joint = JointType::parse(&l.joint).ok_or_else(|| err(format!("unknown joint type `{}`", l.joint)))?;
            if doc.links[..i].iter().any(|o| o.name == l.name) {
                return Err(err("duplicate link name".into()));
            }
            let parent = match l.parent.as_deref() {
                None | Some("base") => None,
                Some(p) if p == l.name => return Err(err("link is its own parent (cycle)".into())),
                Some(p) => match doc.links.iter().position(|o| o.name == p) {
                    Some(j) if j < i => Some(j),
                    Some(_) => return Err(err(format!("parent `{p}` appears after its child (non-topological order or cycle)"))),
                    None => return Err(err(format!("unknown parent `{p}`"))),
                },
            };
            let finite = l.kin.rpy.iter().chain(&l.kin.xyz).chain(&l.inertial.com).chain(&l.inertial.inertia).all(|x| x.is_finite())
                && l.inertial.mass.is_finite();
            if !finite || l.inertial.mass < 0.0 {
                return Err(err("non-finite value or negative mass".into()));
            }
            links.push(Link {
                name: l.name.clone(),
                parent,
                joint,
                kin: l.kin,
                inertial: l.inertial,
                learn_kin: l.learn_kin,
                learn_inertial: l.learn_inertial,
                actuated: l.actuated,
            });
        }
        Ok(Self::from_links(doc.name.clone(), doc.gravity, links))
    }

    fn from_links(name: String, gravity: [f64; 3], links: Vec<Link>) -> Self {
        let mut children = vec![Vec::new(); links.len()];
        for (i, l) in links.iter().enumerate() {
            if let Some(p) = l.parent {
                children[p].push(i);
            }
        }
        Self { name, gravity, links, children }
    }

    pub fn to_doc(&self) -> TreeDoc {
        TreeDoc {
            name: self.name.clone(),
            gravity: self.gravity,
            links: self
                .links
                .iter()
                .map(|l| LinkDoc {
                    name: l.name.clone(),
                    parent: l.parent.map(|p| self.links[p].name.clone()),
                    joint: match l.joint {
                        JointType::Revolute => "revolute".into(),
                        JointType::Prismatic => "prismatic".into(),
                    },
                    kin: l.kin,
                    inertial: l.inertial,
                    learn_kin: l.learn_kin,
                    learn_inertial: l.learn_inertial,
                    actuated: l.actuated,
                })
                .collect(),
        }
    }

    pub fn dof(&self) -> usize {
        self.links.len()
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn actuated_mask(&self) -> Vec<bool> {
        self.links.iter().map(|l| l.actuated).collect()
    }

    /// Same tree with uniform learn flags (DiffNEA: `(false, true)`).
    pub fn with_learn_flags(&self, kin: bool, inertial: bool) -> Self {
        let mut t = self.clone();
        for l in &mut t.links {
            l.learn_kin = kin;
            l.learn_inertial = inertial;
        }
        t
    }

    pub fn param_names(&self) -> Vec<String> {
        const SUFFIX: [&str; PARAMS_PER_LINK] = [
            "kin.roll", "kin.pitch", "kin.yaw", "kin.x", "kin.y", "kin.z", "sqrt_l1", "sqrt_l2", "sqrt_l3", "sqrt_mass",
            "inertia.roll", "inertia.pitch", "inertia.yaw", "com.x", "com.y", "com.z",
        ];
        self.links.iter().flat_map(|l| SUFFIX.iter().map(move |s| format!("{}.{s}", l.name))).collect()
    }

    /// Virtual parameters back-solved from the documented (prior) values.
    pub fn prior_params(&self) -> (ParamSet, Vec<String>) {
        let mut warnings = Vec::new();
        let mut values = Vec::with_capacity(self.dof() * PARAMS_PER_LINK);
        for l in &self.links {
            values.extend(l.kin.rpy);
            values.extend(l.kin.xyz);
            let (v, w) = inertial_from_physical(&l.inertial);
            if let Some(w) = w {
                warnings.push(format!("link `{}`: {w}", l.name));
            }
            values.extend(v);
        }
        (self.param_set(&values), warnings)
    }

    /// Learnable groups drawn at random; frozen groups keep their prior values.
    pub fn random_params<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let (prior, _) = self.prior_params();
        let mut values = prior.values();
        for (i, l) in self.links.iter().enumerate() {
            let v = &mut values[i * PARAMS_PER_LINK..(i + 1) * PARAMS_PER_LINK];
            if l.learn_kin {
                for a in &mut v[0..3] {
                    *a = rng.random_range(-PI..PI);
                }
                for t in &mut v[3..6] {
                    *t = rng.random_range(-0.5..0.5);
                }
            }
            if l.learn_inertial {
                for s in &mut v[6..10] {
                    *s = rng.random_range(0.1..1.0);
                }
                for a in &mut v[10..13] {
                    *a = rng.random_range(-PI..PI);
                }
                for t in &mut v[13..16] {
                    *t = rng.random_range(-0.5..0.5);
                }
            }
        }
        self.param_set(&values)
    }

    fn param_set(&self, values: &[f64]) -> ParamSet {
        let mut ps = ParamSet::new();
        for (k, name) in self.param_names().into_iter().enumerate() {
            let l = &self.links[k / PARAMS_PER_LINK];
            let learn = if k % PARAMS_PER_LINK < KIN_PARAMS { l.learn_kin } else { l.learn_inertial };
            ps.push(name, values[k], learn).expect("link names are unique");
        }
        ps
    }

    /// Map virtual parameters (first `16·dof` entries of `values`) to the
    /// physical tree the dynamics run on.
    pub fn realize<T: Real>(&self, values: &[T]) -> Result<RealizedTree<T>, ModelError> {
        let expected = self.dof() * PARAMS_PER_LINK;
        if values.len() < expected {
            return Err(ModelError::ParamCount { expected, got: values.len() });
        }
        let links = self
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let v = &values[i * PARAMS_PER_LINK..];
                let kin = KinParams { rpy: Vec3([v[0], v[1], v[2]]), xyz: Vec3([v[3], v[4], v[5]]) };
                let inertial = InertialParams {
                    sqrt_moments: Vec3([v[6], v[7], v[8]]),
                    sqrt_mass: v[9],
                    principal_rpy: Vec3([v[10], v[11], v[12]]),
                    com: Vec3([v[13], v[14], v[15]]),
                };
                RealizedLink { fixed: fixed_transform(&kin), joint: l.joint, inertia: realize_inertia(&inertial).spatial }
            })
            .collect();
        Ok(self.realized_with(links))
    }

    /// Physical tree from known fixed transforms and spatial inertias.
    pub fn realized_with<T: Real>(&self, links: Vec<RealizedLink<T>>) -> RealizedTree<T> {
        RealizedTree {
            parents: self.links.iter().map(|l| l.parent).collect(),
            children: self.children.clone(),
            gravity: self.gravity,
            links,
        }
    }

    /// Fixed transforms of the documented kinematics, as constants.
    pub fn nominal_fixed_transforms<T: Real>(&self) -> Vec<Transform<T>> {
        self.links
            .iter()
            .map(|l| fixed_transform(&KinParams { rpy: Vec3::from_f64(l.kin.rpy), xyz: Vec3::from_f64(l.kin.xyz) }))
            .collect()
    }
}

/// Physical link as seen by the dynamics.
#[derive(Debug, Clone, Copy)]
pub struct RealizedLink<T> {
    /// `T_O`, joint frame of this link in its parent's frame.
    pub fixed: Transform<T>,
    pub joint: JointType,
    pub inertia: GeneralizedInertia<T>,
}

#[derive(Debug, Clone)]
pub struct RealizedTree<T> {
    pub parents: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    pub gravity: [f64; 3],
    pub links: Vec<RealizedLink<T>>,
}

impl<T: Real> RealizedTree<T> {
    pub fn dof(&self) -> usize {
        self.links.len()
    }

    /// `T_{λ,i}(q) = T_O · T_q(q)`.
    pub fn link_transform(&self, i: usize, q: T) -> Transform<T> {
        let l = &self.links[i];
        l.fixed.compose(&joint_transform(l.joint, q))
    }

    pub fn value(&self) -> RealizedTree<f64> {
        RealizedTree {
            parents: self.parents.clone(),
            children: self.children.clone(),
            gravity: self.gravity,
            links: self
                .links
                .iter()
                .map(|l| RealizedLink {
                    fixed: l.fixed.value(),
                    joint: l.joint,
                    inertia: GeneralizedInertia(crate::lie::Mat6(l.inertia.0.value())),
                })
                .collect(),
        }
    }
}

/// Back-solve `(θ_√L, θ_√m, θ_J, p_m)` from mass, CoM and central inertia.
/// Moments a prior cannot realize are clamped at zero and reported.
pub fn inertial_from_physical(doc: &InertialDoc) -> ([f64; INERTIAL_PARAMS], Option<String>) {
    let [xx, xy, xz, yy, yz, zz] = doc.inertia;
    let m = Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz);
    let eig = SymmetricEigen::new(m);
    let mut r = eig.eigenvectors;
    if r.determinant() < 0.0 {
        r.column_mut(2).neg_mut();
    }
    let j = eig.eigenvalues;
    let raw = [(j[1] + j[2] - j[0]) / 2.0, (j[0] + j[2] - j[1]) / 2.0, (j[0] + j[1] - j[2]) / 2.0];
    let warning = raw
        .iter()
        .any(|l| *l < 0.0)
        .then(|| format!("prior inertia {:?} violates the triangle inequality; moments clamped at 0", doc.inertia));
    let sqrt_l = raw.map(|l| l.max(0.0).sqrt());
    let rpy = rpy_from_rotation(&[[r[(0, 0)], r[(0, 1)], r[(0, 2)]], [r[(1, 0)], r[(1, 1)], r[(1, 2)]], [r[(2, 0)], r[(2, 1)], r[(2, 2)]]]);
    let mut out = [0.0; INERTIAL_PARAMS];
    out[0..3].copy_from_slice(&sqrt_l);
    out[3] = doc.mass.max(0.0).sqrt();
    out[4..7].copy_from_slice(&rpy);
    out[7..10].copy_from_slice(&doc.com);
    (out, warning)
}

/// Inverse of [`Mat3::from_rpy`].
pub fn rpy_from_rotation(r: &[[f64; 3]; 3]) -> [f64; 3] {
    let pitch = (-r[2][0]).clamp(-1.0, 1.0).asin();
    if r[2][0].abs() < 1.0 - 1e-12 {
        [r[2][1].atan2(r[2][2]), pitch, r[1][0].atan2(r[0][0])]
    } else {
        // gimbal lock: fold roll into yaw
        [0.0, pitch, (-r[0][1]).atan2(r[1][1])]
    }
}

/// Central inertia `[xx, xy, xz, yy, yz, zz]` of a realized link, from its
/// spatial inertia (may be non-physical for regression estimates).
pub fn central_inertia(m: &GeneralizedInertia<f64>) -> Option<(f64, [f64; 3], [f64; 6])> {
    let [mass, hx, hy, hz, xx, xy, xz, yy, yz, zz] = m.to_vector();
    if mass.abs() < 1e-300 {
        return None;
    }
    let c = Vec3([hx / mass, hy / mass, hz / mass]);
    let px = skew(&c);
    let jo = Mat3([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]]);
    let jc = jo.add(&px.mul_mat(&px).scale(mass)).0;
    Some((mass, c.0, [jc[0][0], jc[0][1], jc[0][2], jc[1][1], jc[1][2], jc[2][2]]))
}

/// Eigenvalues of a symmetric 3×3 given as `[xx, xy, xz, yy, yz, zz]`.
pub fn principal_moments(j: &[f64; 6]) -> [f64; 3] {
    let [xx, xy, xz, yy, yz, zz] = *j;
    let e = SymmetricEigen::new(Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)).eigenvalues;
    [e[0], e[1], e[2]]
}
