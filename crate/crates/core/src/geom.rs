//! Small fixed-size vector and matrix helpers used by the signal model
//! and the spherical dictionary.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Unit-ish 3-vector stored as plain f64 components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3 {
            x: self.y * o.z - self.z * o.y,
            y: self.z * o.x - self.x * o.z,
            z: self.x * o.y - self.y * o.x,
        }
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Returns the unit vector, or `None` when the norm is below `eps`.
    pub fn normalized(self, eps: f64) -> Option<Vec3> {
        let n = self.norm();
        if n < eps {
            None
        } else {
            Some(Vec3::new(self.x / n, self.y / n, self.z / n))
        }
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

/// Angle in radians between the axes spanned by two directions.
/// Sign-invariant, so antipodal pairs map to zero.
pub fn axial_angle(a: Vec3, b: Vec3) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs();
    c.min(1.0).acos()
}

/// Row-major symmetric-friendly 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [f64; 9]);

impl Mat3 {
    pub fn zeros() -> Self {
        Mat3([0.0; 9])
    }

    pub fn identity() -> Self {
        Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[r * 3 + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.0[r * 3 + c] = v;
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.get(0, 0) * v.x + self.get(0, 1) * v.y + self.get(0, 2) * v.z,
            self.get(1, 0) * v.x + self.get(1, 1) * v.y + self.get(1, 2) * v.z,
            self.get(2, 0) * v.x + self.get(2, 1) * v.y + self.get(2, 2) * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = Mat3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += self.get(r, k) * o.get(k, c);
                }
                out.set(r, c, s);
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat3 {
        let mut out = Mat3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// v' M v for a quadratic form.
    pub fn quad_form(&self, v: Vec3) -> f64 {
        v.dot(self.mul_vec(v))
    }

    /// Columns as vectors.
    pub fn col(&self, c: usize) -> Vec3 {
        Vec3::new(self.get(0, c), self.get(1, c), self.get(2, c))
    }

    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
        let mut m = Mat3::zeros();
        for (i, v) in [c0, c1, c2].iter().enumerate() {
            m.set(0, i, v.x);
            m.set(1, i, v.y);
            m.set(2, i, v.z);
        }
        m
    }
}

/// Unit quaternion as (w, x, y, z).
#[derive(Debug, Clone, Copy)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    /// Uniform random rotation via the subgroup algorithm (Shoemake).
    pub fn random_uniform<R: Rng + ?Sized>(rng: &mut R) -> Quat {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let u3: f64 = rng.gen();
        let two_pi = 2.0 * std::f64::consts::PI;
        let a = (1.0 - u1).sqrt();
        let b = u1.sqrt();
        Quat {
            w: b * (two_pi * u3).cos(),
            x: a * (two_pi * u2).sin(),
            y: a * (two_pi * u2).cos(),
            z: b * (two_pi * u3).sin(),
        }
    }

    /// Rotation matrix of the unit quaternion.
    pub fn to_matrix(self) -> Mat3 {
        let Quat { w, x, y, z } = self;
        Mat3([
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ])
    }
}

/// Isotropic Gaussian point in R^3.
pub fn sample_gaussian3<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vec3 {
    let x: f64 = StandardNormal.sample(rng);
    let y: f64 = StandardNormal.sample(rng);
    let z: f64 = StandardNormal.sample(rng);
    Vec3::new(x * sigma, y * sigma, z * sigma)
}

/// Orthonormal frame whose first column is `e1`.
/// The remaining columns come from Gram-Schmidt on a fixed helper axis,
/// chosen deterministically to avoid near-parallel degeneracy.
pub fn frame_from_first_axis(e1: Vec3) -> Mat3 {
    let e1 = e1.normalized(1e-12).expect("frame axis must be nonzero");
    let helper = if e1.x.abs() <= e1.y.abs() && e1.x.abs() <= e1.z.abs() {
        Vec3::new(1.0, 0.0, 0.0)
    } else if e1.y.abs() <= e1.z.abs() {
        Vec3::new(0.0, 1.0, 0.0)
    } else {
        Vec3::new(0.0, 0.0, 1.0)
    };
    let e2 = helper
        .sub(e1.scale(helper.dot(e1)))
        .normalized(1e-12)
        .expect("helper axis cannot be parallel");
    let e3 = e1.cross(e2);
    Mat3::from_cols(e1, e2, e3)
}
