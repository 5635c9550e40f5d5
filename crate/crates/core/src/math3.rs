//! Small fixed-size linear algebra used by the renderer and samplers.
//!
//! Vectors are `[f64; 3]`, matrices are row-major `[[f64; 3]; 3]`.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn normalize3(a: Vec3) -> Vec3 {
    let n = norm3(a);
    scale3(a, 1.0 / n)
}

pub fn mat3_mul_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

/// Rotation matrix from a unit quaternion (w, x, y, z).
pub fn quat_to_mat3(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Rotates a point by a unit quaternion.
pub fn quat_rotate(q: [f64; 4], v: Vec3) -> Vec3 {
    mat3_mul_vec(&quat_to_mat3(q), v)
}

/// Quaternion product a*b (both (w, x, y, z)).
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// 2x2 symmetric matrix as (a, b, c) for [[a, b], [b, c]].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Sym2 {
    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    /// Eigenvalues, larger first. Always real for symmetric input.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mid = 0.5 * (self.a + self.c);
        let d = (0.25 * (self.a - self.c) * (self.a - self.c) + self.b * self.b).sqrt();
        (mid + d, mid - d)
    }

    /// Inverse; `None` when the determinant is not strictly positive.
    pub fn inverse(&self) -> Option<Sym2> {
        let det = self.det();
        if det <= 0.0 {
            return None;
        }
        Some(Sym2 {
            a: self.c / det,
            b: -self.b / det,
            c: self.a / det,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quat_identity_is_identity_matrix() {
        let m = quat_to_mat3([1.0, 0.0, 0.0, 0.0]);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((m[i][j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn quat_z_quarter_turn() {
        // 90 degrees about +z maps +x to +y.
        let half = std::f64::consts::FRAC_PI_4;
        let q = [half.cos(), 0.0, 0.0, half.sin()];
        let v = quat_rotate(q, [1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12 && v[2].abs() < 1e-12);
    }

    #[test]
    fn sym2_inverse_roundtrip() {
        let m = Sym2 {
            a: 3.0,
            b: 0.5,
            c: 2.0,
        };
        let inv = m.inverse().unwrap();
        // m * inv = I, checked entrywise.
        let i00 = m.a * inv.a + m.b * inv.b;
        let i01 = m.a * inv.b + m.b * inv.c;
        let i11 = m.b * inv.b + m.c * inv.c;
        assert!((i00 - 1.0).abs() < 1e-12);
        assert!(i01.abs() < 1e-12);
        assert!((i11 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sym2_eigenvalues_of_diagonal() {
        let m = Sym2 {
            a: 5.0,
            b: 0.0,
            c: 2.0,
        };
        let (l1, l2) = m.eigenvalues();
        assert_eq!(l1, 5.0);
        assert_eq!(l2, 2.0);
    }
}
