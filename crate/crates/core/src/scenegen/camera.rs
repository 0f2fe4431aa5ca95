//! Pinhole cameras with the world-to-camera convention `x_cam = R x_world + t`.
//! Camera axes: x right, y down, z forward. Pixel centers sit at `(u + 0.5, v + 0.5)`.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// `mᵀ v`
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = m[c][r];
        }
    }
    out
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Mat3 {
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

/// Unit quaternion `(w, x, y, z)` with `w ≥ 0` for a rotation matrix.
pub fn matrix_to_quat(m: &Mat3) -> [f64; 4] {
    let trace = m[0][0] + m[1][1] + m[2][2];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    q.map(|v| sign * v / n)
}

/// Camera pose plus field of view. `to_vector` yields the 9-vector
/// `[qw, qx, qy, qz, tx, ty, tz, fov_v, fov_h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    /// (vertical, horizontal) in radians.
    pub fov: [f64; 2],
}

/// Pixel-space intrinsics for a given resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraParams {
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov: [f64; 2]) -> Self {
        let forward = normalize(sub(target, eye));
        let right = normalize(cross(forward, up));
        let down = cross(forward, right);
        let r = [right, down, forward];
        let rotation = matrix_to_quat(&r);
        let rm = quat_to_matrix(rotation);
        let translation = scale(mat_vec(&rm, eye), -1.0);
        Self {
            rotation,
            translation,
            fov,
        }
    }

    pub fn from_vector(g: &[f64]) -> Self {
        Self {
            rotation: [g[0], g[1], g[2], g[3]],
            translation: [g[4], g[5], g[6]],
            fov: [g[7], g[8]],
        }
    }

    pub fn to_vector(&self) -> [f64; 9] {
        let [qw, qx, qy, qz] = self.rotation;
        let [tx, ty, tz] = self.translation;
        [qw, qx, qy, qz, tx, ty, tz, self.fov[0], self.fov[1]]
    }

    pub fn is_valid(&self) -> bool {
        let qn = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        (qn - 1.0).abs() < 1e-9
            && self
                .fov
                .iter()
                .all(|&f| f > 0.0 && f < std::f64::consts::PI)
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_matrix(self.rotation)
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        scale(mat_t_vec(&self.rotation_matrix(), self.translation), -1.0)
    }

    pub fn intrinsics(&self, height: usize, width: usize) -> Intrinsics {
        Intrinsics {
            fx: 0.5 * width as f64 / (0.5 * self.fov[1]).tan(),
            fy: 0.5 * height as f64 / (0.5 * self.fov[0]).tan(),
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
        }
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation_matrix(), p), self.translation)
    }

    /// Continuous pixel coordinates `(u, v)` and camera-frame depth of a world point.
    pub fn project(&self, p: Vec3, height: usize, width: usize) -> (f64, f64, f64) {
        let c = self.world_to_camera(p);
        let k = self.intrinsics(height, width);
        (k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy, c[2])
    }

    /// Camera-frame ray through continuous pixel `(u, v)` scaled to unit depth.
    pub fn pixel_ray_camera(&self, u: f64, v: f64, height: usize, width: usize) -> Vec3 {
        let k = self.intrinsics(height, width);
        [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]
    }

    /// World point at camera-frame depth `depth` along pixel `(u, v)`:
    /// `Rᵀ (depth · K⁻¹ [u, v, 1] − t)`.
    pub fn unproject_point(&self, u: f64, v: f64, depth: f64, height: usize, width: usize) -> Vec3 {
        let ray = self.pixel_ray_camera(u, v, height, width);
        let cam = sub(scale(ray, depth), self.translation);
        mat_t_vec(&self.rotation_matrix(), cam)
    }

    /// Pose of this camera expressed in the frame of `reference`, so that the
    /// reference itself becomes the identity.
    pub fn relative_to(&self, reference: &CameraParams) -> CameraParams {
        let r_ref = reference.rotation_matrix();
        let r = self.rotation_matrix();
        let r_rel = mat_mul(&r, &transpose(&r_ref));
        let rotation = matrix_to_quat(&r_rel);
        let shifted = mat_vec(&r_rel, reference.translation);
        CameraParams {
            rotation,
            translation: sub(self.translation, shifted),
            fov: self.fov,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_points_the_optical_axis_at_the_target() {
        let cam = CameraParams::look_at(
            [3.0, -4.0, 2.0],
            [0.0, 0.0, 0.5],
            [0.0, 0.0, 1.0],
            [0.9, 0.9],
        );
        assert!(cam.is_valid());
        let (u, v, z) = cam.project([0.0, 0.0, 0.5], 32, 32);
        assert!((u - 16.0).abs() < 1e-9 && (v - 16.0).abs() < 1e-9);
        assert!(z > 0.0);
        let c = cam.center();
        assert!(norm(sub(c, [3.0, -4.0, 2.0])) < 1e-12);
        // world up projects upward in the image (smaller v)
        let (_, v_up, _) = cam.project([0.0, 0.0, 1.5], 32, 32);
        assert!(v_up < v);
    }

    #[test]
    fn quaternion_round_trip() {
        let cam = CameraParams::look_at(
            [1.0, 2.0, 3.0],
            [-1.0, 0.5, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 1.0],
        );
        let m = cam.rotation_matrix();
        let q = matrix_to_quat(&m);
        let m2 = quat_to_matrix(q);
        for r in 0..3 {
            for c in 0..3 {
                assert!((m[r][c] - m2[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relative_pose_of_reference_is_identity() {
        let a = CameraParams::look_at([4.0, 0.0, 2.0], [0.0; 3], [0.0, 0.0, 1.0], [1.0, 1.0]);
        let b = CameraParams::look_at([0.0, 4.0, 2.5], [0.0; 3], [0.0, 0.0, 1.0], [1.0, 1.0]);
        let rel = a.relative_to(&a);
        assert!((rel.rotation[0] - 1.0).abs() < 1e-12);
        assert!(rel.translation.iter().all(|v| v.abs() < 1e-12));
        // a point keeps its camera-frame coordinates under the change of world frame
        let p = [0.3, -0.2, 0.7];
        let in_ref = a.world_to_camera(p);
        let rel_b = b.relative_to(&a);
        let x1 = b.world_to_camera(p);
        let x2 = rel_b.world_to_camera(in_ref);
        assert!(norm(sub(x1, x2)) < 1e-12);
    }
}
