//! Fixed sinusoidal encodings of positions and orientations.

use crate::error::{NfsError, Result};

pub const QUAT_TOL: f64 = 1e-6;

/// A source pose: position in metres and a unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: [f64; 3],
    pub quat: [f64; 4],
}

impl Pose {
    pub fn at(position: [f64; 3]) -> Self {
        Self { position, quat: [1.0, 0.0, 0.0, 0.0] }
    }
}

/// Encodes each of `coords` with `[sin(2^j v), cos(2^j v)]` for
/// `j = 0 .. dims / (2 * coords)`, coordinate-major, zero-filling any
/// remainder up to `dims`.
pub fn sinusoidal(coords: &[f64], dims: usize) -> Vec<f64> {
    let levels = dims / (2 * coords.len());
    let mut out = Vec::with_capacity(dims);
    for &v in coords {
        let mut freq = 1.0;
        for _ in 0..levels {
            let (s, c) = (freq * v).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
    out.resize(dims, 0.0);
    out
}

pub fn check_quaternion(q: [f64; 4]) -> Result<()> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > QUAT_TOL {
        return Err(NfsError::contract(format!("quaternion {q:?} has norm {norm}, expected 1")));
    }
    Ok(())
}

/// Position and orientation encodings for a run of poses, each `[poses, dims]` row-major.
pub fn encode_poses(poses: &[Pose], dims: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pos = Vec::with_capacity(poses.len() * dims);
    let mut ori = Vec::with_capacity(poses.len() * dims);
    for p in poses {
        check_quaternion(p.quat)?;
        pos.extend(sinusoidal(&p.position, dims));
        ori.extend(sinusoidal(&p.quat, dims));
    }
    Ok((pos, ori))
}
