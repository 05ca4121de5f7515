use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Default bound on |k·Δφ| in degrees.
pub const DEFAULT_ACTION_BOUND: f64 = 90.0;

/// Cone-beam rig. `beta` is the yaw of the source about +z in degrees,
/// with the frontal view at 0° and the source at `(-sod·sinβ, -sod·cosβ, 0)`.
/// The detector u-axis is `(cosβ, -sinβ, 0)` and its v-axis is +z, so the
/// u-axis turns with the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeBeamGeometry {
    pub sod: f64,
    pub sdd: f64,
    pub nu: usize,
    pub nv: usize,
    /// Detector pixel size in mm.
    pub pitch: f64,
    pub beta: f64,
    #[serde(default)]
    pub pitch_angle: f64,
    #[serde(default)]
    pub roll_angle: f64,
}

impl Default for ConeBeamGeometry {
    fn default() -> Self {
        ConeBeamGeometry {
            sod: 541.0,
            sdd: 949.0,
            nu: 64,
            nv: 64,
            pitch: 4.0,
            beta: 0.0,
            pitch_angle: 0.0,
            roll_angle: 0.0,
        }
    }
}

/// Source position and detector frame in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rig {
    pub source: Vec3,
    /// Unit vector from source toward the isocenter.
    pub axis: Vec3,
    pub e_u: Vec3,
    pub e_v: Vec3,
    pub detector_center: Vec3,
}

impl ConeBeamGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.sod > 0.0 && self.sod < self.sdd) {
            return Err(Error::InvalidGeometry(format!(
                "need 0 < sod < sdd, got sod={} sdd={}",
                self.sod, self.sdd
            )));
        }
        if self.nu < 8 || self.nv < 8 {
            return Err(Error::InvalidGeometry(format!(
                "detector {}x{} below 8x8",
                self.nu, self.nv
            )));
        }
        if !(self.pitch > 0.0) {
            return Err(Error::InvalidGeometry("pitch must be positive".into()));
        }
        if ![self.beta, self.pitch_angle, self.roll_angle].iter().all(|a| a.is_finite()) {
            return Err(Error::InvalidGeometry("angles must be finite".into()));
        }
        Ok(())
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        ConeBeamGeometry {
            beta,
            ..self.clone()
        }
    }

    pub fn rig(&self) -> Rig {
        let rot = rotation(self.beta, self.pitch_angle, self.roll_angle);
        let source = mat_vec(&rot, [0.0, -self.sod, 0.0]);
        let axis = mat_vec(&rot, [0.0, 1.0, 0.0]);
        let e_u = mat_vec(&rot, [1.0, 0.0, 0.0]);
        let e_v = mat_vec(&rot, [0.0, 0.0, 1.0]);
        let detector_center = add(source, scale(axis, self.sdd));
        Rig {
            source,
            axis,
            e_u,
            e_v,
            detector_center,
        }
    }

    /// Detector coordinates (u, v) in mm of pixel `(i, j)`.
    #[inline]
    pub fn pixel_uv(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (i as f64 - 0.5 * (self.nu as f64 - 1.0)) * self.pitch,
            (j as f64 - 0.5 * (self.nv as f64 - 1.0)) * self.pitch,
        )
    }

    /// World position of the center of pixel `(i, j)`.
    pub fn pixel_position(&self, rig: &Rig, i: usize, j: usize) -> Vec3 {
        let (u, v) = self.pixel_uv(i, j);
        add(add(rig.detector_center, scale(rig.e_u, u)), scale(rig.e_v, v))
    }
}

/// R = Rz(β) · Rx(pitch) · Ry(roll), with Rz mapping +y to (sinβ, cosβ, 0).
fn rotation(beta: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    // Reduce first so β and β + 360° give bit-identical rigs.
    let b = beta.rem_euclid(360.0).to_radians();
    let p = pitch.rem_euclid(360.0).to_radians();
    let r = roll.rem_euclid(360.0).to_radians();
    let (sb, cb) = b.sin_cos();
    let yaw = [[cb, sb, 0.0], [-sb, cb, 0.0], [0.0, 0.0, 1.0]];
    if pitch == 0.0 && roll == 0.0 {
        return yaw;
    }
    let (sp, cp) = p.sin_cos();
    let (sr, cr) = r.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let ry = [[cr, 0.0, sr], [0.0, 1.0, 0.0], [-sr, 0.0, cr]];
    mat_mul(&mat_mul(&yaw, &rx), &ry)
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseView {
    Frontal,
    Lateral,
}

impl BaseView {
    pub fn beta(self) -> f64 {
        match self {
            BaseView::Frontal => 0.0,
            BaseView::Lateral => 90.0,
        }
    }
}

impl std::str::FromStr for BaseView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frontal" => Ok(BaseView::Frontal),
            "lateral" => Ok(BaseView::Lateral),
            other => Err(Error::Config(format!("unknown base view {other:?}"))),
        }
    }
}

/// A relative source rotation of `k` steps of `delta_phi` degrees, with
/// optional pitch and roll for the three-angle variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub k: i32,
    pub delta_phi: f64,
    #[serde(default)]
    pub pitch: f64,
    #[serde(default)]
    pub roll: f64,
}

impl Action {
    pub fn yaw(k: i32, delta_phi: f64) -> Self {
        Action {
            k,
            delta_phi,
            pitch: 0.0,
            roll: 0.0,
        }
    }

    /// Yaw angle in degrees.
    pub fn angle(&self) -> f64 {
        self.k as f64 * self.delta_phi
    }

    /// Yaw angle in radians; the scalar fed to the view predictor.
    pub fn radians(&self) -> f64 {
        self.angle().to_radians()
    }

    pub fn check_bound(&self, bound: f64) -> Result<()> {
        let angle = self.angle();
        if !angle.is_finite() || angle.abs() > bound {
            return Err(Error::ActionOutOfBound { angle, bound });
        }
        Ok(())
    }
}

/// Pose for `action` relative to the frontal or lateral base view, with the
/// default ±90° bound.
pub fn pose_from_action(
    base: BaseView,
    action: &Action,
    rig: &ConeBeamGeometry,
) -> Result<ConeBeamGeometry> {
    pose_from_action_bounded(base, action, rig, DEFAULT_ACTION_BOUND)
}

pub fn pose_from_action_bounded(
    base: BaseView,
    action: &Action,
    rig: &ConeBeamGeometry,
    bound: f64,
) -> Result<ConeBeamGeometry> {
    action.check_bound(bound)?;
    Ok(ConeBeamGeometry {
        beta: base.beta() + action.angle(),
        pitch_angle: action.pitch,
        roll_angle: action.roll,
        ..rig.clone()
    })
}
