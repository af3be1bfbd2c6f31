//! Height-field scenes built from compactly supported primitives.
//!
//! Scene coordinates: x to the right and y up, both in [-1, 1] across the
//! image; z points towards the viewer. Every primitive is continuous with a
//! slope discontinuity along its support boundary, so ownership boundaries
//! are also normal-map discontinuities.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Bump,
    Ramp,
    Ridge,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 3] = [PrimitiveKind::Bump, PrimitiveKind::Ramp, PrimitiveKind::Ridge];

    /// Segmentation class id; 0 is background.
    pub fn class_id(self) -> u32 {
        match self {
            PrimitiveKind::Bump => 1,
            PrimitiveKind::Ramp => 2,
            PrimitiveKind::Ridge => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Gaussian bump truncated at `radius` and shifted so it meets the ground.
    Bump {
        center: [f64; 2],
        radius: f64,
        height: f64,
    },
    /// Planar ramp rising along `angle`, with a steeper back face and side faces.
    Ramp {
        center: [f64; 2],
        angle: f64,
        half_length: f64,
        half_width: f64,
        height: f64,
    },
    /// Tent profile around a line segment.
    Ridge {
        start: [f64; 2],
        end: [f64; 2],
        half_width: f64,
        height: f64,
    },
}

/// Height and gradient of a single primitive at a point inside its support.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Patch {
    pub z: f64,
    pub dzdx: f64,
    pub dzdy: f64,
}

const BUMP_EDGE: f64 = 0.135_335_283_236_612_7; // exp(-2)
const RAMP_RISE: f64 = 1.4;
const RAMP_FALL: f64 = 0.6;
const RAMP_SIDE: f64 = 0.5;

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Bump { .. } => PrimitiveKind::Bump,
            Primitive::Ramp { .. } => PrimitiveKind::Ramp,
            Primitive::Ridge { .. } => PrimitiveKind::Ridge,
        }
    }

    /// Height and gradient at `(x, y)`, or `None` outside the support.
    pub fn patch(&self, x: f64, y: f64) -> Option<Patch> {
        match *self {
            Primitive::Bump {
                center,
                radius,
                height,
            } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                let r2 = dx * dx + dy * dy;
                if r2 >= radius * radius {
                    return None;
                }
                let s2 = radius * radius / 4.0;
                let g = (-r2 / (2.0 * s2)).exp();
                let scale = height / (1.0 - BUMP_EDGE);
                let z = scale * (g - BUMP_EDGE);
                let d = -scale * g / s2;
                Some(Patch {
                    z,
                    dzdx: d * dx,
                    dzdy: d * dy,
                })
            }
            Primitive::Ramp {
                center,
                angle,
                half_length,
                half_width,
                height,
            } => {
                let (c, s) = (angle.cos(), angle.sin());
                let (dx, dy) = (x - center[0], y - center[1]);
                let t = dx * c + dy * s;
                let q = -dx * s + dy * c;
                let rise = height / (RAMP_RISE * half_length);
                let fall = height / (RAMP_FALL * half_length);
                let side = height / (RAMP_SIDE * half_width);
                let faces = [
                    (rise * (t + half_length), rise * c, rise * s),
                    (fall * (half_length - t), -fall * c, -fall * s),
                    (
                        side * (half_width - q.abs()),
                        side * q.signum() * s,
                        -side * q.signum() * c,
                    ),
                ];
                let (z, gx, gy) = faces
                    .into_iter()
                    .fold((f64::INFINITY, 0.0, 0.0), |acc, f| if f.0 < acc.0 { f } else { acc });
                (z > 0.0).then_some(Patch { z, dzdx: gx, dzdy: gy })
            }
            Primitive::Ridge {
                start,
                end,
                half_width,
                height,
            } => {
                let (ex, ey) = (end[0] - start[0], end[1] - start[1]);
                let len2 = ex * ex + ey * ey;
                let t = if len2 > 0.0 {
                    (((x - start[0]) * ex + (y - start[1]) * ey) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (x - (start[0] + t * ex), y - (start[1] + t * ey));
                let d = (px * px + py * py).sqrt();
                if d >= half_width {
                    return None;
                }
                let z = height * (1.0 - d / half_width);
                let (dzdx, dzdy) = if d > 0.0 {
                    (-height * px / (half_width * d), -height * py / (half_width * d))
                } else {
                    (0.0, 0.0)
                };
                Some(Patch { z, dzdx, dzdy })
            }
        }
    }

    /// Circle enclosing the support.
    pub fn bounds(&self) -> ([f64; 2], f64) {
        match *self {
            Primitive::Bump { center, radius, .. } => (center, radius),
            Primitive::Ramp {
                center,
                half_length,
                half_width,
                ..
            } => (center, half_length.hypot(half_width)),
            Primitive::Ridge {
                start,
                end,
                half_width,
                ..
            } => {
                let mid = [(start[0] + end[0]) / 2.0, (start[1] + end[1]) / 2.0];
                let half = (end[0] - start[0]).hypot(end[1] - start[1]) / 2.0;
                (mid, half + half_width)
            }
        }
    }

    /// Highest point of the primitive (a representative crest point for ramps and ridges).
    pub fn apex(&self) -> [f64; 2] {
        match *self {
            Primitive::Bump { center, .. } => center,
            Primitive::Ramp {
                center,
                angle,
                half_length,
                ..
            } => {
                // Rise and fall faces meet where (t + L) / 1.4 = (L - t) / 0.6.
                let t = half_length * (RAMP_RISE - RAMP_FALL) / (RAMP_RISE + RAMP_FALL);
                [center[0] + t * angle.cos(), center[1] + t * angle.sin()]
            }
            Primitive::Ridge { start, end, .. } => {
                [(start[0] + end[0]) / 2.0, (start[1] + end[1]) / 2.0]
            }
        }
    }

    /// Uniformly scale the footprint and height about the bounding center,
    /// keeping slopes unchanged.
    pub fn scaled(&self, k: f64) -> Primitive {
        let (c, _) = self.bounds();
        let sc = |p: [f64; 2]| [c[0] + k * (p[0] - c[0]), c[1] + k * (p[1] - c[1])];
        match *self {
            Primitive::Bump {
                center,
                radius,
                height,
            } => Primitive::Bump {
                center: sc(center),
                radius: radius * k,
                height: height * k,
            },
            Primitive::Ramp {
                center,
                angle,
                half_length,
                half_width,
                height,
            } => Primitive::Ramp {
                center: sc(center),
                angle,
                half_length: half_length * k,
                half_width: half_width * k,
                height: height * k,
            },
            Primitive::Ridge {
                start,
                end,
                half_width,
                height,
            } => Primitive::Ridge {
                start: sc(start),
                end: sc(end),
                half_width: half_width * k,
                height: height * k,
            },
        }
    }

    /// Same footprint with the height multiplied by `k`.
    pub fn with_relief(&self, k: f64) -> Primitive {
        let mut p = self.clone();
        match &mut p {
            Primitive::Bump { height, .. } | Primitive::Ramp { height, .. } | Primitive::Ridge { height, .. } => {
                *height *= k
            }
        }
        p
    }

    /// Moves the bounding center to `to`.
    pub fn translated_to(&self, to: [f64; 2]) -> Primitive {
        let (c, _) = self.bounds();
        let (dx, dy) = (to[0] - c[0], to[1] - c[1]);
        let mv = |p: [f64; 2]| [p[0] + dx, p[1] + dy];
        match self.clone() {
            Primitive::Bump { center, radius, height } => Primitive::Bump {
                center: mv(center),
                radius,
                height,
            },
            Primitive::Ramp {
                center,
                angle,
                half_length,
                half_width,
                height,
            } => Primitive::Ramp {
                center: mv(center),
                angle,
                half_length,
                half_width,
                height,
            },
            Primitive::Ridge {
                start,
                end,
                half_width,
                height,
            } => Primitive::Ridge {
                start: mv(start),
                end: mv(end),
                half_width,
                height,
            },
        }
    }

    /// Random primitive of the given kind centered at the origin.
    pub fn sample<R: Rng + ?Sized>(kind: PrimitiveKind, rng: &mut R) -> Primitive {
        match kind {
            PrimitiveKind::Bump => {
                let radius = rng.random_range(0.15..0.3);
                Primitive::Bump {
                    center: [0.0, 0.0],
                    radius,
                    height: radius * rng.random_range(0.3..0.6),
                }
            }
            PrimitiveKind::Ramp => {
                let half_length = rng.random_range(0.14..0.24);
                Primitive::Ramp {
                    center: [0.0, 0.0],
                    angle: rng.random_range(0.0..std::f64::consts::TAU),
                    half_length,
                    half_width: half_length * rng.random_range(0.6..1.0),
                    height: half_length * rng.random_range(0.3..0.5),
                }
            }
            PrimitiveKind::Ridge => {
                let half = rng.random_range(0.12..0.24);
                let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let half_width = rng.random_range(0.07..0.12);
                Primitive::Ridge {
                    start: [-half * a.cos(), -half * a.sin()],
                    end: [half * a.cos(), half * a.sin()],
                    half_width,
                    height: half_width * rng.random_range(0.4..0.8),
                }
            }
        }
    }
}

/// Sum of primitives plus a global tilt plane.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    /// Rotation of the ground plane about the image y axis, degrees.
    pub tilt_deg: f64,
}

/// Height, gradient and owning primitive at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub z: f64,
    pub dzdx: f64,
    pub dzdy: f64,
    pub owner: Option<usize>,
}

impl Scene {
    pub fn flat(tilt_deg: f64) -> Self {
        Scene {
            primitives: Vec::new(),
            tilt_deg,
        }
    }

    pub fn surface(&self, x: f64, y: f64) -> SurfacePoint {
        let slope = self.tilt_deg.to_radians().tan();
        let mut p = SurfacePoint {
            z: slope * x,
            dzdx: slope,
            dzdy: 0.0,
            owner: None,
        };
        let mut best = 0.0;
        for (i, prim) in self.primitives.iter().enumerate() {
            if let Some(patch) = prim.patch(x, y) {
                p.z += patch.z;
                p.dzdx += patch.dzdx;
                p.dzdy += patch.dzdy;
                if patch.z > best {
                    best = patch.z;
                    p.owner = Some(i);
                }
            }
        }
        p
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.surface(x, y).z
    }

    /// Unit normal `normalize(-dz/dx, -dz/dy, 1)`.
    pub fn normal_at(&self, x: f64, y: f64) -> [f64; 3] {
        let p = self.surface(x, y);
        normal_from_gradient(p.dzdx, p.dzdy)
    }

    /// Segmentation class at a point (0 = background).
    pub fn class_at(&self, x: f64, y: f64) -> u32 {
        self.surface(x, y)
            .owner
            .map_or(0, |i| self.primitives[i].kind().class_id())
    }
}

pub fn normal_from_gradient(dzdx: f64, dzdy: f64) -> [f64; 3] {
    let n = (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
    [-dzdx / n, -dzdy / n, 1.0 / n]
}

/// Scene coordinates of the center of pixel `(row, col)` in an `size`-pixel image.
pub fn pixel_to_scene(row: usize, col: usize, size: usize) -> (f64, f64) {
    let s = size as f64;
    (
        -1.0 + (2.0 * col as f64 + 1.0) / s,
        1.0 - (2.0 * row as f64 + 1.0) / s,
    )
}

/// Continuous pixel coordinates `(u, v)` = (column, row) of a scene point.
pub fn scene_to_pixel(x: f64, y: f64, size: usize) -> (f64, f64) {
    let s = size as f64;
    ((x + 1.0) / 2.0 * s - 0.5, (1.0 - y) / 2.0 * s - 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_gradient(p: &Primitive, x: f64, y: f64) -> (f64, f64) {
        let h = 1e-6;
        let z = |x, y| p.patch(x, y).map_or(0.0, |q| q.z);
        (
            (z(x + h, y) - z(x - h, y)) / (2.0 * h),
            (z(x, y + h) - z(x, y - h)) / (2.0 * h),
        )
    }

    #[test]
    fn primitive_gradients_match_finite_differences_away_from_kinks() {
        let prims = [
            Primitive::Bump {
                center: [0.1, -0.2],
                radius: 0.3,
                height: 0.15,
            },
            Primitive::Ramp {
                center: [0.0, 0.0],
                angle: 0.7,
                half_length: 0.3,
                half_width: 0.2,
                height: 0.12,
            },
            Primitive::Ridge {
                start: [-0.2, 0.0],
                end: [0.2, 0.1],
                half_width: 0.1,
                height: 0.06,
            },
        ];
        let pts = [(0.05, -0.1), (0.0, 0.05), (-0.1, 0.03), (0.15, 0.12)];
        for p in &prims {
            for &(x, y) in &pts {
                let Some(patch) = p.patch(x, y) else { continue };
                let (gx, gy) = fd_gradient(p, x, y);
                assert!((patch.dzdx - gx).abs() < 1e-5, "{p:?} at ({x},{y})");
                assert!((patch.dzdy - gy).abs() < 1e-5, "{p:?} at ({x},{y})");
            }
        }
    }

    #[test]
    fn supports_meet_the_ground_continuously() {
        let b = Primitive::Bump {
            center: [0.0, 0.0],
            radius: 0.2,
            height: 0.1,
        };
        let z = b.patch(0.199_999, 0.0).unwrap().z;
        assert!(z.abs() < 1e-5);
        assert!(b.patch(0.2, 0.0).is_none());
        let r = Primitive::Ramp {
            center: [0.0, 0.0],
            angle: 0.0,
            half_length: 0.2,
            half_width: 0.15,
            height: 0.1,
        };
        let apex = r.apex();
        assert!((r.patch(apex[0], apex[1]).unwrap().z - 0.1).abs() < 1e-12);
    }

    #[test]
    fn pixel_mapping_round_trips() {
        let (x, y) = pixel_to_scene(3, 10, 32);
        let (u, v) = scene_to_pixel(x, y, 32);
        assert!((u - 10.0).abs() < 1e-12 && (v - 3.0).abs() < 1e-12);
    }
}
