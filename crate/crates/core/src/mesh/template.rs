//! Procedural five-finger hand with linear blend skinning.
//!
//! Layout: one ring of [`RING_SIZE`] vertices around every joint plus ten palm
//! vertices, 178 vertices in total. Joint order follows the usual 21-joint hand
//! convention: wrist, then MCP, PIP, DIP and tip for thumb, index, middle,
//! ring and pinky.
//!
//! Pose vector (radians, one entry per joint):
//! - `pose[0]`: whole-hand roll about the y axis,
//! - `pose[1 + 4f]`, `pose[2 + 4f]`, `pose[3 + 4f]`: MCP, PIP and DIP flexion of finger `f`,
//! - `pose[4 + 4f]`: MCP abduction of finger `f`.
//!
//! Every vertex stays within distance 0.99 of the origin for any pose, so
//! meshes always fit in `[-1, 1]^3`.

use nalgebra::{Point3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HandMesh;

pub const FINGERS: usize = 5;
pub const JOINTS_PER_FINGER: usize = 4;
pub const NUM_JOINTS: usize = 1 + FINGERS * JOINTS_PER_FINGER;
pub const RING_SIZE: usize = 8;
const PALM_VERTICES: usize = 10;
pub const NUM_VERTICES: usize = RING_SIZE * NUM_JOINTS + PALM_VERTICES;

const WRIST: [f64; 2] = [0.0, -0.60];
const WRIST_RADIUS: f64 = 0.10;
const MCP: [[f64; 2]; FINGERS] = [
    [-0.28, -0.32],
    [-0.20, 0.05],
    [-0.06, 0.09],
    [0.08, 0.07],
    [0.21, 0.01],
];
/// Rest direction of each finger, radians from +y towards -x.
const HEADING: [f64; FINGERS] = [0.85, 0.12, 0.03, -0.05, -0.15];
const LENGTHS: [[f64; 3]; FINGERS] = [
    [0.20, 0.15, 0.13],
    [0.25, 0.16, 0.12],
    [0.27, 0.17, 0.13],
    [0.25, 0.16, 0.12],
    [0.20, 0.13, 0.11],
];
const RADII: [f64; JOINTS_PER_FINGER] = [0.040, 0.035, 0.030, 0.022];
/// Relative spread of lengths and radii across template seeds.
const SHAPE_JITTER: f64 = 0.05;

/// Indices into the pose vector and the vertex array.
#[derive(Debug, Clone, Copy)]
pub struct TemplateLayout;

impl TemplateLayout {
    pub fn joint(finger: usize, k: usize) -> usize {
        1 + finger * JOINTS_PER_FINGER + k
    }

    /// First vertex of the ring around `joint`.
    pub fn ring_start(joint: usize) -> usize {
        joint * RING_SIZE
    }

    pub fn palm_start() -> usize {
        NUM_JOINTS * RING_SIZE
    }
}

struct Shape {
    lengths: [[f64; 3]; FINGERS],
    radii: [[f64; JOINTS_PER_FINGER]; FINGERS],
    mcp: [[f64; 2]; FINGERS],
}

impl Shape {
    fn sample(seed: u64) -> Self {
        let mut shape = Shape {
            lengths: LENGTHS,
            radii: [RADII; FINGERS],
            mcp: MCP,
        };
        if seed == 0 {
            return shape;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for f in 0..FINGERS {
            for l in shape.lengths[f].iter_mut() {
                *l *= 1.0 + SHAPE_JITTER * rng.gen_range(-1.0..1.0);
            }
            for r in shape.radii[f].iter_mut() {
                *r *= 1.0 + SHAPE_JITTER * rng.gen_range(-1.0..1.0);
            }
            for c in shape.mcp[f].iter_mut() {
                *c += 0.01 * rng.gen_range(-1.0..1.0);
            }
        }
        shape
    }
}

fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Rigid transform `p -> rot * (p - pivot_rest) + pivot_posed`.
#[derive(Clone, Copy)]
struct Bone {
    rot: Rotation3<f64>,
    pivot_rest: Point3<f64>,
    pivot_posed: Point3<f64>,
}

impl Bone {
    fn identity() -> Self {
        Bone {
            rot: Rotation3::identity(),
            pivot_rest: Point3::origin(),
            pivot_posed: Point3::origin(),
        }
    }

    fn apply(&self, p: &Point3<f64>) -> Vector3<f64> {
        (self.rot * (p - self.pivot_rest)) + self.pivot_posed.coords
    }
}

/// Builds the template mesh for a shape `seed` and a joint-angle `pose`.
///
/// Non-finite angles are treated as zero; finite ones are wrapped into `[-pi, pi)`.
pub fn make_template(seed: u64, pose: &[f64; NUM_JOINTS]) -> HandMesh {
    let pose = pose.map(|a| if a.is_finite() { wrap_angle(a) } else { 0.0 });
    let shape = Shape::sample(seed);
    let z = Vector3::z();

    let mut rest = Vec::with_capacity(NUM_VERTICES);
    // (bone a, bone b, weight of a); bone 0 is the palm, 1 + 3f + k finger bones.
    let mut skin: Vec<(usize, usize, f64)> = Vec::with_capacity(NUM_VERTICES);
    let mut bones = vec![Bone::identity(); 1 + 3 * FINGERS];

    let wrist = Point3::new(WRIST[0], WRIST[1], 0.0);
    for i in 0..RING_SIZE {
        let t = std::f64::consts::TAU * i as f64 / RING_SIZE as f64;
        rest.push(wrist + WRIST_RADIUS * (t.cos() * Vector3::x() + t.sin() * z));
        skin.push((0, 0, 1.0));
    }

    for f in 0..FINGERS {
        let dir = Vector3::new(-HEADING[f].sin(), HEADING[f].cos(), 0.0);
        let axis = Unit::new_normalize(dir.cross(&z));
        let mcp = Point3::new(shape.mcp[f][0], shape.mcp[f][1], 0.0);

        let mut joints_rest = [mcp; JOINTS_PER_FINGER];
        for k in 1..JOINTS_PER_FINGER {
            joints_rest[k] = joints_rest[k - 1] + shape.lengths[f][k - 1] * dir;
        }

        let base = 1 + f * JOINTS_PER_FINGER;
        let abduct = Rotation3::from_axis_angle(&Vector3::z_axis(), pose[base + 3]);
        let mut rot = abduct;
        let mut pivot_posed = mcp;
        for k in 0..3 {
            rot *= Rotation3::from_axis_angle(&axis, pose[base + k]);
            bones[1 + 3 * f + k] = Bone {
                rot,
                pivot_rest: joints_rest[k],
                pivot_posed,
            };
            pivot_posed += shape.lengths[f][k] * (rot * dir);
        }

        for (k, joint) in joints_rest.iter().enumerate() {
            let r = shape.radii[f][k];
            for i in 0..RING_SIZE {
                let t = std::f64::consts::TAU * i as f64 / RING_SIZE as f64;
                rest.push(joint + r * (t.cos() * axis.into_inner() + t.sin() * z));
                let b = 1 + 3 * f;
                skin.push(match k {
                    0 => (0, b, 0.5),
                    1 => (b, b + 1, 0.5),
                    2 => (b + 1, b + 2, 0.5),
                    _ => (b + 2, b + 2, 1.0),
                });
            }
        }
    }

    for row in 0..2 {
        for col in 0..PALM_VERTICES / 2 {
            let x = -0.16 + 0.08 * col as f64;
            let y = -0.35 + 0.25 * row as f64;
            rest.push(Point3::new(x, y, 0.0));
            skin.push((0, 0, 1.0));
        }
    }

    let roll = Rotation3::from_axis_angle(&Vector3::y_axis(), pose[0]);
    let vertices = rest
        .iter()
        .zip(&skin)
        .map(|(p, &(a, b, w))| {
            let blended = w * bones[a].apply(p) + (1.0 - w) * bones[b].apply(p);
            let v = roll * blended;
            [v.x, v.y, v.z]
        })
        .collect();

    HandMesh::new(vertices, faces(), joint_groups()).expect("template topology is valid")
}

fn joint_groups() -> Vec<Vec<usize>> {
    (0..NUM_JOINTS)
        .map(|j| {
            let start = TemplateLayout::ring_start(j);
            let mut g: Vec<usize> = (start..start + RING_SIZE).collect();
            if j == 0 {
                let palm = TemplateLayout::palm_start();
                g.extend(palm..palm + PALM_VERTICES);
            }
            g
        })
        .collect()
}

fn faces() -> Vec<[usize; 3]> {
    let mut faces = Vec::new();
    for f in 0..FINGERS {
        for k in 0..JOINTS_PER_FINGER - 1 {
            let a = TemplateLayout::ring_start(TemplateLayout::joint(f, k));
            let b = TemplateLayout::ring_start(TemplateLayout::joint(f, k + 1));
            for i in 0..RING_SIZE {
                let j = (i + 1) % RING_SIZE;
                faces.push([a + i, a + j, b + i]);
                faces.push([a + j, b + j, b + i]);
            }
        }
        let tip = TemplateLayout::ring_start(TemplateLayout::joint(f, JOINTS_PER_FINGER - 1));
        for i in 1..RING_SIZE - 1 {
            faces.push([tip, tip + i, tip + i + 1]);
        }
    }
    let palm = TemplateLayout::palm_start();
    let cols = PALM_VERTICES / 2;
    for c in 0..cols - 1 {
        let (a, b) = (palm + c, palm + c + 1);
        let (d, e) = (a + cols, b + cols);
        faces.push([a, b, d]);
        faces.push([b, e, d]);
    }
    faces
}
