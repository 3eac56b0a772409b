//! Hand meshes, joints and the evaluation metrics.

mod metrics;
mod template;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DneError, Result};
use crate::Vec3;

pub use metrics::{mpjpe, mpjpe_multi, mpvpe, mpvpe_2d, mpvpe_multi};
pub use template::{
    make_template, TemplateLayout, FINGERS, JOINTS_PER_FINGER, NUM_JOINTS, NUM_VERTICES,
    RING_SIZE,
};

/// A triangle mesh with a fixed topology and disjoint joint groups.
#[derive(Debug, Clone, PartialEq)]
pub struct HandMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    joint_groups: Vec<Vec<usize>>,
}

/// Joint positions regressed from a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSet {
    pub joints: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
struct MeshFile {
    version: u32,
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    joint_groups: Vec<Vec<usize>>,
}

impl HandMesh {
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        joint_groups: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n = vertices.len();
        if vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(DneError::InvalidMesh("non-finite vertex coordinate".into()));
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(DneError::InvalidMesh(format!("face {f:?} indexes past {n} vertices")));
        }
        let mut owner = vec![false; n];
        for (j, group) in joint_groups.iter().enumerate() {
            if group.is_empty() {
                return Err(DneError::InvalidMesh(format!("joint group {j} is empty")));
            }
            for &i in group {
                if i >= n {
                    return Err(DneError::InvalidMesh(format!(
                        "joint group {j} indexes vertex {i} of {n}"
                    )));
                }
                if std::mem::replace(&mut owner[i], true) {
                    return Err(DneError::InvalidMesh(format!(
                        "vertex {i} belongs to more than one joint group"
                    )));
                }
            }
        }
        Ok(Self {
            vertices,
            faces,
            joint_groups,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn joint_groups(&self) -> &[Vec<usize>] {
        &self.joint_groups
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joint_groups.len()
    }

    /// Same topology, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(DneError::shape(
                "HandMesh::with_vertices",
                self.vertices.len(),
                vertices.len(),
            ));
        }
        if vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(DneError::InvalidMesh("non-finite vertex coordinate".into()));
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
            joint_groups: self.joint_groups.clone(),
        })
    }

    /// Order-sensitive FNV-1a hash of faces and joint groups.
    pub fn topology_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(self.vertices.len() as u64);
        for f in &self.faces {
            f.iter().for_each(|&i| eat(i as u64));
        }
        for g in &self.joint_groups {
            eat(u64::MAX);
            g.iter().for_each(|&i| eat(i as u64));
        }
        h
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MeshFile {
            version: 1,
            vertices: self.vertices.clone(),
            faces: self.faces.clone(),
            joint_groups: self.joint_groups.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MeshFile = serde_json::from_str(text)?;
        if file.version != 1 {
            return Err(DneError::Format(format!("unsupported mesh version {}", file.version)));
        }
        Self::new(file.vertices, file.faces, file.joint_groups)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Joint `j` is the mean of the vertices in `joint_groups[j]`.
pub fn regress_joints(mesh: &HandMesh) -> JointSet {
    let joints = mesh
        .joint_groups
        .iter()
        .map(|group| {
            let mut acc = [0.0; 3];
            for &i in group {
                for (a, x) in acc.iter_mut().zip(mesh.vertices[i]) {
                    *a += x;
                }
            }
            acc.map(|a| a / group.len() as f64)
        })
        .collect();
    JointSet { joints }
}
