//! Point sets and tessellations on the unit sphere.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

pub fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Angle in degrees between the axes through `a` and `b` (sign-insensitive).
pub fn axis_angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let c = (dot(a, b) / (norm(a) * norm(b))).abs().min(1.0);
    c.acos().to_degrees()
}

/// `n` near-uniform directions on the upper hemisphere (golden-angle spiral).
///
/// Suited to single-shell gradient tables, where `p` and `−p` carry the same
/// information.
pub fn hemisphere_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            normalize([r * a.cos(), r * a.sin(), z])
        })
        .collect()
}

/// `n` near-uniform directions over the full sphere (golden-angle spiral).
pub fn sphere_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            normalize([r * a.cos(), r * a.sin(), z])
        })
        .collect()
}

/// Triangulated unit sphere with vertex adjacency.
#[derive(Debug, Clone)]
pub struct SphereMesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    neighbors: Vec<Vec<usize>>,
}

impl SphereMesh {
    /// Icosahedron refined `subdivisions` times by edge midpoints:
    /// 12, 42, 162, 642, 2562, ... vertices. Antipodally symmetric.
    pub fn icosphere(subdivisions: usize) -> Self {
        let t = (1.0 + 5.0_f64.sqrt()) / 2.0;
        let mut vertices: Vec<[f64; 3]> = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ]
        .into_iter()
        .map(normalize)
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
            let mut mid = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| -> usize {
                let key = (a.min(b), a.max(b));
                *midpoint.entry(key).or_insert_with(|| {
                    let (pa, pb) = (verts[a], verts[b]);
                    verts.push(normalize([pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2]]));
                    verts.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                next.push([a, ab, ca]);
                next.push([b, bc, ab]);
                next.push([c, ca, bc]);
                next.push([ab, bc, ca]);
            }
            faces = next;
        }
        let mut neighbors = vec![Vec::new(); vertices.len()];
        for f in &faces {
            for i in 0..3 {
                let (a, b) = (f[i], f[(i + 1) % 3]);
                if !neighbors[a].contains(&b) {
                    neighbors[a].push(b);
                }
                if !neighbors[b].contains(&a) {
                    neighbors[b].push(a);
                }
            }
        }
        Self {
            vertices,
            faces,
            neighbors,
        }
    }

    pub fn from_parts(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); vertices.len()];
        for f in &faces {
            for i in 0..3 {
                let (a, b) = (f[i], f[(i + 1) % 3]);
                if a >= vertices.len() || b >= vertices.len() {
                    return Err(Error::InvalidInput(format!("face {f:?} references a missing vertex")));
                }
                if !neighbors[a].contains(&b) {
                    neighbors[a].push(b);
                }
                if !neighbors[b].contains(&a) {
                    neighbors[b].push(a);
                }
            }
        }
        Ok(Self {
            vertices,
            faces,
            neighbors,
        })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    /// Index of the vertex at `−v` for every vertex, if the mesh is antipodally symmetric.
    pub fn antipodes(&self) -> Option<Vec<usize>> {
        let key = |p: [f64; 3]| {
            (
                (p[0] * 1e9).round() as i64,
                (p[1] * 1e9).round() as i64,
                (p[2] * 1e9).round() as i64,
            )
        };
        let lookup: HashMap<_, usize> = self
            .vertices
            .iter()
            .enumerate()
            .map(|(i, p)| (key(*p), i))
            .collect();
        self.vertices
            .iter()
            .map(|p| lookup.get(&key([-p[0], -p[1], -p[2]])).copied())
            .collect()
    }
}
