//! Procedural reference assets for tests and demos.

use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::scene::{ReferenceAsset, TriangleMesh};

/// Fibonacci lattice on the unit sphere.
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

fn shade(p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(0.55 + 0.35 * p.x, 0.55 + 0.35 * p.y, 0.55 + 0.35 * p.z)
        .map(|v| v.clamp(0.0, 1.0))
}

pub fn sphere(n: usize) -> ReferenceAsset {
    let pts = fibonacci_sphere(n);
    let colors = pts.iter().map(shade).collect();
    ReferenceAsset::from_points(pts, colors, "a smooth sphere").expect("non-empty sphere")
}

/// Surface of the cube `[-1, 1]³` sampled on a regular grid of `per_edge`² points per face.
pub fn cube(per_edge: usize) -> ReferenceAsset {
    let per_edge = per_edge.max(2);
    let mut pts = Vec::with_capacity(6 * per_edge * per_edge);
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            for i in 0..per_edge {
                for j in 0..per_edge {
                    let u = -1.0 + 2.0 * (i as f64 + 0.5) / per_edge as f64;
                    let v = -1.0 + 2.0 * (j as f64 + 0.5) / per_edge as f64;
                    let mut p = Vector3::zeros();
                    p[axis] = sign;
                    p[(axis + 1) % 3] = u;
                    p[(axis + 2) % 3] = v;
                    pts.push(p);
                }
            }
        }
    }
    let colors = pts.iter().map(|p| shade(&(p / 3f64.sqrt()))).collect();
    ReferenceAsset::from_points(pts, colors, "a wooden cube").expect("non-empty cube")
}

/// A unit sphere with a nose pointing along +x.
pub fn head(n: usize) -> ReferenceAsset {
    let mut pts = fibonacci_sphere(n);
    let mut colors: Vec<Vector3<f64>> = pts.iter().map(|_| Vector3::new(0.8, 0.65, 0.5)).collect();
    let nose_n = (n / 8).max(16);
    for p in fibonacci_sphere(nose_n) {
        let q = Vector3::new(1.05, 0.0, 0.1) + p.component_mul(&Vector3::new(0.35, 0.18, 0.18));
        pts.push(q);
        colors.push(Vector3::new(0.9, 0.4, 0.35));
    }
    ReferenceAsset::from_points(pts, colors, "a head with a nose").expect("non-empty head")
}

pub fn cube_mesh() -> TriangleMesh {
    let mut vertices = Vec::new();
    for i in 0..8 {
        vertices.push(Vector3::new(
            if i & 1 == 0 { -1.0 } else { 1.0 },
            if i & 2 == 0 { -1.0 } else { 1.0 },
            if i & 4 == 0 { -1.0 } else { 1.0 },
        ));
    }
    let colors = vertices.iter().map(|v| shade(&(v / 3f64.sqrt()))).collect();
    let faces = vec![
        [0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6],
        [0, 1, 4], [1, 5, 4], [2, 6, 3], [3, 6, 7],
        [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5],
    ];
    TriangleMesh { vertices, colors, faces }
}

/// Built-in assets, addressed as `toy:<name>` wherever an asset path is accepted.
pub fn by_name(name: &str) -> Option<ReferenceAsset> {
    match name {
        "sphere" => Some(sphere(4096)),
        "cube" => Some(cube(26)),
        "head" => Some(head(4096)),
        "cube-mesh" => ReferenceAsset::from_mesh(cube_mesh(), "a cube mesh").ok(),
        _ => None,
    }
}

pub const NAMES: [&str; 4] = ["sphere", "cube", "head", "cube-mesh"];
