//! Synthetic reference shapes (sphere, cube, perturbed sphere) used by the
//! benchmark harness and the test suites. All generators are deterministic.

use crate::dataprep::{fibonacci_directions, SurfacePointCloud, TriangleMesh};
use crate::geometry::Point3;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Icosphere approximation of the unit sphere.
pub fn unit_sphere_mesh(subdivisions: u32) -> TriangleMesh {
    // Icosahedron vertices.
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
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
        let mut midpoints = std::collections::HashMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoints.entry(key).or_insert_with(|| {
                    verts.push((verts[a] + verts[b]).normalize());
                    verts.len() - 1
                });
            }
            next_faces.push([f[0], mid[0], mid[2]]);
            next_faces.push([f[1], mid[1], mid[0]]);
            next_faces.push([f[2], mid[2], mid[1]]);
            next_faces.push([mid[0], mid[1], mid[2]]);
        }
        faces = next_faces;
    }

    let vertices = verts.into_iter().map(Point3::from_vector).collect();
    TriangleMesh::new(vertices, faces).expect("icosphere construction is valid")
}

/// Axis-aligned cube of the given half extent, 12 triangles.
pub fn cube_mesh(half: f64) -> TriangleMesh {
    let h = half;
    let vertices = vec![
        Point3::new(-h, -h, -h),
        Point3::new(h, -h, -h),
        Point3::new(h, h, -h),
        Point3::new(-h, h, -h),
        Point3::new(-h, -h, h),
        Point3::new(h, -h, h),
        Point3::new(h, h, h),
        Point3::new(-h, h, h),
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2], // z = -h
        [4, 5, 6],
        [4, 6, 7], // z = +h
        [0, 1, 5],
        [0, 5, 4], // y = -h
        [2, 3, 7],
        [2, 7, 6], // y = +h
        [1, 2, 6],
        [1, 6, 5], // x = +h
        [0, 4, 7],
        [0, 7, 3], // x = -h
    ];
    TriangleMesh::new(vertices, faces).expect("cube construction is valid")
}

/// `n` near-uniform points on the unit sphere (Fibonacci lattice).
pub fn sphere_cloud(n: usize) -> SurfacePointCloud {
    SurfacePointCloud::new(
        fibonacci_directions(n).into_iter().map(Point3::from_vector).collect(),
    )
}

/// `n` points on a smooth star-shaped perturbation of the unit sphere:
/// `r(u) = 1 + amplitude * f(u)` with `f` a fixed low-order angular field.
pub fn perturbed_sphere_cloud(n: usize, amplitude: f64) -> SurfacePointCloud {
    SurfacePointCloud::new(
        fibonacci_directions(n)
            .into_iter()
            .map(|u| {
                let f = 0.5 * (3.0 * u.z * u.z - 1.0) + 0.8 * u.x * u.y + 0.4 * u.y * u.z;
                Point3::from_vector(u * (1.0 + amplitude * f))
            })
            .collect(),
    )
}

/// `n` points sampled uniformly over the surface of a cube with the given
/// half extent. Deterministic per seed.
pub fn cube_cloud(n: usize, half: f64, seed: u64) -> SurfacePointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let face = rng.gen_range(0..6u8);
            let a = rng.gen_range(-half..half);
            let b = rng.gen_range(-half..half);
            match face {
                0 => Point3::new(half, a, b),
                1 => Point3::new(-half, a, b),
                2 => Point3::new(a, half, b),
                3 => Point3::new(a, -half, b),
                4 => Point3::new(a, b, half),
                _ => Point3::new(a, b, -half),
            }
        })
        .collect();
    SurfacePointCloud::new(points)
}
