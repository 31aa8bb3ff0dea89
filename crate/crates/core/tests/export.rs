use partafford::error::Error;
use partafford::export::{
    cuboid_mesh, decode_grid, encode_grid, label_color, upsample_trilinear, Mesh, GRID_MAGIC, PALETTE,
};
use partafford::geometry::Cuboid;

#[test]
fn trilinear_keeps_constants_and_linear_fields() {
    let flat = upsample_trilinear(&[0.25; 8], 2, 8).unwrap();
    assert_eq!(flat.len(), 512);
    assert!(flat.iter().all(|&v| (v - 0.25).abs() < 1e-15));

    // linear in the cell index, so interior voxels read the field at their
    // own position in cell units
    let t = 4;
    let res = 16;
    let field = |x: f64, y: f64, z: f64| 2.0 * x + 3.0 * y - z + 1.0;
    let mut cells = Vec::new();
    for x in 0..t {
        for y in 0..t {
            for z in 0..t {
                cells.push(field(x as f64, y as f64, z as f64));
            }
        }
    }
    let up = upsample_trilinear(&cells, t, res).unwrap();
    let coord = |v: usize| ((v as f64 + 0.5) / 4.0 - 0.5).clamp(0.0, 3.0);
    for x in 0..res {
        for y in 0..res {
            for z in 0..res {
                let expected = field(coord(x), coord(y), coord(z));
                assert!((up[(x * res + y) * res + z] - expected).abs() < 1e-12);
            }
        }
    }
    assert!(upsample_trilinear(&cells, 3, res).is_err());
}

#[test]
fn grid_files_round_trip_and_reject_damage() {
    let values: Vec<f64> = (0..2 * 27).map(|i| (i as f64).sin()).collect();
    let bytes = encode_grid(&values, 3, 2).unwrap();
    assert_eq!(&bytes[..4], GRID_MAGIC);
    assert_eq!(bytes.len(), 10 + 8 * values.len());
    let (back, res, channels) = decode_grid(&bytes).unwrap();
    assert_eq!((res, channels), (3, 2));
    assert_eq!(back, values);

    assert!(encode_grid(&values, 3, 3).is_err());
    assert!(matches!(decode_grid(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_grid(&bad), Err(Error::Format(_))));
    let mut newer = bytes.clone();
    newer[4] = 9;
    assert!(matches!(decode_grid(&newer), Err(Error::Version { .. })));
}

#[test]
fn palette_colors_are_distinct() {
    for i in 0..PALETTE.len() {
        for j in 0..i {
            assert_ne!(PALETTE[i], PALETTE[j], "{i} {j}");
        }
    }
    assert_eq!(label_color(200), PALETTE[0]);
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[test]
fn box_faces_are_planar_and_face_outward() {
    let q = [0.9, 0.1, -0.3, 0.2];
    let n = q.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
    let cub = Cuboid::new([1.0, -2.0, 0.5], [1.0, 2.0, 3.0], q.map(|v| v / n)).unwrap();
    let mesh: Mesh = cuboid_mesh(&cub, [1, 2, 3]);
    assert_eq!(mesh.vertices.len(), 8);
    assert_eq!(mesh.faces.len(), 6);
    assert!(mesh.colors.iter().all(|&c| c == [1, 2, 3]));

    let mut normals = Vec::new();
    for f in &mesh.faces {
        let p: Vec<[f64; 3]> = f.iter().map(|&i| mesh.vertices[i]).collect();
        let normal = cross(sub(p[1], p[0]), sub(p[2], p[0]));
        for k in 0..4 {
            assert!(dot(normal, sub(p[k], p[0])).abs() < 1e-9, "non-planar face {f:?}");
        }
        let centroid = [0, 1, 2].map(|a| p.iter().map(|v| v[a]).sum::<f64>() / 4.0);
        assert!(dot(normal, sub(centroid, cub.center)) > 0.0, "inward face {f:?}");
        normals.push(normal);
    }
    let mut corners_used: Vec<usize> = mesh.faces.iter().flatten().copied().collect();
    corners_used.sort();
    assert_eq!(corners_used, (0..8).flat_map(|i| [i, i, i]).collect::<Vec<_>>());

    let ply = mesh.to_ply();
    assert!(ply.contains("element vertex 8\n") && ply.contains("element face 6\n"));
}
