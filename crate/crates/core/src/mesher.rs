//! Zero-isosurface extraction (marching cubes) restricted to observed
//! space, plus 2D TSDF slice export.
//!
//! Extraction never runs on the whole bounding box: cells are kept only
//! where every corner falls inside the endpoint-occupancy mask dilated by
//! one finest voxel. Outside that mask the field is an extrapolation of
//! near-zero features and would hallucinate surfaces at the truncation
//! band boundary.

use crate::error::{Error, Result};
use crate::field::{FieldModel, QueryScratch};
use crate::geom::Point3;
use crate::grid::{FeatureGrid, LatticeKey};
use crate::io::write_atomic;
use crate::mc_tables::{EDGE_TABLE, TRIANGLE_TABLE};
use rayon::prelude::*;
use rustc_hash::FxHashSet;
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }
}

/// Which field to mesh: the static channel or one time slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshMode {
    Static,
    AtFrame(usize),
}

/// The voxel mask within which extraction is allowed.
#[derive(Debug, Clone)]
pub struct MeshingDomain {
    mask: FxHashSet<LatticeKey>,
    voxel_size: f64,
}

impl MeshingDomain {
    /// Endpoint occupancy dilated by one finest voxel in all directions.
    pub fn from_occupancy(grid: &FeatureGrid) -> MeshingDomain {
        let voxel_size = grid.levels[0].voxel_size;
        let mut mask = FxHashSet::default();
        for &(x, y, z) in grid.occupancy() {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        mask.insert((x + dx, y + dy, z + dz));
                    }
                }
            }
        }
        MeshingDomain { mask, voxel_size }
    }

    pub fn from_keys(keys: impl IntoIterator<Item = LatticeKey>, voxel_size: f64) -> MeshingDomain {
        MeshingDomain {
            mask: keys.into_iter().collect(),
            voxel_size,
        }
    }

    /// Axis-aligned box covering every voxel wholly inside the domain,
    /// in meters.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        if self.mask.is_empty() {
            return None;
        }
        let mut min = (i32::MAX, i32::MAX, i32::MAX);
        let mut max = (i32::MIN, i32::MIN, i32::MIN);
        for &(x, y, z) in &self.mask {
            min = (min.0.min(x), min.1.min(y), min.2.min(z));
            max = (max.0.max(x), max.1.max(y), max.2.max(z));
        }
        let vs = self.voxel_size;
        Some((
            Point3::new(min.0 as f64 * vs, min.1 as f64 * vs, min.2 as f64 * vs),
            Point3::new(
                (max.0 + 1) as f64 * vs,
                (max.1 + 1) as f64 * vs,
                (max.2 + 1) as f64 * vs,
            ),
        ))
    }

    /// Membership in the closed union of mask voxels: points exactly on a
    /// voxel face belong to both neighbors, so either one qualifies.
    #[inline]
    pub fn contains(&self, p: Point3) -> bool {
        let vs = self.voxel_size;
        let coords = [p.x / vs, p.y / vs, p.z / vs];
        let mut base = [0i32; 3];
        let mut on_plane = [false; 3];
        for a in 0..3 {
            let f = coords[a].floor();
            base[a] = f as i32;
            on_plane[a] = coords[a] == f;
        }
        for dx in 0..=on_plane[0] as i32 {
            for dy in 0..=on_plane[1] as i32 {
                for dz in 0..=on_plane[2] as i32 {
                    if self
                        .mask
                        .contains(&(base[0] - dx, base[1] - dy, base[2] - dz))
                    {
                        return true;
                    }
                }
            }
        }
        false
    }
}

/// Extracts the zero level set of the chosen field over the model's
/// observed space, with `cell_size` as the sampling lattice spacing.
pub fn extract_mesh(model: &FieldModel, mode: MeshMode, cell_size: f64) -> Result<TriangleMesh> {
    if let MeshMode::AtFrame(t) = mode {
        if t >= model.frames() {
            return Err(Error::InvalidInput(format!(
                "frame {t} out of range 0..{}",
                model.frames()
            )));
        }
    }
    let domain = MeshingDomain::from_occupancy(&model.grid);
    let eval = |p: Point3, scratch: &mut QueryScratch| match mode {
        MeshMode::Static => model.forward_static(p, scratch),
        MeshMode::AtFrame(t) => model.forward(p, t, scratch),
    };
    Ok(extract_isosurface(
        &eval,
        &|| QueryScratch::for_model(model),
        &domain,
        cell_size,
    ))
}

/// Marching cubes at iso-value 0 over any scalar field. `init` builds the
/// per-worker evaluation scratch (use `()` for pure closures).
pub fn extract_isosurface<S: Send>(
    eval: &(impl Fn(Point3, &mut S) -> f64 + Sync),
    init: &(impl Fn() -> S + Sync),
    domain: &MeshingDomain,
    cell_size: f64,
) -> TriangleMesh {
    assert!(cell_size > 0.0);
    let Some((lo, hi)) = domain.bounds() else {
        return TriangleMesh::default();
    };
    let nx = ((hi.x - lo.x) / cell_size).ceil() as usize + 1;
    let ny = ((hi.y - lo.y) / cell_size).ceil() as usize + 1;
    let nz = ((hi.z - lo.z) / cell_size).ceil() as usize + 1;
    let node_pos = |i: usize, j: usize, k: usize| {
        Point3::new(
            lo.x + i as f64 * cell_size,
            lo.y + j as f64 * cell_size,
            lo.z + k as f64 * cell_size,
        )
    };

    // sample the field at every lattice node inside the domain; nodes
    // outside stay NaN and poison the cells that touch them
    let mut values = vec![f64::NAN; nx * ny * nz];
    values
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(k, slab)| {
            let mut scratch = init();
            for j in 0..ny {
                for i in 0..nx {
                    let p = node_pos(i, j, k);
                    if domain.contains(p) {
                        slab[j * nx + i] = eval(p, &mut scratch);
                    }
                }
            }
        });
    let value_at = |i: usize, j: usize, k: usize| values[(k * ny + j) * nx + i];

    // corner order and edge pairs follow the standard tables
    const CORNER: [(usize, usize, usize); 8] = [
        (0, 0, 0),
        (1, 0, 0),
        (1, 1, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 0, 1),
        (1, 1, 1),
        (0, 1, 1),
    ];
    const EDGE: [(usize, usize); 12] = [
        (0, 1),
        (1, 2),
        (2, 3),
        (3, 0),
        (4, 5),
        (5, 6),
        (6, 7),
        (7, 4),
        (0, 4),
        (1, 5),
        (2, 6),
        (3, 7),
    ];

    let mut mesh = TriangleMesh::default();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut corner_val = [0.0f64; 8];
                let mut skip = false;
                let mut case = 0usize;
                for (c, &(dx, dy, dz)) in CORNER.iter().enumerate() {
                    let v = value_at(i + dx, j + dy, k + dz);
                    if v.is_nan() {
                        skip = true;
                        break;
                    }
                    corner_val[c] = v;
                    if v < 0.0 {
                        case |= 1 << c;
                    }
                }
                if skip || EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut edge_vertex = [Point3::origin(); 12];
                for (e, &(a, b)) in EDGE.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (va, vb) = (corner_val[a], corner_val[b]);
                    let t = if (vb - va).abs() < 1e-12 {
                        0.5
                    } else {
                        (0.0 - va) / (vb - va)
                    };
                    let pa = node_pos(i + CORNER[a].0, j + CORNER[a].1, k + CORNER[a].2);
                    let pb = node_pos(i + CORNER[b].0, j + CORNER[b].1, k + CORNER[b].2);
                    edge_vertex[e] = pa + t * (pb - pa);
                }
                let tri = &TRIANGLE_TABLE[case];
                let mut n = 0;
                while tri[n] >= 0 {
                    let p0 = edge_vertex[tri[n] as usize];
                    let p1 = edge_vertex[tri[n + 1] as usize];
                    let p2 = edge_vertex[tri[n + 2] as usize];
                    if triangle_area(p0, p1, p2) > 1e-12 {
                        let base = mesh.vertices.len() as u32;
                        mesh.vertices.extend_from_slice(&[p0, p1, p2]);
                        mesh.triangles.push([base, base + 1, base + 2]);
                    }
                    n += 3;
                }
            }
        }
    }
    mesh
}

fn triangle_area(a: Point3, b: Point3, c: Point3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Writes a 2D grid of clamped field values on an axis-aligned plane as
/// CSV with a two-line header (axis, coordinate, cell size, clamp; then
/// grid origin and shape).
pub fn export_slice(
    model: &FieldModel,
    axis: SliceAxis,
    coordinate: f64,
    mode: MeshMode,
    cell_size: f64,
    clamp: f64,
    path: &Path,
) -> Result<()> {
    if clamp <= 0.0 {
        return Err(Error::InvalidInput("clamp must be positive".into()));
    }
    if let MeshMode::AtFrame(t) = mode {
        if t >= model.frames() {
            return Err(Error::InvalidInput(format!(
                "frame {t} out of range 0..{}",
                model.frames()
            )));
        }
    }
    let domain = MeshingDomain::from_occupancy(&model.grid);
    let Some((lo, hi)) = domain.bounds() else {
        return Err(Error::InvalidInput("empty occupancy, nothing to slice".into()));
    };
    let (u_axis, v_axis) = match axis {
        SliceAxis::X => (1, 2),
        SliceAxis::Y => (0, 2),
        SliceAxis::Z => (0, 1),
    };
    let (u0, u1) = (lo[u_axis], hi[u_axis]);
    let (v0, v1) = (lo[v_axis], hi[v_axis]);
    let nu = ((u1 - u0) / cell_size).ceil() as usize + 1;
    let nv = ((v1 - v0) / cell_size).ceil() as usize + 1;

    let mut scratch = QueryScratch::for_model(model);
    let mut out = String::new();
    out.push_str(&format!(
        "# axis={} coordinate={coordinate} cell_size={cell_size} clamp={clamp}\n",
        axis.name()
    ));
    out.push_str(&format!("# origin_u={u0} origin_v={v0} cols={nu} rows={nv}\n"));
    for jv in 0..nv {
        let mut row = Vec::with_capacity(nu);
        for iu in 0..nu {
            let mut p = Point3::origin();
            p[axis.index()] = coordinate;
            p[u_axis] = u0 + iu as f64 * cell_size;
            p[v_axis] = v0 + jv as f64 * cell_size;
            let value = match mode {
                MeshMode::Static => model.forward_static(p, &mut scratch),
                MeshMode::AtFrame(t) => model.forward(p, t, &mut scratch),
            };
            row.push(format!("{}", value.clamp(-clamp, clamp)));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceAxis {
    X,
    Y,
    Z,
}

impl SliceAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SliceAxis::X => "x",
            SliceAxis::Y => "y",
            SliceAxis::Z => "z",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            SliceAxis::X => 0,
            SliceAxis::Y => 1,
            SliceAxis::Z => 2,
        }
    }
}

impl std::str::FromStr for SliceAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<SliceAxis> {
        match s {
            "x" | "X" => Ok(SliceAxis::X),
            "y" | "Y" => Ok(SliceAxis::Y),
            "z" | "Z" => Ok(SliceAxis::Z),
            other => Err(Error::InvalidInput(format!("unknown axis `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_domain(extent: i32, voxel_size: f64) -> MeshingDomain {
        let mut keys = Vec::new();
        for x in -extent..extent {
            for y in -extent..extent {
                for z in -extent..extent {
                    keys.push((x, y, z));
                }
            }
        }
        MeshingDomain::from_keys(keys, voxel_size)
    }

    fn from_fn(f: impl Fn(Point3) -> f64 + Sync, domain: &MeshingDomain, cell: f64) -> TriangleMesh {
        extract_isosurface(&|p, _: &mut ()| f(p), &|| (), domain, cell)
    }

    #[test]
    fn positive_field_gives_empty_mesh() {
        let domain = cube_domain(2, 1.0);
        let mesh = from_fn(|_| 1.0, &domain, 0.5);
        assert!(mesh.is_empty());
    }

    #[test]
    fn single_negative_corner_gives_one_triangle() {
        // one lattice cell; exactly corner (0,0,0) negative -> MC case 1
        let domain = MeshingDomain::from_keys([(0, 0, 0)], 1.0);
        let mesh = from_fn(
            |p| {
                if p.coords.norm() < 1e-9 {
                    -1.0
                } else {
                    1.0
                }
            },
            &domain,
            1.0,
        );
        assert_eq!(mesh.triangles.len(), 1);
    }

    #[test]
    fn sphere_vertices_lie_near_radius() {
        let domain = cube_domain(2, 1.0);
        let cell = 0.05;
        let mesh = from_fn(|p| p.coords.norm() - 1.0, &domain, cell);
        assert!(!mesh.is_empty());
        let diag = cell * 3.0f64.sqrt();
        for v in &mesh.vertices {
            assert!(
                (v.coords.norm() - 1.0).abs() <= diag,
                "vertex {v} off the sphere"
            );
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let domain = cube_domain(2, 1.0);
        let a = from_fn(|p| p.coords.norm() - 0.8, &domain, 0.21);
        let b = from_fn(|p| p.coords.norm() - 0.8, &domain, 0.21);
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.triangles, b.triangles);
    }

    #[test]
    fn no_degenerate_triangles() {
        let domain = cube_domain(2, 1.0);
        let mesh = from_fn(|p| p.coords.norm() - 0.94, &domain, 0.13);
        for t in &mesh.triangles {
            let area = triangle_area(
                mesh.vertices[t[0] as usize],
                mesh.vertices[t[1] as usize],
                mesh.vertices[t[2] as usize],
            );
            assert!(area > 1e-12);
        }
    }

    #[test]
    fn masked_cells_are_skipped() {
        // domain covers only x >= 0 half of the sphere
        let mut keys = Vec::new();
        for x in 0..2 {
            for y in -2..2 {
                for z in -2..2 {
                    keys.push((x, y, z));
                }
            }
        }
        let domain = MeshingDomain::from_keys(keys, 1.0);
        let mesh = from_fn(|p| p.coords.norm() - 1.0, &domain, 0.1);
        for v in &mesh.vertices {
            assert!(v.x >= -0.11, "vertex escaped the mask: {v}");
        }
    }
}
