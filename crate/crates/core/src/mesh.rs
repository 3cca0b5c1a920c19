//! Structured Kuhn tetrahedral meshes of axis-aligned boxes.

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::geometry::{Aabb, Vec3};

/// Box domain given by its min/max corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoxDomain {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for k in 0..3 {
            if !(min[k].is_finite() && max[k].is_finite()) || max[k] - min[k] <= 0.0 {
                return Err(ForgeError::InvalidInput(format!(
                    "degenerate box along axis {k}: [{}, {}]",
                    min[k], max[k]
                )));
            }
        }
        Ok(BoxDomain { min, max })
    }

    pub fn unit() -> Self {
        BoxDomain {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    pub fn extent(&self, k: usize) -> f64 {
        self.max[k] - self.min[k]
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|k| self.extent(k)).product()
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::new(self.min, self.max)
    }

    /// Box shrunk by `width` on every side.
    pub fn shrunk(&self, width: f64) -> Aabb {
        let mut b = self.aabb();
        for k in 0..3 {
            b.min[k] += width;
            b.max[k] -= width;
        }
        b
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        self.aabb().contains(x)
    }

    /// Euclidean-free distance to the nearest face (max-norm collar distance).
    pub fn face_distance(&self, x: &Vec3) -> f64 {
        (0..3)
            .map(|k| (x[k] - self.min[k]).min(self.max[k] - x[k]))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Boundary triangle with its outward unit normal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFacet {
    pub nodes: [usize; 3],
    pub normal: [f64; 3],
}

/// Kuhn (Freudenthal) mesh: each grid cell split into six tetrahedra along
/// the monotone lattice paths from its lower to its upper corner.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub tets: Vec<[usize; 4]>,
    pub boundary_facets: Vec<BoundaryFacet>,
    pub resolution: usize,
    pub domain: BoxDomain,
    on_boundary: Vec<bool>,
}

const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

fn is_odd(p: &[usize; 3]) -> bool {
    let mut inv = 0;
    for i in 0..3 {
        for j in i + 1..3 {
            if p[i] > p[j] {
                inv += 1;
            }
        }
    }
    inv % 2 == 1
}

/// Location of a point: tetrahedron index and barycentric coordinates in the
/// stored vertex order.
#[derive(Clone, Copy, Debug)]
pub struct Location {
    pub tet: usize,
    pub bary: [f64; 4],
}

#[derive(Serialize)]
struct MeshDump<'a> {
    vertices: Vec<[f64; 3]>,
    tets: &'a [[usize; 4]],
    boundary_facets: &'a [BoundaryFacet],
}

pub fn build_box_mesh(resolution: usize, domain: BoxDomain) -> Result<Mesh> {
    if resolution == 0 {
        return Err(ForgeError::InvalidInput("resolution must be positive".into()));
    }
    let domain = BoxDomain::new(domain.min, domain.max)?;
    let r = resolution;
    let n1 = r + 1;
    let h: [f64; 3] = [
        domain.extent(0) / r as f64,
        domain.extent(1) / r as f64,
        domain.extent(2) / r as f64,
    ];
    let mut vertices = Vec::with_capacity(n1 * n1 * n1);
    let mut on_boundary = Vec::with_capacity(n1 * n1 * n1);
    for k in 0..n1 {
        for j in 0..n1 {
            for i in 0..n1 {
                let idx = [i, j, k];
                let mut x = Vec3::zeros();
                for a in 0..3 {
                    x[a] = if idx[a] == r {
                        domain.max[a]
                    } else {
                        domain.min[a] + idx[a] as f64 * h[a]
                    };
                }
                vertices.push(x);
                on_boundary.push(idx.iter().any(|&t| t == 0 || t == r));
            }
        }
    }
    let vid = |i: usize, j: usize, k: usize| i + n1 * (j + n1 * k);
    let mut tets = Vec::with_capacity(6 * r * r * r);
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                for p in PERMUTATIONS.iter() {
                    let mut c = [i, j, k];
                    let mut t = [0usize; 4];
                    t[0] = vid(c[0], c[1], c[2]);
                    for s in 0..3 {
                        c[p[s]] += 1;
                        t[s + 1] = vid(c[0], c[1], c[2]);
                    }
                    if is_odd(p) {
                        t.swap(2, 3);
                    }
                    tets.push(t);
                }
            }
        }
    }
    let mut mesh = Mesh {
        vertices,
        tets,
        boundary_facets: Vec::new(),
        resolution,
        domain,
        on_boundary,
    };
    mesh.boundary_facets = mesh.collect_boundary_facets();
    Ok(mesh)
}

const FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];

impl Mesh {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    /// Grid spacing along axis `k`.
    pub fn spacing(&self, k: usize) -> f64 {
        self.domain.extent(k) / self.resolution as f64
    }

    /// Largest grid spacing.
    pub fn h(&self) -> f64 {
        (0..3).map(|k| self.spacing(k)).fold(0.0, f64::max)
    }

    pub fn grid_index(&self, v: usize) -> [usize; 3] {
        let n1 = self.resolution + 1;
        [v % n1, (v / n1) % n1, v / (n1 * n1)]
    }

    pub fn vertex_id(&self, i: usize, j: usize, k: usize) -> usize {
        let n1 = self.resolution + 1;
        i + n1 * (j + n1 * k)
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.on_boundary[v]
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.num_vertices()).filter(|&v| self.on_boundary[v]).collect()
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.num_vertices()).filter(|&v| !self.on_boundary[v]).collect()
    }

    /// Vertices whose grid distance to every face exceeds `layers`.
    pub fn collar_interior_nodes(&self, layers: usize) -> Result<Vec<usize>> {
        let r = self.resolution;
        if 2 * layers >= r {
            return Err(ForgeError::InvalidInput(format!(
                "collar of {layers} layers exhausts a resolution-{r} mesh"
            )));
        }
        let nodes: Vec<usize> = (0..self.num_vertices())
            .filter(|&v| {
                self.grid_index(v)
                    .iter()
                    .all(|&i| i.min(r - i) > layers)
            })
            .collect();
        if nodes.is_empty() {
            return Err(ForgeError::InvalidInput(format!(
                "collar of {layers} layers leaves no interior node"
            )));
        }
        Ok(nodes)
    }

    pub fn tet_vertices(&self, t: usize) -> [Vec3; 4] {
        let tet = &self.tets[t];
        [
            self.vertices[tet[0]],
            self.vertices[tet[1]],
            self.vertices[tet[2]],
            self.vertices[tet[3]],
        ]
    }

    pub fn signed_volume(&self, t: usize) -> f64 {
        let p = self.tet_vertices(t);
        (p[1] - p[0]).dot(&(p[2] - p[0]).cross(&(p[3] - p[0]))) / 6.0
    }

    /// Gradients of the four barycentric coordinates and the volume.
    pub fn tet_gradients(&self, t: usize) -> ([Vec3; 4], f64) {
        let p = self.tet_vertices(t);
        let e1 = p[1] - p[0];
        let e2 = p[2] - p[0];
        let e3 = p[3] - p[0];
        let det = e1.dot(&e2.cross(&e3));
        let g1 = e2.cross(&e3) / det;
        let g2 = e3.cross(&e1) / det;
        let g3 = e1.cross(&e2) / det;
        let g0 = -(g1 + g2 + g3);
        ([g0, g1, g2, g3], det.abs() / 6.0)
    }

    /// Physical point from barycentric coordinates in tetrahedron `t`.
    pub fn point(&self, t: usize, bary: &[f64; 4]) -> Vec3 {
        let p = self.tet_vertices(t);
        p[0] * bary[0] + p[1] * bary[1] + p[2] * bary[2] + p[3] * bary[3]
    }

    /// Locates `x` (clamped to the box) in the Kuhn structure.
    pub fn locate(&self, x: &Vec3) -> Location {
        let r = self.resolution;
        let mut cell = [0usize; 3];
        let mut xi = [0.0f64; 3];
        for a in 0..3 {
            let s = ((x[a] - self.domain.min[a]) / self.spacing(a)).clamp(0.0, r as f64);
            let c = (s.floor() as usize).min(r - 1);
            cell[a] = c;
            xi[a] = (s - c as f64).clamp(0.0, 1.0);
        }
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| xi[b].partial_cmp(&xi[a]).unwrap().then(a.cmp(&b)));
        let pidx = PERMUTATIONS.iter().position(|p| *p == order).unwrap();
        let tet = 6 * (cell[0] + r * (cell[1] + r * cell[2])) + pidx;
        let mut bary = [
            1.0 - xi[order[0]],
            xi[order[0]] - xi[order[1]],
            xi[order[1]] - xi[order[2]],
            xi[order[2]],
        ];
        if is_odd(&order) {
            bary.swap(2, 3);
        }
        Location { tet, bary }
    }

    fn collect_boundary_facets(&self) -> Vec<BoundaryFacet> {
        let r = self.resolution;
        let mut out = Vec::with_capacity(12 * r * r);
        for tet in &self.tets {
            for face in FACES.iter() {
                let nodes = [tet[face[0]], tet[face[1]], tet[face[2]]];
                let idx: Vec<[usize; 3]> = nodes.iter().map(|&v| self.grid_index(v)).collect();
                for a in 0..3 {
                    for (value, sign) in [(0usize, -1.0f64), (r, 1.0)] {
                        if idx.iter().all(|g| g[a] == value) {
                            let mut normal = [0.0; 3];
                            normal[a] = sign;
                            out.push(BoundaryFacet { nodes, normal });
                        }
                    }
                }
            }
        }
        out
    }

    /// JSON dump with `vertices`, `tets`, `boundary_facets`.
    pub fn to_json(&self) -> Result<String> {
        let dump = MeshDump {
            vertices: self.vertices.iter().map(|v| [v[0], v[1], v[2]]).collect(),
            tets: &self.tets,
            boundary_facets: &self.boundary_facets,
        };
        Ok(serde_json::to_string(&dump)?)
    }
}
