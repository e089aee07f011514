//! Two-dimensional conforming triangulations with tagged boundaries.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = Vector2<f64>;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid mesh: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BoundaryTag {
    Wall,
    Gate1,
    Gate2,
    Gate3,
}

impl BoundaryTag {
    pub const GATES: [BoundaryTag; 3] = [BoundaryTag::Gate1, BoundaryTag::Gate2, BoundaryTag::Gate3];

    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryTag::Wall => "wall",
            BoundaryTag::Gate1 => "gate1",
            BoundaryTag::Gate2 => "gate2",
            BoundaryTag::Gate3 => "gate3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "wall" => Some(BoundaryTag::Wall),
            "gate1" => Some(BoundaryTag::Gate1),
            "gate2" => Some(BoundaryTag::Gate2),
            "gate3" => Some(BoundaryTag::Gate3),
            _ => None,
        }
    }

    pub fn is_gate(self) -> bool {
        self != BoundaryTag::Wall
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary: Vec<BoundaryEdge>,
}

/// Parameters of the T-joint cross-section: a horizontal yoke
/// `[-yoke_halflength, yoke_halflength] x [0, limb_width]` on top of a
/// vertical limb `[-limb_width/2, limb_width/2] x [-limb_length, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TJointParams {
    pub limb_width: f64,
    pub yoke_halflength: f64,
    pub limb_length: f64,
    /// Upper bound on the edge length of the initial mesh.
    pub target_h: f64,
}

impl Default for TJointParams {
    fn default() -> Self {
        Self {
            limb_width: 1.0,
            yoke_halflength: 1.5,
            limb_length: 1.5,
            target_h: 0.5,
        }
    }
}

impl TJointParams {
    pub fn contains(&self, p: &Point) -> bool {
        let eps = 1e-12 * self.yoke_halflength.max(self.limb_length);
        let yoke = p.x.abs() <= self.yoke_halflength + eps && p.y >= -eps && p.y <= self.limb_width + eps;
        let limb = p.x.abs() <= 0.5 * self.limb_width + eps && p.y <= eps && p.y >= -self.limb_length - eps;
        yoke || limb
    }
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Breakpoints of `[a, b]` split into the fewest equal parts of length `<= h`.
fn subdivide(a: f64, b: f64, h: f64) -> Vec<f64> {
    let n = ((b - a) / h - 1e-9).ceil().max(1.0) as usize;
    (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect()
}

/// Structured triangulation of the T-joint. Every axis-aligned cell of a
/// tensor grid fitted to the corners is cut along its rising diagonal; the
/// cell size is chosen so that the diagonal does not exceed `target_h`.
pub fn build_tjoint(params: &TJointParams) -> Result<TriMesh, MeshError> {
    let TJointParams {
        limb_width: w,
        yoke_halflength: yh,
        limb_length: ll,
        target_h,
    } = *params;
    let positive = [w, yh, ll, target_h].iter().all(|v| v.is_finite() && *v > 0.0);
    if !positive {
        return Err(MeshError::Geometry(format!("parameters must be positive: {params:?}")));
    }
    if w > 2.0 * yh {
        return Err(MeshError::Geometry(format!(
            "limb width {w} exceeds yoke length {}",
            2.0 * yh
        )));
    }
    let cell = target_h / std::f64::consts::SQRT_2;

    let mut xs = Vec::new();
    let xbreaks = [-yh, -0.5 * w, 0.5 * w, yh];
    for pair in xbreaks.windows(2) {
        if pair[1] - pair[0] <= 0.0 {
            continue;
        }
        let seg = subdivide(pair[0], pair[1], cell);
        if xs.is_empty() {
            xs.extend(seg);
        } else {
            xs.extend(&seg[1..]);
        }
    }
    let mut ys = subdivide(-ll, 0.0, cell);
    ys.extend(&subdivide(0.0, w, cell)[1..]);

    let (nx, ny) = (xs.len(), ys.len());
    let inside = |i: usize, j: usize| {
        let c = Point::new(0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1]));
        params.contains(&c)
    };

    let mut index = vec![usize::MAX; nx * ny];
    let mut vertices = Vec::new();
    let mut id = |i: usize, j: usize, vertices: &mut Vec<Point>| {
        let slot = &mut index[j * nx + i];
        if *slot == usize::MAX {
            *slot = vertices.len();
            vertices.push(Point::new(xs[i], ys[j]));
        }
        *slot
    };

    let mut triangles = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            if !inside(i, j) {
                continue;
            }
            let a = id(i, j, &mut vertices);
            let b = id(i + 1, j, &mut vertices);
            let c = id(i + 1, j + 1, &mut vertices);
            let d = id(i, j + 1, &mut vertices);
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }

    let eps = 1e-9 * cell;
    let boundary = boundary_edges(&triangles)
        .into_iter()
        .map(|[a, b]| {
            let (p, q) = (vertices[a], vertices[b]);
            let tag = if (p.x + yh).abs() < eps && (q.x + yh).abs() < eps {
                BoundaryTag::Gate1
            } else if (p.x - yh).abs() < eps && (q.x - yh).abs() < eps {
                BoundaryTag::Gate2
            } else if (p.y + ll).abs() < eps && (q.y + ll).abs() < eps {
                BoundaryTag::Gate3
            } else {
                BoundaryTag::Wall
            };
            BoundaryEdge { vertices: [a, b], tag }
        })
        .collect();

    let mesh = TriMesh {
        vertices,
        triangles,
        boundary,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Edges used by exactly one triangle, oriented as in that triangle.
fn boundary_edges(triangles: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let mut count: HashMap<(usize, usize), (usize, [usize; 2])> = HashMap::new();
    let mut order = Vec::new();
    for t in triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            let key = edge_key(a, b);
            let entry = count.entry(key).or_insert_with(|| {
                order.push(key);
                (0, [a, b])
            });
            entry.0 += 1;
        }
    }
    order
        .into_iter()
        .filter_map(|k| {
            let (n, e) = count[&k];
            (n == 1).then_some(e)
        })
        .collect()
}

impl TriMesh {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Signed area of triangle `t`.
    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (p, q, r) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * ((q - p).perp(&(r - p)))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_triangles()).map(|t| self.area(t)).sum()
    }

    pub fn barycenter(&self, t: usize) -> Point {
        let [a, b, c] = self.triangles[t];
        (self.vertices[a] + self.vertices[b] + self.vertices[c]) / 3.0
    }

    pub fn num_edges(&self) -> usize {
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                edges.insert(edge_key(t[k], t[(k + 1) % 3]));
            }
        }
        edges.len()
    }

    pub fn boundary_length(&self, tag: BoundaryTag) -> f64 {
        self.boundary
            .iter()
            .filter(|e| e.tag == tag)
            .map(|e| (self.vertices[e.vertices[0]] - self.vertices[e.vertices[1]]).norm())
            .sum()
    }

    /// Sorted, deduplicated vertices touching edges with `tag`.
    pub fn tagged_vertices(&self, tag: BoundaryTag) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .boundary
            .iter()
            .filter(|e| e.tag == tag)
            .flat_map(|e| e.vertices)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Checks conformity, orientation, boundary tagging and gate connectivity.
    pub fn validate(&self) -> Result<(), MeshError> {
        let nv = self.vertices.len();
        if self.triangles.is_empty() {
            return Err(MeshError::Validation("mesh has no triangles".into()));
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= nv) {
                return Err(MeshError::Validation(format!("triangle {t} references a missing vertex")));
            }
            if !(self.area(t) > 0.0) {
                return Err(MeshError::Validation(format!("triangle {t} is not positively oriented")));
            }
        }

        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *count.entry(edge_key(t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        if let Some((e, n)) = count.iter().find(|(_, &n)| n > 2) {
            return Err(MeshError::Validation(format!("edge {e:?} shared by {n} triangles")));
        }

        let mut tagged: HashMap<(usize, usize), BoundaryTag> = HashMap::new();
        for e in &self.boundary {
            let key = edge_key(e.vertices[0], e.vertices[1]);
            if count.get(&key) != Some(&1) {
                return Err(MeshError::Validation(format!(
                    "tagged edge {:?} is not a boundary edge",
                    e.vertices
                )));
            }
            if tagged.insert(key, e.tag).is_some() {
                return Err(MeshError::Validation(format!("edge {:?} tagged twice", e.vertices)));
            }
        }
        if let Some((e, _)) = count.iter().find(|(k, &n)| n == 1 && !tagged.contains_key(k)) {
            return Err(MeshError::Validation(format!("boundary edge {e:?} carries no tag")));
        }

        for tag in BoundaryTag::GATES {
            let edges: Vec<[usize; 2]> = self
                .boundary
                .iter()
                .filter(|e| e.tag == tag)
                .map(|e| e.vertices)
                .collect();
            if !edges.is_empty() && !edges_connected(&edges) {
                return Err(MeshError::Validation(format!("{} is not connected", tag.as_str())));
            }
        }
        Ok(())
    }

    /// Splits every triangle into four through its edge midpoints.
    pub fn refine_uniform(&self) -> TriMesh {
        let mut vertices = self.vertices.clone();
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<Point>| {
            *midpoint.entry(edge_key(a, b)).or_insert_with(|| {
                vertices.push(0.5 * (vertices[a] + vertices[b]));
                vertices.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for &[a, b, c] in &self.triangles {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            triangles.push([a, ab, ca]);
            triangles.push([ab, b, bc]);
            triangles.push([ca, bc, c]);
            triangles.push([ab, bc, ca]);
        }
        let boundary = self
            .boundary
            .iter()
            .flat_map(|e| {
                let [a, b] = e.vertices;
                let m = mid(a, b, &mut vertices);
                [
                    BoundaryEdge { vertices: [a, m], tag: e.tag },
                    BoundaryEdge { vertices: [m, b], tag: e.tag },
                ]
            })
            .collect();
        let mesh = TriMesh {
            vertices,
            triangles,
            boundary,
        };
        debug_assert!(mesh.validate().is_ok());
        mesh
    }

    pub fn refine_times(&self, levels: usize) -> TriMesh {
        let mut mesh = self.clone();
        for _ in 0..levels {
            mesh = mesh.refine_uniform();
        }
        mesh
    }

    /// Index of a triangle containing `p`, if any.
    pub fn locate(&self, p: &Point) -> Option<usize> {
        (0..self.num_triangles()).find(|&t| {
            let [a, b, c] = self.triangles[t];
            let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
            let area = self.area(t);
            let tol = -1e-12 * area;
            let l0 = 0.5 * (pb - p).perp(&(pc - p));
            let l1 = 0.5 * (pc - p).perp(&(pa - p));
            let l2 = 0.5 * (pa - p).perp(&(pb - p));
            l0 >= tol && l1 >= tol && l2 >= tol
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("trimesh2d v1\n");
        let _ = writeln!(s, "vertices {}", self.vertices.len());
        for p in &self.vertices {
            let _ = writeln!(s, "{:?} {:?}", p.x, p.y);
        }
        let _ = writeln!(s, "triangles {}", self.triangles.len());
        for [a, b, c] in &self.triangles {
            let _ = writeln!(s, "{a} {b} {c}");
        }
        let _ = writeln!(s, "boundary {}", self.boundary.len());
        for e in &self.boundary {
            let _ = writeln!(s, "{} {} {}", e.vertices[0], e.vertices[1], e.tag.as_str());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<TriMesh, MeshError> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let last_line = text.lines().count();
        let mut cursor = 0usize;
        let mut next = |what: &str| -> Result<(usize, &str), MeshError> {
            let r = lines.get(cursor).copied().ok_or_else(|| MeshError::Parse {
                line: last_line,
                message: format!("unexpected end of file, expected {what}"),
            });
            cursor += 1;
            r
        };
        let perr = |line: usize, message: String| MeshError::Parse { line, message };

        let (ln, header) = next("header")?;
        if header.split_whitespace().collect::<Vec<_>>() != ["trimesh2d", "v1"] {
            return Err(perr(ln, format!("bad header '{header}'")));
        }

        let section = |name: &str, (ln, l): (usize, &str)| -> Result<usize, MeshError> {
            let mut it = l.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(k), Some(n), None) if k == name => n
                    .parse::<usize>()
                    .map_err(|_| perr(ln, format!("bad count '{n}'"))),
                _ => Err(perr(ln, format!("expected '{name} <count>'"))),
            }
        };

        let nv = section("vertices", next("vertices")?)?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, l) = next("vertex")?;
            let f: Vec<f64> = l
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| perr(ln, format!("bad coordinate: {e}")))?;
            if f.len() != 2 || !f.iter().all(|x| x.is_finite()) {
                return Err(perr(ln, "expected two finite coordinates".into()));
            }
            vertices.push(Point::new(f[0], f[1]));
        }

        let index = |ln: usize, s: &str| -> Result<usize, MeshError> {
            let i = s.parse::<usize>().map_err(|_| perr(ln, format!("bad index '{s}'")))?;
            if i >= nv {
                return Err(perr(ln, format!("vertex index {i} out of range (have {nv})")));
            }
            Ok(i)
        };

        let nt = section("triangles", next("triangles")?)?;
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, l) = next("triangle")?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(perr(ln, "expected three vertex indices".into()));
            }
            triangles.push([index(ln, f[0])?, index(ln, f[1])?, index(ln, f[2])?]);
        }

        let nb = section("boundary", next("boundary")?)?;
        let mut boundary = Vec::with_capacity(nb);
        for _ in 0..nb {
            let (ln, l) = next("boundary edge")?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(perr(ln, "expected 'i j TAG'".into()));
            }
            let tag = BoundaryTag::parse(f[2]).ok_or_else(|| perr(ln, format!("unknown tag '{}'", f[2])))?;
            boundary.push(BoundaryEdge {
                vertices: [index(ln, f[0])?, index(ln, f[1])?],
                tag,
            });
        }
        if let Ok((ln, l)) = next("end") {
            return Err(perr(ln, format!("trailing content '{l}'")));
        }

        let mesh = TriMesh {
            vertices,
            triangles,
            boundary,
        };
        mesh.validate()?;
        Ok(mesh)
    }
}

fn edges_connected(edges: &[[usize; 2]]) -> bool {
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for &[a, b] in edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let start = edges[0][0];
    let mut seen = std::collections::HashSet::from([start]);
    let mut stack = vec![start];
    while let Some(v) = stack.pop() {
        for &w in &adj[&v] {
            if seen.insert(w) {
                stack.push(w);
            }
        }
    }
    seen.len() == adj.len()
}

pub fn save_mesh(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    std::fs::write(path, mesh.to_text())?;
    Ok(())
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh, MeshError> {
    TriMesh::from_text(&std::fs::read_to_string(path)?)
}
