//! Simplicial triangulations with facet adjacency.
//!
//! The background mesh of the unit square is a structured criss-cross
//! triangulation; the same [`TriMesh`] type also carries the fitted meshes of
//! the ALE reference solver.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::Point2;

use crate::error::{Error, Result};

/// An edge of the triangulation together with its one or two neighbours.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Facet {
    /// Endpoints, smaller global index first.
    pub vertices: [usize; 2],
    /// First adjacent triangle and, for interior facets, the second one.
    pub triangles: (usize, Option<usize>),
}

impl Facet {
    pub fn is_interior(&self) -> bool {
        self.triangles.1.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct TriMesh {
    pub vertices: Vec<Point2<f64>>,
    /// Counter-clockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    pub facets: Vec<Facet>,
    /// `triangle_facets[t][i]` is the facet joining local vertices `i` and `(i + 1) % 3`.
    pub triangle_facets: Vec<[usize; 3]>,
    /// Largest triangle diameter.
    pub h_max: f64,
    /// Smallest triangle diameter.
    pub h_min: f64,
    /// Resolution the mesh was requested with.
    pub h_target: f64,
}

/// The fixed mesh of the unit square every time step lives on.
pub type BackgroundMesh = TriMesh;

/// Criss-cross triangulation of `[0,1]^2` with `ceil(1/h_target)` cells per side.
///
/// Vertices are numbered row-major (`j * (n + 1) + i`); cell `(i, j)` is split along
/// the diagonal through its lower-left corner when `i + j` is even and along the other
/// diagonal otherwise. For even `n` the mesh is mirror-symmetric about `x = 1/2`.
pub fn build_structured_mesh(h_target: f64) -> Result<TriMesh> {
    if !(h_target > 0.0) || !h_target.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "mesh size must be positive, got {h_target}"
        )));
    }
    if h_target > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "mesh size {h_target} exceeds the unit square"
        )));
    }
    let n = cells_per_side(h_target);
    let stride = n + 1;
    let mut vertices = Vec::with_capacity(stride * stride);
    for j in 0..=n {
        for i in 0..=n {
            vertices.push(Point2::new(i as f64 / n as f64, j as f64 / n as f64));
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let v00 = j * stride + i;
            let v10 = v00 + 1;
            let v01 = v00 + stride;
            let v11 = v01 + 1;
            if (i + j) % 2 == 0 {
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            } else {
                triangles.push([v00, v10, v01]);
                triangles.push([v10, v11, v01]);
            }
        }
    }
    TriMesh::from_parts(vertices, triangles, h_target)
}

/// Number of grid cells per side for a requested mesh size.
pub fn cells_per_side(h_target: f64) -> usize {
    // guard against 1/0.1 = 10.000000000000002 style round-up
    ((1.0 / h_target) - 1e-9).ceil().max(1.0) as usize
}

impl TriMesh {
    /// Builds facet adjacency for an arbitrary triangulation.
    pub fn from_parts(
        vertices: Vec<Point2<f64>>,
        triangles: Vec<[usize; 3]>,
        h_target: f64,
    ) -> Result<Self> {
        let mut facets: Vec<Facet> = Vec::with_capacity(triangles.len() * 3 / 2 + 4);
        let mut lookup: HashMap<(usize, usize), usize> = HashMap::with_capacity(facets.capacity());
        let mut triangle_facets = Vec::with_capacity(triangles.len());
        let mut h_max: f64 = 0.0;
        let mut h_min = f64::INFINITY;
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::InvalidArgument(format!(
                    "triangle {t} references a missing vertex"
                )));
            }
            let area = signed_area(&vertices[tri[0]], &vertices[tri[1]], &vertices[tri[2]]);
            if !(area > 0.0) {
                return Err(Error::DegenerateTriangle(area));
            }
            let mut local = [0usize; 3];
            for i in 0..3 {
                let (a, b) = (tri[i], tri[(i + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let f = *lookup.entry(key).or_insert_with(|| {
                    facets.push(Facet {
                        vertices: [key.0, key.1],
                        triangles: (t, None),
                    });
                    facets.len() - 1
                });
                if facets[f].triangles.0 != t {
                    if facets[f].triangles.1.is_some() {
                        return Err(Error::InvalidArgument(format!(
                            "edge {key:?} shared by more than two triangles"
                        )));
                    }
                    facets[f].triangles.1 = Some(t);
                }
                local[i] = f;
                let len = (vertices[a] - vertices[b]).norm();
                h_max = h_max.max(len);
            }
            let diam = (0..3)
                .map(|i| (vertices[tri[i]] - vertices[tri[(i + 1) % 3]]).norm())
                .fold(0.0, f64::max);
            h_min = h_min.min(diam);
            triangle_facets.push(local);
        }
        Ok(Self {
            vertices,
            triangles,
            facets,
            triangle_facets,
            h_max,
            h_min,
            h_target,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_facets(&self) -> usize {
        self.facets.len()
    }

    pub fn triangle_points(&self, t: usize) -> [Point2<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        signed_area(&a, &b, &c)
    }

    /// The two triangles of the patch around an interior facet.
    pub fn facet_patch(&self, facet: usize) -> Result<(usize, usize)> {
        let f = self
            .facets
            .get(facet)
            .ok_or_else(|| Error::InvalidArgument(format!("no facet {facet}")))?;
        match f.triangles {
            (a, Some(b)) => Ok((a, b)),
            _ => Err(Error::NoPatch(facet)),
        }
    }

    /// Triangles sharing a facet with `t`.
    pub fn neighbours(&self, t: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.triangle_facets[t].iter().filter_map(move |&f| {
            let (a, b) = self.facets[f].triangles;
            let other = if a == t { b } else { Some(a) };
            other.map(|o| (f, o))
        })
    }

    pub fn boundary_vertices(&self) -> Vec<bool> {
        let mut flags = vec![false; self.vertices.len()];
        for f in self.facets.iter().filter(|f| !f.is_interior()) {
            flags[f.vertices[0]] = true;
            flags[f.vertices[1]] = true;
        }
        flags
    }

    /// Ratio of circumradius to inradius, maximised over all triangles.
    pub fn max_radius_ratio(&self) -> f64 {
        (0..self.n_triangles())
            .map(|t| {
                let [a, b, c] = self.triangle_points(t);
                let (la, lb, lc) = ((b - c).norm(), (c - a).norm(), (a - b).norm());
                let area = self.area(t);
                let circum = la * lb * lc / (4.0 * area);
                let inradius = 2.0 * area / (la + lb + lc);
                circum / inradius
            })
            .fold(0.0, f64::max)
    }

    /// Writes the plain-text `MESH2D` format (0-based indices).
    pub fn write_mesh2d<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "MESH2D {} {}", self.vertices.len(), self.triangles.len())?;
        for v in &self.vertices {
            writeln!(out, "{:.17e} {:.17e}", v.x, v.y)?;
        }
        for t in &self.triangles {
            writeln!(out, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    pub fn read_mesh2d<R: BufRead>(input: R, h_target: f64) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty mesh file".into()))??;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("MESH2D") {
            return Err(Error::Parse(format!("bad header {header:?}")));
        }
        let mut count = |what: &str| -> Result<usize> {
            parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse(format!("missing {what} count")))
        };
        let nv = count("vertex")?;
        let nt = count("triangle")?;
        let mut vertices = Vec::with_capacity(nv);
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nv {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse("truncated vertex block".into()))??;
            let xy: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("vertex line {line:?}: {e}")))?;
            if xy.len() != 2 {
                return Err(Error::Parse(format!("vertex line {line:?}")));
            }
            vertices.push(Point2::new(xy[0], xy[1]));
        }
        for _ in 0..nt {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse("truncated triangle block".into()))??;
            let ijk: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("triangle line {line:?}: {e}")))?;
            if ijk.len() != 3 {
                return Err(Error::Parse(format!("triangle line {line:?}")));
            }
            triangles.push([ijk[0], ijk[1], ijk[2]]);
        }
        Self::from_parts(vertices, triangles, h_target)
    }
}

pub fn signed_area(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
}
