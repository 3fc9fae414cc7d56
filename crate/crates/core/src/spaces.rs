//! Continuous Lagrange spaces on subsets of the background mesh.
//!
//! A [`DofLayout`] numbers every DOF of the P^k space on the full background
//! mesh once; the per-step spaces ([`DofMap`]) are restrictions of it to an
//! element subset, so DOFs keep their background index across time steps.

use std::sync::Arc;

use nalgebra::{Point2, Vector2};

use crate::error::{Error, Result};
use crate::fe::{LagrangeElement, TriGeom};
use crate::geometry::ActiveDecomposition;
use crate::mesh::TriMesh;

/// Global numbering: vertices, then `k - 1` nodes per facet ordered away from the
/// smaller vertex index, then element interiors.
#[derive(Clone, Debug)]
pub struct DofLayout {
    pub element: LagrangeElement,
    pub n_dofs: usize,
    elem_dofs: Vec<usize>,
    pub coords: Vec<Point2<f64>>,
    pub on_boundary: Vec<bool>,
}

impl DofLayout {
    pub fn new(mesh: &TriMesh, degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidArgument("Lagrange degree must be >= 1".into()));
        }
        let element = LagrangeElement::new(degree);
        let k = degree;
        let nl = element.n_local();
        let n_int = element.n_interior();
        let nv = mesh.n_vertices();
        let nf = mesh.n_facets();
        let n_dofs = nv + nf * (k - 1) + mesh.n_triangles() * n_int;
        let mut elem_dofs = Vec::with_capacity(mesh.n_triangles() * nl);
        let mut coords = vec![Point2::origin(); n_dofs];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let start = elem_dofs.len();
            elem_dofs.extend_from_slice(tri);
            for e in 0..3 {
                let f = mesh.triangle_facets[t][e];
                let forward = tri[e] < tri[(e + 1) % 3];
                for m in 1..k {
                    let slot = if forward { m - 1 } else { k - 1 - m };
                    elem_dofs.push(nv + f * (k - 1) + slot);
                }
            }
            for i in 0..n_int {
                elem_dofs.push(nv + nf * (k - 1) + t * n_int + i);
            }
            let geom = TriGeom::new(mesh.triangle_points(t))?;
            for (n, &d) in elem_dofs[start..].iter().enumerate() {
                coords[d] = element.node_point(&geom, n);
            }
        }
        let mut on_boundary = vec![false; n_dofs];
        for (f, facet) in mesh.facets.iter().enumerate() {
            if !facet.is_interior() {
                on_boundary[facet.vertices[0]] = true;
                on_boundary[facet.vertices[1]] = true;
                for s in 0..k - 1 {
                    on_boundary[nv + f * (k - 1) + s] = true;
                }
            }
        }
        Ok(Self {
            element,
            n_dofs,
            elem_dofs,
            coords,
            on_boundary,
        })
    }

    pub fn degree(&self) -> usize {
        self.element.degree
    }

    pub fn element_dofs(&self, t: usize) -> &[usize] {
        let nl = self.element.n_local();
        &self.elem_dofs[t * nl..(t + 1) * nl]
    }
}

const NONE: u32 = u32::MAX;

/// Restriction of a [`DofLayout`] to a set of elements.
#[derive(Clone, Debug)]
pub struct DofMap {
    pub layout: Arc<DofLayout>,
    /// Covered background elements, ascending.
    pub elements: Vec<usize>,
    /// Background index of each active DOF, ascending.
    pub background_dof_of_active: Vec<usize>,
    active_of_background: Vec<u32>,
    slot_of_element: Vec<u32>,
    local_dofs: Vec<u32>,
    /// Homogeneous Dirichlet flag per active DOF.
    pub dirichlet: Vec<bool>,
}

impl DofMap {
    pub fn new(layout: Arc<DofLayout>, elements: &[usize], n_background_elements: usize, dirichlet_on_boundary: bool) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::EmptyActiveSet);
        }
        let mut elements = elements.to_vec();
        elements.sort_unstable();
        elements.dedup();
        let mut used = vec![false; layout.n_dofs];
        for &t in &elements {
            for &d in layout.element_dofs(t) {
                used[d] = true;
            }
        }
        let mut active_of_background = vec![NONE; layout.n_dofs];
        let mut background_dof_of_active = Vec::new();
        for (d, &u) in used.iter().enumerate() {
            if u {
                active_of_background[d] = background_dof_of_active.len() as u32;
                background_dof_of_active.push(d);
            }
        }
        let mut slot_of_element = vec![NONE; n_background_elements];
        let mut local_dofs = Vec::with_capacity(elements.len() * layout.element.n_local());
        for (s, &t) in elements.iter().enumerate() {
            slot_of_element[t] = s as u32;
            local_dofs.extend(layout.element_dofs(t).iter().map(|&d| active_of_background[d]));
        }
        let dirichlet = background_dof_of_active
            .iter()
            .map(|&d| dirichlet_on_boundary && layout.on_boundary[d])
            .collect();
        Ok(Self {
            layout,
            elements,
            background_dof_of_active,
            active_of_background,
            slot_of_element,
            local_dofs,
            dirichlet,
        })
    }

    pub fn degree(&self) -> usize {
        self.layout.degree()
    }

    pub fn n_active_dofs(&self) -> usize {
        self.background_dof_of_active.len()
    }

    pub fn n_local(&self) -> usize {
        self.layout.element.n_local()
    }

    /// Active DOF indices of the element in slot `s` of [`DofMap::elements`].
    pub fn slot_dofs(&self, s: usize) -> &[u32] {
        let nl = self.n_local();
        &self.local_dofs[s * nl..(s + 1) * nl]
    }

    pub fn slot_of(&self, t: usize) -> Option<usize> {
        match self.slot_of_element.get(t) {
            Some(&s) if s != NONE => Some(s as usize),
            _ => None,
        }
    }

    /// Active DOF indices of background element `t`, if covered.
    pub fn element_dofs(&self, t: usize) -> Option<&[u32]> {
        self.slot_of(t).map(|s| self.slot_dofs(s))
    }

    pub fn active_of(&self, background_dof: usize) -> Option<usize> {
        match self.active_of_background[background_dof] {
            NONE => None,
            a => Some(a as usize),
        }
    }
}

/// Velocity space on the active mesh with Dirichlet flags on the square's boundary.
pub fn build_velocity_space(mesh: &TriMesh, decomp: &ActiveDecomposition, k: usize) -> Result<DofMap> {
    let layout = Arc::new(DofLayout::new(mesh, k)?);
    velocity_space(&layout, mesh, decomp)
}

pub fn velocity_space(layout: &Arc<DofLayout>, mesh: &TriMesh, decomp: &ActiveDecomposition) -> Result<DofMap> {
    DofMap::new(layout.clone(), &decomp.active_elements, mesh.n_triangles(), true)
}

/// Multiplier space of degree `degree` on the interface elements.
pub fn build_multiplier_space(mesh: &TriMesh, decomp: &ActiveDecomposition, degree: usize) -> Result<DofMap> {
    if degree == 0 {
        return Err(Error::InvalidArgument(
            "multiplier degree must be >= 1 (velocity degree >= 2)".into(),
        ));
    }
    let layout = Arc::new(DofLayout::new(mesh, degree)?);
    multiplier_space(&layout, mesh, decomp)
}

pub fn multiplier_space(layout: &Arc<DofLayout>, mesh: &TriMesh, decomp: &ActiveDecomposition) -> Result<DofMap> {
    if decomp.interface_elements.is_empty() {
        return Err(Error::EmptyInterface);
    }
    DofMap::new(layout.clone(), &decomp.interface_elements, mesh.n_triangles(), false)
}

/// A vector-valued finite element function, two components per scalar DOF.
#[derive(Clone, Debug)]
pub struct FeFunction {
    pub map: Arc<DofMap>,
    pub coeffs: Vec<[f64; 2]>,
}

impl FeFunction {
    pub fn zeros(map: Arc<DofMap>) -> Self {
        let n = map.n_active_dofs();
        Self {
            map,
            coeffs: vec![[0.0; 2]; n],
        }
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(map: Arc<DofMap>, f: impl Fn(&Point2<f64>) -> [f64; 2]) -> Self {
        let coeffs = map
            .background_dof_of_active
            .iter()
            .map(|&d| f(&map.layout.coords[d]))
            .collect();
        Self { map, coeffs }
    }

    /// Value on background element `t` at `x`; `x` may lie outside `t`, in which
    /// case the element polynomial is extended.
    pub fn eval(&self, mesh: &TriMesh, t: usize, x: &Point2<f64>) -> Result<[f64; 2]> {
        let dofs = self
            .map
            .element_dofs(t)
            .ok_or_else(|| Error::InvalidArgument(format!("element {t} not covered")))?;
        let geom = TriGeom::new(mesh.triangle_points(t))?;
        let el = &self.map.layout.element;
        let mut vals = vec![0.0; el.n_local()];
        el.eval(geom.barycentric(x), &mut vals);
        let mut out = [0.0; 2];
        for (v, &d) in vals.iter().zip(dofs) {
            out[0] += v * self.coeffs[d as usize][0];
            out[1] += v * self.coeffs[d as usize][1];
        }
        Ok(out)
    }

    /// Gradient rows `[grad u_0, grad u_1]` on element `t` at `x`.
    pub fn eval_grad(&self, mesh: &TriMesh, t: usize, x: &Point2<f64>) -> Result<[Vector2<f64>; 2]> {
        let dofs = self
            .map
            .element_dofs(t)
            .ok_or_else(|| Error::InvalidArgument(format!("element {t} not covered")))?;
        let geom = TriGeom::new(mesh.triangle_points(t))?;
        let el = &self.map.layout.element;
        let mut vals = vec![0.0; el.n_local()];
        let mut grads = vec![Vector2::zeros(); el.n_local()];
        el.eval_with_grad(&geom, geom.barycentric(x), &mut vals, &mut grads);
        let mut out = [Vector2::zeros(); 2];
        for (g, &d) in grads.iter().zip(dofs) {
            out[0] += g * self.coeffs[d as usize][0];
            out[1] += g * self.coeffs[d as usize][1];
        }
        Ok(out)
    }

    /// Component `c` as a flat vector.
    pub fn component(&self, c: usize) -> Vec<f64> {
        self.coeffs.iter().map(|v| v[c]).collect()
    }
}

/// Copies coefficients of `prev` onto `new_map` by background index.
///
/// DOFs of `new_map` that were inactive before are set to zero; this is only
/// allowed outside the cut elements of `decomp`, which carry the fluid domain.
pub fn transfer(prev: &FeFunction, new_map: &DofMap, decomp: &ActiveDecomposition) -> Result<Vec<[f64; 2]>> {
    for &t in &decomp.cut_elements {
        let Some(dofs) = new_map.element_dofs(t) else {
            continue;
        };
        for &d in dofs {
            let bg = new_map.background_dof_of_active[d as usize];
            if prev.map.active_of(bg).is_none() {
                return Err(Error::StripTooThin { dof: bg, element: t });
            }
        }
    }
    Ok(new_map
        .background_dof_of_active
        .iter()
        .map(|&bg| prev.map.active_of(bg).map_or([0.0; 2], |a| prev.coeffs[a]))
        .collect())
}
