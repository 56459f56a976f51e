"""Parameter-dependent finite-element models in second-order form.

Both models are frames of 2-node, 12-DOF Timoshenko beam elements with a
consistent mass matrix:

* a clamped cantilever with a rectangular section, loaded and observed at the
  tip in the transverse (z) direction;
* a Kelvin cell, i.e. the edge graph of a truncated octahedron, built from
  square-section struts, clamped on its bottom face and loaded on the -x face.
"""
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import scipy.io
import scipy.sparse as sp

from .kernels import element_frames, element_matrices

DOFS_PER_NODE = 6


class InvalidGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class MaterialSpec:
    density: float
    youngs_modulus: float
    poisson_ratio: float

    def __post_init__(self):
        if not self.density > 0 or not self.youngs_modulus > 0:
            raise ValueError("density and Young's modulus must be positive")
        if not 0.0 < self.poisson_ratio < 0.5:
            raise ValueError("Poisson's ratio must lie in (0, 0.5)")

    @property
    def shear_modulus(self):
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))


@dataclass(frozen=True)
class RayleighDamping:
    """``C = mass_coefficient * M + stiffness_coefficient * K``."""
    mass_coefficient: float = 8.0
    stiffness_coefficient: float = 8e-6

    def __post_init__(self):
        if self.mass_coefficient < 0 or self.stiffness_coefficient < 0:
            raise ValueError("Rayleigh coefficients must be non-negative")


@dataclass(frozen=True)
class BeamGeometry:
    length: float = 1.0
    thickness: float = 0.01
    height: float = 0.01
    element_count: int = 400

    def validate(self):
        if not (self.length > 0 and self.thickness > 0 and self.height > 0):
            raise InvalidGeometryError(f"beam dimensions must be positive: {self}")
        if int(self.element_count) < 1:
            raise InvalidGeometryError("element_count must be >= 1")


@dataclass(frozen=True)
class KelvinCellGeometry:
    lx: float = 0.0675
    ly: float = 0.0325
    lz: float = 0.05
    strut_thickness: float = 0.001
    elements_per_strut: int = 50

    def validate(self):
        if not min(self.lx, self.ly, self.lz, self.strut_thickness) > 0:
            raise InvalidGeometryError(f"cell dimensions must be positive: {self}")
        if int(self.elements_per_strut) < 1:
            raise InvalidGeometryError("elements_per_strut must be >= 1")


@dataclass
class SecondOrderSystem:
    """``(s^2 M + s C + K) x = f u``, ``y = g x`` with sparse real operators."""
    M: sp.csr_matrix
    C: sp.csr_matrix
    K: sp.csr_matrix
    f: np.ndarray
    g: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.K.shape[0]

    def export_matrix_market(self, directory):
        """Write M, C, K, f, g as Matrix Market files into ``directory``."""
        from pathlib import Path
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("M", "C", "K"):
            scipy.io.mmwrite(str(d / f"{name}.mtx"), sp.coo_matrix(getattr(self, name)))
        scipy.io.mmwrite(str(d / "f.mtx"), self.f[:, None])
        scipy.io.mmwrite(str(d / "g.mtx"), self.g[None, :])


def rayleigh_damping(M, K, damping):
    if M.shape != K.shape:
        raise ValueError(f"dimension mismatch: M {M.shape} vs K {K.shape}")
    return (damping.mass_coefficient * M + damping.stiffness_coefficient * K).tocsr() \
        if sp.issparse(M) else damping.mass_coefficient * M + damping.stiffness_coefficient * K


def rectangle_torsion_constant(a, b):
    """Saint-Venant torsion constant of an ``a x b`` rectangle (series approximation)."""
    a, b = max(a, b), min(a, b)
    return a * b ** 3 * (1.0 / 3.0 - 0.21 * (b / a) * (1.0 - b ** 4 / (12.0 * a ** 4)))


def assemble_frame(nodes, elements, material, width, height):
    """Assemble unconstrained global K and M of a beam frame.

    ``width`` is the section extent along local y, ``height`` along local z.
    """
    nodes = np.asarray(nodes, float)
    elements = np.asarray(elements, np.int64)
    L, R = element_frames(nodes[elements[:, 0]], nodes[elements[:, 1]])
    if np.any(L <= 0):
        raise InvalidGeometryError("zero-length element")
    A = width * height
    Iy = width * height ** 3 / 12.0
    Iz = height * width ** 3 / 12.0
    J = rectangle_torsion_constant(width, height)
    Ke, Me = element_matrices(L, R, material.youngs_modulus, material.shear_modulus,
                              material.density, A, Iy, Iz, J)
    base = DOFS_PER_NODE * elements
    dofs = np.concatenate([base[:, :1] + np.arange(6), base[:, 1:] + np.arange(6)], axis=1)
    rows = np.repeat(dofs, 12, axis=1).ravel()
    cols = np.tile(dofs, (1, 12)).ravel()
    n = DOFS_PER_NODE * len(nodes)
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    M = sp.coo_matrix((Me.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    # element blocks are symmetric up to round-off of T^T K T; enforce exactly
    K = (0.5 * (K + K.T)).tocsr()
    M = (0.5 * (M + M.T)).tocsr()
    K.sum_duplicates()
    M.sum_duplicates()
    return K, M


def _eliminate(K, M, f, g, fixed):
    n = K.shape[0]
    keep = np.setdiff1d(np.arange(n), np.asarray(fixed, np.int64))
    Kr = K[keep][:, keep].tocsr()
    Mr = M[keep][:, keep].tocsr()
    Kr.sort_indices()
    Mr.sort_indices()
    return Kr, Mr, f[keep], g[keep], keep


def assemble_timoshenko_beam(geometry, material, damping):
    """Clamped cantilever along x; tip force and tip displacement along z."""
    geometry.validate()
    N = int(geometry.element_count)
    x = np.linspace(0.0, geometry.length, N + 1)
    nodes = np.zeros((N + 1, 3))
    nodes[:, 0] = x
    elements = np.stack([np.arange(N), np.arange(1, N + 1)], axis=1)
    K, M = assemble_frame(nodes, elements, material, geometry.thickness, geometry.height)
    n = K.shape[0]
    tip_w = DOFS_PER_NODE * N + 2
    f = np.zeros(n)
    f[tip_w] = 1.0
    g = f.copy()
    K, M, f, g, keep = _eliminate(K, M, f, g, np.arange(6))
    C = rayleigh_damping(M, K, damping)
    return SecondOrderSystem(M, C, K, f, g, info={
        "model": "beam", "free_dofs": keep, "n_elements": N,
        "tip_dof": int(np.searchsorted(keep, tip_w))})


def kelvin_cell_unit_graph():
    """Vertices and struts of the truncated octahedron used for the cell.

    Vertices are all permutations of ``(0, +-1, +-2)``; struts join vertices at
    distance sqrt(2). The bounding box is ``[-2, 2]^3``. The fixture file
    ``data/kelvin_cell.json`` holds the same graph in a fixed order.
    """
    text = resources.files("adaprom").joinpath("data/kelvin_cell.json").read_text()
    data = json.loads(text)
    return np.array(data["vertices"], float), np.array(data["struts"], np.int64)


def kelvin_cell_mesh(geometry):
    """Nodes, elements and per-node strut labels of the discretized cell."""
    geometry.validate()
    verts, struts = kelvin_cell_unit_graph()
    scale = np.array([geometry.lx, geometry.ly, geometry.lz]) / 4.0
    verts = verts * scale
    m = int(geometry.elements_per_strut)
    nodes = [verts]
    elements = []
    node_struts = [[] for _ in range(len(verts))]
    for s, (a, b) in enumerate(struts):
        node_struts[a].append(s)
        node_struts[b].append(s)
        start = sum(len(blk) for blk in nodes)
        t = np.arange(1, m)[:, None] / m
        inner = verts[a] + t * (verts[b] - verts[a])
        nodes.append(inner)
        ids = [a] + list(range(start, start + m - 1)) + [b]
        node_struts.extend([[s]] * (m - 1))
        elements.extend(zip(ids[:-1], ids[1:]))
    return np.vstack(nodes), np.array(elements, np.int64), struts, node_struts


def _face_nodes(unit_verts, struts, node_struts, axis, side):
    on_face = np.isclose(unit_verts[:, axis], 2.0 * side)
    face_struts = {s for s, (a, b) in enumerate(struts) if on_face[a] and on_face[b]}
    return np.array([i for i, ss in enumerate(node_struts) if any(s in face_struts for s in ss)],
                    np.int64)


def assemble_kelvin_cell(geometry, material, damping, clamp=True):
    """Kelvin cell frame.

    Boundary conditions: every node on the four struts of the bottom (-z)
    square face is clamped. Input: a unit x-force shared equally by the nodes
    of the -x face struts. Output: the mean x-displacement of the nodes of the
    +x face struts. With ``clamp=False`` the unconstrained frame is returned.
    """
    nodes, elements, struts, node_struts = kelvin_cell_mesh(geometry)
    unit_verts, _ = kelvin_cell_unit_graph()
    t = geometry.strut_thickness
    K, M = assemble_frame(nodes, elements, material, t, t)
    n = K.shape[0]
    left = _face_nodes(unit_verts, struts, node_struts, 0, -1)
    right = _face_nodes(unit_verts, struts, node_struts, 0, +1)
    bottom = _face_nodes(unit_verts, struts, node_struts, 2, -1)
    f = np.zeros(n)
    f[DOFS_PER_NODE * left] = 1.0 / len(left)
    g = np.zeros(n)
    g[DOFS_PER_NODE * right] = 1.0 / len(right)
    info = {"model": "kelvin-cell", "n_elements": len(elements), "n_nodes": len(nodes),
            "dofs_unconstrained": n}
    if clamp:
        fixed = (DOFS_PER_NODE * bottom[:, None] + np.arange(6)).ravel()
        K, M, f, g, keep = _eliminate(K, M, f, g, fixed)
        info["free_dofs"] = keep
    C = rayleigh_damping(M, K, damping)
    return SecondOrderSystem(M, C, K, f, g, info=info)


# Reference data of the two models (material, damping, default geometry).
BEAM_MATERIAL = MaterialSpec(7.86e3, 2.10e11, 0.3)
KELVIN_MATERIAL = MaterialSpec(1.18e3, 4.35e9, 0.3)
