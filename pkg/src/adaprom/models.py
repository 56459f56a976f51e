"""Parametric full-order models: a parameter box plus a builder ``p -> system``."""
from dataclasses import dataclass, replace

import numpy as np

from .fem import (BEAM_MATERIAL, KELVIN_MATERIAL, BeamGeometry, InvalidGeometryError,
                  KelvinCellGeometry, MaterialSpec, RayleighDamping, assemble_kelvin_cell,
                  assemble_timoshenko_beam)
from .sbr import Normalization


@dataclass(frozen=True)
class ParametricModel:
    """``build(p)`` assembles the full-order system at parameter point ``p``.

    ``parameter_names`` label the coordinates of ``p``; ``lower``/``upper``
    bound the design box.
    """
    name: str
    parameter_names: tuple
    lower: tuple
    upper: tuple
    material: MaterialSpec
    damping: RayleighDamping
    geometry: object

    @property
    def normalization(self):
        return Normalization(self.lower, self.upper)

    @property
    def d(self):
        return len(self.lower)

    def geometry_at(self, p):
        p = np.asarray(p, float).ravel()
        if p.size != self.d:
            raise InvalidGeometryError(f"{self.name} expects {self.d} parameters, got {p.size}")
        return replace(self.geometry, **{k: float(v) for k, v in zip(self.parameter_names, p)})

    def build(self, p):
        g = self.geometry_at(p)
        if self.name == "beam":
            return assemble_timoshenko_beam(g, self.material, self.damping)
        return assemble_kelvin_cell(g, self.material, self.damping)

    __call__ = build


def beam_model(geometry=BeamGeometry(), material=BEAM_MATERIAL, damping=RayleighDamping(),
               lower=(0.01, 0.01), upper=(0.05, 0.05)):
    """Cantilever with thickness and height ``p = [t, h]`` as design variables."""
    return ParametricModel("beam", ("thickness", "height"), tuple(lower), tuple(upper),
                           material, damping, geometry)


def kelvin_cell_model(geometry=KelvinCellGeometry(), material=KELVIN_MATERIAL,
                      damping=RayleighDamping(), lower=(0.055, 0.020), upper=(0.080, 0.045)):
    """Kelvin cell with the in-plane extents ``p = [lx, ly]`` as design variables."""
    return ParametricModel("kelvin-cell", ("lx", "ly"), tuple(lower), tuple(upper),
                           material, damping, geometry)
