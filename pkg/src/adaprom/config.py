"""Schema-validated experiment configuration (YAML) and conversion to runtime objects."""
from importlib import resources
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .adjoint import ObjectiveSpec, OptimizerConfig
from .fem import BeamGeometry, KelvinCellGeometry, MaterialSpec, RayleighDamping
from .models import beam_model, kelvin_cell_model
from .mor import IrkaConfig
from .sampling import AdaptiveConfig
from .sbr import SbrConfig

BUNDLED = ("beam", "kelvin_cell")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MaterialBlock(_Strict):
    density: float = Field(gt=0)
    youngs_modulus: float = Field(gt=0)
    poisson_ratio: float = Field(gt=0, lt=0.5)


class DampingBlock(_Strict):
    mass_coefficient: float = Field(ge=0)
    stiffness_coefficient: float = Field(ge=0)


class BoundsBlock(_Strict):
    lower: List[float]
    upper: List[float]

    @model_validator(mode="after")
    def _ordered(self):
        if len(self.lower) != len(self.upper) or len(self.lower) != 2:
            raise ValueError("bounds need two lower and two upper values")
        if not all(a < b for a, b in zip(self.lower, self.upper)):
            raise ValueError("every lower bound must be below its upper bound")
        if min(self.lower) <= 0:
            raise ValueError("geometric bounds must be positive")
        return self


class BeamGeometryBlock(_Strict):
    length: float = Field(gt=0)
    element_count: int = Field(ge=1)


class KelvinGeometryBlock(_Strict):
    lz: float = Field(gt=0)
    strut_thickness: float = Field(gt=0)
    elements_per_strut: int = Field(ge=1)


class BeamModelBlock(_Strict):
    kind: Literal["beam"]
    geometry: BeamGeometryBlock
    material: MaterialBlock
    damping: DampingBlock
    bounds: BoundsBlock


class KelvinModelBlock(_Strict):
    kind: Literal["kelvin-cell"]
    geometry: KelvinGeometryBlock
    material: MaterialBlock
    damping: DampingBlock
    bounds: BoundsBlock


class FrequencySpan(_Strict):
    """Initial IRKA frequencies in Hz: ``linspace(start, stop, order)``."""
    start: float
    stop: float


class MorBlock(_Strict):
    order: int = Field(ge=1)
    irka_tolerance: float = Field(gt=0)
    irka_max_iterations: int = Field(ge=1)
    initial_frequencies: FrequencySpan
    kappa: float = Field(gt=0, le=1)


class ObjectiveBlock(_Strict):
    band: List[float]
    k: float = Field(ge=1)
    log: bool = True

    @field_validator("band")
    @classmethod
    def _band(cls, v):
        if len(v) != 2 or not v[0] < v[1]:
            raise ValueError("band must be [f_lo, f_hi] with f_lo < f_hi")
        return v


class AdaptiveBlock(_Strict):
    initial_levels: int = Field(ge=1)
    min_distance: float = Field(gt=0)
    distance_units: Literal["raw", "normalized"] = "normalized"
    improvement_tol: float = Field(gt=0, default=1e-3)
    stop_pairs: int = Field(ge=1, default=2)
    max_iterations: int = Field(ge=1, default=50)
    optimizer_starts: int = Field(ge=1, default=1)
    max_degree: int = Field(ge=1, le=8, default=4)
    error_map_levels: int = Field(ge=1, default=5)


class ExperimentConfig(_Strict):
    model: Annotated[Union[BeamModelBlock, KelvinModelBlock], Field(discriminator="kind")]
    mor: MorBlock
    objective: ObjectiveBlock
    adaptive: AdaptiveBlock
    seed: int = 0
    output_dir: Optional[str] = None

    # -- conversion ---------------------------------------------------------
    def build_model(self):
        m = self.model
        material = MaterialSpec(**m.material.model_dump())
        damping = RayleighDamping(**m.damping.model_dump())
        lower, upper = tuple(m.bounds.lower), tuple(m.bounds.upper)
        if m.kind == "beam":
            geom = BeamGeometry(length=m.geometry.length, element_count=m.geometry.element_count)
            return beam_model(geom, material, damping, lower, upper)
        geom = KelvinCellGeometry(lz=m.geometry.lz, strut_thickness=m.geometry.strut_thickness,
                                  elements_per_strut=m.geometry.elements_per_strut)
        return kelvin_cell_model(geom, material, damping, lower, upper)

    def objective_spec(self):
        o = self.objective
        return ObjectiveSpec(o.band[0], o.band[1], k=o.k, log_objective=o.log)

    def irka_config(self):
        m = self.mor
        f0 = np.linspace(m.initial_frequencies.start, m.initial_frequencies.stop, m.order)
        return IrkaConfig(order=m.order, tolerance=m.irka_tolerance,
                          max_iterations=m.irka_max_iterations,
                          initial_frequencies=tuple(float(v) for v in f0))

    def adaptive_config(self, seed=None, workers=None):
        a = self.adaptive
        return AdaptiveConfig(
            objective=self.objective_spec(), initial_levels=a.initial_levels,
            min_distance=a.min_distance, distance_units=a.distance_units,
            improvement_tol=a.improvement_tol, stop_pairs=a.stop_pairs,
            max_iterations=a.max_iterations, kappa=self.mor.kappa, irka=self.irka_config(),
            sbr=SbrConfig(max_degree=a.max_degree),
            optimizer=OptimizerConfig(n_starts=a.optimizer_starts),
            seed=self.seed if seed is None else seed, workers=workers)


def load_config(path_or_name):
    """Load a YAML config from a path, or a bundled one by name (``beam``, ``kelvin_cell``)."""
    if str(path_or_name) in BUNDLED:
        text = resources.files("adaprom").joinpath(f"configs/{path_or_name}.yaml").read_text()
    else:
        text = Path(path_or_name).read_text()
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError("configuration must be a mapping")
    return ExperimentConfig.model_validate(data)
