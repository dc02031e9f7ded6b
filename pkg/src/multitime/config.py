"""Scenario configuration: a YAML document validated with pydantic.

Cross-module invariants (mode count, cut-off resolution, support fitting in
half the box) are checked by :func:`check_invariants` before anything
expensive runs.
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .dirac import smooth_initial_state
from .evolution import PropagatorPlan
from .model import Model

SCENARIOS = (
    "propagate",
    "verify-consistency",
    "verify-lightcone",
    "verify-pde",
    "verify-ehrenfest",
    "verify-uniqueness",
    "refine-sweep",
)


class ConfigError(ValueError):
    """Schema or invariant violation; ``errors`` lists field-level messages."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LatticeSection(_Strict):
    n_sites: int = Field(gt=2)
    spacing: float = Field(gt=0)
    spatial_dim: Literal[1, 3] = 1
    n_particles: int = Field(ge=1)
    dirac_mass: float = 0.0


class FieldSection(_Strict):
    n_modes: int = Field(ge=1)
    max_occupation: int = Field(ge=1)
    field_mass: float = Field(default=0.0, ge=0)
    coupling: float = 1.0


class CutoffSection(_Strict):
    delta: float = Field(gt=0)


class OccupationFiber(_Strict):
    occupation: list[int]


class RandomFiber(_Strict):
    random: Literal["safe", "full"] = "safe"


class InitialStateSection(_Strict):
    centers: list[Union[float, list[float]]]
    widths: list[float]
    spinors: list[list[complex]]
    fock_fiber: Union[Literal["vacuum"], OccupationFiber, RandomFiber] = "vacuum"
    truncation_radius: Optional[float] = None
    tail: float = Field(default=1e-12, gt=0, lt=1)


class GridSpec(_Strict):
    start: float
    step: float = Field(gt=0)
    num: int = Field(ge=1)

    def values(self) -> list:
        return [self.start + i * self.step for i in range(self.num)]


class PlanSection(_Strict):
    krylov_dim: int = Field(default=30, ge=2)
    tolerance: float = Field(default=1e-10, gt=0)
    substep: Optional[float] = Field(default=None, gt=0)

    def build(self) -> PropagatorPlan:
        return PropagatorPlan(self.krylov_dim, self.substep, self.tolerance)


class CheckSpec(BaseModel):
    """One check; parameters besides ``name`` depend on the scenario."""

    model_config = ConfigDict(extra="allow")
    name: str


class OutputSection(_Strict):
    directory: str = "runs/latest"
    root: Optional[str] = None
    formats: list[Literal["json", "tsv"]] = ["json", "tsv"]


class ScenarioConfig(_Strict):
    scenario: Literal[SCENARIOS]  # type: ignore[valid-type]
    seed: int = 0
    lattice: LatticeSection
    field: FieldSection
    cutoff: CutoffSection
    initial_state: InitialStateSection
    times: Union[list[float], GridSpec, None] = None
    plan: PlanSection = PlanSection()
    checks: list[CheckSpec] = []
    output: OutputSection = OutputSection()

    @field_validator("checks", mode="before")
    @classmethod
    def _names(cls, v):
        if v is None:
            return []
        return [{"name": c} if isinstance(c, str) else c for c in v]

    @model_validator(mode="after")
    def _shapes(self):
        n = self.lattice.n_particles
        st = self.initial_state
        if len(st.centers) != n or len(st.widths) != n or len(st.spinors) != n:
            raise ValueError(f"initial_state needs one center, width and spinor per particle ({n})")
        if isinstance(st.fock_fiber, OccupationFiber) and len(st.fock_fiber.occupation) != self.field.n_modes:
            raise ValueError("fock_fiber.occupation needs one entry per field mode")
        if self.scenario == "propagate" and isinstance(self.times, list) and len(self.times) != n:
            raise ValueError("times must list one time per particle")
        return self

    def time_values(self) -> list:
        if self.times is None:
            return []
        return self.times.values() if isinstance(self.times, GridSpec) else list(self.times)


def load_config(path) -> tuple[ScenarioConfig, dict]:
    """Parse and validate; returns the model and the raw mapping (for the manifest echo)."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError([f"cannot read config: {exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"malformed YAML: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a mapping"])
    return parse_config(raw), raw


def parse_config(raw: dict) -> ScenarioConfig:
    from pydantic import ValidationError

    try:
        cfg = ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        errs = [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]
        raise ConfigError(errs) from exc
    check_invariants(cfg)
    return cfg


def build_model(cfg: ScenarioConfig, refine: int = 0) -> Model:
    """Model for the config; ``refine`` halves the spacing that many times at fixed box length."""
    lat, fld = cfg.lattice, cfg.field
    return Model.build(
        lat.n_sites * 2**refine, lat.spacing / 2**refine, lat.n_particles, fld.n_modes, fld.max_occupation,
        cfg.cutoff.delta, lat.dirac_mass, fld.field_mass, fld.coupling, lat.spatial_dim,
    )


def check_invariants(cfg: ScenarioConfig) -> None:
    errors = []
    try:
        model = build_model(cfg)
    except ValueError as exc:
        raise ConfigError([f"lattice/field/cutoff: {exc}"]) from exc
    half = model.lattice.length / 2
    st = cfg.initial_state
    a = cfg.lattice.spacing
    for j, w in enumerate(st.widths):
        if w < 2 * a:
            errors.append(f"initial_state.widths.{j}: width {w} below two lattice spacings")
        r = st.truncation_radius if st.truncation_radius is not None else w * np.sqrt(2 * np.log(1 / st.tail))
        if r >= half:
            errors.append(f"initial_state: truncation radius {r:.3g} does not fit in half the lattice ({half:.3g})")
    for j, s in enumerate(st.spinors):
        if len(s) != model.lattice.spinor_dim:
            errors.append(f"initial_state.spinors.{j}: need {model.lattice.spinor_dim} components")
    if isinstance(st.fock_fiber, OccupationFiber):
        if any(not 0 <= o <= cfg.field.max_occupation for o in st.fock_fiber.occupation):
            errors.append("initial_state.fock_fiber.occupation: entries must lie in [0, max_occupation]")
    if cfg.field.n_modes != model.grid.n_modes:
        errors.append(
            f"field.n_modes: {cfg.field.n_modes} cannot form a symmetric window here; use {model.grid.n_modes}"
        )
    if errors:
        raise ConfigError(errors)


def build_initial_state(cfg: ScenarioConfig, model: Model):
    st = cfg.initial_state
    trunc = model.truncation
    fib = st.fock_fiber
    if fib == "vacuum":
        fiber = trunc.vacuum()
    elif isinstance(fib, OccupationFiber):
        fiber = trunc.basis_vector(fib.occupation)
    else:
        rng = np.random.default_rng(cfg.seed)
        fiber = rng.standard_normal(trunc.dimension) + 1j * rng.standard_normal(trunc.dimension)
        if fib.random == "safe":
            fiber = fiber * trunc.safe_mask()
    return smooth_initial_state(model.lattice, st.centers, st.widths, st.spinors, fiber, st.tail,
                                st.truncation_radius)
