"""Experiment configuration: TOML in, fully validated model out.

Unknown keys are rejected at every level. Cross-field constraints
(stability bound, separation criterion, boundary padding) are checked here
so that a config that loads also runs.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .. import measurement as ms
from ..propagator import max_stable_dt
from ..wavefield import (
    FreePotential,
    GaussianState,
    Grid1D,
    GridError,
    HarmonicBasis,
    HarmonicPotential,
    PhysicalParams,
    PiecewiseDensity,
    SquareWell,
    Superposition,
    TabulatedPotential,
)

KINDS = ("propagate", "trajectory", "measure", "sequence", "equilibrium", "lyapunov")
PAD_SIGMAS = 4.0


class ConfigError(ValueError):
    pass


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ParamsCfg(Strict):
    hbar: float = Field(1.0, gt=0)
    m_x: float = Field(1.0, gt=0)
    m_y: float = Field(1.0, gt=0)

    def build(self) -> PhysicalParams:
        return PhysicalParams(self.hbar, self.m_x, self.m_y)


class GridCfg(Strict):
    x_min: float
    x_max: float
    n: int

    def build(self) -> Grid1D:
        return Grid1D(self.x_min, self.x_max, self.n)


class BasisCfg(Strict):
    omega: float = Field(gt=0)
    center: float = 0.0

    def build(self) -> HarmonicBasis:
        return HarmonicBasis(self.omega, self.center)


class GaussianCfg(Strict):
    type: Literal["gaussian"]
    center: float
    sigma: float = Field(gt=0)
    k0: float = 0.0

    def build(self):
        return GaussianState(self.center, self.sigma, self.k0)


class PiecewiseCfg(Strict):
    type: Literal["piecewise_density"]
    intervals: list[tuple[float, float]]
    weights: list[float]

    def build(self):
        return PiecewiseDensity(tuple(map(tuple, self.intervals)), tuple(self.weights))


class SuperpositionCfg(Strict):
    type: Literal["superposition"]
    coeffs: list[tuple[float, float]]  # (re, im)
    states: list[int]
    basis: BasisCfg

    def build(self):
        return Superposition(tuple(complex(a, b) for a, b in self.coeffs), tuple(self.states), self.basis.build())


class UniformPhaseCfg(Strict):
    """Uniform density on the whole (periodic) grid with phase ``alpha*sin(2*pi*modes*(x - x_min)/L)``."""

    type: Literal["uniform_phase"]
    alpha: float = 0.0
    modes: int = Field(1, ge=1)

    def build_for(self, grid: Grid1D):
        phase = self.alpha * np.sin(2 * math.pi * self.modes * (grid.points - grid.x_min) / grid.length)
        return PiecewiseDensity(((grid.x_min, grid.x_max),), (1.0,), tuple(float(p) for p in phase))


StateCfg = Annotated[Union[GaussianCfg, PiecewiseCfg, SuperpositionCfg, UniformPhaseCfg], Field(discriminator="type")]


class FreeCfg(Strict):
    type: Literal["free"]

    def build(self):
        return FreePotential()


class HarmonicCfg(Strict):
    type: Literal["harmonic"]
    omega: float = Field(gt=0)
    center: float = 0.0

    def build(self):
        return HarmonicPotential(self.omega, self.center)


class SquareWellCfg(Strict):
    type: Literal["square_well"]
    depth: float
    width: float = Field(gt=0)
    center: float = 0.0

    def build(self):
        return SquareWell(self.depth, self.width, self.center)


class TabulatedCfg(Strict):
    type: Literal["tabulated"]
    values: list[float]

    def build(self):
        return TabulatedPotential(tuple(self.values))


PotentialCfg = Annotated[Union[FreeCfg, HarmonicCfg, SquareWellCfg, TabulatedCfg], Field(discriminator="type")]


class PlanCfg(Strict):
    dt: float = Field(gt=0)
    n_steps: int = Field(ge=0)
    snapshot_every: int = Field(0, ge=0)


class DetectorCfg(Strict):
    sigma: float = Field(gt=0)
    center: float = 0.0
    y_min: float
    y_max: float
    ny: int

    def build(self) -> ms.DetectorSpec:
        return ms.DetectorSpec(self.sigma, Grid1D(self.y_min, self.y_max, self.ny), self.center)


class BinnedCfg(Strict):
    type: Literal["binned_position"]
    edges: list[float]

    def build(self):
        return ms.BinnedPosition(tuple(self.edges))


class DiscreteCfg(Strict):
    type: Literal["discrete"]
    values: list[float]
    states: list[int]
    basis: BasisCfg

    def build(self):
        return ms.DiscreteObservable(tuple(self.values), tuple(self.states), self.basis.build())


ObservableCfg = Annotated[Union[BinnedCfg, DiscreteCfg], Field(discriminator="type")]


class FlowCfg(Strict):
    omega: Optional[float] = Field(None, gt=0)
    dt: Optional[float] = Field(None, gt=0)
    budget: Optional[float] = Field(None, gt=0)

    def build(self) -> ms.FlowOptions:
        return ms.FlowOptions(self.omega, self.dt, self.budget)


class ChainCfg(Strict):
    observable: ObservableCfg
    detector: DetectorCfg
    lam: float = Field(ge=0)
    duration: float = Field(gt=0)
    reprepare: Literal["baker_ideal", "physical_flow"] = "baker_ideal"
    n_measurements: int = Field(1, ge=1)
    y0: Literal["fixed", "born"] = "fixed"
    x0: Optional[float] = None  # fixed start; Born-sampled when unset
    flow: FlowCfg = FlowCfg()


class TrajectoryCfg(Strict):
    positions: list[float] = []
    n_particles: int = Field(0, ge=0)
    record_every: int = Field(1, ge=1)


class SequenceCfg(Strict):
    M: int = Field(ge=100)


class CustomDensityCfg(Strict):
    """Custom initial ensemble density ``|psi|^2 * (x - x_min)`` (ramp) on the state's support."""

    type: Literal["ramp"]


class EquilibriumCfg(Strict):
    n_samples: int = Field(ge=1000)
    T: float = Field(ge=0)
    provenance: Literal["born", "custom"] = "born"
    custom: Optional[CustomDensityCfg] = None
    n_tracers: int = Field(0, ge=0)  # evenly spaced members followed for the per-trajectory f drift


class LyapunovCfg(Strict):
    setup: Literal["bernoulli", "wave", "baker"]
    delta0: float = Field(gt=0)
    window: float = Field(gt=0)
    x0: Optional[float] = None
    seed_bits: int = Field(1024, ge=64)


class ExperimentConfig(Strict):
    kind: Literal["propagate", "trajectory", "measure", "sequence", "equilibrium", "lyapunov"]
    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: Optional[str] = None
    params: ParamsCfg = ParamsCfg()
    grid: Optional[GridCfg] = None
    state: Optional[StateCfg] = None
    potential: PotentialCfg = FreeCfg(type="free")
    plan: Optional[PlanCfg] = None
    trajectory: Optional[TrajectoryCfg] = None
    chain: Optional[ChainCfg] = None
    sequence: Optional[SequenceCfg] = None
    equilibrium: Optional[EquilibriumCfg] = None
    lyapunov: Optional[LyapunovCfg] = None

    @model_validator(mode="after")
    def _sections(self):
        need = {
            "propagate": ("grid", "state", "plan"),
            "trajectory": ("grid", "state", "plan", "trajectory"),
            "measure": ("grid", "state", "chain"),
            "sequence": ("grid", "state", "chain", "sequence"),
            "equilibrium": ("grid", "state", "plan", "equilibrium"),
            "lyapunov": ("lyapunov",),
        }[self.kind]
        missing = [s for s in need if getattr(self, s) is None]
        if self.kind == "lyapunov" and self.lyapunov is not None:
            extra = {"wave": ("grid", "state", "plan"), "baker": ("grid", "state", "chain"), "bernoulli": ()}
            missing += [s for s in extra[self.lyapunov.setup] if getattr(self, s) is None]
        if missing:
            raise ValueError(f"kind={self.kind} requires section(s): {', '.join(missing)}")
        return self

    # -- builders ----------------------------------------------------------

    def physical(self) -> PhysicalParams:
        return self.params.build()

    def system_grid(self) -> Grid1D:
        return self.grid.build()

    def state_spec(self):
        if isinstance(self.state, UniformPhaseCfg):
            return self.state.build_for(self.system_grid())
        return self.state.build()

    def potential_spec(self):
        return self.potential.build()

    def measurement_chain(self) -> ms.MeasurementChain:
        c = self.chain
        return ms.MeasurementChain(c.observable.build(), c.detector.build(), c.lam, c.duration, c.reprepare, c.n_measurements)

    def canonical(self) -> dict:
        data = self.model_dump(mode="json")
        data.pop("output_dir", None)
        return data

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), allow_nan=False)
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"seed": int(seed)})


# ---------------------------------------------------------------------------
# cross-field validation


def _check(cfg: ExperimentConfig) -> None:
    p = cfg.physical()
    grid = cfg.system_grid() if cfg.grid is not None else None
    spec = cfg.state_spec() if cfg.state is not None else None
    if grid is not None and spec is not None:
        from ..wavefield import init_state

        init_state(grid, spec, p)
        if isinstance(spec, GaussianState):
            sigma_t = spec.sigma
            drift = 0.0
            if cfg.plan is not None and isinstance(cfg.potential, FreeCfg):
                T = cfg.plan.dt * cfg.plan.n_steps
                sigma_t = spec.sigma * math.sqrt(1 + (p.hbar * T / (2 * p.m_x * spec.sigma**2)) ** 2)
                drift = p.hbar * spec.k0 / p.m_x * T
            lo = min(spec.center, spec.center + drift) - PAD_SIGMAS * sigma_t
            hi = max(spec.center, spec.center + drift) + PAD_SIGMAS * sigma_t
            if lo < grid.x_min or hi > grid.x_max:
                raise ConfigError(
                    f"boundary padding violated: gaussian support [{lo:.4g}, {hi:.4g}] (center +- {PAD_SIGMAS:g} sigma over the run) "
                    f"leaves the domain [{grid.x_min}, {grid.x_max})"
                )
    if cfg.plan is not None and grid is not None:
        bound = max_stable_dt(grid, p)
        if cfg.plan.dt > bound * (1 + 1e-12):
            raise ConfigError(f"stability bound violated: dt={cfg.plan.dt} > m*dx^2/(hbar*pi) = {bound:.6g}")
    if cfg.chain is not None and grid is not None:
        c = cfg.chain
        det = c.detector.build()
        obs = c.observable.build()
        if isinstance(obs, ms.BinnedPosition):
            obs.check_grid(grid)
        restricting = cfg.kind in ("sequence", "lyapunov")
        try:
            ms.validate_separation(obs, det, c.lam, c.duration, restricting)
        except ms.SeparationError as exc:
            raise ConfigError(str(exc)) from None
        if cfg.kind in ("sequence", "lyapunov"):
            cfg.measurement_chain()
        if cfg.kind == "sequence" and c.reprepare == "physical_flow":
            raise ConfigError(
                "reprepare = 'physical_flow' cannot close a sequence: the harmonic breathing flow only maps "
                "gaussian restricted states onto gaussian targets; use 'baker_ideal'"
            )
        values = np.asarray(obs.values, dtype=float)
        top = det.center + c.lam * c.duration * max(values.max(), 0.0) + PAD_SIGMAS * det.sigma
        bottom = det.center + c.lam * c.duration * min(values.min(), 0.0) - PAD_SIGMAS * det.sigma
        if bottom < det.grid.x_min or top > det.grid.x_max:
            raise ConfigError(
                f"boundary padding violated: pointer packets span [{bottom:.4g}, {top:.4g}] "
                f"(+- {PAD_SIGMAS:g} sigma), outside the detector domain [{det.grid.x_min}, {det.grid.x_max})"
            )
        if c.x0 is not None and not grid.x_min <= c.x0 < grid.x_max:
            raise ConfigError("chain.x0 outside the system domain")
    if cfg.trajectory is not None and cfg.kind == "trajectory":
        t = cfg.trajectory
        if not t.positions and t.n_particles == 0:
            raise ConfigError("trajectory section needs positions or n_particles > 0")
        for x in t.positions:
            if not grid.x_min <= x < grid.x_max:
                raise ConfigError(f"trajectory start {x} outside the domain")
    if cfg.equilibrium is not None:
        e = cfg.equilibrium
        if e.provenance == "custom" and e.custom is None:
            raise ConfigError("equilibrium.provenance = 'custom' needs an equilibrium.custom section")
        steps = e.T / cfg.plan.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError(f"equilibrium.T = {e.T} is not a multiple of plan.dt = {cfg.plan.dt}")
    if cfg.lyapunov is not None:
        ly = cfg.lyapunov
        if ly.setup == "wave":
            x0 = ly.x0
            if x0 is None:
                raise ConfigError("lyapunov.setup = 'wave' needs lyapunov.x0")
            if ly.delta0 < 10 * np.finfo(float).eps * max(1.0, abs(x0)):
                raise ConfigError("lyapunov.delta0 below 10*eps*|x0|")
        if ly.setup == "bernoulli" and ly.window > 10**6:
            raise ConfigError("bernoulli window too long for the exact fixed-point orbit (max 1e6 iterates)")


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        if err["type"] == "extra_forbidden":
            lines.append(f"unknown key '{loc}'")
        else:
            lines.append(f"{loc or '<root>'}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None
    try:
        _check(cfg)
    except ConfigError:
        raise
    except (ValueError, GridError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    return parse_config(data)
