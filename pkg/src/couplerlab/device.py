"""Parametric device model: modes, couplings, placement, and flux maps.

Conventions
-----------
* Configs and the public API quote *linear* frequencies in GHz; internal
  Hamiltonians (see :mod:`couplerlab.hilbert`) use angular rad/ns, related by
  the single constant ``2*pi``.
* Flux is dimensionless, in units of the flux quantum.
* A :class:`DeviceSpec` is immutable after construction and safe to share
  across workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigError

TWO_PI = 2.0 * math.pi

MODE_KINDS = ("qubit", "planar-coupler", "vertical-coupler")

_MODE_KEYS = {
    "id",
    "kind",
    "max_frequency_ghz",
    "anharmonicity_ghz",
    "levels",
    "flux_tunable",
    "junction_asymmetry",
}
_COUPLING_KEYS = {"a", "b", "g0_ghz", "scaling"}
_PLACEMENT_KEYS = {"layer", "x", "y"}
_TOP_KEYS = {"modes", "couplings", "placement", "idle_bias"}


@dataclass(frozen=True)
class ModeSpec:
    """One oscillator mode: a qubit or a (planar/vertical) tunable coupler."""

    id: str
    kind: str
    max_frequency_ghz: float
    anharmonicity_ghz: float
    levels: int = 3
    flux_tunable: bool = True
    junction_asymmetry: float = 0.0

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ConfigError(f"mode {self.id!r}: unknown kind {self.kind!r}")
        if self.levels < 2:
            raise ConfigError(f"mode {self.id!r}: levels must be >= 2, got {self.levels}")
        if not (self.max_frequency_ghz > 0.0 and math.isfinite(self.max_frequency_ghz)):
            raise ConfigError(f"mode {self.id!r}: max_frequency_ghz must be positive")
        if not (self.anharmonicity_ghz < 0.0 and math.isfinite(self.anharmonicity_ghz)):
            raise ConfigError(f"mode {self.id!r}: anharmonicity_ghz must be negative")
        if not 0.0 <= self.junction_asymmetry <= 1.0:
            raise ConfigError(f"mode {self.id!r}: junction_asymmetry must lie in [0, 1]")

    @property
    def is_coupler(self) -> bool:
        return self.kind != "qubit"


@dataclass(frozen=True)
class CouplingSpec:
    """Bare transverse coupling between two modes.

    ``g0_ghz`` is quoted at the coupler's maximum frequency for
    coupler-adjacent edges. With ``scaling="sqrt-frequency"`` the strength
    follows sqrt(f_c(flux)/f_c_max) for every flux-tunable coupler endpoint;
    ``"fixed"`` edges do not track flux.
    """

    a: str
    b: str
    g0_ghz: float
    scaling: str = "fixed"

    def __post_init__(self):
        if self.a == self.b:
            raise ConfigError(f"coupling {self.a!r}-{self.b!r}: endpoints must be distinct")
        if self.scaling not in ("fixed", "sqrt-frequency"):
            raise ConfigError(
                f"coupling {self.a!r}-{self.b!r}: unknown scaling {self.scaling!r}"
            )
        if not math.isfinite(self.g0_ghz):
            raise ConfigError(f"coupling {self.a!r}-{self.b!r}: g0_ghz must be finite")

    @property
    def endpoints(self) -> tuple[str, str]:
        return (self.a, self.b)


@dataclass(frozen=True)
class Placement:
    layer: int
    x: float
    y: float


@dataclass(frozen=True)
class FluxBias:
    """Flux assignments (units of the flux quantum) for flux-tunable modes."""

    assignments: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for mode_id, flux in self.assignments.items():
            if not math.isfinite(flux):
                raise ConfigError(f"flux bias for {mode_id!r} is not finite")

    def get(self, mode_id: str, default: float = 0.0) -> float:
        return self.assignments.get(mode_id, default)

    def overlaid(self, overrides: Mapping[str, float] | "FluxBias") -> "FluxBias":
        """New bias with ``overrides`` taking precedence over this one."""
        if isinstance(overrides, FluxBias):
            overrides = overrides.assignments
        merged = dict(self.assignments)
        merged.update(overrides)
        return FluxBias(merged)


def coupler_frequency(mode: ModeSpec, flux: float) -> float:
    """Frequency (GHz) of a flux-tunable mode at the given flux.

    Uses the symmetric/asymmetric SQUID map
    ``f(phi) = f_max * (cos^2(pi phi) + d^2 sin^2(pi phi))**(1/4)``,
    even in flux and periodic with period 1.
    """
    if not mode.flux_tunable:
        raise ConfigError(f"mode {mode.id!r} is not flux-tunable")
    if not math.isfinite(flux):
        raise ConfigError(f"non-finite flux for mode {mode.id!r}")
    c = math.cos(math.pi * flux)
    s = math.sin(math.pi * flux)
    d = mode.junction_asymmetry
    return mode.max_frequency_ghz * (c * c + d * d * s * s) ** 0.25


def mode_frequency(mode: ModeSpec, flux: float | None = None) -> float:
    """Frequency (GHz) of any mode; fixed modes ignore flux."""
    if not mode.flux_tunable:
        return mode.max_frequency_ghz
    if flux is None:
        raise ConfigError(f"mode {mode.id!r} is flux-tunable but no flux was given")
    return coupler_frequency(mode, flux)


def flux_for_frequency(mode: ModeSpec, frequency_ghz: float) -> float:
    """Invert the flux map on the branch flux in [0, 0.5].

    The reachable band is [f_max * sqrt(d), f_max].
    """
    if not mode.flux_tunable:
        raise ConfigError(f"mode {mode.id!r} is not flux-tunable")
    d = mode.junction_asymmetry
    fmax = mode.max_frequency_ghz
    lo = fmax * math.sqrt(d)
    if not lo <= frequency_ghz <= fmax:
        raise ConfigError(
            f"frequency {frequency_ghz:.6f} GHz outside the tunable band "
            f"[{lo:.6f}, {fmax:.6f}] of mode {mode.id!r}"
        )
    ratio4 = (frequency_ghz / fmax) ** 4
    if d < 1.0:
        c2 = (ratio4 - d * d) / (1.0 - d * d)
    else:
        c2 = 1.0
    c2 = min(max(c2, 0.0), 1.0)
    return math.acos(math.sqrt(c2)) / math.pi


@dataclass(frozen=True)
class DeviceSpec:
    """Validated device description. Treat as immutable after construction."""

    modes: tuple[ModeSpec, ...]
    couplings: tuple[CouplingSpec, ...]
    placement: Mapping[str, Placement]
    idle_bias: FluxBias

    def __post_init__(self):
        _validate_device(self)

    # -- lookups -----------------------------------------------------------

    def mode(self, mode_id: str) -> ModeSpec:
        try:
            return self._by_id[mode_id]
        except KeyError:
            raise ConfigError(f"unknown mode id {mode_id!r}") from None

    @property
    def _by_id(self) -> dict[str, ModeSpec]:
        cached = self.__dict__.get("_by_id_cache")
        if cached is None:
            cached = {m.id: m for m in self.modes}
            object.__setattr__(self, "_by_id_cache", cached)
        return cached

    @property
    def mode_ids(self) -> tuple[str, ...]:
        return tuple(m.id for m in self.modes)

    @property
    def qubit_ids(self) -> tuple[str, ...]:
        return tuple(m.id for m in self.modes if m.kind == "qubit")

    @property
    def coupler_ids(self) -> tuple[str, ...]:
        return tuple(m.id for m in self.modes if m.is_coupler)

    def couplings_of(self, mode_id: str) -> tuple[CouplingSpec, ...]:
        return tuple(c for c in self.couplings if mode_id in c.endpoints)

    def neighbors(self, mode_id: str) -> tuple[str, ...]:
        out = []
        for c in self.couplings_of(mode_id):
            out.append(c.b if c.a == mode_id else c.a)
        return tuple(out)

    def couplers_between(self, qubit_a: str, qubit_b: str) -> tuple[str, ...]:
        """Coupler modes adjacent to both qubits (the QCQ mediators)."""
        na = set(self.neighbors(qubit_a))
        nb = set(self.neighbors(qubit_b))
        return tuple(
            m.id for m in self.modes if m.is_coupler and m.id in na and m.id in nb
        )

    def direct_coupling(self, a: str, b: str) -> CouplingSpec | None:
        for c in self.couplings:
            if set(c.endpoints) == {a, b}:
                return c
        return None

    def frequency_at(self, mode_id: str, bias: FluxBias | None = None) -> float:
        """Mode frequency (GHz) under ``bias`` (idle bias by default)."""
        mode = self.mode(mode_id)
        if not mode.flux_tunable:
            return mode.max_frequency_ghz
        use = bias if bias is not None else self.idle_bias
        return coupler_frequency(mode, use.get(mode_id, 0.0))

    # -- derived specs -----------------------------------------------------

    def with_coupling_scale(self, factor: float) -> "DeviceSpec":
        """Copy of this device with every g0 multiplied by ``factor``."""
        scaled = tuple(replace(c, g0_ghz=c.g0_ghz * factor) for c in self.couplings)
        return replace(self, couplings=scaled)

    def with_levels(self, levels: int) -> "DeviceSpec":
        """Copy of this device with every mode truncated at ``levels``."""
        modes = tuple(replace(m, levels=levels) for m in self.modes)
        return replace(self, modes=modes)

    def with_idle_bias(self, bias: FluxBias) -> "DeviceSpec":
        """Copy of this device parked at a different idle bias."""
        return replace(self, idle_bias=bias)


def _validate_device(dev: DeviceSpec) -> None:
    seen: set[str] = set()
    for m in dev.modes:
        if m.id in seen:
            raise ConfigError(f"duplicate mode id {m.id!r}")
        seen.add(m.id)

    by_id = {m.id: m for m in dev.modes}
    for c in dev.couplings:
        for end in c.endpoints:
            if end not in by_id:
                raise ConfigError(
                    f"coupling {c.a!r}-{c.b!r} references unknown mode {end!r}"
                )

    for mode_id in dev.placement:
        if mode_id not in by_id:
            raise ConfigError(f"placement references unknown mode {mode_id!r}")
    for m in dev.modes:
        if m.id not in dev.placement:
            raise ConfigError(f"mode {m.id!r} has no placement entry")

    qubit_layers = {dev.placement[m.id].layer for m in dev.modes if m.kind == "qubit"}

    for m in dev.modes:
        if not m.is_coupler:
            continue
        qubit_edges = [
            c
            for c in dev.couplings
            if m.id in c.endpoints
            and by_id[c.b if c.a == m.id else c.a].kind == "qubit"
        ]
        if len(qubit_edges) != 2:
            raise ConfigError(
                f"coupler {m.id!r} must have exactly two qubit-adjacent coupling "
                f"edges, found {len(qubit_edges)}"
            )
        qa, qb = (
            (c.b if c.a == m.id else c.a) for c in qubit_edges
        )
        la = dev.placement[qa].layer
        lb = dev.placement[qb].layer
        lc = dev.placement[m.id].layer
        if m.kind == "vertical-coupler":
            if lc in qubit_layers:
                raise ConfigError(
                    f"vertical coupler {m.id!r} is placed on qubit layer {lc}"
                )
            if not (min(la, lb) < lc < max(la, lb)):
                raise ConfigError(
                    f"vertical coupler {m.id!r} (layer {lc}) must sit between the "
                    f"layers of {qa!r} ({la}) and {qb!r} ({lb})"
                )
        else:
            if not (la == lb == lc):
                raise ConfigError(
                    f"planar coupler {m.id!r} must share a layer with both of its "
                    f"qubits ({qa!r} on {la}, {qb!r} on {lb}, coupler on {lc})"
                )

    for mode_id in dev.idle_bias.assignments:
        if mode_id not in by_id:
            raise ConfigError(f"idle_bias references unknown mode {mode_id!r}")
        if not by_id[mode_id].flux_tunable:
            raise ConfigError(f"idle_bias assigns flux to fixed-frequency mode {mode_id!r}")


# -- config document I/O ----------------------------------------------------


def _reject_unknown(entry: Mapping, allowed: set[str], where: str) -> None:
    unknown = set(entry) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def device_from_dict(doc: Mapping) -> DeviceSpec:
    """Build and validate a :class:`DeviceSpec` from a config document."""
    if not isinstance(doc, Mapping):
        raise ConfigError("device document must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "device document")
    for key in ("modes", "couplings", "placement", "idle_bias"):
        if key not in doc:
            raise ConfigError(f"device document: missing required key {key!r}")

    modes = []
    for entry in doc["modes"]:
        _reject_unknown(entry, _MODE_KEYS, f"mode entry {entry.get('id', '?')!r}")
        try:
            modes.append(
                ModeSpec(
                    id=str(entry["id"]),
                    kind=str(entry["kind"]),
                    max_frequency_ghz=float(entry["max_frequency_ghz"]),
                    anharmonicity_ghz=float(entry["anharmonicity_ghz"]),
                    levels=int(entry.get("levels", 3)),
                    flux_tunable=bool(entry.get("flux_tunable", True)),
                    junction_asymmetry=float(entry.get("junction_asymmetry", 0.0)),
                )
            )
        except KeyError as exc:
            raise ConfigError(f"mode entry {entry.get('id', '?')!r}: missing {exc}") from None

    couplings = []
    for entry in doc["couplings"]:
        _reject_unknown(entry, _COUPLING_KEYS, f"coupling entry {entry}")
        try:
            couplings.append(
                CouplingSpec(
                    a=str(entry["a"]),
                    b=str(entry["b"]),
                    g0_ghz=float(entry["g0_ghz"]),
                    scaling=str(entry.get("scaling", "fixed")),
                )
            )
        except KeyError as exc:
            raise ConfigError(f"coupling entry {entry}: missing {exc}") from None

    placement = {}
    for mode_id, entry in doc["placement"].items():
        _reject_unknown(entry, _PLACEMENT_KEYS, f"placement entry {mode_id!r}")
        try:
            placement[str(mode_id)] = Placement(
                layer=int(entry["layer"]), x=float(entry["x"]), y=float(entry["y"])
            )
        except KeyError as exc:
            raise ConfigError(f"placement entry {mode_id!r}: missing {exc}") from None

    idle = FluxBias({str(k): float(v) for k, v in doc["idle_bias"].items()})

    return DeviceSpec(
        modes=tuple(modes),
        couplings=tuple(couplings),
        placement=placement,
        idle_bias=idle,
    )


def device_to_dict(dev: DeviceSpec) -> dict:
    """Inverse of :func:`device_from_dict` (round-trips exactly)."""
    return {
        "modes": [
            {
                "id": m.id,
                "kind": m.kind,
                "max_frequency_ghz": m.max_frequency_ghz,
                "anharmonicity_ghz": m.anharmonicity_ghz,
                "levels": m.levels,
                "flux_tunable": m.flux_tunable,
                "junction_asymmetry": m.junction_asymmetry,
            }
            for m in dev.modes
        ],
        "couplings": [
            {"a": c.a, "b": c.b, "g0_ghz": c.g0_ghz, "scaling": c.scaling}
            for c in dev.couplings
        ],
        "placement": {
            mode_id: {"layer": p.layer, "x": p.x, "y": p.y}
            for mode_id, p in dev.placement.items()
        },
        "idle_bias": dict(dev.idle_bias.assignments),
    }


def load_device(source: str | Path | Mapping) -> DeviceSpec:
    """Load a device from a JSON file path or an already-parsed document."""
    if isinstance(source, Mapping):
        return device_from_dict(source)
    path = Path(source)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return device_from_dict(doc)


def save_device(dev: DeviceSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(device_to_dict(dev), indent=2, sort_keys=True) + "\n")


def bias_for_frequencies(dev: DeviceSpec, targets: Mapping[str, float]) -> FluxBias:
    """Idle bias overlaid with fluxes that park the given modes at target GHz."""
    overrides = {
        mode_id: flux_for_frequency(dev.mode(mode_id), f_ghz)
        for mode_id, f_ghz in targets.items()
    }
    return dev.idle_bias.overlaid(overrides)
