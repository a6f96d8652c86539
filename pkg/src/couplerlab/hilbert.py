"""Truncated multi-mode Hamiltonians and dressed-state labeling.

Hamiltonians are dense complex Hermitian matrices over the tensor product of
the subset modes, in rad/ns (angular). Eigenstates are labeled by their
maximal-overlap bare occupation tuple, assigned greedily in ascending
(total excitation, lexicographic) order with ties broken by eigenindex.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .device import TWO_PI, CouplingSpec, DeviceSpec, FluxBias, ModeSpec, mode_frequency
from .errors import ConfigError, LabelingAmbiguityError

DIMENSION_CAP = 4096

HERMITICITY_RTOL = 1e-12
ORTHONORMALITY_TOL = 1e-10


@dataclass(frozen=True)
class ModeSubset:
    """Ordered subset of device modes; order fixes the tensor-product layout."""

    device: DeviceSpec
    ids: tuple[str, ...]

    def __post_init__(self):
        if not self.ids:
            raise ConfigError("mode subset must be nonempty")
        seen = set()
        for mode_id in self.ids:
            self.device.mode(mode_id)  # raises on unknown ids
            if mode_id in seen:
                raise ConfigError(f"mode {mode_id!r} appears twice in subset")
            seen.add(mode_id)
        if self.dimension > DIMENSION_CAP:
            raise ConfigError(
                f"subset dimension {self.dimension} exceeds the dense-solver cap "
                f"of {DIMENSION_CAP}"
            )

    @property
    def modes(self) -> tuple[ModeSpec, ...]:
        return tuple(self.device.mode(i) for i in self.ids)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(m.levels for m in self.modes)

    @property
    def dimension(self) -> int:
        return int(np.prod(self.dims))

    @property
    def couplings(self) -> tuple[CouplingSpec, ...]:
        """Coupling edges with both endpoints inside the subset."""
        inside = set(self.ids)
        return tuple(
            c for c in self.device.couplings if c.a in inside and c.b in inside
        )

    def axis(self, mode_id: str) -> int:
        try:
            return self.ids.index(mode_id)
        except ValueError:
            raise ConfigError(f"mode {mode_id!r} is not in the subset") from None

    def index(self, occupation: Sequence[int]) -> int:
        """Flat basis index of a bare occupation tuple (row-major)."""
        if len(occupation) != len(self.ids):
            raise ConfigError("occupation tuple length does not match subset size")
        return int(np.ravel_multi_index(tuple(occupation), self.dims))

    def occupation(self, index: int) -> tuple[int, ...]:
        return tuple(int(n) for n in np.unravel_index(index, self.dims))

    def basis_state(self, occupation: Sequence[int]) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=complex)
        vec[self.index(occupation)] = 1.0
        return vec


def subset_for(device: DeviceSpec, ids: Iterable[str]) -> ModeSubset:
    return ModeSubset(device, tuple(ids))


def resolve_bias(
    device: DeviceSpec, subset: ModeSubset, bias: FluxBias | Mapping[str, float] | None
) -> dict[str, float]:
    """Flux for every flux-tunable subset mode: idle bias with overrides."""
    if bias is None:
        merged = device.idle_bias
    elif isinstance(bias, FluxBias):
        merged = device.idle_bias.overlaid(bias)
    else:
        merged = device.idle_bias.overlaid(FluxBias(dict(bias)))
    out = {}
    for mode in subset.modes:
        if mode.flux_tunable:
            out[mode.id] = merged.get(mode.id, 0.0)
    return out


def coupling_strength_ghz(
    subset: ModeSubset, coupling: CouplingSpec, flux_by_id: Mapping[str, float]
) -> float:
    """Coupling strength (GHz) under flux, applying the sqrt-frequency rule."""
    g = coupling.g0_ghz
    if coupling.scaling == "sqrt-frequency":
        for end in coupling.endpoints:
            mode = subset.device.mode(end)
            if mode.is_coupler and mode.flux_tunable:
                f = mode_frequency(mode, flux_by_id.get(end, 0.0))
                g *= math.sqrt(max(f, 0.0) / mode.max_frequency_ghz)
    return g


def _kron_chain(factors: Sequence[np.ndarray]) -> np.ndarray:
    out = factors[0]
    for f in factors[1:]:
        out = np.kron(out, f)
    return out


def _embedded_pair(
    subset: ModeSubset, axis_a: int, op_a: np.ndarray, axis_b: int, op_b: np.ndarray
) -> np.ndarray:
    factors = []
    for k, d in enumerate(subset.dims):
        if k == axis_a:
            factors.append(op_a)
        elif k == axis_b:
            factors.append(op_b)
        else:
            factors.append(np.eye(d))
    return _kron_chain(factors)


def lowering_op(levels: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, levels, dtype=float)), k=1)


def embedded_lowering(subset: ModeSubset, mode_id: str) -> np.ndarray:
    """Annihilation operator of one mode embedded in the full subset space."""
    axis = subset.axis(mode_id)
    factors = [
        lowering_op(d) if k == axis else np.eye(d) for k, d in enumerate(subset.dims)
    ]
    return _kron_chain(factors)


def embedded_number(subset: ModeSubset, mode_id: str) -> np.ndarray:
    axis = subset.axis(mode_id)
    factors = [
        np.diag(np.arange(d, dtype=float)) if k == axis else np.eye(d)
        for k, d in enumerate(subset.dims)
    ]
    return _kron_chain(factors)


def build_hamiltonian(
    device: DeviceSpec,
    subset: ModeSubset,
    bias: FluxBias | Mapping[str, float] | None = None,
    rwa: bool = False,
) -> np.ndarray:
    """Subset Hamiltonian (rad/ns) at the given flux bias.

    H = sum_k [w_k n_k + (alpha_k/2) n_k (n_k - 1)]
        + sum_(j,k) g_jk * (a_j + a_j^+)(a_k + a_k^+)        (rwa=False)
        + sum_(j,k) g_jk * (a_j^+ a_k + a_j a_k^+)           (rwa=True)

    Coupler-adjacent strengths follow each edge's scaling rule. The idle bias
    fills any flux assignment not overridden by ``bias``.
    """
    flux_by_id = resolve_bias(device, subset, bias)

    occ = np.indices(subset.dims).reshape(len(subset.dims), -1)
    diag = np.zeros(subset.dimension)
    for k, mode in enumerate(subset.modes):
        flux = flux_by_id.get(mode.id)
        w = TWO_PI * mode_frequency(mode, flux)
        alpha = TWO_PI * mode.anharmonicity_ghz
        n = occ[k].astype(float)
        diag += w * n + 0.5 * alpha * n * (n - 1.0)

    h = np.diag(diag).astype(complex)

    for coupling in subset.couplings:
        g = TWO_PI * coupling_strength_ghz(subset, coupling, flux_by_id)
        if g == 0.0:
            continue
        axis_a = subset.axis(coupling.a)
        axis_b = subset.axis(coupling.b)
        da, db = subset.dims[axis_a], subset.dims[axis_b]
        a_low, b_low = lowering_op(da), lowering_op(db)
        if rwa:
            term = _embedded_pair(subset, axis_a, a_low.T, axis_b, b_low)
            h += g * (term + term.conj().T)
        else:
            xa = a_low + a_low.T
            xb = b_low + b_low.T
            h += g * _embedded_pair(subset, axis_a, xa, axis_b, xb)

    return h


@dataclass(frozen=True)
class LabeledSpectrum:
    """Eigensystem with dressed states labeled by bare occupation tuples.

    ``energies`` ascend (rad/ns); ``states`` holds eigenvectors as columns
    with the global phase fixed so the largest-magnitude component is real
    positive. ``overlaps`` records the squared bare/dressed overlap of each
    assignment, the quantity an ambiguity threshold is tested against.
    """

    subset: ModeSubset
    energies: np.ndarray
    states: np.ndarray
    labels: Mapping[tuple[int, ...], int]
    overlaps: Mapping[tuple[int, ...], float]

    def eigenindex(self, occupation: Sequence[int]) -> int:
        key = tuple(int(n) for n in occupation)
        if key not in self.labels:
            raise ConfigError(f"no label for occupation {key}")
        return self.labels[key]

    def energy(self, occupation: Sequence[int]) -> float:
        return float(self.energies[self.eigenindex(occupation)])

    def state(self, occupation: Sequence[int]) -> np.ndarray:
        return self.states[:, self.eigenindex(occupation)]

    def overlap(self, occupation: Sequence[int]) -> float:
        return float(self.overlaps[tuple(int(n) for n in occupation)])

    def transition_ghz(self, lower, upper) -> float:
        """Dressed transition frequency (GHz) between two labeled states."""
        return (self.energy(upper) - self.energy(lower)) / TWO_PI

    def require_unambiguous(self, occupations, threshold: float = 0.5) -> None:
        """Raise if any assignment's squared overlap falls below threshold."""
        for occ in occupations:
            ov = self.overlap(occ)
            if ov < threshold:
                raise LabelingAmbiguityError(
                    f"bare state {tuple(occ)} maps to its dressed partner with "
                    f"squared overlap {ov:.3f} < {threshold}; system is too close "
                    f"to a resonance for unambiguous labeling"
                )


def _bare_tuples_in_order(dims: tuple[int, ...]) -> list[tuple[int, ...]]:
    tuples = list(itertools.product(*(range(d) for d in dims)))
    tuples.sort(key=lambda t: (sum(t), t))
    return tuples


def eigensystem(h: np.ndarray, subset: ModeSubset) -> LabeledSpectrum:
    """Diagonalize a Hermitian operator and label its eigenstates.

    Raises on non-Hermitian input, eigensolver failure, or loss of
    orthonormality beyond tolerance.
    """
    scale = np.max(np.abs(h)) or 1.0
    if np.max(np.abs(h - h.conj().T)) > HERMITICITY_RTOL * scale:
        raise ConfigError("operator is not Hermitian within tolerance")
    try:
        energies, states = np.linalg.eigh(h)
    except np.linalg.LinAlgError as exc:
        raise ConfigError(
            f"eigensolver failed to converge (dimension {h.shape[0]}, "
            f"|H|max {scale:.3e}): {exc}"
        ) from exc

    gram_dev = np.max(np.abs(states.conj().T @ states - np.eye(h.shape[0])))
    if gram_dev > ORTHONORMALITY_TOL:
        raise ConfigError(f"eigenvectors lost orthonormality ({gram_dev:.2e})")

    # Fix global phases: largest-magnitude component real positive.
    idx = np.argmax(np.abs(states), axis=0)
    phases = states[idx, np.arange(states.shape[1])]
    phases = phases / np.abs(phases)
    states = states * phases.conj()[None, :]

    weights = np.abs(states) ** 2  # rows: bare index, cols: eigenindex
    labels: dict[tuple[int, ...], int] = {}
    overlaps: dict[tuple[int, ...], float] = {}
    assigned = np.zeros(h.shape[0], dtype=bool)
    for bare in _bare_tuples_in_order(subset.dims):
        row = weights[subset.index(bare)].copy()
        row[assigned] = -1.0
        j = int(np.argmax(row))  # argmax takes the lowest index on ties
        assigned[j] = True
        labels[bare] = j
        overlaps[bare] = float(weights[subset.index(bare), j])

    return LabeledSpectrum(
        subset=subset,
        energies=energies,
        states=states,
        labels=labels,
        overlaps=overlaps,
    )


def labeled_spectrum(
    device: DeviceSpec,
    subset: ModeSubset,
    bias: FluxBias | Mapping[str, float] | None = None,
    rwa: bool = False,
) -> LabeledSpectrum:
    """Convenience: build the Hamiltonian at ``bias`` and label its spectrum."""
    return eigensystem(build_hamiltonian(device, subset, bias, rwa=rwa), subset)
