"""Time-domain evolution under flux schedules.

Closed-system evolution uses piecewise exponentiation: within each step the
Hamiltonian is evaluated at the midpoint flux and applied exactly through its
eigendecomposition, so windows of constant flux are propagated in a single
exact step. Open-system evolution solves the Lindblad master equation

    drho/dt = -i[H, rho] + sum_k G1_k D[a_k] rho + sum_k (Gphi_k/2) D[2 n_k] rho

with D[L]rho = L rho L+ - {L+L, rho}/2, normalized so a single qubit's
off-diagonal decays at 1/T2 = 1/(2 T1) + 1/Tphi. The generic integrator is
fixed-step RK4; the process-reconstruction helpers use an exact piecewise
propagator (Liouvillian exponentials on constant windows, Strang splitting on
pulse edges) that solves the same equation and is cross-checked in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.optimize import curve_fit, minimize_scalar

from .device import TWO_PI, DeviceSpec, FluxBias, flux_for_frequency, mode_frequency
from .errors import (
    CalibrationError,
    ConfigError,
    PhysicsDiagnostic,
    UnreachableTargetError,
)
from .hilbert import (
    LabeledSpectrum,
    ModeSubset,
    build_hamiltonian,
    embedded_lowering,
    embedded_number,
    labeled_spectrum,
    lowering_op,
    resolve_bias,
    subset_for,
)
from .statics import pair_subset

NORM_DRIFT_TOL = 1e-9
TRACE_DRIFT_TOL = 1e-6
NEGATIVITY_TOL = 1e-6


# ---------------------------------------------------------------------------
# Flux schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    t0: float
    t1: float

    def value(self, t: float) -> float:  # pragma: no cover - abstract
        raise NotImplementedError

    def breakpoints(self) -> tuple[float, ...]:
        return (self.t0, self.t1)

    def constant_on(self, a: float, b: float) -> bool:
        return False


@dataclass(frozen=True)
class ConstantSegment(Segment):
    level: float = 0.0

    def value(self, t):
        return self.level

    def constant_on(self, a, b):
        return True


@dataclass(frozen=True)
class RampSegment(Segment):
    start: float = 0.0
    stop: float = 0.0

    def value(self, t):
        s = (t - self.t0) / (self.t1 - self.t0)
        return self.start + (self.stop - self.start) * s


@dataclass(frozen=True)
class FlatTopSegment(Segment):
    """Flat pulse with raised-cosine edges of width ``edge`` inside [t0, t1]."""

    base: float = 0.0
    top: float = 0.0
    edge: float = 2.0

    def __post_init__(self):
        if self.edge < 0 or 2 * self.edge > (self.t1 - self.t0) + 1e-12:
            raise ConfigError("flat-top edges do not fit inside the segment")

    def value(self, t):
        if self.edge == 0.0:
            return self.top
        rise = self.t0 + self.edge
        fall = self.t1 - self.edge
        if t < rise:
            s = (t - self.t0) / self.edge
        elif t > fall:
            s = (self.t1 - t) / self.edge
        else:
            return self.top
        env = 0.5 * (1.0 - math.cos(math.pi * min(max(s, 0.0), 1.0)))
        return self.base + (self.top - self.base) * env

    def breakpoints(self):
        return (self.t0, self.t0 + self.edge, self.t1 - self.edge, self.t1)

    def constant_on(self, a, b):
        return self.t0 + self.edge <= a and b <= self.t1 - self.edge


class FluxSchedule:
    """Piecewise flux control for a set of flux-tunable modes.

    ``base`` values apply wherever no segment is active; modes absent from the
    schedule stay at the enclosing experiment's bias. Segments of one mode
    must not overlap.
    """

    def __init__(self, duration: float, base: Mapping[str, float] | None = None):
        if not (duration >= 0 and math.isfinite(duration)):
            raise ConfigError("schedule duration must be finite and non-negative")
        self.duration = float(duration)
        self.base: dict[str, float] = dict(base or {})
        self._tracks: dict[str, list[Segment]] = {}

    def hold(self, mode_id: str, value: float) -> "FluxSchedule":
        self.base[mode_id] = float(value)
        return self

    def add(self, mode_id: str, segment: Segment) -> "FluxSchedule":
        if not (0.0 <= segment.t0 < segment.t1 <= self.duration + 1e-9):
            raise ConfigError(
                f"segment [{segment.t0}, {segment.t1}] outside [0, {self.duration}]"
            )
        track = self._tracks.setdefault(mode_id, [])
        for other in track:
            if segment.t0 < other.t1 - 1e-12 and other.t0 < segment.t1 - 1e-12:
                raise ConfigError(f"overlapping segments for mode {mode_id!r}")
        track.append(segment)
        track.sort(key=lambda s: s.t0)
        return self

    def ramp(self, mode_id, t0, t1, start, stop) -> "FluxSchedule":
        return self.add(mode_id, RampSegment(t0, t1, start, stop))

    def flat_top(self, mode_id, base, top, t0=None, t1=None, edge=2.0) -> "FluxSchedule":
        t0 = 0.0 if t0 is None else t0
        t1 = self.duration if t1 is None else t1
        self.base.setdefault(mode_id, base)
        return self.add(mode_id, FlatTopSegment(t0, t1, base=base, top=top, edge=edge))

    def sample(self, t: float) -> dict[str, float]:
        """Flux overrides at time t for every mode this schedule controls."""
        out = dict(self.base)
        for mode_id, track in self._tracks.items():
            for seg in track:
                if seg.t0 <= t <= seg.t1:
                    out[mode_id] = seg.value(t)
                    break
            else:
                # outside all segments: hold base (or nearest segment boundary)
                if mode_id not in out and track:
                    ref = track[0] if t < track[0].t0 else track[-1]
                    out[mode_id] = ref.value(ref.t0 if t < ref.t0 else ref.t1)
        return out

    def windows(self) -> list[tuple[float, float, bool]]:
        """(t0, t1, is_constant) partition of [0, duration]."""
        points = {0.0, self.duration}
        for track in self._tracks.values():
            for seg in track:
                points.update(seg.breakpoints())
        cuts = sorted(p for p in points if 0.0 <= p <= self.duration)
        out = []
        for a, b in zip(cuts, cuts[1:]):
            if b - a < 1e-12:
                continue
            constant = all(
                seg.constant_on(a, b)
                for track in self._tracks.values()
                for seg in track
                if seg.t0 < b - 1e-12 and a < seg.t1 - 1e-12
            )
            out.append((a, b, constant))
        return out or [(0.0, self.duration, True)]


def constant_schedule(duration: float, bias: Mapping[str, float] | None = None) -> FluxSchedule:
    return FluxSchedule(duration, base=bias)


# ---------------------------------------------------------------------------
# States and noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantumState:
    """Pure state over a declared mode subset (unit norm)."""

    subset: ModeSubset
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=complex)
        object.__setattr__(self, "vector", vec)
        if vec.shape != (self.subset.dimension,):
            raise ConfigError("state dimension does not match the subset")
        if abs(np.linalg.norm(vec) - 1.0) > 1e-6:
            raise ConfigError("state vector is not normalized")

    @classmethod
    def bare(cls, subset: ModeSubset, occupation: Sequence[int]) -> "QuantumState":
        return cls(subset, subset.basis_state(occupation))

    @classmethod
    def labeled(cls, spectrum: LabeledSpectrum, occupation: Sequence[int]) -> "QuantumState":
        return cls(spectrum.subset, spectrum.state(occupation))

    def population(self, occupation: Sequence[int]) -> float:
        return float(abs(self.vector[self.subset.index(occupation)]) ** 2)

    def overlap(self, other: np.ndarray) -> complex:
        return complex(np.vdot(other, self.vector))


@dataclass(frozen=True)
class DensityState:
    """Density matrix over a declared mode subset (Hermitian, unit trace)."""

    subset: ModeSubset
    matrix: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=complex)
        object.__setattr__(self, "matrix", mat)
        d = self.subset.dimension
        if mat.shape != (d, d):
            raise ConfigError("density matrix dimension does not match the subset")
        if np.max(np.abs(mat - mat.conj().T)) > 1e-8:
            raise ConfigError("density matrix is not Hermitian")
        if abs(np.trace(mat).real - 1.0) > 1e-8:
            raise ConfigError("density matrix trace is not 1")

    @classmethod
    def from_state(cls, state: QuantumState) -> "DensityState":
        return cls(state.subset, np.outer(state.vector, state.vector.conj()))


def _per_mode_rate(spec, mode_id: str) -> float:
    """Decay rate in 1/ns from a T in microseconds (inf/None -> 0)."""
    if spec is None:
        return 0.0
    t_us = spec.get(mode_id, math.inf) if isinstance(spec, Mapping) else float(spec)
    if t_us is None or math.isinf(t_us):
        return 0.0
    if not t_us > 0:
        raise ConfigError(f"T for mode {mode_id!r} must be positive, got {t_us}")
    return 1.0 / (t_us * 1e3)


@dataclass(frozen=True)
class NoiseSpec:
    """Per-mode T1 and Tphi in microseconds; a bare float applies to every
    mode, a mapping assigns per mode id, and inf (or omission) disables the
    channel."""

    t1_us: Mapping[str, float] | float | None = None
    tphi_us: Mapping[str, float] | float | None = None

    def gamma1(self, mode_id: str) -> float:
        return _per_mode_rate(self.t1_us, mode_id)

    def gamma_phi(self, mode_id: str) -> float:
        return _per_mode_rate(self.tphi_us, mode_id)

    @property
    def is_trivial(self) -> bool:
        def trivial(spec):
            if spec is None:
                return True
            if isinstance(spec, Mapping):
                return all(v is None or math.isinf(v) for v in spec.values())
            return math.isinf(spec)

        return trivial(self.t1_us) and trivial(self.tphi_us)


def lindblad_jumps(subset: ModeSubset, noise: NoiseSpec | None):
    """(rate, L, L+L) triples for the subset under a noise spec."""
    jumps = []
    if noise is None:
        return jumps
    for mode_id in subset.ids:
        g1 = noise.gamma1(mode_id)
        if g1 > 0:
            op = embedded_lowering(subset, mode_id).astype(complex)
            jumps.append((g1, op, op.conj().T @ op))
        gphi = noise.gamma_phi(mode_id)
        if gphi > 0:
            op = 2.0 * embedded_number(subset, mode_id).astype(complex)
            jumps.append((gphi / 2.0, op, op.conj().T @ op))
    return jumps


# ---------------------------------------------------------------------------
# Propagation
# ---------------------------------------------------------------------------


class EvolutionContext:
    """Caches Hamiltonians/eigendecompositions per distinct flux bias."""

    def __init__(self, device: DeviceSpec, subset: ModeSubset, rwa: bool = False):
        self.device = device
        self.subset = subset
        self.rwa = rwa
        self._ham: dict[tuple, np.ndarray] = {}
        self._eig: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def _key(self, overrides: Mapping[str, float]) -> tuple:
        flux = resolve_bias(self.device, self.subset, overrides)
        return tuple(round(flux[m.id], 14) for m in self.subset.modes if m.flux_tunable)

    def hamiltonian(self, overrides: Mapping[str, float]) -> np.ndarray:
        key = self._key(overrides)
        h = self._ham.get(key)
        if h is None:
            h = build_hamiltonian(self.device, self.subset, overrides, rwa=self.rwa)
            self._ham[key] = h
        return h

    def eig(self, overrides: Mapping[str, float]):
        key = self._key(overrides)
        pair = self._eig.get(key)
        if pair is None:
            energies, states = np.linalg.eigh(self.hamiltonian(overrides))
            pair = (energies, states)
            self._eig[key] = pair
        return pair


def _unitary_step(ctx: EvolutionContext, overrides, dt: float, psi: np.ndarray):
    energies, states = ctx.eig(overrides)
    return states @ (np.exp(-1j * energies * dt) * (states.conj().T @ psi))


def evolve_unitary(
    device: DeviceSpec,
    subset: ModeSubset,
    schedule: FluxSchedule,
    state: QuantumState,
    dt: float = 0.01,
    _ctx: EvolutionContext | None = None,
) -> QuantumState:
    """Propagate a pure state through a flux schedule.

    Constant-flux windows are applied in one exact step; time-varying windows
    are subdivided into midpoint-sampled steps of at most ``dt``.
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    if state.subset.ids != subset.ids:
        raise ConfigError("state subset does not match the evolution subset")
    ctx = _ctx or EvolutionContext(device, subset)
    psi = state.vector.copy()
    for t0, t1, constant in schedule.windows():
        if constant:
            psi = _unitary_step(ctx, schedule.sample(0.5 * (t0 + t1)), t1 - t0, psi)
        else:
            n = max(1, math.ceil((t1 - t0) / dt))
            h = (t1 - t0) / n
            for i in range(n):
                tm = t0 + (i + 0.5) * h
                psi = _unitary_step(ctx, schedule.sample(tm), h, psi)
    drift = abs(np.linalg.norm(psi) - 1.0)
    if drift >= NORM_DRIFT_TOL:
        raise PhysicsDiagnostic(
            f"norm drift {drift:.2e} exceeds {NORM_DRIFT_TOL}; reduce dt"
        )
    psi /= np.linalg.norm(psi)
    return QuantumState(subset, psi)


def _lindblad_rhs(h, rho, jumps):
    out = -1j * (h @ rho - rho @ h)
    for rate, op, opdag_op in jumps:
        out += rate * (
            op @ rho @ op.conj().T - 0.5 * (opdag_op @ rho + rho @ opdag_op)
        )
    return out


def evolve_lindblad(
    device: DeviceSpec,
    subset: ModeSubset,
    schedule: FluxSchedule,
    noise: NoiseSpec | None,
    rho: DensityState,
    dt: float = 0.002,
) -> DensityState:
    """Fixed-step RK4 integration of the Lindblad master equation.

    ``dt`` must resolve the fastest Hamiltonian phase; a guard rejects steps
    with |E|_max * dt > 1.5 where RK4 becomes inaccurate.
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    if rho.subset.ids != subset.ids:
        raise ConfigError("state subset does not match the evolution subset")
    ctx = EvolutionContext(device, subset)
    jumps = lindblad_jumps(subset, noise)

    h0 = ctx.hamiltonian(schedule.sample(0.0))
    scale = float(np.max(np.abs(np.diag(h0).real)))
    if scale * dt > 1.5:
        raise ConfigError(
            f"dt = {dt} ns is too coarse for |E|max = {scale:.1f} rad/ns; "
            f"use dt < {1.5 / scale:.2g} ns"
        )

    mat = rho.matrix.copy()
    n = max(1, math.ceil(schedule.duration / dt))
    h_step = schedule.duration / n
    t = 0.0
    for _ in range(n):
        h_a = ctx.hamiltonian(schedule.sample(t))
        h_m = ctx.hamiltonian(schedule.sample(t + 0.5 * h_step))
        h_b = ctx.hamiltonian(schedule.sample(t + h_step))
        k1 = _lindblad_rhs(h_a, mat, jumps)
        k2 = _lindblad_rhs(h_m, mat + 0.5 * h_step * k1, jumps)
        k3 = _lindblad_rhs(h_m, mat + 0.5 * h_step * k2, jumps)
        k4 = _lindblad_rhs(h_b, mat + h_step * k3, jumps)
        mat += (h_step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        mat = 0.5 * (mat + mat.conj().T)
        t += h_step

    drift = abs(np.trace(mat).real - 1.0)
    if drift > TRACE_DRIFT_TOL:
        raise PhysicsDiagnostic(f"trace drift {drift:.2e} exceeds {TRACE_DRIFT_TOL}")
    eigs = np.linalg.eigvalsh(mat)
    if eigs[0] < -NEGATIVITY_TOL:
        raise PhysicsDiagnostic(f"density matrix eigenvalue {eigs[0]:.2e} < -{NEGATIVITY_TOL}")
    return DensityState(subset, mat)


# -- piecewise-exact open-system propagation (process reconstruction) --------


def _local_dissipator_halfstep(mode, noise: NoiseSpec | None, half_dt: float) -> np.ndarray | None:
    """exp(D_k * half_dt) for one mode's local jumps (levels^2 x levels^2)."""
    if noise is None:
        return None
    terms = []
    low = lowering_op(mode.levels).astype(complex)
    g1 = noise.gamma1(mode.id)
    if g1 > 0:
        terms.append((g1, low))
    gphi = noise.gamma_phi(mode.id)
    if gphi > 0:
        terms.append((gphi / 2.0, 2.0 * np.diag(np.arange(mode.levels)).astype(complex)))
    if not terms:
        return None
    d = mode.levels
    eye = np.eye(d)
    gen = np.zeros((d * d, d * d), dtype=complex)
    for rate, op in terms:
        opdag_op = op.conj().T @ op
        gen += rate * (
            np.kron(op, op.conj())
            - 0.5 * (np.kron(opdag_op, eye) + np.kron(eye, opdag_op.T))
        )
    return expm(gen * half_dt)


def _apply_local_superop(batch: np.ndarray, dims, k: int, s_small: np.ndarray) -> np.ndarray:
    """Apply a single-mode superoperator to a batch of density tensors."""
    n_modes = len(dims)
    d = dims[k]
    s4 = s_small.reshape(d, d, d, d)  # [i, j, i', j']
    shaped = batch.reshape(batch.shape[0], *dims, *dims)
    moved = np.tensordot(shaped, s4, axes=([1 + k, 1 + n_modes + k], [2, 3]))
    # tensordot appended the (i, j) axes at the end; move them back in place.
    moved = np.moveaxis(moved, (-2, -1), (1 + k, 1 + n_modes + k))
    dim = int(np.prod(dims))
    return moved.reshape(batch.shape[0], dim, dim)


def _liouvillian(h: np.ndarray, jumps) -> np.ndarray:
    d = h.shape[0]
    eye = np.eye(d)
    lv = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    for rate, op, opdag_op in jumps:
        lv += rate * (
            np.kron(op, op.conj())
            - 0.5 * (np.kron(opdag_op, eye) + np.kron(eye, opdag_op.T))
        )
    return lv


def propagate_density_batch(
    device: DeviceSpec,
    subset: ModeSubset,
    schedule: FluxSchedule,
    noise: NoiseSpec | None,
    batch: np.ndarray,
    edge_dt: float = 0.005,
    _ctx: EvolutionContext | None = None,
) -> np.ndarray:
    """Propagate a batch of (not necessarily Hermitian) matrices through the
    master equation, exactly on constant-flux windows and by Strang splitting
    (exact local dissipators around exact midpoint unitaries) on pulse edges.
    """
    ctx = _ctx or EvolutionContext(device, subset)
    jumps = lindblad_jumps(subset, noise)
    dims = subset.dims
    out = np.array(batch, dtype=complex)

    halfsteps: dict[float, list] = {}

    def edge_halfsteps(h_step: float):
        ops = halfsteps.get(h_step)
        if ops is None:
            ops = []
            for k, mode in enumerate(subset.modes):
                s = _local_dissipator_halfstep(mode, noise, 0.5 * h_step)
                if s is not None:
                    ops.append((k, s))
            halfsteps[h_step] = ops
        return ops

    for t0, t1, constant in schedule.windows():
        span = t1 - t0
        if constant:
            overrides = schedule.sample(0.5 * (t0 + t1))
            if not jumps:
                energies, states = ctx.eig(overrides)
                u = (states * np.exp(-1j * energies * span)) @ states.conj().T
                out = u @ out @ u.conj().T
            else:
                lv = _liouvillian(ctx.hamiltonian(overrides), jumps)
                prop = expm(lv * span)
                dim = out.shape[-1]
                out = (prop @ out.reshape(out.shape[0], dim * dim).T).T.reshape(out.shape)
        else:
            n = max(1, math.ceil(span / edge_dt))
            h_step = span / n
            locals_ = edge_halfsteps(h_step)
            for i in range(n):
                tm = t0 + (i + 0.5) * h_step
                for k, s in locals_:
                    out = _apply_local_superop(out, dims, k, s)
                energies, states = ctx.eig(schedule.sample(tm))
                u = (states * np.exp(-1j * energies * h_step)) @ states.conj().T
                out = u @ out @ u.conj().T
                for k, s in locals_:
                    out = _apply_local_superop(out, dims, k, s)
    return out


# ---------------------------------------------------------------------------
# |11>-|02> resonance location and chevron scans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResonanceInfo:
    pair: tuple[str, str]
    mobile: str
    static: str
    coupler_flux: float
    mobile_flux: float
    mobile_frequency_ghz: float
    lambda_rad: float  # |11>-|02> coupling matrix element (rad/ns)

    @property
    def g_eff_mhz(self) -> float:
        return self.lambda_rad / math.sqrt(2.0) / TWO_PI * 1e3

    @property
    def full_cycle_ns(self) -> float:
        return math.pi / self.lambda_rad


def _pick_mobile(device, pair, margin_ghz=0.01):
    """Choose the pair qubit tuned into the |11>-|02> resonance.

    The mobile qubit ends up |alpha| above the static one (it hosts the
    doubly-excited state), so it must reach f_static - alpha_mobile.
    """
    candidates = []
    for mob, stat in (pair, pair[::-1]):
        mode_m = device.mode(mob)
        if not mode_m.flux_tunable:
            continue
        f_target = device.frequency_at(stat) - mode_m.anharmonicity_ghz
        f_min = mode_m.max_frequency_ghz * math.sqrt(mode_m.junction_asymmetry)
        if f_min + margin_ghz < f_target < mode_m.max_frequency_ghz - margin_ghz:
            candidates.append((mode_m.max_frequency_ghz - f_target, mob, stat))
    if not candidates:
        raise UnreachableTargetError(
            f"neither qubit of {pair} can reach the |11>-|02> resonance"
        )
    candidates.sort(reverse=True)
    _, mob, stat = candidates[0]
    return mob, stat


def _pair_occupations(subset, mobile):
    """(|11>, |02>) occupation tuples for a pair subset, doubly-excited on the
    mobile qubit."""
    occ11 = [0] * len(subset.ids)
    occ11[0] = 1
    occ11[-1] = 1
    occ02 = [0] * len(subset.ids)
    occ02[subset.ids.index(mobile)] = 2
    return tuple(occ11), tuple(occ02)


def locate_resonance(
    device: DeviceSpec,
    pair: Sequence[str],
    coupler_flux: float,
    mobile: str | None = None,
    window_ghz: float = 0.06,
    _ctx: EvolutionContext | None = None,
) -> ResonanceInfo:
    """Find the mobile-qubit flux minimizing the dressed |11>-|02> gap.

    The minimum gap equals twice the transfer matrix element lambda; at that
    flux the chevron is centered and a full transfer cycle lasts pi/lambda.
    """
    pair = tuple(pair)
    subset = pair_subset(device, pair)
    if mobile is None:
        mobile, static = _pick_mobile(device, pair)
    else:
        static = pair[1] if mobile == pair[0] else pair[0]
    mode_m = device.mode(mobile)
    ctx = _ctx or EvolutionContext(device, subset)

    occ11, occ02 = _pair_occupations(subset, mobile)
    i11, i02 = subset.index(occ11), subset.index(occ02)

    coupler_over = {
        mid: coupler_flux for mid in subset.ids if device.mode(mid).is_coupler
    }

    f0 = device.frequency_at(static) - mode_m.anharmonicity_ghz
    f_hi = min(f0 + window_ghz, mode_m.max_frequency_ghz * 0.999999)
    f_lo = f0 - window_ghz
    phi_lo = flux_for_frequency(mode_m, f_hi)
    phi_hi = flux_for_frequency(mode_m, f_lo)

    def gap(phi: float) -> float:
        energies, states = ctx.eig({**coupler_over, mobile: phi})
        support = np.abs(states[i11, :]) ** 2 + np.abs(states[i02, :]) ** 2
        order = np.argsort(support)[::-1]
        j1, j2 = order[0], order[1]
        if support[j1] + support[j2] < 1.5:
            raise PhysicsDiagnostic(
                "|11>/|02> doublet mixes with other levels (combined support "
                f"{support[j1] + support[j2]:.3f}) at flux {phi:.4f}"
            )
        return abs(energies[j1] - energies[j2])

    res = minimize_scalar(gap, bounds=(phi_lo, phi_hi), method="bounded",
                          options={"xatol": 1e-10})
    span = phi_hi - phi_lo
    if not (phi_lo + 1e-3 * span < res.x < phi_hi - 1e-3 * span):
        raise PhysicsDiagnostic(
            f"|11>-|02> gap minimum pinned to the sweep edge for {pair}; "
            f"widen window_ghz or adjust the coupler flux"
        )
    phi_star = float(res.x)
    lam = float(res.fun) / 2.0
    return ResonanceInfo(
        pair=pair,
        mobile=mobile,
        static=static,
        coupler_flux=coupler_flux,
        mobile_flux=phi_star,
        mobile_frequency_ghz=mode_frequency(mode_m, phi_star),
        lambda_rad=lam,
    )


@dataclass(frozen=True)
class ChevronResult:
    pair: tuple[str, str]
    mobile: str
    coupler_flux: float
    resonance: ResonanceInfo
    detunings_mhz: np.ndarray
    times_ns: np.ndarray
    p02: np.ndarray  # shape (len(detunings), len(times)), row-major

    @property
    def g_eff_mhz(self) -> float:
        return self.resonance.g_eff_mhz


def chevron_scan(
    device: DeviceSpec,
    pair: Sequence[str],
    detuning_grid_mhz: Sequence[float],
    time_grid_ns: Sequence[float],
    coupler_operating_flux: float,
    mobile: str | None = None,
) -> ChevronResult:
    """Population transferred from |11> to |02> versus mobile-qubit detuning
    and hold time at a fixed coupler operating flux.

    The pair starts in the bare |11> (couplers in the ground state), the flux
    is switched instantaneously, and P(|02>) is read out in the bare basis.
    The bare pair states are the diabatic basis of the transfer, so the map
    follows the two-level Rabi formulas up to the residual coupler dressing.
    """
    detunings = np.asarray(list(detuning_grid_mhz), dtype=float)
    times = np.asarray(list(time_grid_ns), dtype=float)
    if detunings.size == 0 or times.size == 0:
        raise ConfigError("detuning and time grids must be nonempty")

    pair = tuple(pair)
    subset = pair_subset(device, pair)
    ctx = EvolutionContext(device, subset)
    res = locate_resonance(
        device, pair, coupler_operating_flux, mobile=mobile, _ctx=ctx
    )
    mode_m = device.mode(res.mobile)

    occ11, occ02 = _pair_occupations(subset, res.mobile)
    psi0 = subset.basis_state(occ11)
    target = subset.basis_state(occ02)

    coupler_over = {
        mid: coupler_operating_flux
        for mid in subset.ids
        if device.mode(mid).is_coupler
    }

    p02 = np.empty((detunings.size, times.size))
    for i, delta in enumerate(detunings):
        f = res.mobile_frequency_ghz + delta * 1e-3
        try:
            phi = flux_for_frequency(mode_m, f)
        except ConfigError:
            raise ConfigError(
                f"detuning {delta} MHz puts {res.mobile!r} outside its tunable band"
            ) from None
        energies, states = ctx.eig({**coupler_over, res.mobile: phi})
        amps0 = states.conj().T @ psi0
        proj = states.conj().T @ target
        phases = np.exp(-1j * np.outer(energies, times))
        p02[i, :] = np.abs(proj.conj() @ (phases * amps0[:, None])) ** 2
    return ChevronResult(
        pair=pair,
        mobile=res.mobile,
        coupler_flux=coupler_operating_flux,
        resonance=res,
        detunings_mhz=detunings,
        times_ns=times,
        p02=p02,
    )


# ---------------------------------------------------------------------------
# CZ calibration and gate fidelity
# ---------------------------------------------------------------------------

LAMBDA_FLOOR_RAD = TWO_PI * 5e-5  # 0.05 MHz: below this there is no usable transfer


def _wrap_angle(x: float) -> float:
    return (x + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class CZCalibration:
    """Operating point and corrections of a calibrated diabatic CZ gate.

    ``duration_ns`` is the full pulse length including both cosine edges.
    ``phi_a``/``phi_b`` are the single-qubit virtual-Z corrections (rad)
    accumulated by the first/second pair qubit.
    """

    pair: tuple[str, str]
    mobile: str
    coupler_flux: float
    qubit_flux: float
    duration_ns: float
    edge_ns: float
    phi_a: float
    phi_b: float
    conditional_phase_rad: float
    leakage: float
    g_eff_mhz: float

    def to_dict(self) -> dict:
        return {
            "pair": list(self.pair),
            "mobile": self.mobile,
            "coupler_flux": self.coupler_flux,
            "qubit_flux": self.qubit_flux,
            "duration_ns": self.duration_ns,
            "edge_ns": self.edge_ns,
            "phi_a": self.phi_a,
            "phi_b": self.phi_b,
            "conditional_phase_rad": self.conditional_phase_rad,
            "leakage": self.leakage,
            "g_eff_mhz": self.g_eff_mhz,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CZCalibration":
        return cls(
            pair=tuple(doc["pair"]),
            mobile=doc["mobile"],
            coupler_flux=float(doc["coupler_flux"]),
            qubit_flux=float(doc["qubit_flux"]),
            duration_ns=float(doc["duration_ns"]),
            edge_ns=float(doc["edge_ns"]),
            phi_a=float(doc["phi_a"]),
            phi_b=float(doc["phi_b"]),
            conditional_phase_rad=float(doc["conditional_phase_rad"]),
            leakage=float(doc["leakage"]),
            g_eff_mhz=float(doc["g_eff_mhz"]),
        )


def cz_schedule(
    device: DeviceSpec, calibration: CZCalibration
) -> FluxSchedule:
    """Flux schedule of a calibrated CZ pulse (mobile qubit + coupler)."""
    return _gate_schedule(
        device,
        calibration.pair,
        calibration.mobile,
        calibration.qubit_flux,
        calibration.coupler_flux,
        calibration.duration_ns,
        calibration.edge_ns,
    )


def _gate_schedule(device, pair, mobile, qubit_flux, coupler_flux, duration, edge):
    subset = pair_subset(device, pair)
    sched = FluxSchedule(duration)
    idle = device.idle_bias
    sched.flat_top(mobile, base=idle.get(mobile, 0.0), top=qubit_flux, edge=edge)
    for mid in subset.ids:
        if device.mode(mid).is_coupler:
            sched.flat_top(mid, base=idle.get(mid, 0.0), top=coupler_flux, edge=edge)
    return sched


def _computational_occupations(subset):
    """Occupation tuples for |00>, |01>, |10>, |11> (pair order a, b)."""
    n = len(subset.ids)
    out = []
    for i in (0, 1):
        for j in (0, 1):
            occ = [0] * n
            occ[0] = i
            occ[-1] = j
            out.append(tuple(occ))
    return out  # index m = 2i + j


def calibrate_cz(
    device: DeviceSpec,
    pair: Sequence[str],
    coupler_flux_guess: float,
    phase_tolerance_rad: float = 0.01,
    leakage_threshold: float = 1e-3,
    edge_ns: float = 6.0,
    dt: float = 0.005,
    max_phase_iterations: int = 8,
    mobile: str | None = None,
) -> CZCalibration:
    """Calibrate a diabatic CZ on a coupled pair at a coupler operating flux.

    Steps: (1) center the |11>-|02> resonance in mobile-qubit flux via the
    dressed-gap minimum; (2) set the duration to one full transfer cycle by
    maximizing the |11> return population; (3) extract single-qubit phases
    from the four computational evolutions; (4) nudge the mobile flux until
    the conditional phase lands on pi, re-refining the duration each step.
    """
    pair = tuple(pair)
    subset = pair_subset(device, pair)
    ctx = EvolutionContext(device, subset)
    res = locate_resonance(device, pair, coupler_flux_guess, mobile=mobile, _ctx=ctx)
    if res.lambda_rad < LAMBDA_FLOOR_RAD:
        raise CalibrationError(
            f"no resonant |11>-|02> transfer at coupler flux {coupler_flux_guess}: "
            f"matrix element {res.g_eff_mhz * math.sqrt(2):.4f} MHz is below the floor"
        )

    ref = labeled_spectrum(device, subset, None)
    comp_occ = _computational_occupations(subset)
    ref.require_unambiguous(comp_occ, 0.8)
    comp_vecs = [ref.state(occ) for occ in comp_occ]
    psi11 = comp_vecs[3]

    d_guess = res.full_cycle_ns + edge_ns

    def schedule_for(phi_q, duration):
        return _gate_schedule(
            device, pair, res.mobile, phi_q, coupler_flux_guess, duration, edge_ns
        )

    def return_pop(phi_q, duration):
        sched = schedule_for(phi_q, duration)
        psi = evolve_unitary(
            device, subset, sched, QuantumState(subset, psi11), dt, _ctx=ctx
        )
        return abs(np.vdot(psi11, psi.vector)) ** 2

    def refine_duration(phi_q, d0):
        lo = max(2.0 * edge_ns + 0.1, 0.6 * d0)
        hi = 1.5 * d0
        r = minimize_scalar(
            lambda d: -return_pop(phi_q, d),
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": 1e-4},
        )
        return float(r.x), float(-r.fun)

    def measure(phi_q, duration):
        sched = schedule_for(phi_q, duration)
        phases = []
        leak = 0.0
        for occ, vec in zip(comp_occ, comp_vecs):
            psi = evolve_unitary(
                device, subset, sched, QuantumState(subset, vec), dt, _ctx=ctx
            ).vector
            amp = np.vdot(vec, psi)
            phases.append(math.atan2(amp.imag, amp.real))
            p_comp = sum(abs(np.vdot(v, psi)) ** 2 for v in comp_vecs)
            leak = max(leak, 1.0 - p_comp)
        phi00, phi01, phi10, phi11_ = phases
        cond = _wrap_angle(phi11_ - phi10 - phi01 + phi00)
        return phases, cond, leak

    phi_q = res.mobile_flux
    duration, _ = refine_duration(phi_q, d_guess)
    phases, cond, leak = measure(phi_q, duration)
    err = _wrap_angle(cond - math.pi)

    # Secant in mobile flux on the conditional-phase error. The return
    # population is detuning-insensitive at a full cycle, so this knob is
    # orthogonal to the duration refinement.
    dphi = 2e-5
    prev_phi, prev_err = phi_q, err
    for _ in range(max_phase_iterations):
        if abs(err) < 0.3 * phase_tolerance_rad:
            break
        trial_phi = phi_q + dphi if prev_phi == phi_q else None
        if trial_phi is None:
            slope = (err - prev_err) / (phi_q - prev_phi)
            if slope == 0:
                break
            trial_phi = phi_q - err / slope
        prev_phi, prev_err = phi_q, err
        phi_q = trial_phi
        duration, _ = refine_duration(phi_q, duration)
        phases, cond, leak = measure(phi_q, duration)
        err = _wrap_angle(cond - math.pi)

    if abs(err) > phase_tolerance_rad:
        raise CalibrationError(
            f"conditional phase {cond:.4f} rad did not reach pi +/- "
            f"{phase_tolerance_rad} within the refinement budget"
        )
    if leak > leakage_threshold:
        raise CalibrationError(
            f"leakage {leak:.2e} exceeds threshold {leakage_threshold}"
        )

    phi00, phi01, phi10, _ = phases
    return CZCalibration(
        pair=pair,
        mobile=res.mobile,
        coupler_flux=coupler_flux_guess,
        qubit_flux=phi_q,
        duration_ns=duration,
        edge_ns=edge_ns,
        phi_a=_wrap_angle(phi10 - phi00),
        phi_b=_wrap_angle(phi01 - phi00),
        conditional_phase_rad=cond,
        leakage=leak,
        g_eff_mhz=res.g_eff_mhz,
    )


IDEAL_CZ = np.diag([1.0, 1.0, 1.0, -1.0]).astype(complex)


@dataclass(frozen=True)
class GateProcess:
    """Two-qubit process reconstructed on the computational subspace.

    ``superoperator`` is the 16x16 row-major-vec superoperator in the dressed
    computational basis, virtual-Z corrections already applied.
    """

    superoperator: np.ndarray
    average_gate_fidelity: float
    leakage: float


def reconstruct_cz_process(
    device: DeviceSpec,
    calibration: CZCalibration,
    noise: NoiseSpec | None = None,
    edge_dt: float = 0.005,
) -> GateProcess:
    """Propagate the 16 computational basis operators through the calibrated
    pulse (Lindblad when noise is given) and score against the ideal CZ."""
    subset = pair_subset(device, calibration.pair)
    if device.couplers_between(*calibration.pair) == () and (
        device.direct_coupling(*calibration.pair) is None
    ):
        raise ConfigError(f"calibration does not match device pair {calibration.pair}")
    ctx = EvolutionContext(device, subset)
    ref = labeled_spectrum(device, subset, None)
    comp_occ = _computational_occupations(subset)
    vecs = np.stack([ref.state(occ) for occ in comp_occ], axis=1)  # (D, 4)

    batch = np.stack(
        [np.outer(vecs[:, k], vecs[:, l].conj()) for k in range(4) for l in range(4)]
    )
    sched = cz_schedule(device, calibration)
    out = propagate_density_batch(
        device, subset, sched, noise, batch, edge_dt=edge_dt, _ctx=ctx
    )

    # Project onto the computational dressed states: S[(i,j),(k,l)] with
    # row-major vec indices r = 4i + j, c = 4k + l (batch is ordered by c).
    s = np.einsum("di,bde,ej->ijb", vecs.conj(), out, vecs).reshape(16, 16)

    zcorr = np.diag(
        [
            1.0,
            np.exp(-1j * calibration.phi_b),
            np.exp(-1j * calibration.phi_a),
            np.exp(-1j * (calibration.phi_a + calibration.phi_b)),
        ]
    )
    s = np.kron(zcorr, zcorr.conj()) @ s

    s_ideal = np.kron(IDEAL_CZ, IDEAL_CZ.conj())
    d = 4
    f_avg = (np.trace(s_ideal.conj().T @ s).real + d) / (d * d + d)

    leak = 0.0
    for k in range(4):
        rho_out = out[4 * k + k]
        p_comp = float(np.einsum("di,de,ei->", vecs.conj(), rho_out, vecs).real)
        leak = max(leak, 1.0 - p_comp)
    return GateProcess(superoperator=s, average_gate_fidelity=float(f_avg), leakage=leak)


def gate_fidelity(
    device: DeviceSpec,
    calibration: CZCalibration,
    noise: NoiseSpec | None = None,
    edge_dt: float = 0.005,
) -> dict:
    """Average gate fidelity and leakage of a calibrated CZ under noise."""
    proc = reconstruct_cz_process(device, calibration, noise, edge_dt=edge_dt)
    return {
        "average_gate_fidelity": proc.average_gate_fidelity,
        "leakage": proc.leakage,
    }


# ---------------------------------------------------------------------------
# Equal-coupling calibration and joint W-state evolution
# ---------------------------------------------------------------------------


def _branch_subset(device, center, target, spectators=()):
    couplers = device.couplers_between(center, target)
    if not couplers and device.direct_coupling(center, target) is None:
        raise ConfigError(f"{center!r} and {target!r} are not coupled")
    extra = tuple(s for s in spectators if s not in couplers)
    return subset_for(device, (center, *couplers, *extra, target))


def _branch_trace(device, subset, bias, n_samples=256):
    """(times, transfer population) for the bare center excitation."""
    h = build_hamiltonian(device, subset, bias)
    energies, states = np.linalg.eigh(h)

    occ_c = [0] * len(subset.ids)
    occ_c[0] = 1
    occ_t = [0] * len(subset.ids)
    occ_t[-1] = 1
    psi0 = subset.basis_state(occ_c)
    targ = subset.basis_state(occ_t)

    i_c, i_t = subset.index(occ_c), subset.index(occ_t)
    support = np.abs(states[i_c, :]) ** 2 + np.abs(states[i_t, :]) ** 2
    order = np.argsort(support)[::-1]
    gap = abs(energies[order[0]] - energies[order[1]])
    f_est_mhz = max(gap / TWO_PI * 1e3, 1e-3)

    t_max = 1.3e3 / f_est_mhz
    times = np.linspace(0.0, t_max, n_samples)
    amps0 = states.conj().T @ psi0
    proj = states.conj().T @ targ
    phases = np.exp(-1j * np.outer(energies, times))
    pop = np.abs(proj.conj() @ (phases * amps0[:, None])) ** 2
    return times, pop, f_est_mhz


def pairwise_oscillation_mhz(
    device: DeviceSpec,
    center: str,
    target: str,
    bias: FluxBias | Mapping[str, float] | None = None,
    spectators: Sequence[str] = (),
    n_samples: int = 256,
) -> float:
    """Vacuum-Rabi oscillation frequency (MHz) of one center-target branch.

    The branch subset (optionally extended with spectator couplers so the
    center sees the same dressing environment as in the joint experiment)
    starts in the bare excitation on the center qubit; the transfer
    population is fitted to A sin^2(pi f t) + c.
    """
    subset = _branch_subset(device, center, target, spectators)
    times, pop, f_est_mhz = _branch_trace(device, subset, bias, n_samples)

    def model(t, amp, f_mhz, off):
        return amp * np.sin(math.pi * f_mhz * 1e-3 * t) ** 2 + off

    p0 = [max(pop.max() - pop.min(), 1e-3), f_est_mhz, pop.min()]
    try:
        popt, _ = curve_fit(model, times, pop, p0=p0, maxfev=5000)
    except RuntimeError as exc:
        raise PhysicsDiagnostic(
            f"could not fit an oscillation for branch {center}-{target}: {exc}"
        ) from None
    f_fit = abs(float(popt[1]))
    if popt[0] < 0.05:
        raise PhysicsDiagnostic(
            f"branch {center}-{target} shows no population transfer "
            f"(amplitude {popt[0]:.3f}); cannot extract a frequency"
        )
    return f_fit


def _branch_gap_mhz(device, center, target, spectators, bias) -> float:
    """Single-excitation doublet gap (MHz) of a branch: the oscillation
    frequency without the trace fit, for fast inner calibration loops."""
    subset = _branch_subset(device, center, target, spectators)
    h = build_hamiltonian(device, subset, bias)
    energies, states = np.linalg.eigh(h)
    occ_c = [0] * len(subset.ids)
    occ_c[0] = 1
    occ_t = [0] * len(subset.ids)
    occ_t[-1] = 1
    i_c, i_t = subset.index(occ_c), subset.index(occ_t)
    support = np.abs(states[i_c, :]) ** 2 + np.abs(states[i_t, :]) ** 2
    order = np.argsort(support)[::-1]
    return abs(energies[order[0]] - energies[order[1]]) / TWO_PI * 1e3


def equalize_couplings(
    device: DeviceSpec,
    center: str,
    targets: Sequence[str],
    bias: FluxBias | Mapping[str, float] | None = None,
    target_osc_mhz: float | None = None,
    rel_tol: float = 0.01,
    max_iterations: int = 16,
    align_targets: bool = True,
    rounds: int = 3,
) -> FluxBias:
    """Find working fluxes where all center-target couplings are equal.

    Each branch is measured with the center's other branch couplers as
    spectators, so the center carries the same coupler-induced frequency
    shifts as in the joint system. Per round: (1) with ``align_targets``,
    each target's flux is retuned to the oscillation-frequency minimum
    (resonance with the dressed center); (2) each branch coupler's flux is
    adjusted by a 1D secant until the oscillation frequencies match the
    slowest branch (or ``target_osc_mhz``, twice the desired coupling)
    within ``rel_tol``.
    """
    targets = tuple(targets)
    if isinstance(bias, FluxBias):
        working = device.idle_bias.overlaid(bias)
    else:
        working = device.idle_bias.overlaid(FluxBias(dict(bias or {})))

    branch_couplers = {}
    for t in targets:
        couplers = device.couplers_between(center, t)
        if len(couplers) != 1:
            raise ConfigError(
                f"branch {center}-{t} must have exactly one tunable coupler"
            )
        branch_couplers[t] = couplers[0]
    all_couplers = tuple(branch_couplers[t] for t in targets)

    state = dict(working.assignments)

    def spectators_for(t):
        return tuple(c for c in all_couplers if c != branch_couplers[t])

    def osc(t):
        try:
            return _branch_gap_mhz(
                device, center, t, spectators_for(t), FluxBias(state)
            )
        except PhysicsDiagnostic as exc:
            raise UnreachableTargetError(
                f"branch {center}-{t} cannot oscillate: {exc}"
            ) from exc

    def retune_target(t):
        mode_t = device.mode(t)
        if not mode_t.flux_tunable:
            return
        f_now = mode_frequency(mode_t, state.get(t, 0.0))
        window = 0.02  # GHz, covers coupler-induced shifts of a few MHz
        f_hi = min(f_now + window, mode_t.max_frequency_ghz * 0.999999)
        f_lo = f_now - window
        phi_lo = flux_for_frequency(mode_t, f_hi)
        phi_hi = flux_for_frequency(mode_t, f_lo)

        def freq_at(phi):
            state[t] = phi
            return osc(t)

        r = minimize_scalar(freq_at, bounds=(phi_lo, phi_hi), method="bounded",
                            options={"xatol": 1e-9})
        state[t] = float(r.x)

    def set_coupler(t, goal):
        phi = state.get(branch_couplers[t], 0.0)

        def freq_at(phi_c):
            state[branch_couplers[t]] = phi_c
            if align_targets:
                retune_target(t)
            return osc(t)

        f_val = freq_at(phi)
        if abs(f_val - goal) <= 0.5 * rel_tol * goal:
            return f_val
        phi_prev, f_prev = phi, f_val
        phi_try = min(phi + 0.02, 0.49)
        for _ in range(max_iterations):
            if not 0.0 <= phi_try < 0.5:
                raise UnreachableTargetError(
                    f"coupler {branch_couplers[t]!r} cannot reach an oscillation "
                    f"of {goal:.3f} MHz within its flux range"
                )
            f_try = freq_at(phi_try)
            if abs(f_try - goal) <= 0.3 * rel_tol * goal:
                return f_try
            denom = f_try - f_prev
            if abs(denom) < 1e-9:
                raise UnreachableTargetError(
                    f"branch {center}-{t}: oscillation frequency does not respond "
                    f"to coupler flux (stuck at {f_try:.3f} MHz)"
                )
            step = (goal - f_try) * (phi_try - phi_prev) / denom
            phi_prev, f_prev = phi_try, f_try
            phi_try = phi_try + max(min(step, 0.05), -0.05)
        raise UnreachableTargetError(
            f"branch {center}-{t} did not converge to {goal:.3f} MHz in "
            f"{max_iterations} iterations"
        )

    if align_targets:
        for t in targets:
            retune_target(t)
    f_now = {t: osc(t) for t in targets}
    goal = target_osc_mhz if target_osc_mhz is not None else min(f_now.values())

    for _ in range(rounds):
        for t in targets:
            f_now[t] = set_coupler(t, goal)
        spread = max(abs(f_now[t] - goal) for t in targets)
        if spread <= rel_tol * goal:
            break

    return FluxBias(state)


@dataclass(frozen=True)
class WStateResult:
    times_ns: np.ndarray
    populations: Mapping[str, np.ndarray]  # single-excitation population per qubit
    w_fidelity: np.ndarray
    t_star_ns: float
    max_w_fidelity: float
    pairwise_osc_mhz: Mapping[str, float]
    mean_coupling_mhz: float
    equalized: bool
    warnings: tuple[str, ...] = ()


def wstate_evolution(
    device: DeviceSpec,
    center: str,
    targets: Sequence[str],
    equalized_fluxes: FluxBias,
    time_grid_ns: Sequence[float],
    equal_tol: float = 0.05,
) -> WStateResult:
    """Joint evolution of the center + three targets under equalized couplings.

    Starts from the bare single excitation on the center qubit and tracks the
    populations of all single-excitation states plus the overlap with the
    target W state (equal superposition over the three targets). Unequal
    pairwise oscillation frequencies (beyond ``equal_tol``) are reported as a
    loud warning on the result, not silently ignored.
    """
    targets = tuple(targets)
    if len(targets) != 3:
        raise ConfigError("wstate_evolution expects exactly three target qubits")
    times = np.asarray(list(time_grid_ns), dtype=float)
    if times.size == 0:
        raise ConfigError("time grid must be nonempty")

    all_couplers = []
    for t in targets:
        all_couplers.extend(device.couplers_between(center, t))
    osc = {}
    for t in targets:
        spect = tuple(
            c for c in all_couplers if c not in device.couplers_between(center, t)
        )
        osc[t] = pairwise_oscillation_mhz(
            device, center, t, equalized_fluxes, spectators=spect
        )
    spread = (max(osc.values()) - min(osc.values())) / max(osc.values())
    warnings = []
    equalized = spread <= equal_tol
    if not equalized:
        warnings.append(
            f"pairwise oscillation frequencies differ by {spread:.1%} "
            f"(> {equal_tol:.0%}): {osc}; couplings are not equalized"
        )

    couplers = []
    for t in targets:
        couplers.extend(device.couplers_between(center, t))
    subset = subset_for(device, (center, *targets, *couplers))

    h = build_hamiltonian(device, subset, equalized_fluxes)
    energies, states = np.linalg.eigh(h)

    n = len(subset.ids)
    occ0 = [0] * n
    occ0[0] = 1
    psi0 = subset.basis_state(occ0)

    single = {center: subset.basis_state(occ0)}
    for t in targets:
        occ = [0] * n
        occ[subset.ids.index(t)] = 1
        single[t] = subset.basis_state(occ)
    w_vec = sum(single[t] for t in targets) / math.sqrt(3.0)

    amps0 = states.conj().T @ psi0
    phases = np.exp(-1j * np.outer(energies, times))
    traj = states @ (phases * amps0[:, None])  # (D, n_times)

    populations = {
        q: np.abs(vec.conj() @ traj) ** 2 for q, vec in single.items()
    }
    w_fid = np.abs(w_vec.conj() @ traj) ** 2

    j = int(np.argmax(w_fid))
    t_star, f_star = _parabolic_peak(times, w_fid, j)

    return WStateResult(
        times_ns=times,
        populations=populations,
        w_fidelity=w_fid,
        t_star_ns=t_star,
        max_w_fidelity=f_star,
        pairwise_osc_mhz=osc,
        mean_coupling_mhz=float(np.mean(list(osc.values())) / 2.0),
        equalized=equalized,
        warnings=tuple(warnings),
    )


def _parabolic_peak(x, y, j):
    if 0 < j < len(x) - 1:
        x0, x1, x2 = x[j - 1], x[j], x[j + 1]
        y0, y1, y2 = y[j - 1], y[j], y[j + 1]
        denom = (x0 - x1) * (x0 - x2) * (x1 - x2)
        if denom != 0:
            a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom
            b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom
            if a < 0:
                xv = -b / (2 * a)
                if x0 <= xv <= x2:
                    c = y1 - a * x1 * x1 - b * x1
                    return float(xv), float(a * xv * xv + b * xv + c)
    return float(x[j]), float(y[j])
