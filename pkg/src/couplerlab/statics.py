"""Static characterization: coupler spectra, residual ZZ, and closing points.

The residual ZZ strength is computed from dressed eigenenergies,
zeta = (E_11 - E_10 - E_01 + E_00) / 2pi, reported in MHz. Positive zeta
means the doubly-excited level sits above the sum of the single excitations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .device import (
    TWO_PI,
    DeviceSpec,
    FluxBias,
    coupler_frequency,
    flux_for_frequency,
    mode_frequency,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    NoSignChangeError,
    PhysicsDiagnostic,
)
from .hilbert import (
    ModeSubset,
    build_hamiltonian,
    coupling_strength_ghz,
    eigensystem,
    labeled_spectrum,
    resolve_bias,
    subset_for,
)

ZETA_TOL_MHZ = 1e-3  # 1 kHz
LABEL_OVERLAP_THRESHOLD = 0.5


def pair_subset(device: DeviceSpec, pair: Sequence[str]) -> ModeSubset:
    """Subset (q_a, couplers on the edge..., q_b) for a coupled qubit pair."""
    qa, qb = pair
    couplers = device.couplers_between(qa, qb)
    if not couplers and device.direct_coupling(qa, qb) is None:
        raise ConfigError(f"qubits {qa!r} and {qb!r} are not coupled")
    return subset_for(device, (qa, *couplers, qb))


def _pair_bias(
    device: DeviceSpec, subset: ModeSubset, coupler_flux: float
) -> dict[str, float]:
    overrides = {
        mode_id: coupler_flux
        for mode_id in subset.ids
        if device.mode(mode_id).is_coupler
    }
    return overrides


def zz_shift(
    device: DeviceSpec,
    pair: Sequence[str],
    coupler_flux: float,
    rwa: bool = False,
) -> float:
    """Residual ZZ strength (MHz, signed) of a pair at a coupler flux.

    All modes other than the pair's couplers stay at the device idle bias.
    Raises :class:`LabelingAmbiguityError` instead of returning a value when
    any of the four computational labels is near-resonant (squared overlap
    below 0.5).
    """
    subset = pair_subset(device, pair)
    if not math.isfinite(coupler_flux):
        raise ConfigError("coupler flux must be finite")
    spec = labeled_spectrum(
        device, subset, _pair_bias(device, subset, coupler_flux), rwa=rwa
    )
    n_c = len(subset.ids) - 2
    zeros = (0,) * n_c
    s00 = (0, *zeros, 0)
    s10 = (1, *zeros, 0)
    s01 = (0, *zeros, 1)
    s11 = (1, *zeros, 1)
    spec.require_unambiguous([s00, s10, s01, s11], LABEL_OVERLAP_THRESHOLD)
    zeta_rad = spec.energy(s11) - spec.energy(s10) - spec.energy(s01) + spec.energy(s00)
    return zeta_rad / TWO_PI * 1e3


@dataclass(frozen=True)
class ZZZeroResult:
    flux: float
    zeta_mhz: float
    evaluations: int
    degenerate: bool = False  # zeta was already ~0 across the whole bracket


def find_zz_zero(
    device: DeviceSpec,
    pair: Sequence[str],
    flux_bracket: tuple[float, float],
    zeta_tol_mhz: float = ZETA_TOL_MHZ,
    max_evaluations: int = 100,
) -> ZZZeroResult:
    """Locate the ZZ closing flux by bracketed secant/bisection refinement.

    Requires a sign change of zeta across the bracket; stops when
    ``|zeta| < zeta_tol_mhz``. If zeta is already below tolerance across the
    bracket (all couplings off), returns the midpoint flagged as degenerate.
    """
    lo, hi = flux_bracket
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        raise ConfigError(f"invalid flux bracket ({lo}, {hi})")

    evals = 0

    def f(x: float) -> float:
        nonlocal evals
        if evals >= max_evaluations:
            raise ConvergenceError(
                f"ZZ zero search exceeded {max_evaluations} evaluations"
            )
        evals += 1
        return zz_shift(device, pair, x)

    fa, fb = f(lo), f(hi)
    if abs(fa) < zeta_tol_mhz and abs(fb) < zeta_tol_mhz:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) < zeta_tol_mhz:
            return ZZZeroResult(mid, fm, evals, degenerate=True)
        fa_mid = fa  # fall through to bracketing against the midpoint
    if abs(fa) < zeta_tol_mhz:
        return ZZZeroResult(lo, fa, evals)
    if abs(fb) < zeta_tol_mhz:
        return ZZZeroResult(hi, fb, evals)
    if fa * fb > 0:
        raise NoSignChangeError(
            f"zeta({lo:.4f}) = {fa:.4f} MHz and zeta({hi:.4f}) = {fb:.4f} MHz "
            f"have the same sign; widen the bracket"
        )

    a, b, va, vb = lo, hi, fa, fb
    while True:
        # Secant (regula falsi) candidate, bisection fallback.
        x = b - vb * (b - a) / (vb - va)
        if not (a < x < b):
            x = 0.5 * (a + b)
        # Guard against stagnation at an endpoint.
        if min(x - a, b - x) < 1e-3 * (b - a):
            x = 0.5 * (a + b)
        vx = f(x)
        if abs(vx) < zeta_tol_mhz:
            return ZZZeroResult(x, vx, evals)
        if va * vx < 0:
            b, vb = x, vx
        else:
            a, va = x, vx


def effective_coupling(
    device: DeviceSpec,
    pair: Sequence[str],
    coupler_flux: float,
    method: str = "splitting",
    counter_rotating: bool = True,
    sweep_window_ghz: float = 0.25,
) -> float:
    """Effective qubit-qubit coupling (MHz) at a coupler flux.

    ``splitting``: sweep one pair qubit through the other and return half the
    minimum dressed single-excitation splitting (unsigned, from the full
    Hamiltonian). ``perturbative``: the dispersive QCQ estimate
    g_12 + (g_1c g_2c / 2)(1/D_1 + 1/D_2), signed, extended with the
    counter-rotating -1/S_i terms unless ``counter_rotating=False``.
    """
    if method == "perturbative":
        return _effective_coupling_perturbative(
            device, pair, coupler_flux, counter_rotating
        )
    if method == "splitting":
        return _effective_coupling_splitting(
            device, pair, coupler_flux, sweep_window_ghz
        )
    raise ConfigError(f"unknown effective-coupling method {method!r}")


def _effective_coupling_perturbative(
    device, pair, coupler_flux, counter_rotating
) -> float:
    qa, qb = pair
    subset = pair_subset(device, pair)
    flux_by_id = resolve_bias(device, subset, _pair_bias(device, subset, coupler_flux))

    direct = device.direct_coupling(qa, qb)
    g_eff = coupling_strength_ghz(subset, direct, flux_by_id) if direct else 0.0

    wa = mode_frequency(device.mode(qa), flux_by_id.get(qa))
    wb = mode_frequency(device.mode(qb), flux_by_id.get(qb))
    for cid in device.couplers_between(qa, qb):
        wc = mode_frequency(device.mode(cid), flux_by_id.get(cid))
        ga = gb = None
        for c in subset.couplings:
            if set(c.endpoints) == {qa, cid}:
                ga = coupling_strength_ghz(subset, c, flux_by_id)
            elif set(c.endpoints) == {qb, cid}:
                gb = coupling_strength_ghz(subset, c, flux_by_id)
        if ga is None or gb is None:
            raise ConfigError(f"coupler {cid!r} is missing a qubit edge")
        delta_a, delta_b = wa - wc, wb - wc
        for g, delta in ((ga, delta_a), (gb, delta_b)):
            if abs(delta) < 5.0 * abs(g):
                raise PhysicsDiagnostic(
                    f"dispersive estimate invalid: |detuning| {abs(delta):.4f} GHz "
                    f"< 5 g ({5 * abs(g):.4f} GHz) for coupler {cid!r}"
                )
        term = 0.5 * ga * gb * (1.0 / delta_a + 1.0 / delta_b)
        if counter_rotating:
            term -= 0.5 * ga * gb * (1.0 / (wa + wc) + 1.0 / (wb + wc))
        g_eff += term
    return g_eff * 1e3


def _single_excitation_gap(
    device, subset, bias_overrides, idx_a, idx_b, support_floor=0.75
):
    """Gap (rad/ns) between the two eigenstates spanning two bare states."""
    h = build_hamiltonian(device, subset, bias_overrides)
    energies, states = np.linalg.eigh(h)
    support = np.abs(states[idx_a, :]) ** 2 + np.abs(states[idx_b, :]) ** 2
    order = np.argsort(support)[::-1]
    j1, j2 = order[0], order[1]
    if support[j1] + support[j2] < 2 * support_floor:
        raise PhysicsDiagnostic(
            "single-excitation doublet is not well separated from other levels "
            f"(combined support {support[j1] + support[j2]:.3f})"
        )
    return abs(energies[j1] - energies[j2])


def _effective_coupling_splitting(device, pair, coupler_flux, window_ghz) -> float:
    qa, qb = pair
    subset = pair_subset(device, pair)
    base = _pair_bias(device, subset, coupler_flux)
    flux_by_id = resolve_bias(device, subset, base)

    mob, stat = _pick_sweepable(device, pair, flux_by_id, window_ghz)
    f_target = mode_frequency(device.mode(stat), flux_by_id.get(stat))
    mode_m = device.mode(mob)

    n_c = len(subset.ids) - 2
    occ_a = [0] * len(subset.ids)
    occ_a[0] = 1
    occ_b = [0] * len(subset.ids)
    occ_b[-1] = 1
    idx_a, idx_b = subset.index(occ_a), subset.index(occ_b)

    f_hi = min(f_target + window_ghz, mode_m.max_frequency_ghz)
    f_lo = max(
        f_target - window_ghz,
        mode_m.max_frequency_ghz * math.sqrt(mode_m.junction_asymmetry),
    )
    if not f_lo < f_target < f_hi:
        raise PhysicsDiagnostic(
            f"qubit {mob!r} cannot be swept through {f_target:.4f} GHz"
        )
    phi_lo = flux_for_frequency(mode_m, f_hi)
    phi_hi = flux_for_frequency(mode_m, f_lo)

    def gap(phi: float) -> float:
        return _single_excitation_gap(
            device, subset, {**base, mob: phi}, idx_a, idx_b
        )

    res = minimize_scalar(gap, bounds=(phi_lo, phi_hi), method="bounded",
                          options={"xatol": 1e-7})
    span = phi_hi - phi_lo
    if not (phi_lo + 1e-4 * span < res.x < phi_hi - 1e-4 * span):
        raise PhysicsDiagnostic(
            f"no avoided-crossing minimum inside the sweep window for {pair}"
        )
    return res.fun / 2.0 / TWO_PI * 1e3


def _pick_sweepable(device, pair, flux_by_id, window_ghz):
    """Choose which pair qubit to sweep: it must reach the other's frequency."""
    qa, qb = pair
    candidates = []
    for mob, stat in ((qa, qb), (qb, qa)):
        mode_m = device.mode(mob)
        if not mode_m.flux_tunable:
            continue
        f_target = mode_frequency(device.mode(stat), flux_by_id.get(stat))
        f_min = mode_m.max_frequency_ghz * math.sqrt(mode_m.junction_asymmetry)
        if f_min < f_target < mode_m.max_frequency_ghz:
            headroom = mode_m.max_frequency_ghz - f_target
            candidates.append((headroom, mob, stat))
    if not candidates:
        raise PhysicsDiagnostic(
            f"neither qubit of {pair} can be tuned through the other's frequency"
        )
    candidates.sort(reverse=True)
    _, mob, stat = candidates[0]
    return mob, stat


@dataclass(frozen=True)
class SpectrumCurve:
    mode_id: str
    samples: tuple[tuple[float, float], ...]  # (flux, dressed 0->1 freq GHz)
    warnings: tuple[tuple[float, str], ...] = ()


def coupler_spectrum_scan(
    device: DeviceSpec, coupler_id: str, flux_grid: Sequence[float]
) -> SpectrumCurve:
    """Dressed 0->1 transition of a coupler across a flux grid.

    Points where the coupler label becomes ambiguous (near a qubit-coupler
    resonance) are omitted from the curve and recorded as warnings.
    """
    mode_c = device.mode(coupler_id)
    if not mode_c.flux_tunable:
        raise ConfigError(f"{coupler_id!r} is not flux-tunable")
    grid = [float(x) for x in flux_grid]
    if not grid:
        raise ConfigError("flux grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("flux grid must be strictly increasing")

    neighbor_ids = device.neighbors(coupler_id)
    subset = subset_for(device, (coupler_id, *neighbor_ids))
    axis = subset.axis(coupler_id)
    ground = (0,) * len(subset.ids)
    excited = tuple(1 if k == axis else 0 for k in range(len(subset.ids)))

    samples: list[tuple[float, float]] = []
    warnings: list[tuple[float, str]] = []
    for flux in grid:
        spec = labeled_spectrum(device, subset, {coupler_id: flux})
        ov = spec.overlap(excited)
        if ov < LABEL_OVERLAP_THRESHOLD:
            warnings.append(
                (flux, f"coupler label ambiguous (overlap {ov:.3f}); point omitted")
            )
            continue
        samples.append((flux, spec.transition_ghz(ground, excited)))
    return SpectrumCurve(coupler_id, tuple(samples), tuple(warnings))


def flux_for_effective_coupling(
    device: DeviceSpec,
    pair: Sequence[str],
    target_mhz: float,
    flux_bracket: tuple[float, float],
) -> float:
    """Coupler flux where the perturbative effective coupling hits a target."""
    lo, hi = flux_bracket

    def f(phi: float) -> float:
        return (
            effective_coupling(device, pair, phi, method="perturbative") - target_mhz
        )

    fa, fb = f(lo), f(hi)
    if fa * fb > 0:
        raise NoSignChangeError(
            f"effective coupling does not reach {target_mhz} MHz inside "
            f"({lo}, {hi}): endpoints {fa + target_mhz:.3f}, {fb + target_mhz:.3f} MHz"
        )
    return float(brentq(f, lo, hi, xtol=1e-10))
