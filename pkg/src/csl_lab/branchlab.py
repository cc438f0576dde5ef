"""One-dimensional lattice demonstration of branch isolation under linear dynamics.

Units are hbar = m = 1.  The Hamiltonian is the three-point kinetic stencil
plus a diagonal potential, with hard walls at both ends of the grid.  Two
wave packets with compact support are tracked through half-open index
intervals that grow by one site per step on each side.

The detector coordinates of a real measurement have no place here: the
lattice coordinate stands in for the measured particle alone.  That keeps
the two ingredients the isolation argument needs, disjoint supports and a
local linear H.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Any, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .core import ValidationError

TRUNCATION_WIDTHS = 6.0
STENCIL_REACH = 1
MIN_GAP = 2

Region = tuple[int, int]


class BranchOverlapError(ValidationError):
    pass


@dataclass(frozen=True)
class LatticeWave:
    values: np.ndarray
    dx: float
    potential: np.ndarray
    region_plus: Region
    region_minus: Region
    pad: int = 16
    collided: bool = False
    collision_step: int | None = None
    steps_taken: int = 0

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.size) * self.dx

    def norm(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2) * self.dx)

    def region_norms(self) -> tuple[float, float]:
        return (
            float(np.sum(np.abs(_restrict(self.values, self.region_plus)) ** 2) * self.dx),
            float(np.sum(np.abs(_restrict(self.values, self.region_minus)) ** 2) * self.dx),
        )

    def branch(self, which: str) -> "LatticeWave":
        """The wave restricted to one tracked region (zero elsewhere)."""
        region = {"plus": self.region_plus, "minus": self.region_minus}[which]
        return replace(self, values=_restrict(self.values, region))

    def outside_max(self) -> float:
        """Largest |psi| on sites outside both tracked regions."""
        mask = np.ones(self.size, dtype=bool)
        for lo, hi in (self.region_plus, self.region_minus):
            mask[lo:hi] = False
        return float(np.abs(self.values[mask]).max()) if mask.any() else 0.0

    def region_gap(self) -> int:
        return _gap(self.region_plus, self.region_minus)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site", "x", "re", "im", "abs2"])
        for j, (x, v) in enumerate(zip(self.positions, self.values)):
            w.writerow([j, repr(float(x)), repr(float(v.real)), repr(float(v.imag)), repr(float(abs(v) ** 2))])
        return buf.getvalue()


def _restrict(values: np.ndarray, region: Region) -> np.ndarray:
    out = np.zeros_like(values)
    out[region[0]:region[1]] = values[region[0]:region[1]]
    return out


def _gap(a: Region, b: Region) -> int:
    """Sites strictly between two half-open intervals; negative when they overlap."""
    if a[0] > b[0]:
        a, b = b, a
    return b[0] - a[1]


def _packet(x: np.ndarray, center: float, width: float, momentum: float) -> np.ndarray:
    psi = np.exp(-((x - center) ** 2) / (4 * width**2) + 1j * momentum * x)
    psi[np.abs(x - center) > TRUNCATION_WIDTHS * width] = 0
    return psi


def init_two_packets(
    grid_size: int,
    dx: float,
    centers: Sequence[float],
    widths: Sequence[float],
    momenta: Sequence[float],
    a_plus: complex,
    a_minus: complex,
    pad: int = 16,
    potential: np.ndarray | None = None,
) -> LatticeWave:
    """a_plus * packet_plus + a_minus * packet_minus, each packet normalized on its own.

    Packets are Gaussians in |psi|^2 with standard deviation ``width``,
    truncated to zero beyond six widths.  Each tracked region is the packet
    support plus ``pad`` sites on both sides.
    """
    if abs(abs(a_plus) ** 2 + abs(a_minus) ** 2 - 1) > 1e-12:
        raise ValidationError("|a_plus|^2 + |a_minus|^2 must equal 1")
    x = np.arange(grid_size) * dx
    regions = []
    parts = []
    for c, w, k in zip(centers, widths, momenta):
        psi = _packet(x, c, w, k)
        nz = np.flatnonzero(psi)
        if nz.size == 0:
            raise ValidationError("packet support lies outside the grid")
        psi /= math.sqrt(np.sum(np.abs(psi) ** 2) * dx)
        parts.append(psi)
        regions.append((max(0, int(nz[0]) - pad), min(grid_size, int(nz[-1]) + 1 + pad)))
    if _gap(regions[0], regions[1]) < MIN_GAP:
        raise BranchOverlapError("branches not disjoint")
    values = a_plus * parts[0] + a_minus * parts[1]
    pot = np.zeros(grid_size) if potential is None else np.asarray(potential, dtype=np.float64)
    return LatticeWave(values, float(dx), pot, regions[0], regions[1], pad)


def hamiltonian_apply(wave: LatticeWave | np.ndarray, dx: float | None = None, potential: np.ndarray | None = None) -> np.ndarray:
    """-(1/2) second difference / dx^2 + V, hard walls outside the grid."""
    if isinstance(wave, LatticeWave):
        values, dx, potential = wave.values, wave.dx, wave.potential
    else:
        values = np.asarray(wave)
    lap = -2.0 * values
    lap[1:] += values[:-1]
    lap[:-1] += values[1:]
    out = -0.5 * lap / dx**2
    if potential is not None:
        out = out + potential * values
    return out


def _cn_bands(size: int, dx: float, dt: float, potential: np.ndarray):
    """Banded (1 + i dt H / 2) and the off/diag coefficients of (1 - i dt H / 2)."""
    off = -0.5 / dx**2
    diag = 1.0 / dx**2 + potential
    ab = np.zeros((3, size), dtype=complex)
    ab[0, 1:] = 0.5j * dt * off
    ab[1] = 1 + 0.5j * dt * diag
    ab[2, :-1] = 0.5j * dt * off
    return ab, -0.5j * dt * off, 1 - 0.5j * dt * diag


def cn_propagate(
    values: np.ndarray, dx: float, dt: float, steps: int, potential: np.ndarray | None = None,
    nonlinear_strength: float = 0.0,
) -> np.ndarray:
    """Crank-Nicolson steps on a bare value array.

    ``nonlinear_strength`` g adds g|psi|^2 to the potential each step; it
    exists only to show that the linearity check can fail.
    """
    psi = np.asarray(values, dtype=complex).copy()
    pot = np.zeros(psi.size) if potential is None else np.asarray(potential, dtype=np.float64)
    ab, b_off, b_diag = _cn_bands(psi.size, dx, dt, pot)
    for _ in range(steps):
        if nonlinear_strength:
            ab, b_off, b_diag = _cn_bands(psi.size, dx, dt, pot + nonlinear_strength * np.abs(psi) ** 2)
        rhs = b_diag * psi
        rhs[1:] += b_off * psi[:-1]
        rhs[:-1] += b_off * psi[1:]
        psi = solve_banded((1, 1), ab, rhs, check_finite=False)
    return psi


def _grow(region: Region, size: int) -> Region:
    return max(0, region[0] - STENCIL_REACH), min(size, region[1] + STENCIL_REACH)


def evolve_unitary(wave: LatticeWave, dt: float, steps: int, nonlinear_strength: float = 0.0) -> LatticeWave:
    """Crank-Nicolson evolution with light-cone region tracking.

    Stops early, with ``collided`` set, at the first step whose grown regions
    would come closer than two sites.
    """
    psi = wave.values.astype(complex)
    plus, minus = wave.region_plus, wave.region_minus
    pot = wave.potential
    ab, b_off, b_diag = _cn_bands(psi.size, wave.dx, dt, pot)
    for step in range(steps):
        new_plus, new_minus = _grow(plus, psi.size), _grow(minus, psi.size)
        if _gap(new_plus, new_minus) < MIN_GAP:
            return replace(wave, values=psi, region_plus=plus, region_minus=minus, collided=True,
                           collision_step=wave.steps_taken + step + 1, steps_taken=wave.steps_taken + step)
        if nonlinear_strength:
            ab, b_off, b_diag = _cn_bands(psi.size, wave.dx, dt, pot + nonlinear_strength * np.abs(psi) ** 2)
        rhs = b_diag * psi
        rhs[1:] += b_off * psi[:-1]
        rhs[:-1] += b_off * psi[1:]
        psi = solve_banded((1, 1), ab, rhs, check_finite=False)
        plus, minus = new_plus, new_minus
    return replace(wave, values=psi, region_plus=plus, region_minus=minus, steps_taken=wave.steps_taken + steps)


def support_gap(a: np.ndarray, b: np.ndarray) -> int:
    na, nb = np.flatnonzero(a), np.flatnonzero(b)
    if na.size == 0 or nb.size == 0:
        return a.size
    if na[0] > nb[0]:
        na, nb = nb, na
    return int(nb[0] - na[-1] - 1)


def cross_element(wave_plus_only: LatticeWave, wave_minus_only: LatticeWave, check_gap: bool = True) -> complex:
    """<psi_minus | H | psi_plus> dx."""
    if check_gap and support_gap(wave_plus_only.values, wave_minus_only.values) < MIN_GAP:
        raise BranchOverlapError("stencil reach violated")
    h_plus = hamiltonian_apply(wave_plus_only)
    return complex(np.sum(np.conj(wave_minus_only.values) * h_plus) * wave_plus_only.dx)


def linearity_residual(
    wave_a: np.ndarray | LatticeWave, wave_b: np.ndarray | LatticeWave, a_plus: complex, a_minus: complex,
    dt: float, steps: int, dx: float = 1.0, potential: np.ndarray | None = None, nonlinear_strength: float = 0.0,
) -> float:
    """max |U(a psi_a + b psi_b) - (a U psi_a + b U psi_b)|."""
    if isinstance(wave_a, LatticeWave):
        dx, potential = wave_a.dx, wave_a.potential
        wave_a = wave_a.values
    if isinstance(wave_b, LatticeWave):
        wave_b = wave_b.values
    if np.shape(wave_a) != np.shape(wave_b):
        raise ValidationError("inputs must share a grid")
    prop = lambda v: cn_propagate(v, dx, dt, steps, potential, nonlinear_strength)  # noqa: E731
    lhs = prop(a_plus * np.asarray(wave_a) + a_minus * np.asarray(wave_b))
    rhs = a_plus * prop(wave_a) + a_minus * prop(wave_b)
    return float(np.abs(lhs - rhs).max())


def mean_position(wave: LatticeWave, region: Region | None = None) -> float:
    v = wave.values if region is None else wave.values[region[0]:region[1]]
    x = wave.positions if region is None else wave.positions[region[0]:region[1]]
    prob = np.abs(v) ** 2
    return float(np.sum(x * prob) / np.sum(prob))


@dataclass
class IsolationReport:
    grid_size: int
    steps: int
    dt: float
    max_norm_drift_per_step: float
    region_norm_deviation: float
    cross_element_initial: complex
    cross_element_final: complex
    linearity_residual: float
    outside_max: float
    min_gap: int
    collided: bool
    collision_step: int | None

    @property
    def passed(self) -> bool:
        return (
            not self.collided
            and self.max_norm_drift_per_step <= 1e-12
            and self.region_norm_deviation <= 1e-10
            and self.cross_element_initial == 0
            and self.cross_element_final == 0
            and self.linearity_residual <= 1e-12
            and self.outside_max <= 1e-13
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "grid_size": self.grid_size,
            "steps": self.steps,
            "dt": self.dt,
            "max_norm_drift_per_step": self.max_norm_drift_per_step,
            "region_norm_deviation": self.region_norm_deviation,
            "cross_element_initial": [self.cross_element_initial.real, self.cross_element_initial.imag],
            "cross_element_final": [self.cross_element_final.real, self.cross_element_final.imag],
            "linearity_residual": self.linearity_residual,
            "outside_max": self.outside_max,
            "min_gap": self.min_gap,
            "collided": self.collided,
            "collision_step": self.collision_step,
            "passed": self.passed,
        }


def isolation_suite(wave: LatticeWave, dt: float, steps: int, linearity_steps: int = 100,
                    check_every: int = 1) -> tuple[IsolationReport, LatticeWave]:
    """Evolve ``wave`` and measure every isolation invariant along the way."""
    start_norms = np.array(wave.region_norms())
    cross0 = cross_element(wave.branch("plus"), wave.branch("minus"))
    cur = wave
    drift = dev = outside = 0.0
    min_gap = wave.region_gap()
    cross_t = 0j
    done = 0
    while done < steps and not cur.collided:
        n = min(check_every, steps - done)
        before = cur.norm()
        nxt = evolve_unitary(cur, dt, n)
        taken = nxt.steps_taken - cur.steps_taken
        if taken:
            drift = max(drift, abs(nxt.norm() - before) / taken)
            dev = max(dev, float(np.abs(np.array(nxt.region_norms()) - start_norms).max()))
            outside = max(outside, nxt.outside_max())
            min_gap = min(min_gap, nxt.region_gap())
            cross_t = cross_element(nxt.branch("plus"), nxt.branch("minus"))
            if cross_t != 0:
                break
        cur = nxt
        done += taken
        if not taken:
            break
    lin = linearity_residual(wave.branch("plus").values, wave.branch("minus").values, 1.0, 1.0, dt,
                             linearity_steps, wave.dx, wave.potential)
    report = IsolationReport(wave.size, done, dt, drift, dev, cross0, cross_t, lin, outside, min_gap,
                             cur.collided, cur.collision_step)
    return report, cur


def default_wave(grid_size: int = 4096) -> LatticeWave:
    """Two packets near opposite walls moving toward each other; |a_plus|^2 = 2/3."""
    return init_two_packets(
        grid_size, 1.0, centers=(0.15 * grid_size, 0.85 * grid_size), widths=(20.0, 20.0), momenta=(0.2, -0.2),
        a_plus=math.sqrt(2 / 3), a_minus=math.sqrt(1 / 3),
    )
