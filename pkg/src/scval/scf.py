"""Self-consistent field solver with Pulay-style acceleration.

The fixed point D = density(eigensolve(H(D))) is found by iterating the
functional, extrapolating the Hamiltonian from the recent history of
commutator residuals, and falling back to plain linear density mixing
whenever the extrapolation system degenerates.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import matcore, model
from .errors import NoConvergence, SingularDiisSystem

__all__ = [
    "ScfConfig",
    "DiisHistory",
    "diis_coefficients",
    "diis_extrapolate",
    "scf_solve",
    "scf_trace",
    "write_trace_csv",
]

# Pivot tolerance for declaring the bordered extrapolation system singular.
_PIVOT_TOL = 1e-14


@dataclass(frozen=True)
class ScfConfig:
    """Iteration limits and mixing knobs.

    Extrapolation kicks in once the iteration index reaches
    ``diis_start`` and at least two residuals are banked; setting
    ``diis_start`` beyond ``max_iter`` gives a damping-only solve.
    """

    max_iter: int = 200
    tol: float = 1e-9
    damping: float = 0.3
    diis_depth: int = 8
    diis_start: int = 2
    norm: str = "frobenius"

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must be in (0, 1]")
        if self.diis_depth < 2:
            raise ValueError("diis_depth must be at least 2")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        matcore.resolve_norm(self.norm)


class DiisHistory:
    """Ring buffer of (hamiltonian, residual) pairs, oldest dropped first."""

    def __init__(self, depth: int):
        self._items = deque(maxlen=depth)

    def push(self, h: np.ndarray, e: np.ndarray) -> None:
        self._items.append((h, e))

    def drop_oldest(self) -> None:
        if self._items:
            self._items.popleft()

    def __len__(self) -> int:
        return len(self._items)

    @property
    def hamiltonians(self):
        return [h for h, _ in self._items]

    @property
    def errors(self):
        return [e for _, e in self._items]


def diis_coefficients(errors) -> np.ndarray:
    """Mixing weights minimizing |sum_k c_k e_k|_F subject to sum c_k = 1.

    Solves the bordered system with B_kl = <e_k, e_l> (Frobenius inner
    product) and a Lagrange row enforcing the constraint.  A system that
    is singular beyond the pivot tolerance is refused so the caller can
    fall back to damping.
    """
    m = len(errors)
    if m < 1:
        raise SingularDiisSystem("no residuals to extrapolate from")
    flat = [np.asarray(e, dtype=float).ravel() for e in errors]
    b = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            b[i, j] = b[j, i] = float(flat[i] @ flat[j])
    scale = float(np.abs(b).max())
    if scale <= 0.0 or not math.isfinite(scale):
        raise SingularDiisSystem("residual overlap matrix is zero or non-finite")
    bordered = np.zeros((m + 1, m + 1))
    bordered[:m, :m] = b / scale
    bordered[:m, m] = 1.0
    bordered[m, :m] = 1.0
    rhs = np.zeros(m + 1)
    rhs[m] = 1.0
    sv = np.linalg.svd(bordered, compute_uv=False)
    if sv[-1] <= _PIVOT_TOL * sv[0]:
        raise SingularDiisSystem(
            f"bordered system condition beyond pivot tolerance ({sv[-1]:.3e})"
        )
    coeffs = np.linalg.solve(bordered, rhs)[:m]
    return coeffs


def diis_extrapolate(hist: DiisHistory) -> np.ndarray:
    """Extrapolated Hamiltonian sum_k c_k H_k from the banked history."""
    coeffs = diis_coefficients(hist.errors)
    hs = hist.hamiltonians
    out = coeffs[0] * hs[0]
    for c, h in zip(coeffs[1:], hs[1:]):
        out = out + c * h
    return out


def _package(
    x, s, d, g, p, h0, err, e_total, iterations, converged
) -> model.ScfSolution:
    h = model.effective_hamiltonian(d, g, p, s=s, h0=h0)
    eig = matcore._eigensolve_orthogonalized(x, h)
    gap = model.frontier_gap(eig.energies, g.n_electrons)
    return model.ScfSolution(
        hamiltonian=h,
        density=d,
        overlap=s,
        coeffs=eig.coeffs,
        energies=eig.energies,
        e_total=e_total,
        gap=gap,
        strict_diis=err,
        iterations=iterations,
        converged=converged,
    )


def _run(g: model.Geometry, p: model.ModelParams, cfg: ScfConfig, d0=None):
    s = model.build_overlap(g, p)
    h0 = model.build_h0(g, p)
    x = matcore.loewdin_inverse_sqrt(s)
    e_rep = model.repulsion_energy(g, p)

    def density_from(h):
        eig = matcore._eigensolve_orthogonalized(x, h)
        occ = matcore.aufbau_occupations(eig.energies, g.n_electrons)
        return matcore.build_density(eig.coeffs, occ)

    if d0 is not None:
        # Project the guess through one functional build + diagonalization:
        # a raw guess can commute with H(S') while carrying a stale trace,
        # which would otherwise pass the residual check untouched.
        d = density_from(model.effective_hamiltonian(np.asarray(d0, float), g, p, s=s, h0=h0))
    else:
        d = density_from(h0)
    hist = DiisHistory(cfg.diis_depth)
    trace = []
    best = None  # (err, h, d, e_total, iteration)

    for it in range(1, cfg.max_iter + 1):
        h = model.effective_hamiltonian(d, g, p, s=s, h0=h0)
        e = matcore.commutator_error(h, d, s)
        err = matcore.error_magnitude(e, cfg.norm)
        e_total = model.electronic_energy(d, g, p, s=s, h0=h0) + e_rep
        trace.append((it, err, e_total))
        if best is None or err < best[0]:
            best = (err, h, d, e_total, it)
        if err <= cfg.tol:
            sol = _package(x, s, d, g, p, h0, err, e_total, it, True)
            return sol, trace
        hist.push(h, e)
        extrapolated = None
        if it >= cfg.diis_start and len(hist) >= 2:
            try:
                extrapolated = diis_extrapolate(hist)
            except SingularDiisSystem:
                hist.drop_oldest()
        if extrapolated is not None:
            d = density_from(extrapolated)
        else:
            d_new = density_from(h)
            d = (1.0 - cfg.damping) * d + cfg.damping * d_new

    err, h, d, e_total, it = best
    sol = _package(x, s, d, g, p, h0, err, e_total, cfg.max_iter, False)
    raise NoConvergence(
        f"no convergence after {cfg.max_iter} iterations "
        f"(best residual {err:.3e} at iteration {it})",
        best=sol,
        trace=trace,
    )


def scf_solve(
    g: model.Geometry, p: model.ModelParams, cfg: ScfConfig | None = None, d0=None
) -> model.ScfSolution:
    """Drive H(D) / D(H) to self-consistency; see :class:`ScfConfig`.

    Returns a solution whose Hamiltonian is rebuilt from the final
    density, so H = effective_hamiltonian(D) holds exactly.  Raises
    NoConvergence (carrying the best iterate) when the budget runs out.
    """
    sol, _ = _run(g, p, cfg or ScfConfig(), d0=d0)
    return sol


def scf_trace(
    g: model.Geometry, p: model.ModelParams, cfg: ScfConfig | None = None, d0=None
) -> tuple:
    """Same run as scf_solve, returning (solution, trace).

    The trace is a list of (iteration, residual, e_total) tuples, one
    per iteration in order.
    """
    return _run(g, p, cfg or ScfConfig(), d0=d0)


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("iteration,diis_error,e_total\n")
        for it, err, e_total in trace:
            fh.write(f"{it},{err:.17g},{e_total:.17g}\n")
