"""Label-free validation of predicted (H, D) pairs.

A surrogate that predicts both the Hamiltonian and the density hands us a
free consistency check: at a true fixed point H D S - S D H vanishes, so
its magnitude on a *predicted* pair (the "self" residual here) bounds how
far the pair is from self-consistency without touching any labels.

The check has one structural blind spot: a density built by diagonalizing
the predicted Hamiltonian commutes with it by construction, so the self
residual is ~0 no matter how wrong that Hamiltonian is.  The residual is
only meaningful when H and D are predicted independently; the full report
therefore also carries the strict residual (Hamiltonian rebuilt from the
predicted density through the model functional) and cross residuals that
pair predicted with labeled matrices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import matcore, model
from .errors import FileFormatError

__all__ = [
    "Prediction",
    "DiisReport",
    "REPORT_COLUMNS",
    "matrix_mae",
    "self_diis",
    "self_report",
    "full_report",
    "self_diis_position_gradient",
    "scf_predictor",
    "read_prediction_dir",
    "write_reports_csv",
    "read_reports_csv",
]


@dataclass
class Prediction:
    """Predicted Hamiltonian/density pair plus a provenance tag.

    Canonical sources are "oracle-noise", "kernel" and "external-file".
    """

    h_pred: np.ndarray
    d_pred: np.ndarray
    source: str = "external-file"

    def __post_init__(self):
        self.h_pred = matcore.validate_symmetric(self.h_pred, "h_pred")
        self.d_pred = matcore.validate_symmetric(self.d_pred, "d_pred")
        if self.h_pred.shape != self.d_pred.shape:
            raise matcore.DimensionMismatch(
                f"h_pred {self.h_pred.shape} and d_pred {self.d_pred.shape} differ"
            )


@dataclass
class DiisReport:
    """Per-system residual and error summary.

    self_diis needs nothing but the prediction and the overlap.
    strict_diis is the residual with the Hamiltonian rebuilt from the
    predicted density via the model functional, i.e. the full
    self-consistency criterion that self_diis approximates.  The
    remaining fields compare against a labeled solve and stay None when
    no label is supplied.
    """

    system: str = ""
    source: str = ""
    self_diis: float = float("nan")
    strict_diis: Optional[float] = None
    mixed_hd: Optional[float] = None
    mixed_dh: Optional[float] = None
    mae_h: Optional[float] = None
    mae_d: Optional[float] = None
    d_e_total: Optional[float] = None
    d_gap: Optional[float] = None


REPORT_COLUMNS = tuple(f.name for f in fields(DiisReport))


def matrix_mae(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise matcore.DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    return float(np.abs(a - b).mean())


def self_diis(pred: Prediction, s, norm: str = "frobenius") -> float:
    """Magnitude of H_pred D_pred S - S D_pred H_pred."""
    e = matcore.commutator_error(pred.h_pred, pred.d_pred, s)
    return matcore.error_magnitude(e, norm)


def self_report(
    pred: Prediction, s, norm: str = "frobenius", system: str = ""
) -> DiisReport:
    """Label-free report: only the self residual is filled in."""
    return DiisReport(
        system=str(system), source=pred.source, self_diis=self_diis(pred, s, norm)
    )


def full_report(
    pred: Prediction,
    label: model.ScfSolution,
    g: model.Geometry,
    p: model.ModelParams,
    norm: str = "frobenius",
    system: str = "",
) -> DiisReport:
    """Compare a prediction against a labeled solve on the same geometry."""
    s = label.overlap
    h_from_d = model.effective_hamiltonian(pred.d_pred, g, p, s=s)
    strict = matcore.error_magnitude(
        matcore.commutator_error(h_from_d, pred.d_pred, s), norm
    )
    mixed_hd = matcore.error_magnitude(
        matcore.commutator_error(label.hamiltonian, pred.d_pred, s), norm
    )
    mixed_dh = matcore.error_magnitude(
        matcore.commutator_error(pred.h_pred, label.density, s), norm
    )
    eig_pred = matcore.gen_eigensolve(pred.h_pred, s)
    gap_pred = model.frontier_gap(eig_pred.energies, g.n_electrons)
    return DiisReport(
        system=str(system),
        source=pred.source,
        self_diis=self_diis(pred, s, norm),
        strict_diis=strict,
        mixed_hd=mixed_hd,
        mixed_dh=mixed_dh,
        mae_h=matrix_mae(pred.h_pred, label.hamiltonian),
        mae_d=matrix_mae(pred.d_pred, label.density),
        d_e_total=abs(model.energy(pred.d_pred, g, p, s=s) - label.e_total),
        d_gap=abs(gap_pred - label.gap),
    )


def self_diis_position_gradient(
    g: model.Geometry,
    p: model.ModelParams,
    predictor: Callable[[model.Geometry], Prediction],
    step: float = 1e-4,
    norm: str = "frobenius",
) -> np.ndarray:
    """Central-difference d(self_diis)/d(position), shape (n_atoms, 3).

    Large entries flag directions in which the predictor's internal
    consistency degrades fastest; evaluations are serial, so any
    stateful predictor is safe to use.
    """

    def value(positions):
        gp = g.with_positions(positions)
        return self_diis(predictor(gp), model.build_overlap(gp, p), norm)

    grad = np.zeros((g.n_atoms, 3))
    for i in range(g.n_atoms):
        for a in range(3):
            plus = g.positions.copy()
            plus[i, a] += step
            minus = g.positions.copy()
            minus[i, a] -= step
            grad[i, a] = (value(plus) - value(minus)) / (2.0 * step)
    return grad


def scf_predictor(p: model.ModelParams, cfg=None) -> Callable:
    """Predictor that actually solves SCF; the zero-error reference."""
    from . import scf as _scf

    def predict(g: model.Geometry) -> Prediction:
        sol = _scf.scf_solve(g, p, cfg)
        return Prediction(sol.hamiltonian, sol.density, source="exact")

    return predict


# ---------------------------------------------------------------------------
# Disk formats.


def read_prediction_dir(path):
    """Load one externally produced bundle.

    Expects geometry.xyz, H.scvm, D.scvm and S.scvm in ``path``; returns
    (geometry, prediction, overlap).
    """
    path = Path(path)
    for name in ("geometry.xyz", "H.scvm", "D.scvm", "S.scvm"):
        if not (path / name).exists():
            raise FileFormatError(f"{path}: missing {name}")
    g = model.load_geometry(path / "geometry.xyz")
    h = matcore.read_scvm(path / "H.scvm")
    d = matcore.read_scvm(path / "D.scvm")
    s = matcore.validate_symmetric(matcore.read_scvm(path / "S.scvm"), "S")
    pred = Prediction(h_pred=h, d_pred=d, source="external-file")
    if h.shape[0] != g.n_atoms:
        raise FileFormatError(
            f"{path}: matrices are {h.shape[0]}x{h.shape[0]} for {g.n_atoms} atoms"
        )
    return g, pred, s


def _fmt_field(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_reports_csv(path, reports) -> None:
    """Fixed column order, one row per system; label-free fields left empty."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for rep in reports:
            writer.writerow([_fmt_field(getattr(rep, c)) for c in REPORT_COLUMNS])


def read_reports_csv(path) -> list:
    reports = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(REPORT_COLUMNS) - set(reader.fieldnames):
            raise FileFormatError(f"{path}: missing report columns")
        for row in reader:
            kwargs = {"system": row["system"], "source": row["source"]}
            for name in REPORT_COLUMNS[2:]:
                text = row[name]
                kwargs[name] = float(text) if text != "" else None
            kwargs["self_diis"] = (
                float(row["self_diis"]) if row["self_diis"] != "" else float("nan")
            )
            reports.append(DiisReport(**kwargs))
    return reports
