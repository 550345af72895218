"""Region-masked MSE / R^2, evaluation reports and residual audits.

Statistics are pooled: sums of squares are accumulated over every
channel-voxel of a region across all samples before dividing, so a report
cell is a single number rather than an average of per-sample or
per-channel values.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import diffops
from .container import read_container
from .fieldgrid import B_SLICE, E_SLICE, EPS0, TESLA_PER_MICROTESLA, SampleRecord
from .oracle import Medium, complex_wavenumber
from .training import physical_medium, predict, zero_baseline
from .unet import load_checkpoint

SCHEMA = "emeval/1"
PHYS_SCHEMA = "emphys/1"
UNDEFINED = "undefined"
FIELDS = {"E": E_SLICE, "B": B_SLICE}
REGIONS = ("subject", "total")
RESIDUALS = ("gauss_B", "faraday", "ampere")
CONVERGENCE_BAND = (3.5, 4.5)


class DataMismatchError(ValueError):
    """Checkpoint and dataset are incompatible."""


def _region(pred, target, mask):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if mask is None:
        return pred.reshape(-1), target.reshape(-1)
    mask = np.asarray(mask, dtype=bool)
    if pred.ndim == 4:
        pred, target, mask = pred[None], target[None], mask.reshape((1,) + mask.shape[-3:])
    if mask.shape != pred.shape[:1] + pred.shape[2:]:
        raise ValueError(f"mask shape {mask.shape} does not match fields {pred.shape}")
    # (S, C, x, y, z) -> (S, x, y, z, C) so boolean indexing keeps channels together
    p = np.moveaxis(pred, 1, -1)[mask]
    t = np.moveaxis(target, 1, -1)[mask]
    return p.reshape(-1), t.reshape(-1)


def masked_mse(pred, target, mask=None) -> float:
    """Pooled mean squared error over the region's channel-voxels.

    ``pred`` and ``target`` are ``(C, x, y, z)`` or ``(S, C, x, y, z)``;
    ``mask`` is ``(x, y, z)`` or ``(S, x, y, z)``, or ``None`` for the full grid.
    """
    p, t = _region(pred, target, mask)
    if p.size == 0:
        raise ValueError("empty region")
    return float(np.sum((p - t) ** 2) / p.size)


def region_mean(target, mask=None) -> float:
    t = _region(target, target, mask)[1]
    if t.size == 0:
        raise ValueError("empty region")
    return float(np.sum(t) / t.size)


def masked_r2(pred, target, mask=None) -> float | None:
    """Pooled coefficient of determination; ``None`` when the region's targets are constant."""
    p, t = _region(pred, target, mask)
    if p.size == 0:
        raise ValueError("empty region")
    mean = np.sum(t) / t.size
    ss_tot = float(np.sum((t - mean) ** 2))
    if ss_tot == 0.0:
        return None
    return 1.0 - float(np.sum((t - p) ** 2)) / ss_tot


@dataclass
class RegionMetric:
    mse: float
    r2: float | None

    def to_dict(self) -> dict:
        return {"mse": self.mse, "r2": UNDEFINED if self.r2 is None else self.r2}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionMetric":
        r2 = d["r2"]
        return cls(float(d["mse"]), None if r2 == UNDEFINED else float(r2))


def field_metrics(preds: np.ndarray, targets: np.ndarray, masks: np.ndarray) -> dict:
    """{field: {region: RegionMetric}} for stacked (S, 12, ...) predictions."""
    out = {}
    for name, sl in FIELDS.items():
        p, t = preds[:, sl], targets[:, sl]
        out[name] = {
            "subject": RegionMetric(masked_mse(p, t, masks), masked_r2(p, t, masks)),
            "total": RegionMetric(masked_mse(p, t), masked_r2(p, t)),
        }
    return out


# -- physics residual audit -----------------------------------------------------------------

def _valid_region(rec: SampleRecord) -> np.ndarray:
    """Interior voxels whose stencil avoids the oracle's zeroed singular balls."""
    valid = diffops.interior_mask(rec.geom.shape)
    if rec.meta.get("family") == "dipole_array":
        balls = np.any(rec.excitation.occupancy > 0, axis=0)
        valid &= ~ndimage.binary_dilation(balls, structure=np.ones((3, 3, 3), bool))
    return valid


def _residuals(stack: np.ndarray, rec: SampleRecord) -> dict[str, np.ndarray]:
    E = diffops.to_complex(stack[E_SLICE])
    B = diffops.to_complex(stack[B_SLICE])
    h, w = rec.geom.spacing, rec.omega
    eps, sigma = physical_medium(rec)
    gauss = diffops.divergence(B, h)
    far = diffops._faraday(E, B, h, w)
    amp = diffops._ampere(E, B, h, w, eps, sigma)
    # per-voxel |r|^2 summed over components, and the matching reference scale |.|^2
    k = _wavenumber(rec)
    Bmag2 = np.sum(np.abs(B) ** 2, axis=0)
    y = np.broadcast_to(np.asarray(sigma) + 1j * w * np.asarray(eps), rec.geom.shape)
    return {
        "gauss_B": (np.abs(gauss) ** 2, abs(k) ** 2 * Bmag2),
        "faraday": (np.sum(np.abs(far) ** 2, axis=0),
                    (w * TESLA_PER_MICROTESLA) ** 2 * Bmag2),
        "ampere": (np.sum(np.abs(amp) ** 2, axis=0),
                   np.abs(y) ** 2 * np.sum(np.abs(E) ** 2, axis=0)),
    }


def _wavenumber(rec: SampleRecord) -> complex:
    eps, sigma = physical_medium(rec)
    medium = Medium(max(1.0, float(np.mean(eps)) / EPS0), float(np.mean(sigma)))
    return complex_wavenumber(rec.omega, medium)


def residual_stats(stacks: Sequence[np.ndarray], records: Sequence[SampleRecord]) -> dict:
    """Pooled residual MSE per region and RMS-normalised residual over the valid interior."""
    sums = {r: {"subject": [0.0, 0], "total": [0.0, 0]} for r in RESIDUALS}
    norm = {r: [0.0, 0.0] for r in RESIDUALS}
    for stack, rec in zip(stacks, records):
        interior = diffops.interior_mask(rec.geom.shape)
        regions = {"total": interior, "subject": interior & rec.mask.inside}
        valid = _valid_region(rec)
        for name, (r2, ref2) in _residuals(np.asarray(stack, dtype=np.float64), rec).items():
            for reg, m in regions.items():
                sums[name][reg][0] += float(r2[m].sum())
                sums[name][reg][1] += int(m.sum())
            norm[name][0] += float(r2[valid].sum())
            norm[name][1] += float(ref2[valid].sum())
    out = {"regions": {}, "normalized": {}}
    for name in RESIDUALS:
        out[f"{name}_mse"] = sums[name]["total"][0] / sums[name]["total"][1]
        out["regions"][name] = {
            reg: (s / n if n else None) for reg, (s, n) in sums[name].items()}
        num, den = norm[name]
        out["normalized"][name] = math.sqrt(num / den) if den > 0 else None
    return out


def physcheck(data, fine=None) -> dict:
    """Residual report for a container (path or records) of target fields.

    If ``fine`` holds the same samples at half the spacing, the ratio of
    normalised residuals is reported per term and checked against the
    second-order band [3.5, 4.5].
    """
    records = read_container(data) if isinstance(data, (str, Path)) else list(data)
    if not records:
        raise ValueError("container holds no samples")
    rep = {"schema": PHYS_SCHEMA, "sample_count": len(records)}
    rep.update(residual_stats([r.target_stack() for r in records], records))
    if fine is not None:
        frecs = read_container(fine) if isinstance(fine, (str, Path)) else list(fine)
        fstats = residual_stats([r.target_stack() for r in frecs], frecs)
        conv = {}
        for name in RESIDUALS:
            c, f = rep["normalized"][name], fstats["normalized"][name]
            ratio = c / f if c and f else None
            conv[name] = {
                "coarse": c, "fine": f, "ratio": ratio,
                "pass": ratio is not None and CONVERGENCE_BAND[0] <= ratio <= CONVERGENCE_BAND[1],
            }
        rep["convergence"] = conv
    return rep


# -- reports --------------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: dict = field(default_factory=dict)      # row -> field -> region -> RegionMetric
    physics: dict = field(default_factory=dict)   # row -> residual -> region -> value
    model: str = "model"
    dataset: str = ""
    sample_count: int = 0

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "model": self.model,
            "dataset": self.dataset,
            "sample_count": self.sample_count,
            "rows": {row: {f: {reg: m.to_dict() for reg, m in regs.items()}
                           for f, regs in fields.items()}
                     for row, fields in self.rows.items()},
            "physics": self.physics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        rows = {row: {f: {reg: RegionMetric.from_dict(m) for reg, m in regs.items()}
                      for f, regs in fields.items()}
                for row, fields in d["rows"].items()}
        return cls(rows, d.get("physics", {}), d["model"], d["dataset"], d["sample_count"])

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def to_table(self) -> str:
        def fmt(v, r2=False):
            if v is None:
                return UNDEFINED
            return f"{v:.2f}" if r2 else f"{v:.4g}"

        cols = [(f, reg) for f in FIELDS for reg in REGIONS]
        lines = ["{:<10}".format("") + "".join(
                     f"{f + '-Field ' + reg.capitalize():^22}" for f, reg in cols),
                 "{:<10}".format("Model") + "".join(f"{'MSE':>11}{'R2':>11}" for _ in cols)]
        for row, fields in self.rows.items():
            cells = "".join(f"{fmt(fields[f][reg].mse):>11}{fmt(fields[f][reg].r2, True):>11}"
                            for f, reg in cols)
            lines.append(f"{row:<10}{cells}")
        return "\n".join(lines)


def build_report(predictions: Mapping[str, Sequence[np.ndarray]], records: Sequence[SampleRecord],
                 model: str = "model", dataset: str = "") -> EvalReport:
    """Report with one row per entry of ``predictions`` plus the zero baseline."""
    targets = np.stack([r.target_stack().astype(np.float64) for r in records])
    masks = np.stack([r.mask.inside for r in records])
    rows, phys = {}, {}
    preds = dict(predictions)
    preds["baseline"] = [zero_baseline(r) for r in records]
    for name, p in preds.items():
        p = np.stack([np.asarray(x, dtype=np.float64) for x in p])
        rows[name] = field_metrics(p, targets, masks)
        stats = residual_stats(list(p), records)
        phys[name] = {res: stats["regions"][res] for res in RESIDUALS}
    return EvalReport(rows, phys, model, dataset, len(records))


def evaluate(checkpoint, test_container) -> EvalReport:
    ckpt = load_checkpoint(checkpoint)
    records = read_container(test_container)
    arch = ckpt.params.arch
    x0 = records[0].input_stack()
    if x0.shape[0] != arch.in_channels:
        raise DataMismatchError(
            f"checkpoint expects {arch.in_channels} input channels, data provides {x0.shape[0]}")
    m = 2 ** arch.depth
    if any(n % m for n in records[0].geom.shape):
        raise DataMismatchError(
            f"grid {records[0].geom.shape} not divisible by 2**depth = {m}")
    preds = [predict(ckpt.params, r) for r in records]
    return build_report({"model": preds}, records, model=Path(checkpoint).name,
                        dataset=Path(test_container).name)


def gauss_residual_mse(stacks: Sequence[np.ndarray], records: Sequence[SampleRecord]) -> float:
    return residual_stats(stacks, records)["gauss_B_mse"]

