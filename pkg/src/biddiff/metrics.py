"""Full-reference evaluation: PSNR and SSIM over prediction/GT directories.

PSNR is computed on [0, 1] data after the 8-bit quantization round-trip that
file-based evaluation implies. No ground-truth mean-brightness adjustment is
applied anywhere, and none is offered.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from .dataset import load_image
from .losses import ssim


def psnr(a: torch.Tensor, b: torch.Tensor, cap_db: float = 100.0) -> float:
    """10*log10(1/MSE) for [0, 1] images; returns cap_db when MSE is zero."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return cap_db
    return 10.0 * math.log10(1.0 / mse)


@dataclass(frozen=True)
class EvalReport:
    per_image: list  # (id, psnr_db, ssim) sorted by id
    mean_psnr: float
    mean_ssim: float
    count: int

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "per_image": [
                {"id": i, "psnr": p, "ssim": s} for i, p, s in self.per_image
            ],
        }


def evaluate_dirs(pred_dir, gt_dir, report_path: Optional[str] = None) -> EvalReport:
    """Score every filename-matched pair of PNGs and aggregate.

    Raises on orphan files (listed) and on size-mismatched pairs (named).
    Writes the JSON report to `report_path` when given.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {p.name: p for p in sorted(pred_dir.glob("*.png"))}
    gts = {p.name: p for p in sorted(gt_dir.glob("*.png"))}
    orphans = sorted(set(preds) ^ set(gts))
    if orphans:
        raise ValueError(f"unmatched prediction/gt filenames: {orphans}")
    if not preds:
        raise ValueError(f"no common .png files between {pred_dir} and {gt_dir}")
    rows = []
    for name in sorted(preds):
        a = load_image(preds[name])
        b = load_image(gts[name])
        if a.shape != b.shape:
            raise ValueError(
                f"size mismatch for {name}: {tuple(a.shape)} vs {tuple(b.shape)}"
            )
        rows.append(
            (name, psnr(a, b), float(ssim(a.unsqueeze(0), b.unsqueeze(0))))
        )
    report = EvalReport(
        per_image=rows,
        mean_psnr=sum(r[1] for r in rows) / len(rows),
        mean_ssim=sum(r[2] for r in rows) / len(rows),
        count=len(rows),
    )
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        with open(report_path, "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    return report
