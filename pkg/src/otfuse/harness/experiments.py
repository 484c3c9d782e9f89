"""Fusion experiments: regularizer sweeps, metrics tables and training curves."""

from __future__ import annotations

import csv
import dataclasses
import io
from typing import Iterable, Sequence, TextIO

import numpy as np

from ..flowgraph import ResidualPolicy
from ..fusion import AlignMode, FusionConfig, Solver, fuse_models, vanilla_fuse
from ..linalg import Rng
from ..model import ArchConfig, Params, forward, permute_model
from .train import MetricsRow, evaluate

DEFAULT_LAMBDA_GRID = (0.02, 0.04, 0.06, 0.08, 0.1, 0.14, 0.2)
CSV_HEADER = ("label", "lambda", "accuracy", "loss")


def sample_inputs(patches: np.ndarray, size: int, seed: int) -> np.ndarray:
    """A fixed random subset of ``patches`` used for activation capture."""
    if size > len(patches):
        raise ValueError(f"sample size {size} exceeds the {len(patches)} available inputs")
    idx = np.sort(Rng(seed, stream=7).permutation(len(patches))[:size])
    return patches[idx]


def sweep_regularizer(
    models: Sequence[Params],
    archs: Sequence[ArchConfig],
    config: FusionConfig,
    lambda_grid: Iterable[float],
    eval_data,
    sample_batch: np.ndarray | None = None,
) -> list[MetricsRow]:
    """One-shot metrics of Sinkhorn fusion for every ``lambda``, then EMD and VF rows.

    All other settings come from ``config``. The reference rows are labelled
    ``emd`` and ``vf``; a sweep row is labelled ``ot-<mode>``.
    """
    grid = [float(x) for x in lambda_grid]
    if not grid:
        raise ValueError("lambda grid is empty")
    anchor_arch = archs[config.anchor_index]
    label = f"ot-{config.mode.value}"
    rows = []
    for lam in grid:
        cfg = dataclasses.replace(config, solver=Solver.SINKHORN, lam=lam)
        fused = fuse_models(list(models), list(archs), cfg, sample_batch)
        row = evaluate(fused, anchor_arch, eval_data, label)
        row.lam = lam
        rows.append(row)
    emd_cfg = dataclasses.replace(config, solver=Solver.EMD, lam=None, tie_qk=True)
    rows.append(evaluate(fuse_models(list(models), list(archs), emd_cfg, sample_batch),
                         anchor_arch, eval_data, "emd"))
    rows.append(evaluate(vanilla_fuse(list(models)), anchor_arch, eval_data, "vf"))
    return rows


def best_sweep_row(rows: Sequence[MetricsRow]) -> MetricsRow:
    """Highest-accuracy row among those carrying a ``lambda``; ties go to the first."""
    swept = [r for r in rows if r.lam is not None]
    return max(swept, key=lambda r: r.accuracy)


def best_is_interior(rows: Sequence[MetricsRow]) -> bool:
    swept = [r for r in rows if r.lam is not None]
    lams = sorted(r.lam for r in swept)
    return lams[0] < best_sweep_row(rows).lam < lams[-1]


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def write_metrics_csv(rows: Iterable[MetricsRow], out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow((r.label, _fmt(r.lam), _fmt(r.accuracy), _fmt(r.loss)))


def metrics_csv(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    write_metrics_csv(rows, buf)
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[MetricsRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected metrics header {reader.fieldnames}")
    return [MetricsRow(label=d["label"], accuracy=float(d["accuracy"]), loss=float(d["loss"]),
                       lam=float(d["lambda"]) if d["lambda"] else None) for d in reader]


def curve_jsonl(rows: Iterable[MetricsRow]) -> str:
    return "".join(r.to_json() + "\n" for r in rows)


def first_epoch_within(curve: Sequence[MetricsRow], target: float, slack: float) -> int | None:
    """First epoch whose test accuracy is at least ``target - slack``."""
    for row in curve:
        if row.extra.get("test_accuracy", -1.0) >= target - slack:
            return row.epoch
    return None


@dataclasses.dataclass(frozen=True)
class RecoveryReport:
    max_param_dev: float
    max_logit_dev: float


def permutation_recovery(params: Params, arch: ArchConfig, seed: int,
                         num_inputs: int = 100) -> RecoveryReport:
    """Fuse a model with a randomly permuted copy of itself under hard weight alignment.

    The copy is drawn from ``seed``; logits are compared on ``num_inputs``
    standard-normal inputs drawn from the same seed.
    """
    rng = Rng(seed, stream=11)
    other = permute_model(params, arch, rng=rng)
    cfg = FusionConfig(mode=AlignMode.WEIGHTS, solver=Solver.EMD,
                       residual_policy=ResidualPolicy.AVERAGING, tie_qk=True)
    fused = fuse_models([params, other], [arch, arch], cfg)
    dev = max(float(np.max(np.abs(fused[k].astype(np.float64) - params[k]))) for k in params)
    shape = (num_inputs, arch.grid_side ** 2, arch.patch_dim)
    x = rng.normal(int(np.prod(shape))).reshape(shape).astype(np.float32)
    logit_dev = float(np.max(np.abs(forward(fused, arch, x)[0] - forward(params, arch, x)[0])))
    return RecoveryReport(dev, logit_dev)
