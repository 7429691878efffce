"""Metrics, evaluation reports, ablation harness, and overlay rendering.

Dice is computed per label over the union of labels present in either map
(absent-in-both labels are excluded, absent-in-one scores zero). Field
smoothness is the standard deviation of the log Jacobian determinant over
interior voxels, with determinants clamped at 1e-6 before the log and the
folding fraction reported separately. Dice aggregation averages per pair
over structures first, then over pairs; the structure-first alternative is
recorded alongside.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .grid import DisplacementField, LabelMap, jacobian_determinant, warp
from .selftrain import TrainConfig, TrainState, register, run_training

logger = logging.getLogger(__name__)

__all__ = [
    "dice",
    "dice_mean",
    "jacobian_stats",
    "sdlogj",
    "wilcoxon_signed_rank",
    "EvalReport",
    "evaluate",
    "ablation_run",
    "ablation_to_markdown",
    "overlay_panels",
]

JACOBIAN_CLAMP = 1e-6


def dice(labels_a: LabelMap | np.ndarray, labels_b: LabelMap | np.ndarray, label_set=None):
    """Per-label Dice overlap: ``2|A∩B| / (|A| + |B|)``.

    Returns a dict label -> score over ``label_set`` (default: all nonzero
    labels present in at least one map). Labels absent from both maps are
    excluded; a label absent from exactly one scores 0.
    """
    a = labels_a.labels if isinstance(labels_a, LabelMap) else np.asarray(labels_a)
    b = labels_b.labels if isinstance(labels_b, LabelMap) else np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError(f"label map shapes differ: {a.shape} vs {b.shape}")
    if label_set is None:
        label_set = sorted(set(np.unique(a)) | set(np.unique(b)))
        label_set = [int(v) for v in label_set if v != 0]
    scores = {}
    for lab in label_set:
        mask_a = a == lab
        mask_b = b == lab
        size = int(mask_a.sum()) + int(mask_b.sum())
        if size == 0:
            continue
        scores[int(lab)] = 2.0 * int((mask_a & mask_b).sum()) / size
    return scores


def dice_mean(labels_a, labels_b, label_set=None) -> float:
    scores = dice(labels_a, labels_b, label_set)
    if not scores:
        return float("nan")
    return float(np.mean(list(scores.values())))


def jacobian_stats(field_: DisplacementField, mask: np.ndarray | None = None) -> dict:
    """Log-Jacobian smoothness statistics of a displacement field.

    The default mask excludes the one-voxel border band where the one-sided
    difference stencil applies.
    """
    det = jacobian_determinant(field_)
    if mask is None:
        mask = np.zeros(det.shape, dtype=bool)
        mask[1:-1, 1:-1, 1:-1] = True
    vals = det[mask]
    folding = float((vals <= 0).mean()) if vals.size else 0.0
    logj = np.log(np.clip(vals, JACOBIAN_CLAMP, None))
    return {
        "sdlogj": float(logj.std()),
        "folding_fraction": folding,
        "mean_logj": float(logj.mean()),
    }


def sdlogj(field_: DisplacementField, mask: np.ndarray | None = None) -> float:
    """Standard deviation of the log Jacobian determinant (interior voxels)."""
    return jacobian_stats(field_, mask)["sdlogj"]


def wilcoxon_signed_rank(x, y) -> dict:
    """Paired Wilcoxon signed-rank test with an exact sign-permutation null.

    Zero differences are dropped; ties get average ranks. For n <= 20 the
    null distribution of T+ is enumerated exactly over all 2^n sign
    assignments; larger samples use the normal approximation. Returns the
    statistic (min of the two rank sums) and the two-sided p-value.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("paired samples must have equal length")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        return {"statistic": 0.0, "p_value": 1.0, "n": 0}
    order = np.argsort(np.abs(d), kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    sorted_abs = np.abs(d)[order]
    # average ranks for ties
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    t_plus = float(ranks[d > 0].sum())
    t_minus = float(ranks[d < 0].sum())
    statistic = min(t_plus, t_minus)
    if n <= 20:
        signs = np.arange(2**n, dtype=np.uint64)
        shifts = np.arange(n, dtype=np.uint64)
        bits = ((signs[:, None] >> shifts) & np.uint64(1)).astype(np.float64)
        null_t_plus = bits @ ranks
        p_low = float((null_t_plus <= t_plus).mean())
        p_high = float((null_t_plus >= t_plus).mean())
        p = min(1.0, 2.0 * min(p_low, p_high))
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        z = (t_plus - mean) / np.sqrt(var)
        from scipy.stats import norm

        p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    return {"statistic": statistic, "p_value": p, "n": int(n)}


# ---------------------------------------------------------------------------
# evaluation reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-pair metrics plus aggregates recomputable from them."""

    per_pair: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    config_fingerprint: str = ""
    seed: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source) -> "EvalReport":
        raw = json.loads(Path(source).read_text() if not str(source).lstrip().startswith("{") else source)
        return cls(**raw)

    def recompute_aggregates(self) -> dict:
        return _aggregate(self.per_pair)


def _aggregate(per_pair: list) -> dict:
    agg: dict = {"n_pairs": len(per_pair)}
    dices = [row["dice_mean"] for row in per_pair if row.get("dice_mean") is not None]
    if dices:
        agg["dice_mean"] = float(np.mean(dices))
        agg["dice_sd"] = float(np.std(dices))
        by_label: dict = {}
        for row in per_pair:
            for lab, score in (row.get("dice_per_label") or {}).items():
                by_label.setdefault(str(lab), []).append(score)
        agg["dice_per_label_mean"] = {k: float(np.mean(v)) for k, v in sorted(by_label.items())}
        if agg["dice_per_label_mean"]:
            agg["dice_mean_structure_first"] = float(
                np.mean(list(agg["dice_per_label_mean"].values()))
            )
    sdl = [row["sdlogj"] for row in per_pair if row.get("sdlogj") is not None]
    if sdl:
        agg["sdlogj_mean"] = float(np.mean(sdl))
        agg["folding_fraction_mean"] = float(
            np.mean([row["folding_fraction"] for row in per_pair])
        )
    times = [row["inference_seconds"] for row in per_pair if row.get("inference_seconds") is not None]
    if times:
        agg["t_inf_median"] = float(np.median(times))
    errors = [row["endpoint_error"] for row in per_pair if row.get("endpoint_error") is not None]
    if errors:
        agg["endpoint_error_mean"] = float(np.mean(errors))
    return agg


def config_fingerprint(config: TrainConfig | dict | None) -> str:
    if config is None:
        return ""
    raw = config.to_dict() if isinstance(config, TrainConfig) else dict(config)
    blob = json.dumps(raw, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _timed_register(state: TrainState, fixed, moving, repeats: int) -> tuple[DisplacementField, float]:
    """Median-of-repeats inference timing on a single torch thread."""
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        times = []
        for _ in range(max(1, repeats)):
            field_ = register(state, fixed, moving)
            times.append(state.last_inference_seconds)
    finally:
        torch.set_num_threads(n_threads)
    return field_, float(np.median(times))


def evaluate(
    state: TrainState | None,
    dataset,
    timing_repeats: int = 3,
    seed: int = 0,
) -> EvalReport:
    """Register every pair of a dataset (or score the zero field) and report.

    ``state=None`` scores the identity alignment, mirroring an "initial" row.
    Pairs without labels get Dice omitted; if no pair has labels or a
    ground-truth field the report is restricted to smoothness and timing with
    a warning note.
    """
    report = EvalReport(seed=seed)
    if state is not None:
        report.config_fingerprint = config_fingerprint(state.config)
    any_labels = False
    any_gt = False
    for pair in dataset.pairs:
        fixed = dataset.volume(pair.fixed_id)
        moving = dataset.volume(pair.moving_id)
        row: dict = {"fixed_id": pair.fixed_id, "moving_id": pair.moving_id}
        if state is None:
            field_ = DisplacementField.zeros(fixed.shape)
            row["inference_seconds"] = None
        else:
            field_, row["inference_seconds"] = _timed_register(
                state, fixed, moving, timing_repeats
            )
        stats = jacobian_stats(field_)
        row["sdlogj"] = stats["sdlogj"]
        row["folding_fraction"] = stats["folding_fraction"]

        labels_f = dataset.labels_for(pair.fixed_id)
        labels_m = dataset.labels_for(pair.moving_id)
        if labels_f is not None and labels_m is not None:
            any_labels = True
            warped = warp(labels_m, field_)
            scores = dice(labels_f, warped)
            row["dice_per_label"] = {str(k): float(v) for k, v in scores.items()}
            row["dice_mean"] = float(np.mean(list(scores.values()))) if scores else None
        gt = dataset.gt_field(pair)
        if gt is not None:
            any_gt = True
            err = np.sqrt(((field_.vectors - gt.vectors) ** 2).sum(axis=0))
            row["endpoint_error"] = float(err.mean())
        report.per_pair.append(row)
    if not any_labels and not any_gt:
        msg = "no labels or ground-truth fields; report restricted to smoothness and timing"
        logger.warning(msg)
        report.notes.append(msg)
    report.aggregate = _aggregate(report.per_pair)
    return report


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

AUG_MODES = {
    "neither": dict(geometric=False, intensity=False),
    "intensity": dict(geometric=False, intensity=True),
    "geometric": dict(geometric=True, intensity=False),
    "both": dict(geometric=True, intensity=True),
}


def _cell_config(base: TrainConfig, loss_mode: str, aug_mode: str, seed: int) -> TrainConfig:
    aug = replace(base.augment, **AUG_MODES[aug_mode])
    cfg = replace(base, loss_mode=loss_mode, augment=aug, seed=seed)
    if loss_mode == "joint" and aug_mode == "neither":
        # the no-augmentation contrastive cell degenerates to registration-only
        cfg = replace(cfg, loss_mode="reg_only")
    return cfg


def ablation_run(
    train_dataset,
    test_dataset,
    base_config: TrainConfig,
    seeds=(0,),
    loss_modes=("reg_only", "contrastive_frozen", "joint"),
    aug_modes=("geometric",),
    timing_repeats: int = 1,
) -> dict:
    """Train and evaluate every (loss_mode, aug_mode, seed) cell.

    Seeds are shared across cells so comparisons are paired. Returns a dict
    with per-cell rows, per-cell aggregated means, and a paired Wilcoxon
    comparison of per-pair Dice between the joint and registration-only
    cells when both are present.
    """
    cells = []
    per_pair_dice: dict = {}
    for loss_mode in loss_modes:
        for aug_mode in aug_modes:
            for seed in seeds:
                cfg = _cell_config(base_config, loss_mode, aug_mode, int(seed))
                state = run_training(train_dataset, cfg)
                report = evaluate(state, test_dataset, timing_repeats=timing_repeats, seed=int(seed))
                row = {
                    "loss_mode": loss_mode,
                    "aug_mode": aug_mode,
                    "seed": int(seed),
                    "dice_mean": report.aggregate.get("dice_mean"),
                    "sdlogj_mean": report.aggregate.get("sdlogj_mean"),
                    "t_inf_median": report.aggregate.get("t_inf_median"),
                }
                logger.info(
                    "ablation cell %s/%s seed %d: dice %.4f sdlogj %.3f",
                    loss_mode, aug_mode, seed,
                    row["dice_mean"] if row["dice_mean"] is not None else float("nan"),
                    row["sdlogj_mean"] if row["sdlogj_mean"] is not None else float("nan"),
                )
                cells.append(row)
                key = (loss_mode, aug_mode)
                per_pair_dice.setdefault(key, []).extend(
                    r.get("dice_mean") for r in report.per_pair if r.get("dice_mean") is not None
                )
    summary = {}
    for (loss_mode, aug_mode), values in per_pair_dice.items():
        rows = [
            c for c in cells if c["loss_mode"] == loss_mode and c["aug_mode"] == aug_mode
        ]
        summary[f"{loss_mode}|{aug_mode}"] = {
            "dice_mean": float(np.mean([r["dice_mean"] for r in rows])),
            "dice_sd": float(np.std([r["dice_mean"] for r in rows])),
            "sdlogj_mean": float(np.mean([r["sdlogj_mean"] for r in rows])),
            "n_runs": len(rows),
        }
    result = {"cells": cells, "summary": summary}
    joint_key = next((k for k in per_pair_dice if k[0] == "joint"), None)
    reg_key = next((k for k in per_pair_dice if k[0] == "reg_only"), None)
    if joint_key and reg_key:
        a, b = per_pair_dice[joint_key], per_pair_dice[reg_key]
        if len(a) == len(b):
            result["wilcoxon_joint_vs_reg_only"] = wilcoxon_signed_rank(a, b)
    return result


def ablation_to_markdown(result: dict) -> str:
    lines = [
        "| loss mode | augmentation | Dice (mean ± sd) | SDlogJ | runs |",
        "|---|---|---|---|---|",
    ]
    for key, row in sorted(result["summary"].items()):
        loss_mode, aug_mode = key.split("|")
        lines.append(
            f"| {loss_mode} | {aug_mode} | {row['dice_mean']:.3f} ± {row['dice_sd']:.3f} "
            f"| {row['sdlogj_mean']:.3f} | {row['n_runs']} |"
        )
    wil = result.get("wilcoxon_joint_vs_reg_only")
    if wil:
        lines.append("")
        lines.append(
            f"Paired Wilcoxon (joint vs reg-only per-pair Dice): "
            f"statistic={wil['statistic']:.1f}, p={wil['p_value']:.4g}, n={wil['n']}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------

def overlay_panels(
    fixed,
    labels_fixed,
    labels_moving,
    labels_warped,
    out_prefix,
    planes=("axial", "coronal"),
) -> list[Path]:
    """Render four-panel label overlays (fixed, fixed+fixed labels,
    fixed+moving labels, fixed+warped labels) as one PNG per plane."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    vol = fixed.data if hasattr(fixed, "data") else np.asarray(fixed)
    maps = [
        None,
        labels_fixed.labels if isinstance(labels_fixed, LabelMap) else labels_fixed,
        labels_moving.labels if isinstance(labels_moving, LabelMap) else labels_moving,
        labels_warped.labels if isinstance(labels_warped, LabelMap) else labels_warped,
    ]
    titles = ["fixed", "fixed labels", "moving labels", "warped labels"]
    written = []
    for plane in planes:
        if plane == "axial":
            img_slice = lambda a: a[a.shape[0] // 2]  # noqa: E731
        elif plane == "coronal":
            img_slice = lambda a: a[:, a.shape[1] // 2]  # noqa: E731
        else:
            raise ValueError(f"unknown plane {plane!r}")
        fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
        for ax, overlay, title in zip(axes, maps, titles):
            ax.imshow(img_slice(vol), cmap="gray", interpolation="nearest")
            if overlay is not None:
                lab = img_slice(overlay).astype(float)
                masked = np.ma.masked_where(lab == 0, lab)
                ax.imshow(masked, cmap="tab10", alpha=0.5, interpolation="nearest",
                          vmin=1, vmax=max(10, lab.max()))
            ax.set_title(title, fontsize=9)
            ax.axis("off")
        fig.tight_layout()
        out_path = Path(f"{out_prefix}_{plane}.png")
        fig.savefig(out_path, dpi=110)
        plt.close(fig)
        written.append(out_path)
    return written
