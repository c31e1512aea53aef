"""NMSE metric, per-(frequency, density) sweeps and heatmap rendering."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

NMSE_FLOOR_DB = -120.0
REGIONS = ("full", "unknown-only")
SWEEP_HEADER = ("frequency_hz", "m", "nmse_db", "n_samples")


@dataclass
class EvalRecord:
    sample_id: int
    method: str
    m: int
    frequency: float
    ratio: float


def _region(truth: np.ndarray, mask, region: str) -> np.ndarray:
    if region == "full":
        return np.ones(truth.shape, dtype=bool)
    if region == "unknown-only":
        if mask is None:
            raise ValueError("region 'unknown-only' needs the observation mask")
        return ~np.asarray(mask, dtype=bool)
    raise ValueError(f"region must be one of {REGIONS}, got {region!r}")


def error_ratio(estimate, truth, mask=None, region: str = "full", sample_id=None) -> float:
    """||estimate - truth||^2 / ||truth||^2 over the selected cells."""
    estimate = np.asarray(estimate)
    truth = np.asarray(truth)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch {estimate.shape} vs {truth.shape}")
    sel = _region(truth, mask, region)
    denom = float(np.sum(np.abs(truth[sel]) ** 2))
    if not denom > 0:
        raise ValueError(f"ground truth of sample {sample_id} has zero norm over region {region!r}")
    return float(np.sum(np.abs(estimate[sel] - truth[sel]) ** 2)) / denom


def ratio_to_db(mean_ratio: float) -> float:
    if mean_ratio <= 0:
        return NMSE_FLOOR_DB
    return max(10.0 * np.log10(mean_ratio), NMSE_FLOOR_DB)


def nmse(estimates: Sequence, truths: Sequence, region: str = "full", masks: Sequence | None = None) -> float:
    """NMSE in dB averaged over samples, floored at -120 dB."""
    if len(estimates) != len(truths):
        raise ValueError(f"{len(estimates)} estimates for {len(truths)} truths")
    if not truths:
        raise ValueError("nmse needs at least one sample")
    masks = masks if masks is not None else [None] * len(truths)
    ratios = [error_ratio(e, t, m, region, i) for i, (e, t, m) in enumerate(zip(estimates, truths, masks))]
    return ratio_to_db(float(np.mean(ratios)))


def evaluate(samples: Sequence, estimates: Sequence, method: str, region: str = "full") -> list[EvalRecord]:
    if len(samples) != len(estimates):
        raise ValueError(f"{len(estimates)} estimates for {len(samples)} samples")
    return [
        EvalRecord(i, method, s.mask.m, float(s.frequency),
                   error_ratio(e, s.magnitude, s.mask.bits, region, i))
        for i, (s, e) in enumerate(zip(samples, estimates))
    ]


def aggregate(records: Iterable[EvalRecord]) -> list[tuple[float, int, float, int]]:
    """Rows (frequency_hz, m, nmse_db, n_samples), frequency then m ascending."""
    groups: dict[tuple[float, int], list[float]] = defaultdict(list)
    for r in records:
        groups[(r.frequency, r.m)].append(r.ratio)
    return [(f, m, ratio_to_db(float(np.mean(v))), len(v)) for (f, m), v in sorted(groups.items())]


def sweep(shards: Mapping[int, Sequence], method: Callable[[Sequence], Sequence[np.ndarray]],
          densities: Iterable[int] = (64, 128, 256, 512), region: str = "full",
          name: str = "method") -> list[tuple[float, int, float, int]]:
    """Run ``method`` on each density shard and tabulate NMSE per (frequency, m)."""
    records: list[EvalRecord] = []
    for m in densities:
        if m not in shards:
            raise KeyError(f"no test shard for m={m}")
        samples = shards[m]
        records.extend(evaluate(samples, method(samples), name, region))
    return aggregate(records)


def format_sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for f, m, db, n in rows:
        w.writerow([f"{f:.6g}", m, f"{db:.4f}", n])
    return buf.getvalue()


def write_sweep_csv(path, rows) -> None:
    Path(path).write_bytes(format_sweep_csv(rows).encode("utf-8"))


def read_sweep_csv(path) -> list[tuple[float, int, float, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.DictReader(fh)
        return [(float(x["frequency_hz"]), int(x["m"]), float(x["nmse_db"]), int(x["n_samples"])) for x in r]


def _figure_png(fig, path) -> None:
    import matplotlib.pyplot as plt

    buf = io.BytesIO()
    # no Software/date chunks so identical inputs give identical bytes
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    Path(path).write_bytes(buf.getvalue())


def _draw_field(ax, field, title=None, cmap="viridis", vmin=None, vmax=None):
    lo = float(np.min(field)) if vmin is None else vmin
    hi = float(np.max(field)) if vmax is None else vmax
    if hi <= lo:
        hi = lo + 1.0
    # x along the first grid axis, drawn horizontally
    im = ax.imshow(np.asarray(field).T, origin="lower", cmap=cmap, vmin=lo, vmax=hi,
                   interpolation="nearest", aspect="equal")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=9)
    return im, lo, hi


def render_heatmap(field, path, title: str | None = None) -> None:
    """Nearest-neighbour heatmap (>= 256 px per side) with a min/max colour bar."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    field = np.asarray(field, dtype=float)
    if not np.all(np.isfinite(field)):
        raise ValueError("cannot render a non-finite field")
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    im, lo, hi = _draw_field(ax, field, title)
    cb = fig.colorbar(im, ax=ax, ticks=[lo, hi])
    cb.ax.set_yticklabels([f"{lo:.3g}", f"{float(np.max(field)):.3g}"])
    fig.tight_layout()
    _figure_png(fig, path)


def render_panel(mask, truth, estimates: Mapping[str, np.ndarray], path, nmse_db: Mapping[str, float] | None = None):
    """Side-by-side panel: microphone layout, ground truth, then one panel per method."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    truth = np.asarray(truth, dtype=float)
    n = 2 + len(estimates)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.9))
    _draw_field(axes[0], np.asarray(mask, dtype=float), "microphones", cmap="gray_r", vmin=0, vmax=1)
    lo, hi = float(truth.min()), float(truth.max())
    _draw_field(axes[1], truth, "ground truth", vmin=lo, vmax=hi)
    for ax, (name, est) in zip(axes[2:], estimates.items()):
        label = name if not nmse_db or name not in nmse_db else f"{name} ({nmse_db[name]:.2f} dB)"
        _draw_field(ax, np.asarray(est, dtype=float), label, vmin=lo, vmax=hi)
    fig.tight_layout()
    _figure_png(fig, path)
