"""SVG figures rendered from the run directory's CSV tables."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

TIER_COLORS = {"low": "#9ecae1", "mid": "#3182bd", "high": "#08306b"}
VARIANT_COLORS = {"random": "#969696", "ti": "#e6550d", "side": "#3182bd"}
VARIANT_LABELS = {"random": "Random", "ti": "OL-TI", "side": "SIDE"}

plt.rcParams.update({"svg.hashsalt": "memextract", "svg.fonttype": "none", "font.size": 9})


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_reports(csv_path, out: Path, title: str = "") -> Path:
    """AMS and UMS against lambda, one line per tier."""
    series = defaultdict(list)
    for r in _rows(csv_path):
        series[r["tier"]].append((float(r["lambda"]), float(r["ams"]), float(r["ums"])))
    fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.0), sharex=True)
    for tier, pts in series.items():
        pts.sort()
        lam = [p[0] for p in pts]
        kw = dict(marker="o", ms=3, color=TIER_COLORS.get(tier), label=tier)
        axes[0].plot(lam, [p[1] for p in pts], **kw)
        axes[1].plot(lam, [p[2] for p in pts], **kw)
    for ax, name in zip(axes, ("AMS", "UMS")):
        ax.set_xlabel("guidance scale λ")
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
    axes[0].legend(frameon=False)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, out)


def plot_compare(csv_path, out: Path) -> Path:
    """Grouped AMS bars per tier with 95% binomial bands."""
    rows = _rows(csv_path)
    tiers = list(dict.fromkeys(r["tier"] for r in rows))
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    width = 0.8 / max(len(variants), 1)
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    for i, v in enumerate(variants):
        sel = {r["tier"]: r for r in rows if r["variant"] == v}
        xs = [k + (i - (len(variants) - 1) / 2) * width for k in range(len(tiers))]
        ax.bar(xs, [float(sel[t]["ams"]) for t in tiers], width,
               yerr=[float(sel[t]["band95"]) for t in tiers], capsize=2,
               color=VARIANT_COLORS.get(v), label=VARIANT_LABELS.get(v, v))
    ax.set_xticks(range(len(tiers)))
    ax.set_xticklabels(tiers)
    ax.set_ylabel("AMS (window average)")
    ax.legend(frameon=False)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, out)


def plot_scores(matches_csv, out: Path, thresholds=(0.4, 0.5, 0.6)) -> Path:
    """Best-match score histograms, one outline per lambda."""
    by_lam = defaultdict(list)
    for r in _rows(matches_csv):
        by_lam[float(r["lambda"])].append(float(r["score"]))
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    cmap = plt.get_cmap("viridis")
    lams = sorted(by_lam)
    for k, lam in enumerate(lams):
        ax.hist(by_lam[lam], bins=40, range=(-0.2, 1.0), histtype="step",
                color=cmap(k / max(len(lams) - 1, 1)), label=f"λ={lam:g}")
    for t in thresholds:
        ax.axvline(t, color="k", lw=0.6, ls="--")
    ax.set_xlabel("best-match similarity")
    ax.set_ylabel("generated samples")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    return _save(fig, out)


def plot_losses(csv_path, out: Path, title: str) -> Path:
    rows = _rows(csv_path)
    fig, ax = plt.subplots(figsize=(4.5, 2.8))
    ax.plot([int(r["epoch"]) for r in rows], [float(r["loss"]) for r in rows], lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, out)


def render_run(root) -> list[Path]:
    """Render every figure whose source table exists under ``root``."""
    root = Path(root)
    fig_dir = root / "figures"
    thresholds = (0.4, 0.5, 0.6)
    if (root / "config.json").exists():
        tiers = json.loads((root / "config.json").read_text())["evaluation"]["tiers"]
        thresholds = (tiers["low"], tiers["mid"], tiers["high"])
    made = []
    for name in ("side", "sweep_side"):
        if (root / f"reports/{name}.csv").exists():
            made.append(plot_reports(root / f"reports/{name}.csv", fig_dir / f"{name}_ams_ums.svg"))
        if (root / f"reports/matches_{name}.csv").exists():
            made.append(plot_scores(root / f"reports/matches_{name}.csv",
                                     fig_dir / f"{name}_scores.svg", thresholds))
    if (root / "compare.csv").exists():
        made.append(plot_compare(root / "compare.csv", fig_dir / "compare.svg"))
    for name, title in (("denoiser_loss", "denoiser"), ("distill_loss", "distillation")):
        if (root / f"logs/{name}.csv").exists():
            made.append(plot_losses(root / f"logs/{name}.csv", fig_dir / f"{name}.svg", title))
    return made
