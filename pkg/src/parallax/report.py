"""Figures for metric streams.  Headless: always renders through the Agg backend."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from parallax.stability import LOGIT_CAP  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def read_metrics(path) -> list[dict]:
    """Parse an NDJSON metric file, decoding the string markers for non-finite numbers."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append({k: _decode(v) for k, v in rec.items()})
    return out


def _decode(v):
    if v in ("nan", "inf", "-inf"):
        return float(v)
    return v


def _series(records, key):
    rows = [(r["step"], r[key]) for r in records if "step" in r and key in r]
    if not rows:
        return np.zeros(0), np.zeros(0)
    steps, vals = zip(*rows)
    return np.asarray(steps), np.asarray(vals, dtype=np.float64)


def plot_stability(runs: dict, path, cap: float = LOGIT_CAP) -> None:
    """Max |logit| (values past ``cap`` drawn at ``cap``) and max |grad| per step, one line per run."""
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_g) = plt.subplots(1, 2, figsize=(10, 3.6))
        for label, records in runs.items():
            s, logit = _series(records, "max_abs_logit")
            logit = np.where(np.isfinite(logit), np.minimum(logit, cap), cap)
            ax_l.plot(s, logit, label=label, lw=1)
            s, grad = _series(records, "grad_max")
            ax_g.plot(s, np.where(np.isfinite(grad), grad, np.nan), label=label, lw=1)
        ax_l.axhline(cap, color="k", ls=":", lw=0.8)
        ax_l.set(xlabel="step", ylabel="max |logit|", yscale="log", title="logits")
        ax_g.set(xlabel="step", ylabel="max |grad|", yscale="log", title="gradients")
        ax_l.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_training(records: list[dict], path) -> None:
    """Loss per step and accuracy per epoch and split."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 3.6))
        s, loss = _series(records, "loss")
        ax_loss.plot(s, loss, lw=0.8)
        ax_loss.set(xlabel="step", ylabel="cross-entropy")
        for split in ("train", "test"):
            rows = [(r["epoch"], r["accuracy"]) for r in records if r.get("split") == split]
            if rows:
                ax_acc.plot(*zip(*rows), marker="o", ms=3, label=split)
        ax_acc.set(xlabel="epoch", ylabel="accuracy", ylim=(0, 1))
        ax_acc.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_gan(records: list[dict], path, smooth: int = 25) -> None:
    """Loss components (moving average over ``smooth`` steps) and periodic cycle-L1 / Fréchet evaluations."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_eval) = plt.subplots(1, 2, figsize=(10, 3.6))
        train = [r for r in records if "cycle" in r]
        for key in ("g_adv_ab", "g_adv_ba", "cycle", "identity", "d_a", "d_b"):
            s, v = _series(train, key)
            if len(v) >= smooth:
                v = np.convolve(v, np.ones(smooth) / smooth, mode="valid")
                s = s[smooth - 1 :]
            ax_loss.plot(s, v, lw=0.8, label=key)
        ax_loss.set(xlabel="step", ylabel="loss", yscale="log")
        ax_loss.legend(fontsize=7, ncol=2)
        evals = [r for r in records if "cycle_l1" in r]
        if evals:
            s, cyc = _series(evals, "cycle_l1")
            h1 = ax_eval.plot(s, cyc, marker="o", color="C0", label="cycle L1")
            ax_fid = ax_eval.twinx()
            s, fid = _series(evals, "fid_b")
            h2 = ax_fid.plot(s, fid, marker="s", ls="--", color="C1", label="Fréchet (B)")
            ax_fid.set_ylabel("Fréchet distance")
            ax_eval.legend(h1 + h2, [h.get_label() for h in h1 + h2], fontsize=7)
        ax_eval.set(xlabel="step", ylabel="cycle L1")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_samples(rows: dict, path) -> None:
    """Grid of [3,H,W] images in [-1,1]; one row per key."""
    with plt.rc_context(STYLE):
        n = max(len(v) for v in rows.values())
        fig, axes = plt.subplots(len(rows), n, figsize=(1.2 * n, 1.2 * len(rows)), squeeze=False)
        for i, (label, images) in enumerate(rows.items()):
            for j in range(n):
                ax = axes[i, j]
                ax.axis("off")
                if j < len(images):
                    ax.imshow(np.clip((np.transpose(images[j], (1, 2, 0)) + 1) / 2, 0, 1))
            axes[i, 0].set_title(label, fontsize=7, loc="left")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
