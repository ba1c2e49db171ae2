"""Delimited exports and figure rendering for solve results.

Every report is written twice: machine-readable CSV next to a rendered PNG
of the same series.  Squared voltages are plotted on the pu voltage scale
(square root) with their limit lines; data files keep the raw pu2 values.
All writers are deterministic for fixed inputs.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_PNG_META = {"Software": None}  # keep byte-stable output


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_profile_csv(path: Path, nodes, v_pu2) -> None:
    rows = [[n, repr(float(v))] for n, v in zip(nodes, v_pu2)]
    _write(path, _csv_text(["node", "v_pu2"], rows))


def write_voltage_bounds_csv(path: Path, nodes, v_lo, v_exact, v_hi) -> None:
    rows = [
        [n, repr(float(a)), repr(float(b)), repr(float(c))]
        for n, a, b, c in zip(nodes, v_lo, v_exact, v_hi)
    ]
    _write(path, _csv_text(["node", "v_lower_pu2", "v_exact_pu2", "v_upper_pu2"], rows))


def write_flow_bounds_csv(path: Path, edges, p_lo, p_ex, p_hi, q_lo, q_ex, q_hi) -> None:
    rows = []
    for k, (f, t) in enumerate(edges):
        rows.append(
            [
                f,
                t,
                repr(float(p_lo[k])),
                repr(float(p_ex[k])),
                repr(float(p_hi[k])),
                repr(float(q_lo[k])),
                repr(float(q_ex[k])),
                repr(float(q_hi[k])),
            ]
        )
    _write(
        path,
        _csv_text(
            [
                "from",
                "to",
                "p_lower_pu",
                "p_exact_pu",
                "p_upper_pu",
                "q_lower_pu",
                "q_exact_pu",
                "q_upper_pu",
            ],
            rows,
        ),
    )


def write_hosting_csv(path: Path, nodes, caps) -> None:
    rows = [[n, repr(float(c))] for n, c in zip(nodes, caps)]
    _write(path, _csv_text(["node", "p_max_pu"], rows))


def write_schedule_csv(path: Path, hours, load_p, battery_discharge) -> None:
    rows = [
        [repr(float(t)), repr(float(lp)), repr(float(bd))]
        for t, lp, bd in zip(hours, load_p, battery_discharge)
    ]
    _write(path, _csv_text(["t_h", "load_p_pu", "battery_discharge_pu"], rows))


# --- figures -----------------------------------------------------------------


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=144, metadata=_PNG_META)
    plt.close(fig)


def plot_profile(path: Path, nodes, v_pu2, v_min, v_max) -> None:
    import numpy as np

    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(nodes, np.sqrt(np.asarray(v_pu2)), "o-", color="tab:blue", label="load flow")
    ax.plot(nodes, np.sqrt(np.asarray(v_min)), ":", color="gray", label="limits")
    ax.plot(nodes, np.sqrt(np.asarray(v_max)), ":", color="gray")
    ax.set_xlabel("node")
    ax.set_ylabel("voltage (pu)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_voltage_bounds(path: Path, nodes, v_lo, v_exact, v_hi, v_min, v_max) -> None:
    import numpy as np

    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(nodes, np.sqrt(np.asarray(v_hi)), "v-", label="upper bound", color="tab:red")
    ax.plot(nodes, np.sqrt(np.asarray(v_exact)), "o-", label="load flow", color="tab:blue")
    ax.plot(nodes, np.sqrt(np.asarray(v_lo)), "^-", label="lower bound", color="tab:green")
    ax.plot(nodes, np.sqrt(np.asarray(v_min)), ":", color="gray", label="limits")
    ax.plot(nodes, np.sqrt(np.asarray(v_max)), ":", color="gray")
    ax.set_xlabel("node")
    ax.set_ylabel("voltage (pu)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_flow_bounds(path: Path, edges, p_lo, p_ex, p_hi, q_lo, q_ex, q_hi) -> None:
    labels = [f"{f}-{t}" for f, t in edges]
    xs = range(len(labels))
    fig, axes = plt.subplots(2, 1, figsize=(6.4, 5.4), sharex=True)
    for ax, lo, ex, hi, name in (
        (axes[0], p_lo, p_ex, p_hi, "real flow (pu)"),
        (axes[1], q_lo, q_ex, q_hi, "reactive flow (pu)"),
    ):
        ax.plot(xs, hi, "v-", label="upper bound", color="tab:red")
        ax.plot(xs, ex, "o-", label="load flow", color="tab:blue")
        ax.plot(xs, lo, "^-", label="lower bound", color="tab:green")
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    axes[1].set_xticks(list(xs))
    axes[1].set_xticklabels(labels, rotation=60, fontsize=7)
    axes[1].set_xlabel("branch")
    fig.tight_layout()
    _save(fig, path)


def plot_hosting(path: Path, nodes, caps, comparison: dict | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    xs = range(len(nodes))
    ax.bar(xs, caps, width=0.6, color="tab:orange", label="per-node capacity")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([str(n) for n in nodes])
    ax.set_xlabel("node")
    ax.set_ylabel("hosting capacity (pu)")
    title = f"aggregate {sum(caps):.3f} pu"
    if comparison:
        title += "   " + "  ".join(f"{k}: {v:.3f}" for k, v in comparison.items())
    ax.set_title(title, fontsize=9)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    _save(fig, path)


def plot_tightening_error(path: Path, errors, eps) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.semilogy(range(1, len(errors) + 1), errors, "o-")
    ax.axhline(eps, color="tab:red", linestyle=":", label=f"tolerance {eps:g}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("max voltage gap (pu2)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    _save(fig, path)


def plot_schedule(path: Path, hours, load_p, battery_discharge) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.step(hours, load_p, where="post", label="net demand", color="tab:blue")
    ax.step(
        hours,
        battery_discharge,
        where="post",
        label="battery discharge",
        color="tab:orange",
    )
    ax.set_xlabel("hour")
    ax.set_ylabel("power (pu)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_storage_comparison(path: Path, totals: dict) -> None:
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    keys = list(totals)
    ax.bar(range(len(keys)), [totals[k] for k in keys], width=0.5, color="tab:green")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys)
    ax.set_ylabel("total hosting (pu h)")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    _save(fig, path)
