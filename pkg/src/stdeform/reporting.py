"""Report serialization (CSV/JSON) and optional matplotlib figures.

JSON output is canonical (sorted keys, fixed indentation) so a fixed seed
yields byte-identical files across runs. Figures are rendered next to the
delimited output when requested; they never carry data that is not already
in the CSV/JSON report.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def emit(text: str, out: str | Path | None):
    """Write report text to a file, or to stdout when no path is given."""
    if out is None:
        print(text, end="")
    else:
        Path(out).write_text(text)


def sibling_path(out: str | Path | None, suffix: str, default_stem: str) -> Path:
    """Path for a secondary artifact next to the main report."""
    if out is None:
        return Path(f"{default_stem}{suffix}")
    out = Path(out)
    return out.with_name(out.stem + suffix)


def render_scaling_figure(reports, path: Path):
    """Log-log multiply counts per path with their fitted slopes."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for report in reports:
        mults = [c.multiplies for c in report.counts]
        ax.loglog(report.cells, mults, "o-",
                  label=f"{report.path} (slope {report.slope:.2f})")
    ax.set_xlabel("grid cells (H*W*T)")
    ax.set_ylabel("multiplies per attention pass")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_uniformity_figure(entries, path: Path):
    """Scaled and raw deviation-from-uniform statistics against key count."""
    n_k = [e["n_k"] for e in entries]
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.semilogx(n_k, [e["scaled_max_deviation"] for e in entries], "o-",
                label="N_k * E[max |A - 1/N_k|]")
    ax.semilogx(n_k, [e["max_deviation"] for e in entries], "s--",
                label="E[max |A - 1/N_k|]")
    ax.set_xlabel("key count N_k")
    ax.set_ylabel("deviation from uniform weights")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_loss_figure(trace, path: Path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(trace)), trace, "o-")
    ax.set_xlabel("gradient-descent step")
    ax.set_ylabel("toy loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_equiv_figure(entries, path: Path):
    """Max-abs output difference per grid configuration of the equivalence sweep."""
    diffs = [e["max_abs_diff"] for e in entries]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.semilogy(range(len(diffs)), [max(d, 1e-18) for d in diffs], ".")
    ax.axhline(1e-10, color="red", linestyle="--", label="tolerance 1e-10")
    ax.set_xlabel("sweep instance")
    ax.set_ylabel("max |deformable - dense|")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
