"""Benchmark reporting: markdown tables, tidy plot data, and figures.

Groups result rows into a variant-by-condition table per noise pool,
adds the relative-improvement row between the dual_use and middle
variants, and renders WER curves/bars to PNG next to the delimited
output.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import SchemaError
from .train_eval import read_results

VARIANT_ORDER = ("audio_only", "early", "middle", "dual_use")


def relative_improvement(a, b):
    """(b - a) / b: how much smaller a is, as a fraction of b."""
    if b == 0:
        raise SchemaError("relative improvement undefined for zero baseline")
    return (b - a) / b


def load_result_files(paths, allow_mixed=False):
    """Read one or more results CSVs; digests must agree unless allowed."""
    digests, rows = [], []
    for path in paths:
        digest, part = read_results(path)
        digests.append(digest)
        rows.extend(part)
    if not allow_mixed and len(set(digests)) > 1:
        raise SchemaError(
            f"mixed config digests {sorted(set(digests))}; pass --allow-mixed "
            f"to combine them")
    return digests[0] if digests else "", rows


def _label_sort_key(label):
    if label == "clean":
        return (1, 0.0)
    if label == "avg":
        return (2, 0.0)
    return (0, float(label))


def _variant_sort_key(variant):
    try:
        return (VARIANT_ORDER.index(variant), variant)
    except ValueError:
        return (len(VARIANT_ORDER), variant)


def group_rows(rows):
    """{(pool, split): {variant: {snr_label: wer}}} plus metadata."""
    table = {}
    meta = {}
    for row in rows:
        cell = table.setdefault((row.noise_pool, row.split), {})
        cell.setdefault(row.variant, {})[row.snr_label] = row.wer
        meta[row.variant] = (row.mode, row.params)
    return table, meta


def render_markdown(rows, digest=""):
    table, meta = group_rows(rows)
    lines = ["# Benchmark report", ""]
    if digest:
        lines += [f"Config digest: `{digest}`", ""]
    for (pool, split) in sorted(table):
        variants = sorted(table[(pool, split)], key=_variant_sort_key)
        labels = sorted({lbl for v in variants
                         for lbl in table[(pool, split)][v]},
                        key=_label_sort_key)
        lines.append(f"## Pool {pool}, split {split}")
        lines.append("")
        header = ["variant", "mode", "params"] + [f"WER {l} dB" if l not in
                                                  ("clean", "avg") else
                                                  f"WER {l}" for l in labels]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for variant in variants:
            mode, params = meta[variant]
            cells = [variant, mode, str(params)]
            for label in labels:
                value = table[(pool, split)][variant].get(label)
                cells.append("-" if value is None else f"{100 * value:.2f}%")
            lines.append("| " + " | ".join(cells) + " |")
        both = all(v in table[(pool, split)] for v in ("dual_use", "middle"))
        if both:
            cells = ["rel. improvement (dual_use vs middle)", "", ""]
            for label in labels:
                a = table[(pool, split)]["dual_use"].get(label)
                b = table[(pool, split)]["middle"].get(label)
                if a is None or b is None or b == 0:
                    cells.append("-")
                else:
                    cells.append(f"{100 * relative_improvement(a, b):.1f}%")
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines) + "\n"


def write_plot_data(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["noise_pool", "split", "variant", "snr_db", "wer"])
        ordered = sorted(rows, key=lambda r: (r.noise_pool, r.split,
                                              _variant_sort_key(r.variant),
                                              _label_sort_key(r.snr_label)))
        for row in ordered:
            writer.writerow([row.noise_pool, row.split, row.variant,
                             row.snr_label, repr(float(row.wer))])


def render_figures(rows, out_dir):
    """WER-vs-SNR curves and a clean/0 dB bar chart per (pool, split)."""
    os.makedirs(out_dir, exist_ok=True)
    table, _ = group_rows(rows)
    written = []
    for (pool, split) in sorted(table):
        variants = sorted(table[(pool, split)], key=_variant_sort_key)
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        for variant in variants:
            points = [(float(lbl), wer) for lbl, wer in
                      table[(pool, split)][variant].items()
                      if lbl not in ("clean", "avg")]
            if not points:
                continue
            points.sort()
            ax.plot([p[0] for p in points], [100 * p[1] for p in points],
                    marker="o", label=variant)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("WER (%)")
        ax.set_title(f"{pool} babble, {split} split")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        curve_path = os.path.join(out_dir, f"wer_vs_snr_{pool}_{split}.png")
        fig.savefig(curve_path, dpi=120)
        plt.close(fig)
        written.append(curve_path)

        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        width = 0.35
        xs = range(len(variants))
        clean = [100 * table[(pool, split)][v].get("clean", float("nan"))
                 for v in variants]
        noisy = [100 * table[(pool, split)][v].get("0.0", float("nan"))
                 for v in variants]
        ax.bar([x - width / 2 for x in xs], clean, width, label="clean")
        ax.bar([x + width / 2 for x in xs], noisy, width, label="0 dB babble")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(variants, rotation=15, fontsize=8)
        ax.set_ylabel("WER (%)")
        ax.set_title(f"{pool} babble, {split} split")
        ax.legend(fontsize=8)
        fig.tight_layout()
        bar_path = os.path.join(out_dir, f"wer_bars_{pool}_{split}.png")
        fig.savefig(bar_path, dpi=120)
        plt.close(fig)
        written.append(bar_path)
    return written


def write_report(results_paths, out_dir, allow_mixed=False):
    """Produce report.md, report_data.csv, and figures/ from results CSVs."""
    digest, rows = load_result_files(results_paths, allow_mixed=allow_mixed)
    if not rows:
        raise SchemaError("no result rows to report")
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "report.md")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(render_markdown(rows, digest))
    data_path = os.path.join(out_dir, "report_data.csv")
    write_plot_data(data_path, rows)
    figures = render_figures(rows, os.path.join(out_dir, "figures"))
    return {"report": report_path, "plot_data": data_path, "figures": figures}
