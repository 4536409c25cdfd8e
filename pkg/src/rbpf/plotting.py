"""Matplotlib rendering for benchmark reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .bench import MCU_REFERENCE, BenchReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}

HOST_COLOR = "#1f77b4"
MCU_COLOR = "#bbbbbb"


def _fletcher(reports: list[BenchReport]) -> BenchReport | None:
    return next((r for r in reports if r.workload == "fletcher32"), None)


def render_bench_figure(reports: list[BenchReport], path: str | Path) -> Path:
    """Write a two-panel figure: script sizes and interpreter throughput.

    The host numbers are drawn next to the microcontroller reference values
    so the size regime and the throughput floor can be read off directly.
    """
    path = Path(path)
    ref = MCU_REFERENCE["fletcher32"]
    with plt.rc_context(STYLE):
        fig, (ax_size, ax_rate) = plt.subplots(1, 2, figsize=(7.0, 2.8))

        labels, sizes, colors = [], [], []
        for name, entry in (("native C", ref["native_c"]), ("wasm3", ref["wasm3"]), ("rBPF (MCU)", ref["rbpf"])):
            labels.append(name)
            sizes.append(entry["code_size"])
            colors.append(MCU_COLOR)
        for r in reports:
            labels += [f"{r.workload}", f"{r.workload}\nlzss"]
            sizes += [r.bytecode_size, r.compressed_size]
            colors += [HOST_COLOR, HOST_COLOR]
        ax_size.bar(range(len(sizes)), sizes, color=colors)
        ax_size.set_xticks(range(len(sizes)))
        ax_size.set_xticklabels(labels, rotation=45, ha="right")
        ax_size.set_ylabel("bytes")
        ax_size.set_title("script size")

        names = ["MCU floor"] + [r.workload for r in reports]
        rates = [ref["rbpf_instructions_per_second"]] + [r.instructions_per_second for r in reports]
        ax_rate.bar(range(len(rates)), [x / 1e6 for x in rates], color=[MCU_COLOR] + [HOST_COLOR] * len(reports))
        ax_rate.axhline(ref["rbpf_instructions_per_second"] / 1e6, color="k", lw=0.8, ls="--")
        ax_rate.set_xticks(range(len(rates)))
        ax_rate.set_xticklabels(names, rotation=45, ha="right")
        ax_rate.set_ylabel("M instructions / s")
        ax_rate.set_title("interpreter throughput")

        fig.tight_layout()
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
    return path
