"""Report formatting utilities."""

from __future__ import annotations

from collections.abc import Sequence

from .linalg import Vec
from .models import AblationReport, EvalReport, PairId, TrainStats, TuneResult, Vocab
from .parsers import format_floats

STATS_HEADER = "epoch,total,triplet,aux,inv,comm,ant,seconds"


def percent(fraction: float) -> str:
    """Fraction as a percentage with one decimal, e.g. 0.1169 -> ``11.7%``."""
    return f"{100.0 * fraction:.1f}%"


def format_report(
    report: EvalReport,
    worlds: Sequence[str] = ("closed", "open"),
    obj_oracle: bool = True,
) -> str:
    """Format an evaluation report as text.

    The h-mean line needs both worlds and is shown only when both are selected.
    """
    lines = ["=" * 60, "UNSEEN PAIR ACCURACY (top-1)", "=" * 60]
    lines.append(f"Test images: {report.n_test}")
    lines.append("")
    if "closed" in worlds:
        lines.append(f"Closed world: {percent(report.closed_top1)}")
    if "open" in worlds:
        lines.append(f"Open world:   {percent(report.open_top1)}")
    if obj_oracle:
        lines.append(f"+obj ({report.oracle_world}): {percent(report.obj_oracle_top1)}")
    if "closed" in worlds and "open" in worlds:
        lines.append(f"H-mean:       {percent(report.h_mean)}")

    if report.per_pair:
        lines.append("")
        lines.append(f"Per pair ({len(report.per_pair)}):")
        width = max(len(f"{row.attr} {row.obj}") for row in report.per_pair)
        for row in report.per_pair:
            cells = [f"n={row.count}"]
            if "closed" in worlds:
                cells.append(f"closed {percent(row.closed_top1)}")
            if "open" in worlds:
                cells.append(f"open {percent(row.open_top1)}")
            if obj_oracle:
                cells.append(f"+obj {percent(row.obj_oracle_top1)}")
            lines.append(f"  {f'{row.attr} {row.obj}':<{width}}  " + "  ".join(cells))
    lines.append("=" * 60)
    return "\n".join(lines)


def report_to_csv(report: EvalReport) -> str:
    """``metric,value`` rows, then one row per test pair."""
    lines = [
        "metric,value",
        f"closed_top1,{report.closed_top1:.6f}",
        f"open_top1,{report.open_top1:.6f}",
        f"obj_oracle_top1,{report.obj_oracle_top1:.6f}",
        f"h_mean,{report.h_mean:.6f}",
        f"n_test,{report.n_test}",
        "",
        "attr,obj,count,closed_top1,open_top1,obj_oracle_top1",
    ]
    for row in report.per_pair:
        lines.append(
            f"{row.attr},{row.obj},{row.count},{row.closed_top1:.6f},"
            f"{row.open_top1:.6f},{row.obj_oracle_top1:.6f}"
        )
    return "\n".join(lines) + "\n"


def format_stats_csv(stats: TrainStats, deterministic: bool = False) -> str:
    """Per-epoch loss table; timings are zeroed when ``deterministic``."""
    lines = [STATS_HEADER]
    for row in stats.epochs:
        seconds = 0.0 if deterministic else row.seconds
        lines.append(
            f"{row.epoch},{row.total:.17g},{row.triplet:.17g},{row.aux:.17g},"
            f"{row.inv:.17g},{row.comm:.17g},{row.ant:.17g},{seconds:.6f}"
        )
    return "\n".join(lines) + "\n"


def format_embedding_rows(vocab: Vocab, rows: Sequence[tuple[PairId, Vec]]) -> str:
    return "".join(
        f"{vocab.attributes[pair.attr]} {vocab.objects[pair.obj]} {format_floats(vec)}\n"
        for pair, vec in rows
    )


def format_ablation(report: AblationReport) -> str:
    lines = [f"{'variant':<10} {'closed':>8} {'open':>8} {'+obj':>8} {'h-mean':>8}"]
    for name, row in report.rows.items():
        lines.append(
            f"{name:<10} {percent(row.closed_top1):>8} {percent(row.open_top1):>8} "
            f"{percent(row.obj_oracle_top1):>8} {percent(row.h_mean):>8}"
        )
    return "\n".join(lines)


def ablation_to_csv(report: AblationReport) -> str:
    lines = ["variant,closed_top1,open_top1,obj_oracle_top1,h_mean"]
    for name, row in report.rows.items():
        lines.append(
            f"{name},{row.closed_top1:.6f},{row.open_top1:.6f},"
            f"{row.obj_oracle_top1:.6f},{row.h_mean:.6f}"
        )
    return "\n".join(lines) + "\n"


def format_tune(result: TuneResult) -> str:
    lines = ["w_aux      open (validation)"]
    for weight, score in result.scores.items():
        marker = "  <- best" if weight == result.best_w_aux else ""
        lines.append(f"{weight:<10g} {percent(score)}{marker}")
    return "\n".join(lines)


def format_ranking(ids: Sequence[str]) -> str:
    return "\n".join(f"{rank}. {image_id}" for rank, image_id in enumerate(ids, 1))
