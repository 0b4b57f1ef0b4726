"""Plain-text rendering of epoch logs and ablation grids."""

from __future__ import annotations

import json
from pathlib import Path

from .errors import FormatError


def _fmt(value, width: int = 8, digits: int = 4) -> str:
    if value is None:
        return "-".rjust(width)
    return f"{value:.{digits}f}".rjust(width)


def render_epoch_table(records: list[dict]) -> str:
    header = (f"{'epoch':>5} {'lr':>10} {'total':>10} {'tdd':>10} {'tfd':>10} "
              f"{'ir@1':>7} {'tr@1':>7} {'mean@1':>7}")
    lines = [header, "-" * len(header)]
    for r in records:
        val = r.get("val", {})
        mean_r1 = 0.5 * (val.get("ir_r1", 0.0) + val.get("tr_r1", 0.0))
        lines.append(
            f"{r['epoch']:>5} {r['lr']:>10.6f} {_fmt(r['loss_total'], 10)} "
            f"{_fmt(r.get('loss_tdd'), 10)} {_fmt(r.get('loss_tfd'), 10)} "
            f"{_fmt(val.get('ir_r1'), 7, 3)} {_fmt(val.get('tr_r1'), 7, 3)} "
            f"{_fmt(mean_r1, 7, 3)}")
    return "\n".join(lines)


def render_ablation_table(result: dict) -> str:
    header = (f"{'loss':<18} {'seeds':>5} {'mean R@1':>9} "
              f"{'IR@1':>7} {'IR@5':>7} {'IR@10':>7} "
              f"{'TR@1':>7} {'TR@5':>7} {'TR@10':>7}")
    lines = [header, "-" * len(header)]
    for row in result["rows"]:
        m = row["metrics_mean"]
        lines.append(
            f"{row['label']:<18} {len(row['seeds']):>5} {row['mean_r1']:>9.4f} "
            f"{m['ir_r1']:>7.4f} {m['ir_r5']:>7.4f} {m['ir_r10']:>7.4f} "
            f"{m['tr_r1']:>7.4f} {m['tr_r5']:>7.4f} {m['tr_r10']:>7.4f}")
    return "\n".join(lines)


def read_epoch_log(path) -> list[dict]:
    records = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: bad epoch record on line {i + 1}: {e.msg}") from e
    return records
