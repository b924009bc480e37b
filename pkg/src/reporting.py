"""TSV and aligned-text rendering shared by every tabular report."""
import io
import logging
from decimal import ROUND_HALF_UP, Decimal

import pandas as pd

logger = logging.getLogger(__name__)

UNDEFINED = "undefined"


def round_half_up(value, places=2):
    """Decimal text of value rounded half-up, ignoring binary noise past 10 decimals."""
    quantum = Decimal(1).scaleb(-places)
    return str(Decimal(f"{value:.10f}").quantize(quantum, rounding=ROUND_HALF_UP))


def format_value(value, places=2):
    if value is None:
        return UNDEFINED
    text = round_half_up(value, places)
    # -0.00 reads as a sign error in reports
    return text[1:] if text.startswith("-") and Decimal(text) == 0 else text


def format_change(percent):
    """Signed one-decimal percentage, e.g. '-3.4%', '+1.0%', '0.0%'."""
    if percent is None:
        return UNDEFINED
    text = format_value(percent, 1)
    if Decimal(text) > 0:
        text = "+" + text
    return text + "%"


def render_table(headers, rows):
    """Aligned text: first column left-justified, the rest right-justified."""
    table = [list(map(str, headers))] + [list(map(str, row)) for row in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = []
    for row in table:
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def meta_line(meta):
    return "# " + " ".join(f"{key}={meta[key]}" for key in sorted(meta)) + "\n"


def tsv_text(frame, meta=None, float_format="%.6f"):
    buffer = io.StringIO()
    if meta:
        buffer.write(meta_line(meta))
    frame.to_csv(buffer, sep="\t", index=False, lineterminator="\n", float_format=float_format)
    return buffer.getvalue()


def read_tsv(path):
    return pd.read_csv(path, sep="\t", comment="#")


def write_text(path, text):
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(text)
    logger.info("Wrote %s", path)


def write_report(stem, frame, text, meta=None, float_format="%.6f"):
    """Write <stem>.tsv and the aligned <stem>.txt rendering of the same table."""
    write_text(f"{stem}.tsv", tsv_text(frame, meta, float_format))
    header = meta_line(meta) if meta else ""
    write_text(f"{stem}.txt", header + text)
