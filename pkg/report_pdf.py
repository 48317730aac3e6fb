# report_pdf.py
from datetime import datetime, timezone
from io import BytesIO
from pathlib import Path
from typing import Optional

import pandas as pd
from reportlab.lib import colors
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import getSampleStyleSheet
from reportlab.lib.units import mm
from reportlab.pdfgen import canvas
from reportlab.platypus import Paragraph, Table, TableStyle

from evaluation import EvalReport

HEADER_BG = colors.HexColor("#233b64")
GRID = colors.HexColor("#d8e2f0")
# long tables are cut into chunks that fit on one page
ROWS_PER_TABLE = 30


def _fmt(v, digits=4):
    try:
        f = float(v)
    except (TypeError, ValueError):
        return str(v)
    if f != f:
        return "—"
    return f"{f:.{digits}f}"


def _draw_paragraph(c, text, style, x, y, max_width):
    p = Paragraph(text, style)
    _, h = p.wrapOn(c, max_width, 1000)
    p.drawOn(c, x, y - h)
    return y - h


def _table(rows, col_widths):
    table = Table(rows, colWidths=col_widths, repeatRows=1)
    table.setStyle(TableStyle([
        ("FONT", (0, 0), (-1, 0), "Helvetica-Bold", 9),
        ("TEXTCOLOR", (0, 0), (-1, 0), colors.white),
        ("BACKGROUND", (0, 0), (-1, 0), HEADER_BG),
        ("ALIGN", (1, 1), (-1, -1), "RIGHT"),
        ("FONTSIZE", (0, 1), (-1, -1), 8),
        ("GRID", (0, 0), (-1, -1), 0.25, GRID),
        ("ROWBACKGROUNDS", (0, 1), (-1, -1), [colors.whitesmoke, colors.HexColor("#f7f9fc")]),
        ("VALIGN", (0, 0), (-1, -1), "MIDDLE"),
        ("TOPPADDING", (0, 0), (-1, -1), 4),
        ("BOTTOMPADDING", (0, 0), (-1, -1), 4),
    ]))
    return table


def _frame_rows(frame: pd.DataFrame):
    rows = [list(frame.columns)]
    for record in frame.itertuples(index=False):
        rows.append([_fmt(v) if isinstance(v, float) else str(v) for v in record])
    return rows


def build_eval_pdf(report: Optional[EvalReport], *, title="View synthesis evaluation",
                   checkpoint: str = "", dataset: str = "",
                   extra: Optional[pd.DataFrame] = None, extra_title: str = "") -> bytes:
    """
    Evaluation report (A4 portrait)

    Sections:
      - aggregate L1 / SSIM / copy-source L1 / beats-copy share
      - per-category breakdown (chair, car)
      - per-target-pose breakdown
      - optional extra table (reference-pose sweep, ablation)

    With `report=None` only the extra table is drawn.
    """
    buf = BytesIO()
    c = canvas.Canvas(buf, pagesize=A4)
    page_w, page_h = A4
    x_margin = 16 * mm
    y_margin = 16 * mm
    max_width = page_w - 2 * x_margin
    y = page_h - y_margin

    styles = getSampleStyleSheet()
    title_style = styles["Heading2"]
    body = styles["Normal"]
    heading = styles["Heading4"]

    y = _draw_paragraph(c, title, title_style, x_margin, y, max_width)
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M UTC")
    y = _draw_paragraph(c, f"Generated: {stamp}", body, x_margin, y, max_width)
    if checkpoint:
        y = _draw_paragraph(c, f"Checkpoint: {checkpoint}", body, x_margin, y, max_width)
    if dataset:
        y = _draw_paragraph(c, f"Dataset: {dataset}", body, x_margin, y, max_width)
    y -= 4 * mm

    def place(table):
        nonlocal y
        _, th = table.wrapOn(c, max_width, y)
        if y - th < y_margin:
            c.showPage()
            y = page_h - y_margin
        table.drawOn(c, x_margin, y - th)
        y = y - th - 6 * mm

    def place_frame(frame):
        widths = [max_width / len(frame.columns)] * len(frame.columns)
        header, *body_rows = _frame_rows(frame)
        for start in range(0, max(len(body_rows), 1), ROWS_PER_TABLE):
            place(_table([header] + body_rows[start:start + ROWS_PER_TABLE], widths))

    if report is not None:
        summary = report.summary()
        place(_table(
            [["Pairs", "L1", "SSIM", "Copy-source L1", "Beats copy"],
             [str(summary["rows"]), _fmt(summary["L1"]), _fmt(summary["SSIM"]),
              _fmt(summary["copy_L1"]), _fmt(summary["beats_copy"], 3)]],
            [24 * mm, 30 * mm, 30 * mm, 40 * mm, 30 * mm],
        ))
        y = _draw_paragraph(c, "Per category", heading, x_margin, y, max_width)
        place_frame(report.by_category())
        y = _draw_paragraph(c, "Per target pose", heading, x_margin, y, max_width)
        place_frame(report.by_target_pose())

    if extra is not None and not extra.empty:
        y = _draw_paragraph(c, extra_title or "Experiment", heading, x_margin, y, max_width)
        place_frame(extra)

    c.showPage()
    c.save()
    return buf.getvalue()


def write_eval_pdf(report: Optional[EvalReport], path, **kwargs) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(build_eval_pdf(report, **kwargs))
    return path
