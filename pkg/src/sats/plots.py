"""Dependency-free SVG bar charts for evaluation reports."""

from __future__ import annotations

from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 360
MARGIN = 50


def bar_chart(labels, values, title, ylabel, ymax=None):
    """Return a self-contained SVG document with one bar per label."""
    values = [0.0 if v is None else float(v) for v in values]
    top = ymax if ymax is not None else max(values + [1e-9]) * 1.1
    n = max(len(values), 1)
    plot_w = WIDTH - 2 * MARGIN
    plot_h = HEIGHT - 2 * MARGIN
    bar_w = plot_w / n
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<title>{escape(title)}</title>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="14" y="{HEIGHT / 2}" font-size="11" transform="rotate(-90 14 {HEIGHT / 2})" '
        f'text-anchor="middle">{escape(ylabel)}</text>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<text x="{MARGIN - 4}" y="{MARGIN + 4}" font-size="10" text-anchor="end">{top:.2f}</text>',
        f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" font-size="10" text-anchor="end">0</text>',
    ]
    for i, (label, v) in enumerate(zip(labels, values)):
        h = 0.0 if top <= 0 else plot_h * min(v, top) / top
        x = MARGIN + i * bar_w
        y = HEIGHT - MARGIN - h
        parts.append(
            f'<rect class="bar" data-label="{escape(str(label))}" data-value="{v:.6g}" '
            f'x="{x + 0.1 * bar_w:.2f}" y="{y:.2f}" width="{0.8 * bar_w:.2f}" height="{h:.2f}" fill="#4a7ab5"/>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.2f}" y="{HEIGHT - MARGIN + 12}" font-size="8" '
            f'text-anchor="middle">{escape(str(label))}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report_figures(rows):
    """(per-case DSC chart, per-case asymmetric-region size chart)."""
    labels = [r["case_id"] for r in rows]
    dsc_svg = bar_chart(labels, [r["dsc"] for r in rows], "Dice score per test case", "DSC (%)", ymax=100.0)
    asym_svg = bar_chart(labels, [r["asym_ml"] for r in rows], "Asymmetric lesion region size per case", "asymmetric volume (ml)")
    return dsc_svg, asym_svg
