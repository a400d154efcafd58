"""Tiny SVG emitter for line charts, heatmaps and x/y traces.

Numbers are written with fixed 2-decimal formatting so output is text-diffable
and byte-stable for identical inputs.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _f(v: float) -> str:
    return f"{v:.2f}"


class Canvas:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.items: list[str] = []

    def line(self, x0, y0, x1, y1, stroke="#000", width=1.0, dash: str | None = None):
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(
            f'<line x1="{_f(x0)}" y1="{_f(y0)}" x2="{_f(x1)}" y2="{_f(y1)}" stroke="{stroke}" stroke-width="{_f(width)}"{extra}/>'
        )

    def polyline(self, pts, stroke="#000", width=1.5, dash: str | None = None):
        if not pts:
            return
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        coords = " ".join(f"{_f(x)},{_f(y)}" for x, y in pts)
        self.items.append(f'<polyline points="{coords}" fill="none" stroke="{stroke}" stroke-width="{_f(width)}"{extra}/>')

    def circle(self, x, y, r, fill="#000"):
        self.items.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{_f(r)}" fill="{fill}"/>')

    def rect(self, x, y, w, h, fill="#fff", stroke="none"):
        self.items.append(
            f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" fill="{fill}" stroke="{stroke}"/>'
        )

    def text(self, x, y, s, size=11, anchor="start", fill="#000", rotate: float | None = None):
        tr = f' transform="rotate({_f(rotate)} {_f(x)} {_f(y)})"' if rotate is not None else ""
        self.items.append(
            f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" font-family="sans-serif" '
            f'text-anchor="{anchor}" fill="{fill}"{tr}>{escape(str(s))}</text>'
        )

    def render(self) -> str:
        head = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}">\n'
        )
        body = "\n".join(self.items)
        return head + f'<rect width="{self.width}" height="{self.height}" fill="#fff"/>\n' + body + "\n</svg>\n"


class Axes:
    """Maps data coordinates into a rectangle of a canvas."""

    def __init__(self, canvas: Canvas, x, y, w, h, xlim, ylim, equal: bool = False):
        self.c, self.x, self.y, self.w, self.h = canvas, x, y, w, h
        (x0, x1), (y0, y1) = xlim, ylim
        if x1 <= x0:
            x1 = x0 + 1.0
        if y1 <= y0:
            y1 = y0 + 1.0
        if equal:
            scale = min(w / (x1 - x0), h / (y1 - y0))
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            x0, x1 = cx - w / scale / 2, cx + w / scale / 2
            y0, y1 = cy - h / scale / 2, cy + h / scale / 2
        self.xlim, self.ylim = (x0, x1), (y0, y1)

    def px(self, vx: float) -> float:
        x0, x1 = self.xlim
        return self.x + (vx - x0) / (x1 - x0) * self.w

    def py(self, vy: float) -> float:
        y0, y1 = self.ylim
        return self.y + self.h - (vy - y0) / (y1 - y0) * self.h

    def frame(self, title="", xlabel="", ylabel="", xticks=(), yticks=()):
        c = self.c
        c.rect(self.x, self.y, self.w, self.h, fill="none", stroke="#444")
        for t in xticks:
            c.line(self.px(t), self.y + self.h, self.px(t), self.y + self.h + 4, stroke="#444")
            c.text(self.px(t), self.y + self.h + 16, f"{t:g}", size=10, anchor="middle")
        for t in yticks:
            c.line(self.x - 4, self.py(t), self.x, self.py(t), stroke="#444")
            c.line(self.x, self.py(t), self.x + self.w, self.py(t), stroke="#ddd", width=0.5)
            c.text(self.x - 6, self.py(t) + 3, f"{t:g}", size=10, anchor="end")
        if title:
            c.text(self.x + self.w / 2, self.y - 8, title, size=13, anchor="middle")
        if xlabel:
            c.text(self.x + self.w / 2, self.y + self.h + 32, xlabel, anchor="middle")
        if ylabel:
            c.text(self.x - 36, self.y + self.h / 2, ylabel, anchor="middle", rotate=-90)

    def series(self, xs, ys, color, label=None, markers=True, dash=None, width=1.5):
        pts = [(self.px(a), self.py(b)) for a, b in zip(xs, ys)]
        self.c.polyline(pts, stroke=color, width=width, dash=dash)
        if markers:
            for x, y in pts:
                self.c.circle(x, y, 3, fill=color)

    def legend(self, entries, x=None, y=None):
        x = self.x + self.w - 150 if x is None else x
        y = self.y + 10 if y is None else y
        for i, (label, color) in enumerate(entries):
            yy = y + 16 * i
            self.c.line(x, yy, x + 18, yy, stroke=color, width=2.5)
            self.c.text(x + 24, yy + 4, label, size=10)


def heatmap(canvas: Canvas, x, y, cell, matrix, row_labels, col_labels, title=""):
    """Counts as shaded cells (row-normalised shading, raw counts printed)."""
    n_rows, n_cols = len(matrix), len(matrix[0]) if matrix else 0
    if title:
        canvas.text(x + cell * n_cols / 2, y - 26, title, size=13, anchor="middle")
    for j, lab in enumerate(col_labels):
        canvas.text(x + cell * (j + 0.5), y - 6, lab, size=9, anchor="middle")
    for i, row in enumerate(matrix):
        canvas.text(x - 6, y + cell * (i + 0.6), row_labels[i], size=9, anchor="end")
        total = sum(row) or 1
        for j, v in enumerate(row):
            share = v / total
            level = int(round(255 - 200 * share))
            canvas.rect(x + cell * j, y + cell * i, cell, cell, fill=f"rgb({level},{level},255)", stroke="#888")
            canvas.text(x + cell * (j + 0.5), y + cell * (i + 0.6), str(v), size=10, anchor="middle")
