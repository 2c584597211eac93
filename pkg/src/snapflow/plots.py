"""Minimal standalone SVG line and bar charts."""

from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
W, H = 560, 360
L, R, T, B = 70, 150, 40, 50


def _doc(title: str, body: list, comment: str = "") -> str:
    head = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}">',
    ]
    if comment:
        head.append(f"<!-- {escape(comment)} -->")
    head += [
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{escape(title)}</text>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / n
    return [lo + i * step for i in range(n + 1)]


def _axes(xlabel, ylabel, xticks, yticks, sx, sy) -> list:
    out = [
        f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
        f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>',
        f'<text x="{(L + W - R) / 2:.1f}" y="{H - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>',
        f'<text x="16" y="{(T + H - B) / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12" transform="rotate(-90 16 {(T + H - B) / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for label, v in xticks:
        x = sx(v)
        out.append(f'<line x1="{x:.1f}" y1="{H - B}" x2="{x:.1f}" y2="{H - B + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{H - B + 16}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{escape(label)}</text>')
    for v in yticks:
        y = sy(v)
        out.append(f'<line x1="{L - 4}" y1="{y:.1f}" x2="{L}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{L - 6}" y="{y + 3:.1f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{v:.3g}</text>')
    return out


def _legend(names) -> list:
    out = []
    for i, name in enumerate(names):
        y = T + 10 + 18 * i
        c = PALETTE[i % len(PALETTE)]
        out.append(f'<rect x="{W - R + 12}" y="{y - 8}" width="10" height="10" fill="{c}"/>')
        out.append(f'<text x="{W - R + 28}" y="{y + 1}" font-family="sans-serif" '
                   f'font-size="11">{escape(name)}</text>')
    return out


def line_chart(series: dict, *, title: str, xlabel: str, ylabel: str, comment: str = "") -> str:
    """``series`` maps a name to a list of ``(x, y)`` points."""
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = 0.0, max(ys) * 1.1 if ys and max(ys) > 0 else 1.0
    x1 = x1 if x1 > x0 else x0 + 1

    def sx(v):
        return L + (v - x0) / (x1 - x0) * (W - L - R)

    def sy(v):
        return H - B - (v - y0) / (y1 - y0) * (H - T - B)

    body = _axes(xlabel, ylabel, [(f"{v:g}", v) for v in sorted(set(xs))],
                 _nice_ticks(y0, y1), sx, sy)
    for i, (name, pts) in enumerate(series.items()):
        c = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        body.append(f'<polyline points="{path}" fill="none" stroke="{c}" stroke-width="2"/>')
        for x, y in pts:
            body.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3.5" fill="{c}"/>')
    body += _legend(series)
    return _doc(title, body, comment)


def bar_chart(groups: dict, *, title: str, ylabel: str, comment: str = "") -> str:
    """``groups`` maps a bar label to ``{segment_name: value}`` stacked bottom-up."""
    segments = []
    for segs in groups.values():
        for name in segs:
            if name not in segments:
                segments.append(name)
    totals = [sum(s.values()) for s in groups.values()]
    y1 = max(totals) * 1.1 if totals and max(totals) > 0 else 1.0
    n = max(len(groups), 1)
    slot = (W - L - R) / n
    bw = slot * 0.6

    def sy(v):
        return H - B - v / y1 * (H - T - B)

    def sx(i):
        return L + slot * (i + 0.5)

    body = _axes("", ylabel, [(lab, i) for i, lab in enumerate(groups)],
                 _nice_ticks(0.0, y1), sx, sy)
    for i, segs in enumerate(groups.values()):
        base = 0.0
        for name, v in segs.items():
            c = PALETTE[segments.index(name) % len(PALETTE)]
            top = sy(base + v)
            body.append(f'<rect x="{sx(i) - bw / 2:.1f}" y="{top:.1f}" width="{bw:.1f}" '
                        f'height="{sy(base) - top:.1f}" fill="{c}"/>')
            base += v
        body.append(f'<text x="{sx(i):.1f}" y="{sy(base) - 4:.1f}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="10">{base:g}</text>')
    body += _legend(segments)
    return _doc(title, body, comment)
