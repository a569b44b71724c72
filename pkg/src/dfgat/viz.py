"""Static side-by-side match figures as standalone SVG."""

import numpy as np

PANEL_W = 400.0
PANEL_H = 380.0
MARGIN = 20.0
CANVAS_W = 2 * PANEL_W + 3 * MARGIN
CANVAS_H = PANEL_H + 2 * MARGIN

CORRECT_COLOR = "#2a9d3a"
WRONG_COLOR = "#d33030"
POINT_COLOR = "#556070"


def _panel_projection(points, x0):
    """Map xy coordinates into a fixed panel, preserving aspect ratio."""
    xy = np.asarray(points, dtype=np.float64)[:, :2]
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    scale = min((PANEL_W - 20.0) / span[0], (PANEL_H - 20.0) / span[1])
    size = span * scale
    offset = np.array([x0, MARGIN]) + (np.array([PANEL_W, PANEL_H]) - size) / 2.0

    def project(p):
        p = np.asarray(p, dtype=np.float64)[:2]
        rel = (p - lo) * scale
        # svg y grows downward
        return offset[0] + rel[0], offset[1] + (size[1] - rel[1])

    return project


def render_match_svg(query_points, source_points, segments, title=""):
    """Two orthographic panels plus one line per match.

    ``segments`` is a list of (query_xyz, source_xyz, correct) with correct
    drawn green and the rest red.  Output is deterministic for fixed input.
    """
    left = _panel_projection(query_points, MARGIN)
    right = _panel_projection(source_points, 2 * MARGIN + PANEL_W)
    out = ['<?xml version="1.0" encoding="UTF-8"?>']
    out.append('<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
               'viewBox="0 0 %d %d">' % (CANVAS_W, CANVAS_H, CANVAS_W, CANVAS_H))
    out.append('<rect width="%d" height="%d" fill="white"/>' % (CANVAS_W, CANVAS_H))
    for x0 in (MARGIN, 2 * MARGIN + PANEL_W):
        out.append('<rect x="%.1f" y="%.1f" width="%.1f" height="%.1f" '
                   'fill="none" stroke="#c0c6cc"/>' % (x0, MARGIN, PANEL_W, PANEL_H))
    if title:
        out.append('<text x="%.1f" y="%.1f" font-family="sans-serif" '
                   'font-size="12" fill="#333">%s</text>'
                   % (MARGIN, MARGIN - 6.0, title))
    for q, s, correct in segments:
        x1, y1 = left(q)
        x2, y2 = right(s)
        color = CORRECT_COLOR if correct else WRONG_COLOR
        out.append('<line x1="%.2f" y1="%.2f" x2="%.2f" y2="%.2f" '
                   'stroke="%s" stroke-width="0.8" stroke-opacity="0.8"/>'
                   % (x1, y1, x2, y2, color))
    for project, points in ((left, query_points), (right, source_points)):
        for p in np.asarray(points, dtype=np.float64):
            x, y = project(p)
            out.append('<circle cx="%.2f" cy="%.2f" r="2" fill="%s"/>'
                       % (x, y, POINT_COLOR))
    out.append("</svg>")
    return "\n".join(out) + "\n"
