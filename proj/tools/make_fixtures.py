#!/usr/bin/env python3
"""Regenerates the fixture tracks in data/tracks.

The stored "length" is the closed-polyline length of the centerline, which is
what the loader recomputes.
"""
import json
import math
import pathlib

OUT = pathlib.Path(__file__).resolve().parent.parent / "data" / "tracks"


def polyline_length(pts):
    return sum(math.dist(pts[i], pts[(i + 1) % len(pts)]) for i in range(len(pts)))


def oval(straight=30.0, radius=6.0, half_width=1.2, spacing=0.5):
    pts = []
    n_straight = round(straight / spacing)
    n_arc = round(math.pi * radius / spacing)
    # Counter-clockwise, starting at the beginning of the lower straight.
    for i in range(n_straight):
        pts.append((-straight / 2 + i * straight / n_straight, -radius))
    for i in range(n_arc):
        a = -math.pi / 2 + i * math.pi / n_arc
        pts.append((straight / 2 + radius * math.cos(a), radius * math.sin(a)))
    for i in range(n_straight):
        pts.append((straight / 2 - i * straight / n_straight, radius))
    for i in range(n_arc):
        a = math.pi / 2 + i * math.pi / n_arc
        pts.append((-straight / 2 + radius * math.cos(a), radius * math.sin(a)))
    return pts, [half_width] * len(pts)


def scurve(radius=16.0, amp=0.18, lobes=3, half_width=1.1, spacing=0.5):
    def r(t):
        return radius * (1.0 + amp * math.sin(lobes * t))

    dense = 20000
    ring = [(r(2 * math.pi * k / dense) * math.cos(2 * math.pi * k / dense),
             r(2 * math.pi * k / dense) * math.sin(2 * math.pi * k / dense)) for k in range(dense)]
    total = polyline_length(ring)
    n = round(total / spacing)
    step = total / n
    pts = [ring[0]]
    acc = 0.0
    target = step
    for k in range(1, dense + 1):
        a, b = ring[k - 1], ring[k % dense]
        seg = math.dist(a, b)
        while acc + seg >= target and len(pts) < n:
            u = (target - acc) / seg
            pts.append((a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])))
            target += step
        acc += seg
    return pts, [half_width] * len(pts)


def write(name, pts, widths):
    doc = {
        "name": name,
        "length": polyline_length(pts),
        "centerline": [[round(x, 9), round(y, 9)] for x, y in pts],
        "half_width": widths,
    }
    # Recompute from the rounded coordinates so the file is self-consistent.
    doc["length"] = polyline_length([tuple(p) for p in doc["centerline"]])
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")
    print(f"{name}: {len(pts)} points, length {doc['length']:.9f} m")


if __name__ == "__main__":
    write("oval", *oval())
    write("scurve", *scurve())
