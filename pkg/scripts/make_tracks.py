#!/usr/bin/env python3
"""Regenerate the fixture tracks in tracks/ (x,y,w CSV rows)."""

import math
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parent.parent / "tracks"


def write(name, rows, header="x,y,w"):
    OUT.mkdir(exist_ok=True)
    path = OUT / name
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for x, y, w in rows:
            fh.write(f"{x:.6f},{y:.6f},{w:.3f}\n")
    print(f"wrote {path} ({len(rows)} samples)")


def straight(length=400.0, width=4.0, step=5.0):
    n = int(length / step) + 1
    return [(i * step, 0.0, width) for i in range(n)]


def oval(r=22.0, straight_len=70.0, width=4.5, step=2.0):
    rows = []
    # bottom straight, right arc, top straight, left arc (counterclockwise)
    n1 = int(straight_len / step)
    for i in range(n1):
        rows.append((i * step, 0.0, width))
    n2 = int(math.pi * r / step)
    for i in range(n2):
        a = -math.pi / 2 + math.pi * i / n2
        rows.append((straight_len + r * math.cos(a), r + r * math.sin(a), width))
    for i in range(n1):
        rows.append((straight_len - i * step, 2 * r, width))
    for i in range(n2):
        a = math.pi / 2 + math.pi * i / n2
        rows.append((r * math.cos(a), r + r * math.sin(a), width))
    return rows


def corner90(leg=80.0, r=25.0, width=4.0, step=2.0):
    rows = []
    n1 = int((leg - r) / step)
    for i in range(n1 + 1):
        rows.append((i * step, 0.0, width))
    n2 = int(math.pi / 2 * r / step)
    cx, cy = leg - r, r
    for i in range(1, n2 + 1):
        a = -math.pi / 2 + (math.pi / 2) * i / n2
        rows.append((cx + r * math.cos(a), cy + r * math.sin(a), width))
    for i in range(1, n1 + 1):
        rows.append((leg, r + i * step, width))
    return rows


def square(side=50.0, width=5.0):
    return [(0.0, 0.0, width), (side, 0.0, width), (side, side, width),
            (0.0, side, width)]


if __name__ == "__main__":
    write("straight.csv", straight())
    write("oval.csv", oval())
    write("corner90.csv", corner90())
    write("square.csv", square())
