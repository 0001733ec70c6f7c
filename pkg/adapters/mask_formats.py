"""Fabrication file formats for binary masks: plain PBM and SVG polygons.

Arrays handed to this adapter are `blocked` grids (True = blocked) in the
raster convention of the hologram module (row index increasing along +y).
Both formats store the top row (largest y) first.
"""

import re
import xml.etree.ElementTree as ET
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from jinja2 import Template
from scipy import ndimage

from vortex_errors import DataFormatError

SVG_TEMPLATE_PATH = Path(__file__).resolve().parent.parent / "mask_template.svg"
PBM_LINE_WIDTH = 70

Vertex = Tuple[int, int]


def encode_pbm(blocked: np.ndarray) -> bytes:
    """Plain portable bitmap, 1 = blocked"""
    height, width = blocked.shape
    lines = ["P1", f"{width} {height}"]
    for row in blocked[::-1]:
        bits = "".join("1" if b else "0" for b in row)
        lines.extend(bits[i:i + PBM_LINE_WIDTH] for i in range(0, max(len(bits), 1), PBM_LINE_WIDTH))
    return ("\n".join(lines) + "\n").encode("ascii")


def decode_pbm(data: bytes, source: str = "<bytes>") -> np.ndarray:
    tokens: List[Tuple[str, int]] = []
    for lineno, line in enumerate(data.decode("ascii", errors="replace").splitlines(), start=1):
        line = line.split("#", 1)[0]
        tokens.extend((tok, lineno) for tok in line.split())
    if not tokens or tokens[0][0] != "P1":
        raise DataFormatError(source, tokens[0][1] if tokens else 1, "not a plain PBM file (expected 'P1')")
    if len(tokens) < 3:
        raise DataFormatError(source, tokens[-1][1], "missing width/height")
    try:
        width, height = int(tokens[1][0]), int(tokens[2][0])
    except ValueError:
        raise DataFormatError(source, tokens[1][1], "width and height must be integers")

    bits: List[int] = []
    for tok, lineno in tokens[3:]:
        if not set(tok) <= {"0", "1"}:
            raise DataFormatError(source, lineno, f"unexpected token {tok!r} in pixel data")
        bits.extend(int(c) for c in tok)
    if len(bits) != width * height:
        raise DataFormatError(source, tokens[-1][1], f"expected {width * height} pixels, found {len(bits)}")
    return np.array(bits, dtype=bool).reshape(height, width)[::-1]


def trace_islands(blocked: np.ndarray) -> List[List[List[Vertex]]]:
    """Closed outlines of each 4-connected blocked island.

    Vertices are pixel-corner indices (column, row). Outer loops run
    counter-clockwise and holes clockwise, so signed areas add up to the
    island's pixel count.
    """
    labels, count = ndimage.label(blocked)
    padded = np.pad(labels, 1)
    core = padded[1:-1, 1:-1]
    inside = core > 0

    edges: Dict[int, Dict[Vertex, List[Vertex]]] = defaultdict(lambda: defaultdict(list))
    sides = (
        (padded[:-2, 1:-1], (0, 0), (1, 0)),   # below
        (padded[1:-1, 2:], (1, 0), (1, 1)),    # right
        (padded[2:, 1:-1], (1, 1), (0, 1)),    # above
        (padded[1:-1, :-2], (0, 1), (0, 0)),   # left
    )
    for neighbour, (sc, sr), (ec, er) in sides:
        rows, cols = np.nonzero(inside & (neighbour != core))
        for r, c, lab in zip(rows.tolist(), cols.tolist(), core[rows, cols].tolist()):
            edges[lab][(c + sc, r + sr)].append((c + ec, r + er))

    islands = []
    for lab in range(1, count + 1):
        outgoing = edges[lab]
        loops = []
        while outgoing:
            start = next(iter(outgoing))
            loop = [start]
            vertex = start
            while True:
                targets = outgoing[vertex]
                nxt = targets.pop()
                if not targets:
                    del outgoing[vertex]
                if nxt == start:
                    break
                loop.append(nxt)
                vertex = nxt
            loops.append(_drop_collinear(loop))
        islands.append(loops)
    return islands


def _drop_collinear(loop: List[Vertex]) -> List[Vertex]:
    kept = []
    n = len(loop)
    for i, (x, y) in enumerate(loop):
        px, py = loop[i - 1]
        nx, ny = loop[(i + 1) % n]
        if (x - px) * (ny - y) - (y - py) * (nx - x) != 0:
            kept.append((x, y))
    return kept


def signed_area(loop: List[Tuple[float, float]]) -> float:
    pts = np.asarray(loop, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def encode_svg(blocked: np.ndarray, pixel_pitch: float, spec=None) -> bytes:
    """One evenodd path per blocked island, coordinates in nm, y up"""
    height, width = blocked.shape
    pitch_nm = pixel_pitch * 1e9
    x0, y0 = width / 2.0, height / 2.0

    paths = []
    for loops in trace_islands(blocked):
        parts = []
        for loop in loops:
            pts = " L ".join(f"{(c - x0) * pitch_nm:.4f},{-(r - y0) * pitch_nm:.4f}" for c, r in loop)
            parts.append(f"M {pts} Z")
        paths.append(" ".join(parts))

    metadata = {}
    if spec is not None:
        metadata = {
            "period_nm": f"{spec.period * 1e9:.6g}",
            "dislocations": spec.dislocations,
            "diameter_nm": f"{spec.diameter * 1e9:.6g}",
            "open_fraction": f"{spec.open_fraction:.6g}",
            "fringe_axis": spec.fringe_axis.value,
        }
    metadata["pixel_pitch_nm"] = f"{pitch_nm:.6g}"

    width_nm, height_nm = width * pitch_nm, height * pitch_nm
    template = Template(SVG_TEMPLATE_PATH.read_text(encoding="utf-8"))
    svg = template.render(
        width_nm=f"{width_nm:.4f}",
        height_nm=f"{height_nm:.4f}",
        view_box=f"{-width_nm / 2:.4f} {-height_nm / 2:.4f} {width_nm:.4f} {height_nm:.4f}",
        spec=metadata,
        islands=paths,
    )
    return (svg + "\n").encode("utf-8")


_PATH_LOOP = re.compile(r"M\s+([^MZ]+)Z")


def svg_blocked_area(data: bytes) -> float:
    """Total blocked area (nm²) enclosed by the polygons of an exported SVG"""
    root = ET.fromstring(data)
    total = 0.0
    for element in root.iter("{http://www.w3.org/2000/svg}path"):
        for body in _PATH_LOOP.findall(element.get("d", "")):
            loop = [tuple(float(v) for v in pt.split(",")) for pt in body.replace("L", " ").split()]
            total += signed_area(loop)
    return abs(total)


def svg_island_count(data: bytes) -> int:
    root = ET.fromstring(data)
    return sum(1 for _ in root.iter("{http://www.w3.org/2000/svg}path"))


def svg_metadata(data: bytes) -> Optional[Dict[str, str]]:
    root = ET.fromstring(data)
    node = root.find("{http://www.w3.org/2000/svg}metadata/{http://www.w3.org/2000/svg}hologram")
    return dict(node.attrib) if node is not None else None
