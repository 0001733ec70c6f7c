"""Data file formats: VWI1 intensity maps, event lists and line cuts.

VWI1: one text header line "VWI1 <width> <height> <angular_pitch_urad>
<normalization>" followed by row-major little-endian float64 values.
Event lists and line cuts are CSV text written through pandas with fixed
float formatting so identical inputs give identical bytes.
"""

import io
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from vortex_errors import DataFormatError

PathLike = Union[str, Path]

VWI_MAGIC = "VWI1"
EVENT_COLUMNS = ["theta_x_urad", "theta_y_urad", "species"]
CUT_COLUMNS = ["position_urad", "value"]
URAD = 1e-6


def encode_vwi(values: np.ndarray, angular_pitch: float, normalization: str) -> bytes:
    height, width = values.shape
    header = f"{VWI_MAGIC} {width} {height} {angular_pitch / URAD!r} {normalization}\n"
    return header.encode("ascii") + np.ascontiguousarray(values, dtype="<f8").tobytes()


def decode_vwi(data: bytes, source: str = "<bytes>") -> Tuple[np.ndarray, float, str]:
    """Returns (values, angular_pitch in rad, normalization)"""
    newline = data.find(b"\n")
    if newline < 0:
        raise DataFormatError(source, 1, "missing VWI1 header line")
    fields = data[:newline].decode("ascii", errors="replace").split()
    if len(fields) != 5 or fields[0] != VWI_MAGIC:
        raise DataFormatError(source, 1, f"expected '{VWI_MAGIC} <width> <height> <pitch_urad> <normalization>'")
    try:
        width, height = int(fields[1]), int(fields[2])
        pitch = float(fields[3]) * URAD
    except ValueError:
        raise DataFormatError(source, 1, "width, height and pitch must be numeric")
    payload = data[newline + 1:]
    if len(payload) != 8 * width * height:
        raise DataFormatError(source, 2, f"expected {8 * width * height} data bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f8").reshape(height, width).astype(np.float64)
    return values, pitch, fields[4]


def write_vwi(path: PathLike, values: np.ndarray, angular_pitch: float, normalization: str) -> None:
    Path(path).write_bytes(encode_vwi(values, angular_pitch, normalization))


def read_vwi(path: PathLike) -> Tuple[np.ndarray, float, str]:
    return decode_vwi(Path(path).read_bytes(), source=str(path))


def is_vwi(path: PathLike) -> bool:
    with open(path, "rb") as f:
        return f.read(len(VWI_MAGIC)) == VWI_MAGIC.encode("ascii")


def write_metadata(path: PathLike, entries: Dict[str, object]) -> Path:
    """Provenance sidecar `<path>.meta` of key=value lines"""
    meta = Path(str(path) + ".meta")
    meta.write_text("".join(f"{k}={v}\n" for k, v in entries.items()), encoding="utf-8")
    return meta


def _split_comments(text: str) -> Tuple[Dict[str, str], int]:
    """Leading '# key=value' lines and the number of lines they occupy"""
    comments: Dict[str, str] = {}
    count = 0
    for line in text.splitlines():
        if not line.startswith("#"):
            break
        count += 1
        key, _, value = line[1:].strip().partition("=")
        comments[key.strip()] = value.strip()
    return comments, count


def _frame(text: str, source: str, columns: List[str], skip: int) -> pd.DataFrame:
    try:
        frame = pd.read_csv(io.StringIO(text), skiprows=skip, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise DataFormatError(source, skip + 1, f"malformed CSV: {e}")
    except pd.errors.EmptyDataError:
        raise DataFormatError(source, skip + 1, f"missing header {','.join(columns)}")
    if list(frame.columns) != columns:
        raise DataFormatError(source, skip + 1, f"expected header {','.join(columns)}, got {','.join(frame.columns)}")
    return frame


def _numeric(frame: pd.DataFrame, column: str, source: str, first_line: int) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = np.flatnonzero(values.isna().to_numpy() | ~np.isfinite(values.to_numpy(dtype=np.float64)))
    if len(bad):
        row = int(bad[0])
        raise DataFormatError(source, first_line + row, f"{column}: not a finite number: {frame[column].iloc[row]!r}")
    return values.to_numpy(dtype=np.float64)


def encode_events(theta_x: np.ndarray, theta_y: np.ndarray, species: np.ndarray, seed: int, rng: str,
                  config_hash: Optional[str] = None) -> str:
    header = f"# seed={seed}\n# rng={rng}\n"
    if config_hash:
        header += f"# config={config_hash}\n"
    frame = pd.DataFrame({
        "theta_x_urad": np.asarray(theta_x) / URAD,
        "theta_y_urad": np.asarray(theta_y) / URAD,
        "species": species,
    })
    return header + frame.to_csv(index=False, float_format="%.4f", lineterminator="\n")


def decode_events(text: str, source: str = "<text>") -> Tuple[pd.DataFrame, int, str]:
    """Returns (frame with theta_x/theta_y in rad and species, seed, rng id)"""
    comments, skip = _split_comments(text)
    if "seed" not in comments:
        raise DataFormatError(source, 1, "missing '# seed=<n>' line")
    try:
        seed = int(comments["seed"])
    except ValueError:
        raise DataFormatError(source, 1, f"seed is not an integer: {comments['seed']!r}")
    frame = _frame(text, source, EVENT_COLUMNS, skip)
    first = skip + 2
    events = pd.DataFrame({
        "theta_x": _numeric(frame, "theta_x_urad", source, first) * URAD,
        "theta_y": _numeric(frame, "theta_y_urad", source, first) * URAD,
        "species": frame["species"].astype(object).to_numpy(),
    })
    return events, seed, comments.get("rng", "")


def encode_line_cut(positions: np.ndarray, values: np.ndarray, extra: Optional[Dict[str, float]] = None) -> str:
    header = "".join(f"# {k}={v!r}\n" for k, v in (extra or {}).items())
    frame = pd.DataFrame({"position_urad": np.asarray(positions) / URAD, "value": values})
    return header + frame.to_csv(index=False, float_format="%.10g", lineterminator="\n")


def decode_line_cut(text: str, source: str = "<text>") -> Tuple[np.ndarray, np.ndarray, Dict[str, str]]:
    """Returns (positions in rad, values, comment entries)"""
    comments, skip = _split_comments(text)
    frame = _frame(text, source, CUT_COLUMNS, skip)
    first = skip + 2
    positions = _numeric(frame, "position_urad", source, first) * URAD
    values = _numeric(frame, "value", source, first)
    return positions, values, comments
