"""PLY assets, descriptor files and metrics CSV."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .condition import ConditionInput
from .errors import InvalidInputError
from .toyprior import ColoredVoxelAsset

CSV_COLUMNS = ("run_id", "metric", "value", "views", "frames", "extractor", "seed")


def ply_bytes(asset: ColoredVoxelAsset, alpha: float | None = None) -> bytes:
    """ASCII PLY with float xyz and uchar red/green/blue/alpha per voxel."""
    q = asset.quantized()
    rgb = np.round(q.rgb * 255).astype(np.int64)
    op = np.round(q.opacity * 255).astype(np.int64)
    lines = ["ply", "format ascii 1.0", f"comment resolution {asset.resolution}"]
    if alpha is not None:
        lines.append(f"comment alpha {alpha:.6f}")
    lines += [
        f"element vertex {asset.count}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property uchar alpha",
        "end_header",
    ]
    for p, c, a in zip(asset.positions.tolist(), rgb.tolist(), op.tolist()):
        lines.append(f"{p[0]} {p[1]} {p[2]} {c[0]} {c[1]} {c[2]} {a}")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_ply(path, asset: ColoredVoxelAsset, alpha: float | None = None) -> None:
    Path(path).write_bytes(ply_bytes(asset, alpha))


def read_ply(path) -> ColoredVoxelAsset:
    text = Path(path).read_text(encoding="ascii")
    header, sep, body = text.partition("end_header\n")
    if not sep or not header.startswith("ply"):
        raise InvalidInputError(f"{path}: not an ASCII PLY file")
    resolution = None
    count = None
    props = []
    for line in header.splitlines():
        parts = line.split()
        if parts[:2] == ["comment", "resolution"]:
            resolution = int(parts[2])
        elif parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            props.append(parts[-1])
    if count is None or props != ["x", "y", "z", "red", "green", "blue", "alpha"]:
        raise InvalidInputError(f"{path}: unexpected PLY layout")
    data = np.loadtxt(io.StringIO(body), dtype=np.float64, ndmin=2) if count else np.zeros((0, 7))
    if data.shape != (count, 7):
        raise InvalidInputError(f"{path}: expected {count} vertices, found {data.shape[0]}")
    pos = np.rint(data[:, :3]).astype(np.int64)
    if resolution is None:
        resolution = int(pos.max()) + 1 if count else 1
    rgb = (data[:, 3:6] / 255.0).astype(np.float32)
    op = (data[:, 6] / 255.0).astype(np.float32)
    order = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0]))
    return ColoredVoxelAsset(pos[order], rgb[order], op[order], resolution)


def descriptor_bytes(desc: ConditionInput) -> bytes:
    return (json.dumps(desc.to_dict(), indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_descriptor(path, desc: ConditionInput) -> None:
    Path(path).write_bytes(descriptor_bytes(desc))


def read_descriptor(path) -> ConditionInput:
    return ConditionInput.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def format_value(v: float) -> str:
    return repr(float(v))


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        out = dict(row)
        out["value"] = format_value(row["value"])
        writer.writerow(out)
    return buf.getvalue()


def write_metrics_csv(path, rows) -> None:
    Path(path).write_text(metrics_csv(rows), encoding="utf-8")


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["value"] = float(r["value"])
    return rows
