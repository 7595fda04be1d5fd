"""curves.json reading/writing and loss telemetry CSV."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .curvefit import CubicBezier3, VectorGraphic3D

FORMAT_VERSION = 1


def _r9(x: float) -> float:
    """Round to 9 significant digits."""
    return float(f"{float(x):.9g}")


def graphic_to_dict(graphic: VectorGraphic3D) -> dict:
    return {
        "version": FORMAT_VERSION,
        "transform": {
            "center": [_r9(c) for c in graphic.center],
            "scale": _r9(graphic.scale),
        },
        "curves": [
            {
                "p": [[_r9(x) for x in row] for row in c.control],
                "frozen": bool(c.frozen),
                "provenance": c.provenance,
            }
            for c in graphic.curves
        ],
    }


def dumps_graphic(graphic: VectorGraphic3D) -> str:
    return json.dumps(graphic_to_dict(graphic), indent=1) + "\n"


def loads_graphic(text: str) -> VectorGraphic3D:
    doc = json.loads(text)
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported curves.json version: {doc.get('version')!r}")
    tr = doc["transform"]
    curves = [
        CubicBezier3(np.array(c["p"], dtype=float), frozen=bool(c.get("frozen", False)),
                     provenance=c.get("provenance", "stage1"))
        for c in doc["curves"]
    ]
    return VectorGraphic3D(curves, center=np.array(tr["center"], dtype=float), scale=float(tr["scale"]))


def save_graphic(graphic: VectorGraphic3D, path) -> None:
    Path(path).write_text(dumps_graphic(graphic), encoding="utf-8")


def load_graphic(path) -> VectorGraphic3D:
    return loads_graphic(Path(path).read_text(encoding="utf-8"))


def roundtrip(graphic: VectorGraphic3D) -> VectorGraphic3D:
    """The graphic exactly as it will read back from disk."""
    return loads_graphic(dumps_graphic(graphic))


def to_source_units(graphic: VectorGraphic3D) -> np.ndarray:
    """Control points mapped back through the normalization transform, shape (n, 4, 3)."""
    return graphic.control_array / graphic.scale + graphic.center


def losses_csv(losses) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, v in enumerate(losses):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()
