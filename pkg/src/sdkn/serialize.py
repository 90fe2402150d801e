"""Plain-text model format.

::

    sdkn-model 1
    dims 1 8 8 1
    centers 16 1
    <16 rows of 1 number>
    linear 8 1
    <8 rows of 1 number>
    activation 16 8
    kernels gaussian:1.0 gaussian:1.0 ...
    <16 rows of 8 numbers>
    ...
    end

Numbers are written with 17 significant digits, which round-trips every
float64 exactly.
"""

from __future__ import annotations

import os

import numpy as np

from .kernels import Kernel1D
from .network import ActivationLayer, LinearLayer, SdknModel

FORMAT_NAME = "sdkn-model"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _rows(a: np.ndarray) -> list:
    return [" ".join(f"{v:.17g}" for v in row) for row in np.atleast_2d(a)]


def dumps(model: SdknModel) -> str:
    lines = [f"{FORMAT_NAME} {FORMAT_VERSION}", "dims " + " ".join(map(str, model.dims))]
    lines.append(f"centers {model.centers.shape[0]} {model.centers.shape[1]}")
    lines += _rows(model.centers)
    for layer in model.layers:
        if isinstance(layer, LinearLayer):
            lines.append(f"linear {layer.d_out} {layer.d_in}")
            lines += _rows(layer.weights)
        else:
            lines.append(f"activation {layer.num_centers} {layer.d_in}")
            lines.append("kernels " + " ".join(str(k) for k in layer.kernels))
            lines += _rows(layer.coefficients)
    lines.append("end")
    return "\n".join(lines) + "\n"


def loads(text: str) -> SdknModel:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise ModelFormatError("unexpected end of model file")
        pos += 1
        return lines[pos - 1]

    def matrix(rows, cols):
        out = np.empty((rows, cols))
        for i in range(rows):
            parts = take().split()
            if len(parts) != cols:
                raise ModelFormatError(f"expected {cols} numbers per row, got {len(parts)}")
            out[i] = [float(p) for p in parts]
        return out

    head = take().split()
    if len(head) != 2 or head[0] != FORMAT_NAME:
        raise ModelFormatError("not an sdkn model file")
    if int(head[1]) != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {head[1]}")
    dims_line = take().split()
    if dims_line[0] != "dims":
        raise ModelFormatError("missing dims line")
    dims = [int(v) for v in dims_line[1:]]
    tag, m, d = take().split()
    if tag != "centers":
        raise ModelFormatError("missing centers block")
    centers = matrix(int(m), int(d))
    layers = []
    while True:
        parts = take().split()
        if parts[0] == "end":
            break
        if parts[0] == "linear":
            layers.append(LinearLayer(matrix(int(parts[1]), int(parts[2]))))
        elif parts[0] == "activation":
            kline = take().split()
            if kline[0] != "kernels":
                raise ModelFormatError("activation block needs a kernels line")
            kernels = tuple(Kernel1D.parse(k) for k in kline[1:])
            layers.append(ActivationLayer(matrix(int(parts[1]), int(parts[2])), kernels))
        else:
            raise ModelFormatError(f"unknown block {parts[0]!r}")
    model = SdknModel(layers, centers)
    try:
        model.validate()
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc
    if model.dims != dims:
        raise ModelFormatError(f"dims line {dims} disagrees with layers {model.dims}")
    return model


def save_model(model: SdknModel, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(model))


def load_model(path: str | os.PathLike) -> SdknModel:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
