"""Model file: one JSON document, tensors as base64 little-endian float64."""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np
import torch

from .nets import DTYPE

FORMAT = "shwmpc-model"
VERSION = 1


def encode_array(a) -> dict:
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    if obj.get("dtype", "<f8") != "<f8":
        raise ValueError(f"unsupported dtype {obj['dtype']!r}")
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).copy()


def module_to_doc(kind: str, arch: dict, module: torch.nn.Module, meta: dict | None = None) -> dict:
    tensors = {k: encode_array(v.detach().cpu().numpy()) for k, v in module.state_dict().items()}
    return {"format": FORMAT, "version": VERSION, "kind": kind, "architecture": arch,
            "meta": meta or {}, "tensors": tensors}


def load_state(module: torch.nn.Module, doc: dict) -> None:
    state = {k: torch.as_tensor(decode_array(v), dtype=DTYPE) for k, v in doc["tensors"].items()}
    module.load_state_dict(state)


def save_model(model, path, meta: dict | None = None) -> None:
    """Write an :class:`~shwmpc.shw.ShwModel` or baseline network to ``path``."""
    from .baseline import DenseNnModel
    from .shw import ShwModel

    if isinstance(model, ShwModel):
        doc = module_to_doc("shw", model.arch.to_dict(), model, meta)
    elif isinstance(model, DenseNnModel):
        doc = module_to_doc("dense_nn", model.arch_dict(), model, meta)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_model(path):
    from .baseline import DenseNnModel
    from .shw import ShwArch, ShwModel

    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    if doc["kind"] == "shw":
        model = ShwModel(ShwArch.from_dict(doc["architecture"]), seed=None)
    elif doc["kind"] == "dense_nn":
        model = DenseNnModel(**doc["architecture"])
    else:
        raise ValueError(f"unknown model kind {doc['kind']!r}")
    load_state(model, doc)
    return model


def read_meta(path) -> dict:
    return json.loads(Path(path).read_text()).get("meta", {})
