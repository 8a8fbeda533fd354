"""Versioned binary container for model state.

One file holds the transformer config, a hash of the tokenizer vocabulary it
was trained against, every parameter tensor, and (after tuning) the PCA
projector and/or classifier head plus the tuning mode. The layout is a JSON
header followed by raw tensor bytes in manifest order, so writing the same
state twice produces identical bytes; reloading reproduces bit-identical
forward passes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .pca import PCAProjector
from .transformer import ModelParams, TransformerConfig
from .tuning import ClassifierHead

_MAGIC = b"CMDLMCKPT1\n"


@dataclass
class Checkpoint:
    params: ModelParams
    vocab_hash: str
    projector: PCAProjector | None = None
    head: ClassifierHead | None = None
    tuning_mode: str | None = None


def _tensor_manifest(arrays: dict[str, np.ndarray]) -> list[dict]:
    return [
        {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
        for name, arr in arrays.items()
    ]


def save_checkpoint(
    path,
    params: ModelParams,
    vocab_hash: str,
    projector: PCAProjector | None = None,
    head: ClassifierHead | None = None,
    tuning_mode: str | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {
        f"param.{name}": params.tensors[name].data for name in sorted(params.tensors)
    }
    header: dict = {
        "version": 1,
        "config": {
            "n_layers": params.config.n_layers,
            "n_heads": params.config.n_heads,
            "hidden": params.config.hidden,
            "ffn_dim": params.config.ffn_dim,
            "max_len": params.config.max_len,
            "mask_prob": params.config.mask_prob,
        },
        "vocab_size": params.vocab_size,
        "vocab_hash": vocab_hash,
        "tuning_mode": tuning_mode,
        "projector": None,
        "head": None,
    }
    if projector is not None:
        header["projector"] = {
            "retained_fraction": projector.retained_fraction,
            "centered": projector.mean is not None,
        }
        arrays["projector.components"] = projector.components
        if projector.mean is not None:
            arrays["projector.mean"] = projector.mean
    if head is not None:
        header["head"] = {"input_mode": head.input_mode}
        for name, tensor in head.named().items():
            arrays[f"head.{name}"] = tensor.data
    header["tensors"] = _tensor_manifest(arrays)

    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size).decode("utf-8"))
        if header.get("version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    cfg = TransformerConfig(**header["config"])
    tensors = {
        name[len("param."):]: Tensor(arr, requires_grad=True)
        for name, arr in arrays.items()
        if name.startswith("param.")
    }
    params = ModelParams(config=cfg, vocab_size=header["vocab_size"], tensors=tensors)

    projector = None
    if header["projector"] is not None:
        projector = PCAProjector(
            components=arrays["projector.components"],
            mean=arrays.get("projector.mean"),
            retained_fraction=header["projector"]["retained_fraction"],
        )
    head = None
    if header["head"] is not None:
        head = ClassifierHead(
            w1=Tensor(arrays["head.w1"], requires_grad=True),
            b1=Tensor(arrays["head.b1"], requires_grad=True),
            w2=Tensor(arrays["head.w2"], requires_grad=True),
            b2=Tensor(arrays["head.b2"], requires_grad=True),
            input_mode=header["head"]["input_mode"],
        )
    return Checkpoint(
        params=params,
        vocab_hash=header["vocab_hash"],
        projector=projector,
        head=head,
        tuning_mode=header["tuning_mode"],
    )
