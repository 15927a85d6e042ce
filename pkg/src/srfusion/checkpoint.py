"""Self-describing checkpoint container shared by the flow and fusion models.

A checkpoint is a ``torch.save`` dict::

    {"format": "srfusion-ckpt", "version": 1, "kind": <str>,
     "config": <dict of primitives>, "state": <state_dict>, "extra": <dict>}
"""

from __future__ import annotations

from pathlib import Path

import torch

FORMAT = "srfusion-ckpt"
VERSION = 1


def save_checkpoint(path, kind: str, config: dict, module: torch.nn.Module,
                    extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().clone() for k, v in module.state_dict().items()}
    torch.save({"format": FORMAT, "version": VERSION, "kind": kind,
                "config": dict(config), "state": state, "extra": extra or {}}, path)


def load_checkpoint(path, kind: str | None = None) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    if blob["version"] > VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob['version']}")
    if kind is not None and blob["kind"] != kind:
        raise ValueError(f"{path} holds a {blob['kind']!r} model, expected {kind!r}")
    return blob
