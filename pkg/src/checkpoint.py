"""
Checkpoint files.

A checkpoint is one UTF-8 JSON document with sorted keys:

    format_version   int, currently 2
    dtype            "float64" or "float32"
    epoch            epochs completed when the snapshot was taken
    config           TrainConfig fields
    norm             {"mean", "std"} of the training split speed channel
    graph            {"vertex_ids": [...], "threshold": float, "edges": [[from_id, to_id], ...]}
    data             {"k_in", "k_out", "period_seconds"}
    history          list of per-epoch records
    params           {name: array}
    optimizer        {"step", "beta1", "beta2", "eps", "m": {name: array}, "v": {name: array}}

where every array is {"shape": [...], "dtype": "<f8", "data": base64 of the
little-endian row-major bytes}. Writes go to a temporary file in the target
directory and are renamed into place.
"""
import base64
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from src.errors import CheckpointError

FORMAT_VERSION = 2


def encode_array(arr: np.ndarray) -> dict:
    arr = np.asarray(arr)
    little = arr.astype(arr.dtype.newbyteorder('<'), copy=False)
    return {
        'shape': list(arr.shape),
        'dtype': little.dtype.str,
        'data': base64.b64encode(np.ascontiguousarray(little).tobytes()).decode('ascii')
    }


def decode_array(blob: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(blob['data'])
        return np.frombuffer(raw, dtype=np.dtype(blob['dtype'])).reshape(blob['shape']).copy()
    except (KeyError, ValueError, TypeError) as e:
        raise CheckpointError(f"Corrupt array entry: {e}") from e


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: dict
    optimizer: dict
    epoch: int
    norm: dict
    graph: dict
    data: dict
    dtype: str = 'float64'
    history: List[dict] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def to_payload(self) -> dict:
        optimizer = dict(self.optimizer)
        for key in ('m', 'v'):
            if key in optimizer:
                optimizer[key] = {name: encode_array(a) for name, a in optimizer[key].items()}
        return {
            'format_version': self.format_version,
            'dtype': self.dtype,
            'epoch': self.epoch,
            'config': self.config,
            'norm': self.norm,
            'graph': self.graph,
            'data': self.data,
            'history': self.history,
            'params': {name: encode_array(a) for name, a in self.params.items()},
            'optimizer': optimizer
        }

    @classmethod
    def from_payload(cls, payload: dict) -> 'Checkpoint':
        version = payload.get('format_version')
        if version != FORMAT_VERSION:
            raise CheckpointError(f"Checkpoint format version {version} is not supported (expected {FORMAT_VERSION}).")
        try:
            optimizer = dict(payload['optimizer'])
            for key in ('m', 'v'):
                if key in optimizer:
                    optimizer[key] = {name: decode_array(b) for name, b in optimizer[key].items()}
            return cls(
                params={name: decode_array(b) for name, b in payload['params'].items()},
                config=payload['config'],
                optimizer=optimizer,
                epoch=payload['epoch'],
                norm=payload['norm'],
                graph=payload['graph'],
                data=payload['data'],
                dtype=payload['dtype'],
                history=payload.get('history', []),
                format_version=version
            )
        except KeyError as e:
            raise CheckpointError(f"Checkpoint is missing the {e} section.") from e


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(ckpt.to_payload(), sort_keys=True, indent=1)

    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.tmp', dir=path.parent)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as fh:
            fh.write(text)
            fh.write("\n")
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise

    logging.info(f"[CKPT] Saved {path} (epoch {ckpt.epoch}, {len(ckpt.params)} tensors)")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path} is not a checkpoint file: {e}") from e
    if not isinstance(payload, dict):
        raise CheckpointError(f"{path} is not a checkpoint file.")
    return Checkpoint.from_payload(payload)
