"""Checkpoint archive: a zip holding ``header.json`` and raw float32 blobs.

``params.bin`` concatenates little-endian float32 arrays; the header maps each
path string (``ae.encoder.conv_in.weight``, ``optim/denoiser.x.weight/exp_avg``,
...) to its byte offset and shape. ``rng.bin`` holds the sampler RNG state.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from ..cmpf import Vocab
from ..config import RunConfig
from .model import Colorizer

FORMAT_VERSION = "lc4-ckpt-1"
_F32 = np.dtype("<f4")


def _pack(arrays: dict[str, np.ndarray]) -> tuple[bytes, dict]:
    buf = io.BytesIO()
    index = {}
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=_F32)
        index[name] = {"offset": buf.tell(), "shape": list(data.shape)}
        buf.write(data.tobytes())
    return buf.getvalue(), index


def _unpack(blob: bytes, index: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, meta in index.items():
        count = int(np.prod(meta["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=_F32, count=count, offset=meta["offset"])
        out[name] = arr.reshape(meta["shape"]).copy()
    return out


def save_checkpoint(
    path: str | Path,
    model: Colorizer,
    *,
    step: int,
    stage: int,
    optimizer: torch.optim.Optimizer | None = None,
    generator: torch.Generator | None = None,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    optim_meta = None
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        optim_meta = {"param_groups": [], "steps": {}}
        for group in optimizer.param_groups:
            meta = {k: v for k, v in group.items() if k != "params"}
            meta["betas"] = list(meta["betas"])
            meta["params"] = [names[id(p)] for p in group["params"]]
            optim_meta["param_groups"].append(meta)
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                name = names[id(p)]
                optim_meta["steps"][name] = float(state["step"])
                arrays[f"optim/{name}/exp_avg"] = state["exp_avg"].detach().cpu().numpy()
                arrays[f"optim/{name}/exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
    blob, index = _pack(arrays)
    header = {
        "format": FORMAT_VERSION,
        "step": step,
        "stage": stage,
        "config": model.config.to_json(),
        "vocab": model.vocab.to_json(),
        "params": index,
        "optimizer": optim_meta,
    }
    header.update(extra or {})
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=1))
        zf.writestr("params.bin", blob)
        if generator is not None:
            zf.writestr("rng.bin", generator.get_state().numpy().tobytes())
    tmp.replace(path)
    return path


class Checkpoint:
    """A loaded archive: header, model and (optionally) optimizer/RNG state."""

    def __init__(self, header: dict, arrays: dict[str, np.ndarray], rng_state: bytes | None):
        self.header = header
        self.arrays = arrays
        self.rng_state = rng_state

    @property
    def step(self) -> int:
        return int(self.header["step"])

    @property
    def stage(self) -> int:
        return int(self.header["stage"])

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_json(self.header["config"])

    def build_model(self) -> Colorizer:
        model = Colorizer(self.config, Vocab.from_json(self.header["vocab"]))
        state = {k: torch.from_numpy(v) for k, v in self.arrays.items() if not k.startswith("optim/")}
        model.load_state_dict(state, strict=True)
        return model

    def restore_optimizer(self, optimizer: torch.optim.Optimizer, model: Colorizer) -> None:
        meta = self.header.get("optimizer")
        if not meta:
            return
        params = dict(model.named_parameters())
        for group in optimizer.param_groups:
            for p in group["params"]:
                name = next(n for n, q in params.items() if q is p)
                if name not in meta["steps"]:
                    continue
                optimizer.state[p] = {
                    "step": torch.tensor(meta["steps"][name]),
                    "exp_avg": torch.from_numpy(self.arrays[f"optim/{name}/exp_avg"]),
                    "exp_avg_sq": torch.from_numpy(self.arrays[f"optim/{name}/exp_avg_sq"]),
                }

    def restore_generator(self, generator: torch.Generator) -> None:
        if self.rng_state is not None:
            generator.set_state(torch.frombuffer(bytearray(self.rng_state), dtype=torch.uint8))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        blob = zf.read("params.bin")
        rng = zf.read("rng.bin") if "rng.bin" in zf.namelist() else None
    return Checkpoint(header, _unpack(blob, header["params"]), rng)
