"""JSON checkpoint container for the embedding network and the weighting MLP."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

from . import gfm_net, weighting
from .errors import ShapeMismatch

SCHEMA_VERSION = 1
DESK_CHECKPOINT = "desk_checkpoint.json"


@dataclass
class Checkpoint:
    gfm_config: gfm_net.GfmConfig
    gfm: dict
    mlp: dict
    meta: dict | None = None

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.gfm_config,
            {k: v.copy() for k, v in self.gfm.items()},
            {k: v.copy() for k, v in self.mlp.items()},
            dict(self.meta or {}),
        )

    def validate(self) -> None:
        gfm_net.check_params(self.gfm, self.gfm_config)
        weighting.check_params(self.mlp, self.gfm_config.out_dim)


def init_checkpoint(cfg: gfm_net.GfmConfig, rng, mlp_hidden=(128, 64)) -> Checkpoint:
    return Checkpoint(cfg, gfm_net.init_params(cfg, rng), weighting.init_params(cfg.out_dim, rng, mlp_hidden), {})


def _dump_group(params):
    return [
        {"name": k, "shape": list(np.shape(v)), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
        for k, v in params.items()
    ]


def _load_group(entries):
    out = {}
    for e in entries:
        vals = np.asarray(e["values"], dtype=np.float64)
        shape = tuple(e["shape"])
        if vals.size != int(np.prod(shape)):
            raise ShapeMismatch(f"{e['name']}: {vals.size} values for shape {shape}")
        out[e["name"]] = vals.reshape(shape)
    return out


def to_dict(ckpt: Checkpoint) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "gfm_config": asdict(ckpt.gfm_config),
        "gfm": _dump_group(ckpt.gfm),
        "weighting": _dump_group(ckpt.mlp),
        "meta": ckpt.meta or {},
    }


def from_dict(d: dict) -> Checkpoint:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ShapeMismatch(f"unsupported checkpoint schema {d.get('schema_version')!r}")
    cfg = gfm_net.GfmConfig(**d["gfm_config"])
    ckpt = Checkpoint(cfg, _load_group(d["gfm"]), _load_group(d["weighting"]), d.get("meta") or {})
    ckpt.validate()
    return ckpt


def save(ckpt: Checkpoint, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(ckpt), fh)


def load(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        return from_dict(json.load(fh))


def load_default() -> Checkpoint:
    """The checkpoint shipped with the package (desk-scale synthetic training)."""
    ref = resources.files("dfcreg").joinpath("data", DESK_CHECKPOINT)
    return from_dict(json.loads(ref.read_text(encoding="utf-8")))
