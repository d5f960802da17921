"""Bit-exact model checkpoints.

Layout: 4-byte magic, little-endian uint32 header length, UTF-8 JSON header,
then the raw little-endian float64 parameter blocks back to back.  Derived
schedule arrays are never stored; the header keeps (T, beta_start, beta_end)
and everything else is recomputed on load, so load(save(x)) == x bitwise.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .meta_opt import AdamState, ModelState
from .networks import EncoderSpec, PredictorSpec, WeightNetSpec
from .numerics import ParamVector

__all__ = ["save_checkpoint", "load_checkpoint", "CHECKPOINT_VERSION"]

_MAGIC = b"PHDF"
CHECKPOINT_VERSION = 1


def _layout_json(pv: ParamVector):
    return [[name, off, list(shape)] for name, (off, shape) in pv.layout.items()]


def _layout_from_json(rows):
    return {name: (int(off), tuple(shape)) for name, off, shape in rows}


def save_checkpoint(path, ms: ModelState, schedule_desc: dict, rng_state: dict | None,
                    extra: dict | None = None) -> None:
    blocks = [("theta", ms.theta), ("w", ms.w)]
    header = {
        "format": "phasediff-checkpoint",
        "version": CHECKPOINT_VERSION,
        "step": int(ms.step),
        "schedule": {k: schedule_desc[k] for k in ("timesteps", "beta_start", "beta_end")},
        "specs": {
            "feature_dim": ms.enc_spec.feature_dim,
            "classes": ms.enc_spec.classes,
            "hidden": ms.enc_spec.hidden,
            "predictor_width": ms.pred_spec.width,
            "weightnet_hidden": ms.wnet_spec.hidden,
        },
        "optimizer": "adam" if ms.opt is not None else "sgd",
        "adam_count": int(ms.opt.count) if ms.opt is not None else 0,
        "rng_state": rng_state,
        "extra": extra or {},
        "blocks": [],
    }
    raw = []
    for name, pv in blocks:
        header["blocks"].append({"name": name, "size": pv.size, "layout": _layout_json(pv)})
        raw.append(pv.to_bytes())
    if ms.opt is not None:
        for name, arr in (("opt.m", ms.opt.m), ("opt.v", ms.opt.v)):
            header["blocks"].append({"name": name, "size": int(arr.size), "layout": None})
            raw.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = _MAGIC + struct.pack("<I", len(head)) + head + b"".join(raw)
    Path(path).write_bytes(payload)


def load_checkpoint(path) -> tuple[ModelState, dict, dict | None, dict]:
    """Returns (model state, schedule descriptor, rng state, extra)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {header.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
        )

    offset = 8 + hlen
    arrays = {}
    for block in header["blocks"]:
        nbytes = block["size"] * 8
        raw = blob[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"truncated checkpoint block {block['name']!r}")
        arrays[block["name"]] = (raw, block["layout"])
        offset += nbytes

    specs = header["specs"]
    enc = EncoderSpec(specs["feature_dim"], specs["classes"], specs["hidden"])
    pred = PredictorSpec(specs["classes"], specs["predictor_width"])
    wnet = WeightNetSpec(specs["weightnet_hidden"])
    theta = ParamVector.from_bytes(arrays["theta"][0], _layout_from_json(arrays["theta"][1]))
    w = ParamVector.from_bytes(arrays["w"][0], _layout_from_json(arrays["w"][1]))
    opt = None
    if header["optimizer"] == "adam":
        opt = AdamState(
            m=np.frombuffer(arrays["opt.m"][0], dtype="<f8").copy(),
            v=np.frombuffer(arrays["opt.v"][0], dtype="<f8").copy(),
            count=int(header["adam_count"]),
        )
    ms = ModelState(enc, pred, wnet, theta, w, opt, step=int(header["step"]))
    return ms, header["schedule"], header.get("rng_state"), header.get("extra", {})
