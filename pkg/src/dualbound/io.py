"""Artifact serialization: checkpoints, flat config files, manifests.

Checkpoints are zip archives written with pinned timestamps so identical
contents give identical bytes; arrays are stored in .npy format and metadata
as canonical JSON. Config files are diff-friendly ``key = value`` lines with
Python literals for arrays.
"""

from __future__ import annotations

import ast
import hashlib
import io as _io
import json
import zipfile
from typing import Optional

import numpy as np

from .control import ControlProblem
from .errors import ConfigurationError
from .neural import (GeneratingFunction, LinearGeneratingFunction,
                     MlpGeneratingFunction, MlpParams,
                     feature_map_from_descriptor)
from .training import checkpoint_hash

CHECKPOINT_FORMAT = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _array_bytes(arr: np.ndarray) -> bytes:
    buf = _io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), version=(1, 0))
    return buf.getvalue()


def save_checkpoint(path: str, gen: GeneratingFunction, seed: int = 0,
                    iteration: int = 0, extra: Optional[dict] = None) -> str:
    """Versioned binary checkpoint; returns the content hash stored inside."""
    if isinstance(gen, MlpGeneratingFunction):
        meta = {"kind": "mlp", **gen.describe()}
        arrays = {}
        for t, block in enumerate(gen.blocks):
            if block is None:
                continue
            for i, (w, b) in enumerate(zip(block.weights, block.biases)):
                arrays[f"block{t:03d}_w{i}"] = w
                arrays[f"block{t:03d}_b{i}"] = b
    elif isinstance(gen, LinearGeneratingFunction):
        meta = {"kind": "linear", "horizon": gen.horizon,
                "pin_terminal": gen.pin_terminal,
                "features": gen.features.descriptor}
        arrays = {f"coef{t:03d}": c for t, c in enumerate(gen.coefs) if c is not None}
    else:
        raise ConfigurationError("only network or linear generating functions checkpoint")
    chash = checkpoint_hash(gen)
    meta.update({"format": CHECKPOINT_FORMAT, "seed": int(seed),
                 "iteration": int(iteration), "hash": chash})
    if extra:
        meta.update(extra)
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json",
                   json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            _zip_write(zf, name + ".npy", _array_bytes(arrays[name]))
    return chash


def load_checkpoint(path: str, problem: ControlProblem) -> tuple[GeneratingFunction, dict]:
    """Rebuild the generating function; pinned terminals bind to ``problem``."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError(f"unsupported checkpoint format {meta.get('format')}")
        arrays = {n[:-4]: np.lib.format.read_array(_io.BytesIO(zf.read(n)))
                  for n in zf.namelist() if n.endswith(".npy")}
    features = feature_map_from_descriptor(meta["features"])
    horizon = int(meta["horizon"])
    if horizon != problem.horizon:
        raise ConfigurationError("checkpoint horizon does not match the problem")
    pin = bool(meta.get("pin_terminal", False))
    sign = problem.sign
    tval = tgrad = None
    if pin:
        tval = lambda S: sign * np.asarray(problem.terminal_reward(S), dtype=float)
        tgrad = lambda S: sign * np.asarray(problem.terminal_grad(S), dtype=float)
    if meta["kind"] == "mlp":
        activation = meta["activation"]
        blocks = []
        for t in range(horizon + 1):
            ws, bs, i = [], [], 0
            while f"block{t:03d}_w{i}" in arrays:
                ws.append(arrays[f"block{t:03d}_w{i}"])
                bs.append(arrays[f"block{t:03d}_b{i}"])
                i += 1
            blocks.append(MlpParams(tuple(ws), tuple(bs), activation) if ws else None)
        gen = MlpGeneratingFunction(horizon, blocks, features, pin,
                                    tval, tgrad,
                                    output_scale=float(meta.get("output_scale", 1.0)))
    elif meta["kind"] == "linear":
        coefs = [arrays.get(f"coef{t:03d}") for t in range(horizon + 1)]
        gen = LinearGeneratingFunction(horizon, features, coefs, pin, tval, tgrad)
    else:
        raise ConfigurationError(f"unknown checkpoint kind {meta['kind']!r}")
    if checkpoint_hash(gen) != meta["hash"]:
        raise ConfigurationError("checkpoint hash mismatch: file corrupted")
    return gen, meta


def export_checkpoint_csv(gen: GeneratingFunction) -> str:
    """Human-inspectable dump: block, layer, kind, row, col, value."""
    lines = ["block,layer,kind,row,col,value"]
    if isinstance(gen, MlpGeneratingFunction):
        for t, block in enumerate(gen.blocks):
            if block is None:
                continue
            for i, (w, b) in enumerate(zip(block.weights, block.biases)):
                for r in range(w.shape[0]):
                    for c in range(w.shape[1]):
                        lines.append(f"{t},{i},weight,{r},{c},{w[r, c]!r}")
                for r in range(b.shape[0]):
                    lines.append(f"{t},{i},bias,{r},0,{b[r]!r}")
    elif isinstance(gen, LinearGeneratingFunction):
        for t, cvec in enumerate(gen.coefs):
            if cvec is None:
                continue
            for r, val in enumerate(cvec):
                lines.append(f"{t},0,coef,{r},0,{val!r}")
    else:
        raise ConfigurationError("nothing to export for a fixed generating function")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# flat config files
# ---------------------------------------------------------------------------


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; values are Python literals, bare words stay strings."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigurationError(f"config line {lineno}: empty key")
        lowered = value.lower()
        if lowered in ("true", "false"):
            out[key] = lowered == "true"
            continue
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            out[key] = value
    return out


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return parse_config_text(fh.read())


def format_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        val = cfg[key]
        if isinstance(val, np.ndarray):
            val = val.tolist()
        if isinstance(val, float):
            val = repr(val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: str, subcommand: str, resolved: dict,
                   inputs: Optional[dict] = None) -> None:
    """Self-contained run record: the resolved config plus input hashes.

    The manifest is itself a valid config file; re-running the subcommand
    with it reproduces the artifacts.
    """
    body = dict(resolved)
    body["subcommand"] = subcommand
    text = format_config(body)
    if inputs:
        for name, p in sorted(inputs.items()):
            text += f"# input {name} sha256 {sha256_file(p)}\n"
    with open(path, "w") as fh:
        fh.write(text)
