# ranklab/utils/checkpoint.py
"""
Checkpoint codec.

    RANKLAB-CKPT
    header_bytes=<n>
    <n bytes of UTF-8 header>
    <little-endian raw arrays, in header table order>

Header sections:
    version=1
    [model]     ModelConfig as key=value lines
    [meta]      run_config=<json> (optional)
    [adapters]  <module_id>=<name>,<scaling>,<hard_concrete 0|1>
    [tensors]   <name> <shape, comma-separated> <numpy dtype string>
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from core.errors import ArtifactError
from ml.gated_lora import GatedLoraAdapter
from ml.regularizers import HardConcreteGate
from ml.tensor import Tensor, parameter
from ml.transformer import BlockWeights, SuperNetwork, module_id_for, SLOTS
from schemas.config import ModelConfig, RegularizerConfig, RunConfig

logger = logging.getLogger("checkpoint")

MAGIC = b"RANKLAB-CKPT"
VERSION = 1
_BLOCK_KEYS = ("W_Q", "W_K", "W_V", "W_O", "W_U", "W_D", "b_U", "b_D")


def _le(arr: np.ndarray) -> np.ndarray:
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def _collect(model: SuperNetwork) -> List[Tuple[str, np.ndarray]]:
    arrays = [(name, t.data) for name, t in model.base_tensors().items()]
    for m in model.module_ids:
        a = model.adapters[m]
        arrays += [
            (f"adapters.{m}.W_A", a.W_A.data),
            (f"adapters.{m}.W_B", a.W_B.data),
            (f"adapters.{m}.gate_logits", a.gate_logits.data),
            (f"adapters.{m}.gate_state", a.gate_state),
        ]
        if a.hard_concrete is not None:
            arrays.append((f"adapters.{m}.log_theta", a.hard_concrete.log_theta.data))
    return arrays


def save_checkpoint(path: Union[str, Path], model: SuperNetwork, run_config: Optional[RunConfig] = None) -> Path:
    path = Path(path)
    arrays = [(name, _le(np.ascontiguousarray(arr))) for name, arr in _collect(model)]

    lines = [f"version={VERSION}", "[model]"]
    lines += [f"{k}={v}" for k, v in model.config.model_dump().items()]
    lines.append("[meta]")
    if run_config is not None:
        lines.append(f"run_config={run_config.model_dump_json()}")
    lines.append("[adapters]")
    for m in model.module_ids:
        a = model.adapters[m]
        lines.append(f"{m}={a.name},{a.scaling!r},{int(a.hard_concrete is not None)}")
    lines.append("[tensors]")
    for name, arr in arrays:
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name} {shape} {arr.dtype.str}")
    header = ("\n".join(lines) + "\n").encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC + b"\n")
            fh.write(f"header_bytes={len(header)}\n".encode("ascii"))
            fh.write(header)
            for _, arr in arrays:
                fh.write(arr.tobytes(order="C"))
    except OSError as e:
        raise ArtifactError(path, f"cannot write checkpoint ({e})") from e
    logger.info(f"[checkpoint] saved {len(arrays)} tensors to {path}")
    return path


# ── Loading ───────────────────────────────────────────────────────────────────

def _parse_header(path: Path, text: str):
    sections: Dict[str, List[str]] = {"": []}
    current = ""
    for line in text.splitlines():
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        else:
            sections[current].append(line)

    top = dict(line.split("=", 1) for line in sections[""])
    if int(top.get("version", -1)) != VERSION:
        raise ArtifactError(path, f"unsupported checkpoint version {top.get('version')}")
    model_kv = dict(line.split("=", 1) for line in sections.get("model", []))
    meta = dict(line.split("=", 1) for line in sections.get("meta", []))
    adapters = {}
    for line in sections.get("adapters", []):
        key, value = line.split("=", 1)
        name, scaling, hc = value.split(",")
        adapters[int(key)] = (name, float(scaling), hc == "1")
    table = []
    for line in sections.get("tensors", []):
        name, shape, dtype = line.split(" ")
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        table.append((name, dims, np.dtype(dtype)))
    return model_kv, meta, adapters, table


def load_checkpoint(path: Union[str, Path]) -> Tuple[SuperNetwork, Optional[RunConfig]]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(path, "checkpoint not found")
    try:
        raw = path.read_bytes()
        magic, size_line, rest = raw.split(b"\n", 2)
        if magic != MAGIC or not size_line.startswith(b"header_bytes="):
            raise ArtifactError(path, "not a ranklab checkpoint")
        n = int(size_line.split(b"=", 1)[1])
        model_kv, meta, adapter_meta, table = _parse_header(path, rest[:n].decode("utf-8"))
        body = memoryview(rest)[n:]

        arrays: Dict[str, np.ndarray] = {}
        offset = 0
        for name, shape, dtype in table:
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * dtype.itemsize
            if offset + nbytes > len(body):
                raise ArtifactError(path, f"truncated at tensor {name}")
            arr = np.frombuffer(body[offset:offset + nbytes], dtype=dtype, count=count).reshape(shape)
            arrays[name] = arr.astype(dtype.newbyteorder("="), copy=True)
            offset += nbytes
        if offset != len(body):
            raise ArtifactError(path, f"{len(body) - offset} trailing bytes after the tensor table")

        config = ModelConfig(**model_kv)
        run_config = RunConfig.model_validate_json(meta["run_config"]) if "run_config" in meta else None
    except ArtifactError:
        raise
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise ArtifactError(path, f"corrupt checkpoint ({e})") from e

    model = _rebuild(path, config, arrays, adapter_meta, run_config)
    logger.info(f"[checkpoint] loaded {len(table)} tensors from {path}")
    return model, run_config


def _rebuild(path, config, arrays, adapter_meta, run_config) -> SuperNetwork:
    def frozen(name: str) -> Tensor:
        if name not in arrays:
            raise ArtifactError(path, f"missing tensor {name}")
        arr = arrays[name]
        return Tensor(arr, dtype=arr.dtype)

    blocks = []
    for layer in range(config.layers):
        t = {k: frozen(f"blocks.{layer}.{k}") for k in _BLOCK_KEYS}
        blocks.append(BlockWeights(
            **t, heads=config.heads,
            module_ids=tuple(module_id_for(layer, s) for s in SLOTS),
        ))

    regs = run_config.regularizers if run_config is not None else RegularizerConfig()
    adapters: Dict[int, GatedLoraAdapter] = {}
    rng = np.random.default_rng(0)
    for m, (name, scaling, has_hc) in adapter_meta.items():
        w_a = arrays[f"adapters.{m}.W_A"]
        w_b = arrays[f"adapters.{m}.W_B"]
        adapter = GatedLoraAdapter(m, name, w_a.shape[0], w_b.shape[1], 0, rng, scaling=scaling)
        adapter.W_A = parameter(w_a, f"{name}.W_A", dtype=w_a.dtype)
        adapter.W_B = parameter(w_b, f"{name}.W_B", dtype=w_b.dtype)
        logits = arrays[f"adapters.{m}.gate_logits"]
        adapter.gate_logits = Tensor(logits, name=f"{name}.gate_logits", dtype=logits.dtype)
        adapter.gate_state = arrays[f"adapters.{m}.gate_state"].astype(np.uint8)
        if has_hc:
            adapter.hard_concrete = HardConcreteGate(
                adapter.rank, name, regs.log_theta_init, regs.tau, regs.gamma_lower, regs.zeta_upper,
            )
            log_theta = arrays[f"adapters.{m}.log_theta"]
            adapter.hard_concrete.log_theta = parameter(log_theta, f"{name}.log_theta", dtype=log_theta.dtype)
        adapters[m] = adapter

    return SuperNetwork(
        config, frozen("embedding"), frozen("positions"), blocks, frozen("head"), adapters,
    )
