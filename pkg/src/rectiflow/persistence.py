"""Deterministic serialization of models, optimizer state, and run configs.

Checkpoint layout (all integers little-endian):

    magic   4 bytes  b"RFVC"
    version u32      currently 1
    meta    u32 byte length, then UTF-8 "key=value" lines
    tensors u32 count, then per tensor in declared order:
                name:  u32 byte length + UTF-8 name
                rank:  u32
                dims:  u64 per axis
                data:  float64 little-endian, C order

Checkpoints are self-describing: the metadata block carries the full
architecture (and, for conditional models, the fusion and data-source
configuration), so loading never needs the original config file. Identical
inputs serialize to byte-identical files.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict

import numpy as np

from .data import ToyMelConfig
from .errors import CheckpointError, ConfigError
from .flow import TrainConfig
from .fusion import FusionConfig, FusionEncoder
from .vectorfield import Adam, VectorFieldModel

MAGIC = b"RFVC"
VERSION = 1


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))
    name = _read_exact(fh, name_len, "tensor name").decode()
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of '{name}'"))
    dims = [
        struct.unpack("<Q", _read_exact(fh, 8, f"dims of '{name}'"))[0] for _ in range(rank)
    ]
    count = int(np.prod(dims)) if dims else 1
    raw = _read_exact(fh, count * 8, f"data of '{name}'")
    return name, np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)


def _format_meta(meta: dict[str, str]) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in meta.items()).encode()


def _parse_meta(blob: bytes) -> dict[str, str]:
    meta = {}
    for line in blob.decode().splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed metadata line: '{line}'")
        k, v = line.split("=", 1)
        meta[k] = v
    return meta


def build_metadata(
    model: VectorFieldModel,
    train_config: TrainConfig | None = None,
    fusion: FusionEncoder | None = None,
    data_descriptor: dict | None = None,
    extra: dict | None = None,
) -> dict[str, str]:
    meta = {
        "architecture": "tanh_mlp",
        "dim": str(model.dim),
        "hidden": ",".join(str(h) for h in model.hidden),
        "time_embed_dim": str(model.time_embed_dim),
        "cond_dim": str(model.cond_dim),
        "rectification_round": str(model.rectification_round),
    }
    if train_config is not None:
        meta["seed"] = str(train_config.seed)
        meta["train_steps"] = str(train_config.steps)
        meta["batch_size"] = str(train_config.batch_size)
        meta["lr"] = repr(train_config.lr)
        meta["beta1"] = repr(train_config.beta1)
        meta["beta2"] = repr(train_config.beta2)
        meta["eps"] = repr(train_config.eps)
        meta["condition"] = train_config.condition
    if fusion is not None:
        cfg = fusion.config
        meta["fusion.d_model"] = str(cfg.d_model)
        meta["fusion.n_heads"] = str(cfg.n_heads)
        meta["fusion.n_self_attn_iters"] = str(cfg.n_self_attn_iters)
        meta["fusion.codebook_size"] = str(cfg.codebook_size)
        meta["fusion.cond_dim"] = str(cfg.cond_dim)
        meta["fusion.pitch_lo"] = repr(cfg.pitch_range[0])
        meta["fusion.pitch_hi"] = repr(cfg.pitch_range[1])
    if data_descriptor:
        for k, v in data_descriptor.items():
            meta[f"data.{k}"] = str(v)
    if extra:
        meta.update({str(k): str(v) for k, v in extra.items()})
    return meta


def save_checkpoint(
    model: VectorFieldModel,
    path,
    optimizer: Adam | None = None,
    train_config: TrainConfig | None = None,
    fusion: FusionEncoder | None = None,
    data_descriptor: dict | None = None,
    extra_meta: dict | None = None,
) -> None:
    meta = build_metadata(model, train_config, fusion, data_descriptor, extra_meta)
    tensors: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in model.parameters()]
    if fusion is not None:
        tensors += [(n, p.data) for n, p in fusion.parameters()]
        tensors.append(("fusion.codebook", fusion.codebook))
    if optimizer is not None:
        meta["optimizer"] = "adam"
        meta["optimizer.step_count"] = str(optimizer.step_count)
        tensors += optimizer.state_tensors()

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    mb = _format_meta(meta)
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class LoadedCheckpoint:
    def __init__(self, model, fusion, meta, tensors, optimizer_state):
        self.model: VectorFieldModel = model
        self.fusion: FusionEncoder | None = fusion
        self.meta: dict[str, str] = meta
        self.tensors: dict[str, np.ndarray] = tensors
        self.optimizer_state: dict[str, np.ndarray] | None = optimizer_state

    @property
    def rectification_round(self) -> int:
        return self.model.rectification_round

    def data_descriptor(self) -> dict[str, str]:
        return {k[len("data.") :]: v for k, v in self.meta.items() if k.startswith("data.")}

    def train_config(self) -> TrainConfig:
        m = self.meta
        required = ("train_steps", "batch_size", "lr", "seed")
        for key in required:
            if key not in m:
                raise CheckpointError(f"checkpoint metadata missing '{key}'")
        return TrainConfig(
            dim=self.model.dim,
            batch_size=int(m["batch_size"]),
            steps=int(m["train_steps"]),
            lr=float(m["lr"]),
            beta1=float(m.get("beta1", 0.9)),
            beta2=float(m.get("beta2", 0.999)),
            eps=float(m.get("eps", 1e-8)),
            seed=int(m["seed"]),
            condition=m.get("condition", "unconditional"),
            hidden=tuple(int(h) for h in m["hidden"].split(",")),
            time_embed_dim=int(m["time_embed_dim"]),
        )


def load_checkpoint(path) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))
        meta = _parse_meta(_read_exact(fh, meta_len, "metadata"))
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = dict(_read_tensor(fh) for _ in range(n_tensors))

    for key in ("dim", "hidden", "time_embed_dim", "cond_dim", "rectification_round"):
        if key not in meta:
            raise CheckpointError(f"checkpoint metadata missing '{key}'")

    model = VectorFieldModel(
        dim=int(meta["dim"]),
        hidden=tuple(int(h) for h in meta["hidden"].split(",")),
        time_embed_dim=int(meta["time_embed_dim"]),
        cond_dim=int(meta["cond_dim"]),
    )
    model.rectification_round = int(meta["rectification_round"])
    for name, p in model.parameters():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor '{name}'")
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(
                f"tensor '{name}' has shape {tensors[name].shape}, architecture expects {p.data.shape}"
            )
        p.data = tensors[name].copy()

    fusion = None
    if "fusion.d_model" in meta:
        d_model = int(meta["fusion.d_model"])
        fcfg = FusionConfig(
            d_model=d_model,
            n_heads=int(meta["fusion.n_heads"]),
            n_self_attn_iters=int(meta["fusion.n_self_attn_iters"]),
            codebook_size=int(meta["fusion.codebook_size"]),
            cond_dim=int(meta["fusion.cond_dim"]),
            pitch_range=(float(meta["fusion.pitch_lo"]), float(meta["fusion.pitch_hi"])),
        )
        fusion = FusionEncoder(fcfg)
        for name, p in fusion.parameters():
            if name not in tensors:
                raise CheckpointError(f"checkpoint is missing tensor '{name}'")
            if tensors[name].shape != p.data.shape:
                raise CheckpointError(
                    f"tensor '{name}' has shape {tensors[name].shape}, fusion expects {p.data.shape}"
                )
            p.data = tensors[name].copy()
        if "fusion.codebook" in tensors:
            fusion.codebook = tensors["fusion.codebook"].copy()

    opt_state = None
    if meta.get("optimizer") == "adam":
        opt_state = {k: v for k, v in tensors.items() if k.startswith("adam.")}
    return LoadedCheckpoint(model, fusion, meta, tensors, opt_state)


def toy_mel_descriptor(cfg: ToyMelConfig) -> dict:
    d = asdict(cfg)
    return {"name": "toy_mel", **d}


def toy_mel_from_descriptor(desc: dict[str, str]) -> ToyMelConfig:
    return ToyMelConfig(
        n_speakers=int(desc["n_speakers"]),
        bands=int(desc["bands"]),
        envelope_coefs=int(desc["envelope_coefs"]),
        n_codes=int(desc["n_codes"]),
        frames=int(desc["frames"]),
        noise=float(desc["noise"]),
        envelope_scale=float(desc["envelope_scale"]),
        bump_amp=float(desc["bump_amp"]),
        content_amp=float(desc["content_amp"]),
        d_model=int(desc["d_model"]),
        seed=int(desc["seed"]),
    )


# -- plain-text run configs ---------------------------------------------------
#
# key = value, one per line, '#' starts a comment. Unknown keys are rejected.

_TRAIN_KEYS = {
    "dim",
    "batch_size",
    "steps",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "condition",
    "hidden",
    "time_embed_dim",
    "fusion.d_model",
    "fusion.n_heads",
    "fusion.n_self_attn_iters",
    "fusion.codebook_size",
    "fusion.cond_dim",
    "data.speakers",
    "data.bands",
    "data.envelope_coefs",
    "data.codes",
    "data.frames",
    "data.noise",
    "data.d_model",
    "data.seed",
}

_REQUIRED_TRAIN_KEYS = ("dim", "steps", "batch_size", "lr")


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{line}'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _TRAIN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
            if not value:
                raise ConfigError(f"{path}:{lineno}: key '{key}' has no value")
            values[key] = value
    for key in _REQUIRED_TRAIN_KEYS:
        if key not in values:
            raise ConfigError(f"{path}: missing required key '{key}'")
    return values


def train_config_from_file(path, seed_override: int | None = None) -> TrainConfig:
    v = parse_config_file(path)
    seed = seed_override if seed_override is not None else int(v.get("seed", "0"))
    return TrainConfig(
        dim=int(v["dim"]),
        batch_size=int(v["batch_size"]),
        steps=int(v["steps"]),
        lr=float(v["lr"]),
        beta1=float(v.get("beta1", "0.9")),
        beta2=float(v.get("beta2", "0.999")),
        eps=float(v.get("eps", "1e-8")),
        seed=seed,
        condition=v.get("condition", "unconditional"),
        hidden=tuple(int(h) for h in v.get("hidden", "256,256").split(",")),
        time_embed_dim=int(v.get("time_embed_dim", "32")),
    )


def fusion_config_from_file(path) -> FusionConfig | None:
    v = parse_config_file(path)
    if v.get("condition", "unconditional") != "fused":
        return None
    return FusionConfig(
        d_model=int(v.get("fusion.d_model", "256")),
        n_heads=int(v.get("fusion.n_heads", "8")),
        n_self_attn_iters=int(v.get("fusion.n_self_attn_iters", "2")),
        codebook_size=int(v.get("fusion.codebook_size", "64")),
        cond_dim=int(v.get("fusion.cond_dim", "128")),
    )


def toy_mel_config_from_file(path) -> ToyMelConfig:
    v = parse_config_file(path)
    return ToyMelConfig(
        n_speakers=int(v.get("data.speakers", "4")),
        bands=int(v.get("data.bands", "16")),
        envelope_coefs=int(v.get("data.envelope_coefs", "4")),
        n_codes=int(v.get("data.codes", "8")),
        frames=int(v.get("data.frames", "8")),
        noise=float(v.get("data.noise", "0.05")),
        d_model=int(v.get("data.d_model", v.get("fusion.d_model", "256"))),
        seed=int(v.get("data.seed", "11")),
    )
