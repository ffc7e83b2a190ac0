"""Tensor plumbing on top of torch: masked softmax, finite-difference checks,
deterministic setup and the checkpoint container.

Checkpoint byte layout (all integers little-endian)::

    magic    8 bytes   b"MGRANCK\\0"
    version  u32       CHECKPOINT_VERSION
    count    u32       number of tensors
    count x:
        name_len u32, name utf-8 bytes
        dtype    u8    (0 = float32, 1 = float64, 2 = int64, 3 = uint8)
        ndim     u32, shape ndim x u64
        nbytes   u64, raw row-major data
    crc32    u32       over everything after the header (version, count, tensors)
"""
from __future__ import annotations

import io
import os
import random
import struct
import zlib
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

# Numeric epsilons, kept in one place.
LAYER_NORM_EPS = 1e-5
DICE_EPS = 1e-6
PROB_CLAMP = 1e-6          # clamp for probabilities inside logs / inverse sigmoid
GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_FLOOR = 1e-6    # denominator floor of the relative error

CHECKPOINT_MAGIC = b"MGRANCK\0"
CHECKPOINT_VERSION = 1

_DTYPES = {0: torch.float32, 1: torch.float64, 2: torch.int64, 3: torch.uint8}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def masked_softmax(logits: torch.Tensor, allowed: torch.Tensor | None = None, dim: int = -1) -> torch.Tensor:
    """Softmax where positions with ``allowed == False`` get exactly zero weight.

    ``allowed`` broadcasts against ``logits``. A row with nothing allowed
    returns all zeros instead of NaN.
    """
    if allowed is None:
        return torch.softmax(logits, dim=dim)
    allowed = allowed.to(torch.bool)
    masked = logits.masked_fill(~allowed, float("-inf"))
    any_allowed = allowed.any(dim=dim, keepdim=True)
    masked = torch.where(any_allowed, masked, torch.zeros_like(masked))
    weights = torch.softmax(masked, dim=dim)
    return torch.where(allowed, weights, torch.zeros_like(weights))


def inverse_sigmoid(x: torch.Tensor, eps: float = PROB_CLAMP) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Iterable[tuple[str, torch.nn.Parameter]],
    n_probe: int,
    step: float = GRAD_CHECK_STEP,
    seed: int = 0,
    floor: float = GRAD_CHECK_FLOOR,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` recomputes the scalar loss from the current parameter values. The
    parameters should be float64. Probes are drawn uniformly over all
    entries of all parameters; the error of a probe is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    named = [(n, p) for n, p in params if p.requires_grad]
    for _, p in named:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"loss is not finite: {loss.item()}")
    loss.backward()
    analytic = {}
    for name, p in named:
        g = p.grad
        if g is None:
            g = torch.zeros_like(p)
        if not torch.all(torch.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        analytic[name] = g.detach().clone()

    sizes = np.array([p.numel() for _, p in named])
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(sizes.sum()), size=min(n_probe, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for flat in np.sort(picks):
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = named[k]
            idx = int(flat - offsets[k])
            view = p.data.view(-1)
            orig = view[idx].item()
            view[idx] = orig + step
            up = f().item()
            view[idx] = orig - step
            down = f().item()
            view[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while probing {name!r}[{idx}]")
            numeric = (up - down) / (2 * step)
            a = analytic[name].view(-1)[idx].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def save_checkpoint(tensors: Mapping[str, torch.Tensor], path: str | os.PathLike) -> None:
    body = io.BytesIO()
    body.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name!r}")
        raw = name.encode("utf-8")
        body.write(struct.pack("<I", len(raw)))
        body.write(raw)
        body.write(struct.pack("<BI", _DTYPE_CODES[t.dtype], t.dim()))
        body.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        data = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        body.write(struct.pack("<Q", len(data)))
        body.write(data)
    payload = body.getvalue()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, torch.Tensor]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 12 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    payload = blob[len(CHECKPOINT_MAGIC) : -4]
    (crc,) = struct.unpack("<I", blob[-4:])
    version, count = struct.unpack_from("<II", payload, 0)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    try:
        return _parse_tensors(payload, count)
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed tensor table ({exc})") from exc


def _parse_tensors(payload: bytes, count: int) -> dict[str, torch.Tensor]:
    pos = 8
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        name = payload[pos : pos + n].decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BI", payload, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}Q", payload, pos)
        pos += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", payload, pos)
        pos += 8
        if code not in _DTYPES:
            raise ValueError(f"unknown dtype code {code}")
        dtype = _DTYPES[code]
        np_dtype = torch.empty(0, dtype=dtype).numpy().dtype.newbyteorder("<")
        arr = np.frombuffer(payload[pos : pos + nbytes], dtype=np_dtype).reshape(shape)
        pos += nbytes
        out[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return out


def load_into(module: torch.nn.Module, tensors: Mapping[str, torch.Tensor], strict: bool = True) -> None:
    """Copy named tensors into ``module``; missing names are reported together."""
    state = module.state_dict()
    missing = sorted(set(state) - set(tensors))
    if strict and missing:
        raise CheckpointError(f"checkpoint is missing parameters: {', '.join(missing)}")
    for name, value in tensors.items():
        if name not in state:
            if strict:
                raise CheckpointError(f"unexpected parameter {name!r} in checkpoint")
            continue
        if tuple(state[name].shape) != tuple(value.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: {tuple(value.shape)} vs {tuple(state[name].shape)}"
            )
    module.load_state_dict({k: v for k, v in tensors.items() if k in state}, strict=False)
