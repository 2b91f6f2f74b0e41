"""Flat parameter storage, Adam with parameter groups, gradient checking and checkpoints."""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

GROUPS = ("geometry", "appearance", "decoder", "pose")
GROUP_INDEX = {name: i for i, name in enumerate(GROUPS)}


@dataclass
class _Slot:
    offset: int
    shape: tuple[int, ...]
    group: str

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamStore:
    """All trainable values of one model in a single float64 vector.

    Named blocks are registered with :meth:`add` and accessed as reshaped
    views through :meth:`value` and :meth:`grad`. Views are invalidated by
    further calls to :meth:`add`, so fetch them on use.
    """

    def __init__(self) -> None:
        self.values = np.zeros(0)
        self.grads = np.zeros(0)
        self.group_ids = np.zeros(0, dtype=np.int8)
        self._slots: dict[str, _Slot] = {}

    def add(self, name: str, init: np.ndarray, group: str) -> None:
        if name in self._slots:
            raise KeyError(f"parameter {name!r} already registered")
        if group not in GROUP_INDEX:
            raise ValueError(f"unknown parameter group {group!r}")
        init = np.asarray(init, dtype=np.float64)
        self._slots[name] = _Slot(self.values.size, init.shape, group)
        self.values = np.concatenate([self.values, init.ravel()])
        self.grads = np.concatenate([self.grads, np.zeros(init.size)])
        self.group_ids = np.concatenate(
            [self.group_ids, np.full(init.size, GROUP_INDEX[group], dtype=np.int8)]
        )

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    @property
    def names(self) -> list[str]:
        return list(self._slots)

    def slot(self, name: str) -> tuple[int, int]:
        s = self._slots[name]
        return s.offset, s.offset + s.size

    def group_of(self, name: str) -> str:
        return self._slots[name].group

    def value(self, name: str) -> np.ndarray:
        s = self._slots[name]
        return self.values[s.offset : s.offset + s.size].reshape(s.shape)

    def grad(self, name: str) -> np.ndarray:
        s = self._slots[name]
        return self.grads[s.offset : s.offset + s.size].reshape(s.shape)

    def zero_grads(self) -> None:
        self.grads[:] = 0.0

    def group_mask(self, group: str) -> np.ndarray:
        return self.group_ids == GROUP_INDEX[group]

    def indices_of_group(self, group: str) -> np.ndarray:
        return np.flatnonzero(self.group_mask(group))

    def __len__(self) -> int:
        return self.values.size


@dataclass
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """Moment estimates for every entry of a :class:`ParamStore`.

    Bias correction uses a per-group step counter so groups that are
    stepped at different cadences (tracking vs mapping) stay consistent.
    """

    m: np.ndarray
    v: np.ndarray
    hyper: dict[str, AdamHyper]
    step_count: int = 0
    group_steps: dict[str, int] = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParamStore, hyper: dict[str, AdamHyper]) -> "AdamState":
        return cls(np.zeros(len(store)), np.zeros(len(store)), dict(hyper))

    def resize(self, n: int) -> None:
        if n > self.m.size:
            pad = n - self.m.size
            self.m = np.concatenate([self.m, np.zeros(pad)])
            self.v = np.concatenate([self.v, np.zeros(pad)])


def adam_step(
    store: ParamStore, state: AdamState, groups: Iterable[str] | None = None
) -> list[str]:
    """Apply one Adam update to the selected groups.

    Groups whose gradient contains a non-finite entry are left untouched.

    Returns:
        Names of the groups whose step was rejected.
    """
    state.resize(len(store))
    groups = list(state.hyper) if groups is None else list(groups)
    rejected = []
    for group in groups:
        idx = store.indices_of_group(group)
        if idx.size == 0:
            continue
        g = store.grads[idx]
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in group %r, step rejected", group)
            rejected.append(group)
            continue
        hp = state.hyper[group]
        t = state.group_steps.get(group, 0) + 1
        state.group_steps[group] = t
        m = hp.beta1 * state.m[idx] + (1.0 - hp.beta1) * g
        v = hp.beta2 * state.v[idx] + (1.0 - hp.beta2) * g * g
        state.m[idx] = m
        state.v[idx] = v
        m_hat = m / (1.0 - hp.beta1**t)
        v_hat = v / (1.0 - hp.beta2**t)
        if hp.lr != 0.0:
            store.values[idx] -= hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps)
    state.step_count += 1
    return rejected


class GradientCheckError(RuntimeError):
    pass


def gradient_check(
    f: Callable[[ParamStore, bool], float],
    store: ParamStore,
    h: float = 1e-5,
    subset: Sequence[int] | np.ndarray | None = None,
    details: bool = False,
):
    """Compare analytic gradients against central finite differences.

    ``f(store, backward)`` must return the scalar objective and, when
    ``backward`` is true, accumulate its gradient into ``store.grads``.

    Returns:
        The max over ``subset`` of ``|analytic - fd| / max(1, |fd|)``, or
        ``(max_err, errors, analytic, numeric)`` when ``details`` is set.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    idx = np.arange(len(store)) if subset is None else np.asarray(subset, dtype=np.int64)
    store.zero_grads()
    f0 = f(store, True)
    if not np.isfinite(f0):
        raise GradientCheckError("objective is not finite")
    analytic = store.grads[idx].copy()
    numeric = np.empty(idx.size)
    for k, i in enumerate(idx):
        orig = store.values[i]
        store.values[i] = orig + h
        fp = f(store, False)
        store.values[i] = orig - h
        fm = f(store, False)
        store.values[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradientCheckError(f"objective not finite when perturbing index {i}")
        numeric[k] = (fp - fm) / (2.0 * h)
    errors = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    max_err = float(errors.max()) if errors.size else 0.0
    if details:
        return max_err, errors, analytic, numeric
    return max_err


# Checkpoint layout, all little-endian:
#   magic    8s   b"HSLMCKPT"
#   version  u32  1
#   cfg_hash 32s  sha256 digest of the effective config text
#   n        u64  parameter count
#   values   f64[n]
#   group_ids i8[n]
#   step     u64  Adam step_count
#   n_groups u32, then per group:
#       name_len u8, name bytes, lr f64, beta1 f64, beta2 f64, eps f64, group_step u64
#   m        f64[n]
#   v        f64[n]
CHECKPOINT_MAGIC = b"HSLMCKPT"
CHECKPOINT_VERSION = 1


def config_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


def save_checkpoint(path: str | Path, store: ParamStore, state: AdamState, cfg_hash: bytes) -> None:
    if len(cfg_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    state.resize(len(store))
    n = len(store)
    parts = [
        struct.pack("<8sI32sQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg_hash, n),
        store.values.astype("<f8").tobytes(),
        store.group_ids.astype("<i1").tobytes(),
        struct.pack("<QI", state.step_count, len(state.hyper)),
    ]
    for name, hp in state.hyper.items():
        raw = name.encode("ascii")
        parts.append(struct.pack("<B", len(raw)) + raw)
        parts.append(
            struct.pack("<ddddQ", hp.lr, hp.beta1, hp.beta2, hp.eps, state.group_steps.get(name, 0))
        )
    parts.append(state.m[:n].astype("<f8").tobytes())
    parts.append(state.v[:n].astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path, store: ParamStore) -> tuple[AdamState, bytes]:
    """Restore values into ``store`` (layout must match) and return the Adam state."""
    buf = Path(path).read_bytes()
    magic, version, cfg_hash, n = struct.unpack_from("<8sI32sQ", buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if n != len(store):
        raise ValueError(f"{path}: checkpoint has {n} values, model has {len(store)}")
    off = struct.calcsize("<8sI32sQ")
    values = np.frombuffer(buf, "<f8", n, off)
    off += 8 * n
    group_ids = np.frombuffer(buf, "<i1", n, off)
    off += n
    if not np.array_equal(group_ids, store.group_ids):
        raise ValueError(f"{path}: parameter group layout differs from the model")
    step, n_groups = struct.unpack_from("<QI", buf, off)
    off += struct.calcsize("<QI")
    hyper, group_steps = {}, {}
    for _ in range(n_groups):
        (ln,) = struct.unpack_from("<B", buf, off)
        off += 1
        name = buf[off : off + ln].decode("ascii")
        off += ln
        lr, b1, b2, eps, gs = struct.unpack_from("<ddddQ", buf, off)
        off += struct.calcsize("<ddddQ")
        hyper[name] = AdamHyper(lr, b1, b2, eps)
        group_steps[name] = gs
    m = np.frombuffer(buf, "<f8", n, off).astype(np.float64)
    off += 8 * n
    v = np.frombuffer(buf, "<f8", n, off).astype(np.float64)
    store.values[:] = values
    return AdamState(m, v, hyper, step, group_steps), cfg_hash
