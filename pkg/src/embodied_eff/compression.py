"""Weight pruning, fake quantization, token pruning and DCT action-chunk coding.

Model files are a little-endian binary64 payload plus a plain-text index at
``<path>.index``::

    # embodied-eff model v1
    meta {"kind": "mlp_policy", ...}
    tensor layer0.W 32x6 0 192

Each ``tensor`` line gives name, shape, element offset and element count.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import EmbodiedError, ValidationError
from .trajectory import atomic_write_bytes

INDEX_MAGIC = "# embodied-eff model v1"


@dataclass(frozen=True, eq=False)
class WeightTensor:
    name: str
    values: np.ndarray
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        shape = tuple(int(s) for s in self.shape) if self.shape else (vals.size,)
        if math.prod(shape) != vals.size:
            raise ValidationError(f"{self.name}: shape {shape} does not hold {vals.size} values")
        if not np.all(np.isfinite(vals)):
            raise ValidationError(f"{self.name}: non-finite weight")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "shape", shape)

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    def with_values(self, values) -> "WeightTensor":
        return WeightTensor(self.name, np.asarray(values).reshape(-1), self.shape)

    def __eq__(self, other):
        if not isinstance(other, WeightTensor):
            return NotImplemented
        return (self.name == other.name and self.shape == other.shape
                and bool(np.array_equal(self.values, other.values)))


@dataclass(frozen=True)
class PruneSpec:
    ratio: float
    scope: str = "per_tensor"

    def __post_init__(self):
        if not (0.0 <= self.ratio < 1.0):
            raise ValidationError(f"pruning ratio must lie in [0, 1), got {self.ratio}")
        if self.scope not in ("per_tensor", "global"):
            raise ValidationError(f"unknown pruning scope {self.scope!r}")


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 8
    mode: str = "symmetric_per_tensor"

    def __post_init__(self):
        if isinstance(self.bits, bool) or not isinstance(self.bits, int) or not 2 <= self.bits <= 16:
            raise ValidationError(f"bits must be an integer in [2, 16], got {self.bits!r}")
        if self.mode != "symmetric_per_tensor":
            raise ValidationError(f"unsupported quantization mode {self.mode!r}")


def _floor_fraction(ratio: float, n: int) -> int:
    # decimal repr so that e.g. 0.3 * 10 counts as exactly 3
    return int((Decimal(repr(float(ratio))) * n).to_integral_value(rounding="ROUND_FLOOR"))


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


# -- magnitude pruning ---------------------------------------------------------------

def _prune_flat(values: np.ndarray, ratio: float) -> np.ndarray:
    n = values.size
    k = _floor_fraction(ratio, n)
    mask = np.ones(n, dtype=bool)
    if k:
        # stable sort: among equal magnitudes the lower flat index goes first
        order = np.argsort(np.abs(values), kind="stable")
        mask[order[:k]] = False
    return mask


def magnitude_prune(weights, spec: PruneSpec):
    """Zero the ``floor(ratio * n)`` smallest-magnitude entries.

    ``weights`` is a single ``WeightTensor`` or a sequence of them. Returns the
    pruned weights and the keep-mask(s) in the same structure.
    """
    single = isinstance(weights, WeightTensor)
    tensors = [weights] if single else list(weights)
    if spec.scope == "per_tensor" or single:
        masks = [_prune_flat(t.values, spec.ratio) for t in tensors]
    else:
        pooled = np.concatenate([t.values for t in tensors]) if tensors else np.zeros(0)
        flat = _prune_flat(pooled, spec.ratio)
        bounds = np.cumsum([0] + [t.values.size for t in tensors])
        masks = [flat[bounds[i]:bounds[i + 1]] for i in range(len(tensors))]
    out = [t.with_values(np.where(m, t.values, 0.0)) for t, m in zip(tensors, masks)]
    for m in masks:
        m.setflags(write=False)
    if single:
        return out[0], masks[0]
    return out, masks


# -- fake quantization ----------------------------------------------------------------

def quant_scale(values: np.ndarray, bits: int) -> float:
    return float(np.max(np.abs(values))) / (2 ** (bits - 1) - 1) if values.size else 0.0


def fake_quantize(w: WeightTensor, spec: QuantSpec) -> WeightTensor:
    """Symmetric per-tensor round-to-nearest quantize, then dequantize."""
    s = quant_scale(w.values, spec.bits)
    if s == 0.0:
        return w
    qmax = 2 ** (spec.bits - 1) - 1
    q = np.clip(round_half_away(w.values / s), -qmax, qmax)
    return w.with_values(q * s)


# -- token pruning ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TokenSet:
    embeddings: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64)
        if emb.ndim == 1:
            emb = emb[:, None]
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise ValidationError("token embeddings must be an (n, e) matrix with n >= 1")
        if not np.all(np.isfinite(emb)):
            raise ValidationError("non-finite token embedding")
        object.__setattr__(self, "embeddings", emb)
        if self.scores is not None:
            sc = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if sc.shape[0] != emb.shape[0]:
                raise ValidationError("need one score per token")
            object.__setattr__(self, "scores", sc)

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]


def norm_scorer(tokens: TokenSet) -> np.ndarray:
    return np.linalg.norm(tokens.embeddings, axis=1)


def tokens_kept(n: int, ratio: float) -> int:
    return n - _floor_fraction(ratio, n)


def token_prune(tokens: TokenSet, ratio: float,
                scorer: Callable[[TokenSet], np.ndarray] | None = None
                ) -> tuple[TokenSet, list[int]]:
    """Keep the ``ceil((1 - ratio) * n)`` highest-scoring tokens in original order.

    Uses ``tokens.scores`` when present, else ``scorer`` (default: L2 norm).
    Ties favour the earlier token.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValidationError(f"token pruning ratio must lie in [0, 1), got {ratio}")
    if tokens.scores is not None:
        scores = tokens.scores
    else:
        scores = np.asarray((scorer or norm_scorer)(tokens), dtype=np.float64)
    m = tokens_kept(tokens.n, ratio)
    order = np.argsort(-scores, kind="stable")
    kept = sorted(order[:m].tolist())
    sub_scores = None if tokens.scores is None else tokens.scores[kept]
    return TokenSet(tokens.embeddings[kept], sub_scores), kept


# -- DCT codec -----------------------------------------------------------------------------------

_DCT_CACHE: dict[int, np.ndarray] = {}


def dct_matrix(H: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` with ``c = C @ x``."""
    if H < 1:
        raise ValidationError("DCT length must be >= 1")
    C = _DCT_CACHE.get(H)
    if C is None:
        n = np.arange(H)
        C = np.cos(np.pi * (n[None, :] + 0.5) * n[:, None] / H) * math.sqrt(2.0 / H)
        C[0] /= math.sqrt(2.0)
        C.setflags(write=False)
        _DCT_CACHE[H] = C
    return C


def dct_forward(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return dct_matrix(x.shape[0]) @ x


def dct_inverse(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return dct_matrix(c.shape[0]).T @ c


@dataclass(frozen=True, eq=False)
class ActionChunk:
    actions: np.ndarray
    f: float = 1.0

    def __post_init__(self):
        a = np.array(self.actions, dtype=np.float64)
        if a.ndim == 1:
            a = a[:, None]
        if a.ndim != 2 or a.shape[0] < 1:
            raise ValidationError("action chunk must be an (H, k) matrix with H >= 1")
        if not np.all(np.isfinite(a)):
            raise ValidationError("non-finite action")
        object.__setattr__(self, "actions", a)

    @property
    def H(self) -> int:
        return self.actions.shape[0]

    @property
    def k(self) -> int:
        return self.actions.shape[1]


@dataclass(frozen=True, eq=False)
class CompressedChunk:
    """Integer DCT coefficients, ``coeffs[j]`` for action dimension j (length keep)."""

    H: int
    keep: int
    q_step: float
    f: float
    coeffs: np.ndarray  # (k, keep) int64

    _HEADER = struct.Struct("<IIIdd")

    def to_bytes(self) -> bytes:
        k = self.coeffs.shape[0]
        head = self._HEADER.pack(self.H, k, self.keep, self.q_step, self.f)
        return head + np.ascontiguousarray(self.coeffs, dtype="<i8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedChunk":
        H, k, keep, q_step, f = cls._HEADER.unpack_from(data)
        body = np.frombuffer(data, dtype="<i8", offset=cls._HEADER.size)
        return cls(H=H, keep=keep, q_step=q_step, f=f, coeffs=body.reshape(k, keep).copy())


def compress_action_chunk(chunk: ActionChunk, q_step: float, keep: int | None = None
                          ) -> CompressedChunk:
    """Per-dimension DCT, quantize to multiples of ``q_step``, keep low frequencies."""
    if not (math.isfinite(q_step) and q_step > 0):
        raise ValidationError(f"q_step must be > 0, got {q_step!r}")
    H = chunk.H
    keep = H if keep is None else int(keep)
    if not 1 <= keep <= H:
        raise ValidationError(f"keep must lie in [1, {H}], got {keep}")
    coeffs = dct_matrix(H) @ chunk.actions  # (H, k)
    q = round_half_away(coeffs[:keep] / q_step)
    if np.any(np.abs(q) > 2**62):
        raise ValidationError("q_step too small for the coefficient range")
    return CompressedChunk(H=H, keep=keep, q_step=float(q_step), f=chunk.f,
                           coeffs=q.T.astype(np.int64))


def reconstruct_action_chunk(rep: CompressedChunk) -> ActionChunk:
    full = np.zeros((rep.H, rep.coeffs.shape[0]))
    full[:rep.keep] = rep.coeffs.T.astype(np.float64) * rep.q_step
    return ActionChunk(dct_matrix(rep.H).T @ full, f=rep.f)


def codec_roundtrip(actions: np.ndarray, q_step: float, keep: int | None = None,
                    f: float = 1.0) -> np.ndarray:
    return reconstruct_action_chunk(
        compress_action_chunk(ActionChunk(actions, f), q_step, keep)).actions


# -- model file ------------------------------------------------------------------------------------

class ModelFormatError(EmbodiedError):
    pass


@dataclass
class ModelFile:
    tensors: list[WeightTensor]
    meta: dict = field(default_factory=dict)

    def tensor(self, name: str) -> WeightTensor:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)


def index_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".index")


def model_to_bytes(model: ModelFile) -> tuple[bytes, bytes]:
    lines = [INDEX_MAGIC, "meta " + json.dumps(model.meta, sort_keys=True, allow_nan=False)]
    offset = 0
    chunks = []
    for t in model.tensors:
        if not t.name or any(ch.isspace() for ch in t.name):
            raise ModelFormatError(f"tensor name {t.name!r} must be non-empty without spaces")
        shape = "x".join(str(s) for s in t.shape)
        lines.append(f"tensor {t.name} {shape} {offset} {t.values.size}")
        chunks.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
        offset += t.values.size
    return b"".join(chunks), ("\n".join(lines) + "\n").encode("utf-8")


def save_model(path, model: ModelFile) -> None:
    payload, index = model_to_bytes(model)
    atomic_write_bytes(path, payload)
    atomic_write_bytes(index_path(path), index)


def load_model(path) -> ModelFile:
    path = Path(path)
    try:
        index = index_path(path).read_text(encoding="utf-8").splitlines()
        payload = path.read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model {path}: {exc}") from None
    if not index or index[0].strip() != INDEX_MAGIC:
        raise ModelFormatError(f"{path}: missing model index header")
    data = np.frombuffer(payload, dtype="<f8")
    meta, tensors = {}, []
    for n, line in enumerate(index[1:], start=2):
        if not line.strip():
            continue
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            try:
                name, shape, off, count = rest.split()
                shape_t = tuple(int(s) for s in shape.split("x"))
                off, count = int(off), int(count)
            except ValueError:
                raise ModelFormatError(f"index line {n}: malformed tensor entry") from None
            if off + count > data.size:
                raise ModelFormatError(f"index line {n}: tensor {name} exceeds payload")
            tensors.append(WeightTensor(name, data[off:off + count].copy(), shape_t))
        else:
            raise ModelFormatError(f"index line {n}: unknown record {kind!r}")
    return ModelFile(tensors=tensors, meta=meta)


def parse_codec_spec(text: str) -> tuple[int | None, float]:
    """Parse ``keep=K,qstep=S`` (``keep=all`` keeps every coefficient)."""
    parts = dict(item.split("=", 1) for item in text.split(",") if item)
    try:
        keep_s = parts.pop("keep", "all")
        keep = None if keep_s == "all" else int(keep_s)
        qstep = float(parts.pop("qstep"))
    except (KeyError, ValueError):
        raise ValidationError(f"action codec spec must look like keep=K,qstep=S, got {text!r}") from None
    if parts:
        raise ValidationError(f"unknown action codec fields {sorted(parts)}")
    if not qstep > 0:
        raise ValidationError("qstep must be > 0")
    return keep, qstep


def prune_model(model: ModelFile, spec: PruneSpec, include_biases: bool = False) -> ModelFile:
    """Prune weight matrices (names ending in ``.W``); biases are left alone by default."""
    sel = [i for i, t in enumerate(model.tensors) if include_biases or t.name.endswith(".W")]
    pruned, _ = magnitude_prune([model.tensors[i] for i in sel], spec)
    tensors = list(model.tensors)
    for i, t in zip(sel, pruned):
        tensors[i] = t
    return ModelFile(tensors=tensors, meta=dict(model.meta))


def quantize_model(model: ModelFile, spec: QuantSpec) -> ModelFile:
    return ModelFile(tensors=[fake_quantize(t, spec) for t in model.tensors], meta=dict(model.meta))


def append_provenance(meta: dict, record: dict) -> dict:
    meta = dict(meta)
    meta["compression"] = list(meta.get("compression", [])) + [record]
    return meta


def inference_options(meta: dict) -> dict:
    return dict(meta.get("inference", {}))


def with_inference_option(model: ModelFile, key: str, value) -> ModelFile:
    meta = dict(model.meta)
    opts = dict(meta.get("inference", {}))
    opts[key] = value
    meta["inference"] = opts
    return ModelFile(tensors=list(model.tensors), meta=meta)


def tensors_by_name(tensors: Sequence[WeightTensor]) -> dict[str, WeightTensor]:
    return {t.name: t for t in tensors}
