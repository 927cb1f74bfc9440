"""Rollout log schema: parsing, validation, serialization and derived quantities.

An episode file is UTF-8 JSON Lines. The first line is a header::

    {"f": 20.0, "success": true, "task_id": "reach-0", "suite_id": "reach",
     "run_tag": "baseline", "d": 3, "k": 3}

and every following line is one step::

    {"t": 1, "p": [x, y, z], "q": [...d], "qdot": [...d], "a": [...k]}

``qdot`` is optional but must then be absent from every step. ``clamped`` is an
optional boolean set by the simulator when joint limits were hit. Floats are
written with ``repr`` so they round-trip to the same binary64 value.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InsufficientLengthError, LogParseError, SchemaError, ValidationError

PLANES = {"xy": (0, 1), "yz": (1, 2), "xz": (0, 2)}
MANIFEST_NAME = "manifest.json"
_HEADER_KEYS = ("f", "success", "task_id", "suite_id", "run_tag", "d", "k")


@dataclass(frozen=True)
class StepRecord:
    t: int
    p: tuple[float, ...]
    q: tuple[float, ...]
    a: tuple[float, ...]
    qdot: tuple[float, ...] | None = None
    clamped: bool = False


def _frozen(arr, ndim_cols=None):
    out = np.array(arr, dtype=np.float64)
    if ndim_cols is not None and out.ndim == 1:
        out = out.reshape(-1, ndim_cols)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class EpisodeLog:
    """One rollout, stored column-wise as read-only ``(T, ·)`` arrays."""

    p: np.ndarray
    q: np.ndarray
    a: np.ndarray
    f: float
    success: bool
    task_id: str = ""
    suite_id: str = ""
    run_tag: str = ""
    qdot: np.ndarray | None = None
    clamped: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise SchemaError(f"p must have shape (T, 3), got {p.shape}")
        if q.ndim != 2 or a.ndim != 2:
            raise SchemaError("q and a must be 2-D (T, d) / (T, k) arrays")
        T = p.shape[0]
        if T < 1:
            raise SchemaError("episode needs at least one step")
        if q.shape[0] != T or a.shape[0] != T:
            raise SchemaError(f"step count mismatch: p={T}, q={q.shape[0]}, a={a.shape[0]}")
        if not isinstance(self.f, (int, float)) or isinstance(self.f, bool):
            raise ValidationError(f"f must be a number, got {self.f!r}")
        if not math.isfinite(self.f) or self.f <= 0:
            raise ValidationError(f"control frequency must be finite and > 0, got {self.f!r}")
        for name, arr in (("p", p), ("q", q), ("a", a)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite value in {name}")
        object.__setattr__(self, "p", _frozen(p))
        object.__setattr__(self, "q", _frozen(q))
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "f", float(self.f))
        object.__setattr__(self, "success", bool(self.success))
        if self.qdot is not None:
            qd = np.asarray(self.qdot, dtype=np.float64)
            if qd.shape != q.shape:
                raise SchemaError(f"qdot shape {qd.shape} does not match q shape {q.shape}")
            if not np.all(np.isfinite(qd)):
                raise ValidationError("non-finite value in qdot")
            object.__setattr__(self, "qdot", _frozen(qd))
        if self.clamped is not None:
            cl = np.asarray(self.clamped, dtype=bool).reshape(-1)
            if cl.shape[0] != T:
                raise SchemaError("clamped flags must have one entry per step")
            cl.setflags(write=False)
            object.__setattr__(self, "clamped", cl)

    @property
    def T(self) -> int:
        return self.p.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]

    @property
    def k(self) -> int:
        return self.a.shape[1]

    @property
    def steps(self) -> list[StepRecord]:
        out = []
        for i in range(self.T):
            out.append(StepRecord(
                t=i + 1,
                p=tuple(self.p[i].tolist()),
                q=tuple(self.q[i].tolist()),
                a=tuple(self.a[i].tolist()),
                qdot=None if self.qdot is None else tuple(self.qdot[i].tolist()),
                clamped=bool(self.clamped[i]) if self.clamped is not None else False,
            ))
        return out

    def replace(self, **changes) -> "EpisodeLog":
        fields = dict(p=self.p, q=self.q, a=self.a, f=self.f, success=self.success,
                      task_id=self.task_id, suite_id=self.suite_id, run_tag=self.run_tag,
                      qdot=self.qdot, clamped=self.clamped, meta=dict(self.meta))
        fields.update(changes)
        return EpisodeLog(**fields)

    def __eq__(self, other):
        if not isinstance(other, EpisodeLog):
            return NotImplemented

        def same(x, y):
            if x is None or y is None:
                return x is None and y is None
            return x.shape == y.shape and bool(np.array_equal(x, y))

        return (
            self.f == other.f and self.success == other.success
            and self.task_id == other.task_id and self.suite_id == other.suite_id
            and self.run_tag == other.run_tag and self.meta == other.meta
            and same(self.p, other.p) and same(self.q, other.q) and same(self.a, other.a)
            and same(self.qdot, other.qdot)
            and same(self._clamp_flags(), other._clamp_flags())
        )

    def _clamp_flags(self):
        if self.clamped is None:
            return np.zeros(self.T, dtype=bool)
        return self.clamped


@dataclass(frozen=True)
class SuiteRun:
    episodes: tuple[EpisodeLog, ...]
    files: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        eps = tuple(self.episodes)
        object.__setattr__(self, "episodes", eps)
        if not eps:
            raise ValidationError("a suite run needs at least one episode")
        keys = {(e.suite_id, e.run_tag) for e in eps}
        if len(keys) != 1:
            raise SchemaError(f"episodes mix suite/run tags: {sorted(keys)}")

    @property
    def N(self) -> int:
        return len(self.episodes)

    @property
    def suite_id(self) -> str:
        return self.episodes[0].suite_id

    @property
    def run_tag(self) -> str:
        return self.episodes[0].run_tag


# -- parsing -----------------------------------------------------------------

def _reject_constant(name):
    raise ValueError(f"non-finite literal {name}")


def _load_line(line, lineno):
    try:
        rec = json.loads(line, parse_constant=_reject_constant)
    except ValueError as exc:
        if "non-finite" in str(exc):
            raise ValidationError(f"line {lineno}: {exc}") from None
        raise LogParseError(f"malformed record ({exc})", line=lineno) from None
    if not isinstance(rec, dict):
        raise LogParseError("record is not a JSON object", line=lineno)
    return rec


def _vector(rec, key, dim, lineno, step, required=True):
    if key not in rec:
        if required:
            raise LogParseError(f"missing field {key!r}", line=lineno)
        return None
    val = rec[key]
    if not isinstance(val, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in val
    ):
        raise LogParseError(f"field {key!r} must be a list of numbers", line=lineno)
    if len(val) != dim:
        raise SchemaError(f"step {step}: {key} has dimension {len(val)}, expected {dim}")
    if not all(math.isfinite(v) for v in val):
        raise ValidationError(f"step {step}: non-finite value in {key}")
    return [float(v) for v in val]


def parse_episode(raw: bytes | str) -> EpisodeLog:
    """Parse and validate one episode log.

    Raises ``LogParseError`` (with line number) for malformed records,
    ``SchemaError`` for dimension/indexing problems and ``ValidationError``
    for out-of-range values.
    """
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise LogParseError(f"not valid UTF-8 ({exc})") from None
    lines = [(i + 1, ln) for i, ln in enumerate(raw.splitlines()) if ln.strip()]
    if not lines:
        raise LogParseError("empty log", line=1)
    lineno, first = lines[0]
    header = _load_line(first, lineno)
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise LogParseError(f"header missing fields {missing}", line=lineno)
    f = header["f"]
    if isinstance(f, bool) or not isinstance(f, (int, float)):
        raise LogParseError("header field 'f' must be a number", line=lineno)
    if not math.isfinite(f) or f <= 0:
        raise ValidationError(f"control frequency must be finite and > 0, got {f!r}")
    d, k = header["d"], header["k"]
    for name, val in (("d", d), ("k", k)):
        if isinstance(val, bool) or not isinstance(val, int) or val < 1:
            raise LogParseError(f"header field {name!r} must be a positive integer", line=lineno)
    if not isinstance(header["success"], bool):
        raise LogParseError("header field 'success' must be a boolean", line=lineno)

    p, q, a, qdot, clamped = [], [], [], [], []
    has_qdot = None
    for step, (lineno, text) in enumerate(lines[1:], start=1):
        rec = _load_line(text, lineno)
        t = rec.get("t")
        if isinstance(t, bool) or not isinstance(t, int):
            raise LogParseError("field 't' must be an integer", line=lineno)
        if t != step:
            raise SchemaError(f"step {step}: timestep index {t} breaks the 1-based sequence")
        p.append(_vector(rec, "p", 3, lineno, step))
        q.append(_vector(rec, "q", d, lineno, step))
        a.append(_vector(rec, "a", k, lineno, step))
        qd = _vector(rec, "qdot", d, lineno, step, required=False)
        if has_qdot is None:
            has_qdot = qd is not None
        elif has_qdot != (qd is not None):
            raise SchemaError(f"step {step}: qdot present on some steps only")
        if qd is not None:
            qdot.append(qd)
        cl = rec.get("clamped", False)
        if not isinstance(cl, bool):
            raise LogParseError("field 'clamped' must be a boolean", line=lineno)
        clamped.append(cl)
    if not p:
        raise SchemaError("episode has no steps")
    return EpisodeLog(
        p=np.array(p), q=np.array(q), a=np.array(a), f=float(f),
        success=header["success"], task_id=str(header["task_id"]),
        suite_id=str(header["suite_id"]), run_tag=str(header["run_tag"]),
        qdot=np.array(qdot) if has_qdot else None,
        clamped=np.array(clamped) if any(clamped) else None,
        meta=header.get("meta", {}) or {},
    )


def serialize_episode(ep: EpisodeLog) -> bytes:
    header = {"f": ep.f, "success": ep.success, "task_id": ep.task_id,
              "suite_id": ep.suite_id, "run_tag": ep.run_tag, "d": ep.d, "k": ep.k}
    if ep.meta:
        header["meta"] = ep.meta
    lines = [json.dumps(header, allow_nan=False)]
    for i in range(ep.T):
        rec = {"t": i + 1, "p": ep.p[i].tolist(), "q": ep.q[i].tolist()}
        if ep.qdot is not None:
            rec["qdot"] = ep.qdot[i].tolist()
        rec["a"] = ep.a[i].tolist()
        if ep.clamped is not None and ep.clamped[i]:
            rec["clamped"] = True
        lines.append(json.dumps(rec, allow_nan=False))
    return ("\n".join(lines) + "\n").encode("utf-8")


# -- derived quantities ---------------------------------------------------------

def derive_velocities(ep: EpisodeLog) -> EpisodeLog:
    """Fill ``qdot`` by forward differences, repeating the last sample.

    Episodes that already carry ``qdot`` are returned unchanged.
    """
    if ep.qdot is not None:
        return ep
    if ep.T < 2:
        raise InsufficientLengthError("deriving velocities needs at least 2 steps")
    qdot = np.empty_like(ep.q)
    qdot[:-1] = ep.f * np.diff(ep.q, axis=0)
    qdot[-1] = qdot[-2]
    return ep.replace(qdot=qdot)


def project_trajectory(ep: EpisodeLog, plane: str) -> list[tuple[float, float]]:
    try:
        i, j = PLANES[plane.lower()]
    except (KeyError, AttributeError):
        raise ValueError(f"unknown plane {plane!r}; expected one of XY, YZ, XZ") from None
    return [(float(u), float(v)) for u, v in ep.p[:, [i, j]]]


# -- suite directories -----------------------------------------------------------

def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_episode(path: str | os.PathLike) -> EpisodeLog:
    return parse_episode(Path(path).read_bytes())


def write_suite(directory: str | os.PathLike, episodes: Sequence[EpisodeLog],
                meta: dict | None = None) -> list[str]:
    """Write episode files plus ``manifest.json`` into an existing directory."""
    directory = Path(directory)
    names = []
    for i, ep in enumerate(episodes):
        name = f"episode_{i:04d}.jsonl"
        (directory / name).write_bytes(serialize_episode(ep))
        names.append(name)
    first = episodes[0] if episodes else None
    manifest = {
        "suite_id": first.suite_id if first else "",
        "run_tag": first.run_tag if first else "",
        "N": len(names),
        "files": names,
    }
    if meta:
        manifest["provenance"] = meta
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return names


def iter_suite_files(directory: str | os.PathLike) -> Iterator[Path]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    files = manifest.get("files", [])
    if manifest.get("N") != len(files):
        raise SchemaError(f"manifest N={manifest.get('N')} but lists {len(files)} files")
    for name in files:
        yield directory / name


def read_suite(directory: str | os.PathLike) -> SuiteRun:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    paths = list(iter_suite_files(directory))
    return SuiteRun(episodes=tuple(read_episode(p) for p in paths),
                    files=tuple(p.name for p in paths),
                    meta=manifest.get("provenance", {}))
