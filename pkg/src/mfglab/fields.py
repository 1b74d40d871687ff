"""Smooth coefficient fields: potentials, terminal costs and drifts.

Fields are written in the compact form used by run configs, e.g.
``"linear:a=[1,0]"`` or ``"quadratic:c=2,center=[0.5]"``, or as dicts with a
``kind`` key.  All evaluators are vectorised over point arrays (m, dim).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np


def _split_params(text):
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch in ",;" and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    if cur.strip():
        parts.append(cur)
    return parts


def parse_spec(spec):
    """Turn ``"kind:k=v,..."`` or a dict into ``(kind, params)``."""
    if isinstance(spec, dict):
        params = dict(spec)
        return params.pop("kind"), params
    if not isinstance(spec, str):
        raise ValueError(f"cannot parse field spec {spec!r}")
    kind, _, rest = spec.partition(":")
    params = {}
    for item in _split_params(rest):
        key, eq, val = item.partition("=")
        if not eq:
            raise ValueError(f"malformed parameter {item!r} in {spec!r}")
        params[key.strip()] = json.loads(val.strip())
    if not re.fullmatch(r"[a-z_]+", kind.strip()):
        raise ValueError(f"malformed field kind in {spec!r}")
    return kind.strip(), params


_SCALAR_KEYS = {"zero": set(), "const": {"c"}, "linear": {"a", "c"}, "quadratic": {"c", "c0", "center"},
                "bump": {"amp", "center", "width"}}
_DRIFT_KEYS = {"zero": set(), "const": {"b"}, "affine": {"b", "A"}}


def _check_keys(kind, params, allowed):
    extra = set(params) - allowed.get(kind, set(params))
    if extra:
        raise ValueError(f"unknown parameter(s) {sorted(extra)} for field kind {kind!r}")


@dataclass(frozen=True)
class ScalarField:
    """phi(x) = c0 + <a, x> + 0.5 * c * |x - center|^2, plus an optional Gaussian bump.

    The bump term is ``amp * exp(-|x - bump_center|^2 / (2 width^2))``.
    """

    c0: float = 0.0
    a: tuple = ()
    c: float = 0.0
    center: tuple = ()
    amp: float = 0.0
    bump_center: tuple = ()
    width: float = 1.0
    label: str = "zero"

    @classmethod
    def from_spec(cls, spec, dim):
        kind, p = parse_spec(spec)
        _check_keys(kind, p, _SCALAR_KEYS)
        zero = (0.0,) * dim
        if kind == "zero":
            return cls(a=zero, center=zero, bump_center=zero, label="zero")
        if kind == "const":
            return cls(c0=float(p.get("c", 0.0)), a=zero, center=zero, bump_center=zero, label=_canon(kind, p))
        if kind == "linear":
            a = tuple(float(v) for v in np.atleast_1d(p.get("a", zero)))
            if len(a) != dim:
                raise ValueError(f"linear field needs a of length {dim}")
            return cls(c0=float(p.get("c", 0.0)), a=a, center=zero, bump_center=zero, label=_canon(kind, p))
        if kind == "quadratic":
            center = tuple(float(v) for v in np.atleast_1d(p.get("center", zero)))
            if len(center) != dim:
                raise ValueError(f"quadratic field needs center of length {dim}")
            return cls(c0=float(p.get("c0", 0.0)), a=zero, c=float(p.get("c", 1.0)), center=center,
                       bump_center=zero, label=_canon(kind, p))
        if kind == "bump":
            center = tuple(float(v) for v in np.atleast_1d(p.get("center", zero)))
            return cls(a=zero, center=zero, amp=float(p.get("amp", 1.0)), bump_center=center,
                       width=float(p.get("width", 0.3)), label=_canon(kind, p))
        raise ValueError(f"unknown scalar field kind {kind!r}")

    def _arrays(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if len(self.a) == 1 else x[None, :]
        return x

    def value(self, x):
        x = self._arrays(x)
        out = self.c0 + x @ np.asarray(self.a)
        if self.c:
            d = x - np.asarray(self.center)
            out = out + 0.5 * self.c * np.sum(d * d, axis=1)
        if self.amp:
            d = x - np.asarray(self.bump_center)
            out = out + self.amp * np.exp(-np.sum(d * d, axis=1) / (2 * self.width**2))
        return out

    def grad(self, x):
        x = self._arrays(x)
        out = np.broadcast_to(np.asarray(self.a), x.shape).copy()
        if self.c:
            out += self.c * (x - np.asarray(self.center))
        if self.amp:
            d = x - np.asarray(self.bump_center)
            e = self.amp * np.exp(-np.sum(d * d, axis=1) / (2 * self.width**2))
            out += -(e / self.width**2)[:, None] * d
        return out

    def hess(self, x):
        x = self._arrays(x)
        m, n = x.shape
        out = np.zeros((m, n, n))
        if self.c:
            out += self.c * np.eye(n)
        if self.amp:
            d = x - np.asarray(self.bump_center)
            e = self.amp * np.exp(-np.sum(d * d, axis=1) / (2 * self.width**2))
            w2 = self.width**2
            out += (e / w2)[:, None, None] * (d[:, :, None] * d[:, None, :] / w2 - np.eye(n))
        return out

    def is_zero(self):
        return self.c0 == 0 and not any(self.a) and self.c == 0 and self.amp == 0


@dataclass(frozen=True)
class AffineVectorField:
    """b(x) = offset + matrix @ x."""

    offset: tuple
    matrix: tuple
    label: str = "zero"

    @classmethod
    def from_spec(cls, spec, dim):
        kind, p = parse_spec(spec)
        _check_keys(kind, p, _DRIFT_KEYS)
        if kind == "zero":
            return cls((0.0,) * dim, tuple(tuple(0.0 for _ in range(dim)) for _ in range(dim)), "zero")
        if kind == "const":
            v = tuple(float(x) for x in np.atleast_1d(p["b"]))
            if len(v) != dim:
                raise ValueError(f"drift needs b of length {dim}")
            return cls(v, tuple(tuple(0.0 for _ in range(dim)) for _ in range(dim)), _canon(kind, p))
        if kind == "affine":
            v = tuple(float(x) for x in np.atleast_1d(p.get("b", [0.0] * dim)))
            A = np.atleast_2d(np.asarray(p["A"], dtype=float))
            if A.shape != (dim, dim) or len(v) != dim:
                raise ValueError("affine drift shape mismatch")
            return cls(v, tuple(map(tuple, A)), _canon(kind, p))
        raise ValueError(f"unknown drift kind {kind!r}")

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.offset) + x @ np.asarray(self.matrix).T

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.matrix), (x.shape[0],) + np.asarray(self.matrix).shape)

    def is_zero(self):
        return not any(self.offset) and not np.any(self.matrix)


def _canon(kind, params):
    if not params:
        return kind
    body = ",".join(f"{k}={json.dumps(params[k], separators=(',', ':'))}" for k in sorted(params))
    return f"{kind}:{body}"
