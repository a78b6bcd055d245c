"""Network layers and assembly.

Two kinds of spline layer coexist:

* ``KANLayer`` -- one spline per edge (d_in * d_out coefficient sets)
  sharing a single fixed knot grid, plus separate spline/shortcut
  combination weights A_b and A_s.
* ``FRKANLayer`` -- inputs are partitioned into h contiguous groups, each
  group owning one coefficient set and one learnable knot shift; a single
  weight matrix A multiplies spline-plus-shortcut jointly.

Every layer exposes two forward paths that must agree numerically:
``tape_forward`` records scalars on an autodiff tape (used for training
gradients) and ``forward_batch`` evaluates a whole sample matrix with
numpy (used for metrics, scanning and export; carries no gradients).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .splines import (
    KnotVector,
    SplineGroup,
    basis_matrix,
    basis_window_on_tape,
    init_shift,
    make_uniform_grid,
)

CHECKPOINT_SCHEMA = 1


class BadArchitecture(Exception):
    pass


class CorruptCheckpoint(Exception):
    pass


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _spline_sum_on_tape(tape, coef_ids_row, bases) -> int | None:
    acc = None
    for j in sorted(bases):
        term = tape.mul(coef_ids_row[j], bases[j])
        acc = term if acc is None else tape.add(acc, term)
    return acc


class LayerNorm:
    """Per-sample normalization with affine rescale; eps keeps the
    normalized variance within 1e-8 of 1 for unit-scale inputs."""

    kind = "ln"
    eps = 1e-8

    def __init__(self, dim: int):
        if dim < 1:
            raise BadArchitecture(f"layernorm width must be positive, got {dim}")
        self.d_in = self.d_out = dim
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)

    def param_arrays(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def param_items(self):
        return {"norm_gamma": self.d_in, "norm_beta": self.d_in}

    def forward_batch(self, X):
        mu = X.mean(axis=1, keepdims=True)
        diff = X - mu
        var = (diff * diff).mean(axis=1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + self.eps)
        return self.gamma * (diff * rstd) + self.beta

    def prepare_tape(self, tape, bind):
        return None

    def tape_forward(self, tape, bind, cache, xs):
        d = len(xs)
        inv_d = tape.constant(1.0 / d)
        acc = xs[0]
        for x in xs[1:]:
            acc = tape.add(acc, x)
        mu = tape.mul(acc, inv_d)
        diffs = [tape.sub(x, mu) for x in xs]
        sq = None
        for dnode in diffs:
            term = tape.mul(dnode, dnode)
            sq = term if sq is None else tape.add(sq, term)
        var = tape.mul(sq, inv_d)
        rstd = tape.div(tape.constant(1.0), tape.sqrt(tape.add(var, tape.constant(self.eps))))
        gamma, beta = bind["gamma"], bind["beta"]
        return [tape.add(tape.mul(gamma[i], tape.mul(diffs[i], rstd)), beta[i])
                for i in range(d)]


class KANLayer:
    """Per-edge learnable splines over one shared fixed grid plus a
    weighted SiLU shortcut."""

    kind = "kan"

    def __init__(self, d_in, d_out, kv: KnotVector, coefficients, A_b, A_s,
                 silu_path: bool = True):
        if d_in < 1 or d_out < 1:
            raise BadArchitecture(f"layer dims must be positive, got {d_in}x{d_out}")
        self.d_in, self.d_out = d_in, d_out
        self.kv = kv
        self.coefficients = np.asarray(coefficients, dtype=float)
        self.A_b = np.asarray(A_b, dtype=float)
        self.A_s = np.asarray(A_s, dtype=float)
        self.silu_path = silu_path
        nb = kv.n_bases
        if self.coefficients.shape != (d_in, d_out, nb):
            raise BadArchitecture(f"coefficients must be {(d_in, d_out, nb)}")
        if self.A_b.shape != (d_in, d_out) or self.A_s.shape != (d_in, d_out):
            raise BadArchitecture(f"A_b/A_s must be {(d_in, d_out)}")

    def param_arrays(self):
        return [("A_b", self.A_b), ("A_s", self.A_s),
                ("coefficients", self.coefficients)]

    def param_items(self):
        nb = self.kv.n_bases
        return {
            "A_b": self.d_in * self.d_out,
            "A_s": self.d_in * self.d_out,
            "coefficients": self.d_in * self.d_out * nb,
            # the combined spline-plus-weight convention counts (G+K+1) per edge
            "combined_spline_weight_estimate": self.d_in * self.d_out * (nb + 1),
        }

    def spline_groups(self):
        return [SplineGroup(self.kv, self.coefficients[i, o])
                for i in range(self.d_in) for o in range(self.d_out)]

    def penalty_coef_ids(self, bind):
        return [bind["coefficients"][i][o]
                for i in range(self.d_in) for o in range(self.d_out)]

    def forward_batch(self, X):
        knots = self.kv.effective_knots()
        N = X.shape[0]
        B = basis_matrix(X.ravel(order="F"), knots, self.kv.K)
        B = B.reshape(self.d_in, N, self.kv.n_bases)  # (i, n, b)
        out = np.einsum("inb,iob->no", B, self.coefficients * self.A_b[:, :, None])
        if self.silu_path:
            out = out + _silu(X) @ self.A_s
        return out

    def prepare_tape(self, tape, bind):
        return self.kv.tape_knots(tape, None)

    def tape_forward(self, tape, bind, cache, xs):
        knot_ids, knot_vals = cache
        K = self.kv.K
        coef = bind["coefficients"]
        A_b, A_s = bind["A_b"], bind["A_s"]
        outs = [None] * self.d_out
        for i, x_id in enumerate(xs):
            win = basis_window_on_tape(tape, knot_ids, knot_vals, K, x_id)
            bases = win[1] if win is not None else None
            silu_id = tape.silu(x_id) if self.silu_path else None
            coef_i, A_b_i = coef[i], A_b[i]
            A_s_i = A_s[i]
            for o in range(self.d_out):
                term = None
                if bases is not None:
                    s = _spline_sum_on_tape(tape, coef_i[o], bases)
                    if s is not None:
                        term = tape.mul(A_b_i[o], s)
                if silu_id is not None:
                    t2 = tape.mul(A_s_i[o], silu_id)
                    term = t2 if term is None else tape.add(term, t2)
                if term is not None:
                    outs[o] = term if outs[o] is None else tape.add(outs[o], term)
        return [tape.constant(0.0) if t is None else t for t in outs]


class FRKANLayer:
    """Grouped free-knot splines with one shared combination weight.

    Input i belongs to group floor(i * h / d_in); the group's coefficients
    and (sorted) shifted knots are shared by every input in the block.
    """

    kind = "frkan"

    def __init__(self, d_in, d_out, h, a, b, G, K, coefficients, shifts, A,
                 silu_path: bool = True):
        if d_in < 1 or d_out < 1:
            raise BadArchitecture(f"layer dims must be positive, got {d_in}x{d_out}")
        if not 1 <= h <= d_in:
            raise BadArchitecture(f"group count h={h} must be in [1, d_in={d_in}]")
        self.d_in, self.d_out, self.h = d_in, d_out, h
        self.a, self.b, self.G, self.K = float(a), float(b), int(G), int(K)
        self.coefficients = np.asarray(coefficients, dtype=float)
        self.shifts = np.asarray(shifts, dtype=float)
        self.A = np.asarray(A, dtype=float)
        self.silu_path = silu_path
        nb = G + K
        if self.coefficients.shape != (h, nb):
            raise BadArchitecture(f"coefficients must be {(h, nb)}")
        if self.shifts.shape != (h, G + 1):
            raise BadArchitecture(f"shifts must be {(h, G + 1)}")
        if self.A.shape != (d_in, d_out):
            raise BadArchitecture(f"A must be {(d_in, d_out)}")

    def group_of(self, i: int) -> int:
        return i * self.h // self.d_in

    def group_kv(self, g: int) -> KnotVector:
        return KnotVector(self.a, self.b, self.G, self.K, self.shifts[g].copy())

    def param_arrays(self):
        return [("A", self.A), ("coefficients", self.coefficients),
                ("shifts", self.shifts)]

    def param_items(self):
        return {
            "A": self.d_in * self.d_out,
            "coefficients": self.h * (self.G + self.K),
            "shifts": self.h * (self.G + 1),
        }

    def spline_groups(self):
        return [SplineGroup(self.group_kv(g), self.coefficients[g])
                for g in range(self.h)]

    def penalty_coef_ids(self, bind):
        return [bind["coefficients"][g] for g in range(self.h)]

    def forward_batch(self, X):
        N = X.shape[0]
        pre = np.empty_like(X, dtype=float)
        for g in range(self.h):
            cols = [i for i in range(self.d_in) if self.group_of(i) == g]
            knots = self.group_kv(g).effective_knots()
            B = basis_matrix(X[:, cols].ravel(order="F"), knots, self.K)
            s = (B @ self.coefficients[g]).reshape(len(cols), N).T
            pre[:, cols] = s
        if self.silu_path:
            pre = pre + _silu(X)
        return pre @ self.A

    def prepare_tape(self, tape, bind):
        cache = []
        for g in range(self.h):
            kv = self.group_kv(g)
            cache.append(kv.tape_knots(tape, bind["shifts"][g]))
        return cache

    def tape_forward(self, tape, bind, cache, xs):
        coef = bind["coefficients"]
        A = bind["A"]
        pre = []
        for i, x_id in enumerate(xs):
            g = self.group_of(i)
            knot_ids, knot_vals = cache[g]
            win = basis_window_on_tape(tape, knot_ids, knot_vals, self.K, x_id)
            s = _spline_sum_on_tape(tape, coef[g], win[1]) if win is not None else None
            if self.silu_path:
                silu_id = tape.silu(x_id)
                s = silu_id if s is None else tape.add(s, silu_id)
            pre.append(s)
        outs = [None] * self.d_out
        for i, p in enumerate(pre):
            if p is None:
                continue
            A_i = A[i]
            for o in range(self.d_out):
                term = tape.mul(A_i[o], p)
                outs[o] = term if outs[o] is None else tape.add(outs[o], term)
        return [tape.constant(0.0) if t is None else t for t in outs]


class MLPLayer:
    """Affine map with an optional ReLU; the piecewise-linear baseline."""

    kind = "mlp"

    def __init__(self, W, bias, activation="relu"):
        self.W = np.asarray(W, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        if self.W.ndim != 2 or self.bias.shape != (self.W.shape[1],):
            raise BadArchitecture(f"W/bias shapes inconsistent: {self.W.shape}, {self.bias.shape}")
        if activation not in ("relu", "identity"):
            raise BadArchitecture(f"unknown activation {activation!r}")
        self.d_in, self.d_out = self.W.shape
        self.activation = activation

    def param_arrays(self):
        return [("W", self.W), ("bias", self.bias)]

    def param_items(self):
        return {"W": self.d_in * self.d_out, "bias": self.d_out}

    def forward_batch(self, X):
        Z = X @ self.W + self.bias
        if self.activation == "relu":
            return np.maximum(Z, 0.0)
        return Z

    def prepare_tape(self, tape, bind):
        return None

    def tape_forward(self, tape, bind, cache, xs):
        W, bias = bind["W"], bind["bias"]
        outs = []
        for o in range(self.d_out):
            acc = bias[o]
            for i, x_id in enumerate(xs):
                acc = tape.add(acc, tape.mul(W[i][o], x_id))
            outs.append(acc)
        if self.activation == "relu":
            zero = tape.constant(0.0)
            outs = [tape.maximum(z, zero) for z in outs]
        return outs


SPLINE_KINDS = ("kan", "frkan")


@dataclass
class TapeBinding:
    """Node-id mirrors of every parameter array, plus per-layer caches."""

    n_params: int
    per_module: list
    caches: list


class Network:
    """An ordered stack of modules with compatible dimensions."""

    def __init__(self, modules):
        if not modules:
            raise BadArchitecture("network needs at least one layer")
        for prev, nxt in zip(modules, modules[1:]):
            if prev.d_out != nxt.d_in:
                raise BadArchitecture(
                    f"dimension mismatch: {prev.kind}:{prev.d_out} -> {nxt.kind}:{nxt.d_in}")
        self.modules = modules

    @property
    def d_in(self):
        return self.modules[0].d_in

    @property
    def d_out(self):
        return self.modules[-1].d_out

    @property
    def descriptor(self) -> str:
        parts = [f"in:{self.d_in}"]
        for m in self.modules:
            parts.append("ln" if m.kind == "ln" else f"{m.kind}:{m.d_out}")
        return " -> ".join(parts)

    def spline_layers(self):
        return [m for m in self.modules if m.kind in SPLINE_KINDS]

    def spline_groups(self):
        out = []
        for m in self.spline_layers():
            out.extend(m.spline_groups())
        return out

    def assert_knots_sorted(self):
        for m in self.spline_layers():
            if m.kind == "frkan":
                for g in range(m.h):
                    m.group_kv(g).assert_sorted()
            else:
                m.kv.assert_sorted()

    # -- parameter plumbing ------------------------------------------------

    def param_arrays(self):
        for m in self.modules:
            for name, arr in m.param_arrays():
                yield m, name, arr

    def n_params(self) -> int:
        return sum(arr.size for _, _, arr in self.param_arrays())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, _, arr in self.param_arrays()])

    def set_flat(self, flat: np.ndarray):
        off = 0
        for _, _, arr in self.param_arrays():
            arr.flat[:] = flat[off:off + arr.size]
            off += arr.size
        if off != flat.size:
            raise BadArchitecture(f"flat vector has {flat.size} entries, expected {off}")

    def bind_tape(self, tape: Tape) -> TapeBinding:
        flat = self.get_flat()
        tape.parameters_from(flat)
        per_module = []
        off = 0
        for m in self.modules:
            d = {}
            for name, arr in m.param_arrays():
                ids = np.arange(off, off + arr.size).reshape(arr.shape)
                d[name] = ids.tolist() if arr.ndim > 0 else int(ids)
                off += arr.size
            per_module.append(d)
        caches = [m.prepare_tape(tape, b) for m, b in zip(self.modules, per_module)]
        return TapeBinding(flat.size, per_module, caches)

    # -- forward paths -------------------------------------------------------

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        for m in self.modules:
            X = m.forward_batch(X)
        return X

    def tape_forward(self, tape: Tape, tb: TapeBinding, x_row) -> list:
        xs = [tape.constant(v) for v in x_row]
        for m, bind, cache in zip(self.modules, tb.per_module, tb.caches):
            xs = m.tape_forward(tape, bind, cache, xs)
        return xs


# -- construction --------------------------------------------------------------


@dataclass
class GridConfig:
    """Spline grid settings shared by every spline layer of a network."""

    G: int = 20
    K: int = 3
    a: float = -10.0
    b: float = 10.0
    h: int | None = None  # None: ceil(d_in / 4) per layer
    Z: float = 8.0

    def groups_for(self, d_in: int) -> int:
        h = self.h if self.h is not None else -(-d_in // 4)
        return max(1, min(h, d_in))


def parse_descriptor(desc: str):
    """Parse ``in:2 -> frkan:64 -> out:1`` into (d_in, [tokens]).

    Tokens are ``("ln",)`` or ``(kind, width)``.  A trailing ``out:<d>``
    produces a final layer of the most recent kind (mlp when none).
    """
    parts = [p.strip() for p in desc.replace("→", "->").split("->")]
    if not parts or not parts[0].startswith("in:"):
        raise BadArchitecture(f"descriptor must start with 'in:<d>': {desc!r}")

    def _width(token, label):
        try:
            w = int(token)
        except ValueError:
            raise BadArchitecture(f"bad width in {label!r}") from None
        if w < 1:
            raise BadArchitecture(f"width must be positive in {label!r}")
        return w

    d_in = _width(parts[0][3:], parts[0])
    tokens = []
    last_kind = "mlp"
    for idx, part in enumerate(parts[1:]):
        if part == "ln":
            tokens.append(("ln",))
            continue
        if ":" not in part:
            raise BadArchitecture(f"bad descriptor token {part!r}")
        kind, _, w = part.partition(":")
        if kind == "out":
            if idx != len(parts) - 2:
                raise BadArchitecture("'out:' is only allowed as the final token")
            tokens.append((last_kind, _width(w, part)))
        elif kind in ("kan", "frkan", "mlp"):
            tokens.append((kind, _width(w, part)))
            last_kind = kind
        else:
            raise BadArchitecture(f"unknown layer kind {kind!r}")
    if not any(len(t) == 2 for t in tokens):
        raise BadArchitecture(f"descriptor has no layers: {desc!r}")
    return d_in, tokens


def init_network(descriptor: str, grid: GridConfig | None = None, seed: int = 0,
                 silu: bool = True, layernorm: str = "explicit") -> Network:
    """Build and initialize a network from its descriptor.

    Deterministic in ``seed``.  Coefficients start near zero
    (N(0, 0.1/sqrt(G+K))) so the SiLU shortcut dominates early training;
    combination weights use uniform fan-in scaling; knot shifts start
    uniform inside +-(b-a)/(Z*G).  ``layernorm="auto"`` inserts a
    normalization before each spline layer with at least 2 inputs.
    """
    grid = grid or GridConfig()
    if layernorm not in ("explicit", "auto", "off"):
        raise BadArchitecture(f"unknown layernorm mode {layernorm!r}")
    d_in, tokens = parse_descriptor(descriptor)
    rng = np.random.default_rng(seed)
    modules = []
    d = d_in
    for tok in tokens:
        if tok == ("ln",):
            if layernorm != "off":
                modules.append(LayerNorm(d))
            continue
        kind, width = tok
        # hidden spline layers get a norm; the input layer does not, and
        # neither do narrow ones -- per-sample normalization keeps only
        # d-2 dimensions, so at d=2 nothing but sign(x1-x2) survives
        if layernorm == "auto" and kind in SPLINE_KINDS and d >= 4 and modules:
            modules.append(LayerNorm(d))
        if kind == "mlp":
            W = rng.uniform(-1, 1, size=(d, width)) / np.sqrt(d)
            modules.append(MLPLayer(W, np.zeros(width), activation="relu"))
        elif kind == "kan":
            kv = make_uniform_grid(grid.a, grid.b, grid.G, grid.K)
            coef = rng.normal(size=(d, width, kv.n_bases)) * (0.1 / np.sqrt(kv.n_bases))
            A_b = rng.uniform(-1, 1, size=(d, width)) / np.sqrt(d)
            A_s = rng.uniform(-1, 1, size=(d, width)) / np.sqrt(d)
            modules.append(KANLayer(d, width, kv, coef, A_b, A_s, silu_path=silu))
        else:
            h = grid.groups_for(d)
            nb = grid.G + grid.K
            coef = rng.normal(size=(h, nb)) * (0.1 / np.sqrt(nb))
            kv = make_uniform_grid(grid.a, grid.b, grid.G, grid.K)
            half = (grid.b - grid.a) / (grid.Z * grid.G)
            shifts = half * rng.uniform(-1.0, 1.0, size=(h, grid.G + 1))
            A = rng.uniform(-1, 1, size=(d, width)) / np.sqrt(d)
            modules.append(FRKANLayer(d, width, h, grid.a, grid.b, grid.G, grid.K,
                                      coef, shifts, A, silu_path=silu))
        d = width
    net = Network(modules)
    if net.modules[-1].kind == "mlp":
        net.modules[-1].activation = "identity"
    return net


def param_count(net: Network) -> dict:
    """Itemized parameter counts per layer plus class totals."""
    layers = []
    totals = {}
    for m in net.modules:
        items = m.param_items()
        entry = {"kind": m.kind, "d_in": m.d_in, "d_out": m.d_out, **items}
        counted = {k: v for k, v in items.items() if not k.endswith("_estimate")}
        entry["total"] = sum(counted.values())
        layers.append(entry)
        for k, v in counted.items():
            totals[k] = totals.get(k, 0) + v
    return {"layers": layers, "totals": totals, "total": sum(totals.values())}


# -- checkpoint serialization ---------------------------------------------------


def _encode_array(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape),
            "data": [format(v, ".17g") for v in arr.ravel()]}


def _decode_array(obj, name: str) -> np.ndarray:
    try:
        shape = tuple(obj["shape"])
        data = np.array([float(s) for s in obj["data"]], dtype=float)
        return data.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"bad array field {name!r}: {exc}") from None


def save_checkpoint(net: Network, path: str):
    doc = {"schema_version": CHECKPOINT_SCHEMA, "architecture": net.descriptor,
           "layers": []}
    for m in net.modules:
        entry = {"kind": m.kind, "d_in": m.d_in, "d_out": m.d_out}
        if m.kind == "kan":
            entry.update(G=m.kv.G, K=m.kv.K, a=m.kv.a, b=m.kv.b, silu=m.silu_path)
        elif m.kind == "frkan":
            entry.update(G=m.G, K=m.K, a=m.a, b=m.b, h=m.h, silu=m.silu_path)
        elif m.kind == "mlp":
            entry["activation"] = m.activation
        for name, arr in m.param_arrays():
            entry[name] = _encode_array(arr)
        doc["layers"].append(entry)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Network:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorruptCheckpoint(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CorruptCheckpoint(f"unsupported schema: {doc.get('schema_version')!r}")
    modules = []
    try:
        entries = doc["layers"]
    except KeyError:
        raise CorruptCheckpoint("missing 'layers'") from None
    for idx, e in enumerate(entries):
        kind = e.get("kind")
        label = f"layers[{idx}]"
        try:
            if kind == "ln":
                m = LayerNorm(e["d_in"])
                m.gamma = _decode_array(e["gamma"], "gamma")
                m.beta = _decode_array(e["beta"], "beta")
                if m.gamma.shape != (m.d_in,) or m.beta.shape != (m.d_in,):
                    raise CorruptCheckpoint(f"{label}: bad layernorm shapes")
            elif kind == "kan":
                kv = make_uniform_grid(e["a"], e["b"], e["G"], e["K"])
                m = KANLayer(e["d_in"], e["d_out"], kv,
                             _decode_array(e["coefficients"], "coefficients"),
                             _decode_array(e["A_b"], "A_b"),
                             _decode_array(e["A_s"], "A_s"),
                             silu_path=bool(e.get("silu", True)))
            elif kind == "frkan":
                m = FRKANLayer(e["d_in"], e["d_out"], e["h"], e["a"], e["b"],
                               e["G"], e["K"],
                               _decode_array(e["coefficients"], "coefficients"),
                               _decode_array(e["shifts"], "shifts"),
                               _decode_array(e["A"], "A"),
                               silu_path=bool(e.get("silu", True)))
            elif kind == "mlp":
                m = MLPLayer(_decode_array(e["W"], "W"),
                             _decode_array(e["bias"], "bias"),
                             activation=e.get("activation", "relu"))
            else:
                raise CorruptCheckpoint(f"{label}: unknown layer kind {kind!r}")
        except (KeyError, TypeError) as exc:
            raise CorruptCheckpoint(f"{label}: missing field {exc}") from None
        except BadArchitecture as exc:
            raise CorruptCheckpoint(f"{label}: {exc}") from None
        modules.append(m)
    try:
        return Network(modules)
    except BadArchitecture as exc:
        raise CorruptCheckpoint(str(exc)) from None
