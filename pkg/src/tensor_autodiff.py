"""Dense 2-D reverse-mode autodiff on numpy float64 arrays, plus Adam and JSON checkpoints.

Every primitive checks shapes, rejects non-finite results and, when any input
requires gradients, appends a record to the calling thread's tape. ``backward``
walks the tape in reverse, accumulates gradients into leaf tensors and resets
the tape.
"""
import json
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np
from scipy.special import expit

from src.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
LOG_FLOOR = 1e-12


class Tensor:
    """Row-major 2-D float64 matrix with optional gradient tracking."""

    def __init__(self, data, requires_grad=False, name=None):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim != 2:
            raise ShapeError("tensor", array.shape)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"tensor {name or ''} has non-finite entries".strip())
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def parameter(cls, data, name=None):
        return cls(data, requires_grad=True, name=name)

    @classmethod
    def constant(cls, data):
        return cls(data, requires_grad=False)

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.shape != (1, 1):
            raise ShapeError("item", self.shape)
        return float(self.data[0, 0])

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


@dataclass
class TapeRecord:
    primitive: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable


class Tape:
    """Ordered record of primitive applications for one thread."""

    def __init__(self):
        self.records: List[TapeRecord] = []
        self.enabled = True

    def record(self, primitive, output, inputs, backward):
        self.records.append(TapeRecord(primitive, output, inputs, backward))

    def reset(self):
        self.records = []

    def __len__(self):
        return len(self.records)


_local = threading.local()


def current_tape():
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = Tape()
        _local.tape = tape
    return tape


@contextmanager
def no_grad():
    """Disable tape recording for inference and finite differences."""
    tape = current_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor.constant(x)


def _emit(primitive, data, inputs, backward):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{primitive} produced non-finite values")
    tape = current_tape()
    tracked = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = tracked
    out.grad = None
    out.name = None
    if tracked:
        tape.record(primitive, out, tuple(inputs), backward)
    return out


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.data, b.data
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    """Elementwise sum; b may also be a 1×c row broadcast over a's rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.shape == (1, a.shape[1]):
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise ShapeError("add", a.shape, b.shape)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))
    if b.shape == (1, a.shape[1]):
        return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g.sum(axis=0, keepdims=True)))
    raise ShapeError("sub", a.shape, b.shape)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    av, bv = a.data, b.data
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def shift(a, c):
    a = _as_tensor(a)
    return _emit("shift", a.data + float(c), (a,), lambda g: (g,))


def concat_cols(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_cols")
    rows = tensors[0].shape[0]
    if any(t.shape[0] != rows for t in tensors):
        raise ShapeError("concat_cols", *(t.shape for t in tensors))
    widths = [t.shape[1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return _emit("concat_cols", np.concatenate([t.data for t in tensors], axis=1), tensors, backward)


def concat_rows(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_rows")
    cols = tensors[0].shape[1]
    if any(t.shape[1] != cols for t in tensors):
        raise ShapeError("concat_rows", *(t.shape for t in tensors))
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=0))

    return _emit("concat_rows", np.concatenate([t.data for t in tensors], axis=0), tensors, backward)


def row_mean(a):
    """Column-wise mean over rows, giving a 1×c row."""
    a = _as_tensor(a)
    rows = a.shape[0]
    if rows == 0:
        raise ShapeError("row_mean", a.shape)
    return _emit("row_mean", a.data.mean(axis=0, keepdims=True), (a,),
                 lambda g: (np.repeat(g / rows, rows, axis=0),))


def leaky_relu(a, alpha=0.2):
    a = _as_tensor(a)
    slope = np.where(a.data > 0, 1.0, alpha)
    return _emit("leaky_relu", a.data * slope, (a,), lambda g: (g * slope,))


def sigmoid(a):
    a = _as_tensor(a)
    s = expit(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a, floor=LOG_FLOOR):
    """Natural log with inputs floored at ``floor``; no gradient below the floor."""
    a = _as_tensor(a)
    clipped = np.maximum(a.data, floor)
    active = a.data > floor
    return _emit("log", np.log(clipped), (a,), lambda g: (np.where(active, g / clipped, 0.0),))


def pow(a, k):
    a = _as_tensor(a)
    k = float(k)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.power(a.data, k)
    av = a.data

    def backward(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            local = k * np.power(av, k - 1.0) if k != 1.0 else np.ones_like(av)
        return (g * np.where(np.isfinite(local), local, 0.0),)

    return _emit("pow", out, (a,), backward)


def sum(a):
    a = _as_tensor(a)
    shape = a.shape
    return _emit("sum", np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean(a):
    a = _as_tensor(a)
    shape = a.shape
    size = a.data.size
    if size == 0:
        raise ShapeError("mean", shape)
    return _emit("mean", np.array([[a.data.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / size),))


def _normalized(x):
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True) + NORM_EPS)
    return x / norms, norms


def l2_normalize_rows(a):
    a = _as_tensor(a)
    y, norms = _normalized(a.data)

    def backward(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norms,)

    return _emit("l2_normalize_rows", y, (a,), backward)


def cosine_similarity_rows(a, b):
    """Row-wise cosine similarity of two n×d matrices, as an n×1 column."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity_rows", a.shape, b.shape)
    ya, na = _normalized(a.data)
    yb, nb = _normalized(b.data)
    cos = np.clip(np.sum(ya * yb, axis=1, keepdims=True), -1.0, 1.0)

    def backward(g):
        ga = g * yb
        gb = g * ya
        grad_a = (ga - ya * np.sum(ga * ya, axis=1, keepdims=True)) / na
        grad_b = (gb - yb * np.sum(gb * yb, axis=1, keepdims=True)) / nb
        return grad_a, grad_b

    return _emit("cosine_similarity_rows", cos, (a, b), backward)


def backward(loss):
    """Propagate d(loss)/d(.) to every tracked leaf; returns {tensor: grad} and resets the tape."""
    if loss.shape != (1, 1):
        raise ShapeError("backward", loss.shape)
    tape = current_tape()
    if not loss.requires_grad:
        tape.reset()
        return {}

    grads = {id(loss): np.ones((1, 1))}
    owners = {id(loss): loss}
    for record in reversed(tape.records):
        g = grads.pop(id(record.output), None)
        if g is None:
            continue
        owners.pop(id(record.output), None)
        for tensor, grad in zip(record.inputs, record.backward(g)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
                owners[key] = tensor
    tape.reset()

    result = {}
    for key, grad in grads.items():
        tensor = owners[key]
        tensor.grad = grad
        result[tensor] = grad
    return result


def grad_check(fn, params, h=1e-4, sample=None, rng=None):
    """Max relative error between backward gradients and central differences.

    ``fn(params)`` must return a 1×1 Tensor and be deterministic. With
    ``sample`` set, only that many randomly chosen entries per parameter are
    compared.
    """
    current_tape().reset()
    grads = backward(fn(params))
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros(p.shape))
        flat = np.arange(p.data.size)
        if sample is not None and sample < flat.size:
            flat = rng.choice(flat, size=sample, replace=False)
        for index in flat:
            idx = np.unravel_index(index, p.shape)
            original = p.data[idx]
            with no_grad():
                p.data[idx] = original + h
                plus = fn(params).item()
                p.data[idx] = original - h
                minus = fn(params).item()
            p.data[idx] = original
            numeric = (plus - minus) / (2.0 * h)
            a = analytic[idx]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update of a {name: Tensor} mapping.

    ``grads`` maps names to arrays; missing names count as zero gradient.
    Parameter arrays are replaced, never written in place.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        if m.shape != p.shape:
            raise ShapeError("adam_step", p.shape, m.shape)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        state.m[name] = m
        state.v[name] = v
    return params, state


def named_gradients(params, grads):
    """Re-key a backward() result by parameter name."""
    return {name: grads[p] for name, p in params.items() if p in grads}


def dumps_parameters(params):
    """{name: {"shape", "data"}} as a plain dict with deterministic key order."""
    out = {}
    for name in sorted(params):
        value = params[name]
        array = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        out[name] = {"shape": [int(array.shape[0]), int(array.shape[1])],
                     "data": [float(x) for x in array.ravel()]}
    return out


def loads_parameters(payload):
    params = {}
    for name, entry in payload.items():
        rows, cols = entry["shape"]
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != rows * cols:
            raise ShapeError(f"checkpoint entry {name}", (rows, cols), data.shape)
        params[name] = Tensor.parameter(data.reshape(rows, cols), name=name)
    return params


def checkpoint_text(params, header=None):
    """Serialize parameters (and an optional header) as canonical JSON text."""
    payload = {"parameters": dumps_parameters(params)}
    if header is not None:
        payload["header"] = header
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def parse_checkpoint(text):
    payload = json.loads(text)
    return loads_parameters(payload["parameters"]), payload.get("header", {})


def save_checkpoint(path, params, header=None):
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(checkpoint_text(params, header))
    logger.info("Wrote checkpoint %s", path)


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as handle:
        return parse_checkpoint(handle.read())
