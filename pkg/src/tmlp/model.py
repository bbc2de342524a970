"""Tailed MLP and its baselines, with hand-derived forward and backward passes.

Every architecture is a stack of sine layers ``h_i = sin(omega0 * (W_i h_{i-1} + b_i))``
(SIREN scheme, ``omega0`` applied at every layer). They differ in where output
heads ("tails") are attached and how tail outputs are combined:

=========================  ===============  ==========================
architecture               tails            cumulative output
=========================  ===============  ==========================
tmlp                       affine, then     ``y_i = y_{i-1} + t_i``
                           multiplicative
tmlp_no_residual           same as tmlp     ``y_i = t_i``
tmlp_no_multiplicative     affine at all    ``y_i = y_{i-1} + t_i``
plain_mlp                  last layer only  ``y = t_k``
residual_mlp               last layer only  ``y = t_k``, identity skips
=========================  ===============  ==========================

Parameters of layer ``i`` are stored together with its tail, in the order
``W_i, b_i, <tail arrays>``; the flat parameter vector and the stream payloads
both follow this order.
"""

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConsistencyError, ShapeError
from .numerics import batched_affine


class Architecture(str, Enum):
    TMLP = "tmlp"
    TMLP_NO_RESIDUAL = "tmlp_no_residual"
    TMLP_NO_MULTIPLICATIVE = "tmlp_no_multiplicative"
    PLAIN_MLP = "plain_mlp"
    RESIDUAL_MLP = "residual_mlp"

    @property
    def single_head(self):
        return self in (Architecture.PLAIN_MLP, Architecture.RESIDUAL_MLP)

    @property
    def accumulates(self):
        """Whether cumulative outputs are sums of tail outputs."""
        return self in (Architecture.TMLP, Architecture.TMLP_NO_MULTIPLICATIVE)

    @property
    def multiplicative(self):
        return self in (Architecture.TMLP, Architecture.TMLP_NO_RESIDUAL)


AFFINE = "affine"
MULTIPLICATIVE = "multiplicative"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    output_dim: int
    hidden_width: int = 256
    num_hidden_layers: int = 5
    omega0: float = 30.0
    architecture: Architecture = Architecture.TMLP
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")
        if self.num_hidden_layers < 1:
            raise ValueError("num_hidden_layers must be >= 1")
        if not self.omega0 > 0:
            raise ValueError("omega0 must be > 0")

    @property
    def num_outputs(self):
        return 1 if self.architecture.single_head else self.num_hidden_layers

    def tail_kind(self, i):
        """Tail type attached to hidden layer ``i`` (1-based), or None."""
        k = self.num_hidden_layers
        if not 1 <= i <= k:
            raise IndexError(f"layer {i} outside 1..{k}")
        arch = self.architecture
        if arch.single_head:
            return AFFINE if i == k else None
        if arch.multiplicative and i >= 2:
            return MULTIPLICATIVE
        return AFFINE

    def layer_shapes(self, i):
        """Shapes of all arrays owned by layer ``i`` (1-based), in storage order."""
        fan_in = self.input_dim if i == 1 else self.hidden_width
        w, d = self.hidden_width, self.output_dim
        shapes = [(w, fan_in), (w,)]
        kind = self.tail_kind(i)
        if kind == AFFINE:
            shapes += [(d, w), (d,)]
        elif kind == MULTIPLICATIVE:
            shapes += [(d, w), (d,), (d, w), (d,)]
        return shapes


def layer_size(config, i):
    return sum(int(np.prod(s)) for s in config.layer_shapes(i))


def parameter_count(config):
    return sum(layer_size(config, i) for i in range(1, config.num_hidden_layers + 1))


@dataclass
class ModelParams:
    """All weights of a model; ``layers[i-1]`` holds ``[W_i, b_i, *tail_i]``."""

    config: ModelConfig
    layers: list

    def __post_init__(self):
        if len(self.layers) != self.config.num_hidden_layers:
            raise ConsistencyError(
                f"{len(self.layers)} layers stored, config says {self.config.num_hidden_layers}"
            )
        for i, arrays in enumerate(self.layers, start=1):
            got = [a.shape for a in arrays]
            want = self.config.layer_shapes(i)
            if got != want:
                raise ShapeError(f"layer {i}: array shapes {got}, expected {want}")

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    def weight(self, i):
        return self.layers[i - 1][0]

    def bias(self, i):
        return self.layers[i - 1][1]

    def tail(self, i):
        return self.layers[i - 1][2:]

    def arrays(self):
        return [a for arrays in self.layers for a in arrays]

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, config, flat, dtype=None):
        flat = np.asarray(flat)
        view = cls.view_flat(config, flat.ravel())
        return view.astype(dtype or flat.dtype)

    @classmethod
    def view_flat(cls, config, flat):
        """Wrap ``flat`` without copying; in-place updates to ``flat`` show through."""
        if flat.ndim != 1 or flat.size != parameter_count(config):
            raise ShapeError(f"flat vector has {flat.size} entries, model needs {parameter_count(config)}")
        layers, pos = [], 0
        for i in range(1, config.num_hidden_layers + 1):
            arrays = []
            for shape in config.layer_shapes(i):
                n = int(np.prod(shape))
                arrays.append(flat[pos : pos + n].reshape(shape))
                pos += n
            layers.append(arrays)
        return cls(config, layers)

    def astype(self, dtype):
        return ModelParams(self.config, [[a.astype(dtype) for a in arrays] for arrays in self.layers])

    def copy(self):
        return self.astype(self.dtype)


@dataclass
class TailOutputs:
    """Per-level tail outputs ``t`` and cumulative outputs ``y``, each ``(n, output_dim)``.

    For accumulating architectures ``t[i]`` is stored as ``y[i] - y[i-1]`` so the
    tail-sum identity holds exactly in floating point.
    """

    t: list
    y: list


@dataclass
class ForwardTrace:
    x: np.ndarray
    z: list = field(default_factory=list)
    h: list = field(default_factory=list)
    # multiplicative tail factors, None for affine or missing tails
    t0: list = field(default_factory=list)
    t1: list = field(default_factory=list)
    # raw tail outputs per layer, None where a layer has no tail
    tail: list = field(default_factory=list)
    y: list = field(default_factory=list)


def init_siren(config, dtype=np.float64):
    """SIREN initialisation; deterministic for a fixed ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    deep_bound = np.sqrt(6.0 / config.hidden_width) / config.omega0
    layers = []
    for i in range(1, config.num_hidden_layers + 1):
        first_bound = 1.0 / config.input_dim
        arrays = []
        for n, shape in enumerate(config.layer_shapes(i)):
            bound = first_bound if (i == 1 and n < 2) else deep_bound
            arrays.append(rng.uniform(-bound, bound, size=shape).astype(dtype))
        layers.append(arrays)
    return ModelParams(config, layers)


def _affine_tail(h, arrays):
    return batched_affine(h, arrays[0], arrays[1])


def _pullback(dt, W):
    """``dt @ W`` for a tail; rank-1 updates beat gemm for narrow outputs."""
    if dt.shape[1] > 4:
        return dt @ W
    out = dt[:, :1] * W[0]
    for d in range(1, dt.shape[1]):
        out += dt[:, d : d + 1] * W[d]
    return out


def forward(params, x):
    """Evaluate every level of the model on a sample-major batch ``x``."""
    cfg = params.config
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeError(f"input batch shape {x.shape}, model expects (n, {cfg.input_dim})")
    x = x.astype(params.dtype, copy=False)
    arch = cfg.architecture
    w0 = cfg.omega0
    trace = ForwardTrace(x=x)
    t_out, y_out = [], []
    h = x
    y_prev = None
    for i in range(1, cfg.num_hidden_layers + 1):
        z = batched_affine(h, params.weight(i), params.bias(i))
        s = np.multiply(z, w0)
        np.sin(s, out=s)
        if arch is Architecture.RESIDUAL_MLP and i > 1:
            s += h
        h = s
        trace.z.append(z)
        trace.h.append(h)

        kind = cfg.tail_kind(i)
        tail = params.tail(i)
        t0 = t1 = raw = None
        if kind == AFFINE:
            raw = _affine_tail(h, tail)
        elif kind == MULTIPLICATIVE:
            t0 = _affine_tail(h, tail[0:2])
            t1 = _affine_tail(h, tail[2:4])
            raw = t0 * t1
        trace.t0.append(t0)
        trace.t1.append(t1)
        trace.tail.append(raw)
        if raw is None:
            continue

        if arch.accumulates:
            y = raw.copy() if y_prev is None else y_prev + raw
            t = y.copy() if y_prev is None else y - y_prev
            y_prev = y
        else:
            y = raw
            t = raw
        t_out.append(t)
        y_out.append(y)
    trace.y = y_out
    return TailOutputs(t=t_out, y=y_out), trace


def predict(params, x, level=None):
    """Cumulative output at integer ``level`` (1-based; default: finest)."""
    outs, _ = forward(params, x)
    if level is None:
        return outs.y[-1]
    return outs.y[level - 1]


def backward(params, trace, output_grads):
    """Gradient of ``sum_i <output_grads[i], y_i>`` w.r.t. all parameters.

    Returns a flat vector in the layout of :meth:`ModelParams.flatten`.
    """
    cfg = params.config
    arch = cfg.architecture
    k = cfg.num_hidden_layers
    if len(trace.h) != k or len(trace.z) != k:
        raise ConsistencyError(f"trace has {len(trace.h)} layers, params have {k}")
    if len(output_grads) != cfg.num_outputs:
        raise ConsistencyError(f"{len(output_grads)} output gradients given, model has {cfg.num_outputs} outputs")
    for g, y in zip(output_grads, trace.y):
        if g.shape != y.shape:
            raise ConsistencyError(f"output gradient shape {g.shape} does not match output {y.shape}")

    # gradient reaching each tail output, indexed by layer (0-based)
    tail_grad = [None] * k
    tail_layers = [i for i in range(k) if trace.tail[i] is not None]
    if arch.accumulates:
        acc = None
        for g, i in zip(reversed(output_grads), reversed(tail_layers)):
            acc = g.copy() if acc is None else acc + g
            tail_grad[i] = acc
    else:
        for g, i in zip(output_grads, tail_layers):
            tail_grad[i] = g

    grads = [None] * k
    w0 = cfg.omega0
    dh_from_above = None
    for i in range(k - 1, -1, -1):
        h = trace.h[i]
        tail = params.tail(i + 1)
        dt = tail_grad[i]
        tail_g = []
        dh = dh_from_above
        if dt is not None:
            if trace.t0[i] is None:
                tail_g = [dt.T @ h, dt.sum(axis=0)]
                contrib = _pullback(dt, tail[0])
            else:
                d0 = dt * trace.t1[i]
                d1 = dt * trace.t0[i]
                tail_g = [d0.T @ h, d0.sum(axis=0), d1.T @ h, d1.sum(axis=0)]
                contrib = _pullback(d0, tail[0])
                contrib += _pullback(d1, tail[2])
            if dh is None:
                dh = contrib
            else:
                dh += contrib
        elif tail:
            tail_g = [np.zeros_like(a) for a in tail]

        h_prev = trace.x if i == 0 else trace.h[i - 1]
        W = params.weight(i + 1)
        if dh is None:
            grads[i] = [np.zeros_like(W), np.zeros_like(params.bias(i + 1))] + tail_g
            dh_from_above = None
            continue
        dz = np.multiply(trace.z[i], w0)
        np.cos(dz, out=dz)
        dz *= dh
        dz *= dz.dtype.type(w0)
        grads[i] = [dz.T @ h_prev, dz.sum(axis=0)] + tail_g
        if i > 0:
            dh_prev = dz @ W
            if arch is Architecture.RESIDUAL_MLP:
                dh_prev += dh
            dh_from_above = dh_prev
    return np.concatenate([a.ravel() for layer in grads for a in layer]).astype(params.dtype, copy=False)


@dataclass
class QuadraticForm:
    Q: np.ndarray
    u: np.ndarray
    s: float
    value: float


def tail_quadratic_oracle(tail, h):
    """Rewrite a multiplicative tail as ``h^T Q h + u^T h + s`` per output coordinate.

    ``tail`` is ``(W0, b0, W1, b1)``; rows of ``W0``/``W1`` play the roles of
    ``a``/``b`` and the biases those of ``c``/``d``. Computed in binary64.
    """
    if len(tail) != 4:
        raise ValueError("tail_quadratic_oracle needs a multiplicative tail (W0, b0, W1, b1)")
    W0, b0, W1, b1 = (np.asarray(a, dtype=np.float64) for a in tail)
    h = np.asarray(h, dtype=np.float64)
    forms = []
    for row in range(W0.shape[0]):
        a, b = W0[row], W1[row]
        c, d = b0[row], b1[row]
        Q = np.outer(a, b)
        u = d * a + c * b
        s = c * d
        forms.append(QuadraticForm(Q=Q, u=u, s=s, value=float(h @ Q @ h + u @ h + s)))
    return forms


def truncate(params, j):
    """Keep hidden layers ``1..j`` and their tails."""
    cfg = params.config
    k = cfg.num_hidden_layers
    if not 1 <= j <= k:
        raise ValueError(f"truncation depth {j} outside 1..{k}")
    if cfg.architecture.single_head and j != k:
        raise ValueError(f"{cfg.architecture.value} has a single head at layer {k}; cannot truncate to {j}")
    new_cfg = replace(cfg, num_hidden_layers=j)
    return ModelParams(new_cfg, [[a.copy() for a in arrays] for arrays in params.layers[:j]])
