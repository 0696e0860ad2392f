"""Parameterized maps and potentials.

``MlpModel`` is a plain multilayer perceptron used for transport maps
``t: R^n -> R^n`` and unconstrained potentials ``psi: R^n -> R``.
``IcnnModel`` is a dense input-convex network: hidden-to-hidden weights are
kept nonnegative and the activation is softplus, so the scalar output is a
convex function of the input.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import Node

FORMAT_VERSION = 1


class InvariantError(ValueError):
    """A model is in a state its definition forbids (e.g. negative ICNN weights)."""


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else nc.constant(x)


def _check_input(x: Node, dim: int, who: str):
    if x.value.ndim != 2 or x.shape[1] != dim:
        raise nc.ShapeError(who, f"expected batch of shape (B, {dim}), got {x.shape}")


@dataclass
class MlpModel:
    layer_widths: list[int]
    weights: list[Node]
    biases: list[Node]
    activation: str = "leaky_relu"
    slope: float = 0.2
    scalar_output: bool = False     # potentials: return shape (B,) instead of (B, 1)
    kind: str = field(default="mlp", init=False)

    def __post_init__(self):
        if self.activation not in ("softplus", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.scalar_output and self.layer_widths[-1] != 1:
            raise ValueError("scalar_output needs a single output unit")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_widths[i + 1], self.layer_widths[i])
            if W.shape != expect or b.shape != (expect[0],):
                raise nc.ShapeError("mlp", f"layer {i}: W {W.shape}, b {b.shape}, expected {expect}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    def parameters(self) -> list[Node]:
        return [*self.weights, *self.biases]

    def __call__(self, x) -> Node:
        return mlp_forward(self, x)


def mlp_forward(model: MlpModel, x) -> Node:
    """(B, in) -> (B, out), or (B,) for a model flagged ``scalar_output``."""
    x = _as_node(x)
    _check_input(x, model.input_dim, "mlp_forward")
    h = x
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = nc.affine(h, W, b)
        if i < last:
            h = nc.softplus(h) if model.activation == "softplus" else nc.leaky_relu(h, model.slope)
    if model.scalar_output:
        h = nc.reshape(h, (h.shape[0],))
    return h


@dataclass
class IcnnModel:
    """Dense ICNN ``a * (core(x) + alpha/2 |x|^2)``.

    ``skip_weights[k]`` maps the input into hidden layer k (and the last one
    into the scalar output); ``hidden_weights[k]`` maps hidden layer k into
    layer k+1, the last one into the output.  Only the hidden weights carry
    the nonnegativity constraint.
    """

    layer_widths: list[int]
    skip_weights: list[Node]
    hidden_weights: list[Node]
    biases: list[Node]
    alpha: float = 0.0
    scale: float = 1.0
    kind: str = field(default="icnn", init=False)

    def __post_init__(self):
        if self.alpha < 0 or self.scale <= 0:
            raise ValueError("need alpha >= 0 and scale > 0")
        n_hidden = len(self.layer_widths) - 1
        if len(self.skip_weights) != n_hidden + 1 or len(self.hidden_weights) != n_hidden \
                or len(self.biases) != n_hidden + 1:
            raise nc.ShapeError("icnn", "parameter list lengths do not match layer widths")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    def parameters(self) -> list[Node]:
        return [*self.skip_weights, *self.hidden_weights, *self.biases]

    def check_invariant(self):
        for k, W in enumerate(self.hidden_weights):
            if np.any(W.value < 0):
                raise InvariantError(f"hidden weight {k} has negative entries (min {W.value.min():.3g})")

    def __call__(self, x) -> Node:
        return icnn_forward(self, x)


def icnn_forward(model: IcnnModel, x) -> Node:
    """Scalar convex potential per row: (B, n) -> (B,)."""
    x = _as_node(x)
    _check_input(x, model.input_dim, "icnn_forward")
    model.check_invariant()
    z = nc.softplus(nc.affine(x, model.skip_weights[0], model.biases[0]))
    for k in range(1, len(model.skip_weights)):
        pre = nc.add(nc.affine(x, model.skip_weights[k], model.biases[k]),
                     nc.matmul(z, nc.transpose(model.hidden_weights[k - 1])))
        last = k == len(model.skip_weights) - 1
        z = pre if last else nc.softplus(pre)
    out = nc.reshape(z, (x.shape[0],))
    if model.alpha > 0:
        quad = nc.scale(nc.sum(nc.square(x), axis=1), 0.5 * model.alpha)
        out = nc.add(out, quad)
    if model.scale != 1.0:
        out = nc.scale(out, model.scale)
    return out


def icnn_input_grad(model: IcnnModel, x, create_graph: bool = False):
    """Input gradient of the potential, row by row.

    With ``create_graph`` the result is a node that stays differentiable in
    the model parameters and in ``x`` (when ``x`` is itself a tracked node);
    otherwise a plain array is returned.
    """
    if isinstance(x, Node) and x.requires_grad:
        xin = x
    else:
        xin = nc.leaf(x.value if isinstance(x, Node) else x)
    if create_graph:
        out = icnn_forward(model, xin)
        (g,) = nc.grad(nc.sum(out), [xin], create_graph=True)
        return g
    with nc._grad_mode(True):
        out = icnn_forward(model, xin)
    return nc.grad(nc.sum(out), [xin])[0]


def input_grad(model, x) -> np.ndarray:
    """Input gradient of any scalar-per-row model, as an array."""
    xin = nc.leaf(x.value if isinstance(x, Node) else x)
    out = model(xin)
    return nc.grad(nc.sum(out), [xin])[0]


def project_nonneg(model: IcnnModel) -> IcnnModel:
    """Clamp hidden weights at zero in place; returns the same model."""
    for W in model.hidden_weights:
        W.value = np.maximum(W.value, 0.0)
    return model


def init_model(kind: str, dims: list[int], init_std: float, seed: int, **kwargs):
    """Gaussian weights N(0, init_std^2), zero biases, deterministic per seed.

    ``dims`` lists the layer widths: ``[in, h1, ..., out]`` for an MLP and
    ``[in, h1, ..., hL]`` for an ICNN (whose output is always scalar).
    """
    if init_std <= 0:
        raise ValueError("init_std must be positive")
    rng = np.random.default_rng(seed)
    dims = [int(d) for d in dims]
    if kind == "mlp":
        weights = [nc.leaf(rng.normal(0.0, init_std, size=(dims[i + 1], dims[i])))
                   for i in range(len(dims) - 1)]
        biases = [nc.leaf(np.zeros(dims[i + 1])) for i in range(len(dims) - 1)]
        return MlpModel(dims, weights, biases, **kwargs)
    if kind == "icnn":
        widths = dims[1:] + [1]
        skip = [nc.leaf(rng.normal(0.0, init_std, size=(w, dims[0]))) for w in widths]
        hidden = [nc.leaf(np.abs(rng.normal(0.0, init_std, size=(widths[k + 1], widths[k]))))
                  for k in range(len(widths) - 1)]
        biases = [nc.leaf(np.zeros(w)) for w in widths]
        return IcnnModel(dims, skip, hidden, biases, **kwargs)
    raise ValueError(f"unknown model kind {kind!r}")


def default_mlp(in_dim: int, out_dim: int, seed: int, hidden=(128, 128, 128),
                init_std: float | None = None, activation: str = "leaky_relu",
                potential: bool = False) -> MlpModel:
    """MLP with He-style scaling of the first layer width unless ``init_std`` is given."""
    dims = [in_dim, *hidden, out_dim]
    if init_std is None:
        init_std = float(np.sqrt(2.0 / max(hidden[0], in_dim)))
    return init_model("mlp", dims, init_std, seed, activation=activation,
                      scalar_output=(out_dim == 1 and potential))


def ground_truth_icnn(dim: int, seed: int, depth: int = 5, init_std: float = 0.14,
                      alpha: float = 0.05) -> IcnnModel:
    """Random convex potential with the benchmark's reference constants."""
    return init_model("icnn", [dim] + [dim] * depth, init_std, seed, alpha=alpha)


def clone(model):
    return copy.deepcopy(model)


def parameter_vector(model) -> np.ndarray:
    return np.concatenate([p.value.ravel() for p in model.parameters()])


def set_parameter_vector(model, vec: np.ndarray):
    offset = 0
    for p in model.parameters():
        size = p.value.size
        p.value = np.asarray(vec[offset:offset + size], dtype=np.float64).reshape(p.shape).copy()
        offset += size
    if offset != len(vec):
        raise ValueError("parameter vector length mismatch")


# ---------------------------------------------------------------------------
# Serialization: a JSON header line followed by a raw float64 payload.
# ---------------------------------------------------------------------------

def _header(model) -> dict:
    head = {"format": "otlab-model", "version": FORMAT_VERSION, "kind": model.kind,
            "dims": list(model.layer_widths),
            "shapes": [list(p.shape) for p in model.parameters()]}
    if model.kind == "mlp":
        head.update(activation=model.activation, slope=model.slope,
                    scalar_output=model.scalar_output)
    else:
        head.update(alpha=model.alpha, scale=model.scale)
    return head


def save_model(model, path):
    """Write ``model`` as one JSON header line then little-endian float64 parameters."""
    payload = np.concatenate([p.value.ravel() for p in model.parameters()]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(json.dumps(_header(model), sort_keys=True).encode() + b"\n")
        fh.write(payload.tobytes())


def load_model(path):
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    head = json.loads(data[:nl])
    if head.get("format") != "otlab-model" or head.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model file header")
    flat = np.frombuffer(data[nl + 1:], dtype="<f8").astype(np.float64)
    dims = head["dims"]
    if head["kind"] == "mlp":
        model = init_model("mlp", dims, 1.0, 0, activation=head["activation"], slope=head["slope"],
                           scalar_output=head["scalar_output"])
    elif head["kind"] == "icnn":
        model = init_model("icnn", dims, 1.0, 0, alpha=head["alpha"], scale=head["scale"])
    else:
        raise ValueError(f"unknown kind {head['kind']!r}")
    if [list(p.shape) for p in model.parameters()] != head["shapes"]:
        raise ValueError(f"{path}: parameter shapes disagree with header")
    set_parameter_vector(model, flat)
    return model
