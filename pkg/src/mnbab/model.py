"""Network and verification-problem representation.

Networks are layered computation graphs over dense float64 arithmetic:
affine layers, ReLU activations and residual-add blocks (a branch of
layers whose output is added back onto the branch input).  Convolutions
in network files are materialized into dense affine layers at load time;
the kernel geometry is retained as metadata for the branching cost model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np


class NetworkFormatError(ValueError):
    """Raised when a network file cannot be parsed into a valid network."""


class DimensionMismatchError(NetworkFormatError):
    """Raised when consecutive layer dimensions are incompatible."""


class NonFiniteWeightError(NetworkFormatError):
    """Raised when weights or biases contain NaN or infinities."""


@dataclass
class ConvMeta:
    """Geometry of a convolution that was materialized to dense affine."""

    out_ch: int
    in_ch: int
    kh: int
    kw: int
    stride: int
    padding: int
    in_h: int
    in_w: int
    out_h: int
    out_w: int


@dataclass
class Affine:
    W: np.ndarray
    b: np.ndarray
    conv_meta: Optional[ConvMeta] = None

    @property
    def out_width(self) -> int:
        return self.W.shape[0]

    @property
    def in_width(self) -> int:
        return self.W.shape[1]


@dataclass
class ReLU:
    width: int
    relu_id: int = -1


@dataclass
class ResidualAdd:
    branch: List["Layer"]


Layer = Union[Affine, ReLU, ResidualAdd]


@dataclass
class ReluSite:
    """Where a ReLU lives: the frames needed to backsubstitute its
    pre-activation down to the network input.

    ``frames`` is a list of (chain, start_index) pairs, innermost first:
    the expression starts over the output of chain[start_index] and, after
    exhausting a chain, continues in the enclosing chain just before the
    residual block that owned it.  start_index == -1 means the chain
    contributes nothing (the ReLU reads the chain input directly is not
    allowed; -1 only occurs for enclosing frames of blocks in position 0).
    """

    relu_id: int
    width: int
    layer: ReLU
    frames: List[Tuple[List[Layer], int]]


class Network:
    """Validated layered network.  Immutable after construction."""

    def __init__(self, layers: List[Layer], input_dim: int):
        if input_dim <= 0:
            raise NetworkFormatError("input_dim must be positive")
        self.layers = layers
        self.input_dim = input_dim
        self.output_dim = self._validate_chain(layers, input_dim, "layers")
        self.relu_sites: List[ReluSite] = []
        self._assign_relu_ids(layers, [])

    # -- validation ------------------------------------------------------

    def _validate_chain(self, chain: Sequence[Layer], in_width: int, where: str) -> int:
        width = in_width
        prev: Optional[Layer] = None
        for idx, layer in enumerate(chain):
            name = f"{where}[{idx}]"
            if isinstance(layer, Affine):
                if layer.W.ndim != 2 or layer.b.ndim != 1 or layer.b.shape[0] != layer.W.shape[0]:
                    raise DimensionMismatchError(f"{name}: W must be 2-D with matching bias length")
                if layer.W.shape[1] != width:
                    raise DimensionMismatchError(
                        f"{name}: affine expects input width {layer.W.shape[1]}, got {width}"
                    )
                if not (np.isfinite(layer.W).all() and np.isfinite(layer.b).all()):
                    raise NonFiniteWeightError(f"{name}: non-finite weight or bias")
                width = layer.W.shape[0]
            elif isinstance(layer, ReLU):
                if prev is None or not isinstance(prev, (Affine, ResidualAdd)):
                    raise NetworkFormatError(
                        f"{name}: ReLU must directly follow an affine or residual-add layer"
                    )
                if layer.width != width:
                    raise DimensionMismatchError(
                        f"{name}: ReLU width {layer.width} != incoming width {width}"
                    )
            elif isinstance(layer, ResidualAdd):
                branch_out = self._validate_chain(layer.branch, width, f"{name}.branch")
                if branch_out != width:
                    raise DimensionMismatchError(
                        f"{name}: residual branch output width {branch_out} != input width {width}"
                    )
            else:  # pragma: no cover - guarded by the loader
                raise NetworkFormatError(f"{name}: unknown layer type {type(layer)!r}")
            prev = layer
        return width

    def _assign_relu_ids(self, chain: List[Layer], outer: List[Tuple[List[Layer], int]]) -> None:
        for idx, layer in enumerate(chain):
            if isinstance(layer, ReLU):
                layer.relu_id = len(self.relu_sites)
                frames = [(chain, idx - 1)] + list(outer)
                self.relu_sites.append(ReluSite(layer.relu_id, layer.width, layer, frames))
            elif isinstance(layer, ResidualAdd):
                self._assign_relu_ids(layer.branch, [(chain, idx - 1)] + list(outer))

    # -- evaluation ------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Exact concrete evaluation; accepts a vector or a batch (n, input_dim)."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        z = x[None, :] if squeeze else x
        if z.shape[1] != self.input_dim:
            raise DimensionMismatchError(
                f"input has width {z.shape[1]}, network expects {self.input_dim}"
            )
        z = _forward_chain(self.layers, z)
        return z[0] if squeeze else z

    def output_frames(self) -> List[Tuple[List[Layer], int]]:
        """Frames for a query over the final layer's output."""
        return [(self.layers, len(self.layers) - 1)]

    def num_relu_neurons(self) -> int:
        return sum(site.width for site in self.relu_sites)


def _forward_chain(chain: Sequence[Layer], z: np.ndarray) -> np.ndarray:
    for layer in chain:
        if isinstance(layer, Affine):
            z = z @ layer.W.T + layer.b
        elif isinstance(layer, ReLU):
            z = np.maximum(z, 0.0)
        else:
            z = z + _forward_chain(layer.branch, z)
    return z


# -- properties ----------------------------------------------------------


@dataclass
class RobustnessSpec:
    """Classification robustness: true label t against all other classes."""

    label: int
    classes: int

    def rows(self) -> Tuple[np.ndarray, np.ndarray]:
        if not 0 <= self.label < self.classes:
            raise ValueError("label out of range")
        rows = []
        for j in range(self.classes):
            if j == self.label:
                continue
            r = np.zeros(self.classes)
            r[self.label] = 1.0
            r[j] = -1.0
            rows.append(r)
        return np.array(rows), np.zeros(len(rows))


def encode_property(
    network: Network,
    spec: Union[RobustnessSpec, Tuple[np.ndarray, np.ndarray]],
) -> Network:
    """Append the property functionals as one extra affine layer.

    The property holds iff every output of the returned network is > 0
    over the input region.
    """
    if isinstance(spec, RobustnessSpec):
        rows, offsets = spec.rows()
    else:
        rows, offsets = spec
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        offsets = np.asarray(offsets, dtype=np.float64).reshape(-1)
    if rows.shape[1] != network.output_dim:
        raise DimensionMismatchError(
            f"property rows have width {rows.shape[1]}, network output is {network.output_dim}"
        )
    if rows.shape[0] != offsets.shape[0]:
        raise DimensionMismatchError("one offset per property row required")
    layers = list(network.layers) + [Affine(rows.astype(np.float64), offsets.astype(np.float64))]
    return Network(layers, network.input_dim)


@dataclass
class VerificationProblem:
    """An input region plus a property over the network outputs.

    The region is the p-ball of radius eps around x0, intersected with the
    per-dimension clip box when one is given.
    """

    network: Network
    x0: np.ndarray
    eps: float
    p: float  # np.inf, 2.0 or 1.0
    property_rows: np.ndarray
    offsets: np.ndarray
    clip: Optional[Tuple[float, float]] = None
    _encoded: Optional[Network] = field(default=None, repr=False)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64).reshape(-1)
        if self.x0.shape[0] != self.network.input_dim:
            raise DimensionMismatchError("x0 width does not match network input_dim")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.p not in (np.inf, 2.0, 1.0):
            raise ValueError("p must be inf, 2 or 1")
        self.property_rows = np.atleast_2d(np.asarray(self.property_rows, dtype=np.float64))
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1)

    @property
    def num_rows(self) -> int:
        return self.property_rows.shape[0]

    def encoded_network(self) -> Network:
        """Network whose outputs are the property margins."""
        if self._encoded is None:
            self._encoded = encode_property(self.network, (self.property_rows, self.offsets))
        return self._encoded

    def input_box(self) -> Tuple[np.ndarray, np.ndarray]:
        """Tight axis-aligned box around the region (exact for p = inf)."""
        lo = self.x0 - self.eps
        hi = self.x0 + self.eps
        if self.clip is not None:
            lo = np.maximum(lo, self.clip[0])
            hi = np.minimum(hi, self.clip[1])
        return lo, hi

    def project(self, x: np.ndarray) -> np.ndarray:
        """Project a point into the region (exact for p = inf; for p = 1, 2
        the ball projection runs first and the clip clamp after, which can
        only shrink the p-norm because x0 lies inside the clip box)."""
        x = np.asarray(x, dtype=np.float64)
        d = x - self.x0
        if self.p == np.inf:
            d = np.clip(d, -self.eps, self.eps)
        elif self.p == 2.0:
            n = np.linalg.norm(d)
            if n > self.eps:
                d = d * (self.eps / n) if n > 0 else d
        else:
            d = _project_l1(d, self.eps)
        x = self.x0 + d
        if self.clip is not None:
            x = np.clip(x, self.clip[0], self.clip[1])
        return x

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> bool:
        d = np.asarray(x, dtype=np.float64) - self.x0
        if self.p == np.inf:
            ok = np.abs(d).max(initial=0.0) <= self.eps + tol
        elif self.p == 2.0:
            ok = np.linalg.norm(d) <= self.eps + tol
        else:
            ok = np.abs(d).sum() <= self.eps + tol
        if self.clip is not None:
            ok = ok and bool((x >= self.clip[0] - tol).all() and (x <= self.clip[1] + tol).all())
        return bool(ok)


def _project_l1(d: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto the l1 ball (Duchi et al. style)."""
    a = np.abs(d)
    if a.sum() <= radius:
        return d
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, len(u) + 1)
    cond = u - (css - radius) / ks > 0
    rho = np.nonzero(cond)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(d) * np.maximum(a - theta, 0.0)


# -- file formats --------------------------------------------------------


def load_network(path: str) -> Network:
    """Load the JSON network format; convolutions are materialized to dense
    affine layers with exact arithmetic equivalence."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise NetworkFormatError(f"cannot parse network file {path}: {exc}") from exc
    return network_from_dict(doc)


def network_from_dict(doc: dict) -> Network:
    if not isinstance(doc, dict) or "input_dim" not in doc or "layers" not in doc:
        raise NetworkFormatError("network file must have 'input_dim' and 'layers'")
    input_dim = int(doc["input_dim"])
    layers = _layers_from_list(doc["layers"], input_dim, "layers")
    return Network(layers, input_dim)


def _layers_from_list(items: list, in_width: int, where: str) -> List[Layer]:
    layers: List[Layer] = []
    width = in_width
    for idx, item in enumerate(items):
        name = f"{where}[{idx}]"
        kind = item.get("type")
        if kind == "affine":
            W = np.asarray(item["W"], dtype=np.float64)
            b = np.asarray(item["b"], dtype=np.float64)
            meta = item.get("conv_meta")
            layer = Affine(W, b, ConvMeta(**meta) if meta else None)
            width = W.shape[0] if W.ndim == 2 else width
            layers.append(layer)
        elif kind == "conv":
            layer = _materialize_conv(item, width, name)
            width = layer.out_width
            layers.append(layer)
        elif kind == "relu":
            layers.append(ReLU(width))
        elif kind == "residual":
            branch = _layers_from_list(item["branch"], width, f"{name}.branch")
            layers.append(ResidualAdd(branch))
        else:
            raise NetworkFormatError(f"{name}: unknown layer type {kind!r}")
    return layers


def _materialize_conv(item: dict, in_width: int, name: str) -> Affine:
    kernel = np.asarray(item["kernel"], dtype=np.float64)
    if kernel.ndim != 4:
        raise NetworkFormatError(f"{name}: conv kernel must have shape (out_ch, in_ch, kh, kw)")
    out_ch, in_ch, kh, kw = kernel.shape
    if int(item["out_ch"]) != out_ch:
        raise DimensionMismatchError(f"{name}: out_ch disagrees with kernel shape")
    stride = int(item["stride"])
    padding = int(item["padding"])
    bias = np.asarray(item.get("bias", np.zeros(out_ch)), dtype=np.float64)
    if bias.shape != (out_ch,):
        raise DimensionMismatchError(f"{name}: conv bias must have out_ch entries")
    if "in_hw" in item:
        in_h, in_w = (int(v) for v in item["in_hw"])
    else:
        hw = in_width // in_ch
        side = math.isqrt(hw)
        if in_ch * side * side != in_width:
            raise DimensionMismatchError(
                f"{name}: cannot infer square spatial shape from width {in_width} "
                f"and {in_ch} channels; provide 'in_hw'"
            )
        in_h = in_w = side
    out_h = (in_h + 2 * padding - kh) // stride + 1
    out_w = (in_w + 2 * padding - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionMismatchError(f"{name}: kernel does not fit the input")

    W = np.zeros((out_ch * out_h * out_w, in_ch * in_h * in_w))
    b = np.zeros(out_ch * out_h * out_w)
    for co in range(out_ch):
        for oy in range(out_h):
            for ox in range(out_w):
                row = (co * out_h + oy) * out_w + ox
                b[row] = bias[co]
                for ci in range(in_ch):
                    for ky in range(kh):
                        iy = oy * stride - padding + ky
                        if not 0 <= iy < in_h:
                            continue
                        for kx in range(kw):
                            ix = ox * stride - padding + kx
                            if not 0 <= ix < in_w:
                                continue
                            col = (ci * in_h + iy) * in_w + ix
                            W[row, col] = kernel[co, ci, ky, kx]
    meta = ConvMeta(out_ch, in_ch, kh, kw, stride, padding, in_h, in_w, out_h, out_w)
    return Affine(W, b, meta)


def save_network(network: Network, path: str) -> None:
    """Write a network back out; round-trips bit-exactly through load."""
    with open(path, "w") as fh:
        json.dump(network_to_dict(network), fh)


def network_to_dict(network: Network) -> dict:
    return {"input_dim": network.input_dim, "layers": _layers_to_list(network.layers)}


def _layers_to_list(chain: Sequence[Layer]) -> list:
    out = []
    for layer in chain:
        if isinstance(layer, Affine):
            item = {"type": "affine", "W": layer.W.tolist(), "b": layer.b.tolist()}
            if layer.conv_meta is not None:
                item["conv_meta"] = vars(layer.conv_meta)
            out.append(item)
        elif isinstance(layer, ReLU):
            out.append({"type": "relu"})
        else:
            out.append({"type": "residual", "branch": _layers_to_list(layer.branch)})
    return out


def load_spec(path: str, network: Network) -> VerificationProblem:
    """Load the JSON problem format against an already-loaded network."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise NetworkFormatError(f"cannot parse spec file {path}: {exc}") from exc
    return problem_from_dict(doc, network)


_P_NAMES = {"inf": np.inf, "2": 2.0, "1": 1.0}


def problem_from_dict(doc: dict, network: Network) -> VerificationProblem:
    try:
        x0 = np.asarray(doc["x0"], dtype=np.float64)
        eps = float(doc["eps"])
        p = _P_NAMES[str(doc.get("p", "inf"))]
        clip = doc.get("clip")
        prop = doc["property"]
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"malformed spec file: {exc}") from exc
    if clip is not None:
        clip = (float(clip[0]), float(clip[1]))
    if "robustness" in prop:
        spec = RobustnessSpec(int(prop["robustness"]["label"]), int(prop["robustness"]["classes"]))
        if spec.classes != network.output_dim:
            raise DimensionMismatchError("robustness class count != network output width")
        rows, offsets = spec.rows()
    else:
        rows = np.asarray(prop["rows"], dtype=np.float64)
        offsets = np.asarray(
            prop.get("offsets", np.zeros(np.atleast_2d(rows).shape[0])), dtype=np.float64
        )
    return VerificationProblem(network, x0, eps, p, rows, offsets, clip)
