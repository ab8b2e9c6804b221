"""Dense neural-network core.

Small fully-connected networks on numpy with deterministic arithmetic:
parameters and activations are float32, dot products accumulate in
float64 before rounding back down.  Identical (net, batch) inputs give
bitwise-identical results on one platform, which the gradient-exchange
protocol relies on to keep discriminator replicas in lockstep.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

F32 = np.float32

# Slope of the negative branch of leaky_relu.
LEAKY_SLOPE = F32(0.2)

ACTIVATIONS = ("identity", "relu", "leaky_relu")


class ShapeError(ValueError):
    """Array shape does not match the network contract."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x), dtype=F32)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


def _apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, F32(0))
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad_from_output(name: str, out: np.ndarray) -> np.ndarray:
    # All three activations let the derivative be recovered from the
    # output sign, so forward only needs to keep post-activation values.
    if name == "identity":
        return np.ones_like(out)
    if name == "relu":
        return (out > 0).astype(F32)
    if name == "leaky_relu":
        return np.where(out > 0, F32(1), LEAKY_SLOPE)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    """One affine layer: y = act(x @ weights.T + bias).

    weights has shape [out_dim, in_dim], bias [out_dim], both float32.
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = as_f32(self.weights)
        self.bias = as_f32(self.bias)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("weights must be 2-d and bias 1-d")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ShapeError("bias length must equal the layer's out_dim")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, activation: str, rng: np.random.Generator) -> "DenseLayer":
        # Glorot uniform: +-sqrt(6 / (fan_in + fan_out)), zero bias.
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(weights=as_f32(w), bias=np.zeros(out_dim, dtype=F32), activation=activation)


@dataclass
class Mlp:
    """A stack of dense layers with a role tag for bookkeeping."""

    layers: list[DenseLayer]
    role: str = "generic"

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("Mlp needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0].in_dim, *(ly.out_dim for ly in self.layers))

    @property
    def activations(self) -> tuple[str, ...]:
        return tuple(ly.activation for ly in self.layers)


def seed_key(base: int, *tags: int) -> list[int]:
    """Derive an independent PRNG key from a base seed plus tag ints."""
    return [int(base) & 0xFFFFFFFF, *[int(t) & 0xFFFFFFFF for t in tags]]


def build_mlp(dims: tuple[int, ...], activations: tuple[str, ...], role: str, seed) -> Mlp:
    """Build an Mlp with Glorot-uniform weights from a seed.

    dims = (in, h1, ..., out); activations has len(dims) - 1 entries.
    """
    if len(dims) < 2:
        raise ShapeError("dims needs at least an input and an output size")
    if len(activations) != len(dims) - 1:
        raise ShapeError("need one activation per layer")
    rng = np.random.default_rng(seed)
    layers = [
        DenseLayer.init(dims[i], dims[i + 1], activations[i], rng)
        for i in range(len(dims) - 1)
    ]
    return Mlp(layers=layers, role=role)


def copy_mlp(net: Mlp) -> Mlp:
    return Mlp(
        layers=[
            DenseLayer(ly.weights.copy(), ly.bias.copy(), ly.activation)
            for ly in net.layers
        ],
        role=net.role,
    )


def param_count(net: Mlp) -> int:
    return sum(ly.weights.size + ly.bias.size for ly in net.layers)


def mlp_weights_bytes(net: Mlp) -> bytes:
    """Parameters serialized in canonical order: per layer, weights row-major then bias."""
    chunks = []
    for ly in net.layers:
        chunks.append(np.ascontiguousarray(ly.weights, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(ly.bias, dtype="<f4").tobytes())
    return b"".join(chunks)


def load_mlp_weights(net: Mlp, raw: bytes) -> Mlp:
    """Fill net's parameters in place from canonical-order float32 bytes."""
    need = 4 * param_count(net)
    if len(raw) != need:
        raise ShapeError(f"weight payload is {len(raw)} bytes, expected {need}")
    flat = np.frombuffer(raw, dtype="<f4")
    pos = 0
    for ly in net.layers:
        n = ly.weights.size
        ly.weights = flat[pos:pos + n].reshape(ly.weights.shape).astype(F32)
        pos += n
        n = ly.bias.size
        ly.bias = flat[pos:pos + n].astype(F32)
        pos += n
    return net


def mlp_digest(net: Mlp) -> str:
    """Stable fingerprint of the exact parameter bits."""
    return hashlib.blake2b(mlp_weights_bytes(net), digest_size=16).hexdigest()


def _check_batch(net: Mlp, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 2:
        raise ShapeError(f"batch must be 2-d, got shape {batch.shape}")
    if batch.shape[1] != net.in_dim:
        raise ShapeError(f"batch width {batch.shape[1]} does not match net input {net.in_dim}")
    if batch.dtype != F32:
        batch = as_f32(batch)
    return batch


def mlp_forward(net: Mlp, batch: np.ndarray) -> list[np.ndarray]:
    """Forward pass; returns [input, act_1, ..., act_L] (last entry is the output).

    Matrix products run in float64 and are rounded back to float32 per
    layer, keeping the arithmetic deterministic and replica-stable.
    """
    batch = _check_batch(net, batch)
    acts = [batch]
    a = batch
    for ly in net.layers:
        z64 = a.astype(np.float64) @ ly.weights.T.astype(np.float64) + ly.bias.astype(np.float64)
        a = _apply_activation(ly.activation, z64.astype(F32))
        acts.append(a)
    _check_finite(acts[-1], "forward output")
    return acts


@dataclass
class GradientSet:
    """Per-layer (d_weights, d_bias) pairs in the owning net's layer order."""

    entries: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @classmethod
    def zeros_for(cls, net: Mlp) -> "GradientSet":
        return cls([
            (np.zeros_like(ly.weights), np.zeros_like(ly.bias)) for ly in net.layers
        ])

    def add_(self, other: "GradientSet") -> "GradientSet":
        if len(self.entries) != len(other.entries):
            raise ShapeError("gradient sets have different layer counts")
        for (dw, db), (ow, ob) in zip(self.entries, other.entries):
            dw += ow
            db += ob
        return self

    def plus(self, other: "GradientSet") -> "GradientSet":
        """Elementwise sum with self as the left addend (order is part of the contract)."""
        if len(self.entries) != len(other.entries):
            raise ShapeError("gradient sets have different layer counts")
        return GradientSet([
            (dw + ow, db + ob)
            for (dw, db), (ow, ob) in zip(self.entries, other.entries)
        ])

    def minus(self, other: "GradientSet") -> "GradientSet":
        if len(self.entries) != len(other.entries):
            raise ShapeError("gradient sets have different layer counts")
        return GradientSet([
            (dw - ow, db - ob)
            for (dw, db), (ow, ob) in zip(self.entries, other.entries)
        ])

    def scaled(self, s: float) -> "GradientSet":
        s32 = F32(s)
        return GradientSet([(dw * s32, db * s32) for dw, db in self.entries])

    def is_zero(self) -> bool:
        return all(not dw.any() and not db.any() for dw, db in self.entries)

    def allfinite(self) -> bool:
        return all(np.isfinite(dw).all() and np.isfinite(db).all() for dw, db in self.entries)

    def sq_distance(self, other: "GradientSet") -> float:
        tot = 0.0
        for (dw, db), (ow, ob) in zip(self.entries, other.entries):
            tot += float(np.sum((dw.astype(np.float64) - ow.astype(np.float64)) ** 2))
            tot += float(np.sum((db.astype(np.float64) - ob.astype(np.float64)) ** 2))
        return tot

    def to_bytes(self) -> bytes:
        chunks = []
        for dw, db in self.entries:
            chunks.append(np.ascontiguousarray(dw, dtype="<f4").tobytes())
            chunks.append(np.ascontiguousarray(db, dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes, like: Mlp) -> "GradientSet":
        need = 4 * param_count(like)
        if len(raw) != need:
            raise ShapeError(f"gradient payload is {len(raw)} bytes, expected {need}")
        flat = np.frombuffer(raw, dtype="<f4")
        entries = []
        pos = 0
        for ly in like.layers:
            n = ly.weights.size
            dw = flat[pos:pos + n].reshape(ly.weights.shape).astype(F32)
            pos += n
            n = ly.bias.size
            db = flat[pos:pos + n].astype(F32)
            pos += n
            entries.append((dw, db))
        return cls(entries)


def mlp_backward(net: Mlp, acts: list[np.ndarray], output_grad: np.ndarray) -> tuple[GradientSet, np.ndarray]:
    """Backward pass given forward activations and dLoss/dOutput.

    Returns (parameter gradients in layer order, gradient w.r.t. the input
    batch).  Gradients are plain vector-Jacobian products: any 1/batch
    normalization belongs to the loss that produced output_grad.
    """
    if len(acts) != len(net.layers) + 1:
        raise ShapeError("activations do not match the network depth")
    g = as_f32(output_grad)
    if g.shape != acts[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} does not match output {acts[-1].shape}")
    entries: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(len(net.layers) - 1, -1, -1):
        ly = net.layers[i]
        dz = g * _activation_grad_from_output(ly.activation, acts[i + 1])
        dz64 = dz.astype(np.float64)
        a_in64 = acts[i].astype(np.float64)
        dw = (dz64.T @ a_in64).astype(F32)
        db = dz64.sum(axis=0).astype(F32)
        g = (dz64 @ ly.weights.astype(np.float64)).astype(F32)
        entries.append((dw, db))
    entries.reverse()
    grads = GradientSet(entries)
    if not grads.allfinite():
        raise NumericError("non-finite values in parameter gradients")
    return grads, g


@dataclass
class SgdState:
    """Plain SGD: w -= lr * g."""

    lr: float

    def step(self, net: Mlp, grads: GradientSet) -> None:
        lr = F32(self.lr)
        for ly, (dw, db) in zip(net.layers, grads.entries):
            ly.weights -= lr * dw
            ly.bias -= lr * db


@dataclass
class AdamState:
    """Adam with bias correction; moments in float32."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    moments: list[tuple[np.ndarray, np.ndarray]] | None = None
    second: list[tuple[np.ndarray, np.ndarray]] | None = None

    def _ensure(self, net: Mlp) -> None:
        if self.moments is None:
            self.moments = [(np.zeros_like(ly.weights), np.zeros_like(ly.bias)) for ly in net.layers]
            self.second = [(np.zeros_like(ly.weights), np.zeros_like(ly.bias)) for ly in net.layers]

    def step(self, net: Mlp, grads: GradientSet) -> None:
        self._ensure(net)
        self.t += 1
        b1, b2 = F32(self.beta1), F32(self.beta2)
        one = F32(1.0)
        c1 = F32(1.0 - self.beta1 ** self.t)
        c2 = F32(1.0 - self.beta2 ** self.t)
        lr, eps = F32(self.lr), F32(self.eps)
        for i, (ly, (dw, db)) in enumerate(zip(net.layers, grads.entries)):
            mw, mb = self.moments[i]
            vw, vb = self.second[i]
            mw *= b1
            mw += (one - b1) * dw
            mb *= b1
            mb += (one - b1) * db
            vw *= b2
            vw += (one - b2) * dw * dw
            vb *= b2
            vb += (one - b2) * db * db
            ly.weights -= lr * (mw / c1) / (np.sqrt(vw / c2) + eps)
            ly.bias -= lr * (mb / c1) / (np.sqrt(vb / c2) + eps)


Optimizer = SgdState | AdamState


def optimizer_step(net: Mlp, grads: GradientSet, opt: Optimizer) -> Mlp:
    """Apply one update in place; replica-deterministic for identical inputs."""
    if len(grads.entries) != len(net.layers):
        raise ShapeError("gradient set does not match network depth")
    for ly, (dw, db) in zip(net.layers, grads.entries):
        if dw.shape != ly.weights.shape or db.shape != ly.bias.shape:
            raise ShapeError("gradient shapes do not match layer shapes")
    opt.step(net, grads)
    return net


# Fixed entropy for the power-iteration start vector; shape-keyed so the
# start vector is a pure function of the matrix size.
_POWER_SEED = 0x5EED

def spectral_norm(matrix: np.ndarray, max_iters: int = 100, tol: float = 1e-6) -> float:
    """Largest singular value via power iteration on M^T M.

    Runs a rank-2 subspace iteration (power iteration plus one trailing
    vector) with Rayleigh-Ritz extraction, so near-degenerate leading
    singular values do not stall convergence.  Stops once the Ritz
    residual guarantees an absolute error below tol.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError("spectral_norm expects a 2-d matrix")
    if m.size == 0:
        raise ShapeError("spectral_norm expects a non-empty matrix")
    b = m.T @ m
    n = b.shape[0]
    rng = np.random.default_rng([_POWER_SEED, m.shape[0], m.shape[1]])
    k = min(2, n)
    v = rng.standard_normal((n, k))
    v, _ = np.linalg.qr(v)
    lam = 0.0
    for _ in range(max_iters):
        w = b @ v
        if not w.any():
            return 0.0
        v, _ = np.linalg.qr(w)
        proj = v.T @ (b @ v)
        proj = (proj + proj.T) / 2.0
        eigvals, eigvecs = np.linalg.eigh(proj)
        lam = float(eigvals[-1])
        top = v @ eigvecs[:, -1]
        resid = float(np.linalg.norm(b @ top - lam * top))
        sigma = np.sqrt(max(lam, 0.0))
        # |sigma_est - sigma| <= resid / (2 sigma) for symmetric b.
        if resid <= 2.0 * tol * max(sigma, tol):
            return sigma
    return float(np.sqrt(max(lam, 0.0)))


def project_spectral(matrix: np.ndarray, cap: float, max_iters: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Scale matrix down so its spectral norm is at most cap: M * 1/max(1, sigma/cap)."""
    if not np.isfinite(cap) or cap <= 0:
        raise ValueError("cap must be positive and finite")
    m = as_f32(matrix)
    sigma = spectral_norm(m, max_iters=max_iters, tol=tol)
    if sigma <= cap:
        return m.copy()
    return m * F32(cap / sigma)


def lipschitz_constant(net: Mlp) -> float:
    """Upper bound on the network's Lipschitz constant (L2 operator norms).

    Product of per-layer spectral norms; identity, relu and leaky_relu are
    all 1-Lipschitz so activations contribute factor 1.
    """
    prod = 1.0
    for ly in net.layers:
        prod *= spectral_norm(ly.weights)
    return float(prod)


def project_mlp_(net: Mlp, cap: float) -> Mlp:
    """Project every layer's weight matrix to spectral norm <= cap, in place."""
    for ly in net.layers:
        ly.weights = project_spectral(ly.weights, cap)
    return net


def save_mlp(net: Mlp, path) -> None:
    arrays = {}
    for i, ly in enumerate(net.layers):
        arrays[f"w{i}"] = ly.weights
        arrays[f"b{i}"] = ly.bias
    arrays["activations"] = np.array([ly.activation for ly in net.layers])
    arrays["role"] = np.array(net.role)
    np.savez(path, **arrays)


def load_mlp(path) -> Mlp:
    with np.load(path, allow_pickle=False) as data:
        acts = [str(a) for a in data["activations"]]
        layers = [
            DenseLayer(data[f"w{i}"], data[f"b{i}"], acts[i]) for i in range(len(acts))
        ]
        return Mlp(layers=layers, role=str(data["role"]))
