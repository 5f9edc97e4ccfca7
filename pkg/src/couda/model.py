"""Peer networks, shared discriminator and shared noise co-adaptation layer."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    d_x: int = 2
    hidden: tuple[int, ...] = (32, 32)
    d_f: int = 16
    disc_hidden: int = 16
    n_classes: int = 3
    single_network: bool = False
    beta_noise_init: float = 2.0


@dataclass
class PeerForward:
    f: Tensor  # (n, d_f)
    y_hat: Tensor  # (n, K)
    d_hat: Tensor  # (n, 1)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class CoudaModel:
    """Two peers (P1/C1, P2/C2), shared discriminator D, shared noise layer Z.

    Parameters live in ``self.params`` as named leaf tensors:
    ``P{t}.W{i}``/``P{t}.b{i}`` for the feature extractor layers,
    ``C{t}.W``/``C{t}.b`` for the classifiers, ``D.W{i}``/``D.b{i}`` and
    ``Z.w`` (K, K, d_f) / ``Z.b`` (K, K).
    """

    def __init__(self, arch: Architecture, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.arch = arch
        self.z_calls = 0
        if params is not None:
            self.params = params
            return
        ss = np.random.SeedSequence(seed)
        # one independent stream per component, so P2 differs from P1 only by its stream
        rng_p1, rng_p2, rng_c1, rng_c2, rng_d = (np.random.default_rng(s) for s in ss.spawn(5))
        p: dict[str, np.ndarray] = {}
        widths = [arch.d_x, *arch.hidden, arch.d_f]
        for tau, rp, rc in ((1, rng_p1, rng_c1), (2, rng_p2, rng_c2)):
            if tau == 2 and arch.single_network:
                break
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                p[f"P{tau}.W{i}"] = _glorot(rp, a, b)
                p[f"P{tau}.b{i}"] = np.zeros((1, b))
            p[f"C{tau}.W"] = _glorot(rc, arch.d_f, arch.n_classes)
            p[f"C{tau}.b"] = np.zeros((1, arch.n_classes))
        p["D.W0"] = _glorot(rng_d, arch.d_f, arch.disc_hidden)
        p["D.b0"] = np.zeros((1, arch.disc_hidden))
        p["D.W1"] = _glorot(rng_d, arch.disc_hidden, 1)
        p["D.b1"] = np.zeros((1, 1))
        K = arch.n_classes
        p["Z.w"] = np.zeros((K, K, arch.d_f))
        p["Z.b"] = np.eye(K) * arch.beta_noise_init
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    # ------------------------------------------------------------ structure

    @property
    def n_classes(self) -> int:
        return self.arch.n_classes

    @property
    def peers(self) -> tuple[int, ...]:
        return (1,) if self.arch.single_network else (1, 2)

    def _n_layers(self, tau: int) -> int:
        return sum(1 for k in self.params if k.startswith(f"P{tau}.W"))

    def group(self, name: str) -> list[str]:
        """Parameter names of an optimizer group: ``"networks"`` or ``"discriminator"``."""
        if name == "discriminator":
            return [k for k in self.params if k.startswith("D.")]
        if name == "networks":
            return [k for k in self.params if not k.startswith("D.")]
        raise ModelError(f"unknown parameter group {name!r}")

    def swap_peers(self) -> "CoudaModel":
        if self.arch.single_network:
            raise ModelError("single-network model has no second peer")
        swapped = {}
        for k, v in self.params.items():
            if k[0] in "PC" and k[1] in "12":
                k = k[0] + ("2" if k[1] == "1" else "1") + k[2:]
            swapped[k] = v
        return CoudaModel(self.arch, params=swapped)

    # ------------------------------------------------------------ forward

    def _check_peer(self, tau: int) -> None:
        if tau not in self.peers:
            raise ModelError(f"invalid peer index {tau}")

    def forward_features(self, tau: int, x) -> Tensor:
        self._check_peer(tau)
        h = dc.as_tensor(x)
        if h.data.ndim != 2 or h.shape[1] != self.params[f"P{tau}.W0"].shape[0]:
            raise ModelError(f"expected input of width {self.arch.d_x}, got shape {h.shape}")
        for i in range(self._n_layers(tau)):
            h = dc.relu(dc.add(dc.matmul(h, self.params[f"P{tau}.W{i}"]), self.params[f"P{tau}.b{i}"]))
        return h

    def _check_width(self, f: Tensor) -> None:
        if f.data.ndim != 2 or f.shape[1] != self.arch.d_f:
            raise ModelError(f"expected features of width {self.arch.d_f}, got shape {f.shape}")

    def classify(self, tau: int, f) -> Tensor:
        self._check_peer(tau)
        f = dc.as_tensor(f)
        self._check_width(f)
        logits = dc.add(dc.matmul(f, self.params[f"C{tau}.W"]), self.params[f"C{tau}.b"])
        return dc.softmax_rowwise(logits)

    def discriminate(self, f, params: dict[str, Tensor] | None = None) -> Tensor:
        p = self.params if params is None else params
        f = dc.as_tensor(f)
        self._check_width(f)
        h = dc.relu(dc.add(dc.matmul(f, p["D.W0"]), p["D.b0"]))
        return dc.sigmoid(dc.add(dc.matmul(h, p["D.W1"]), p["D.b1"]))

    def noise_transition_batch(self, f) -> Tensor:
        """Per-sample transition matrices as an (n*K, K) tensor.

        Rows ``i*K:(i+1)*K`` hold T for sample i, ``T[k, m] = p(z=m | y=k, f_i)``.
        """
        self.z_calls += 1
        f = dc.as_tensor(f)
        self._check_width(f)
        K, n = self.n_classes, f.shape[0]
        w = dc.transpose(dc.reshape(self.params["Z.w"], (K * K, self.arch.d_f)))
        b = dc.reshape(self.params["Z.b"], (1, K * K))
        logits = dc.add(dc.matmul(f, w), b)
        return dc.softmax_rowwise(dc.reshape(logits, (n * K, K)))

    def noise_transition(self, f) -> np.ndarray:
        f = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
        if f.shape != (self.arch.d_f,):
            raise ModelError(f"expected a single feature vector of length {self.arch.d_f}")
        return self.noise_transition_batch(f[None, :]).data.copy()

    def adapt_batch(self, y_hat: Tensor, f: Tensor) -> Tensor:
        """Noise-adapted predictions ``z_hat[i, m] = sum_k T_i[k, m] y_hat[i, k]``."""
        K, n = self.n_classes, y_hat.shape[0]
        T = self.noise_transition_batch(f)
        weighted = dc.mul(T, dc.reshape(y_hat, (n * K, 1)))
        return dc.sum(dc.reshape(weighted, (n, K, K)), axis=1)

    def peer_forward(self, tau: int, x, detach_features: bool = False) -> PeerForward:
        f = self.forward_features(tau, x)
        if detach_features:
            f = f.detach()
        return PeerForward(f=f, y_hat=self.classify(tau, f), d_hat=self.discriminate(f))

    def predict_proba(self, x) -> np.ndarray:
        """Ensemble prediction through the clean path; Z is never evaluated."""
        ys = [self.classify(t, self.forward_features(t, x)).data for t in self.peers]
        return ys[0].copy() if len(ys) == 1 else (ys[0] + ys[1]) / 2.0

    def ensemble_predict(self, x) -> np.ndarray:
        return self.predict_proba(x)

    def noise_diag(self, x) -> float:
        """Mean diagonal of the estimated transition, averaged over samples (peer 1 features)."""
        f = self.forward_features(1, x)
        K = self.n_classes
        T = self.noise_transition_batch(f).data.reshape(-1, K, K)
        return float(np.mean(np.diagonal(T, axis1=1, axis2=2)))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def checksum(self, names: Sequence[str] | None = None) -> bytes:
        names = sorted(self.params) if names is None else names
        return b"".join(self.params[k].data.tobytes() for k in names)


def adapt_prediction(T, y_hat) -> np.ndarray:
    """``z_hat[m] = sum_k T[k, m] * y_hat[k]`` for a single sample."""
    T = np.asarray(T, dtype=np.float64)
    y = np.asarray(y_hat, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] != T.shape[1] or y.shape != (T.shape[0],):
        raise ModelError(f"shape mismatch: T {T.shape}, y_hat {y.shape}")
    if np.any(T < 0) or np.any(np.abs(T.sum(axis=1) - 1.0) > 1e-6):
        raise ModelError("T is not row-stochastic")
    K = T.shape[0]
    out = dc.sum(dc.reshape(dc.mul(Tensor(T), Tensor(y.reshape(K, 1))), (1, K, K)), axis=1)
    return out.data[0]


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   magic  b"COUDACK1"
#   u32    number of arrays
#   per array, in sorted name order:
#     u32 name length, UTF-8 name bytes
#     u32 ndim, ndim x u64 dims
#     prod(dims) x float64 little-endian values, row-major

_MAGIC = b"COUDACK1"


def save_checkpoint(model: CoudaModel, path) -> None:
    chunks = [_MAGIC, struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_arrays(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise ModelError(f"{path}: not a checkpoint file")
    pos = 8
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(buf):
        raise ModelError(f"{path}: trailing bytes in checkpoint")
    return out


def load_checkpoint(path) -> CoudaModel:
    arrays = read_arrays(path)
    K = arrays["Z.b"].shape[0]
    d_f = arrays["Z.w"].shape[2]
    n_layers = sum(1 for k in arrays if k.startswith("P1.W"))
    hidden = tuple(arrays[f"P1.W{i}"].shape[1] for i in range(n_layers - 1))
    arch = Architecture(
        d_x=arrays["P1.W0"].shape[0],
        hidden=hidden,
        d_f=d_f,
        disc_hidden=arrays["D.W0"].shape[1],
        n_classes=K,
        single_network="P2.W0" not in arrays,
    )
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return CoudaModel(arch, params=params)
