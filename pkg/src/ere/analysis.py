"""Desk-scale robustness and ablation experiments on a toy network.

A small feed-forward regression net stands in for a large fine-tuned
model: "pre-training" fits a synthetic teacher, "fine-tuning" continues
on the same teacher perturbed by a fixed low-rank linear map, which
induces low-rank weight residuals. The experiments compare the
sensitivity of full weights vs weight residuals to log-normal noise and
rank reduction, and measure reconstruction quality of the codec across
the prior-mixing grid. Everything is deterministic given its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codec import EreConfig, decode, encode
from .quantizer import decode_half, dequantize, encode_half, quantize, stiefel_project
from .spectral import svd_full, truncate
from .tensor_archive import TensorMap

TOY_WIDTHS = (32, 64, 64, 16)
PROBE_SEED = 7021
PROBE_COUNT = 256


@dataclass
class ToyNet:
    """Plain MLP: tanh (or relu) hidden layers, linear feature output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ w + b
            h = np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)
        return h @ self.weights[-1] + self.biases[-1]

    def to_tensor_map(self) -> TensorMap:
        tensors = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            tensors[f"layers.{i}.weight"] = w.astype(np.float32)
            tensors[f"layers.{i}.bias"] = b.astype(np.float32)
        return TensorMap(tensors)

    @classmethod
    def from_tensor_map(cls, tensors: TensorMap, activation: str = "tanh") -> "ToyNet":
        weights, biases = [], []
        i = 0
        while f"layers.{i}.weight" in tensors:
            weights.append(tensors[f"layers.{i}.weight"].astype(np.float64))
            biases.append(tensors[f"layers.{i}.bias"].astype(np.float64))
            i += 1
        if not weights:
            raise ValueError("tensor map does not contain toy-net layers")
        return cls(weights=weights, biases=biases, activation=activation)


@dataclass(frozen=True)
class PerturbConfig:
    sigma: float
    mode: str  # "full" | "residual"
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.mode not in ("full", "residual"):
            raise ValueError(f"mode must be 'full' or 'residual', got {self.mode!r}")


def make_probes(dim: int, count: int = PROBE_COUNT, seed: int = PROBE_SEED) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((count, dim))


def perturb(theta: TensorMap, delta: TensorMap, cfg: PerturbConfig) -> TensorMap:
    """Log-normal elementwise perturbation of the 2-D weights.

    mode="full" scales the fine-tuned weight itself: (theta + delta) * exp(Z);
    mode="residual" scales only the residual: theta + exp(Z) * delta, with
    Z ~ N(0, sigma^2) i.i.d. per parameter. Biases and other non-2-D
    tensors pass through as theta + delta.
    """
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for name, base in theta.items():
        if name not in delta or delta[name].shape != base.shape:
            raise ValueError(f"tensor {name!r} missing or shape-mismatched in delta")
        d = delta[name].astype(np.float64)
        t = base.astype(np.float64)
        if base.ndim != 2:
            out[name] = (t + d).astype(np.float32)
            continue
        z = rng.normal(0.0, cfg.sigma, size=base.shape) if cfg.sigma > 0 else np.zeros(base.shape)
        noise = np.exp(z)
        combined = (t + d) * noise if cfg.mode == "full" else t + noise * d
        out[name] = combined.astype(np.float32)
    return TensorMap(out)


def lowrank_perturb(theta: TensorMap, delta: TensorMap, keep_fraction: float,
                    mode: str) -> TensorMap:
    """Rank-reduce either the full weights or just the residuals.

    Each 2-D tensor keeps ceil(keep_fraction * min(n, m)) singular
    triplets of the full weight (mode="full") or of the residual
    (mode="residual", re-added to theta afterward).
    """
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in [0, 1], got {keep_fraction}")
    if mode not in ("full", "residual"):
        raise ValueError(f"mode must be 'full' or 'residual', got {mode!r}")
    out = {}
    for name, base in theta.items():
        d = delta[name].astype(np.float64)
        t = base.astype(np.float64)
        if base.ndim != 2:
            out[name] = (t + d).astype(np.float32)
            continue
        k = math.ceil(keep_fraction * min(base.shape))
        if mode == "full":
            out[name] = truncate(svd_full(t + d), k).reconstruct().astype(np.float32)
        else:
            out[name] = (t + truncate(svd_full(d), k).reconstruct()).astype(np.float32)
    return TensorMap(out)


def feature_cosine(net_a: ToyNet, net_b: ToyNet, probes: np.ndarray) -> float:
    """Mean cosine similarity of the two nets' feature outputs over probes."""
    fa = net_a.forward(probes)
    fb = net_b.forward(probes)
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("zero-norm feature vector; cosine undefined")
    return float(np.mean(np.sum(fa * fb, axis=1) / (na * nb)))


@dataclass(frozen=True)
class ToyTrainConfig:
    widths: tuple[int, ...] = TOY_WIDTHS
    batch: int = 512
    pretrain_steps: int = 400
    finetune_steps: int = 200
    lr: float = 0.05
    shift_rank: int = 2
    shift_scale: float = 0.6


def _init_net(rng: np.random.Generator, widths: tuple[int, ...]) -> ToyNet:
    weights = [rng.standard_normal((a, b)) / math.sqrt(a)
               for a, b in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(b) for b in widths[1:]]
    return ToyNet(weights=weights, biases=biases)


def _gd_steps(net: ToyNet, x: np.ndarray, y: np.ndarray, steps: int, lr: float) -> float:
    """Full-batch gradient descent on mean squared error; returns final loss."""
    loss = math.inf
    for _ in range(steps):
        acts = [x]
        h = x
        for w, b in zip(net.weights[:-1], net.biases[:-1]):
            h = np.tanh(h @ w + b)
            acts.append(h)
        pred = h @ net.weights[-1] + net.biases[-1]
        err = pred - y
        loss = float(np.mean(err ** 2))
        if not math.isfinite(loss):
            raise RuntimeError("toy training diverged (non-finite loss)")
        grad = 2.0 * err / err.size
        for i in range(len(net.weights) - 1, -1, -1):
            net.weights[i] = net.weights[i] - lr * (acts[i].T @ grad)
            net.biases[i] = net.biases[i] - lr * grad.sum(axis=0)
            if i > 0:
                grad = (grad @ net.weights[i].T) * (1.0 - acts[i] ** 2)
    return loss


def _mse(net: ToyNet, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((net.forward(x) - y) ** 2))


def train_toy_pair(seed: int, config: ToyTrainConfig = ToyTrainConfig(),
                   stats: dict | None = None) -> tuple[TensorMap, TensorMap]:
    """Pre-train on a synthetic teacher, then fine-tune on a shifted task.

    The task shift adds a fixed rank-``shift_rank`` linear map to the
    teacher's output, so the induced weight residuals are approximately
    low-rank. Returns (theta, theta_prime) snapshots; ``stats``, when
    given, receives the loss checkpoints.
    """
    rng = np.random.default_rng(seed)
    widths = config.widths
    x = rng.standard_normal((config.batch, widths[0]))
    t1 = rng.standard_normal((widths[0], widths[1])) / math.sqrt(widths[0])
    t2 = rng.standard_normal((widths[1], widths[-1])) / math.sqrt(widths[1])
    y = np.tanh(x @ t1) @ t2

    net = _init_net(rng, widths)
    pretrain_loss = _gd_steps(net, x, y, config.pretrain_steps, config.lr)
    theta = net.to_tensor_map()

    p = rng.standard_normal((widths[0], config.shift_rank)) / math.sqrt(widths[0])
    q = rng.standard_normal((config.shift_rank, widths[-1])) * config.shift_scale
    y_shift = y + (x @ p) @ q
    start_loss = _mse(net, x, y_shift)
    end_loss = _gd_steps(net, x, y_shift, config.finetune_steps, config.lr)
    theta_prime = net.to_tensor_map()
    if stats is not None:
        stats.update(pretrain_end_loss=pretrain_loss,
                     finetune_start_loss=start_loss,
                     finetune_end_loss=end_loss)
    return theta, theta_prime


def residual_map(theta: TensorMap, theta_prime: TensorMap) -> TensorMap:
    return TensorMap({name: theta_prime[name].astype(np.float32) - theta[name].astype(np.float32)
                      for name in theta.names()})


def uniform_lra_reference(theta: TensorMap, theta_prime: TensorMap, r_avg: int,
                          bits: int, min_dim_eligible: int = 8,
                          project: bool = True) -> TensorMap:
    """Uniform-rank reconstruction: every eligible layer truncated to r_avg.

    Uses the same quantization, half-precision storage, and projection
    primitives as the codec, so it matches an encode/decode round trip at
    alpha = 1 exactly.
    """
    out = {}
    for name, base in theta.items():
        ft = theta_prime[name]
        d = ft.astype(np.float32) - base.astype(np.float32)
        if base.ndim != 2 or min(base.shape) < min_dim_eligible or not d.any():
            out[name] = ft
            continue
        k = min(r_avg, min(base.shape))
        factors = truncate(svd_full(d), k)
        u = dequantize(quantize(factors.u, bits)).astype(np.float64)
        v = dequantize(quantize(factors.v, bits)).astype(np.float64)
        if project:
            u = stiefel_project(u, warn=False)
            v = stiefel_project(v, warn=False)
        dvals = decode_half(encode_half(factors.d)).astype(np.float64)
        out[name] = (base.astype(np.float64) + (u * dvals) @ v.T).astype(base.dtype)
    return TensorMap(out)


def alpha_sweep(theta: TensorMap, theta_prime: TensorMap, r_avg: int,
                alphas, bits: int = 4) -> list[tuple[float, float]]:
    """Feature cosine of the codec round trip across the mixing grid."""
    ref = ToyNet.from_tensor_map(theta_prime)
    probes = make_probes(ref.weights[0].shape[0])
    rows = []
    for alpha in alphas:
        cfg = EreConfig(prior_rank=r_avg, bits=bits, alpha=float(alpha))
        decoded = decode(theta, encode(theta, theta_prime, cfg))
        rows.append((float(alpha), feature_cosine(ToyNet.from_tensor_map(decoded), ref, probes)))
    return rows


def run_noise_experiment(seeds, sigmas) -> list[tuple[int, float, str, float]]:
    """Feature cosine vs the fine-tuned net under log-normal perturbation."""
    rows = []
    for seed in seeds:
        theta, theta_prime = train_toy_pair(seed)
        delta = residual_map(theta, theta_prime)
        ref = ToyNet.from_tensor_map(theta_prime)
        probes = make_probes(ref.weights[0].shape[0])
        for sigma in sigmas:
            for mode in ("full", "residual"):
                noisy = perturb(theta, delta, PerturbConfig(sigma=sigma, mode=mode, seed=seed))
                cos = feature_cosine(ToyNet.from_tensor_map(noisy), ref, probes)
                rows.append((seed, float(sigma), mode, cos))
    return rows


def run_lowrank_experiment(seeds, keep_fractions) -> list[tuple[int, float, str, float]]:
    """Feature cosine vs the fine-tuned net under rank reduction."""
    rows = []
    for seed in seeds:
        theta, theta_prime = train_toy_pair(seed)
        delta = residual_map(theta, theta_prime)
        ref = ToyNet.from_tensor_map(theta_prime)
        probes = make_probes(ref.weights[0].shape[0])
        for kf in keep_fractions:
            for mode in ("full", "residual"):
                reduced = lowrank_perturb(theta, delta, float(kf), mode)
                cos = feature_cosine(ToyNet.from_tensor_map(reduced), ref, probes)
                rows.append((seed, float(kf), mode, cos))
    return rows


def run_projection_ablation(seeds, bits_list, r_avg: int = 8
                            ) -> list[tuple[int, int, bool, float]]:
    """Codec round-trip quality with and without the Stiefel projection."""
    rows = []
    for seed in seeds:
        theta, theta_prime = train_toy_pair(seed)
        ref = ToyNet.from_tensor_map(theta_prime)
        probes = make_probes(ref.weights[0].shape[0])
        for bits in bits_list:
            archive = encode(theta, theta_prime, EreConfig(prior_rank=r_avg, bits=bits))
            for project in (True, False):
                decoded = decode(theta, archive, project=project)
                cos = feature_cosine(ToyNet.from_tensor_map(decoded), ref, probes)
                rows.append((seed, bits, project, cos))
    return rows
