"""Training: surrogate-gradient single models, deep ensembles, variational
inference.

Gradients flow through the spiking forward pass by backpropagation through
time. The non-differentiable threshold is handled in two modes:

* ``hard`` (training): the forward pass emits binary spikes; the backward
  pass substitutes the derivative of a sigmoid with slope ``kappa`` at the
  threshold crossing.
* ``smooth`` (gradient checking): the forward pass itself emits the sigmoid
  value, making the whole network differentiable so the analytic gradient
  can be compared against finite differences.

Deep ensembles repeat training from independent Gaussian initializations.
Variational inference optimizes a factorized Gaussian posterior over the
weights via the reparameterization trick, with the Kullback-Leibler term
computed in closed form against an isotropic Gaussian prior.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from spikecp.snn import Architecture, ModelParams, confidence, flatten_weights, unflatten_weights


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    surrogate_slope: float = 5.0
    weight_variance: float = 0.03  # init variance; doubles as the VI prior variance
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch size and learning rate must be positive")
        if self.surrogate_slope <= 0 or self.weight_variance <= 0:
            raise ValueError("surrogate slope and weight variance must be positive")


@dataclass(frozen=True)
class VariationalPosterior:
    """Factorized Gaussian over the flat weight vector.

    ``rho`` is unconstrained; the per-weight standard deviation is
    ``softplus(rho)``.
    """

    arch: Architecture
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        rho = np.asarray(self.rho, dtype=np.float64)
        if mu.shape != (self.arch.param_count,) or rho.shape != mu.shape:
            raise ValueError("posterior parameter layout does not match the architecture")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "rho", rho)

    @property
    def stddev(self) -> np.ndarray:
        return _softplus(self.rho)


@dataclass(frozen=True)
class Ensemble:
    members: tuple[ModelParams, ...]
    provenance: str  # "de" | "vi-sampled"
    seeds: tuple[int, ...]

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("an ensemble needs at least one member")
        archs = {m.arch for m in self.members}
        if len(archs) != 1:
            raise ValueError("all ensemble members must share one architecture")
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def arch(self) -> Architecture:
        return self.members[0].arch

    def __len__(self) -> int:
        return len(self.members)

    def take(self, k: int) -> "Ensemble":
        """First k members (used by ensemble-size sweeps)."""
        if not 1 <= k <= len(self.members):
            raise ValueError(f"cannot take {k} members from {len(self.members)}")
        return Ensemble(self.members[:k], self.provenance, self.seeds[:k])


def derive_seed(master: int, *key: int) -> int:
    """Child seed from (master, key path); stable and order-independent
    across members so they can be generated in parallel."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


def init_theta(arch: Architecture, cfg: TrainConfig) -> np.ndarray:
    """Gaussian initialization N(0, weight_variance) of the flat vector."""
    rng = _rng(cfg.seed)
    return rng.normal(0.0, np.sqrt(cfg.weight_variance), size=arch.param_count)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cross_entropy_and_grad(
    theta: np.ndarray,
    inputs: np.ndarray,
    labels: np.ndarray,
    arch: Architecture,
    kappa: float,
    smooth: bool = False,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(read-out spike counts at T) and its
    gradient w.r.t. the flat weight vector, by backpropagation through time.

    With ``smooth=True`` the spike nonlinearity is replaced by the sigmoid
    itself in the forward pass, so the returned gradient is exact for the
    relaxed network (finite-difference checkable). With ``smooth=False``
    the forward pass spikes; the same sigmoid derivative acts as the
    surrogate in the backward pass.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    weights = unflatten_weights(np.asarray(theta, dtype=np.float64), arch)
    batch, horizon, _ = inputs.shape
    n_layers = len(weights)
    beta_s, beta_m, vth = arch.beta_syn, arch.beta_mem, arch.threshold

    # forward, recording potentials and spikes for every layer and step
    pots = [np.empty((horizon, batch, w.shape[0])) for w in weights]
    spks = [np.empty((horizon, batch, w.shape[0])) for w in weights]
    trace = [np.zeros((batch, w.shape[0])) for w in weights]
    pot = [np.zeros((batch, w.shape[0])) for w in weights]
    spk = [np.zeros((batch, w.shape[0])) for w in weights]
    for t in range(horizon):
        x = inputs[:, t, :]
        for l, w in enumerate(weights):
            trace[l] = beta_s * trace[l] + x @ w.T
            pot[l] = beta_m * pot[l] + trace[l] - vth * spk[l]
            z = kappa * (pot[l] - vth)
            spk[l] = _sigmoid(z) if smooth else (pot[l] >= vth).astype(np.float64)
            pots[l][t] = pot[l]
            spks[l][t] = spk[l]
            x = spk[l]
    counts = spks[-1].sum(axis=0)  # (batch, C)

    probs = confidence(counts)
    nll = -np.log(
        np.clip(probs[np.arange(batch), labels], 1e-300, None)
    )
    loss = float(nll.mean())

    # d loss / d counts, shared by every step of the read-out layer
    g_counts = probs.copy()
    g_counts[np.arange(batch), labels] -= 1.0
    g_counts /= batch

    grads = [np.zeros_like(w) for w in weights]
    g_v_next = [np.zeros((batch, w.shape[0])) for w in weights]
    g_u_next = [np.zeros((batch, w.shape[0])) for w in weights]
    for t in range(horizon - 1, -1, -1):
        g_from_above = None
        for l in range(n_layers - 1, -1, -1):
            g_s = g_counts.copy() if l == n_layers - 1 else g_from_above
            # reset feedback: v_{t+1} includes -vth * s_t
            g_s = g_s - vth * g_v_next[l]
            z = kappa * (pots[l][t] - vth)
            sig = _sigmoid(z)
            g_v = g_s * (kappa * sig * (1.0 - sig)) + beta_m * g_v_next[l]
            g_u = g_v + beta_s * g_u_next[l]
            below = inputs[:, t, :] if l == 0 else spks[l - 1][t]
            grads[l] += g_u.T @ below
            g_from_above = g_u @ weights[l]
            g_v_next[l] = g_v
            g_u_next[l] = g_u
    return loss, flatten_weights(grads)


class _Adam:
    """Adaptive-moment optimizer with the default moment constants."""

    def __init__(self, size: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        m_hat = self.m / (1.0 - self.b1**self.t)
        v_hat = self.v / (1.0 - self.b2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _as_batch(data) -> tuple[np.ndarray, np.ndarray]:
    """Stack labeled examples into (inputs, labels) arrays."""
    if isinstance(data, tuple) and len(data) == 2:
        inputs, labels = data
        return np.asarray(inputs, dtype=np.float64), np.asarray(labels, dtype=np.int64)
    samples, labels = [], []
    for ex in data:
        if ex.label is None:
            raise ValueError("training requires labeled examples")
        samples.append(ex.samples)
        labels.append(ex.label)
    return np.stack(samples), np.asarray(labels, dtype=np.int64)


def _check_dataset(inputs: np.ndarray, labels: np.ndarray, arch: Architecture) -> None:
    if inputs.shape[0] == 0:
        raise ValueError("training dataset is empty")
    if inputs.shape[2] != arch.num_inputs:
        raise ValueError(
            f"dataset has {inputs.shape[2]} channels, architecture expects {arch.num_inputs}"
        )
    present = np.unique(labels)
    if present.min() < 0 or present.max() >= arch.num_classes:
        raise ValueError(f"labels {present.tolist()} outside 0..{arch.num_classes - 1}")
    if present.size < arch.num_classes:
        raise ValueError("every class needs at least one training example")


def train_single(
    data,
    arch: Architecture,
    cfg: TrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> ModelParams:
    """Surrogate-gradient training of one network.

    ``data`` is a list of labeled input sequences or an ``(inputs, labels)``
    array pair. With ``epochs=0`` the Gaussian initialization is returned
    unchanged. ``on_epoch(epoch, mean_loss)`` is invoked after each epoch.
    """
    inputs, labels = _as_batch(data)
    _check_dataset(inputs, labels, arch)
    theta = init_theta(arch, cfg)
    rng = _rng(derive_seed(cfg.seed, 1))  # shuffling stream, separate from init
    opt = _Adam(theta.size, cfg.learning_rate)
    n = inputs.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grad = cross_entropy_and_grad(
                theta, inputs[idx], labels[idx], arch, cfg.surrogate_slope
            )
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise RuntimeError(
                    f"non-finite training loss in epoch {epoch}, "
                    f"minibatch {start // cfg.batch_size}"
                )
            theta = opt.step(theta, grad)
            losses.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses)))
    return ModelParams(arch=arch, theta=theta)


def train_deep_ensemble(data, arch: Architecture, cfg: TrainConfig, k: int) -> Ensemble:
    """K independent trainings from independent Gaussian initializations."""
    if k < 1:
        raise ValueError("ensemble size must be at least 1")
    members, seeds = [], []
    for member in range(k):
        child = derive_seed(cfg.seed, 2, member)
        members.append(train_single(data, arch, replace(cfg, seed=child)))
        seeds.append(child)
    return Ensemble(members=tuple(members), provenance="de", seeds=tuple(seeds))


def gaussian_kl(mu: np.ndarray, sigma: np.ndarray, prior_var: float) -> float:
    """Closed-form KL(N(mu, sigma^2) || N(0, prior_var)), summed over weights."""
    prior_sd = np.sqrt(prior_var)
    return float(
        np.sum(np.log(prior_sd / sigma) + (sigma**2 + mu**2) / (2.0 * prior_var) - 0.5)
    )


def train_vi(
    data,
    arch: Architecture,
    cfg: TrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> VariationalPosterior:
    """Variational Gaussian posterior over the weights.

    Each minibatch draws one reparameterized weight sample
    ``theta = mu + softplus(rho) * eps`` and descends the negative evidence
    lower bound: surrogate cross-entropy plus the closed-form KL to the
    ``N(0, weight_variance)`` prior, scaled by minibatch/dataset size.
    ``on_epoch`` receives the mean per-minibatch objective.
    """
    inputs, labels = _as_batch(data)
    _check_dataset(inputs, labels, arch)
    n = inputs.shape[0]
    prior_var = cfg.weight_variance

    mu = init_theta(arch, cfg)
    rho = np.full(arch.param_count, _softplus_inv(0.5 * np.sqrt(prior_var)))
    rng = _rng(derive_seed(cfg.seed, 3))
    opt = _Adam(2 * arch.param_count, cfg.learning_rate)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        objectives = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            sigma = _softplus(rho)
            eps = rng.standard_normal(arch.param_count)
            theta = mu + sigma * eps
            ce, g_theta = cross_entropy_and_grad(
                theta, inputs[idx], labels[idx], arch, cfg.surrogate_slope
            )
            # per-example objective: minibatch-sum CE + (B/n) * KL, divided by B
            kl_scale = 1.0 / n
            objective = ce + kl_scale * gaussian_kl(mu, sigma, prior_var)
            if not np.isfinite(objective) or not np.all(np.isfinite(g_theta)):
                raise RuntimeError(
                    f"non-finite objective in epoch {epoch}, "
                    f"minibatch {start // cfg.batch_size}"
                )
            g_mu = g_theta + kl_scale * mu / prior_var
            g_sigma = g_theta * eps + kl_scale * (-1.0 / sigma + sigma / prior_var)
            g_rho = g_sigma * _sigmoid(rho)
            packed = opt.step(np.concatenate([mu, rho]), np.concatenate([g_mu, g_rho]))
            mu, rho = packed[: arch.param_count], packed[arch.param_count :]
            objectives.append(objective)
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(objectives)))
    return VariationalPosterior(arch=arch, mu=mu, rho=rho)


def sample_ensemble(posterior: VariationalPosterior, k: int, seed: int) -> Ensemble:
    """Draw k weight vectors ``mu + sigma * eps`` from the posterior."""
    if k < 1:
        raise ValueError("ensemble size must be at least 1")
    sigma = posterior.stddev
    members = []
    for member in range(k):
        child = derive_seed(seed, 4, member)
        eps = _rng(child).standard_normal(posterior.arch.param_count)
        members.append(ModelParams(arch=posterior.arch, theta=posterior.mu + sigma * eps))
    return Ensemble(
        members=tuple(members),
        provenance="vi-sampled",
        seeds=tuple(derive_seed(seed, 4, m) for m in range(k)),
    )
