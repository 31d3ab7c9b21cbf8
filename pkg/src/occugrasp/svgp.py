"""Sparse variational GP regression on occupancy density samples.

A standard whitened SVGP with an isotropic squared-exponential kernel and a
Gaussian likelihood, trained by minibatch Adam on the negative ELBO. Kernel
hyperparameters live on the log scale; the variational covariance is kept as
an unconstrained lower-triangular Cholesky factor so gradient steps cannot
leave the PSD cone. torch supplies the autodiff; the model math is local.

Predictions report the raw predictive variance (latent variance + noise) and
the density-scaled variance raw / (1 + |mean|), which shrinks uncertainty
where predicted occupancy is high.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DivergedTraining, SchemaError

torch.set_default_dtype(torch.float64)

_JITTER = 1e-8


@dataclass
class TrainConfig:
    inducing: int = 500
    lr: float = 1e-3
    epochs: int = 100
    batch: int | None = None  # defaults to min(N, 512)
    seed: int = 0


@dataclass
class TrainingReport:
    elbo_trace: list[float]
    epochs: int
    final_hyperparameters: dict[str, float]


@dataclass(frozen=True)
class PredictiveUncertainty:
    occupancy_mean: float
    raw_variance: float
    scaled_variance: float


@dataclass
class SvgpModel:
    """Trained model state, immutable by convention after training."""

    inducing_points: np.ndarray       # M x 3, normalized coordinates
    log_lengthscale: float
    log_signal_variance: float
    log_noise_variance: float
    variational_mean: np.ndarray      # M, whitened
    variational_cov_factor: np.ndarray  # M x M lower triangular, whitened
    input_shift: np.ndarray           # per-axis shift of the normalizer
    input_scale: np.ndarray           # per-axis scale of the normalizer

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))

    @property
    def signal_variance(self) -> float:
        return float(np.exp(self.log_signal_variance))

    @property
    def noise_variance(self) -> float:
        return float(np.exp(self.log_noise_variance))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.input_shift) / self.input_scale


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d = a.unsqueeze(-2) - b.unsqueeze(-3)
    return (d * d).sum(-1)


def _kernel(a: torch.Tensor, b: torch.Tensor, log_ls: torch.Tensor,
            log_sf2: torch.Tensor) -> torch.Tensor:
    ls2 = torch.exp(2.0 * log_ls)
    return torch.exp(log_sf2) * torch.exp(-0.5 * _sq_dists(a, b) / ls2)


def _predict_torch(x, Z, log_ls, log_sf2, log_sn2, m, L_raw):
    """Whitened SVGP predictive mean and latent variance at x."""
    M = Z.shape[0]
    Kzz = _kernel(Z, Z, log_ls, log_sf2) + _JITTER * torch.eye(M)
    Lzz = torch.linalg.cholesky(Kzz)
    Kxz = _kernel(x, Z, log_ls, log_sf2)
    # A = Kxz Lzz^{-T}
    A = torch.linalg.solve_triangular(Lzz, Kxz.T, upper=False).T
    L = torch.tril(L_raw)
    mean = A @ m
    kxx = torch.exp(log_sf2).expand(x.shape[0])
    AL = A @ L
    var = kxx - (A * A).sum(-1) + (AL * AL).sum(-1)
    return mean, torch.clamp(var, min=0.0)


def _elbo_torch(x, y, n_total, Z, log_ls, log_sf2, log_sn2, m, L_raw):
    """Minibatch ELBO of the Gaussian-likelihood SVGP (whitened parameterization)."""
    mean, var = _predict_torch(x, Z, log_ls, log_sf2, log_sn2, m, L_raw)
    sn2 = torch.exp(log_sn2)
    b = x.shape[0]
    expected_ll = -0.5 * b * torch.log(2.0 * torch.pi * sn2) \
        - 0.5 * (((y - mean) ** 2).sum() + var.sum()) / sn2
    # KL(q || prior) in whitened coordinates: prior is N(0, I)
    L = torch.tril(L_raw)
    diag = torch.diagonal(L)
    kl = 0.5 * ((L * L).sum() + (m * m).sum() - Z.shape[0]
                - 2.0 * torch.log(torch.abs(diag)).sum())
    return (n_total / b) * expected_ll - kl


def make_training_set(field, points) -> tuple[np.ndarray, np.ndarray]:
    """Training inputs/targets: point means and their max-normalized field densities."""
    inputs = np.array([p.mean for p in points], dtype=float)
    log_dens = np.array([field.log_density(m) for m in inputs])
    targets = np.exp(log_dens - log_dens.max())
    return inputs, targets


def train(inputs: np.ndarray, targets: np.ndarray,
          config: TrainConfig | None = None) -> tuple[SvgpModel, TrainingReport]:
    """Fit the SVGP by minibatch Adam on the negative ELBO.

    Inducing points are a uniform (seeded) subsample of the normalized inputs
    and stay fixed during training. Deterministic per seed.
    """
    config = config or TrainConfig()
    if config.inducing < 1 or config.lr <= 0 or config.epochs < 1:
        raise ValueError("inducing, lr and epochs must be positive")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.asarray(targets, dtype=float).ravel()
    n = inputs.shape[0]
    if n < 1 or targets.shape[0] != n:
        raise ValueError("inputs and targets must be non-empty and aligned")

    shift = inputs.mean(axis=0)
    scale = inputs.std(axis=0)
    scale[scale < 1e-12] = 1.0
    x_norm = (inputs - shift) / scale

    rng = np.random.default_rng(config.seed)
    m_ind = min(config.inducing, n)
    idx = rng.choice(n, size=m_ind, replace=False)
    Z_np = x_norm[idx].copy()

    # scale-aware hyperparameter init
    bbox_diag = np.linalg.norm(x_norm.max(axis=0) - x_norm.min(axis=0))
    ls0 = max(0.2 * bbox_diag, 1e-3)
    sf2_0 = max(targets.var(), 1e-6)
    sn2_0 = max(1e-2 * targets.var(), 1e-8)

    torch.manual_seed(config.seed)
    x_t = torch.from_numpy(x_norm)
    y_t = torch.from_numpy(targets)
    Z = torch.from_numpy(Z_np)
    log_ls = torch.tensor(np.log(ls0), requires_grad=True)
    log_sf2 = torch.tensor(np.log(sf2_0), requires_grad=True)
    log_sn2 = torch.tensor(np.log(sn2_0), requires_grad=True)
    m = torch.zeros(m_ind, requires_grad=True)
    L_raw = torch.eye(m_ind, requires_grad=True)

    params = [log_ls, log_sf2, log_sn2, m, L_raw]
    opt = torch.optim.Adam(params, lr=config.lr)
    batch = config.batch or min(n, 512)
    batch = min(batch, n)
    batch_rng = np.random.default_rng(config.seed + 1)

    trace: list[float] = []
    for epoch in range(config.epochs):
        perm = batch_rng.permutation(n)
        epoch_elbo = 0.0
        n_batches = 0
        for start in range(0, n, batch):
            sel = perm[start:start + batch]
            opt.zero_grad()
            elbo = _elbo_torch(x_t[sel], y_t[sel], n, Z,
                               log_ls, log_sf2, log_sn2, m, L_raw)
            loss = -elbo
            loss.backward()
            opt.step()
            epoch_elbo += float(elbo.detach())
            n_batches += 1
        epoch_elbo /= n_batches
        if not np.isfinite(epoch_elbo):
            raise DivergedTraining(epoch)
        trace.append(epoch_elbo)

    model = SvgpModel(
        inducing_points=Z.detach().numpy(),
        log_lengthscale=float(log_ls.detach()),
        log_signal_variance=float(log_sf2.detach()),
        log_noise_variance=float(log_sn2.detach()),
        variational_mean=m.detach().numpy(),
        variational_cov_factor=np.tril(L_raw.detach().numpy()),
        input_shift=shift,
        input_scale=scale,
    )
    report = TrainingReport(
        elbo_trace=trace,
        epochs=config.epochs,
        final_hyperparameters={
            "lengthscale": model.lengthscale,
            "signal_variance": model.signal_variance,
            "noise_variance": model.noise_variance,
        },
    )
    return model, report


def _model_tensors(model: SvgpModel, requires_grad: bool = False):
    hypers = {
        "log_lengthscale": torch.tensor(model.log_lengthscale, requires_grad=requires_grad),
        "log_signal_variance": torch.tensor(model.log_signal_variance, requires_grad=requires_grad),
        "log_noise_variance": torch.tensor(model.log_noise_variance, requires_grad=requires_grad),
    }
    rest = (torch.from_numpy(model.inducing_points),
            torch.from_numpy(model.variational_mean),
            torch.from_numpy(model.variational_cov_factor))
    return hypers, rest


def full_elbo(model: SvgpModel, inputs: np.ndarray, targets: np.ndarray) -> float:
    """ELBO of the model on the full dataset (no minibatch scaling)."""
    hypers, (Z, m, L_raw) = _model_tensors(model)
    x = torch.from_numpy(model.normalize(np.atleast_2d(inputs)))
    y = torch.from_numpy(np.asarray(targets, dtype=float).ravel())
    with torch.no_grad():
        elbo = _elbo_torch(x, y, x.shape[0], Z,
                           hypers["log_lengthscale"], hypers["log_signal_variance"],
                           hypers["log_noise_variance"], m, L_raw)
    return float(elbo)


def elbo_hyperparameter_gradients(model: SvgpModel, inputs: np.ndarray,
                                  targets: np.ndarray) -> dict[str, float]:
    """Gradients of the full-data ELBO with respect to the log hyperparameters."""
    hypers, (Z, m, L_raw) = _model_tensors(model, requires_grad=True)
    x = torch.from_numpy(model.normalize(np.atleast_2d(inputs)))
    y = torch.from_numpy(np.asarray(targets, dtype=float).ravel())
    elbo = _elbo_torch(x, y, x.shape[0], Z,
                       hypers["log_lengthscale"], hypers["log_signal_variance"],
                       hypers["log_noise_variance"], m, L_raw)
    elbo.backward()
    return {name: float(t.grad) for name, t in hypers.items()}


def predict(model: SvgpModel, queries: np.ndarray) -> list[PredictiveUncertainty]:
    """Predictive occupancy mean and variance at each query, with density scaling.

    raw variance = latent predictive variance + noise variance;
    scaled variance = raw / (1 + |mean|).
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    x = torch.from_numpy(model.normalize(queries))
    with torch.no_grad():
        mean, var = _predict_torch(
            x,
            torch.from_numpy(model.inducing_points),
            torch.tensor(model.log_lengthscale),
            torch.tensor(model.log_signal_variance),
            torch.tensor(model.log_noise_variance),
            torch.from_numpy(model.variational_mean),
            torch.from_numpy(model.variational_cov_factor),
        )
    means = mean.numpy()
    raws = var.numpy() + model.noise_variance
    out = []
    for mu, raw in zip(means, raws):
        out.append(PredictiveUncertainty(
            occupancy_mean=float(mu),
            raw_variance=float(raw),
            scaled_variance=float(raw / (1.0 + abs(mu))),
        ))
    return out


_MODEL_MAGIC = b"SVGP"
_MODEL_VERSION = 1


def save_model(model: SvgpModel, path) -> None:
    """Serialize to a versioned little-endian binary file."""
    with open(path, "wb") as f:
        f.write(_MODEL_MAGIC)
        f.write(struct.pack("<I", _MODEL_VERSION))
        M = model.inducing_points.shape[0]
        f.write(struct.pack("<Q", M))
        f.write(struct.pack("<3d", model.log_lengthscale,
                            model.log_signal_variance, model.log_noise_variance))
        for arr in (model.inducing_points, model.variational_mean,
                    model.variational_cov_factor, model.input_shift, model.input_scale):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> SvgpModel:
    with open(path, "rb") as f:
        if f.read(4) != _MODEL_MAGIC:
            raise SchemaError(f"{path}: not a model file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _MODEL_VERSION:
            raise SchemaError(f"{path}: unsupported model version {version}")
        (M,) = struct.unpack("<Q", f.read(8))
        log_ls, log_sf2, log_sn2 = struct.unpack("<3d", f.read(24))

        def read(shape):
            count = int(np.prod(shape))
            return np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape).copy()

        return SvgpModel(
            inducing_points=read((M, 3)),
            log_lengthscale=log_ls,
            log_signal_variance=log_sf2,
            log_noise_variance=log_sn2,
            variational_mean=read((M,)),
            variational_cov_factor=read((M, M)),
            input_shift=read((3,)),
            input_scale=read((3,)),
        )
