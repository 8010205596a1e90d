"""Function-family sampling and prompt construction.

A task is a sampled function instance (linear map, sum of Gaussian kernels,
or a dynamical system with a linear readout); a prompt packages k labeled
context pairs plus one held-out query drawn from the same instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from .seeding import mix_seed, rng_for

if TYPE_CHECKING:
    from .dynamics import DynamicsSpec

LINEAR = "linear"
GAUSSIAN_KERNEL = "gaussian_kernel"
DYNAMICS = "dynamics"

NOISE_LEVELS = (0.1, 0.5, 1.0)


class TaskError(ValueError):
    """Invalid task parameters or a prompt request the family cannot satisfy."""


@dataclass(frozen=True)
class EpisodeSeed:
    """Coordinate of one episode in the reproducible stream space."""

    base_seed: int
    episode_index: int

    def rng(self) -> np.random.Generator:
        return rng_for(self.base_seed, self.episode_index)

    def value(self) -> int:
        return mix_seed(self.base_seed, self.episode_index)


@dataclass(frozen=True)
class FunctionInstance:
    """One sampled task: the function, its noise level, and its family tag."""

    family: str
    d: int
    noise_sigma: float
    # linear
    w: np.ndarray | None = None
    # gaussian_kernel
    centers: np.ndarray | None = None  # (C, d), coordinates in [-1, 1]
    beta: np.ndarray | None = None  # (C,)
    bandwidth: float = 1.0
    # dynamics
    dynamics: "DynamicsSpec | None" = None
    readout: np.ndarray | None = None  # unit vector v, labels are <v, state>


@dataclass(frozen=True)
class InputDist:
    """How prompt inputs are drawn: base distribution plus a scale factor.

    ``trajectory`` is the only valid kind for dynamics instances (states are
    rolled out, not drawn i.i.d.); for trajectories the scale applies to the
    initial state.
    """

    kind: str = "gaussian"  # gaussian | uniform_cube | trajectory
    scale: float = 1.0

    def scaled(self, factor: float) -> "InputDist":
        return replace(self, scale=self.scale * factor)


GAUSSIAN_INPUTS = InputDist("gaussian")
UNIFORM_CUBE_INPUTS = InputDist("uniform_cube")
TRAJECTORY_INPUTS = InputDist("trajectory")


@dataclass(frozen=True)
class Prompt:
    """k labeled context pairs plus a query whose target is held out.

    ``xs`` has k+1 rows (the last is the query input); ``ys`` has k entries.
    ``query_target`` is never part of any model input.
    """

    xs: np.ndarray
    ys: np.ndarray
    query_target: float
    k: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.xs.shape[0] != self.k + 1:
            raise TaskError(f"prompt needs k+1={self.k + 1} inputs, got {self.xs.shape[0]}")
        if self.ys.shape[0] != self.k:
            raise TaskError(f"prompt needs k={self.k} context labels, got {self.ys.shape[0]}")

    @property
    def query_x(self) -> np.ndarray:
        return self.xs[-1]

    @property
    def context_xs(self) -> np.ndarray:
        return self.xs[:-1]


def sample_linear_task(d: int, noise_sigma: float, rng: np.random.Generator) -> FunctionInstance:
    """Linear task: w drawn from N(0, I_d) then scaled to unit norm."""
    if d < 1:
        raise TaskError(f"linear task needs d >= 1, got {d}")
    if noise_sigma < 0:
        raise TaskError(f"noise_sigma must be non-negative, got {noise_sigma}")
    w = rng.standard_normal(d)
    norm = np.linalg.norm(w)
    while norm == 0.0:  # probability-zero guard, keeps the contract total
        w = rng.standard_normal(d)
        norm = np.linalg.norm(w)
    return FunctionInstance(family=LINEAR, d=d, noise_sigma=noise_sigma, w=w / norm)


def sample_gaussian_kernel_task(
    d: int,
    num_centers: int,
    bandwidth: float,
    noise_sigma: float,
    rng: np.random.Generator,
) -> FunctionInstance:
    """Kernel task: centers uniform on [-1, 1]^d, weights beta_j ~ N(0, 1)."""
    if d < 1:
        raise TaskError(f"kernel task needs d >= 1, got {d}")
    if num_centers < 1:
        raise TaskError(f"need at least one center, got {num_centers}")
    if bandwidth <= 0:
        raise TaskError(f"bandwidth must be positive, got {bandwidth}")
    centers = rng.uniform(-1.0, 1.0, size=(num_centers, d))
    beta = rng.standard_normal(num_centers)
    return FunctionInstance(
        family=GAUSSIAN_KERNEL,
        d=d,
        noise_sigma=noise_sigma,
        centers=centers,
        beta=beta,
        bandwidth=bandwidth,
    )


def kernel_features(instance: FunctionInstance, xs: np.ndarray) -> np.ndarray:
    """Gaussian similarity features phi(x)_j = exp(-|x - c_j|^2 / (2 h^2)).

    ``xs`` is (N, d); returns (N, C).
    """
    if instance.family != GAUSSIAN_KERNEL:
        raise TaskError(f"kernel features need a gaussian_kernel task, got {instance.family}")
    diffs = xs[:, None, :] - instance.centers[None, :, :]
    sq = np.sum(diffs * diffs, axis=-1)
    return np.exp(-sq / (2.0 * instance.bandwidth**2))


def noiseless_values(instance: FunctionInstance, xs: np.ndarray) -> np.ndarray:
    """Noise-free function values for a batch of inputs (N, d) -> (N,)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[1] != instance.d:
        raise TaskError(f"input dim {xs.shape[1]} != task dim {instance.d}")
    if instance.family == LINEAR:
        return xs @ instance.w
    if instance.family == GAUSSIAN_KERNEL:
        return kernel_features(instance, xs) @ instance.beta
    if instance.family == DYNAMICS:
        return xs @ instance.readout
    raise TaskError(f"unknown family {instance.family}")


def eval_function(
    instance: FunctionInstance, x: np.ndarray, rng: np.random.Generator | None = None
) -> float:
    """Function value at one input, plus N(0, sigma^2) noise when rng given.

    Pass ``rng=None`` for the noiseless value (used by oracles and baselines).
    """
    value = float(noiseless_values(instance, np.asarray(x, dtype=np.float64)[None, :])[0])
    if rng is not None and instance.noise_sigma > 0:
        value += instance.noise_sigma * rng.standard_normal()
    return value


def kernel_feature_readout(prompt: Prompt, instance: FunctionInstance) -> np.ndarray:
    """Noiseless labels for every prompt input via the explicit feature map.

    Returns <beta, phi(x)> for all k+1 inputs; identical to the noiseless
    task values, exposed so feature-space variants can be built on phi.
    """
    return kernel_features(instance, prompt.xs) @ instance.beta


def _draw_inputs(
    kind: str, scale: float, n: int, d: int, rng: np.random.Generator
) -> np.ndarray:
    if kind == "gaussian":
        xs = rng.standard_normal((n, d))
    elif kind == "uniform_cube":
        xs = rng.uniform(-1.0, 1.0, size=(n, d))
    else:
        raise TaskError(f"unknown input distribution kind '{kind}'")
    return xs * scale


def generate_prompt(
    instance: FunctionInstance,
    k: int,
    input_dist: InputDist,
    rng: np.random.Generator | EpisodeSeed | int,
) -> Prompt:
    """Draw k+1 inputs, label the first k, hold the query target out.

    Inputs are scaled by ``input_dist.scale`` before evaluation.  Dynamics
    instances require ``trajectory`` inputs (states come from the roll-out,
    not i.i.d. draws).  Pure in (instance, k, input_dist, seed).
    """
    if k < 1:
        raise TaskError(f"prompt needs k >= 1 context pairs, got {k}")
    seed_value = None
    if isinstance(rng, EpisodeSeed):
        seed_value = rng.value()
        rng = rng.rng()
    elif isinstance(rng, (int, np.integer)):
        seed_value = int(rng)
        rng = np.random.default_rng(int(rng))

    if instance.family == DYNAMICS:
        if input_dist.kind != "trajectory":
            raise TaskError(
                "dynamics prompts come from trajectories; i.i.d. input draws are invalid"
            )
        from .dynamics import dynamics_prompt

        return dynamics_prompt(
            instance.dynamics,
            k,
            instance.readout,
            instance.noise_sigma,
            rng,
            x0_scale=input_dist.scale,
            seed=seed_value,
        )
    if input_dist.kind == "trajectory":
        raise TaskError(f"trajectory inputs are only valid for dynamics, not {instance.family}")

    xs = _draw_inputs(input_dist.kind, input_dist.scale, k + 1, instance.d, rng)
    clean = noiseless_values(instance, xs)
    noise = instance.noise_sigma * rng.standard_normal(k + 1)
    labeled = clean + noise
    return Prompt(
        xs=xs,
        ys=labeled[:k],
        query_target=float(labeled[k]),
        k=k,
        meta={
            "family": instance.family,
            "d": instance.d,
            "seed": seed_value,
            "scaling_factor": input_dist.scale,
        },
    )


def normalize_outputs_batch(prompts: list[Prompt]) -> list[Prompt]:
    """Rescale kernel-task labels so the pooled batch second moment is 1.

    Pools all context labels and query targets across the batch; divides by
    the pooled root-mean-square.  No centering (the label model has no mean
    term), so "variance" here is the uncentered second moment.
    """
    if not prompts:
        raise TaskError("cannot normalize an empty batch")
    for p in prompts:
        if p.meta.get("family") != GAUSSIAN_KERNEL:
            raise TaskError("output normalization applies to gaussian_kernel prompts only")
    pooled = np.concatenate([np.append(p.ys, p.query_target) for p in prompts])
    second_moment = float(np.mean(pooled * pooled))
    if second_moment == 0.0:
        raise TaskError("zero-variance batch cannot be normalized")
    scale = 1.0 / np.sqrt(second_moment)
    return [
        replace(p, ys=p.ys * scale, query_target=p.query_target * scale) for p in prompts
    ]
