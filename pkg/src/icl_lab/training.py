"""Training loop: fresh-episode batches, MSE on query positions, AdamW with
cosine schedule, optional two-axis curriculum, and early stopping."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import dynamics as dyn
from .models import (
    ModelConfig,
    ModelParams,
    clone_params,
    forward,
    init_params,
    predict_query_batch,
)
from .optim import AdamWState, adamw_step, clip_grad_norm, cosine_lr
from .seeding import rng_for
from .tasks import (
    DYNAMICS,
    GAUSSIAN_KERNEL,
    LINEAR,
    FunctionInstance,
    InputDist,
    Prompt,
    generate_prompt,
    normalize_outputs_batch,
    sample_gaussian_kernel_task,
    sample_linear_task,
)
from .tensor import NonFiniteError, Tensor, reduce_mean, slice_, square

__all__ = [
    "TrainConfig",
    "CurriculumSchedule",
    "TrainingLog",
    "TrainingAborted",
    "mse_loss",
    "cosine_lr",
    "curriculum_state",
    "curriculum_preset",
    "curriculum_table",
    "train",
    "sample_instance",
    "sample_episode",
    "sample_batch",
    "config_fingerprint",
]

# Stream tags keeping init/validation/pool draws disjoint from batch draws.
_INIT_STREAM = 0x1817
_VAL_STREAM = 0x7A11D
_POOL_STREAM = 0x9001


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss or gradient; carries the partial log."""

    def __init__(self, message: str, log: "TrainingLog"):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class CurriculumSchedule:
    """Two-axis progression: +dim and +length every ``step_interval`` steps.

    Both axes must reach their caps after the same number of stages so the
    schedule stays internally consistent.
    """

    start_dim: int = 5
    dim_cap: int = 20
    dim_increment: int = 1
    start_len: int = 11
    len_increment: int = 2
    len_cap: int = 41
    step_interval: int = 2000

    def __post_init__(self):
        dim_stages = (self.dim_cap - self.start_dim) / self.dim_increment
        len_stages = (self.len_cap - self.start_len) / self.len_increment
        if dim_stages != len_stages or dim_stages != int(dim_stages):
            raise ValueError(
                f"axes cap after different stage counts: dim {dim_stages}, len {len_stages}"
            )

    @property
    def stages(self) -> int:
        return (self.dim_cap - self.start_dim) // self.dim_increment


_CURRICULA = {
    "kernel": CurriculumSchedule(start_len=11, len_increment=2, len_cap=41),
    "dynamics": CurriculumSchedule(start_len=26, len_increment=5, len_cap=101),
}


def curriculum_preset(name: str) -> CurriculumSchedule:
    try:
        return _CURRICULA[name]
    except KeyError:
        raise ValueError(f"unknown curriculum preset '{name}' (have {sorted(_CURRICULA)})") from None


def curriculum_state(schedule: CurriculumSchedule, step: int) -> tuple[int, int]:
    """(input dimension, prompt length) in force at a training step."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    stage = step // schedule.step_interval
    dim = min(schedule.start_dim + schedule.dim_increment * stage, schedule.dim_cap)
    length = min(schedule.start_len + schedule.len_increment * stage, schedule.len_cap)
    return dim, length


def curriculum_table(schedule: CurriculumSchedule) -> list[tuple[int, int, int]]:
    """(step, dim, prompt_len) at every stage boundary, first to capped."""
    return [
        (s * schedule.step_interval,)
        + curriculum_state(schedule, s * schedule.step_interval)
        for s in range(schedule.stages + 1)
    ]


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; flat and text-serializable (key=value lines)."""

    # data
    family: str = LINEAR  # linear | gaussian_kernel | dynamics
    d: int = 5
    k: int = 11
    noise_sigma: float = 0.1
    input_kind: str = "gaussian"  # gaussian | uniform_cube
    input_scale: float = 1.0
    kernel_centers: int = 20
    kernel_bandwidth: float = 1.5
    normalize_kernel_outputs: bool = True
    dynamics_kind: str = "poly"
    dynamics_cubic: bool = False
    data_mode: str = "on_the_fly"  # on_the_fly | fixed_pool
    pool_size: int = 10000
    # model
    arch: str = "transformer"
    n_layers: int = 2
    n_heads: int = 2
    embed_dim: int = 64
    max_seq_len: int = 83
    max_input_dim: int = 20
    block_size: int = 8
    filter_order: int = 64
    state_dim: int = 16
    # optimization
    batch_size: int = 64
    lr: float = 1.0e-4
    weight_decay: float = 0.0
    total_steps: int = 5000
    warmup_steps: int = 300
    grad_clip: float = 1.0
    loss_positions: str = "final"  # final | all_prefix
    curriculum: str = "off"  # off | kernel | dynamics
    early_stopping: bool = False
    patience: int = 5
    eval_every: int = 500
    val_episodes: int = 500
    base_seed: int = 0

    def __post_init__(self):
        if self.family not in (LINEAR, GAUSSIAN_KERNEL, DYNAMICS):
            raise ValueError(f"unknown family '{self.family}'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}"
            )
        if self.loss_positions not in ("final", "all_prefix"):
            raise ValueError(f"unknown loss_positions '{self.loss_positions}'")
        if self.curriculum not in ("off", *_CURRICULA):
            raise ValueError(f"unknown curriculum '{self.curriculum}'")
        if self.data_mode not in ("on_the_fly", "fixed_pool"):
            raise ValueError(f"unknown data_mode '{self.data_mode}'")
        if self.data_mode == "fixed_pool" and self.curriculum != "off":
            raise ValueError("fixed_pool mode does not support a curriculum")
        if self.k < 1 or self.d < 1:
            raise ValueError("k and d must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            arch=self.arch,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            embed_dim=self.embed_dim,
            max_seq_len=self.max_seq_len,
            max_input_dim=self.max_input_dim,
            block_size=self.block_size,
            filter_order=self.filter_order,
            state_dim=self.state_dim,
        )

    def effective_d(self) -> int:
        if self.family == DYNAMICS:
            return dyn.FIXED_STATE_DIMS.get(self.dynamics_kind, self.d)
        return self.d

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        items = sorted(self.to_dict().items())
        return "\n".join(f"{k}={v}" for k, v in items) + "\n"

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        coerced = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown config key '{key}'")
            ann = types[key]
            if isinstance(raw, str):
                if ann == "bool":
                    low = raw.strip().lower()
                    if low not in ("true", "false", "1", "0"):
                        raise ValueError(f"bad boolean for {key}: '{raw}'")
                    coerced[key] = low in ("true", "1")
                elif ann == "int":
                    coerced[key] = int(raw)
                elif ann == "float":
                    coerced[key] = float(raw)
                else:
                    coerced[key] = raw.strip()
            else:
                coerced[key] = raw
        return cls(**coerced)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got '{line}'")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
        return cls.from_dict(values)


def config_fingerprint(config: TrainConfig | dict) -> str:
    """Stable 16-hex-digit hash; changes iff any config field changes."""
    mapping = config.to_dict() if isinstance(config, TrainConfig) else dict(config)
    blob = json.dumps(mapping, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainingLog:
    """Per-step scalars plus validation checkpoints, CSV-serializable."""

    rows: list = field(default_factory=list)  # (step, loss, lr, dim, prompt_len, val_mse|None)
    wall_clock_seconds: float = 0.0
    fingerprint: str = ""
    stopped_early_at: int | None = None

    def add(self, step, loss, lr, dim, prompt_len, val_mse=None):
        self.rows.append((step, loss, lr, dim, prompt_len, val_mse))

    def to_csv_text(self) -> str:
        lines = ["step,loss,lr,dim,prompt_len,val_mse"]
        for step, loss, lr, dim, plen, val in self.rows:
            val_cell = "" if val is None else repr(float(val))
            lines.append(f"{step},{repr(float(loss))},{repr(float(lr))},{dim},{plen},{val_cell}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv_text())


def mse_loss(preds: Tensor, targets: np.ndarray) -> Tensor:
    """Mean squared residual over the batch (and any extra axes)."""
    targets = np.asarray(targets, dtype=np.float64)
    if preds.data.size == 0:
        raise ValueError("mse_loss over an empty batch")
    if preds.data.shape != targets.shape:
        raise ValueError(f"preds shape {preds.data.shape} != targets shape {targets.shape}")
    return reduce_mean(square(preds - Tensor(targets)))


# ---------------------------------------------------------------------------
# Episode generation shared by training and evaluation
# ---------------------------------------------------------------------------

def sample_instance(config: TrainConfig, d: int, rng: np.random.Generator) -> FunctionInstance:
    if config.family == LINEAR:
        return sample_linear_task(d, config.noise_sigma, rng)
    if config.family == GAUSSIAN_KERNEL:
        return sample_gaussian_kernel_task(
            d, config.kernel_centers, config.kernel_bandwidth, config.noise_sigma, rng
        )
    state_dim = d if config.dynamics_kind in ("poly", "tanh") else None
    return dyn.sample_dynamics_task(
        config.dynamics_kind,
        config.noise_sigma,
        rng,
        state_dim=state_dim,
        cubic=config.dynamics_cubic,
    )


def input_dist_for(config: TrainConfig) -> InputDist:
    kind = "trajectory" if config.family == DYNAMICS else config.input_kind
    return InputDist(kind, config.input_scale)


def sample_episode(
    config: TrainConfig, d: int, k: int, rng: np.random.Generator
) -> tuple[FunctionInstance, Prompt]:
    instance = sample_instance(config, d, rng)
    return instance, generate_prompt(instance, k, input_dist_for(config), rng)


def sample_batch(
    config: TrainConfig, d: int, k: int, count: int, *stream: int
) -> list[Prompt]:
    """``count`` prompts with per-episode seeds mixed from (base_seed, *stream, i)."""
    prompts = []
    for i in range(count):
        rng = rng_for(config.base_seed, *stream, i)
        if config.data_mode == "fixed_pool":
            idx = int(rng.integers(config.pool_size))
            instance = sample_instance(config, d, rng_for(config.base_seed, _POOL_STREAM, idx))
            prompts.append(generate_prompt(instance, k, input_dist_for(config), rng))
        else:
            prompts.append(sample_episode(config, d, k, rng)[1])
    if config.family == GAUSSIAN_KERNEL and config.normalize_kernel_outputs:
        prompts = normalize_outputs_batch(prompts)
    return prompts


def stack_prompts(prompts: list[Prompt]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs = np.stack([p.xs for p in prompts])
    ys = np.stack([p.ys for p in prompts])
    targets = np.array([p.query_target for p in prompts])
    return xs, ys, targets


def _last_column(preds: Tensor) -> Tensor:
    return slice_(preds, (slice(None), preds.shape[1] - 1))


def _validation_mse(
    config: TrainConfig, model_cfg: ModelConfig, params: ModelParams, chunk: int = 64
) -> float:
    d, k = config.effective_d(), config.k
    prompts = sample_batch(config, d, k, config.val_episodes, _VAL_STREAM)
    errs = []
    for lo in range(0, len(prompts), chunk):
        xs, ys, targets = stack_prompts(prompts[lo : lo + chunk])
        preds = predict_query_batch(model_cfg, params, xs, ys)
        errs.append((preds - targets) ** 2)
    return float(np.concatenate(errs).mean())


def train(config: TrainConfig) -> tuple[ModelParams, TrainingLog]:
    """Run the full loop and return (parameters, log).

    With early stopping enabled the returned parameters are the best
    validation checkpoint seen, never a worse later one.
    """
    model_cfg = config.model_config()
    schedule = None if config.curriculum == "off" else curriculum_preset(config.curriculum)
    max_k = config.k if schedule is None else max(config.k, schedule.len_cap)
    if 2 * max_k + 1 > model_cfg.max_seq_len:
        raise ValueError(
            f"max_seq_len {model_cfg.max_seq_len} cannot fit prompts of length {max_k}"
        )

    params = init_params(model_cfg, rng_for(config.base_seed, _INIT_STREAM).integers(2**63))
    opt_state = AdamWState()
    log = TrainingLog(fingerprint=config_fingerprint(config))
    started = time.monotonic()

    best_val = np.inf
    best_params = None
    evals_without_improvement = 0

    for step in range(config.total_steps):
        if schedule is None:
            dim, plen = config.effective_d(), config.k
        else:
            dim, plen = curriculum_state(schedule, step)
            if config.family == DYNAMICS and config.dynamics_kind not in ("poly", "tanh"):
                dim = config.effective_d()
        lr = cosine_lr(step, config.lr, config.warmup_steps, config.total_steps)
        try:
            prompts = sample_batch(config, dim, plen, config.batch_size, step)
            xs, ys, targets = stack_prompts(prompts)
            preds = forward(model_cfg, params, xs, ys)
            if config.loss_positions == "all_prefix":
                all_targets = np.concatenate([ys, targets[:, None]], axis=1)
                loss = mse_loss(preds, all_targets)
            else:
                loss = mse_loss(_last_column(preds), targets)
            loss_value = loss.item()
            loss.backward()
            grads = {}
            for name, p in params.items():
                if p.grad is not None:
                    grads[name] = p.grad
                    p.grad = None
            clip_grad_norm(grads, config.grad_clip)
            adamw_step(
                opt_state, params, grads, lr=lr, weight_decay=config.weight_decay
            )
        except (NonFiniteError, FloatingPointError) as err:
            log.wall_clock_seconds = time.monotonic() - started
            raise TrainingAborted(f"aborted at step {step}: {err}", log) from err

        val_mse = None
        if config.early_stopping and (step + 1) % config.eval_every == 0:
            val_mse = _validation_mse(config, model_cfg, params)
            if val_mse < best_val:
                best_val = val_mse
                best_params = clone_params(params)
                evals_without_improvement = 0
            else:
                evals_without_improvement += 1
        log.add(step, loss_value, lr, dim, plen, val_mse)
        if config.early_stopping and evals_without_improvement >= config.patience:
            log.stopped_early_at = step
            break

    log.wall_clock_seconds = time.monotonic() - started
    if config.early_stopping and best_params is not None:
        final_val = _validation_mse(config, model_cfg, params)
        if final_val < best_val:
            best_params, best_val = clone_params(params), final_val
        return best_params, log
    return params, log
