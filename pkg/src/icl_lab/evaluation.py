"""MSE-vs-context-length evaluation, OOD prompt suites, and report files.

The CSV/JSON files written here are the only contract the plotting frontend
consumes; column names and metadata keys are fixed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import binomtest

from . import dynamics as dyn
from .baselines import evaluate_baselines
from .models import ModelConfig, ModelParams, predict_query_batch
from .seeding import rng_for
from .tasks import (
    DYNAMICS,
    FunctionInstance,
    InputDist,
    Prompt,
    generate_prompt,
    noiseless_values,
    normalize_outputs_batch,
)
from .training import TrainConfig, config_fingerprint, sample_instance, stack_prompts

OOD_KINDS = (
    "half_subspace",
    "noisy_lr",
    "orthogonal",
    "random_quadrants",
    "scaled",
    "skewed",
)

IN_DISTRIBUTION = "in-distribution"

CSV_HEADER = "k,model_mse,model_stderr,zero_mse,lsq_mse,knn3_mse,avg_mse"

_EVAL_STREAM = 0xE7A1

# Kinds whose construction rewrites i.i.d. inputs; trajectories cannot satisfy
# their geometric predicates, so dynamics only supports the remaining kinds.
_IID_ONLY_KINDS = ("half_subspace", "orthogonal", "random_quadrants")


class OODError(ValueError):
    """The requested (kind, family) pairing has no valid construction."""


class ReportIOError(OSError):
    """Report emission failed; message carries the path."""


@dataclass(frozen=True)
class EvalRow:
    k: int
    model_mse: float
    model_stderr: float
    zero_mse: float
    lsq_mse: float
    knn3_mse: float
    avg_mse: float


@dataclass(frozen=True)
class EvalReport:
    family: str
    arch: str
    fingerprint: str
    seeds: tuple
    n_episodes: int
    ood_kind: str
    rows: tuple


def _row_from_errors(k: int, model_errs, base_errs) -> EvalRow:
    model_errs = np.asarray(model_errs)
    n = model_errs.size
    stderr = float(model_errs.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return EvalRow(
        k=k,
        model_mse=float(model_errs.mean()),
        model_stderr=stderr,
        zero_mse=float(np.mean(base_errs["zero"])),
        lsq_mse=float(np.mean(base_errs["least_squares"])),
        knn3_mse=float(np.mean(base_errs["knn3"])),
        avg_mse=float(np.mean(base_errs["averaging"])),
    )


def _episode_prompt(
    family_config: TrainConfig, instance: FunctionInstance, k: int, ood_kind: str | None, rng
) -> Prompt:
    if ood_kind is None:
        from .training import input_dist_for

        return generate_prompt(instance, k, input_dist_for(family_config), rng)
    return ood_prompt_sampler(ood_kind, instance, k, rng)


def eval_mse_vs_context(
    model_cfg: ModelConfig,
    params: ModelParams,
    family_config: TrainConfig,
    k_values: list[int],
    n_episodes: int,
    base_seed: int,
    ood_kind: str | None = None,
    chunk: int = 64,
) -> EvalReport:
    """Fresh episodes at each k; model and all four baselines score the same
    prompts.  Parameters are only read, never updated."""
    if not k_values:
        raise ValueError("k_values must be non-empty")
    for k in k_values:
        if 2 * k + 1 > model_cfg.max_seq_len:
            raise ValueError(f"k={k} needs seq_len {2 * k + 1} > max_seq_len {model_cfg.max_seq_len}")
    rows = []
    for k in k_values:
        prompts = []
        for i in range(n_episodes):
            rng = rng_for(base_seed, _EVAL_STREAM, k, i)
            instance = sample_instance(family_config, family_config.effective_d(), rng)
            prompts.append(_episode_prompt(family_config, instance, k, ood_kind, rng))
        if family_config.family == "gaussian_kernel" and family_config.normalize_kernel_outputs:
            prompts = normalize_outputs_batch(prompts)
        targets = np.array([p.query_target for p in prompts])
        preds = np.empty(n_episodes)
        for lo in range(0, n_episodes, chunk):
            xs, ys, _ = stack_prompts(prompts[lo : lo + chunk])
            preds[lo : lo + xs.shape[0]] = predict_query_batch(model_cfg, params, xs, ys)
        model_errs = (preds - targets) ** 2
        base_errs = {name: [] for name in ("zero", "least_squares", "knn3", "averaging")}
        for p, target in zip(prompts, targets):
            for name, value in evaluate_baselines(p).items():
                base_errs[name].append((value - target) ** 2)
        rows.append(_row_from_errors(k, model_errs, base_errs))
    return EvalReport(
        family=family_config.family,
        arch=model_cfg.arch,
        fingerprint=config_fingerprint(family_config),
        seeds=(base_seed,),
        n_episodes=n_episodes,
        ood_kind=ood_kind or IN_DISTRIBUTION,
        rows=tuple(rows),
    )


# ---------------------------------------------------------------------------
# OOD prompt constructions
# ---------------------------------------------------------------------------

def _labels(instance: FunctionInstance, xs: np.ndarray, rng) -> np.ndarray:
    clean = noiseless_values(instance, xs)
    if instance.noise_sigma > 0:
        clean = clean + instance.noise_sigma * rng.standard_normal(xs.shape[0])
    return clean


def _iid_prompt_from_inputs(instance, xs, k, rng, kind) -> Prompt:
    labeled = _labels(instance, xs, rng)
    return Prompt(
        xs=xs,
        ys=labeled[:k],
        query_target=float(labeled[k]),
        k=k,
        meta={"family": instance.family, "d": instance.d, "seed": None,
              "scaling_factor": 1.0, "ood_kind": kind},
    )


def ood_prompt_sampler(kind: str, instance: FunctionInstance, k: int, rng) -> Prompt:
    """Prompt whose context/query relationship is shifted in the named way.

    Constructions: half_subspace zeroes context coordinates past ceil(d/2);
    noisy_lr adds extra sigma=1 noise to context labels only; orthogonal
    projects the query onto the complement of the context span (needs k < d);
    random_quadrants maps context inputs to one random orthant and the query
    to an independent one; scaled multiplies inputs (or the initial state)
    by 2; skewed draws inputs from N(0, D) with geometric spectrum 1..1/100.
    """
    if kind not in OOD_KINDS:
        raise OODError(f"unknown OOD kind '{kind}' (have {OOD_KINDS})")
    d = instance.d
    if instance.family == DYNAMICS and kind in _IID_ONLY_KINDS:
        raise OODError(f"'{kind}' is undefined for trajectory prompts")

    if kind == "noisy_lr":
        if instance.family == DYNAMICS:
            prompt = generate_prompt(instance, k, InputDist("trajectory"), rng)
        else:
            prompt = generate_prompt(instance, k, InputDist("gaussian"), rng)
        noisy = prompt.ys + 1.0 * rng.standard_normal(k)
        return replace(prompt, ys=noisy)

    if kind == "scaled":
        dist = InputDist("trajectory" if instance.family == DYNAMICS else "gaussian", 2.0)
        return generate_prompt(instance, k, dist, rng)

    if kind == "skewed":
        spectrum = np.geomspace(1.0, 0.01, d) if d > 1 else np.ones(1)
        root = np.sqrt(spectrum)
        if instance.family == DYNAMICS:
            x0 = rng.standard_normal(d) * root
            return dyn.dynamics_prompt(
                instance.dynamics, k, instance.readout, instance.noise_sigma, rng, x0=x0
            )
        xs = rng.standard_normal((k + 1, d)) * root
        return _iid_prompt_from_inputs(instance, xs, k, rng, kind)

    if kind == "half_subspace":
        keep = int(np.ceil(d / 2))
        xs = rng.standard_normal((k + 1, d))
        xs[:k, keep:] = 0.0
        return _iid_prompt_from_inputs(instance, xs, k, rng, kind)

    if kind == "orthogonal":
        if k >= d:
            raise OODError(f"orthogonal query needs k < d, got k={k}, d={d}")
        xs = rng.standard_normal((k + 1, d))
        ctx, query = xs[:k], xs[k]
        basis, _ = np.linalg.qr(ctx.T)
        perp = query - basis @ (basis.T @ query)
        xs[k] = perp * (np.linalg.norm(query) / np.linalg.norm(perp))
        return _iid_prompt_from_inputs(instance, xs, k, rng, kind)

    # random_quadrants
    xs = rng.standard_normal((k + 1, d))
    ctx_signs = rng.choice((-1.0, 1.0), size=d)
    query_signs = rng.choice((-1.0, 1.0), size=d)
    xs[:k] = np.abs(xs[:k]) * ctx_signs
    xs[k] = np.abs(xs[k]) * query_signs
    return _iid_prompt_from_inputs(instance, xs, k, rng, kind)


# ---------------------------------------------------------------------------
# Paired input-scaling comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairedScalingRow:
    k: int
    mse_standard: float
    mse_scaled: float
    diff: float  # standard minus scaled; positive favors the scaled model


@dataclass(frozen=True)
class PairedScalingReport:
    family: str
    arch: str
    fingerprint: str
    seeds: tuple
    n_episodes: int
    rows: tuple
    sign_test_p: float
    n_positive: int
    n_nonzero: int


def compare_input_scaling(
    model_std: tuple[ModelConfig, ModelParams],
    model_scaled: tuple[ModelConfig, ModelParams],
    family_config: TrainConfig,
    k_values: list[int],
    n_episodes: int,
    base_seed: int,
) -> PairedScalingReport:
    """Evaluate both models on bitwise-identical prompts and sign-test the
    per-episode squared-error differences."""
    cfg_a, params_a = model_std
    cfg_b, params_b = model_scaled
    if cfg_a != cfg_b:
        raise ValueError(f"architectures differ: {cfg_a} vs {cfg_b}")
    rows = []
    diffs_all = []
    for k in k_values:
        prompts = []
        for i in range(n_episodes):
            rng = rng_for(base_seed, _EVAL_STREAM, k, i)
            instance = sample_instance(family_config, family_config.effective_d(), rng)
            prompts.append(_episode_prompt(family_config, instance, k, None, rng))
        xs, ys, targets = stack_prompts(prompts)
        errs_a = (predict_query_batch(cfg_a, params_a, xs, ys) - targets) ** 2
        errs_b = (predict_query_batch(cfg_b, params_b, xs, ys) - targets) ** 2
        diffs = errs_a - errs_b
        diffs_all.append(diffs)
        rows.append(
            PairedScalingRow(
                k=k,
                mse_standard=float(errs_a.mean()),
                mse_scaled=float(errs_b.mean()),
                diff=float(diffs.mean()),
            )
        )
    pooled = np.concatenate(diffs_all)
    nonzero = pooled[pooled != 0.0]
    n_pos = int((nonzero > 0).sum())
    p_value = binomtest(n_pos, nonzero.size, 0.5).pvalue if nonzero.size else 1.0
    return PairedScalingReport(
        family=family_config.family,
        arch=cfg_a.arch,
        fingerprint=config_fingerprint(family_config),
        seeds=(base_seed,),
        n_episodes=n_episodes,
        rows=tuple(rows),
        sign_test_p=float(p_value),
        n_positive=n_pos,
        n_nonzero=int(nonzero.size),
    )


def emit_paired_report(report: PairedScalingReport, path) -> None:
    payload = asdict(report)
    payload["rows"] = [asdict(r) for r in report.rows]
    payload["seeds"] = list(report.seeds)
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
    except OSError as err:
        raise ReportIOError(f"cannot write report to {path}: {err}") from err


# ---------------------------------------------------------------------------
# Report emission and parsing
# ---------------------------------------------------------------------------

def emit_report(report: EvalReport, path, format: str = "csv") -> None:
    """Write the per-k table as CSV (fixed columns) or JSON (adds metadata)."""
    if format not in ("csv", "json"):
        raise ValueError(f"unknown report format '{format}'")
    try:
        if format == "csv":
            lines = [CSV_HEADER]
            for r in report.rows:
                lines.append(
                    ",".join(
                        [str(r.k)]
                        + [
                            repr(float(v))
                            for v in (
                                r.model_mse,
                                r.model_stderr,
                                r.zero_mse,
                                r.lsq_mse,
                                r.knn3_mse,
                                r.avg_mse,
                            )
                        ]
                    )
                )
            text = "\n".join(lines) + "\n"
        else:
            payload = {
                "metadata": {
                    "family": report.family,
                    "arch": report.arch,
                    "seeds": list(report.seeds),
                    "fingerprint": report.fingerprint,
                    "ood_kind": report.ood_kind,
                    "n_episodes": report.n_episodes,
                },
                "rows": [asdict(r) for r in report.rows],
            }
            text = json.dumps(payload, indent=2) + "\n"
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as err:
        raise ReportIOError(f"cannot write report to {path}: {err}") from err


def load_report_json(path) -> EvalReport:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as err:
        raise ReportIOError(f"cannot read report from {path}: {err}") from err
    meta = payload["metadata"]
    rows = tuple(EvalRow(**row) for row in payload["rows"])
    return EvalReport(
        family=meta["family"],
        arch=meta["arch"],
        fingerprint=meta["fingerprint"],
        seeds=tuple(meta["seeds"]),
        n_episodes=meta["n_episodes"],
        ood_kind=meta["ood_kind"],
        rows=rows,
    )


def load_report_csv(path) -> tuple[EvalRow, ...]:
    try:
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln]
    except OSError as err:
        raise ReportIOError(f"cannot read report from {path}: {err}") from err
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"bad report header in {path}: {lines[:1]}")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        rows.append(
            EvalRow(
                k=int(cells[0]),
                model_mse=float(cells[1]),
                model_stderr=float(cells[2]),
                zero_mse=float(cells[3]),
                lsq_mse=float(cells[4]),
                knn3_mse=float(cells[5]),
                avg_mse=float(cells[6]),
            )
        )
    return tuple(rows)
