"""Command-line entry point: train, eval, baselines, dump-episodes, schedule.

Heavy imports happen inside ``main`` so that ``--threads`` can pin the BLAS
thread count through environment variables before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

ENV_OUT = "ICL_LAB_OUT"

# Effective config = preset defaults, overlaid by --config file, overlaid by
# --set pairs; --seed wins over everything for base_seed.
PRESETS: dict[str, dict] = {
    "linear-desk": dict(
        family="linear", d=5, k=11, noise_sigma=0.1, input_kind="gaussian",
        arch="transformer", n_layers=2, n_heads=2, embed_dim=64,
        max_seq_len=83, max_input_dim=20, batch_size=64,
        total_steps=2000, warmup_steps=100, lr=3e-4, curriculum="off",
        loss_positions="all_prefix",
    ),
    "kernel-desk": dict(
        family="gaussian_kernel", d=5, k=11, noise_sigma=0.1,
        input_kind="uniform_cube", kernel_centers=20, kernel_bandwidth=1.5,
        arch="transformer", n_layers=2, n_heads=2, embed_dim=64,
        max_seq_len=83, max_input_dim=20, batch_size=64,
        total_steps=2000, warmup_steps=100, lr=3e-4, curriculum="off",
        loss_positions="all_prefix",
    ),
    "dynamics-desk": dict(
        family="dynamics", dynamics_kind="poly", d=5, k=26, noise_sigma=0.1,
        arch="transformer", n_layers=2, n_heads=2, embed_dim=64,
        max_seq_len=203, max_input_dim=20, batch_size=64,
        total_steps=2000, warmup_steps=100, lr=3e-4, curriculum="off",
        loss_positions="all_prefix",
    ),
    "full-scale": dict(
        family="gaussian_kernel", d=20, k=41, noise_sigma=0.1,
        input_kind="uniform_cube", kernel_centers=20, kernel_bandwidth=1.5,
        arch="transformer", n_layers=12, n_heads=8, embed_dim=256,
        max_seq_len=83, max_input_dim=20, batch_size=64,
        total_steps=50000, warmup_steps=3000, curriculum="kernel",
    ),
}

_SCHEDULE_PRESETS = ("kernel", "dynamics")


def _parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat key=value config file")
    shared.add_argument("--seed", type=int, help="base seed overriding the config")
    shared.add_argument("--out", help=f"output directory (fallback: ${ENV_OUT}, then cwd)")
    shared.add_argument("--preset", help="named config preset")
    shared.add_argument("--threads", type=int, help="BLAS/OpenMP thread count (1 = deterministic)")
    shared.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="config override, repeatable",
    )

    top = argparse.ArgumentParser(prog="icl-lab", description=__doc__)
    sub = top.add_subparsers(dest="verb", required=True)
    sub.add_parser("train", parents=[shared], help="train a model, write checkpoint + log")

    ev = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint against baselines")
    ev.add_argument("--checkpoint", help="checkpoint file (default <out>/checkpoint.bin)")
    ev.add_argument("--k", dest="k_range", help="context lengths, e.g. 1..41 or 5,10,20")
    ev.add_argument("--episodes", type=int, default=100, help="episodes per context length")
    ev.add_argument("--ood", help="OOD prompt kind (default in-distribution)")

    bl = sub.add_parser("baselines", parents=[shared], help="baseline-only report, no model")
    bl.add_argument("--family", help="task family override")
    bl.add_argument("--d", type=int, help="input dimension override")
    bl.add_argument("--k", dest="k_range", help="context lengths, e.g. 1..41")
    bl.add_argument("--episodes", type=int, default=100)

    du = sub.add_parser("dump-episodes", parents=[shared], help="write episode JSON records")
    du.add_argument("--count", type=int, default=10)

    sc = sub.add_parser("schedule", parents=[shared], help="print a curriculum table")
    return top


def _parse_k_range(text: str | None, default_k: int) -> list[int]:
    if not text:
        return list(range(1, default_k + 1))
    text = text.strip()
    if ".." in text:
        lo, _, hi = text.partition("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(tok) for tok in text.split(",") if tok]


def _effective_config(args) -> dict:
    values: dict = {}
    if args.preset:
        if args.preset not in PRESETS:
            raise ValueError(f"unknown preset '{args.preset}' (have {sorted(PRESETS)})")
        values.update(PRESETS[args.preset])
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as err:
            raise ValueError(f"unreadable config {args.config}: {err}") from err
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{args.config}:{lineno}: expected key=value, got '{line}'")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    for pair in args.overrides:
        if "=" not in pair:
            raise ValueError(f"--set needs KEY=VALUE, got '{pair}'")
        key, _, val = pair.partition("=")
        values[key.strip()] = val.strip()
    if args.seed is not None:
        values["base_seed"] = args.seed
    # lr rule of thumb: attention-free state-space models train at the lower rate
    if "lr" not in values and str(values.get("arch", "")) == "ssm":
        values["lr"] = 5e-5
    return values


def _out_dir(args) -> str:
    out = args.out or os.environ.get(ENV_OUT) or "."
    os.makedirs(out, exist_ok=True)
    return out


def _print_config(config) -> None:
    print("effective config:")
    for line in config.to_text().splitlines():
        print(f"  {line}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ[var] = str(args.threads)

    created: list[str] = []
    try:
        return _dispatch(args, created)
    except (ValueError, OSError) as err:
        for path in created:
            try:
                os.unlink(path)
            except OSError:
                pass
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failures: clean partial outputs, report
        for path in created:
            try:
                os.unlink(path)
            except OSError:
                pass
        print(f"error: {err}", file=sys.stderr)
        return 1


def _dispatch(args, created: list[str]) -> int:
    if args.verb == "schedule":
        from .training import curriculum_preset, curriculum_table

        name = args.preset or "kernel"
        if name not in _SCHEDULE_PRESETS:
            raise ValueError(f"unknown schedule preset '{name}' (have {_SCHEDULE_PRESETS})")
        print("step,dim,prompt_len")
        for step, dim, plen in curriculum_table(curriculum_preset(name)):
            print(f"{step},{dim},{plen}")
        return 0

    from .training import TrainConfig

    values = _effective_config(args)
    checkpoint_arg = values.pop("checkpoint", None)
    config = TrainConfig.from_dict(values)
    out = _out_dir(args)

    if args.verb == "train":
        from .models import save_checkpoint
        from .training import train

        _print_config(config)
        params, log = train(config)
        cfg_path = os.path.join(out, "config.txt")
        ckpt_path = os.path.join(out, "checkpoint.bin")
        log_path = os.path.join(out, "training_log.csv")
        created.extend([cfg_path, ckpt_path, log_path])
        with open(cfg_path, "w") as fh:
            fh.write(config.to_text())
        save_checkpoint(ckpt_path, config.model_config(), params)
        log.to_csv(log_path)
        print(f"wrote {ckpt_path} ({len(log.rows)} steps, fingerprint {log.fingerprint})")
        return 0

    if args.verb == "eval":
        from .evaluation import emit_report, eval_mse_vs_context
        from .models import load_checkpoint

        _print_config(config)
        ckpt_path = getattr(args, "checkpoint", None) or checkpoint_arg or os.path.join(
            out, "checkpoint.bin"
        )
        if not os.path.exists(ckpt_path):
            raise ValueError(f"missing checkpoint {ckpt_path}")
        model_cfg, params = load_checkpoint(ckpt_path)
        k_values = _parse_k_range(args.k_range, config.k)
        report = eval_mse_vs_context(
            model_cfg,
            params,
            config,
            k_values,
            args.episodes,
            config.base_seed,
            ood_kind=args.ood,
        )
        tag = args.ood or "id"
        base = os.path.join(out, f"report_{config.family}_{model_cfg.arch}_{tag}")
        created.extend([base + ".csv", base + ".json"])
        emit_report(report, base + ".csv", "csv")
        emit_report(report, base + ".json", "json")
        print(f"wrote {base}.csv and .json ({len(report.rows)} context lengths)")
        return 0

    if args.verb == "baselines":
        from .baselines import evaluate_baselines
        from .seeding import rng_for
        from .training import sample_episode

        import numpy as np

        if args.family:
            config = TrainConfig.from_dict({**values, "family": args.family})
        if args.d:
            config = TrainConfig.from_dict({**config.to_dict(), "d": args.d})
        _print_config(config)
        k_values = _parse_k_range(args.k_range, config.k)
        path = os.path.join(out, "baselines.csv")
        created.append(path)
        lines = ["k,zero_mse,lsq_mse,knn3_mse,avg_mse"]
        for k in k_values:
            errs = {name: [] for name in ("zero", "least_squares", "knn3", "averaging")}
            for i in range(args.episodes):
                rng = rng_for(config.base_seed, k, i)
                _, prompt = sample_episode(config, config.effective_d(), k, rng)
                for name, pred in evaluate_baselines(prompt).items():
                    errs[name].append((pred - prompt.query_target) ** 2)
            cells = [str(k)] + [
                repr(float(np.mean(errs[n])))
                for n in ("zero", "least_squares", "knn3", "averaging")
            ]
            lines.append(",".join(cells))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        print(f"wrote {path}")
        return 0

    # dump-episodes
    from .seeding import mix_seed, rng_for
    from .training import sample_episode

    path = os.path.join(out, "episodes.jsonl")
    created.append(path)
    with open(path, "w") as fh:
        for i in range(args.count):
            rng = rng_for(config.base_seed, i)
            _, prompt = sample_episode(config, config.effective_d(), config.k, rng)
            record = {
                "family": config.family,
                "d": config.effective_d(),
                "k": config.k,
                "seed": mix_seed(config.base_seed, i),
                "xs": [[float(v) for v in row] for row in prompt.context_xs],
                "ys": [float(v) for v in prompt.ys],
                "query_x": [float(v) for v in prompt.query_x],
                "query_y": float(prompt.query_target),
            }
            fh.write(json.dumps(record) + "\n")
    print(f"wrote {path} ({args.count} episodes)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
