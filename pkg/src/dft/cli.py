"""Command-line entry point: train, eval, analyze-correlation,
probe-covariate, gen-sbm.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import os

# Cap BLAS parallelism before numpy loads anything.
if "DFT_THREADS" in os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["DFT_THREADS"])

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .data import load_dataset, save_dataset
from .graph import Graph, build_operators, random_graph, sbm_generate
from .metrics import (
    covariate_shift_probe,
    evaluate_representations,
    expected_correlation,
    glorot_correlation_curve,
    monte_carlo_correlation,
)
from .model import forward, load_checkpoint, prepare_graph, save_checkpoint
from .train import TrainConfig, graph_operators, train, write_history_csv

_RUN_ONLY_KEYS = {"source", "target", "out_dir", "export_embeddings"}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            parser.add_argument(flag, type=_parse_bool, default=None)
        elif f.name == "variant":
            parser.add_argument(flag, type=str, default=None)
        else:
            caster = float if "float" in str(f.type) else int
            parser.add_argument(flag, type=caster, default=None)


def _load_run_config(path, overrides: dict) -> tuple[TrainConfig, dict]:
    """Strictly parse the JSON run config and apply CLI overrides."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    known = {f.name for f in fields(TrainConfig)} | _RUN_ONLY_KEYS
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    run = {k: raw.get(k) for k in _RUN_ONLY_KEYS}
    cfg_values = {k: v for k, v in raw.items() if k not in _RUN_ONLY_KEYS}
    for key, value in overrides.items():
        if value is not None:
            cfg_values[key] = value
    cfg = TrainConfig.from_dict(cfg_values)
    return cfg, run


def _write_embeddings_csv(z: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(f"z{j}" for j in range(z.shape[1])) + "\n")
        for row in z:
            f.write(",".join(f"{v:.9g}" for v in row) + "\n")


def _eval_forward(g: Graph, params, cfg: TrainConfig):
    prepared = prepare_graph(g, graph_operators(g, cfg))
    rng = np.random.default_rng(0)  # unused in eval mode (no dropout)
    return forward(prepared, params, training=False, rng=rng,
                   dropout_rate=0.0, literal_hadamard=cfg.sa_literal)


def cmd_train(args) -> int:
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)}
    cfg, run = _load_run_config(args.config, overrides)
    if args.source is not None:
        run["source"] = args.source
    if args.target is not None:
        run["target"] = args.target
    if args.out is not None:
        run["out_dir"] = args.out
    for key in ("source", "target", "out_dir"):
        if not run.get(key):
            raise ConfigError(f"train: '{key}' must be set in the config or flags")
    if cfg.seed is None:
        raise ConfigError("train: --seed (or config 'seed') is required")

    g_s = load_dataset(run["source"])
    g_t = load_dataset(run["target"])
    if g_s.labels is None:
        raise DataError(f"source dataset {run['source']} has no labels")

    params, history = train(g_s, g_t, cfg)

    out_dir = Path(run["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    config = cfg.to_dict()
    config["input_dim"] = g_s.feature_dim
    config["num_classes"] = g_s.num_classes
    save_checkpoint(out_dir / "model.ckpt", params, config)
    write_history_csv(history, out_dir / "loss_history.csv")

    if g_t.labels is not None:
        fwd = _eval_forward(g_t, params, cfg)
        pred = fwd.y_hat.data.argmax(axis=1)
        report = evaluate_representations(fwd.z.data, pred, g_t.labels,
                                          g_s.num_classes)
        (out_dir / "metrics.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        print(f"target micro-F1 {report.micro_f1:.4f} "
              f"macro-F1 {report.macro_f1:.4f} icdr {report.icdr:.4f}")
        if run.get("export_embeddings"):
            _write_embeddings_csv(fwd.z.data, out_dir / "embeddings.csv")
    print(f"artifacts written to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    params, config = load_checkpoint(
        args.checkpoint,
        lambda cfg_dict: TrainConfig.from_dict(
            {k: v for k, v in cfg_dict.items()
             if k not in ("input_dim", "num_classes")}),
    )
    cfg = TrainConfig.from_dict(
        {k: v for k, v in config.items() if k not in ("input_dim", "num_classes")})
    g = load_dataset(args.dataset)
    if g.feature_dim != config["input_dim"]:
        raise DataError(
            f"eval: dataset feature dim {g.feature_dim} does not match "
            f"checkpoint input dim {config['input_dim']}"
        )
    if g.labels is None:
        raise DataError(f"eval: dataset {args.dataset} has no labels")
    if g.num_classes != config["num_classes"]:
        raise DataError(
            f"eval: dataset has {g.num_classes} classes, checkpoint expects "
            f"{config['num_classes']}"
        )
    fwd = _eval_forward(g, params, cfg)
    pred = fwd.y_hat.data.argmax(axis=1)
    report = evaluate_representations(fwd.z.data, pred, g.labels,
                                      config["num_classes"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    if args.embeddings:
        _write_embeddings_csv(fwd.z.data, args.embeddings)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_analyze_correlation(args) -> int:
    if (args.graph is None) == (args.random is None):
        raise ConfigError("analyze-correlation: pass exactly one of "
                          "--graph or --random N P")
    if args.graph is not None:
        g = load_dataset(args.graph)
    else:
        n, p = int(args.random[0]), float(args.random[1])
        g = random_graph(n, p, rng=args.seed)
    base = g.adjacency() + np.eye(g.n)
    if args.normalized:
        from .graph import sym_normalize

        base = sym_normalize(g.adjacency())
    glorot_means, glorot_err = glorot_correlation_curve(
        base, args.depth, args.feat_dim, args.samples, rng=args.seed + 1)
    rows = []
    for k in range(args.depth + 1):
        closed = expected_correlation(base, k, args.feat_dim)
        mc_mean, mc_err = monte_carlo_correlation(
            base, k, args.feat_dim, args.samples, rng=args.seed + 2 + k)
        rows.append((k, closed, mc_mean, mc_err, glorot_means[k], glorot_err[k]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        f.write("depth,closed_form,mc_mean,mc_stderr,glorot_mean,glorot_stderr\n")
        for row in rows:
            f.write(f"{row[0]}," + ",".join(f"{v:.9g}" for v in row[1:]) + "\n")
    print(f"correlation curves written to {out}")
    return 0


def cmd_probe_covariate(args) -> int:
    g_s = load_dataset(args.source)
    g_t = load_dataset(args.target)
    if g_s.labels is None or g_t.labels is None:
        raise DataError("probe-covariate: both datasets need labels")
    agreement = covariate_shift_probe(g_s.features.data, g_s.labels,
                                      g_t.features.data, g_t.labels, k=args.k)
    rng = np.random.default_rng(args.seed)
    shuffled = covariate_shift_probe(g_s.features.data, g_s.labels,
                                     g_t.features.data,
                                     rng.permutation(g_t.labels), k=args.k)
    result = {"agreement": agreement, "shuffled_agreement": shuffled,
              "k": args.k}
    if args.out:
        Path(args.out).write_text(
            json.dumps(result, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


_SBM_KEYS = {"name", "blocks", "p_in", "p_out", "feat_std", "feat_means",
             "feat_dim", "mean_separation"}


def cmd_gen_sbm(args) -> int:
    try:
        spec = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"spec file not found: {args.spec}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.spec}: invalid JSON ({exc})")
    unknown = sorted(set(spec) - _SBM_KEYS)
    if unknown:
        raise ConfigError(f"{args.spec}: unknown keys {unknown}")
    for key in ("blocks", "p_in", "p_out", "feat_std"):
        if key not in spec:
            raise ConfigError(f"{args.spec}: missing key {key!r}")
    blocks = spec["blocks"]
    if "feat_means" in spec:
        means = np.asarray(spec["feat_means"], dtype=np.float64)
    else:
        if "feat_dim" not in spec or "mean_separation" not in spec:
            raise ConfigError(
                f"{args.spec}: need feat_means, or feat_dim + mean_separation")
        dim = int(spec["feat_dim"])
        if dim < len(blocks):
            raise ConfigError(f"{args.spec}: feat_dim must be >= block count")
        # one-hot axes scaled so every pair of class means is exactly
        # mean_separation apart
        means = np.zeros((len(blocks), dim))
        for c in range(len(blocks)):
            means[c, c] = spec["mean_separation"] / np.sqrt(2.0)
    g = sbm_generate(blocks, spec["p_in"], spec["p_out"], means,
                     spec["feat_std"], rng=args.seed)
    # features are stored as f32; round now so the saved dataset is the
    # dataset (load(save(g)) == load∘save identity)
    g.features.data[...] = g.features.data.astype("<f4").astype(np.float64)
    save_dataset(g, args.out, name=spec.get("name", "sbm"))
    print(f"dataset written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dft",
        description="Decorrelated feature extraction and graph transformers "
                    "for unsupervised graph domain adaptation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on a source/target pair")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--source", default=None)
    p_train.add_argument("--target", default=None)
    p_train.add_argument("--out", default=None)
    _add_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--embeddings", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_corr = sub.add_parser("analyze-correlation",
                            help="closed-form and Monte Carlo feature "
                                 "correlation vs propagation depth")
    p_corr.add_argument("--graph", default=None)
    p_corr.add_argument("--random", nargs=2, metavar=("N", "P"), default=None)
    p_corr.add_argument("--depth", type=int, default=5)
    p_corr.add_argument("--feat-dim", type=int, default=16)
    p_corr.add_argument("--samples", type=int, default=10000)
    p_corr.add_argument("--seed", type=int, default=0)
    p_corr.add_argument("--normalized", action="store_true",
                        help="use the degree-normalized operator instead of "
                             "the raw self-loop adjacency")
    p_corr.add_argument("--out", required=True)
    p_corr.set_defaults(func=cmd_analyze_correlation)

    p_probe = sub.add_parser("probe-covariate",
                             help="kNN label-agreement probe across domains")
    p_probe.add_argument("--source", required=True)
    p_probe.add_argument("--target", required=True)
    p_probe.add_argument("--k", type=int, default=128)
    p_probe.add_argument("--seed", type=int, default=0)
    p_probe.add_argument("--out", default=None)
    p_probe.set_defaults(func=cmd_probe_covariate)

    p_gen = sub.add_parser("gen-sbm", help="generate a synthetic dataset")
    p_gen.add_argument("--spec", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, required=True)
    p_gen.set_defaults(func=cmd_gen_sbm)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
