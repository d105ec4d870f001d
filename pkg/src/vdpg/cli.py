"""Command line entry point: ``vdpg <command> [options]``.

Every invocation owns one fresh run directory holding the effective config
(``config.yaml``), line-delimited records (``metrics.jsonl``) and whatever
the command produces.  Exit codes: 0 success, 1 usage or config error,
2 data or format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ablation as A
from . import model as M
from .adaptation import (
    adapt,
    export_prompt,
    import_prompt,
    infer,
    replacement_prompt,
)
from .config import RunConfig, documented_defaults
from .data import (
    ConfigError,
    EmbeddingDataset,
    FormatError,
    concat_datasets,
    import_manifest,
    oracle_accuracy,
    read_dataset,
    synth_generate,
    write_dataset,
)
from .evaluation import eval_model
from .tensor import ContractError, NonFiniteError
from .training import NumericalError, objective_gradcheck, pretrain_unlabeled, train

LOG_ENV = "VDPG_LOG_LEVEL"
GRADCHECK_TOL = 1e-4
SUITES = ("replacement", "scheme", "losses", "diagnostics")

logger = logging.getLogger("vdpg")


class GradcheckFailed(ArithmeticError):
    pass


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (NumericalError, NonFiniteError, GradcheckFailed, FloatingPointError)):
        return 3
    if isinstance(exc, (FormatError, M.CheckpointError, FileNotFoundError, IsADirectoryError)):
        return 2
    return 1


# ---------------------------------------------------------------- run directory


class RunDir:
    """A run directory created fresh for one invocation."""

    def __init__(self, command: str, out: str | None):
        if out is None:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            base = Path("runs") / f"{command}-{stamp}"
            path, n = base, 1
            while path.exists():
                n += 1
                path = Path(f"{base}-{n}")
        else:
            path = Path(out)
            if path.exists() and (not path.is_dir() or any(path.iterdir())):
                raise ConfigError(f"run directory {path} already exists and is not empty")
        path.mkdir(parents=True, exist_ok=True)
        self.path = path
        self._metrics = open(path / "metrics.jsonl", "a")

    def __truediv__(self, name: str) -> Path:
        return self.path / name

    def record(self, kind: str, **fields) -> None:
        self._metrics.write(json.dumps({"record": kind, **fields}, sort_keys=True, default=_jsonable) + "\n")
        self._metrics.flush()

    def close(self) -> None:
        self._metrics.close()


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not serialisable: {type(obj).__name__}")


# ---------------------------------------------------------------- data loading


def _dataset_files(path: Path, split: str | None) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"no such file or directory: {path}")
    if split and (path / split).is_dir():
        path = path / split
    files = sorted(path.glob("*.vdpg")) + sorted(path.glob("*.manifest"))
    if not files:
        raise FileNotFoundError(f"no datasets under {path}")
    return files


def load_datasets(path, split: str | None = None) -> list[EmbeddingDataset]:
    """Datasets from a file, a directory of files, or a ``gen-data`` run's ``split``."""
    out = []
    for f in _dataset_files(Path(path), split):
        out.append(import_manifest(f) if f.suffix == ".manifest" else read_dataset(f)[1])
    return out


def _by_domain(datasets: list[EmbeddingDataset]) -> list[EmbeddingDataset]:
    ds = concat_datasets(datasets)
    return [ds.domain(d) for d in ds.domains]


def _load_params(path) -> M.ModelParameters:
    """Checkpoint tensors, shape-checked against the config stored with them."""
    stored, _ = M.load_checkpoint(_require(path, "--checkpoint"))
    params, _ = M.load_checkpoint(path, like=M.init_params(stored.config))
    return params


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig, run: RunDir) -> None:
    bench = synth_generate(cfg.data)
    for split, datasets in (("source", bench.source), ("target", bench.target), ("unlabeled", bench.unlabeled)):
        if not datasets:
            continue
        (run / split).mkdir()
        for ds in datasets:
            dom = ds.domains[0]
            write_dataset(ds, run / split / f"domain_{dom:03d}.vdpg")
        run.record("split", split=split, domains=len(datasets), records=sum(len(d) for d in datasets))
    bench.params.save(run / "generative.npz")
    report = {
        "source": {str(ds.domains[0]): oracle_accuracy(bench.params, ds) for ds in bench.source},
        "target": {str(ds.domains[0]): oracle_accuracy(bench.params, ds) for ds in bench.target},
    }
    if cfg.data.no_shift:
        report["warning"] = "degenerate: no domain shift"
    (run / "oracle.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    run.record("oracle", **report)


def cmd_import_data(args, cfg: RunConfig, run: RunDir) -> None:
    if args.data is None:
        raise ConfigError("--data must name a manifest file")
    ds = import_manifest(args.data)
    (run / "source").mkdir()
    for dom in ds.domains:
        write_dataset(ds.domain(dom), run / "source" / f"domain_{dom:03d}.vdpg")
    run.record("import", records=len(ds), domains=len(ds.domains), d=ds.d, l=ds.l)


def _unlabeled_sources(data_path) -> list:
    datasets = load_datasets(data_path, "source")
    root = Path(data_path)
    if root.is_dir() and (root / "unlabeled").is_dir():
        datasets += load_datasets(root, "unlabeled")
    return [ds.unlabeled_view() for ds in _by_domain(datasets)]


def cmd_pretrain(args, cfg: RunConfig, run: RunDir) -> None:
    views = _unlabeled_sources(_require(args.data, "--data"))
    params, log = pretrain_unlabeled(views, cfg.train, cfg.model)
    M.save_checkpoint(params, {"seed": cfg.train.seed, "phase": "pretrain"}, run / "pretrain.ckpt")
    log.write(run / "train_log.jsonl")
    run.record("pretrain", steps=len(log), final_corr=log.entries[-1].corr if log.entries else None,
               final_dac=log.entries[-1].dac if log.entries else None, checkpoint=run / "pretrain.ckpt")


def cmd_train(args, cfg: RunConfig, run: RunDir) -> None:
    source = _by_domain(load_datasets(_require(args.data, "--data"), "source"))
    tcfg = cfg.train
    init = None
    if args.checkpoint:
        # a pretrained checkpoint supplies bank and generator
        pre, _ = M.load_checkpoint(args.checkpoint, like=M.init_params(cfg.model))
        init = M.transplant(M.init_params(cfg.model, tcfg.seed), pre, M.generator_names(pre))
    unlabeled = None
    if tcfg.pretrain and init is None:
        unlabeled = _unlabeled_sources(args.data)
    elif tcfg.pretrain:
        tcfg = replace(tcfg, pretrain=False)
    if tcfg.checkpoint_dir:
        tcfg = replace(tcfg, checkpoint_dir=str(run / tcfg.checkpoint_dir))
    params, log = train(source, tcfg, cfg.model, init=init, unlabeled=unlabeled)
    meta = {"seed": tcfg.seed, "phase": "train", "steps": len(log)}
    M.save_checkpoint(params, meta, run / "final.ckpt")
    log.write(run / "train_log.jsonl")
    train_metrics = eval_model(params, source, cfg.eval.protocol, cfg.eval.k, cfg.eval.seed)
    run.record("train", steps=len(log), checkpoint=run / "final.ckpt", checksum=params.checksum())
    run.record("source_metrics", **train_metrics.to_dict())


def cmd_adapt(args, cfg: RunConfig, run: RunDir) -> None:
    params = _load_params(args.checkpoint)
    k = args.k or cfg.eval.k
    for ds in _by_domain(load_datasets(_require(args.data, "--data"), "target")):
        dom = ds.domains[0]
        if args.replacement and args.replacement != "generated":
            prompt = replacement_prompt(params, args.replacement, cfg.eval.seed)
        else:
            t0 = time.perf_counter()
            prompt = adapt(params, ds, k)
            run.record("adapt_time", domain=dom, seconds=time.perf_counter() - t0)
        path = run / f"prompt_{dom:03d}.vdpp"
        export_prompt(prompt, path)
        run.record("prompt", domain=dom, provenance=prompt.provenance, path=path,
                   norm=float(np.linalg.norm(prompt.P)))


def cmd_infer(args, cfg: RunConfig, run: RunDir) -> None:
    params = _load_params(args.checkpoint)
    k = args.k or cfg.eval.k
    given = import_prompt(args.prompt) if args.prompt else None
    with open(run / "predictions.jsonl", "w") as fh:
        for ds in _by_domain(load_datasets(_require(args.data, "--data"), "target")):
            dom = ds.domains[0]
            prompt = given or adapt(params, ds, k)
            pred = infer(params, prompt, ds)
            for i, p in enumerate(pred.tolist()):
                fh.write(json.dumps({"domain": dom, "index": i, "prediction": p}) + "\n")
            run.record("infer", domain=dom, records=len(ds), provenance=prompt.provenance)


def _summary_table(rows: list[tuple], header: tuple) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_eval(args, cfg: RunConfig, run: RunDir) -> None:
    params = _load_params(args.checkpoint)
    protocol = args.protocol or cfg.eval.protocol
    k = args.k or cfg.eval.k
    datasets = load_datasets(_require(args.data, "--data"), "target")
    prompts = None
    if protocol == "given-prompt":
        if not args.prompt:
            raise ConfigError("--protocol given-prompt needs --prompt")
        prompts = import_prompt(args.prompt).P
    m = eval_model(params, datasets, protocol, k, cfg.eval.seed, prompts=prompts)
    task = params.config.task
    key = "accuracy" if task == "classification" else "pearson_r"
    rows = []
    for dom, dm in sorted(m.per_domain.items()):
        run.record("domain_metrics", protocol=protocol, domain=dom, **dm.to_dict())
        rows.append((dom, dm.n, f"{getattr(dm, key):.4f}", f"{dm.macro_f1:.4f}" if task == "classification" else f"{dm.mse:.4f}"))
    worst = m.worst_accuracy if task == "classification" else m.worst_pearson_r
    run.record("metrics", protocol=protocol, k=k, **{kk: v for kk, v in m.to_dict().items() if kk != "per_domain"})
    rows.append(("all", m.n, f"{getattr(m, key):.4f}", f"{m.macro_f1:.4f}" if task == "classification" else f"{m.mse:.4f}"))
    rows.append(("worst", "", f"{worst:.4f}", ""))
    table = _summary_table(rows, ("domain", "n", key, "macro_f1" if task == "classification" else "mse"))
    (run / "summary.txt").write_text(table)
    print(table, end="")


def _seeds(args, cfg: RunConfig) -> list[int]:
    if args.seed is None:
        return [0, 1, 2]
    return [int(s) for s in str(args.seed).split(",")]


def cmd_ablate(args, cfg: RunConfig, run: RunDir) -> None:
    suite = args.suite or "losses"
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; expected one of {SUITES}")
    variants = {
        "replacement": ("full",),
        "scheme": ("full", "erm"),
        "losses": A.LOSS_LADDER,
        "diagnostics": ("task_only", "corr", "full"),
    }[suite]
    k = args.k or cfg.eval.k
    rows = []
    for seed in _seeds(args, cfg):
        scfg = cfg.with_seed(seed)
        r = A.run_seed(seed, variants, scfg.data, scfg.train, scfg.model)
        if suite == "replacement":
            acc = A.replacement_study(r, k=k)
            run.record("replacement", seed=seed, holds=A.replacement_holds(acc), **acc)
            rows.append((seed, *(f"{acc[x]:.3f}" for x in acc)))
            header = ("seed", *acc)
        elif suite == "scheme":
            acc = A.scheme_study(r, k)
            run.record("scheme", seed=seed, episodic_wins=acc["full"] > acc["erm"], **acc)
            rows.append((seed, f"{acc['erm']:.3f}", f"{acc['full']:.3f}"))
            header = ("seed", "erm", "episodic")
        elif suite == "losses":
            acc = A.loss_study(r, k)
            run.record("losses", seed=seed, monotone=A.monotone_with_one_tie(list(acc.values())), **acc)
            rows.append((seed, *(f"{v:.3f}" for v in acc.values())))
            header = ("seed", *acc)
        else:
            dist = A.distance_study(r)
            swap = A.swap_study(r, k=k)
            bank = A.bank_study(r)
            run.record("distance", seed=seed, **{lvl: rep.to_dict() for lvl, rep in dist.items()})
            run.record("swap", seed=seed, spearman=swap.spearman, pairs=swap.pairs)
            run.record("bank", seed=seed, **bank)
            rows.append((seed, f"{dist['domain'].intra:.4f}", f"{dist['domain'].inter:.4f}",
                         f"{swap.spearman:.3f}", f"{bank['with_corr']:.2e}", f"{bank['without_corr']:.2e}"))
            header = ("seed", "intra", "inter", "spearman", "bank_corr", "bank_no_corr")
    table = _summary_table(rows, header)
    (run / "summary.txt").write_text(table)
    print(table, end="")


def cmd_gradcheck(args, cfg: RunConfig, run: RunDir) -> None:
    seed = cfg.train.seed
    t0 = time.perf_counter()
    err = objective_gradcheck(cfg.model, cfg.train.weights, seed=seed)
    secs = time.perf_counter() - t0
    ok = err < GRADCHECK_TOL
    run.record("gradcheck", max_rel_error=err, tolerance=GRADCHECK_TOL, seconds=secs, passed=ok)
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, {secs:.1f}s)")
    if not ok:
        raise GradcheckFailed(f"max relative error {err:.3e} exceeds {GRADCHECK_TOL}")


def cmd_config(args, cfg: RunConfig, run: RunDir) -> None:
    print(documented_defaults())


COMMANDS = {
    "gen-data": cmd_gen_data,
    "import-data": cmd_import_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vdpg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config or preset name (default, toy)")
        p.add_argument("--seed", help="seed override; ablate accepts a comma list")
        p.add_argument("--out", help="run directory to create (must not exist or be empty)")
        p.add_argument("--checkpoint", help="model checkpoint")
        p.add_argument("--data", help="dataset file, directory, or gen-data run directory")
        p.add_argument("--protocol", choices=("adapt-per-domain", "zero-prompt", "given-prompt"))
        p.add_argument("--k", type=int, help="adaptation records per domain")
        p.add_argument("--replacement", choices=("generated", "zeros", "random", "bank"))
        p.add_argument("--suite", choices=SUITES)
        p.add_argument("--prompt", help="prompt file from adapt")
    sub.add_parser("show-config", help="list every config key with its default")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get(LOG_ENV, "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if args.command == "show-config":
        cmd_config(args, None, None)
        return 0
    run = None
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None and args.command != "ablate":
            cfg = cfg.with_seed(int(args.seed))
        if args.k is not None and args.k < 1:
            raise ConfigError("--k must be >= 1")
        run = RunDir(args.command, args.out)
        cfg.dump(run / "config.yaml")
        COMMANDS[args.command](args, cfg, run)
        run.record("done", command=args.command, run_dir=run.path)
        print(json.dumps({"status": "ok", "command": args.command, "run_dir": str(run.path)}))
        return 0
    except (ConfigError, ContractError, ValueError, KeyError, OSError, ArithmeticError, RuntimeError) as exc:
        code = exit_code(exc)
        err = {"status": "error", "command": args.command, "error": type(exc).__name__,
               "message": str(exc), "exit_code": code}
        if isinstance(exc, FormatError):
            err["offset"] = exc.offset
        if run is not None:
            run.record("error", **{k: v for k, v in err.items() if k != "status"})
        print(json.dumps(err), file=sys.stderr)
        return code
    finally:
        if run is not None:
            run.close()


if __name__ == "__main__":
    sys.exit(main())
