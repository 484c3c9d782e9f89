"""Command-line entry point: ``otfuse <command> [flags]``.

Every command reads an optional JSON run file (``--config``) whose values
are overridden by command-line flags. Metrics go to stdout and, with
``--metrics``, to a file with identical content. Failures print one JSON
line ``{"error": <class>, "message": ...}`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import warnings
from pathlib import Path

from . import flowgraph as fg
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .fusion import (
    FusionConfig,
    FusionError,
    HeterogeneousError,
    SequenceFilter,
    Solver,
    compute_alignment,
    fuse_models,
    vanilla_fuse,
)
from .harness.experiments import (
    DEFAULT_LAMBDA_GRID,
    curve_jsonl,
    metrics_csv,
    permutation_recovery,
    sample_inputs,
    sweep_regularizer,
)
from .harness.task import SyntheticTask, gen_splits
from .harness.train import TrainConfig, TrainingDivergedError, evaluate, train_model
from .linalg import Rng, ShapeError
from .model import ArchConfig, init_params
from .ot import OTError, SinkhornConvergenceWarning

EXIT_USAGE = 2
EXIT_BAD_FILE = 3
EXIT_SHAPE = 4
EXIT_HETEROGENEOUS = 5
EXIT_SOLVER = 6
EXIT_TRAINING = 7

RUN_KEYS = {"seed", "task", "data", "arch", "train", "fusion", "lambda_grid"}


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _filter(text: str) -> SequenceFilter:
    try:
        return SequenceFilter.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _grid(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad lambda grid {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("run options")
    g.add_argument("--config", type=Path, help="JSON run file; flags override its values")
    g.add_argument("--seed", type=_u64, help="global seed (training, sampling, permutations)")
    g.add_argument("--out", type=Path, help="output artifact path")
    g.add_argument("--metrics", type=Path, help="also write the stdout metrics to this file")

    fusion = _Parser(add_help=False)
    f = fusion.add_argument_group("fusion options")
    f.add_argument("--anchor", type=int, help="index of the anchor checkpoint")
    f.add_argument("--mode", choices=["weights", "acts", "vanilla"])
    f.add_argument("--solver", choices=["emd", "sinkhorn"])
    f.add_argument("--lambda", dest="lam", type=float, help="Sinkhorn regulariser")
    f.add_argument("--residual", choices=[p.value for p in fg.ResidualPolicy])
    f.add_argument("--filter", type=_filter, help="all, cls or window:<n>")
    f.add_argument("--tie-qk", type=_on_off, metavar="{on,off}")

    parser = _Parser(prog="otfuse", description="Optimal-transport fusion of small transformers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train one model, write checkpoint + curve")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--hidden-dim", type=int, help="model width (intermediate = 2x)")

    p = sub.add_parser("fuse", parents=[common, fusion], help="fuse checkpoints")
    p.add_argument("checkpoints", nargs="+", type=Path)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("checkpoint", type=Path)

    p = sub.add_parser("sweep", parents=[common, fusion], help="one-shot accuracy over lambda")
    p.add_argument("checkpoints", nargs="+", type=Path)
    p.add_argument("--lambda-grid", type=_grid, help="comma-separated regulariser values")

    p = sub.add_parser("perm-test", parents=[common], help="permutation-recovery self test")
    p.add_argument("checkpoint", nargs="?", type=Path,
                   help="model to test (default: a fresh model drawn from --seed)")

    p = sub.add_parser("dump-graph", parents=[common, fusion],
                       help="write the flow graph as DOT, with maps if two checkpoints are given")
    p.add_argument("checkpoints", nargs="*", type=Path)
    return parser


def _load_run_file(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        run = json.loads(path.read_text())
    except OSError as exc:
        raise CliError("bad-file", f"{path}: {exc.strerror}", EXIT_BAD_FILE) from exc
    except json.JSONDecodeError as exc:
        raise CliError("bad-file", f"{path}: invalid JSON ({exc.msg})", EXIT_BAD_FILE) from exc
    if not isinstance(run, dict) or set(run) - RUN_KEYS:
        extra = sorted(set(run) - RUN_KEYS) if isinstance(run, dict) else run
        raise CliError("config", f"unknown run-file keys {extra}", EXIT_USAGE)
    return run


class Run:
    """Resolved settings of one invocation (run file < flags)."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        run = _load_run_file(args.config)
        self.seed = args.seed if args.seed is not None else int(run.get("seed", 0))
        self.seed_flag = args.seed is not None
        self.task = SyntheticTask(**run.get("task", {}))
        data = run.get("data", {})
        self.n_train = int(data.get("n_train", 2000))
        self.n_test = int(data.get("n_test", 500))
        self.arch_overrides = dict(run.get("arch", {}))
        self.train_dict = dict(run.get("train", {}))
        self.fusion_dict = dict(run.get("fusion", {}))
        self.lambda_grid = list(run.get("lambda_grid", DEFAULT_LAMBDA_GRID))
        self._data = None
        self._lines: list[str] = []

    def data(self):
        if self._data is None:
            self._data = gen_splits(self.task, self.n_train, self.n_test)
        return self._data

    def train_config(self) -> TrainConfig:
        d = dict(self.train_dict)
        if self.seed_flag or "seed" not in d:
            d["seed"] = self.seed
        if getattr(self.args, "epochs", None) is not None:
            d["epochs"] = self.args.epochs
        return TrainConfig(**d)

    def arch(self) -> ArchConfig:
        over = dict(self.arch_overrides)
        if getattr(self.args, "hidden_dim", None) is not None:
            over["hidden_dim"] = self.args.hidden_dim
            over["intermediate_dim"] = 2 * self.args.hidden_dim
        return self.task.arch(**over)

    def fusion_config(self) -> tuple[FusionConfig, bool]:
        """The fusion settings and whether plain averaging was requested."""
        a = self.args
        d = dict(self.fusion_dict)
        if self.seed_flag or "sample_seed" not in d:
            d["sample_seed"] = self.seed
        vanilla = a.mode == "vanilla" or d.get("mode") == "vanilla"
        if vanilla:
            d.pop("mode", None)
        elif a.mode is not None:
            d["mode"] = a.mode
        for key, val in (("anchor_index", a.anchor), ("solver", a.solver), ("lam", a.lam),
                         ("filter", a.filter), ("tie_qk", a.tie_qk),
                         ("residual_policy", a.residual)):
            if val is not None:
                d[key] = val
        if d.get("solver") == "emd" and "tie_qk" not in d:
            d["tie_qk"] = True
        return FusionConfig.from_dict(d), vanilla

    def emit(self, line: str) -> None:
        sys.stdout.write(line if line.endswith("\n") else line + "\n")
        self._lines.append(line if line.endswith("\n") else line + "\n")

    def finish(self) -> None:
        if self.args.metrics is not None:
            _write(self.args.metrics, "".join(self._lines))


def _write(path: Path, content: str | bytes) -> None:
    try:
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            path.write_text(content)
    except OSError as exc:
        raise CliError("bad-file", f"{path}: {exc.strerror}", EXIT_BAD_FILE) from exc


def _load_all(paths):
    models, archs = [], []
    for p in paths:
        params, arch = load_checkpoint(p)
        models.append(params)
        archs.append(arch)
    return models, archs


def _need_out(run: Run) -> Path:
    if run.args.out is None:
        raise CliError("usage", f"{run.args.command} needs --out", EXIT_USAGE)
    return run.args.out


def cmd_train(run: Run) -> None:
    out = _need_out(run)
    cfg = run.train_config()
    train, test = run.data()
    params, curve = train_model(run.arch(), train, cfg, eval_data=test)
    meta = {"train": cfg.to_dict(), "task": run.task.to_dict()}
    save_checkpoint(params, run.arch(), out, meta=meta)
    run.emit(curve_jsonl(curve))


def _sample(run: Run, config: FusionConfig):
    return sample_inputs(run.data()[0][0], config.sample_size, config.sample_seed)


def cmd_fuse(run: Run) -> None:
    config, vanilla = run.fusion_config()
    models, archs = _load_all(run.args.checkpoints)
    test = run.data()[1]
    if vanilla:
        fused = vanilla_fuse(models)
        rows = []
    else:
        fused = fuse_models(models, archs, config, _sample(run, config))
        rows = [evaluate(m, a, test, f"parent-{i}") for i, (m, a) in enumerate(zip(models, archs))]
        try:
            rows.append(evaluate(vanilla_fuse(models), archs[config.anchor_index], test, "vf"))
        except HeterogeneousError:
            pass  # no vanilla baseline across widths
    anchor_arch = archs[0] if vanilla else archs[config.anchor_index]
    row = evaluate(fused, anchor_arch, test, "vf" if vanilla else "ot")
    if not vanilla and config.solver is Solver.SINKHORN:
        row.lam = config.regularizer
    rows.append(row)
    if run.args.out is not None:
        meta = {"fusion": None if vanilla else config.to_dict(),
                "inputs": [p.name for p in run.args.checkpoints]}
        save_checkpoint(fused, anchor_arch, run.args.out, meta=meta)
    for r in rows:
        run.emit(r.to_json())


def cmd_eval(run: Run) -> None:
    params, arch = load_checkpoint(run.args.checkpoint)
    run.emit(evaluate(params, arch, run.data()[1], run.args.checkpoint.name).to_json())


def cmd_sweep(run: Run) -> None:
    config, vanilla = run.fusion_config()
    if vanilla:
        raise CliError("usage", "sweep needs --mode weights or acts", EXIT_USAGE)
    grid = run.args.lambda_grid if run.args.lambda_grid is not None else run.lambda_grid
    models, archs = _load_all(run.args.checkpoints)
    rows = sweep_regularizer(models, archs, config, grid, run.data()[1], _sample(run, config))
    text = metrics_csv(rows)
    if run.args.out is not None:
        _write(run.args.out, text)
    run.emit(text)


def cmd_perm_test(run: Run) -> None:
    if run.args.checkpoint is not None:
        params, arch = load_checkpoint(run.args.checkpoint)
    else:
        arch = run.arch()
        params = init_params(arch, Rng(run.seed, stream=0))
    rep = permutation_recovery(params, arch, run.seed)
    run.emit(json.dumps(dict(dataclasses.asdict(rep), seed=run.seed), sort_keys=True))


def cmd_dump_graph(run: Run) -> None:
    paths = run.args.checkpoints
    if not paths:
        dot = fg.to_dot(fg.build_encoder_flow_graph(run.arch()))
    elif len(paths) == 2:
        config, vanilla = run.fusion_config()
        if vanilla:
            raise CliError("usage", "dump-graph maps need --mode weights or acts", EXIT_USAGE)
        models, archs = _load_all(paths)
        k = config.anchor_index
        if k not in (0, 1):
            raise CliError("usage", f"anchor index {k} out of range for 2 models", EXIT_USAGE)
        al = compute_alignment(models[k], models[1 - k], archs[k], archs[1 - k], config,
                               _sample(run, config) if config.needs_activations else None)
        dot = fg.to_dot(al.graph, al.edge_maps)
    else:
        raise CliError("usage", "dump-graph takes zero or two checkpoints", EXIT_USAGE)
    if run.args.out is not None:
        _write(run.args.out, dot)
    else:
        sys.stdout.write(dot)


COMMANDS = {
    "train": cmd_train,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "perm-test": cmd_perm_test,
    "dump-graph": cmd_dump_graph,
}


def _classify(exc: BaseException) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, CheckpointError):
        return CliError(f"bad-file:{exc.kind}", str(exc), EXIT_BAD_FILE)
    if isinstance(exc, OSError):
        return CliError("bad-file", f"{exc.filename}: {exc.strerror}", EXIT_BAD_FILE)
    if isinstance(exc, HeterogeneousError):
        return CliError("heterogeneous", str(exc), EXIT_HETEROGENEOUS)
    if isinstance(exc, (ShapeError, FusionError)):
        return CliError("shape-mismatch", str(exc), EXIT_SHAPE)
    if isinstance(exc, (OTError, SinkhornConvergenceWarning)):
        return CliError("solver-failure", str(exc), EXIT_SOLVER)
    if isinstance(exc, TrainingDivergedError):
        return CliError("training-diverged", str(exc), EXIT_TRAINING)
    if isinstance(exc, (ValueError, TypeError)):
        return CliError("config", str(exc), EXIT_USAGE)
    raise exc


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        run = Run(args)
        with warnings.catch_warnings():
            # a Sinkhorn solve that misses its tolerance is a hard failure here
            warnings.simplefilter("error", SinkhornConvergenceWarning)
            COMMANDS[args.command](run)
        run.finish()
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        err = _classify(exc)
        msg = " ".join(str(err).split())
        sys.stderr.write(json.dumps({"error": err.kind, "message": msg}) + "\n")
        return err.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
