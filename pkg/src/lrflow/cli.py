"""Command-line entry point: ``lrflow <command> [options]``.

Every command writes into ``--out``.  Work happens in a staging directory
inside it; on success the files move into place, on failure the staging
directory is renamed under ``failed/`` so partial outputs never mix with
finished ones.  A lock file keeps two runs out of the same directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import config as config_mod
from .checkpoint import Checkpoint
from .metrics import STEP_COUNTS, EvalContext, evaluate, timing_sweep
from .pipeline import TaskSpec, train

log = logging.getLogger("lrflow")

LAMBDA_MODES = ("lexico", "fixed_lambda:0.1", "fixed_lambda:1.0", "fixed_lambda:2.0")
LOCK_NAME = ".lock"


class UsageError(Exception):
    pass


class RunLocked(RuntimeError):
    pass


def worker_threads():
    try:
        return max(1, int(os.environ.get("LF_THREADS", "1")))
    except ValueError:
        return 1


# ------------------------------------------------------------ run directory


class RunDir:
    """Lock + staging area for one command invocation."""

    def __init__(self, out, command):
        self.root = Path(out)
        self.command = command
        self.lock = self.root / LOCK_NAME
        self.stage = None

    def __enter__(self):
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(f"{self.root} is locked by another run ({self.lock})") from None
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        self.stage = self.root / f".stage-{self.command}-{os.getpid()}"
        if self.stage.exists():
            shutil.rmtree(self.stage)
        self.stage.mkdir()
        return self

    def path(self, name):
        p = self.stage / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _commit(self):
        for src in sorted(self.stage.rglob("*")):
            if src.is_dir():
                continue
            dst = self.root / src.relative_to(self.stage)
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dst)
        shutil.rmtree(self.stage)

    def _quarantine(self):
        failed = self.root / "failed"
        failed.mkdir(exist_ok=True)
        k = 0
        while (failed / f"{self.command}-{k}").exists():
            k += 1
        os.replace(self.stage, failed / f"{self.command}-{k}")

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self._commit()
            elif self.stage is not None and self.stage.exists():
                self._quarantine()
        finally:
            self.lock.unlink(missing_ok=True)
        return False


def write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def dict_rows_csv(rows, first):
    """CSV of a list of dicts; ``first`` column leads, the rest sorted."""
    keys = [first] + sorted({k for r in rows for k in r} - {first})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([_cell(r.get(k, "")) for k in keys])
    return buf.getvalue()


def _cell(v):
    return repr(v) if isinstance(v, float) else v


# ------------------------------------------------------------ config


def effective_config(args):
    if args.config is None and args.task is None:
        raise UsageError("either --config or --task is required")
    file_values = {}
    if args.config is not None:
        try:
            file_values = config_mod.parse_text(Path(args.config).read_text(encoding="utf-8"))
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e.strerror}") from None
    overrides = config_mod.parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.mode is not None:
        overrides["mode"] = args.mode
    return config_mod.resolve(args.task, file_values, overrides)


def echo_config(run, cfg, name="config.txt"):
    """Write the effective config and the corpus hash before any work."""
    write_text(run.path(name), config_mod.dumps(cfg))
    corpus = TaskSpec.from_config(cfg).corpus()
    digest = corpus.content_hash() if corpus is not None else "none"
    write_text(run.path("corpus.sha1"), digest + "\n")
    return corpus


def load_checkpoint(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return Checkpoint.load(args.checkpoint)


# ------------------------------------------------------------ commands


def cmd_gen_corpus(args, run):
    cfg = effective_config(args)
    corpus = echo_config(run, cfg)
    if corpus is None:
        raise ValueError("gauss2d has no text corpus")
    write_text(run.path("corpus.tsv"), corpus.to_text())
    write_text(run.path("vocab.txt"), "".join(w + "\n" for w in corpus.vocab))


def _train_into(run, cfg, prefix="", resume=None):
    ckpt_every = int(cfg["checkpoint_every"])

    def on_checkpoint(ckpt, step):
        ckpt.save(run.path(f"{prefix}checkpoints/step-{step:06d}.lfv"))

    res = train(cfg, resume=resume, on_checkpoint=on_checkpoint if ckpt_every else None)
    res.checkpoint.save(run.path(f"{prefix}checkpoint.lfv"))
    write_text(run.path(f"{prefix}metrics.csv"), res.metrics_csv())
    return res


def cmd_train(args, run):
    resume = Checkpoint.load(args.resume) if args.resume else None
    if resume is not None and args.config is None and args.task is None:
        old = resume.state["config"]
        cfg = config_mod.resolve(old["task"], {k: str(v) for k, v in old.items()},
                                 config_mod.parse_overrides(args.set))
    else:
        cfg = effective_config(args)
    echo_config(run, cfg)
    res = _train_into(run, cfg, resume=resume)
    log.info("trained %d steps", len(res.rows))


def cmd_sample(args, run):
    from .pipeline import sample

    ckpt = load_checkpoint(args)
    cfg = ckpt.state["config"]
    echo_config(run, cfg)
    res = sample(ckpt, args.n, steps=args.steps, direction=args.direction, seed=args.sample_seed,
                 no_flow=args.no_latent_flow)
    if cfg["task"] == "gauss2d":
        lines = ["x,y"] + [",".join(repr(float(v)) for v in p) for p in res.outputs]
    else:
        vocab = ckpt.state["vocab"]
        lines = [" ".join(vocab[i] for i in o) for o in res.outputs]
    write_text(run.path("samples.txt"), "".join(line + "\n" for line in lines))


def cmd_eval(args, run):
    ckpt = load_checkpoint(args)
    echo_config(run, ckpt.state["config"])
    rep = evaluate(ckpt, args.n, args.steps, args.sample_seed, no_flow=args.no_latent_flow)
    write_text(run.path("eval.csv"), rep.to_csv())


def cmd_sweep_steps(args, run):
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        echo_config(run, ckpt.state["config"])
    else:
        cfg = effective_config(args)
        echo_config(run, cfg)
        ckpt = _train_into(run, cfg).checkpoint
    ctx = EvalContext(ckpt)
    n = args.n or int(ctx.spec.config["eval_samples"])
    rows = timing_sweep(ckpt, STEP_COUNTS, n, seed=args.sample_seed, context=ctx)
    write_text(run.path("steps.csv"), dict_rows_csv(rows, "steps"))


def _train_and_eval(run, cfg, prefix, n):
    res = _train_into(run, cfg, prefix=prefix)
    rep = evaluate(res.checkpoint, n)
    write_text(run.path(f"{prefix}eval.csv"), rep.to_csv())
    return res, rep


def _parallel(jobs):
    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        return [f.result() for f in [pool.submit(j) for j in jobs]]


def cmd_sweep_lambda(args, run):
    base = effective_config(args)
    echo_config(run, base)
    n = args.n

    def job(mode):
        cfg = dict(base, mode=mode)
        prefix = mode.replace(":", "_") + "/"
        write_text(run.path(prefix + "config.txt"), config_mod.dumps(cfg))
        return _train_and_eval(run, cfg, prefix, n)

    results = _parallel([lambda m=m: job(m) for m in LAMBDA_MODES])
    rows = []
    for mode, (res, rep) in zip(LAMBDA_MODES, results):
        row = {"mode": mode, "total_iterations": len(res.rows)}
        row.update(rep.values)
        rows.append(row)
    write_text(run.path("lambda.csv"), dict_rows_csv(rows, "mode"))


def cmd_compare_training(args, run):
    base = effective_config(args)
    echo_config(run, base)
    n = args.n
    modes = ("joint", "separate")

    joint_mode = "lexico" if base["mode"] == "separate" else base["mode"]

    def job(label):
        cfg = dict(base, mode="separate" if label == "separate" else joint_mode)
        write_text(run.path(label + "/config.txt"), config_mod.dumps(cfg))
        return cfg["mode"], _train_and_eval(run, cfg, label + "/", n)

    results = _parallel([lambda m=m: job(m) for m in modes])
    rows = []
    for label, (mode, (res, rep)) in zip(modes, results):
        row = {"training": label, "mode": mode, "total_iterations": len(res.rows)}
        row.update(rep.values)
        rows.append(row)
    write_text(run.path("compare.csv"), dict_rows_csv(rows, "training"))


# ------------------------------------------------------------ plot data


class PlotDataError(RuntimeError):
    pass


def _read_csv(path):
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def _tidy(rows, x_key, series_keys):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("x", "series", "value"))
    for r in rows:
        for s in series_keys:
            w.writerow((r[x_key], s, r[s]))
    return buf.getvalue()


def emit_plotdata(run_dir):
    """Write tidy ``x,series,value`` CSVs next to the metrics CSVs found in ``run_dir``.

    Returns the list of files written.
    """
    run_dir = Path(run_dir)
    written = []

    def emit(name, text):
        p = run_dir / name
        write_text(p, text)
        written.append(p)

    m = run_dir / "metrics.csv"
    if m.exists():
        rows = _read_csv(m)
        for key in ("l_vae", "l_flow", "lambda"):
            emit(f"plot_loss_{key}.csv", _tidy(rows, "step", [key]))
    for src, x_key, out in (("steps.csv", "steps", "plot_steps_quality.csv"),
                            ("lambda.csv", "mode", "plot_lambda_modes.csv"),
                            ("compare.csv", "training", "plot_training_compare.csv")):
        p = run_dir / src
        if p.exists():
            rows = _read_csv(p)
            series = [k for k in rows[0] if k not in (x_key, "mode")] if rows else []
            emit(out, _tidy(rows, x_key, series))
    if not written:
        raise PlotDataError(f"no metrics CSVs in {run_dir}")
    return written


def cmd_plotdata(args, run=None):
    for p in emit_plotdata(args.out):
        print(p)


# ------------------------------------------------------------ argv


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "sweep-steps": cmd_sweep_steps,
    "sweep-lambda": cmd_sweep_lambda,
    "compare-training": cmd_compare_training,
    "plotdata": cmd_plotdata,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="lrflow", description="latent rectified flow experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="run directory")
        if name == "plotdata":
            continue
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--task", choices=config_mod.TASKS)
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", help="lexico | fixed_lambda:<v> | separate")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
        if name in ("sample", "eval", "sweep-steps"):
            p.add_argument("--checkpoint")
            p.add_argument("--steps", type=int)
            p.add_argument("--sample-seed", type=int)
            p.add_argument("--no-latent-flow", action="store_true",
                           help="decode start latents without transport")
        if name in ("sample", "eval", "sweep-steps", "sweep-lambda", "compare-training"):
            p.add_argument("-n", type=int, default=None, help="number of samples")
        if name == "sample":
            p.add_argument("--direction", choices=("forward", "backward"), default="forward")
    return ap


def main(argv=None):
    logging.basicConfig(level=os.environ.get("LF_LOGLEVEL", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "sample" and args.n is None:
        args.n = 10
    fn = COMMANDS[args.command]
    t0 = time.perf_counter()
    try:
        if args.command == "plotdata":
            fn(args)
        else:
            needs_cfg = args.command in ("gen-corpus", "sweep-lambda", "compare-training") or (
                args.command == "train" and not args.resume) or (
                args.command == "sweep-steps" and not args.checkpoint)
            if needs_cfg and args.config is None and args.task is None:
                raise UsageError("either --config or --task is required")
            if getattr(args, "config", None) and not Path(args.config).is_file():
                raise UsageError(f"config file not found: {args.config}")
            if args.command in ("sample", "eval") and not args.checkpoint:
                raise UsageError("--checkpoint is required")
            with RunDir(args.out, args.command) as run:
                fn(args, run)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"lrflow {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # one-line cause, no traceback
        log.debug("failure", exc_info=True)
        print(f"lrflow {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
