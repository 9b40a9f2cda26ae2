"""Command-line entry point: gen, analyze, distill, eval, bench.

Exit codes: 0 success, 1 a library contract failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from svdkd.data_model import Modality, load_embedding_set, save_embedding_set
from svdkd.errors import ArgumentError, IoError, SvdkdError
from svdkd.evaluation import DEFAULT_TASKS, EvalMode, EvalTask, evaluate_retrieval, metrics_csv
from svdkd.losses import TABLE3_CONFIGS
from svdkd.spectral import spectrum_report, thin_svd
from svdkd.student import TrainConfig, encode_set, forward, load_student, save_student, train_distill
from svdkd.synth import SynthConfig, generate_dataset

log = logging.getLogger("svdkd")

CONFIG_SECTIONS = ("synth", "train", "eval")

CONFIG_HELP = """\
config JSON (every key optional; unknown keys are rejected;
"published" marks the reference-method setting a desk default stands in for):
  synth: n_identities=128 samples_per_modality=4 d=256 d_in=64 latent_rank=256
         gamma=1.2 modality_gap=0.1 noise_sigma=0.3 input_noise_sigma=0.1
         ambient_noise_sigma=0 nuisance_rank=0 nuisance_sigma=0 basis_block=4 seed=0
  train: epochs=20 (published: 60)  P=4 K=8 (published: 16 x 8)
         weights={task,cosine,pcm,fr} or one of "a".."e"
                 (default 0.01/0.29/0.35/0.35, published; must sum to 1)
         task={margin=0.3, tau=0.02, epsilon=1e-8}
         pcm_k=50 (published)  lr_initial=1e-3 lr_min=1e-6 (published: 1e-5 -> 1e-6, cosine)
         weight_decay=0.01 hidden=128 depth=8 residual=true
         lora={enabled=false, rank=16 (published), stride=2 (published), dense_tail=4}
         holdout_fraction=0.2 grad_check=true seed=0
  eval:  tasks=["ir:rgb","text:rgb","sketch:rgb"] mode="e2e"
"""


# ------------------------------------------------------------------ config


def load_config(path: str | None) -> dict:
    """Parse and validate a CLI config file into ``{"synth", "train", "eval"}`` objects."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ArgumentError("config must be a JSON object")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise ArgumentError(f"unknown config sections: {sorted(unknown)}")
    try:
        train = dict(raw.get("train", {}))
        if isinstance(train.get("weights"), str):
            name = train["weights"]
            if name not in TABLE3_CONFIGS:
                raise ArgumentError(f"unknown weight preset {name!r}; expected one of {sorted(TABLE3_CONFIGS)}")
            train["weights"] = TABLE3_CONFIGS[name]
        cfg = {
            "synth": SynthConfig.from_dict(raw.get("synth", {})),
            "train": TrainConfig.from_dict(train),
            "eval": _eval_section(raw.get("eval", {})),
        }
    except TypeError as exc:
        raise ArgumentError(f"bad config value: {exc}") from exc
    return cfg


def _eval_section(section: dict) -> dict:
    unknown = set(section) - {"tasks", "mode"}
    if unknown:
        raise ArgumentError(f"unknown eval config keys: {sorted(unknown)}")
    tasks = tuple(EvalTask.parse(t) for t in section.get("tasks", [])) or DEFAULT_TASKS
    return {"tasks": tasks, "mode": EvalMode.parse(section.get("mode", "e2e"))}


def _write_text(path: str | Path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _csv(header, rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return out.getvalue()


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> None:
    cfg = load_config(args.config)["synth"]
    if args.seed is not None:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    es = generate_dataset(cfg)
    save_embedding_set(es, args.out, args.format)
    log.info("wrote %d rows (d=%d, d_in=%d) to %s", es.n, es.d, es.d_in, args.out)


def importance_path(out: str | Path) -> Path:
    out = Path(out)
    return out.with_name(out.stem + "_importance" + (out.suffix or ".csv"))


def cmd_analyze(args) -> None:
    es = load_embedding_set(args.input)
    if args.modality:
        es = es.subset(es.rows_for(Modality.parse(args.modality)))
    if es.n == 0:
        raise ArgumentError("no rows left to analyze")
    rep = spectrum_report(thin_svd(es.features, center=args.center))
    rows = [
        (k + 1, repr(float(s)), repr(float(w)), repr(float(c)))
        for k, (s, w, c) in enumerate(zip(rep.singular_values, rep.weights, rep.cumulative))
    ]
    _write_text(args.out, _csv(("component_index", "sigma", "weight", "cumulative"), rows))
    imp_out = args.importance_out or importance_path(args.out)
    _write_text(imp_out, _csv(("dim_index", "importance"), [(j, repr(float(v))) for j, v in enumerate(rep.importance)]))
    if args.figure:
        from svdkd.plotting import spectrum_figure

        spectrum_figure(rep.singular_values, rep.cumulative, rep.importance, args.figure)
    log.info("effective rank: %d (90%%), %d (99%%)", rep.effective_rank_90, rep.effective_rank_99)


def cmd_distill(args) -> None:
    cfg = load_config(args.config)["train"]
    teacher = load_embedding_set(args.teacher)
    model, tlog = train_distill(teacher, cfg)
    save_student(model, args.out, extra=cfg.to_dict())
    _write_text(args.log, tlog.to_csv())
    if args.embed_out:
        save_embedding_set(encode_set(model, teacher, "edge"), args.embed_out)
    if args.figure:
        from svdkd.plotting import loss_figure

        steps = np.array([r.step for r in tlog.steps])
        curves = {name: np.array([getattr(r, name) for r in tlog.steps]) for name in ("total", "shared")}
        loss_figure(steps, curves, args.figure)
    if tlog.epochs:
        log.info("final held-out E2E avg mAP %.4f", tlog.final_heldout_map())


def cmd_eval(args) -> None:
    section = load_config(args.config)["eval"]
    query = load_embedding_set(args.query, source_tag=args.query_source)
    gallery = load_embedding_set(args.gallery, source_tag=args.gallery_source)
    tasks = tuple(EvalTask.parse(t) for t in args.task) if args.task else section["tasks"]
    mode = EvalMode.parse(args.mode) if args.mode else section["mode"]
    rows = [(task, mode, evaluate_retrieval(query, gallery, task, mode)) for task in tasks]
    _write_text(args.out, metrics_csv(rows))


def cmd_bench(args) -> None:
    model, _ = load_student(args.student)
    rng = np.random.default_rng(0)
    rows = []
    for b in args.batch or [1]:
        if b < 1:
            raise ArgumentError(f"batch size must be positive, got {b}")
        x = rng.standard_normal((b, model.arch.d_in))
        mods = np.arange(b) % len(Modality)
        forward(model, x, mods)  # warm-up
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            forward(model, x, mods)
            times.append(time.perf_counter() - t0)
        latency = float(np.median(times))
        rows.append((b, repr(latency * 1e3), repr(b / latency if latency > 0 else float("inf"))))
    _write_text(args.out, _csv(("batch", "latency_ms", "throughput"), rows))


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="svdkd",
        description="SVD-guided feature distillation for cross-modal ReID embeddings at desk scale.",
        epilog=CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="{gen,analyze,distill,eval,bench}")

    def add(name, help_, func):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=CONFIG_HELP,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=func)
        return sp

    g = add("gen", "generate a synthetic teacher embedding set with a power-law spectrum", cmd_gen)
    g.add_argument("--config", help="JSON config; the 'synth' section is used")
    g.add_argument("--out", required=True, help="output embedding file (.emb1 or .csv)")
    g.add_argument("--seed", type=int, help="override synth.seed")
    g.add_argument("--format", choices=["EMB1", "CSV"], help="output format (default: from suffix)")

    a = add("analyze", "spectrum of a feature matrix: explained variance and per-dimension importance", cmd_analyze)
    a.add_argument("--in", dest="input", required=True, help="embedding file to analyze")
    a.add_argument("--out", required=True, help="spectrum CSV: component_index,sigma,weight,cumulative")
    a.add_argument("--importance-out", help="importance CSV dim_index,importance (default: <out>_importance.csv)")
    a.add_argument("--modality", help="restrict to rows of one modality (rgb, ir, sketch, text)")
    a.add_argument("--center", action="store_true", help="subtract the column mean before the SVD (off: raw features)")
    a.add_argument("--figure", help="also render the spectrum to this image file (needs matplotlib)")

    d = add("distill", "train a student to match teacher features (task + cosine + PCM + FR losses)", cmd_distill)
    d.add_argument("--teacher", required=True, help="teacher embedding file carrying raw student inputs")
    d.add_argument("--config", help="JSON config; the 'train' section is used (weights default 0.01/0.29/0.35/0.35)")
    d.add_argument("--out", required=True, help="student checkpoint (STU1)")
    d.add_argument("--log", required=True, help="per-step CSV step,lr,task,cosine,pcm,fr,total,shared")
    d.add_argument("--embed-out", help="also write the student's features for every teacher row (source 'edge')")
    d.add_argument("--figure", help="also plot the total and shared loss curves (needs matplotlib)")

    e = add("eval", "Rank-1/5/10, mAP and mINP for cross-modal retrieval", cmd_eval)
    e.add_argument("--query", required=True, help="query embedding file")
    e.add_argument("--gallery", required=True, help="gallery embedding file")
    e.add_argument("--task", action="append", help="query:gallery modalities, repeatable (default ir:rgb text:rgb sketch:rgb)")
    e.add_argument("--mode", choices=[m.value for m in EvalMode], help="c2c, e2e or e2c source pairing (default e2e)")
    e.add_argument("--query-source", help="override the query set's source tag (cloud/edge)")
    e.add_argument("--gallery-source", help="override the gallery set's source tag (cloud/edge)")
    e.add_argument("--config", help="JSON config; the 'eval' section supplies default tasks and mode")
    e.add_argument("--out", required=True, help="metrics CSV task,mode,rank1,rank5,rank10,map,minp,n_queries")

    b = add("bench", "forward-pass latency and throughput of a student checkpoint", cmd_bench)
    b.add_argument("--student", required=True, help="STU1 checkpoint")
    b.add_argument("--batch", type=int, action="append", help="batch size, repeatable (default 1)")
    b.add_argument("--repeats", type=int, default=50, help="timed repetitions per batch size (median reported)")
    b.add_argument("--out", required=True, help="CSV batch,latency_ms,throughput")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except SvdkdError as exc:
        print(f"svdkd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
