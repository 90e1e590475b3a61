"""Command-line entry point: ``david <command> [options]``.

Every command takes ``--seed``, ``--config`` (JSON file, optionally with one
section per command) and ``--out``. Values resolve as CLI flag > config file >
default. Each run writes a manifest next to its outputs with the resolved
settings and the sha256 of every input and output file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Optional, Sequence

from .checkpoint import Checkpoint
from .docmodel import CollectionSplit, LabelSpace, read_corpus, write_corpus

log = logging.getLogger("david")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# option resolution
# --------------------------------------------------------------------------

DEFAULTS: dict[str, dict[str, Any]] = {
    "common": {"seed": 0},
    "gen-corpus": {"n": 640, "kind": "form", "fields_min": 5, "fields_max": 12, "out": "corpus.jsonl"},
    "annotate": {"split": "500,40,100", "layout_noise": 0.3, "text_drop": 0.1, "merge_split": 0.1,
                 "provider": "rule", "max_qa": 20, "out": "data"},
    "adapt": {"tasks": "sds,sst,sit", "epochs": 1, "sds_epochs": None, "sst_epochs": None, "sit_epochs": None,
              "lr": 2e-4, "batch_size": 2, "no_freeze": False, "layout_dropout": 0.3, "hidden": 128,
              "layers": 4, "out": "runs/adapt"},
    "finetune": {"task": "fine", "ratio": 1.0, "from_ckpt": None, "epochs": 10, "min_steps": 200, "lr": 2e-4,
                 "batch_size": 2, "freeze_decoders": False, "mono": False, "hidden": 128, "layers": 4,
                 "out": "runs/finetune"},
    "infer": {"task": "both", "out": "predictions.jsonl"},
    "eval": {"out": "metrics.json"},
    "sweep": {"task": "fine", "configs": "baseline,sds", "ratios": "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0",
              "seeds": "0,1,2", "sds_epochs": 1, "sst_epochs": 1, "sit_epochs": 1, "min_steps": 200,
              "lambdas": "2,1.5,1", "modes": "incorrect,incomplete", "fractions": "0.5,1.0", "ratio": 1.0,
              "hidden": 128, "layers": 4, "plot": False, "out": "sweep"},
    "report": {"out": "report.md"},
}


def resolve(command: str, cli: dict[str, Any], config_path: Optional[str]) -> dict[str, Any]:
    """Merge defaults, config-file values (top level, then the command's section) and explicit flags."""
    merged = {**DEFAULTS["common"], **DEFAULTS.get(command, {})}
    if config_path:
        cfg = json.loads(Path(config_path).read_text())
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        section = cfg.get(command, {})
        flat = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
        for k, v in {**flat, **section}.items():
            key = k.replace("-", "_")
            if key in merged:
                merged[key] = v
    merged.update({k: v for k, v in cli.items() if v is not None})
    return merged


def _floats(s) -> list[float]:
    if isinstance(s, (list, tuple)):
        return [float(x) for x in s]
    return [float(x) for x in str(s).split(",") if x.strip()]


def _ints(s) -> list[int]:
    if isinstance(s, (list, tuple)):
        return [int(x) for x in s]
    return [int(x) for x in str(s).split(",") if x.strip()]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(path: Path, command: str, argv: Sequence[str], settings: dict, inputs: Sequence[Path],
                   outputs: Sequence[Path], extra: Optional[dict] = None) -> None:
    from importlib.metadata import PackageNotFoundError, version

    try:
        pkg_version = version("artifact")
    except PackageNotFoundError:
        pkg_version = "unknown"
    manifest = {
        "command": command,
        "argv": list(argv),
        "settings": settings,
        "package_version": pkg_version,
        "python": sys.version.split()[0],
        "inputs": {str(p): _sha256(p) for p in inputs if p.is_file()},
        "outputs": {str(p): _sha256(p) for p in outputs if p.is_file()},
        **(extra or {}),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# data directory helpers
# --------------------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def load_dataset(data_dir: str | Path) -> tuple[CollectionSplit, LabelSpace, dict]:
    d = Path(data_dir)
    meta = json.loads((d / "dataset.json").read_text())
    split = CollectionSplit(read_corpus(d / "d_n.jsonl"), read_corpus(d / "d_g.jsonl"), read_corpus(d / "d_i.jsonl"))
    return split, LabelSpace.from_json(meta["gold_space"]), meta


def _dataset_files(data_dir: str | Path) -> list[Path]:
    d = Path(data_dir)
    return [d / "dataset.json", d / "d_n.jsonl", d / "d_g.jsonl", d / "d_i.jsonl"]


def _encoder(s: dict):
    from .neural import EncoderConfig

    return EncoderConfig(hidden_dim=int(s["hidden"]), n_layers=int(s["layers"]), ffn_dim=2 * int(s["hidden"]))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_corpus(s: dict, argv) -> int:
    from .synthgen import CorpusSpec, generate_corpus

    spec = CorpusSpec(int(s["n"]), s["kind"], (int(s["fields_min"]), int(s["fields_max"])), seed=int(s["seed"]))
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    docs = generate_corpus(spec)
    write_corpus(out, docs)
    _sidecar(out).write_text(json.dumps({"kind": spec.document_kind, "gold_space": spec.gold_label_space.to_json(),
                                         "n": spec.n_documents, "seed": spec.seed}, indent=2, sort_keys=True))
    write_manifest(out.with_name(out.name + ".manifest.json"), "gen-corpus", argv, s, [], [out, _sidecar(out)])
    print(f"wrote {len(docs)} documents to {out}")
    return EXIT_OK


def cmd_annotate(s: dict, argv) -> int:
    from .providers import make_provider
    from .synthgen import LayoutNoiseConfig, annotate_collection
    from .workflow import corpus_hash

    src = Path(s["corpus"])
    meta = json.loads(_sidecar(src).read_text())
    docs = read_corpus(src)
    counts = tuple(_ints(s["split"]))
    if len(counts) != 3:
        raise UsageError("--split takes three counts: n,g,i")
    seed = int(s["seed"])
    noise = LayoutNoiseConfig(float(s["layout_noise"]), float(s["text_drop"]), float(s["merge_split"]), seed)
    provider = make_provider(s["provider"], seed=seed)
    split, report = annotate_collection(docs, counts, seed, noise, provider, max_qa=int(s["max_qa"]))
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    for name in ("d_n", "d_g", "d_i"):
        write_corpus(out / f"{name}.jsonl", getattr(split, name))
    dataset = {"kind": meta["kind"], "gold_space": meta["gold_space"], "counts": list(counts), "seed": seed,
               "provider": s["provider"], "layout_noise": noise.target_mean_iou,
               "corpus_hash": corpus_hash(list(split.d_n) + list(split.d_g) + list(split.d_i)),
               "annotation": {"mean_iou": report.quality.corpus_mean_iou,
                              "mean_jaccard": report.quality.corpus_mean_jaccard,
                              "n_qa": report.n_qa, "skipped": report.skipped}}
    (out / "dataset.json").write_text(json.dumps(dataset, indent=2, sort_keys=True))
    write_manifest(out / "manifest.json", "annotate", argv, s, [src], _dataset_files(out))
    print(f"annotated {len(split.d_n)} documents: mean IoU {report.quality.corpus_mean_iou:.3f}, "
          f"{report.n_qa} QA pairs, {len(report.skipped)} skipped")
    return EXIT_OK


def cmd_adapt(s: dict, argv) -> int:
    from .workflow import AdaptationPlan, RunLog, initial_checkpoint, run_adaptation, write_run

    split, space, meta = load_dataset(s["data"])
    tasks = {t.strip() for t in str(s["tasks"]).split(",") if t.strip()}
    if not tasks or tasks - {"sds", "sst", "sit"}:
        raise UsageError("--tasks must be a comma list drawn from sds,sst,sit")
    epochs = int(s["epochs"])

    def stage_epochs(name):
        if name not in tasks:
            return 0
        return epochs if s[f"{name}_epochs"] is None else int(s[f"{name}_epochs"])

    mode = {(True, True): "both", (True, False): "fine", (False, True): "coarse"}.get(
        ("sst" in tasks, "sit" in tasks), "both")
    plan = AdaptationPlan(sds_epochs=stage_epochs("sds"), sst_epochs=stage_epochs("sst"),
                          sit_epochs=stage_epochs("sit"), freeze_after_sds=not s["no_freeze"],
                          learning_rate=float(s["lr"]), batch_size=int(s["batch_size"]), seed=int(s["seed"]),
                          task_mode=mode, sds_layout_dropout=float(s["layout_dropout"]))
    init = initial_checkpoint(list(split.d_n) + list(split.d_g), space, _encoder(s), int(s["seed"]))
    run_log = RunLog()
    t0 = time.perf_counter()
    ckpt = run_adaptation(split.d_n, plan, init, run_log)
    out = Path(s["out"])
    path = write_run(out, ckpt, run_log, {"command": "adapt", "plan": plan.to_json(),
                                          "corpus_hash": meta["corpus_hash"],
                                          "wall_time_seconds": round(time.perf_counter() - t0, 3)})
    write_manifest(out / "manifest.json", "adapt", argv, s, _dataset_files(s["data"]), [path, out / "log.csv"])
    print(f"wrote {path} ({', '.join(f'{k}={v:.4f}' for k, v in ckpt.metrics.items())})")
    return EXIT_OK


def cmd_finetune(s: dict, argv) -> int:
    from .workflow import AdaptationPlan, RunLog, initial_checkpoint, run_finetune, write_run

    split, space, meta = load_dataset(s["data"])
    seed = int(s["seed"])
    inputs = _dataset_files(s["data"])
    if s["from_ckpt"]:
        start = Checkpoint.load(s["from_ckpt"])
        inputs.append(Path(s["from_ckpt"]))
    else:
        start = initial_checkpoint(list(split.d_n) + list(split.d_g), space, _encoder(s), seed,
                                   joint_grained=not s["mono"])
    plan = AdaptationPlan(learning_rate=float(s["lr"]), batch_size=int(s["batch_size"]), seed=seed,
                          finetune_epochs=int(s["epochs"]), finetune_min_steps=int(s["min_steps"]),
                          finetune_decoders=not s["freeze_decoders"])
    run_log = RunLog()
    t0 = time.perf_counter()
    ckpt = run_finetune(split.d_g, start, plan, s["task"], float(s["ratio"]), run_log)
    out = Path(s["out"])
    path = write_run(out, ckpt, run_log, {"command": "finetune", "task": s["task"], "ratio": float(s["ratio"]),
                                          "from": s["from_ckpt"], "corpus_hash": meta["corpus_hash"],
                                          "wall_time_seconds": round(time.perf_counter() - t0, 3)})
    write_manifest(out / "manifest.json", "finetune", argv, s, inputs, [path, out / "log.csv"])
    print(f"wrote {path} (stage {ckpt.stage})")
    return EXIT_OK


def cmd_infer(s: dict, argv) -> int:
    from .evaluation import evaluate_predictions
    from .workflow import run_inference, write_predictions

    split, space, meta = load_dataset(s["data"])
    ckpt = Checkpoint.load(s["ckpt"])
    t0 = time.perf_counter()
    records = run_inference(split.d_i, ckpt, s["task"])
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, records)
    report = evaluate_predictions(records, space, time.perf_counter() - t0, ckpt.plan_hash)
    print(json.dumps({"stage": ckpt.stage, **{k: v for k, v in report.to_json().items() if k != "per_category"}},
                     sort_keys=True))
    write_manifest(out.with_name(out.name + ".manifest.json"), "infer", argv, s,
                   _dataset_files(s["data"]) + [Path(s["ckpt"])], [out], {"stage": ckpt.stage})
    return EXIT_OK


def cmd_eval(s: dict, argv) -> int:
    from .evaluation import chance_accuracy, evaluate_predictions
    from .workflow import read_predictions

    meta = json.loads((Path(s["data"]) / "dataset.json").read_text())
    space = LabelSpace.from_json(meta["gold_space"])
    records = read_predictions(s["predictions"])
    report = evaluate_predictions(records, space)
    body = {**report.to_json(), "chance_retrieval_accuracy": chance_accuracy(records),
            "corpus_hash": meta["corpus_hash"], "predictions": str(s["predictions"])}
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(body, indent=2, sort_keys=True))
    write_manifest(out.with_name(out.name + ".manifest.json"), "eval", argv, s, [Path(s["predictions"])], [out])
    print(json.dumps({k: v for k, v in body.items() if k != "per_category"}, sort_keys=True))
    return EXIT_OK


def sweep_configs(names: Sequence[str], s: dict, task: str):
    """Named sweep rows: baseline (no adaptation), mono (mono-grained, no adaptation), sds, sds+sst, sds+sit."""
    from .evaluation import ExperimentConfig
    from .workflow import AdaptationPlan

    def plan(sst: bool, sit: bool) -> AdaptationPlan:
        mode = "fine" if sst else "coarse" if sit else task
        return AdaptationPlan(sds_epochs=int(s["sds_epochs"]), sst_epochs=int(s["sst_epochs"]) if sst else 0,
                              sit_epochs=int(s["sit_epochs"]) if sit else 0, task_mode=mode)

    presets = {
        "baseline": lambda: ExperimentConfig("baseline"),
        "mono": lambda: ExperimentConfig("mono", None, (("joint_grained", False),)),
        "sds": lambda: ExperimentConfig("sds", plan(False, False)),
        "sds+sst": lambda: ExperimentConfig("sds+sst", plan(True, False)),
        "sds+sit": lambda: ExperimentConfig("sds+sit", plan(False, True)),
    }
    unknown = [n for n in names if n not in presets]
    if unknown:
        raise UsageError(f"unknown sweep config(s) {unknown}; choose from {sorted(presets)}")
    return [presets[n]() for n in names]


def cmd_sweep(s: dict, argv) -> int:
    from .evaluation import Experiment, plot_ratio_curves, ratio_sweep, robustness_sweep, size_sweep, write_csv
    from .workflow import AdaptationPlan

    split, space, meta = load_dataset(s["data"])
    task = s["task"]
    configs = sweep_configs([c.strip() for c in str(s["configs"]).split(",") if c.strip()], s, task)
    exp = Experiment(split, space, task, _encoder(s),
                     AdaptationPlan(finetune_min_steps=int(s["min_steps"])))
    seeds = _ints(s["seeds"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "rows.csv"]
    kind = s["kind"]
    if kind == "ratio":
        rows, table = ratio_sweep(exp, configs, _floats(s["ratios"]), seeds)
        write_csv(table, out / "table.csv")
        outputs.append(out / "table.csv")
        if s["plot"]:
            plot_ratio_curves(table, out / "ratio.png", f"{meta['kind']} / {task}")
            outputs.append(out / "ratio.png")
    elif kind == "robustness":
        rows, tables = robustness_sweep(exp, configs, _floats(s["lambdas"]),
                                        [m.strip() for m in str(s["modes"]).split(",")], seeds, float(s["ratio"]))
        for mode, table in tables.items():
            write_csv(table, out / f"table_{mode}.csv")
            outputs.append(out / f"table_{mode}.csv")
    else:
        rows, table = size_sweep(exp, configs, _floats(s["fractions"]), seeds, float(s["ratio"]))
        write_csv(table, out / "table.csv")
        outputs.append(out / "table.csv")
    write_csv(rows, out / "rows.csv")
    write_manifest(out / "manifest.json", f"sweep {kind}", argv, s, _dataset_files(s["data"]), outputs)
    print(f"wrote {len(rows)} sweep cells to {out}")
    return EXIT_OK


def cmd_report(s: dict, argv) -> int:
    """Collect run.json / metrics.json files under the given directories into one markdown table."""
    lines = ["| source | stage | micro_f1 | retrieval_accuracy | anls |", "|---|---|---|---|---|"]
    found = []
    for root in s["inputs"]:
        for path in sorted(Path(root).rglob("*.json")):
            if path.name.endswith(".manifest.json") or path.name == "manifest.json":
                continue
            try:
                body = json.loads(path.read_text())
            except (json.JSONDecodeError, UnicodeDecodeError):
                continue
            if not isinstance(body, dict) or not ({"micro_f1", "stage"} & set(body)):
                continue
            found.append(path)

            def cell(k):
                v = body.get(k, body.get("metrics", {}).get(k) if isinstance(body.get("metrics"), dict) else None)
                return f"{v:.4f}" if isinstance(v, float) else "-" if v is None else str(v)

            lines.append(f"| {path} | {body.get('stage', '-')} | {cell('micro_f1')} | {cell('retrieval_accuracy')} "
                         f"| {cell('anls')} |")
    if not found:
        raise UsageError("no run.json or metrics.json files found")
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    write_manifest(out.with_name(out.name + ".manifest.json"), "report", argv, s, found, [out])
    print("\n".join(lines))
    return EXIT_OK


COMMANDS = {"gen-corpus": cmd_gen_corpus, "annotate": cmd_annotate, "adapt": cmd_adapt, "finetune": cmd_finetune,
            "infer": cmd_infer, "eval": cmd_eval, "sweep": cmd_sweep, "report": cmd_report}


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=S)
    common.add_argument("--config", default=S, help="JSON config file (CLI flags take precedence)")
    common.add_argument("--out", default=S)
    common.add_argument("-v", "--verbose", action="store_true", default=S)

    p = _Parser(prog="david", description="Domain-adaptive document understanding on synthetic data.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-corpus", parents=[common], help="generate a synthetic gold corpus (JSONL)")
    g.add_argument("--n", type=int, default=S)
    g.add_argument("--kind", choices=("form", "receipt"), default=S)
    g.add_argument("--fields-min", type=int, default=S)
    g.add_argument("--fields-max", type=int, default=S)

    a = sub.add_parser("annotate", parents=[common], help="split a corpus and synthetically annotate D_n")
    a.add_argument("corpus")
    a.add_argument("--split", default=S, help="n,g,i document counts")
    a.add_argument("--layout-noise", type=float, default=S, help="target mean IoU of synthetic layout")
    a.add_argument("--text-drop", type=float, default=S)
    a.add_argument("--merge-split", type=float, default=S)
    a.add_argument("--provider", choices=("rule", "remote"), default=S)
    a.add_argument("--max-qa", type=int, default=S)

    ad = sub.add_parser("adapt", parents=[common], help="domain adaptation on D_n (SDS, freeze, SST/SIT)")
    ad.add_argument("--data", required=True)
    ad.add_argument("--tasks", default=S, help="comma list from sds,sst,sit")
    ad.add_argument("--epochs", type=int, default=S)
    for name in ("sds", "sst", "sit"):
        ad.add_argument(f"--{name}-epochs", type=int, default=S)
    ad.add_argument("--lr", type=float, default=S)
    ad.add_argument("--batch-size", type=int, default=S)
    ad.add_argument("--no-freeze", action="store_true", default=S)
    ad.add_argument("--layout-dropout", type=float, default=S)
    ad.add_argument("--hidden", type=int, default=S)
    ad.add_argument("--layers", type=int, default=S)

    f = sub.add_parser("finetune", parents=[common], help="fine-tune on the guidance set D_g")
    f.add_argument("--data", required=True)
    f.add_argument("--from", dest="from_ckpt", default=S, help="adapted checkpoint (omit for F_t)")
    f.add_argument("--task", choices=("fine", "coarse"), default=S)
    f.add_argument("--ratio", type=float, default=S)
    f.add_argument("--epochs", type=int, default=S)
    f.add_argument("--min-steps", type=int, default=S)
    f.add_argument("--lr", type=float, default=S)
    f.add_argument("--batch-size", type=int, default=S)
    f.add_argument("--freeze-decoders", action="store_true", default=S)
    f.add_argument("--mono", action="store_true", default=S, help="mono-grained baseline (fresh model only)")
    f.add_argument("--hidden", type=int, default=S)
    f.add_argument("--layers", type=int, default=S)

    i = sub.add_parser("infer", parents=[common], help="predict on D_i")
    i.add_argument("--data", required=True)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--task", choices=("fine", "coarse", "both"), default=S)

    e = sub.add_parser("eval", parents=[common], help="score a prediction dump")
    e.add_argument("--data", required=True)
    e.add_argument("--predictions", required=True)

    sw = sub.add_parser("sweep", parents=[common], help="ratio, size or robustness sweep")
    sw.add_argument("kind", choices=("ratio", "size", "robustness"))
    sw.add_argument("--data", required=True)
    sw.add_argument("--task", choices=("fine", "coarse"), default=S)
    sw.add_argument("--configs", default=S, help="comma list from baseline,mono,sds,sds+sst,sds+sit")
    sw.add_argument("--ratios", default=S)
    sw.add_argument("--seeds", default=S)
    sw.add_argument("--sds-epochs", type=int, default=S)
    sw.add_argument("--sst-epochs", type=int, default=S)
    sw.add_argument("--sit-epochs", type=int, default=S)
    sw.add_argument("--min-steps", type=int, default=S)
    sw.add_argument("--lambdas", default=S)
    sw.add_argument("--modes", default=S)
    sw.add_argument("--fractions", default=S)
    sw.add_argument("--ratio", type=float, default=S, help="guidance ratio for size/robustness sweeps")
    sw.add_argument("--hidden", type=int, default=S)
    sw.add_argument("--layers", type=int, default=S)
    sw.add_argument("--plot", action="store_true", default=S)

    r = sub.add_parser("report", parents=[common], help="tabulate run and metrics files")
    r.add_argument("inputs", nargs="+")
    return p


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = vars(parser.parse_args(argv))
        command = ns.pop("command")
        if command is None:
            raise UsageError(parser.format_usage().rstrip() + "\ndavid: error: a command is required")
        config = ns.pop("config", None)
        verbose = ns.pop("verbose", False)
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
        settings = resolve(command, ns, config)
        log.info("resolved settings for %s: %s", command, json.dumps(settings, sort_keys=True, default=str))
        return COMMANDS[command](settings, argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(str(exc).strip("'\""), file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
