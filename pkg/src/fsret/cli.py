"""Batch entry points for the retrieval pipeline.

Each subcommand is a thin shell over one module operation. Results go to
stdout (or ``--out``); logs go to stderr, as JSON lines at debug level.
Exit codes: 0 success, 1 domain error, 2 usage error.

Every flag has a TOML config-file equivalent: global options are top-level
keys, subcommand options live in a table named after the subcommand with
hyphens turned into underscores (``[synth_bench]``). A flag given on the
command line overrides the file value, which overrides the built-in default.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import re
import sys
from dataclasses import dataclass
from typing import Any, Callable

import tomli

from .benchmark import (
    QueryEntry,
    format_stats,
    load_manifest,
    report_stats,
    save_manifest,
    smart_split,
)
from .embeddings import read_embeddings, write_embeddings
from .errors import FsretError
from .fusion import CtrTrainConfig, TripletDataset, load_ctr_model, save_ctr_model, train_ctr
from .indexing import build_clustered, build_exact, load_index, save_index, search
from .metrics import evaluate_run, format_report, read_run, report_to_dict, write_run
from .mining import captioned_items_from, export_triplets, load_triplets, mine_triplets
from .pipeline import (
    anchor_for,
    run_prompt_refined,
    select_references_for_benchmark,
)
from .prompt_tuning import TrainConfig
from .selection import save_selection_reports, selection_report
from .synthetic import generate_benchmark, save_benchmark

log = logging.getLogger("fsret.cli")

LOG_LEVELS = ("debug", "info", "warning", "error")


class UsageError(Exception):
    """Bad flags or config keys; exits 2 like argparse's own errors."""


@dataclass(frozen=True)
class Opt:
    name: str                 # flag --{name}, TOML key name.replace("-", "_")
    kind: Any = str           # value type, or "flag" for booleans
    default: Any = None
    required: bool = False
    help: str = ""
    choices: tuple | None = None

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")

    def help_text(self) -> str:
        text = self.help
        if self.required:
            return f"{text} (required)"
        if self.kind == "flag":
            return f"{text} (default: off)"
        if self.default is None or "(default" in text:
            return text if "(default" in text else f"{text} (optional)"
        return f"{text} (default: {self.default})"


GLOBAL_OPTS = [
    Opt("config", str, None, help="TOML config file supplying flag defaults"),
    Opt("out", str, None, help="write the primary output here "
                               "(default: stdout)"),
    Opt("seed", int, None, help="seed for every stochastic step "
                                "(default: each command's own)"),
    Opt("log-level", str, "info", choices=LOG_LEVELS,
        help="stderr log level; debug switches to JSON lines"),
    Opt("threads", int, None, help="cap numeric-library threads "
                                   "(default: logical cores)"),
]


def _add_opts(parser: argparse.ArgumentParser, opts: list[Opt]) -> None:
    for opt in opts:
        flag = f"--{opt.name}"
        if opt.kind == "flag":
            parser.add_argument(flag, dest=opt.dest, action="store_const",
                                const=True, default=None, help=opt.help_text())
        else:
            parser.add_argument(flag, dest=opt.dest, type=opt.kind,
                                default=None, choices=opt.choices,
                                help=opt.help_text())


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            return tomli.load(f)
    except FileNotFoundError:
        raise UsageError(f"--config: no such file: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise UsageError(f"--config: {path}: {exc}") from None


def _check_config_keys(config: dict, command: str, opts: list[Opt]) -> None:
    sections = {name.replace("-", "_") for name in COMMANDS}
    global_keys = {o.dest for o in GLOBAL_OPTS if o.name != "config"}
    for key, value in config.items():
        if isinstance(value, dict):
            if key not in sections:
                raise UsageError(f"config: unknown section [{key}]")
        elif key not in global_keys:
            raise UsageError(f"config: unknown option {key!r}")
    section = config.get(command.replace("-", "_"), {})
    known = {o.dest for o in opts}
    for key in section:
        if key not in known:
            raise UsageError(
                f"config: [{command.replace('-', '_')}] has no option {key!r}")


def _resolve(args: argparse.Namespace, config: dict, command: str,
             opts: list[Opt]) -> dict:
    """Flag > config file > default, per option; missing required flags
    are usage errors."""
    section = config.get(command.replace("-", "_"), {})
    values: dict[str, Any] = {}
    for opt in GLOBAL_OPTS:
        given = getattr(args, opt.dest)
        values[opt.dest] = given if given is not None else \
            config.get(opt.dest, opt.default)
    for opt in opts:
        given = getattr(args, opt.dest)
        if given is None:
            given = section.get(opt.dest)
        if given is None:
            given = opt.default
        if given is None and opt.required:
            raise UsageError(f"--{opt.name} is required "
                             f"(flag or config [{command.replace('-', '_')}])")
        values[opt.dest] = given
    return values


def _error_code(exc: Exception) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "_", type(exc).__name__).upper()


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if level == "debug":
        class _Json(logging.Formatter):
            def format(self, record):
                return json.dumps({"level": record.levelname.lower(),
                                   "logger": record.name,
                                   "message": record.getMessage()},
                                  sort_keys=True)
        handler.setFormatter(_Json())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: "
                                               "%(message)s"))
    root = logging.getLogger("fsret")
    root.handlers = [handler]
    root.setLevel(level.upper())


def _thread_cap(threads: int | None):
    if threads is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def _emit(text: str, out_path: str | None) -> None:
    if not text.endswith("\n"):
        text += "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _emit_json(doc: Any, out_path: str | None) -> None:
    _emit(json.dumps(doc, indent=2, sort_keys=True), out_path)


def _seed_or(values: dict, fallback: int) -> int:
    return fallback if values["seed"] is None else int(values["seed"])


# --- subcommand runners -------------------------------------------------------------

def _cmd_import_embeddings(v: dict) -> None:
    corpus = read_embeddings(v["input"])
    write_embeddings(corpus, v["output"], format=v["format"])
    log.debug("imported %d records (d=%d) to %s", len(corpus),
              corpus.dimension, v["output"])
    _emit_json({"records": len(corpus), "dimension": corpus.dimension,
                "output": v["output"]}, v["out"])


def _cmd_index_build(v: dict) -> None:
    corpus = read_embeddings(v["corpus"])
    if v["clustered"]:
        n_clusters = v["clusters"] or max(1, round(len(corpus) ** 0.5))
        index = build_clustered(corpus, n_clusters, _seed_or(v, 0),
                                probe_count=v["probes"])
        kind = "clustered"
    else:
        index = build_exact(corpus)
        kind = "exact"
    save_index(index, v["output"])
    log.debug("built %s index over %d records", kind, len(corpus))
    _emit_json({"kind": kind, "records": len(corpus),
                "output": v["output"]}, v["out"])


def _cmd_search(v: dict) -> None:
    corpus = read_embeddings(v["corpus"])
    texts = read_embeddings(v["texts"])
    anchor = anchor_for(v["text_id"], texts)
    if v["index"]:
        index = load_index(v["index"], corpus)
    else:
        index = build_exact(corpus)
    hits = search(index, anchor, v["k"])
    _emit_json({"text_id": v["text_id"], "k": v["k"],
                "results": [{"id": i, "score": s} for i, s in hits]}, v["out"])


def _cmd_split(v: dict) -> None:
    corpus = read_embeddings(v["corpus"])
    with open(v["queries"], encoding="utf-8") as f:
        entries = json.load(f)
    gtqr = [QueryEntry(query_id=e["query_id"], text=e["text"],
                       sub_dataset=e.get("sub_dataset", "synthetic"),
                       positives=e["positives"],
                       hard_negatives=e["hard_negatives"])
            for e in entries]
    manifest, fsr = smart_split(gtqr, corpus, _seed_or(v, 0))
    manifest.corpus_path = v["corpus"]
    manifest.validate_against(corpus)
    save_manifest(manifest, v["output"])
    log.debug("split %d queries, withheld %d ids", len(manifest.queries),
              len(manifest.fsr_ids()))
    _emit_json({"queries": len(manifest.queries), "fsr_sets": len(fsr),
                "withheld_ids": len(manifest.fsr_ids()),
                "output": v["output"]}, v["out"])


def _cmd_mine(v: dict) -> None:
    images = read_embeddings(v["images"])
    captions = read_embeddings(v["captions"])
    with open(v["map"], encoding="utf-8") as f:
        caption_to_image = json.load(f)
    items = captioned_items_from(images, captions, caption_to_image)
    triplets = mine_triplets(items, top_n=v["top_n"],
                             threshold=v["threshold"],
                             per_query_cap=v["per_query_cap"],
                             sample_fraction=v["sample_fraction"],
                             seed=_seed_or(v, 0))
    export_triplets(triplets, v["output"])
    log.debug("mined %d triplets from %d captioned items", len(triplets),
              len(items))
    _emit_json({"triplets": len(triplets), "items": len(items),
                "output": v["output"]}, v["out"])


def _cmd_train_ctr(v: dict) -> None:
    texts = read_embeddings(v["texts"])
    images = read_embeddings(v["images"])
    dataset = TripletDataset.from_mined(load_triplets(v["triplets"]),
                                        texts, images)
    cfg = CtrTrainConfig(learning_rate=v["learning_rate"],
                         stage_a_epochs=v["stage_a_epochs"],
                         stage_b_epochs=v["stage_b_epochs"],
                         batch_size=v["batch_size"],
                         d_out=v["d_out"], alpha=v["alpha"], tau=v["tau"],
                         seed=_seed_or(v, 0))
    model = train_ctr(dataset, images, cfg)
    save_ctr_model(model, v["output"])
    log.debug("trained fusion model on %d triplets", len(dataset))
    _emit_json({"triplets": len(dataset), "alpha": model.alpha,
                "dimensions": model.dimensions, "output": v["output"]},
               v["out"])


def _cmd_refine_pl(v: dict) -> None:
    images = read_embeddings(v["images"])
    texts = read_embeddings(v["texts"])
    manifest = load_manifest(v["manifest"], images)
    cfg = TrainConfig(learning_rate=v["learning_rate"],
                      iterations=v["iterations"], m=v["m"],
                      kl_coefficient=v["kl_coefficient"],
                      prograd_mode=v["prograd_mode"],
                      composer=v["composer"], seed=_seed_or(v, 0))
    runs = run_prompt_refined(manifest, images, texts, shots=v["shots"],
                              cfg=cfg, k=v["k"], easy_count=v["easy_count"])
    write_run(runs, v["output"])
    log.debug("refined %d queries with %d shots", len(runs), v["shots"])
    _emit_json({"queries": len(runs), "shots": v["shots"],
                "output": v["output"]}, v["out"])


def _cmd_select_refs(v: dict) -> None:
    images = read_embeddings(v["images"])
    texts = read_embeddings(v["texts"])
    manifest = load_manifest(v["manifest"], images)
    model = load_ctr_model(v["model"])
    results = select_references_for_benchmark(
        manifest, images, texts, model, max_refs=v["max_refs"],
        candidate_m=v["candidate_m"], exhaustive=bool(v["exhaustive"]),
        k=v["k"])
    save_selection_reports(results, v["output"])
    log.debug("selected references for %d queries", len(results))
    _emit_json({"queries": len(results),
                "selections": [selection_report(r) for r in results],
                "output": v["output"]}, v["out"])


def _cmd_evaluate(v: dict) -> None:
    corpus = read_embeddings(v["corpus"])
    manifest = load_manifest(v["manifest"], corpus)
    runs = read_run(v["run"])
    report = evaluate_run(runs, manifest, k=v["k"])
    sys.stderr.write(format_report(report) + "\n")
    _emit_json(report_to_dict(report), v["out"])


def _cmd_report_stats(v: dict) -> None:
    corpus = read_embeddings(v["corpus"])
    manifest = load_manifest(v["manifest"], corpus)
    stats = report_stats(manifest)
    sys.stderr.write(format_stats(stats) + "\n")
    _emit_json({"image_count": stats.image_count,
                "test_image_count": stats.test_image_count,
                "query_count": stats.query_count,
                "mean_test_positives": stats.mean_test_positives,
                "mean_test_hard_negatives": stats.mean_test_hard_negatives,
                "mean_query_tokens": stats.mean_query_tokens}, v["out"])


def _cmd_serve(v: dict) -> None:
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(v["state_dir"]), host=v["host"], port=v["port"],
                log_level=v["log_level"])


def _cmd_synth_bench(v: dict) -> None:
    bench = generate_benchmark(seed=_seed_or(v, 7),
                               query_count=v["queries"],
                               dimension=v["dimension"])
    paths = save_benchmark(bench, v["out_dir"])
    log.debug("wrote benchmark: %d images, %d queries",
              len(bench.image_corpus), len(bench.manifest.queries))
    _emit_json({"images": len(bench.image_corpus),
                "queries": len(bench.manifest.queries),
                "paths": paths}, v["out"])


# --- command table ------------------------------------------------------------------

COMMANDS: dict[str, tuple[str, list[Opt], Callable[[dict], None]]] = {
    "import-embeddings": (
        "convert an embedding file between the binary and text formats",
        [Opt("input", str, required=True, help="source embedding file"),
         Opt("output", str, required=True, help="destination file"),
         Opt("format", str, "fsem", choices=("fsem", "text"),
             help="output format")],
        _cmd_import_embeddings),
    "index-build": (
        "build and save a cosine search index",
        [Opt("corpus", str, required=True, help="FSEM corpus to index"),
         Opt("output", str, required=True, help="index file to write"),
         Opt("clustered", "flag", help="build the clustered index instead "
                                       "of the exact one"),
         Opt("clusters", int, None, help="cluster count (default: sqrt of "
                                         "the corpus size)"),
         Opt("probes", int, None, help="clusters probed per query "
                                       "(default: a quarter of them)")],
        _cmd_index_build),
    "search": (
        "rank a corpus against one text embedding",
        [Opt("corpus", str, required=True, help="FSEM image corpus"),
         Opt("texts", str, required=True, help="FSEM text corpus holding "
                                               "the query embedding"),
         Opt("text-id", str, required=True, help="record id of the query "
                                                 "text"),
         Opt("k", int, 50, help="results to return"),
         Opt("index", str, None, help="prebuilt index file (default: "
                                      "exact search built in memory)")],
        _cmd_search),
    "split": (
        "split labeled queries into a test manifest plus withheld examples",
        [Opt("queries", str, required=True, help="JSON list of labeled "
                                                 "queries"),
         Opt("corpus", str, required=True, help="FSEM corpus the labels "
                                                "refer to"),
         Opt("output", str, required=True, help="manifest file to write")],
        _cmd_split),
    "mine": (
        "mine caption-confirmed reference triplets",
        [Opt("images", str, required=True, help="FSEM image corpus"),
         Opt("captions", str, required=True, help="FSEM caption corpus"),
         Opt("map", str, required=True, help="JSON object mapping caption "
                                             "id to image id"),
         Opt("top-n", int, 200, help="image-similar candidates per query"),
         Opt("threshold", float, 0.65, help="caption similarity must "
                                            "exceed this"),
         Opt("per-query-cap", int, 8, help="triplets kept per query"),
         Opt("sample-fraction", float, 1.0, help="fraction of queries to "
                                                 "mine"),
         Opt("output", str, required=True, help="JSONL triplet file to "
                                                "write")],
        _cmd_mine),
    "train-ctr": (
        "train the text+reference fusion model on mined triplets",
        [Opt("triplets", str, required=True, help="JSONL mined triplets"),
         Opt("texts", str, required=True, help="FSEM text corpus"),
         Opt("images", str, required=True, help="FSEM image corpus"),
         Opt("output", str, required=True, help="model file to write"),
         Opt("learning-rate", float, 0.01, help="Adam step size"),
         Opt("stage-a-epochs", int, 20, help="epochs with the mixing "
                                             "weight frozen"),
         Opt("stage-b-epochs", int, 10, help="epochs with the mixing "
                                             "weight free"),
         Opt("batch-size", int, 32, help="triplets per batch"),
         Opt("d-out", int, None, help="fused dimension (default: the "
                                      "external dimension)"),
         Opt("alpha", float, 0.5, help="initial text/reference mixing "
                                       "weight"),
         Opt("tau", float, 0.02, help="matching temperature")],
        _cmd_train_ctr),
    "refine-pl": (
        "train per-query prompt refinement and write the ranked runs",
        [Opt("manifest", str, required=True, help="benchmark manifest"),
         Opt("images", str, required=True, help="FSEM image corpus"),
         Opt("texts", str, required=True, help="FSEM text corpus"),
         Opt("output", str, required=True, help="JSONL run file to write"),
         Opt("shots", int, 16, help="withheld examples used per query"),
         Opt("k", int, 50, help="ranking depth"),
         Opt("easy-count", int, 16, help="easy negatives added per query"),
         Opt("learning-rate", float, 0.05, help="Adam step size"),
         Opt("iterations", int, 300, help="training iterations"),
         Opt("m", int, 16, help="context rows for the mean-pool composer"),
         Opt("kl-coefficient", float, 1.0, help="weight of the anchor "
                                                "regularizer"),
         Opt("prograd-mode", str, "projection",
             choices=("projection", "gate", "off"),
             help="gradient surgery mode"),
         Opt("composer", str, "mean_pool", choices=("mean_pool", "direct"),
             help="context composer")],
        _cmd_refine_pl),
    "select-refs": (
        "choose reference combinations per query with a trained fusion model",
        [Opt("model", str, required=True, help="trained fusion model file"),
         Opt("manifest", str, required=True, help="benchmark manifest"),
         Opt("images", str, required=True, help="FSEM image corpus"),
         Opt("texts", str, required=True, help="FSEM text corpus"),
         Opt("output", str, required=True, help="JSON selection report to "
                                                "write"),
         Opt("max-refs", int, 4, help="reference budget per query"),
         Opt("candidate-m", int, 5, help="stage-1 candidates considered"),
         Opt("exhaustive", "flag", help="score every subset instead of "
                                        "the greedy walk"),
         Opt("k", int, 50, help="validation ranking depth")],
        _cmd_select_refs),
    "evaluate": (
        "score a ranked run against manifest labels",
        [Opt("run", str, required=True, help="JSONL ranked run"),
         Opt("manifest", str, required=True, help="benchmark manifest"),
         Opt("corpus", str, required=True, help="FSEM corpus the manifest "
                                                "refers to"),
         Opt("k", int, 50, help="evaluation depth")],
        _cmd_evaluate),
    "report-stats": (
        "print benchmark summary statistics",
        [Opt("manifest", str, required=True, help="benchmark manifest"),
         Opt("corpus", str, required=True, help="FSEM corpus the manifest "
                                                "refers to")],
        _cmd_report_stats),
    "serve": (
        "run the HTTP service",
        [Opt("state-dir", str, None, help="session persistence directory "
                                          "(default: a fresh temp dir)"),
         Opt("host", str, "127.0.0.1", help="bind address"),
         Opt("port", int, 8008, help="bind port")],
        _cmd_serve),
    "synth-bench": (
        "generate the synthetic retrieval benchmark",
        [Opt("out-dir", str, required=True, help="directory for the corpus "
                                                 "pair and manifest"),
         Opt("queries", int, 30, help="concept count"),
         Opt("dimension", int, 64, help="embedding dimension")],
        _cmd_synth_bench),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsret",
        description="few-shot retrieval pipeline: corpora, indexes, "
                    "refinement, evaluation")
    _add_opts(parser, GLOBAL_OPTS)
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    for name, (help_text, opts, _) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text,
                                    description=help_text)
        _add_opts(sub, GLOBAL_OPTS)
        _add_opts(sub, opts)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        sys.stderr.write("fsret: error: a command is required\n")
        return 2
    help_text, opts, runner = COMMANDS[args.command]
    try:
        config = _load_config(args.config)
        _check_config_keys(config, args.command, opts)
        values = _resolve(args, config, args.command, opts)
    except UsageError as exc:
        sys.stderr.write(f"fsret {args.command}: error: {exc}\n")
        return 2
    _setup_logging(values["log_level"])
    try:
        with _thread_cap(values["threads"]):
            runner(values)
        return 0
    except FsretError as exc:
        sys.stderr.write(json.dumps({"error": _error_code(exc),
                                     "detail": str(exc)}, sort_keys=True)
                         + "\n")
        return 1
    except FileNotFoundError as exc:
        sys.stderr.write(json.dumps({"error": "FILE_NOT_FOUND",
                                     "detail": str(exc)}, sort_keys=True)
                         + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
