"""Command-line pipeline: ingest, fit-irt, extract-kc, build-graphs, train, eval, ablate, relation-eval.

Each stage reads its upstream artifacts from the output directory, checks
that they were produced under the same configuration, and writes its own
artifacts tagged with the config hash and seed. A finished stage is skipped
unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import __version__
from . import diffcore as dc
from .agents import (BackendError, ChatCompletionBackend, HeuristicBackend, SchemaFailure, evaluate_relations,
                     load_gold, run_extraction)
from .agents.evaluation import METRIC_HEADER, dump_gold
from .agents.pipeline import dump_decisions, load_decisions
from .config import ConfigError, RunConfig, dump_config, load_config
from .core import validate_log
from .fusionnet import VARIANTS, TrainedModel, TrainingDiverged, Vocab, build_model, plan_windows, score, train
from .graphs import (build_kc_graph, build_sq_graph, dump_kc_graph, dump_sq_graph, graph_fingerprint,
                     load_kc_graph, load_sq_graph, validate_kc_axioms)
from .ingest import (SchemaError, dump_log, dump_windows, filter_log, load_log, load_windows,
                     parse_interaction_csv, split_students, summarize, window_sequences)
from .irt import dump_params, fit_rasch, load_params
from .retrieval import Retriever
from .synthetic import generate_relation_log, planted_kc_world, write_interactions_csv, write_kc_names

log = logging.getLogger("magekt")

SPLITS = ("train", "val", "test")


class CliError(Exception):
    category = "error"
    code = 1


class MissingArtifact(CliError):
    category, code = "missing-artifact", 4


class ConfigMismatch(CliError):
    category, code = "config-mismatch", 5


class InputError(CliError):
    category, code = "input", 3


# Exception type -> (category, exit code) for errors raised below the CLI.
_CATEGORIES = (
    (ConfigError, "config", 2),
    (SchemaError, "input", 3),
    (SchemaFailure, "backend", 6),
    (BackendError, "backend", 6),
    (TrainingDiverged, "training", 7),
    (OSError, "io", 8),
)


# -- artifact bookkeeping --------------------------------------------------

class Workspace:
    """Artifact paths and provenance checks for one config."""

    def __init__(self, cfg: RunConfig, force: bool = False):
        self.cfg, self.force = cfg, force
        self.root = cfg.out

    def p(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def meta(self, stage: str, seed: int | None = None, **extra) -> dict:
        return {"stage": stage, "config_hash": self.cfg.hash(), "stage_hash": self.cfg.hash(stage),
                "seed": self.cfg.seed if seed is None else seed, "version": __version__, **extra}

    def rel(self, path: Path) -> str:
        try:
            return str(path.relative_to(self.root))
        except ValueError:
            return str(path)

    def read_meta(self, path: Path) -> dict:
        if path.suffix == ".npz":
            return dc.load_checkpoint(path)[1]
        if path.suffix == ".json":
            return json.loads(path.read_text()).get("_meta", {})
        with open(path) as fp:
            first = fp.readline()
        try:
            return json.loads(first).get("_meta", {}) if first.strip() else {}
        except json.JSONDecodeError:
            return {}

    def require(self, path: Path, stage: str, needed_by: str) -> Path:
        if not path.exists():
            raise MissingArtifact(f"{needed_by} needs {self.rel(path)}; run `magekt {stage}` first")
        if self.read_meta(path).get("stage_hash") != self.cfg.hash(stage):
            raise ConfigMismatch(f"{self.rel(path)} was produced under a different config; "
                                 f"rerun `magekt {stage} --force`")
        return path

    def done(self, stage: str, *paths: Path) -> bool:
        """True when every output exists from this config; refuses to overwrite stale ones silently."""
        if self.force or not all(p.exists() for p in paths):
            return False
        stale = [self.rel(p) for p in paths if self.read_meta(p).get("stage_hash") != self.cfg.hash(stage)]
        if stale:
            raise ConfigMismatch(f"{', '.join(stale)} exist from a different config; pass --force to recompute")
        log.info("%s: up to date, skipping (use --force to recompute)", stage)
        return True


def write_jsonl(path: Path, meta: dict, body: Callable) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fp:
        body(fp, meta)
    tmp.replace(path)


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_table(path: Path) -> list[dict]:
    with open(path, newline="") as fp:
        return list(csv.DictReader(fp, delimiter="\t"))


def write_plot(path: Path, records: Iterable[tuple[str, float, float]], meta: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fp:
        for series, x, y in records:
            fp.write(json.dumps({"series": series, "x": x, "y": y, "config_hash": meta["config_hash"],
                                 "seed": meta["seed"]}) + "\n")


# -- stages ------------------------------------------------------------------

def cmd_ingest(ws: Workspace) -> dict:
    cfg = ws.cfg
    outputs = [ws.p("ingest", f"{prefix}{s}.jsonl") for prefix in ("", "windows_") for s in SPLITS]
    summary_path = ws.p("ingest", "summary.json")
    if ws.done("ingest", *outputs, summary_path):
        return json.loads(summary_path.read_text())
    src = cfg.path(cfg.interactions)
    if not src.exists():
        raise InputError(f"interaction file {src} does not exist")
    parsed = parse_interaction_csv(src.read_bytes(), cfg.columns())
    for d in parsed.diagnostics[:20]:
        log.warning("%s: %s", src.name, d)
    problems = validate_log(parsed.log)
    if problems:
        raise InputError(f"{src.name}: " + "; ".join(problems[:10]))
    filtered = filter_log(parsed.log, cfg.min_student, cfg.min_question)
    if not len(filtered):
        raise InputError(f"no interactions survive filtering (min_student={cfg.min_student}, "
                         f"min_question={cfg.min_question})")
    parts = dict(zip(SPLITS, split_students(filtered, cfg.split())))
    meta = ws.meta("ingest")
    summary = {"_meta": meta, "before": summarize(parsed.log), "after": summarize(filtered),
               "dropped_rows": parsed.dropped, "diagnostics": list(parsed.diagnostics),
               "splits": {}, "windows": {}}
    for name, part in parts.items():
        windows = window_sequences(part, cfg.window)
        summary["splits"][name] = summarize(part)
        summary["windows"][name] = len(windows)

        def body_log(fp, m, part=part):
            fp.write(json.dumps({"_meta": m}, sort_keys=True) + "\n")
            dump_log(part, fp)

        def body_win(fp, m, windows=windows):
            fp.write(json.dumps({"_meta": m}, sort_keys=True) + "\n")
            dump_windows(windows, fp)

        write_jsonl(ws.p("ingest", f"{name}.jsonl"), meta, body_log)
        write_jsonl(ws.p("ingest", f"windows_{name}.jsonl"), meta, body_win)
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _load_split(ws: Workspace, name: str, needed_by: str):
    path = ws.require(ws.p("ingest", f"{name}.jsonl"), "ingest", needed_by)
    with open(path) as fp:
        return load_log(fp)


def _load_windows(ws: Workspace, name: str, needed_by: str):
    path = ws.require(ws.p("ingest", f"windows_{name}.jsonl"), "ingest", needed_by)
    with open(path) as fp:
        return load_windows(fp)


def cmd_fit_irt(ws: Workspace) -> dict:
    out = ws.p("irt", "params.jsonl")
    if not ws.done("fit-irt", out):
        params = fit_rasch(_load_split(ws, "train", "fit-irt"), ws.cfg.irt())
        write_jsonl(out, ws.meta("fit-irt"), lambda fp, m: dump_params(params, fp, m))
    with open(out) as fp:
        params = load_params(fp)
    rep = params.fit_report
    return {"students": len(params.theta), "questions": len(params.b),
            **({"converged": rep.converged, "grad_norm": rep.grad_norm, "iterations": rep.iterations} if rep else {})}


def make_backend(cfg: RunConfig):
    if cfg.backend == "heuristic":
        return HeuristicBackend()
    return ChatCompletionBackend(cfg.live_endpoint, cfg.live_model, api_key_env=cfg.live_api_key_env)


def _kc_names(ws: Workspace, needed_by: str) -> dict[str, str]:
    cfg = ws.cfg
    kcs = sorted(set().union(*(_load_split(ws, s, needed_by).kcs for s in SPLITS)))
    if not cfg.kc_names:
        return {k: k for k in kcs}
    path = cfg.path(cfg.kc_names)
    if not path.exists():
        raise InputError(f"KC name file {path} does not exist")
    with open(path, newline="") as fp:
        rows = list(csv.DictReader(fp))
    if rows and not {"kc_id", "name"} <= set(rows[0]):
        raise InputError(f"{path.name} needs columns kc_id,name")
    names = {r["kc_id"]: r["name"] for r in rows}
    return {k: names.get(k, k) for k in kcs}


def cmd_extract_kc(ws: Workspace) -> dict:
    dec_path, graph_path = ws.p("kc", "decisions.jsonl"), ws.p("kc", "extracted.jsonl")
    if not ws.done("extract-kc", dec_path, graph_path):
        names = _kc_names(ws, "extract-kc")
        result = run_extraction(names, _load_split(ws, "train", "extract-kc"), make_backend(ws.cfg),
                                ws.cfg.extraction())
        meta = ws.meta("extract-kc", candidates=result.candidates)
        write_jsonl(dec_path, meta, lambda fp, m: dump_decisions(result.decisions, fp, m))
        write_jsonl(graph_path, meta, lambda fp, m: dump_kc_graph(result.graph, fp, m))
    with open(graph_path) as fp:
        g = load_kc_graph(fp)
    return {"kcs": len(g.nodes), "edges": len(g.edges)}


def cmd_build_graphs(ws: Workspace) -> dict:
    sq_path, kc_path = ws.p("graphs", "sq.jsonl"), ws.p("graphs", "kc.jsonl")
    if not ws.done("build-graphs", sq_path, kc_path):
        train_log = _load_split(ws, "train", "build-graphs")
        with open(ws.require(ws.p("irt", "params.jsonl"), "fit-irt", "build-graphs")) as fp:
            params = load_params(fp)
        with open(ws.require(ws.p("kc", "decisions.jsonl"), "extract-kc", "build-graphs")) as fp:
            decisions = load_decisions(fp)
        with open(ws.require(ws.p("kc", "extracted.jsonl"), "extract-kc", "build-graphs")) as fp:
            profiles = load_kc_graph(fp).nodes
        sq = build_sq_graph(train_log, params, ws.cfg.graph())
        kc = build_kc_graph([d for d in decisions if d.final_type.value != "None"], profiles)
        violations = validate_kc_axioms(kc)
        if violations:  # build_kc_graph repairs topology, so this is a bug guard
            raise CliError("KC graph violates axioms: " + "; ".join(violations))
        meta = ws.meta("build-graphs")
        write_jsonl(sq_path, meta, lambda fp, m: dump_sq_graph(sq, fp, m))
        write_jsonl(kc_path, meta, lambda fp, m: dump_kc_graph(kc, fp, m))
    return {"fingerprint": graph_fingerprint(sq_path, kc_path)}


class Trainer:
    """Loads graphs and windows once, caches plans per variant."""

    def __init__(self, ws: Workspace, needed_by: str):
        self.ws, cfg = ws, ws.cfg
        sq_path = ws.require(ws.p("graphs", "sq.jsonl"), "build-graphs", needed_by)
        kc_path = ws.require(ws.p("graphs", "kc.jsonl"), "build-graphs", needed_by)
        with open(sq_path) as fp:
            sq = load_sq_graph(fp)
        with open(kc_path) as fp:
            kc = load_kc_graph(fp)
        self.fingerprint = graph_fingerprint(sq_path, kc_path)
        self.windows = {s: _load_windows(ws, s, needed_by) for s in SPLITS}
        extra = {k for ws_ in self.windows.values() for w in ws_ for _, ks, _ in w.items for k in ks}
        self.vocab = Vocab.from_graphs(sq, kc, extra)
        self.retriever = Retriever(sq, kc, cfg.retrieval_k, cfg.retrieval_n, cfg.budget, cfg.topk_s, cfg.irt(),
                                   version=self.fingerprint)
        self._plans: dict[tuple[str, str], list] = {}

    def plans(self, variant: str, split: str) -> list:
        key = (variant, split)
        if key not in self._plans:
            self._plans[key] = plan_windows(self.windows[split], self.retriever, self.vocab, variant)
        return self._plans[key]

    def checkpoint(self, subdir: str, variant: str, seed: int) -> Path:
        return self.ws.p(subdir, f"model_{variant}_s{seed}.npz")

    def fit(self, subdir: str, variant: str, seed: int) -> Path:
        ws, cfg = self.ws, self.ws.cfg
        ckpt = self.checkpoint(subdir, variant, seed)
        if ws.done("train", ckpt):
            return ckpt
        t0 = time.time()
        model = build_model(cfg.model(), self.vocab, variant, seed)
        res: TrainedModel = train(model, self.plans(variant, "train"), self.plans(variant, "val"), self.vocab,
                                  on_epoch=lambda r: log.info("%s seed %d epoch %d loss %.4f val_auc %.4f",
                                                              variant, seed, r.epoch, r.train_loss, r.val_auc))
        meta = ws.meta("train", seed, variant=variant, graph_fingerprint=self.fingerprint,
                       vocab=self.vocab.to_dict(), best_epoch=res.best_epoch, best_val_auc=res.best_val_auc)
        rows = [(*r.values(), variant, seed, meta["config_hash"]) for r in res.history]
        write_table(ws.p(subdir, f"history_{variant}_s{seed}.tsv"),
                    (*("epoch", "train_loss", "val_auc", "val_acc", "train_auc"), "variant", "seed", "config_hash"),
                    rows)
        write_plot(ws.p(subdir, f"plot_{variant}_s{seed}.jsonl"),
                   [(f"{variant}/seed{seed}/{name}", r.epoch, getattr(r, name))
                    for r in res.history for name in ("train_loss", "val_auc", "val_acc")], meta)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        dc.save_checkpoint(ckpt, res.model.params, meta)
        log.info("%s seed %d: best epoch %d, val AUC %.4f (%.1fs)", variant, seed, res.best_epoch,
                 res.best_val_auc, time.time() - t0)
        return ckpt

    def evaluate(self, subdir: str, variant: str) -> list[tuple]:
        ws, cfg = self.ws, self.ws.cfg
        rows = []
        for seed in cfg.seeds:
            ckpt = ws.require(self.checkpoint(subdir, variant, seed), "train", "eval")
            params, meta = dc.load_checkpoint(ckpt)
            if meta.get("graph_fingerprint") != self.fingerprint:
                raise ConfigMismatch(f"{ws.rel(ckpt)} was trained on different graphs; retrain with --force")
            model = build_model(cfg.model(), Vocab.from_dict(meta["vocab"]), variant, seed)
            model.load(params)
            for split in ("val", "test"):
                r = score(model, self.plans(variant, split), cfg.batch)
                rows.append((variant, split, str(seed), r.auc, r.acc, r.n))
        for split in ("val", "test"):
            mine = [r for r in rows if r[1] == split]
            rows.append((variant, split, "mean", sum(r[3] for r in mine) / len(mine),
                         sum(r[4] for r in mine) / len(mine), sum(r[5] for r in mine)))
        meta = ws.meta("eval")
        write_table(ws.p(subdir, f"results_{variant}.tsv"),
                    ("variant", "split", "seed", "auc", "acc", "n", "config_hash"),
                    [(*r, meta["config_hash"]) for r in rows])
        write_plot(ws.p(subdir, f"plot_eval_{variant}.jsonl"),
                   [(f"{v}/{split}/auc", int(s), auc) for v, split, s, auc, *_ in rows if s != "mean"], meta)
        return rows


def _variants(ws: Workspace, requested: Sequence[str] | None, default: Sequence[str]) -> list[str]:
    out = list(requested or default)
    bad = [v for v in out if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variant(s) {bad}; expected any of {VARIANTS}")
    return out


def cmd_train(ws: Workspace, variants=None) -> dict:
    t = Trainer(ws, "train")
    for v in _variants(ws, variants, ["full"]):
        for seed in ws.cfg.seeds:
            t.fit("train", v, seed)
    return {"checkpoints": len(ws.cfg.seeds)}


def cmd_eval(ws: Workspace, variants=None) -> dict:
    t = Trainer(ws, "eval")
    out = {}
    for v in _variants(ws, variants, ["full"]):
        rows = t.evaluate("train", v)
        out[v] = {split: auc for _, split, s, auc, *_ in rows if s == "mean"}
    return out


def cmd_ablate(ws: Workspace, variants=None) -> dict:
    t = Trainer(ws, "ablate")
    grid = []
    seeds = ws.cfg.seeds
    for v in _variants(ws, variants, ws.cfg.variants):
        for seed in seeds:
            t.fit("ablate", v, seed)
        rows = t.evaluate("ablate", v)
        test = {s: (auc, acc) for _, split, s, auc, acc, _ in rows if split == "test"}
        grid.append((v, test["mean"][0], test["mean"][1], *(test[str(s)][0] for s in seeds)))
    meta = ws.meta("ablate")
    write_table(ws.p("ablate", "grid.tsv"),
                ("variant", "test_auc_mean", "test_acc_mean", *(f"test_auc_s{s}" for s in seeds), "config_hash"),
                [(*g, meta["config_hash"]) for g in grid])
    write_plot(ws.p("ablate", "plot_grid.jsonl"), [("ablation/test_auc", g[0], g[1]) for g in grid], meta)
    return {g[0]: g[1] for g in grid}


def cmd_relation_eval(ws: Workspace, gold: str | None = None, predicted: str | None = None) -> dict:
    cfg = ws.cfg
    gold_file = gold or (str(cfg.path(cfg.gold)) if cfg.gold else None)
    if not gold_file:
        raise ConfigError("relation-eval needs a gold relation file (config key `gold` or --gold)")
    if not Path(gold_file).exists():
        raise InputError(f"gold relation file {gold_file} does not exist")
    with open(gold_file) as fp:
        gold_edges = load_gold(fp)
    if predicted:
        with open(predicted) as fp:
            pred = load_gold(fp)
    else:
        with open(ws.require(ws.p("graphs", "kc.jsonl"), "build-graphs", "relation-eval")) as fp:
            pred = load_kc_graph(fp)
    try:
        p, c, j = evaluate_relations(pred, gold_edges)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    meta = ws.meta("relation-eval")
    write_table(ws.p("relations", "metrics.tsv"),
                ("pred", "corr", "jacc", "gold_edges", "config_hash", "definitions"),
                [(p, c, j, len(gold_edges), meta["config_hash"], METRIC_HEADER)])
    write_plot(ws.p("relations", "plot.jsonl"), [("relations/pred", 0, p), ("relations/corr", 0, c),
                                                  ("relations/jacc", 0, j)], meta)
    return {"pred": p, "corr": c, "jacc": j}


def cmd_pipeline(ws: Workspace) -> dict:
    out = {"ingest": cmd_ingest(ws)["after"], "fit-irt": cmd_fit_irt(ws), "extract-kc": cmd_extract_kc(ws),
           "build-graphs": cmd_build_graphs(ws), "train": cmd_train(ws), "eval": cmd_eval(ws)}
    if ws.cfg.gold:
        out["relation-eval"] = cmd_relation_eval(ws)
    return out


DEMO_CONFIG = {
    "interactions": "interactions.csv", "kc_names": "kc_names.csv", "gold": "gold.csv", "output_dir": "out",
    "min_student": 5, "min_question": 5, "window": 50, "budget": 48, "topk_q": 5, "topk_s": 5,
    "embed_dim": 16, "attn_heads": 2, "attn_layers": 1, "gru_hidden": 32, "dropout": 0.1, "batch": 16,
    "max_epochs": 4, "patience": 2, "lr": 0.005, "seeds": [0, 1, 2],
}


def cmd_demo_data(directory: str, students: int, seed: int) -> dict:
    """Write a small planted relation world plus a config that runs the full pipeline on it."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    world = planted_kc_world()
    data = generate_relation_log(world, n_students=students, seed=seed)
    write_interactions_csv(data, d / "interactions.csv")
    write_kc_names(dict(world.names), d / "kc_names.csv")
    with open(d / "gold.csv", "w") as fp:
        dump_gold(world.gold, fp)
    (d / "config.yaml").write_text(dump_config(replace(RunConfig(), **{
        k: tuple(v) if isinstance(v, list) else v for k, v in DEMO_CONFIG.items()})))
    return {"directory": str(d), "interactions": len(data), "kcs": len(world.names)}


# -- entry point ---------------------------------------------------------------

def _parse_override(text: str) -> tuple[str, object]:
    import yaml

    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magekt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name, help_, variants=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", "-c", required=True, help="YAML run configuration")
        p.add_argument("--force", action="store_true", help="recompute even if outputs are up to date")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if variants:
            p.add_argument("--variant", action="append", choices=VARIANTS, help="model variant (repeatable)")
        return p

    stage("ingest", "parse, filter, split and window the interaction log")
    stage("fit-irt", "fit Rasch abilities and difficulties on the training split")
    stage("extract-kc", "extract typed KC relations with the configured agent backend")
    stage("build-graphs", "materialize the student-question and KC graphs")
    stage("train", "train the knowledge tracing model for every configured seed", variants=True)
    stage("eval", "score checkpoints on val and test, per seed and averaged", variants=True)
    stage("ablate", "train and evaluate each variant and write the ablation grid", variants=True)
    rel = stage("relation-eval", "compare extracted relations with a gold relation file")
    rel.add_argument("--gold", help="gold file (src,dst,type per line); defaults to config key `gold`")
    rel.add_argument("--predicted", help="score this relation file instead of the built KC graph")
    stage("pipeline", "run every stage from ingest to eval (and relation-eval when gold is set)")
    demo = sub.add_parser("demo-data", help="write a synthetic demo dataset and config")
    demo.add_argument("directory")
    demo.add_argument("--students", type=int, default=300)
    demo.add_argument("--seed", type=int, default=0)
    return parser


def run(args: argparse.Namespace) -> dict:
    if args.command == "demo-data":
        return cmd_demo_data(args.directory, args.students, args.seed)
    cfg = load_config(args.config, dict(_parse_override(s) for s in args.set))
    ws = Workspace(cfg, args.force)
    ws.root.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd in ("train", "eval", "ablate"):
        return {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}[cmd](ws, args.variant)
    if cmd == "relation-eval":
        return cmd_relation_eval(ws, args.gold, args.predicted)
    return {"ingest": cmd_ingest, "fit-irt": cmd_fit_irt, "extract-kc": cmd_extract_kc,
            "build-graphs": cmd_build_graphs, "pipeline": cmd_pipeline}[cmd](ws)


def _categorize(exc: BaseException) -> tuple[str, int] | None:
    if isinstance(exc, CliError):
        return exc.category, exc.code
    for cls, cat, code in _CATEGORIES:
        if isinstance(exc, cls):
            return cat, code
    return None


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        result = run(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one categorized line
        found = _categorize(exc)
        if found is None:
            raise
        category, code = found
        print(f"error[{category}]: {exc}", file=sys.stderr)
        return code
    if "_meta" in result:
        result = {k: v for k, v in result.items() if k != "_meta"}
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
