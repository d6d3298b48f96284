"""Command-line entry point: ``visaware <subcommand> [flags]``.

Every subcommand reads the run config (``--config``, then flag overrides),
works inside the output directory ``--out`` and writes its metrics as JSON
lines to ``OUT/logs/<name>.jsonl``. Exit status is 0 on success, 1 on a
runtime failure and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import Corpus, Vocab, generate_synthetic_corpus, load_corpus, majority_tag_accuracy, save_corpus
from .embedding import EmbeddingConfig, EmbeddingModel
from .errors import ConfigError, IntegrityError, VisAwareError
from .gradsuite import run_suite
from .pipeline import (Retriever, TaskOutcome, eval_recall, index_images, retrieve_for_sentences,
                       run_copy_task, run_nli_task, run_tag_task, train_embedding_on_corpus,
                       training_image_ids)
from .report import MetricsLog, plot_bars, plot_curve, plot_recall
from .retrieval import ImageIndex, format_tsv
from .tasks import (TASKS, TaskConfig, TaskModel, copy_token_accuracy, copy_vocab, decode_copy,
                    predict_pairs, predict_tags, sample_copy_batch, tagging_metrics, tagging_tsv)

COMMANDS = ("gen-data", "train-embed", "build-index", "retrieve", "train-task", "evaluate", "gradcheck")
RECALL_KS = (1, 5, 8, 10)


# -- layout of the output directory ------------------------------------------------

class Workspace:
    def __init__(self, run: RunConfig, data_dir: str | None = None):
        self.run = run
        self.root = Path(run.out_dir)
        self.data = Path(data_dir or run.data_dir or self.root / "data")

    @property
    def embed_ckpt(self) -> Path:
        return self.root / "embed.ckpt"

    @property
    def index_ckpt(self) -> Path:
        return self.root / "index.ckpt"

    def task_name(self, task: str, m: int) -> str:
        return task if task == "copy" else f"{task}-m{m}"

    def task_ckpt(self, name: str) -> Path:
        return self.root / f"task-{name}.ckpt"

    def log(self, name: str) -> MetricsLog:
        return MetricsLog(self.root / "logs" / f"{name}.jsonl", self.run.seed)

    def figure(self, name: str) -> Path:
        return self.root / "figures" / f"{name}.png"

    def write_json(self, rel: str, doc: dict) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def write_text(self, rel: str, text: str) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path

    def corpus(self) -> Corpus:
        if not self.data.exists():
            raise FileNotFoundError(f"no corpus at {self.data}; run `visaware gen-data` first")
        return load_corpus(self.data)


# -- model persistence -------------------------------------------------------------

def save_embedding(model: EmbeddingModel, vocab: Vocab, path: Path, seed: int) -> Path:
    return save_checkpoint(Checkpoint("embedding", {k: v.data for k, v in model.params.items()},
                                      asdict(model.config), seed, {"vocab": vocab.tokens}), path)


def load_embedding(path: Path) -> tuple[EmbeddingModel, Vocab]:
    ckpt = _load(path, "embedding")
    return EmbeddingModel(EmbeddingConfig(**ckpt.config), ckpt.tensors(requires_grad=False)), \
        Vocab(ckpt.extra["vocab"])


def save_index(index: ImageIndex, path: Path, seed: int) -> Path:
    return save_checkpoint(Checkpoint("index", {"matrix": index.matrix}, {}, seed,
                                      {"ids": list(index.ids)}), path)


def load_index(path: Path) -> ImageIndex:
    ckpt = _load(path, "index")
    return ImageIndex(tuple(ckpt.extra["ids"]), ckpt.params["matrix"])


def save_task(model: TaskModel, vocab: Vocab, path: Path, seed: int) -> Path:
    return save_checkpoint(Checkpoint(f"task:{model.config.task}", {k: v.data for k, v in model.params.items()},
                                      asdict(model.config), seed,
                                      {"labels": model.labels, "vocab": vocab.tokens}), path)


def load_task(path: Path) -> tuple[TaskModel, Vocab]:
    ckpt = decode_or_missing(path)
    if not ckpt.module.startswith("task:"):
        raise IntegrityError(f"{path} holds a {ckpt.module!r} checkpoint, not a task model")
    cfg = TaskConfig(**ckpt.config)
    vocab = Vocab(ckpt.extra["vocab"])
    return TaskModel(cfg, cfg.fusion_config(len(vocab)), ckpt.tensors(requires_grad=False),
                     list(ckpt.extra["labels"])), vocab


def decode_or_missing(path: Path) -> Checkpoint:
    if not Path(path).exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return load_checkpoint(path)


def _load(path: Path, module: str) -> Checkpoint:
    ckpt = decode_or_missing(path)
    if ckpt.module != module:
        raise IntegrityError(f"{path} holds a {ckpt.module!r} checkpoint, expected {module!r}")
    return ckpt


def load_retriever(ws: Workspace, corpus: Corpus) -> Retriever:
    model, vocab = load_embedding(ws.embed_ckpt)
    index = load_index(ws.index_ckpt) if ws.index_ckpt.exists() else None
    return Retriever.from_corpus(model, vocab, corpus, index)


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(ws: Workspace, args) -> int:
    corpus = generate_synthetic_corpus(ws.run.synthetic(), ws.run.seed)
    save_corpus(corpus, ws.data)
    log = ws.log("gen-data")
    log.write("gen-data", "n_texts", len(corpus.texts))
    log.write("gen-data", "n_images", len(corpus.image_features))
    log.write("gen-data", "n_pairs", len(corpus.pairs))
    log.write("gen-data", "majority_tag_accuracy", majority_tag_accuracy(corpus))
    print(f"wrote corpus to {ws.data}")
    return 0


def cmd_train_embed(ws: Workspace, args) -> int:
    corpus = ws.corpus()
    vocab = corpus.vocab()
    log = ws.log("train-embed")
    model = train_embedding_on_corpus(corpus, vocab, ws.run,
                                      on_epoch=lambda r: log.write("train-embed", "loss", r["loss"], r["epoch"]))
    save_embedding(model, vocab, ws.embed_ckpt, ws.run.seed)
    recalls = eval_recall(model, corpus, vocab, RECALL_KS)
    n_eval = len(dict.fromkeys(i for _, i in corpus.eval_pairs))
    for k, value in recalls.items():
        log.write("eval", f"recall@{k}", value)
    plot_curve({"triplet loss": [(r["epoch"], r["loss"]) for r in model.log]}, ws.figure("embed_loss"))
    plot_recall(recalls, ws.figure("recall"), chance={k: min(1.0, k / n_eval) for k in recalls})
    print(" ".join(f"recall@{k}={v:.4f}" for k, v in recalls.items()))
    return 0


def cmd_build_index(ws: Workspace, args) -> int:
    corpus = ws.corpus()
    model, _ = load_embedding(ws.embed_ckpt)
    index = index_images(model, corpus, training_image_ids(corpus))
    save_index(index, ws.index_ckpt, ws.run.seed)
    ws.log("build-index").write("build-index", "n_images", index.size)
    print(f"indexed {index.size} images into {ws.index_ckpt}")
    return 0


def _read_queries(path: str) -> list[tuple[str, list[str]]]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        qid, sep, text = line.partition("\t")
        if not sep or not text.split():
            raise ConfigError(f"{path}:{n}: expected `id<TAB>tokens`")
        out.append((qid, text.split()))
    return out


def cmd_retrieve(ws: Workspace, args) -> int:
    corpus = ws.corpus()
    model, vocab = load_embedding(ws.embed_ckpt)
    index = load_index(ws.index_ckpt)
    if args.queries:
        queries = _read_queries(args.queries)
    else:
        queries = [(t, corpus.texts[t]) for t, _ in corpus.eval_pairs]
    m = ws.run.m
    results = retrieve_for_sentences(model, vocab, index, [q for _, q in queries], m,
                                     query_ids=[q for q, _ in queries])
    tsv = format_tsv(results)
    path = ws.write_text("retrieval.tsv", tsv)
    log = ws.log("retrieve")
    log.write("retrieve", "n_queries", len(results))
    log.write("retrieve", "rows", sum(len(r.entries) for r in results))
    if m > 0:
        by_rank = np.array([r.scores for r in results])
        plot_curve({"mean score": [(k + 1, float(v)) for k, v in enumerate(by_rank.mean(axis=0))]},
                   ws.figure("retrieval_scores"), xlabel="rank", ylabel="cosine")
    print(f"wrote {len(results)} queries x {m} rows to {path}")
    return 0


def _task_predictions_tsv(task: str, outcome: TaskOutcome) -> str:
    if task == "tag":
        return tagging_tsv(outcome.inputs, outcome.gold, outcome.predictions)
    if task == "nli":
        return "".join(f"{i}\t{g}\t{p}\n" for i, g, p in zip(outcome.inputs, outcome.gold, outcome.predictions))
    return "".join(" ".join(map(str, s)) + "\t" + " ".join(map(str, p)) + "\n"
                   for s, p in zip(outcome.gold, outcome.predictions))


def cmd_train_task(ws: Workspace, args) -> int:
    run = ws.run
    task = args.task or run.task
    m = 0 if task == "copy" else run.m
    name = ws.task_name(task, m)
    corpus = ws.corpus() if task != "copy" else None
    retriever = load_retriever(ws, corpus) if m > 0 else None
    log = ws.log(f"train-task-{name}")

    def on_epoch(record):
        for key, value in record.items():
            if key != "epoch":
                log.write(f"train-{task}", key, value, record["epoch"])

    if task == "copy":
        outcome = run_copy_task(run, on_step=on_epoch)
        vocab = copy_vocab()
    else:
        vocab = retriever.vocab if retriever else corpus.vocab()
        runner = run_tag_task if task == "tag" else run_nli_task
        outcome = runner(corpus, vocab, retriever, run, m=m, on_epoch=on_epoch)
    save_task(outcome.model, vocab, ws.task_ckpt(name), run.seed)
    for key, value in sorted(outcome.metrics.items()):
        log.write(f"test-{task}", key, value)
    ws.write_json(f"metrics/{name}.json", {"task": task, "m": m, "seed": run.seed, **outcome.metrics})
    ws.write_text(f"predictions/{name}.tsv", _task_predictions_tsv(task, outcome))
    loss = [(r["epoch"], r["loss"]) for r in outcome.model.log]
    plot_curve({name: loss}, ws.figure(f"{name}_loss"), xlabel="step" if task == "copy" else "epoch")
    print(" ".join(f"{k}={v:.4f}" for k, v in sorted(outcome.metrics.items())))
    return 0


def evaluate_task(ws: Workspace, path: Path, corpus: Corpus | None) -> tuple[dict, str]:
    """Re-run the test split through a saved task model."""
    model, vocab = load_task(path)
    cfg = model.config
    if cfg.task == "copy":
        sources = sample_copy_batch(np.random.default_rng(cfg.seed + 3), 500, vocab, cfg.copy_max_len)
        decoded = decode_copy(model, vocab, sources)
        return {"token_accuracy": copy_token_accuracy(sources, decoded, vocab.eos_id)}, "token_accuracy"
    if corpus is None:
        raise FileNotFoundError(f"evaluating {path.name} needs the corpus at {ws.data}")
    retriever = load_retriever(ws, corpus) if cfg.m > 0 else None
    if cfg.task == "tag":
        tokens = [vocab.encode(e.tokens) for e in corpus.tag_test]
        feats = retriever.features([e.tokens for e in corpus.tag_test], cfg.m)[0] if retriever else None
        pred = [[model.labels[i] for i in p] for p in predict_tags(model, tokens, feats)]
        return tagging_metrics([e.tags for e in corpus.tag_test], pred), "accuracy"
    prem = [vocab.encode(e.premise) for e in corpus.nli_test]
    hyp = [vocab.encode(e.hypothesis) for e in corpus.nli_test]
    fp = fh = None
    if retriever:
        fp = retriever.features([e.premise for e in corpus.nli_test], cfg.m)[0]
        fh = retriever.features([e.hypothesis for e in corpus.nli_test], cfg.m)[0]
    pred = [model.labels[i] for i in predict_pairs(model, prem, hyp, fp, fh)]
    gold = [e.label for e in corpus.nli_test]
    return {"accuracy": sum(a == b for a, b in zip(gold, pred)) / len(gold)}, "accuracy"


def cmd_evaluate(ws: Workspace, args) -> int:
    paths = [Path(args.checkpoint)] if args.checkpoint else sorted(ws.root.glob("task-*.ckpt"))
    corpus = ws.corpus() if ws.data.exists() else None
    log = ws.log("evaluate")
    report, headline = {}, {}
    if corpus is not None and ws.embed_ckpt.exists():
        model, vocab = load_embedding(ws.embed_ckpt)
        recalls = eval_recall(model, corpus, vocab, RECALL_KS)
        for k, value in recalls.items():
            log.write("eval", f"recall@{k}", value)
        report["embedding"] = {f"recall@{k}": v for k, v in recalls.items()}
        plot_recall(recalls, ws.figure("recall"))
    if not paths and not report:
        raise FileNotFoundError(f"nothing to evaluate in {ws.root}")
    for path in paths:
        name = path.stem.removeprefix("task-")
        metrics, key = evaluate_task(ws, path, corpus)
        for metric, value in sorted(metrics.items()):
            log.write(f"eval-{name}", metric, value)
        report[name] = metrics
        headline[name] = metrics[key]
    ws.write_json("metrics/evaluate.json", report)
    if headline:
        plot_bars(headline, ws.figure("task_scores"), ylabel="headline metric")
    for name, metrics in report.items():
        print(name + ": " + " ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items())))
    return 0


def cmd_gradcheck(ws: Workspace, args) -> int:
    reports = run_suite(n_points=args.points, seed=ws.run.seed)
    log = ws.log("gradcheck")
    for r in reports:
        log.write("gradcheck", r.name, r.max_rel_error)
        print(r.line())
    worst = max(r.max_rel_error for r in reports)
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports)} cases, max rel err {worst:.3e}, {len(failed)} failed")
    return 1 if failed else 0


HANDLERS = {"gen-data": cmd_gen_data, "train-embed": cmd_train_embed, "build-index": cmd_build_index,
            "retrieve": cmd_retrieve, "train-task": cmd_train_task, "evaluate": cmd_evaluate,
            "gradcheck": cmd_gradcheck}


# -- argument handling -------------------------------------------------------------

def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config; unknown keys are rejected")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--m", type=_non_negative, help="images retrieved per sentence")
    common.add_argument("--no-visual", action="store_true", help="text-only baseline (m = 0)")
    common.add_argument("--out", metavar="DIR", help="output directory (default: config out_dir)")
    common.add_argument("--data", metavar="DIR", help="corpus directory (default: OUT/data)")

    parser = argparse.ArgumentParser(prog="visaware", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic clustered corpus")
    sub.add_parser("train-embed", parents=[common], help="train the shared text/image embedding")
    sub.add_parser("build-index", parents=[common], help="embed the training images into an index")
    p = sub.add_parser("retrieve", parents=[common], help="top-m images per query, as TSV")
    p.add_argument("--queries", metavar="PATH", help="TSV of `id<TAB>tokens` (default: eval captions)")
    p = sub.add_parser("train-task", parents=[common], help="train a downstream task model")
    p.add_argument("--task", choices=TASKS)
    p = sub.add_parser("evaluate", parents=[common], help="evaluate saved models and plot a summary")
    p.add_argument("--checkpoint", metavar="PATH", help="one task checkpoint (default: all in OUT)")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--points", type=int, default=10, help="random points per case")
    return parser


def resolve_config(args) -> RunConfig:
    run = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.m is not None:
        changes["m"] = args.m
    if args.no_visual:
        changes["m"] = 0
    if args.out is not None:
        changes["out_dir"] = args.out
    return run.replace(**changes) if changes else run


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.no_visual and args.m not in (None, 0):
        parser.print_usage(sys.stderr)
        print("visaware: error: --no-visual conflicts with --m > 0", file=sys.stderr)
        return 2
    try:
        run = resolve_config(args)
        return HANDLERS[args.command](Workspace(run, args.data), args)
    except (VisAwareError, OSError, KeyError, TypeError, ValueError) as exc:
        print(f"visaware {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
