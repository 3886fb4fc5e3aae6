"""Command-line orchestration over a project workdir.

Every command is a pure function of its inputs, configuration, and seeds;
artifacts land in the configured workdir under stable names (corpus.json,
splits.json, vectorizer_<category>.json, model_<category>.ckpt, *.vec,
*.idx, report.json). A lock file guards the workdir against concurrent
commands.
"""

import argparse
import json
import os
import re
import sys
import time
from pathlib import Path

from . import annindex, linker, neural, vectorize
from .config import ConfigError, load_config
from .corpus import Corpus, CorpusError, Splits, corpus_stats, load_corpus_xml, make_stratified_splits


class UsageError(Exception):
    """Command-line usage problems (unknown flag, bad subcommand)."""


class PrerequisiteError(Exception):
    """A required artifact is missing; the message names its producer."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _slug(category):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", category)


class WorkdirLock:
    """Exclusive lock file so only one command runs per workdir."""

    def __init__(self, workdir):
        self.path = Path(workdir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise linker.LinkerError(
                f"workdir is locked by another command; remove {self.path} if stale"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _require(path: Path, producer: str):
    if not path.exists():
        raise PrerequisiteError(
            f"missing artifact {path.name}; run `tablelink {producer}` first"
        )
    return path


def _load_corpus(workdir: Path) -> Corpus:
    return Corpus.load(_require(workdir / "corpus.json", "ingest"))


def _load_splits(workdir: Path) -> Splits:
    with open(_require(workdir / "splits.json", "ingest"), encoding="utf-8") as f:
        return Splits.from_dict(json.load(f))


def _load_vectorizer(workdir: Path, category) -> vectorize.VectorizerModel:
    path = _require(workdir / f"vectorizer_{_slug(category)}.json", "fit")
    return vectorize.VectorizerModel.load(path)


def _load_pair(workdir: Path, category) -> neural.EmbedderPair:
    path = _require(workdir / f"model_{_slug(category)}.ckpt", "train")
    pair, _ = neural.load_checkpoint(path)
    return pair


def _load_forest(workdir: Path, side, category) -> annindex.RpForest:
    path = _require(workdir / f"{side}_{_slug(category)}.idx", "build-index")
    return annindex.load_forest(path)


def _save_splits(workdir: Path, splits: Splits):
    with open(workdir / "splits.json", "w", encoding="utf-8") as f:
        json.dump(splits.to_dict(), f, sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def emit_report(report: linker.EvalReport, format="table") -> bytes:
    """Deterministic report serialization as JSON or an aligned table.

    The table has one row per category and, for each k, precision columns
    for the test, train, and unseen splits.
    """
    if format == "json":
        return (json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n").encode("utf-8")
    if format != "table":
        raise ConfigError(f"unknown report format {format!r}")
    splits = ("test", "train", "unseen")
    headers = ["category"] + [f"P@{k}:{s}" for k in report.ks for s in splits]
    rows = []
    for category in report.categories():
        row = [category]
        for k in report.ks:
            for split in splits:
                cell = report.cells.get(report.primary_direction, {}).get(split, {}).get(category)
                row.append(f"{cell['precision'][k]:.2f}" if cell else "-")
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return ("\n".join(lines) + "\n").encode("utf-8")


def _write_report(workdir: Path, report: linker.EvalReport):
    (workdir / "report.json").write_bytes(emit_report(report, "json"))
    (workdir / "report.txt").write_bytes(emit_report(report, "table"))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _corpus_source(config):
    if not config.paths.corpus:
        raise ConfigError("paths.corpus must point at the corpus XML file")
    path = Path(config.paths.corpus)
    if not path.exists():
        raise ConfigError(f"paths.corpus does not exist: {path}")
    return path


def cmd_ingest(config, args):
    corpus = load_corpus_xml(_corpus_source(config))
    workdir = Path(config.paths.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    corpus.save(workdir / "corpus.json")
    splits = make_stratified_splits(corpus, config.split_spec())
    _save_splits(workdir, splits)
    print(
        f"ingested {len(corpus.tuples)} tuples, {len(corpus.mentions)} mentions, "
        f"{len(corpus.links)} links across {len(corpus.schemas)} categories"
    )
    print(f"splits: {len(splits.train)} train / {len(splits.test)} test / {len(splits.unseen)} unseen")


def cmd_stats(config, args):
    corpus = _load_corpus(Path(config.paths.workdir))
    stats = corpus_stats(corpus)
    header = (
        f"{'category':<20}{'instances':>10}{'tuples':>8}{'sentences':>11}"
        f"{'sent/inst':>11}{'columns':>9}{'density':>9}"
    )
    print(header)
    for category in sorted(stats):
        s = stats[category]
        print(
            f"{category:<20}{s.instances:>10}{s.tuples:>8}{s.sentences:>11}"
            f"{s.sentences_per_instance:>11.2f}{s.columns:>9}{s.avg_tuple_density:>9.2f}"
        )


def cmd_fit(config, args):
    workdir = Path(config.paths.workdir)
    corpus = _load_corpus(workdir)
    for category in corpus.categories():
        encoder = vectorize.HashingEncoder(dim=config.encoder.dim, seed=config.encoder.seed)
        model = vectorize.fit_vectorizer(
            corpus.tuples_of_category(category), corpus.schemas[category], encoder
        )
        model.save(workdir / f"vectorizer_{_slug(category)}.json")
        print(f"fitted vectorizer for {category}: tuple dim {model.dim()}")


def cmd_train(config, args):
    workdir = Path(config.paths.workdir)
    corpus = _load_corpus(workdir)
    splits = _load_splits(workdir)
    for cat_index, category in enumerate(corpus.categories()):
        if not corpus.mentions_of_category(category):
            continue
        vmodel = _load_vectorizer(workdir, category)
        log_path = workdir / f"train_{_slug(category)}.log"
        with open(log_path, "w", encoding="utf-8") as log:
            trained = linker.train_category(
                corpus, category, config, splits, vmodel, cat_index=cat_index,
                progress=lambda step, lr, loss: log.write(f"{step}\t{lr:.6e}\t{loss:.6e}\n"),
            )
        neural.save_checkpoint(
            workdir / f"model_{_slug(category)}.ckpt", trained.pair,
            step=trained.adam.step, extra={"category": category},
        )
        final = trained.loss_history[-1][2] if trained.loss_history else float("nan")
        print(f"trained {category}: {len(trained.loss_history)} batches, final loss {final:.4f}")


def _cmd_embed(config, args, side):
    workdir = Path(config.paths.workdir)
    corpus = _load_corpus(workdir)
    for category in corpus.categories():
        if not corpus.mentions_of_category(category):
            continue
        vmodel = _load_vectorizer(workdir, category)
        pair = _load_pair(workdir, category)
        tuple_vecs, mention_vecs = linker.raw_vectors_for_category(corpus, category, vmodel)
        e_r, e_t = linker.embed_category(pair, tuple_vecs, mention_vecs)
        vectors = e_r if side == "tuples" else e_t
        path = workdir / f"{side}_{_slug(category)}.vec"
        vectorize.write_vector_file(path, vectors)
        print(f"embedded {len(vectors)} {side} for {category} -> {path.name}")


def cmd_embed_tuples(config, args):
    _cmd_embed(config, args, "tuples")


def cmd_embed_mentions(config, args):
    _cmd_embed(config, args, "mentions")


def cmd_build_index(config, args):
    workdir = Path(config.paths.workdir)
    corpus = _load_corpus(workdir)
    for category in corpus.categories():
        if not corpus.mentions_of_category(category):
            continue
        for side in ("tuples", "mentions"):
            vec_path = _require(
                workdir / f"{side}_{_slug(category)}.vec",
                "embed-tuples" if side == "tuples" else "embed-mentions",
            )
            vectors = vectorize.read_vector_file(vec_path)
            forest = annindex.build_forest(
                vectors, t=config.index.t,
                leaf_capacity=config.index.leaf_capacity, seed=config.index.seed,
            )
            annindex.save_forest(forest, workdir / f"{side}_{_slug(category)}.idx")
            print(f"indexed {len(forest)} {side} vectors for {category} (t={forest.t})")


def cmd_link(config, args):
    workdir = Path(config.paths.workdir)
    corpus = _load_corpus(workdir)
    direction = (
        linker.TUPLE_TO_MENTIONS if args.direction == "tuple-to-mentions"
        else linker.MENTION_TO_TUPLES
    )
    n = args.n or config.index.n
    for category in corpus.categories():
        if not corpus.mentions_of_category(category):
            continue
        if config.strategy == "exact":
            candidates = linker.bootstrap_exact_match(
                corpus.tuples_of_category(category),
                corpus.mentions_of_category(category),
                {category: corpus.schemas[category]},
                name_attributes=config.name_attributes,
            )
            results = linker.rank_candidates(candidates, direction=direction)
        else:
            vmodel = _load_vectorizer(workdir, category)
            pair = _load_pair(workdir, category)
            side = "mentions" if direction == linker.TUPLE_TO_MENTIONS else "tuples"
            forest = _load_forest(workdir, side, category)
            tuple_vecs, mention_vecs = linker.raw_vectors_for_category(corpus, category, vmodel)
            anchors = tuple_vecs if direction == linker.TUPLE_TO_MENTIONS else mention_vecs
            results = {
                anchor: linker.semantic_link(
                    pair, forest, vec, n, direction=direction, anchor_id=anchor,
                    search_k=config.index.search_k,
                )
                for anchor, vec in sorted(anchors.items())
            }
        path = workdir / f"links_{_slug(category)}.tsv"
        linker.export_links(results, path, strategy=config.strategy)
        print(f"linked {len(results)} anchors for {category} -> {path.name}")


def cmd_eval(config, args):
    workdir = Path(config.paths.workdir)
    corpus = _load_corpus(workdir)
    splits = _load_splits(workdir)
    report = linker.EvalReport(ks=tuple(config.eval_ks))
    for category in corpus.categories():
        if not corpus.mentions_of_category(category):
            continue
        vmodel = _load_vectorizer(workdir, category)
        pair = _load_pair(workdir, category)
        tuple_forest = _load_forest(workdir, "tuples", category)
        mention_forest = _load_forest(workdir, "mentions", category)
        tuple_vecs, mention_vecs = linker.raw_vectors_for_category(corpus, category, vmodel)
        linker.evaluate_category(
            report, corpus, category, splits, pair,
            tuple_vecs, mention_vecs, tuple_forest, mention_forest,
            n=max(config.eval_ks), search_k=config.index.search_k,
        )
    report.finalize_overall()
    _write_report(workdir, report)
    sys.stdout.write(emit_report(report, "table").decode("utf-8"))


def cmd_pipeline(config, args):
    source = _corpus_source(config)
    workdir = Path(config.paths.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus_xml(source)
    corpus.save(workdir / "corpus.json")
    result = linker.retrain_cycle(corpus, config)
    _save_splits(workdir, result.splits)
    for category, model in result.models.items():
        slug = _slug(category)
        model.vectorizer.save(workdir / f"vectorizer_{slug}.json")
        neural.save_checkpoint(
            workdir / f"model_{slug}.ckpt", model.pair,
            step=len(model.loss_history), extra={"category": category},
        )
        with open(workdir / f"train_{slug}.log", "w", encoding="utf-8") as log:
            for step, lr, loss in model.loss_history:
                log.write(f"{step}\t{lr:.6e}\t{loss:.6e}\n")
        vectorize.write_vector_file(workdir / f"tuples_{slug}.vec", model.tuple_embeddings)
        vectorize.write_vector_file(workdir / f"mentions_{slug}.vec", model.mention_embeddings)
        annindex.save_forest(model.tuple_forest, workdir / f"tuples_{slug}.idx")
        annindex.save_forest(model.mention_forest, workdir / f"mentions_{slug}.idx")
    _write_report(workdir, result.report)
    with open(workdir / "timings.json", "w", encoding="utf-8") as f:
        json.dump({k: round(v, 3) for k, v in result.timings.items()}, f, sort_keys=True, indent=1)
    sys.stdout.write(emit_report(result.report, "table").decode("utf-8"))
    print(f"stage timings (s): {json.dumps({k: round(v, 2) for k, v in sorted(result.timings.items())})}")


COMMANDS = {
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "fit": cmd_fit,
    "train": cmd_train,
    "embed-tuples": cmd_embed_tuples,
    "embed-mentions": cmd_embed_mentions,
    "build-index": cmd_build_index,
    "link": cmd_link,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def build_parser():
    parser = _Parser(prog="tablelink", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="project configuration JSON")
        p.add_argument("--profile", default=None, help="named profile (desk, paper)")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="KEY=VALUE", help="override a config value, e.g. training.lr=1e-4",
        )
        if name == "link":
            p.add_argument(
                "--direction", choices=["tuple-to-mentions", "mention-to-tuples"],
                default="tuple-to-mentions",
            )
            p.add_argument("--n", type=int, default=None, help="ranked list length")
    return parser


def run_command(argv):
    """Run one subcommand; returns the process exit status.

    0 on success, 1 on usage/validation errors (including missing
    prerequisite artifacts), 2 on runtime failures.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("missing command; see --help")
        config = load_config(args.config, profile=args.profile, overrides=args.overrides)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    started = time.perf_counter()
    try:
        with WorkdirLock(config.paths.workdir or "."):
            COMMANDS[args.command](config, args)
    except (UsageError, ConfigError, PrerequisiteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CorpusError, vectorize.VectorizeError, annindex.AnnIndexError,
            linker.LinkerError, neural.TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{args.command} finished in {time.perf_counter() - started:.2f}s")
    return 0


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
