"""Command-line entry point: staged pipeline over a cache directory.

Cache layout (under ``--cache``, default ``./rapi-cache``)::

    dataset/     interactions.tsv attributes.tsv items.tsv manifest.json
    original/    trained original recommender + lists.tsv
    surrogate/   confirmed surrogate + report.tsv
    alignment/   unified.emb
    augmented.tsv
    reports/     run reports (json)
    sweep/       results.csv aggregated.csv runtime.csv
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .classify import ClassifierConfig, MLPConfig
from .core import Dataset, SeedPolicy, derive_item_partition, partition_providers, split_dataset
from .harness import (
    SPLIT_RATIOS,
    ModelCache,
    ScenarioConfig,
    content_embeddings,
    render_table,
    run_scenario,
    sweep,
)
from .ingest import (
    EmbeddingTable,
    ParseError,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_embedding_table,
    parse_id,
    write_dataset,
    write_embedding_table,
)
from .recsys import KINDS, TrainConfig, hit_rate, load_model, save_model, train_recommender
from .rlda import AlignConfig, apply_alignment, augment_lists, train_alignment, train_cooccurrence_alignment, unify_embeddings, write_augmented
from .surrogate import RecListSet, confirm_surrogate, provider_lists

log = logging.getLogger("rapi")


class CLIError(Exception):
    pass


# --------------------------------------------------------------------------
# config


DEFAULTS = {
    "scenario": "1",
    "attribute": "gender",
    "method": "",
    "alpha": "0.0",
    "beta": "0.5",
    "K": "20",
    "K2": "50",
    "trials": "3",
    "seed": "0",
    "workers": "1",
    "original_kind": "LightGCN",
    "candidate_kinds": "MF,NeuMF,NGCF",
    "embedding_file": "",
    "hash_dim": "768",
    "hash_seed": "0",
    "perturb_fraction": "0.0",
    "dim": "64",
    "learning_rate": "0.01",
    "batch_size": "1024",
    "max_epochs": "500",
    "patience": "10",
    "layers": "2",
    "reg": "1e-4",
    "optimizer": "adam",
    "clf_hidden": "256",
    "clf_learning_rate": "0.05",
    "clf_batch_size": "128",
    "clf_max_epochs": "200",
    "clf_patience": "20",
    "clf_optimizer": "sgd",
    "knn_k": "15",
    "tree_max_depth": "12",
    "align_kind": "linear",
    "align_learning_rate": "0.01",
    "align_epochs": "3000",
}


class Config:
    """Flat string map; flag > file > built-in default."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    @classmethod
    def from_file(cls, path) -> "Config":
        values = {}
        p = Path(path)
        if not p.exists():
            raise CLIError(f"config file not found: {p}")
        for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CLIError(f"{p}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise CLIError(f"{p}:{lineno}: unknown config key {key!r}")
            values[key] = value
        return cls(values)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise CLIError(f"unknown config key {key!r}")
        self.values[key] = str(value)

    def override(self, flags: dict):
        for k, v in flags.items():
            if v is not None:
                self.set(k, v)

    def str(self, key) -> str:
        return self.values[key]

    def int(self, key) -> int:
        try:
            return int(self.values[key])
        except ValueError:
            raise CLIError(f"config key {key!r}: expected an integer, got {self.values[key]!r}") from None

    def float(self, key) -> float:
        try:
            return float(self.values[key])
        except ValueError:
            raise CLIError(f"config key {key!r}: expected a number, got {self.values[key]!r}") from None

    def list(self, key) -> list[str]:
        return [s.strip() for s in self.values[key].split(",") if s.strip()]

    def rec(self) -> TrainConfig:
        return TrainConfig(
            dim=self.int("dim"),
            learning_rate=self.float("learning_rate"),
            batch_size=self.int("batch_size"),
            max_epochs=self.int("max_epochs"),
            patience=self.int("patience"),
            layers=self.int("layers"),
            reg=self.float("reg"),
            optimizer=self.str("optimizer"),
        )

    def mlp(self) -> MLPConfig:
        return MLPConfig(
            hidden=tuple(int(h) for h in self.list("clf_hidden")),
            learning_rate=self.float("clf_learning_rate"),
            batch_size=self.int("clf_batch_size"),
            max_epochs=self.int("clf_max_epochs"),
            patience=self.int("clf_patience"),
            optimizer=self.str("clf_optimizer"),
        )

    def align(self) -> AlignConfig:
        return AlignConfig(
            kind=self.str("align_kind"), learning_rate=self.float("align_learning_rate"), epochs=self.int("align_epochs")
        )

    def scenario(self) -> ScenarioConfig:
        try:
            return ScenarioConfig(
                scenario=self.int("scenario"),
                attribute=self.str("attribute"),
                alpha=self.float("alpha"),
                beta=self.float("beta"),
                method=self.str("method"),
                K=self.int("K"),
                K2=self.int("K2"),
                original_kind=self.str("original_kind"),
                candidate_kinds=tuple(self.list("candidate_kinds")),
                embedding_file=self.str("embedding_file") or None,
                hash_dim=self.int("hash_dim"),
                hash_seed=self.int("hash_seed"),
                seed=self.int("seed"),
                trials=self.int("trials"),
                perturb_fraction=self.float("perturb_fraction"),
                rec=self.rec(),
                classifier=ClassifierConfig(knn_k=self.int("knn_k"), tree_max_depth=self.int("tree_max_depth"), mlp=self.mlp()),
                align=self.align(),
            )
        except ValueError as exc:
            raise CLIError(str(exc)) from None


# --------------------------------------------------------------------------
# cache helpers


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise CLIError(f"missing {path}; run `{producer}` first")
    return path


def _load_cached_dataset(cache: Path) -> Dataset:
    d = _need(cache / "dataset" / "manifest.json", "ingest` or `synth").parent
    return load_dataset(d / "interactions.tsv", d / "attributes.tsv", d / "items.tsv")


def _save_cached_dataset(ds: Dataset, cache: Path, source: dict) -> None:
    d = cache / "dataset"
    write_dataset(ds, d)
    (d / "manifest.json").write_text(json.dumps({**source, "fingerprint": ds.fingerprint()}, indent=1, sort_keys=True))


def _summary(ds: Dataset, name: str) -> str:
    cols = ["Dataset", "#Users", "#Items", "#Interactions", "Density"] + [f"#{a}" for a in sorted(ds.attributes)]
    vals = [name, str(ds.n_users), str(ds.n_items), str(ds.n_interactions), f"{ds.density:.4%}"]
    vals += [str(len(ds.attributes[a].labels)) for a in sorted(ds.attributes)]
    widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
    return "  ".join(c.ljust(w) for c, w in zip(cols, widths)) + "\n" + "  ".join(v.ljust(w) for v, w in zip(vals, widths))


def _file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p is None:
            h.update(b"\0")
            continue
        h.update(str(p).encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _write_lists(path: Path, lists: RecListSet, ds: Dataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\trank\titem_id\n")
        for u, row in zip(lists.users, lists.items):
            for rank, i in enumerate(row, 1):
                fh.write(f"{ds.users[u]}\t{rank}\t{ds.items[i]}\n")


def _read_lists(path: Path, ds: Dataset) -> RecListSet:
    uidx, iidx = ds.user_index(), ds.item_index()
    rows: dict[int, list] = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            u, _, i = line.rstrip("\n").split("\t")
            rows.setdefault(uidx[parse_id(u)], []).append(iidx[parse_id(i)])
    return RecListSet.from_dict(rows)


def _stage_seeds(conf: Config) -> SeedPolicy:
    return SeedPolicy(conf.int("seed")).trial(0)


# --------------------------------------------------------------------------
# subcommands


def cmd_ingest(args, conf: Config, cache: Path) -> int:
    fmts = {
        "delimited": ("delimited", "tsv", "tsv"),
        "movielens": ("movielens_dat", "movielens_users", "movielens_movies"),
    }[args.format]
    paths = [Path(args.interactions), Path(args.attributes) if args.attributes else None, Path(args.items) if args.items else None]
    for p in paths:
        if p is not None and not p.exists():
            raise CLIError(f"input file not found: {p}")
    digest = _file_digest(paths) + f"|{args.format}|{args.sep!r}"
    manifest = cache / "dataset" / "manifest.json"
    name = args.name or paths[0].parent.name or "dataset"
    if manifest.exists() and json.loads(manifest.read_text()).get("input_digest") == digest:
        log.info("cache hit: inputs unchanged, dataset not re-parsed")
        ds = _load_cached_dataset(cache)
    else:
        sep = "::" if args.format == "movielens" else args.sep.encode().decode("unicode_escape")
        ds = load_dataset(paths[0], paths[1], paths[2], fmt=fmts[0], sep=sep, attributes_fmt=fmts[1], items_fmt=fmts[2])
        _save_cached_dataset(ds, cache, {"input_digest": digest, "name": name})
    print(_summary(ds, name))
    return 0


def cmd_synth(args, conf: Config, cache: Path) -> int:
    spec = SyntheticSpec(
        n_users=args.users,
        n_items=args.items,
        n_clusters=args.clusters,
        attribute_name=args.attribute,
        cluster_affinity=args.affinity,
        interactions_per_user=args.per_user,
        label_noise=args.label_noise,
    )
    ds = generate_synthetic(spec, seed=conf.int("seed")).dataset
    _save_cached_dataset(ds, cache, {"name": "synthetic", "synthetic": repr(spec), "seed": conf.int("seed")})
    print(_summary(ds, "synthetic"))
    return 0


def cmd_train_rec(args, conf: Config, cache: Path) -> int:
    ds = _load_cached_dataset(cache)
    seeds = _stage_seeds(conf)
    split = split_dataset(ds, SPLIT_RATIOS, seeds.split)
    kind = args.kind or conf.str("original_kind")
    cfg = replace(conf.rec(), seed=seeds.model_init)
    model = train_recommender(ds, split, cfg, kind)
    out = cache / "original"
    save_model(model, out)
    K = conf.int("K")
    lists = provider_lists(model, ds, split, np.arange(ds.n_users), K)
    _write_lists(out / "lists.tsv", lists, ds)
    known = ds.interaction_mask(split.train)
    held = ds.interaction_mask(split.test)
    print(f"kind\t{kind}\nepochs\t{len(model.history['loss'])}\ntest_hit_rate@{K}\t{hit_rate(model, known, held, K):.4f}")
    return 0


def cmd_confirm(args, conf: Config, cache: Path) -> int:
    ds = _load_cached_dataset(cache)
    original = _read_lists(_need(cache / "original" / "lists.tsv", "train-rec"), ds)
    seeds = _stage_seeds(conf)
    split = split_dataset(ds, SPLIT_RATIOS, seeds.split)
    part = partition_providers(ds, conf.float("alpha"), conf.float("beta"), seeds.partition)
    if not len(part.interaction_providers):
        raise CLIError("confirm needs interaction providers; set --alpha > 0")
    base = replace(conf.rec(), seed=seeds.model_init)
    kinds = conf.list("candidate_kinds")
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise CLIError(f"unknown candidate kinds {bad}; choose from {KINDS}")
    candidates = [(k, replace(base, seed=seeds.seed("surrogate", n))) for n, k in enumerate(kinds)]
    report, model = confirm_surrogate(ds, split, candidates, original, part.interaction_providers)
    out = cache / "surrogate"
    save_model(model, out)
    (out / "report.tsv").write_text(report.to_tsv())
    sys.stdout.write(report.to_tsv())
    return 0


def _unified(conf: Config, cache: Path, ds: Dataset):
    seeds = _stage_seeds(conf)
    source = ScenarioConfig(
        3,
        conf.str("attribute"),
        embedding_file=conf.str("embedding_file") or None,
        hash_dim=conf.int("hash_dim"),
        hash_seed=conf.int("hash_seed"),
    )
    content = content_embeddings(ds, source)
    align_cfg = replace(conf.align(), seed=seeds.seed("alignment"))
    sur_dir = cache / "surrogate"
    if conf.float("alpha") > 0 and (sur_dir / "manifest.json").exists():
        spu = load_model(sur_dir)
        split = split_dataset(ds, SPLIT_RATIOS, seeds.split)
        part = partition_providers(ds, conf.float("alpha"), conf.float("beta"), seeds.partition)
        v_l, v_v = derive_item_partition(ds, part, subset=split.train)
        E_S = spu.factors()[1]
        sur = EmbeddingTable.from_matrix(E_S[v_l], [ds.items[k] for k in v_l])
        res_value = None
        if len(v_v):
            model = train_alignment(content.subset(sur.ids), sur, align_cfg)
            aligned = apply_alignment(model, content.subset([ds.items[k] for k in v_v]))
            res_value = model.holdout_res
        else:
            aligned = EmbeddingTable.empty(sur.dim)
        return unify_embeddings(aligned, sur, ds.items).table, res_value, "surrogate"
    if conf.float("alpha") > 0:
        raise CLIError(f"missing {sur_dir / 'manifest.json'}; run `confirm` first (or use --alpha 0)")
    lists = _read_lists(_need(cache / "original" / "lists.tsv", "train-rec"), ds)
    model = train_cooccurrence_alignment(content, lists, conf.int("dim"), align_cfg)
    return EmbeddingTable.from_matrix(model.transform(content.vectors), ds.items), model.holdout_res, "co-occurrence"


def cmd_align(args, conf: Config, cache: Path) -> int:
    ds = _load_cached_dataset(cache)
    table, res_value, source = _unified(conf, cache, ds)
    out = cache / "alignment"
    out.mkdir(parents=True, exist_ok=True)
    write_embedding_table(table, out / "unified.emb")
    print(f"source\t{source}\nitems\t{len(table)}\ndim\t{table.dim}")
    print(f"holdout_res\t{res_value:.6f}" if res_value is not None else "holdout_res\tn/a (no items to align)")
    return 0


def cmd_augment(args, conf: Config, cache: Path) -> int:
    ds = _load_cached_dataset(cache)
    lists = _read_lists(_need(cache / "original" / "lists.tsv", "train-rec"), ds)
    table = load_embedding_table(_need(cache / "alignment" / "unified.emb", "align"))
    E = table.rows(ds.items)
    K2 = conf.int("K2")
    augmented, res_values = augment_lists(lists, E, K2)
    write_augmented(cache / "augmented.tsv", augmented, lists.K, res_values, ds.users, ds.items)
    print(f"users\t{len(augmented)}\nK\t{lists.K}\nK2\t{K2}\nmean_appended_res\t{float(np.mean(res_values)) if res_values.size else 0.0:.6f}")
    return 0


def cmd_run(args, conf: Config, cache: Path) -> int:
    ds = _load_cached_dataset(cache)
    cfg = conf.scenario()
    report = run_scenario(ds, cfg, ModelCache(cache))
    out = cache / "reports"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"s{cfg.scenario}-{cfg.method}-{cfg.attribute}-a{cfg.alpha:g}-b{cfg.beta:g}"
    (out / f"{stem}.json").write_text(report.to_json())
    print(f"scenario\t{cfg.scenario}\nmethod\t{cfg.method}\nattribute\t{cfg.attribute}")
    print(f"accuracy\t{report.accuracy:.4f}\nmacro_f1\t{report.macro_f1:.4f}")
    for s in report.per_seed:
        print(f"seed {s['seed']}\taccuracy {s['accuracy']:.4f}\tmacro_f1 {s['macro_f1']:.4f}")
    for note in report.notes:
        log.info("note: %s", note)
    return 0


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CLIError(f"expected a comma-separated list of numbers, got {text!r}") from None


def cmd_sweep(args, conf: Config, cache: Path) -> int:
    ds = _load_cached_dataset(cache)
    base = conf.scenario()
    out = Path(args.out) if args.out else cache / "sweep"
    name = json.loads((cache / "dataset" / "manifest.json").read_text()).get("name", "dataset")
    methods = args.methods.split(",") if args.methods else None
    scenarios = [int(x) for x in args.scenarios.split(",")] if args.scenarios else None
    rows = sweep(ds, base, _floats(args.alphas), _floats(args.betas), methods, out, name, conf.int("workers"), scenarios)
    print(f"cells\t{len(rows) // max(1, base.trials)}\nrows\t{len(rows)}\nresults\t{out / 'results.csv'}")
    failed = out / "failed.csv"
    if failed.exists():
        log.error("some cells failed, see %s", failed)
        return 1
    return 0


def cmd_report(args, conf: Config, cache: Path) -> int:
    path = Path(args.input) if args.input else cache / "sweep" / "aggregated.csv"
    sys.stdout.write(render_table(_need(path, "sweep")))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rapi", description="Attribute inference from recommendation lists.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--cache", default="rapi-cache", help="stage cache directory")
    p.add_argument("--workers", type=int, help="parallel sweep cells")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="parse and cache a dataset")
    s.add_argument("--interactions", required=True)
    s.add_argument("--attributes")
    s.add_argument("--items")
    s.add_argument("--format", choices=("delimited", "movielens"), default="delimited")
    s.add_argument("--sep", default="\\t")
    s.add_argument("--name")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="generate and cache a planted dataset")
    s.add_argument("--users", type=int, default=500)
    s.add_argument("--items", type=int, default=200)
    s.add_argument("--clusters", type=int, default=2)
    s.add_argument("--affinity", type=float, default=0.9)
    s.add_argument("--per-user", type=int, default=30)
    s.add_argument("--label-noise", type=float, default=0.0)
    s.add_argument("--attribute", default="gender")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-rec", help="train the original recommender and export its lists")
    s.add_argument("--kind", choices=KINDS)
    s.add_argument("--K", type=int)
    s.set_defaults(func=cmd_train_rec)

    s = sub.add_parser("confirm", help="pick the surrogate with the highest list similarity")
    s.add_argument("--candidates", dest="candidate_kinds")
    s.add_argument("--alpha", type=float)
    s.set_defaults(func=cmd_confirm)

    s = sub.add_parser("align", help="build the unified item embedding")
    s.add_argument("--alpha", type=float)
    s.add_argument("--embeddings", dest="embedding_file")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("augment", help="extend the original lists to K2 items")
    s.add_argument("--K2", type=int)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("run", help="run one scenario end to end")
    _scenario_flags(s)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="grid over alpha and beta")
    _scenario_flags(s, grid=True)
    s.add_argument("--alphas", default="0.0")
    s.add_argument("--betas", default="0.5")
    s.add_argument("--scenarios", help="comma-separated scenarios (overrides --scenario)")
    s.add_argument("--methods", help="comma-separated; each scenario keeps the ones it offers")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="render an aggregated CSV as a text table")
    s.add_argument("--input")
    s.set_defaults(func=cmd_report)
    return p


def _scenario_flags(s, grid=False):
    s.add_argument("--scenario", type=int, choices=(1, 2, 3, 4))
    s.add_argument("--attribute")
    s.add_argument("--trials", type=int)
    s.add_argument("--perturb", dest="perturb_fraction", type=float, nargs="?", const=0.25, help="same-category replacement fraction (bare flag: 0.25)")
    if not grid:
        s.add_argument("--method")
        s.add_argument("--alpha", type=float)
        s.add_argument("--beta", type=float)


OVERRIDABLE = ("seed", "workers", "K", "K2", "candidate_kinds", "alpha", "beta", "scenario", "attribute", "method", "trials", "perturb_fraction", "embedding_file")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(message)s", stream=sys.stderr)
    logging.getLogger("rapi").setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        conf = Config.from_file(args.config) if args.config else Config()
        conf.override({k: getattr(args, k, None) for k in OVERRIDABLE})
        if getattr(args, "command", "") == "sweep" and getattr(args, "scenarios", None):
            conf.set("scenario", args.scenarios.split(",")[0])
        if getattr(args, "command", "") == "sweep" and conf.int("scenario") == 4 and conf.float("alpha") <= 0:
            # the grid supplies alpha; the base config only needs a valid placeholder
            conf.set("alpha", max(_floats(args.alphas)))
        cache = Path(args.cache)
        return args.func(args, conf, cache)
    except (CLIError, ParseError, FileNotFoundError, KeyError, ValueError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"rapi {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
