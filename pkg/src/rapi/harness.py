"""Scenario pipelines, metrics, the same-category perturbation and (alpha, beta) sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .classify import (
    AGGREGATION_MODES,
    ClassifierConfig,
    MLPConfig,
    aggregate_batch,
    multi_hot,
    train_adaptive,
    train_classifier,
)
from .core import Dataset, SeedPolicy, derive_item_partition, partition_providers, split_dataset
from .ingest import EmbeddingTable, hash_embed_titles, load_embedding_table
from .recsys import KINDS, RecommenderModel, TrainConfig, load_model, save_model, train_recommender
from .rlda import (
    AlignConfig,
    apply_alignment,
    augment_lists,
    train_alignment,
    train_cooccurrence_alignment,
    unify_embeddings,
)
from .surrogate import RecListSet, SurrogateReport, confirm_surrogate, provider_lists

__all__ = [
    "BASELINE_METHODS",
    "RAPI_METHODS",
    "ScenarioConfig",
    "ScenarioReport",
    "ModelCache",
    "evaluate",
    "apply_robustness_strategy",
    "content_embeddings",
    "run_scenario",
    "sweep",
    "render_table",
    "RESULT_COLUMNS",
]

log = logging.getLogger(__name__)

BASELINE_METHODS = ("DT", "KNN", "MLP")
RAPI_METHODS = {"RAPI": "Dynamic", "RAPI-Sum": "Sum", "RAPI-Static": "Static"}
RESULT_COLUMNS = ("dataset", "scenario", "method", "attribute", "alpha", "beta", "seed", "accuracy", "macro_f1")
RUNTIME_COLUMNS = ("dataset", "scenario", "method", "attribute", "alpha", "beta", "seed", "runtime_s")
SPLIT_RATIOS = (0.8, 0.1, 0.1)


def default_method(scenario: int) -> str:
    return "MLP" if scenario in (1, 2) else "RAPI"


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: int
    attribute: str
    alpha: float = 0.0
    beta: float = 0.5
    method: str = ""
    K: int = 20
    K2: int = 50
    original_kind: str = "LightGCN"
    candidate_kinds: tuple = ("MF", "NeuMF", "NGCF")
    embedding_file: str | None = None
    hash_dim: int = 768
    hash_seed: int = 0
    seed: int = 0
    trials: int = 3
    perturb_fraction: float = 0.0
    rec: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    adaptive: MLPConfig | None = None
    align: AlignConfig = field(default_factory=AlignConfig)

    def __post_init__(self):
        if self.scenario not in (1, 2, 3, 4):
            raise ValueError(f"scenario must be 1-4, got {self.scenario}")
        if not self.method:
            object.__setattr__(self, "method", default_method(self.scenario))
        allowed = BASELINE_METHODS if self.scenario in (1, 2) else tuple(RAPI_METHODS)
        if self.method not in allowed:
            raise ValueError(f"method {self.method!r} not available in scenario {self.scenario} (use {allowed})")
        if self.scenario == 4 and self.alpha <= 0:
            raise ValueError("scenario 4 needs interaction providers (alpha > 0)")
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.K < 1 or self.K2 < self.K:
            raise ValueError(f"need 1 <= K <= K2, got K={self.K}, K2={self.K2}")
        if self.original_kind not in KINDS or any(k not in KINDS for k in self.candidate_kinds):
            raise ValueError(f"recommender kinds must be among {KINDS}")
        if not 0 <= self.perturb_fraction <= 1:
            raise ValueError("perturb_fraction must lie in [0, 1]")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class ScenarioReport:
    config: dict
    method: str
    accuracy: float
    macro_f1: float
    precision: list
    recall: list
    runtime_s: float
    per_seed: list = field(default_factory=list)
    surrogate: list = field(default_factory=list)  # SurrogateReport per seed (scenario 4)
    alignment_res: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=1, default=str)


# --------------------------------------------------------------------------
# metrics and perturbation


def evaluate(predictions, truth, label_set) -> dict:
    """Accuracy, macro-F1 over the declared label set, per-class precision/recall.

    Inputs are equal-length code arrays or dicts keyed by user; a class never
    predicted (or never present) contributes F1 = 0.
    """
    if isinstance(predictions, dict) or isinstance(truth, dict):
        if set(predictions) != set(truth):
            raise ValueError("predictions and truth cover different users")
        keys = sorted(truth)
        predictions = [predictions[k] for k in keys]
        truth = [truth[k] for k in keys]
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"{len(pred)} predictions for {len(true)} labelled users")
    if not len(true):
        raise ValueError("nothing to evaluate")
    n_classes = len(label_set)
    precision, recall, f1 = [], [], []
    for c in range(n_classes):
        tp = int(np.sum((pred == c) & (true == c)))
        n_pred = int(np.sum(pred == c))
        n_true = int(np.sum(true == c))
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_true if n_true else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return {
        "accuracy": float(np.mean(pred == true)),
        "macro_f1": float(np.mean(f1)),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "single_class_truth": len(np.unique(true)) == 1,
    }


def apply_robustness_strategy(lists: RecListSet, categories: Sequence, fraction: float = 0.25, seed: int = 0):
    """Replace floor(fraction*K) random positions per list with same-category items.

    ``categories[i]`` is the category of item index ``i`` (None = unknown).
    Returns the perturbed lists and the number of positions left unchanged
    because no unused same-category item existed.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n_swap = int(math.floor(fraction * lists.K + 1e-9))
    if n_swap == 0:
        return lists, 0
    rng = np.random.default_rng(seed)
    by_cat = defaultdict(list)
    for item, cat in enumerate(categories):
        if cat is not None:
            by_cat[cat].append(item)
    pools = {c: np.array(v, dtype=np.int64) for c, v in by_cat.items()}
    out = lists.items.copy()
    unchanged = 0
    for row in out:
        positions = rng.choice(lists.K, size=n_swap, replace=False)
        for pos in positions:
            cat = categories[row[pos]]
            pool = pools.get(cat) if cat is not None else None
            if pool is None:
                unchanged += 1
                continue
            free = pool[~np.isin(pool, row)]
            if not len(free):
                unchanged += 1
                continue
            row[pos] = free[rng.integers(len(free))]
    return RecListSet(lists.K, lists.users, out), unchanged


# --------------------------------------------------------------------------
# caching of trained recommenders


def _cfg_key(*parts) -> str:
    return hashlib.sha256(repr(parts).encode()).hexdigest()[:12]


class ModelCache:
    """Memoises trained originals / surrogates, optionally mirrored on disk."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self._mem: dict = {}

    def get(self, key, build):
        if key in self._mem:
            return self._mem[key]
        value = None
        path = self.directory / "models" / key if self.directory else None
        if path is not None and (path / "manifest.json").exists():
            value = load_model(path)
        if value is None:
            value = build()
            if path is not None and isinstance(value, RecommenderModel):
                save_model(value, path)
        self._mem[key] = value
        return value

    def memo(self, key, build):
        if key not in self._mem:
            self._mem[key] = build()
        return self._mem[key]


_DEFAULT_CACHE = ModelCache()


def content_embeddings(dataset: Dataset, cfg: ScenarioConfig) -> EmbeddingTable:
    """Content vectors in dense item order, from a file or the title hasher."""
    if cfg.embedding_file:
        table = load_embedding_table(cfg.embedding_file)
        missing = [i for i in dataset.items if i not in table]
        if missing:
            raise ValueError(f"{cfg.embedding_file}: no content embedding for items {missing[:5]}")
        return table.subset(dataset.items)
    return hash_embed_titles(dataset.item_meta, cfg.hash_dim, cfg.hash_seed, items=dataset.items)


# --------------------------------------------------------------------------
# scenario pipelines


def _fit_baseline(features, train_users, eval_users, y, method, cfg: ScenarioConfig, seed, n_classes):
    clf = train_classifier(
        features[train_users], y[train_users], method, replace(cfg.classifier, seed=seed), n_classes=n_classes
    )
    return clf.predict(features[eval_users])


def _fit_adaptive(lists: RecListSet, E, train_users, eval_users, y, cfg: ScenarioConfig, seed, n_classes):
    mode = RAPI_METHODS[cfg.method]
    pos = lists.positions(train_users)
    head_cfg = cfg.adaptive or MLPConfig(hidden=(2 * E.shape[1],))
    clf = train_adaptive(lists.items[pos], E, y[train_users], replace(head_cfg, seed=seed), mode=mode, n_classes=n_classes)
    return clf.predict(lists.items[lists.positions(eval_users)], E)


def _run_trial(dataset: Dataset, cfg: ScenarioConfig, seeds: SeedPolicy, cache: ModelCache) -> dict:
    labels = dataset.labels(cfg.attribute)
    label_set = dataset.attributes[cfg.attribute].labels
    n_classes = len(label_set)
    fp = dataset.fingerprint()
    split = cache.memo(("split", fp, seeds.split), lambda: split_dataset(dataset, SPLIT_RATIOS, seeds.split))
    rec_cfg = replace(cfg.rec, seed=seeds.model_init)
    okey = f"{fp}-{cfg.original_kind}-{_cfg_key(rec_cfg, seeds.split)}"
    original = cache.get(okey, lambda: train_recommender(dataset, split, rec_cfg, cfg.original_kind))
    all_users = np.arange(dataset.n_users)
    Z = cache.memo(("lists", okey, cfg.K), lambda: provider_lists(original, dataset, split, all_users, cfg.K))
    notes = []
    if cfg.perturb_fraction > 0:
        Z, unchanged = apply_robustness_strategy(Z, dataset.categories(), cfg.perturb_fraction, seeds.perturbation)
        if unchanged:
            notes.append(f"{unchanged} perturbation slots had no same-category replacement")

    part = partition_providers(dataset, cfg.alpha, cfg.beta, seeds.partition)
    train_users = part.attribute_providers[labels[part.attribute_providers] >= 0]
    eval_users = part.target_users[labels[part.target_users] >= 0]
    assert not np.intersect1d(train_users, eval_users).size, "attribute provider in evaluation set"
    if not len(eval_users):
        raise ValueError("no labelled target users to evaluate (beta too large?)")
    clf_seed = seeds.seed("classifier")
    out = {"surrogate": None, "alignment_res": None, "notes": notes}

    if cfg.scenario == 1:
        pred = _fit_baseline(multi_hot(Z.items, dataset.n_items), train_users, eval_users, labels, cfg.method, cfg, clf_seed, n_classes)
    elif cfg.scenario == 2:
        E_R = original.factors()[1]
        feats = aggregate_batch(E_R[Z.items], "Sum")
        pred = _fit_baseline(feats, train_users, eval_users, labels, cfg.method, cfg, clf_seed, n_classes)
    else:
        content = content_embeddings(dataset, cfg)
        align_cfg = replace(cfg.align, seed=seeds.seed("alignment"))
        exclude = None
        if cfg.scenario == 3:
            align = cache.memo(
                ("cooc", fp, okey, cfg.K, cfg.perturb_fraction, seeds.perturbation, cfg.hash_dim, cfg.hash_seed, cfg.embedding_file, align_cfg, rec_cfg.dim),
                lambda: train_cooccurrence_alignment(content, Z, rec_cfg.dim, align_cfg),
            )
            E = align.transform(content.vectors)
            out["alignment_res"] = align.holdout_res
            notes.append("no interaction providers: co-occurrence alignment fallback, all items aligned")
        else:
            providers = part.interaction_providers
            candidates = [(k, replace(rec_cfg, seed=seeds.seed("surrogate", n))) for n, k in enumerate(cfg.candidate_kinds)]
            skey = f"{fp}-surrogate-{_cfg_key(candidates, providers.tobytes(), okey, cfg.K, cfg.perturb_fraction)}"
            report, spu = cache.memo(skey, lambda: confirm_surrogate(dataset, split, candidates, Z, providers))
            out["surrogate"] = report
            v_l, v_v = derive_item_partition(dataset, part, subset=split.train)
            E_S = spu.factors()[1]
            items = dataset.items
            sur_table = EmbeddingTable.from_matrix(E_S[v_l].reshape(len(v_l), -1), [items[k] for k in v_l])
            if len(v_v):
                align = train_alignment(content.subset(sur_table.ids), sur_table, align_cfg)
                out["alignment_res"] = align.holdout_res
                aligned = apply_alignment(align, content.subset([items[k] for k in v_v]))
            else:
                aligned = EmbeddingTable.empty(E_S.shape[1])
            E = unify_embeddings(aligned, sur_table, items).table.vectors
            # providers' histories are known to the analyst and excluded from candidates
            exclude = np.zeros((dataset.n_users, dataset.n_items), dtype=bool)
            is_provider = np.zeros(dataset.n_users, dtype=bool)
            is_provider[providers] = True
            sel = is_provider[dataset.user_idx]
            exclude[dataset.user_idx[sel], dataset.item_idx[sel]] = True
        needed = np.union1d(train_users, eval_users)
        sub = Z.for_users(needed)
        ex = exclude[needed] if exclude is not None else None
        augmented, _ = augment_lists(sub, E, cfg.K2, ex)
        pred = _fit_adaptive(augmented, E, train_users, eval_users, labels, cfg, clf_seed, n_classes)

    out["metrics"] = evaluate(pred, labels[eval_users], label_set)
    out["n_train"] = int(len(train_users))
    out["n_eval"] = int(len(eval_users))
    return out


def run_scenario(dataset: Dataset, cfg: ScenarioConfig, cache: ModelCache | None = None) -> ScenarioReport:
    """Run ``cfg.trials`` seeded trials of one scenario and average their metrics."""
    if cfg.attribute not in dataset.attributes:
        raise KeyError(f"attribute {cfg.attribute!r} not present (have: {sorted(dataset.attributes)})")
    cache = cache or _DEFAULT_CACHE
    master = SeedPolicy(cfg.seed)
    per_seed, surrogates, res_values, notes = [], [], [], []
    precision, recall = [], []
    for t in range(cfg.trials):
        seeds = master.trial(t)
        t0 = time.perf_counter()
        out = _run_trial(dataset, cfg, seeds, cache)
        m = out["metrics"]
        per_seed.append(
            {
                "seed": seeds.master_seed,
                "accuracy": m["accuracy"],
                "macro_f1": m["macro_f1"],
                "runtime_s": time.perf_counter() - t0,
                "n_train": out["n_train"],
                "n_eval": out["n_eval"],
            }
        )
        precision.append(m["precision"])
        recall.append(m["recall"])
        if out["surrogate"] is not None:
            surrogates.append(out["surrogate"])
        if out["alignment_res"] is not None:
            res_values.append(out["alignment_res"])
        if m["single_class_truth"]:
            out["notes"].append("evaluation truth holds a single class; macro-F1 is over the declared label set")
        for n in out["notes"]:
            if n not in notes:
                notes.append(n)
    return ScenarioReport(
        config=_config_echo(cfg),
        method=cfg.method,
        accuracy=float(np.mean([s["accuracy"] for s in per_seed])),
        macro_f1=float(np.mean([s["macro_f1"] for s in per_seed])),
        precision=np.mean(precision, axis=0).tolist(),
        recall=np.mean(recall, axis=0).tolist(),
        runtime_s=float(sum(s["runtime_s"] for s in per_seed)),
        per_seed=per_seed,
        surrogate=surrogates,
        alignment_res=res_values,
        notes=notes,
    )


def _config_echo(cfg: ScenarioConfig) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d, default=str))


# --------------------------------------------------------------------------
# sweeps


def _fmt(x) -> str:
    return repr(float(x))


def _cell_key(row) -> tuple:
    return (str(row["scenario"]), row["method"], row["attribute"], _fmt(row["alpha"]), _fmt(row["beta"]))


def _cell_rows(args):
    dataset, cfg, name = args
    report = run_scenario(dataset, cfg)
    rows, times = [], []
    for s in report.per_seed:
        base = {
            "dataset": name,
            "scenario": cfg.scenario,
            "method": cfg.method,
            "attribute": cfg.attribute,
            "alpha": _fmt(cfg.alpha),
            "beta": _fmt(cfg.beta),
            "seed": s["seed"],
        }
        rows.append({**base, "accuracy": _fmt(s["accuracy"]), "macro_f1": _fmt(s["macro_f1"])})
        times.append({**base, "runtime_s": f"{s['runtime_s']:.3f}"})
    return rows, times


def _read_rows(path: Path) -> list[dict]:
    if not path.exists():
        return []
    text = path.read_text(encoding="utf-8")
    if not text.endswith("\n"):
        text = text[: text.rfind("\n") + 1]  # drop a torn final line
    return list(csv.DictReader(io.StringIO(text)))


def _write_rows(path: Path, columns, rows, mode="w"):
    new = mode == "w" or not path.exists() or path.stat().st_size == 0
    with open(path, mode, newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerows(rows)
        fh.flush()


def sweep(
    dataset: Dataset,
    base_cfg: ScenarioConfig,
    alphas: Sequence[float],
    betas: Sequence[float],
    methods: Sequence[str] | None = None,
    out_dir=None,
    dataset_name: str = "dataset",
    workers: int = 1,
    scenarios: Sequence[int] | None = None,
) -> list[dict]:
    """One cell per (scenario, method, alpha, beta); per-seed rows are returned.

    ``methods`` is filtered per scenario to the methods that scenario offers.

    With ``out_dir`` each finished cell is appended to ``results.csv`` (resume
    skips cells already there) and the file is rewritten in canonical cell
    order at the end, together with ``aggregated.csv`` and ``runtime.csv``.
    Failed cells are logged to ``failed.csv`` and do not abort the sweep.
    """
    scenarios = list(scenarios) if scenarios else [base_cfg.scenario]
    cells = []
    for sc in scenarios:
        valid = BASELINE_METHODS if sc in (1, 2) else tuple(RAPI_METHODS)
        chosen = [m for m in methods if m in valid] if methods else [default_method(sc)]
        if not chosen:
            raise ValueError(f"none of the methods {list(methods)} applies to scenario {sc} (use {valid})")
        for method in chosen:
            for a in alphas:
                for b in betas:
                    if sc == 4 and a <= 0:
                        raise ValueError("scenario 4 cells need alpha > 0")
                    cells.append(replace(base_cfg, scenario=sc, method=method, alpha=float(a), beta=float(b)))
    order = {_cell_key(asdict(c)): n for n, c in enumerate(cells)}

    out = Path(out_dir) if out_dir else None
    done_rows, done_times = [], []
    if out:
        out.mkdir(parents=True, exist_ok=True)
        done_rows = [r for r in _read_rows(out / "results.csv") if _cell_key(r) in order]
        done_times = _read_rows(out / "runtime.csv")
        # keep only complete cells (all trials present)
        counts = defaultdict(int)
        for r in done_rows:
            counts[_cell_key(r)] += 1
        complete = {k for k, n in counts.items() if n == base_cfg.trials}
        done_rows = [r for r in done_rows if _cell_key(r) in complete]
        done_times = [r for r in done_times if _cell_key(r) in complete]
        _write_rows(out / "results.csv", RESULT_COLUMNS, done_rows)
        _write_rows(out / "runtime.csv", RUNTIME_COLUMNS, done_times)
        (out / "failed.csv").unlink(missing_ok=True)
    done = {_cell_key(r) for r in done_rows}
    todo = [c for c in cells if _cell_key(asdict(c)) not in done]

    rows, times, failed = list(done_rows), list(done_times), []

    def record(cfg, result):
        if isinstance(result, Exception):
            log.error("cell %s failed: %s", _cell_key(asdict(cfg)), result)
            failed.append({"scenario": cfg.scenario, "method": cfg.method, "alpha": cfg.alpha, "beta": cfg.beta, "error": str(result)})
            if out:
                _write_rows(out / "failed.csv", ("scenario", "method", "alpha", "beta", "error"), failed[-1:], mode="a")
            return
        r, t = result
        rows.extend(r)
        times.extend(t)
        if out:
            _write_rows(out / "results.csv", RESULT_COLUMNS, r, mode="a")
            _write_rows(out / "runtime.csv", RUNTIME_COLUMNS, t, mode="a")

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(c, pool.submit(_cell_rows, (dataset, c, dataset_name))) for c in todo]
            for c, fut in futures:
                try:
                    record(c, fut.result())
                except Exception as exc:  # noqa: BLE001 - a failed cell must not abort the sweep
                    record(c, exc)
    else:
        for c in todo:
            try:
                record(c, _cell_rows((dataset, c, dataset_name)))
            except Exception as exc:  # noqa: BLE001
                record(c, exc)

    def canon(r):
        return (order[_cell_key(r)], int(r["seed"]) if str(r["seed"]).isdigit() else r["seed"])

    rows = [{k: str(v) for k, v in r.items()} for r in sorted(rows, key=canon)]
    times = [{k: str(v) for k, v in r.items()} for r in sorted(times, key=canon)]
    if out:
        _write_rows(out / "results.csv", RESULT_COLUMNS, rows)
        _write_rows(out / "runtime.csv", RUNTIME_COLUMNS, times)
        write_aggregated(out / "aggregated.csv", rows)
    return rows


def aggregate_rows(rows: list[dict]) -> tuple[list[str], list[dict]]:
    """Mean over seeds, pivoted to one row per (dataset, scenario, method, attribute, alpha)."""
    betas = sorted({float(r["beta"]) for r in rows})
    groups: dict = defaultdict(lambda: defaultdict(list))
    keys = []
    for r in rows:
        k = (r["dataset"], str(r["scenario"]), r["method"], r["attribute"], float(r["alpha"]))
        if k not in groups:
            keys.append(k)
        groups[k][float(r["beta"])].append((float(r["accuracy"]), float(r["macro_f1"])))
    columns = ["dataset", "scenario", "method", "attribute", "alpha"]
    columns += [f"acc(beta={b:g})" for b in betas] + [f"f1(beta={b:g})" for b in betas]
    out = []
    for k in keys:
        row = dict(zip(columns[:5], (k[0], k[1], k[2], k[3], f"{k[4]:g}")))
        for b in betas:
            vals = groups[k].get(b)
            row[f"acc(beta={b:g})"] = f"{np.mean([v[0] for v in vals]):.4f}" if vals else ""
            row[f"f1(beta={b:g})"] = f"{np.mean([v[1] for v in vals]):.4f}" if vals else ""
        out.append(row)
    return columns, out


def write_aggregated(path, rows: list[dict]) -> None:
    columns, agg = aggregate_rows(rows)
    _write_rows(Path(path), columns, agg)


def render_table(aggregated_csv) -> str:
    """Aligned plain-text rendering of an aggregated CSV."""
    with open(aggregated_csv, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        table = [row for row in reader]
    if not table:
        return ""
    widths = [max(len(r[c]) if c < len(r) else 0 for r in table) for c in range(len(table[0]))]
    lines = []
    for n, r in enumerate(table):
        lines.append("  ".join(cell.ljust(w) if c < 4 else cell.rjust(w) for c, (cell, w) in enumerate(zip(r, widths))).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
