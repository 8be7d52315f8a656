"""Train-and-evaluate runs and the ablation grids built on them."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import RunConfig
from .embedder import Embedder
from .errors import ConfigError
from .retrieval import FeatureBatch, evaluate
from .synthetic import Dataset, generate, load_dataset
from .trainer import Trainer

logger = logging.getLogger(__name__)

FEATURES = ("f_bn", "f_bnf")
DIRECTIONS = {"V->T": (0, 1), "T->V": (1, 0)}
TABLE_COLUMNS = ("cell_id", "feature", "rank1", "rank5", "rank10", "mAP")
AXES = ("arrangement", "pooling", "bnneck_routing", "fusion", "margin_mc")
DEFAULT_MC_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def load_data(run: RunConfig) -> Dataset:
    if run.dataset_path:
        return load_dataset(run.dataset_path)
    return generate(run.synthetic_spec())


def evaluate_model(embedder: Embedder, dataset: Dataset, test_index) -> dict:
    """Retrieval results for both query directions and both feature choices."""
    results = {}
    for which in FEATURES:
        for direction, (qm, gm) in DIRECTIONS.items():
            q = test_index.subset(test_index.modalities == qm)
            g = test_index.subset(test_index.modalities == gm)
            fq = embedder.extract_features(dataset.take(q.sample_ids), q.modalities, which)
            fg = embedder.extract_features(dataset.take(g.sample_ids), g.modalities, which)
            res = evaluate(FeatureBatch(fq, q.identities, q.modalities), FeatureBatch(fg, g.identities, g.modalities))
            results[(which, direction)] = res
    return results


def run_experiment(run: RunConfig, dataset: Dataset | None = None, checkpoint_path=None):
    """Train on the split's training part and score the held-out part.

    Returns ``(trainer, results, untrained_results)``.
    """
    dataset = load_data(run) if dataset is None else dataset
    train_index, test_index = dataset.split(run.test_per_modality)
    cfg = run.train_config(len(train_index.identity_set), checkpoint_path)
    trainer = Trainer(dataset.samples, train_index, cfg)
    untrained = evaluate_model(trainer.embedder, dataset, test_index)
    trainer.run()
    return trainer, evaluate_model(trainer.embedder, dataset, test_index), untrained


def summary_record(results) -> dict:
    return {f"{which} {direction}": res.record() for (which, direction), res in results.items()}


def format_train_table(results) -> str:
    head = f"{'DGTL':<8}" + "".join(f"{d + ' rank1':>14}{d + ' mAP':>12}" for d in DIRECTIONS)
    lines = [head]
    for which in FEATURES:
        row = f"{which:<8}"
        for d in DIRECTIONS:
            r = results[(which, d)]
            row += f"{100 * r.rank(1):>14.2f}{100 * r.map:>12.2f}"
        lines.append(row)
    return "\n".join(lines)


# -- ablations --------------------------------------------------------------

ARRANGEMENT_CELLS = (
    ("1:Lf", "FineOnly_f"),
    ("2:Lc", "FineOnly_c"),
    ("3:Lf+Lc", "FineOnly_fc"),
    ("f2f", "f2f"),
    ("c2c", "c2c"),
    ("c2f", "c2f"),
    ("f2c", "f2c"),
)

# (fine triplet feature, coarse triplet feature or None for no coarse branch)
ROUTING_CELLS = (
    ("f_p|x", "f_p", None),
    ("f_bn|x", "f_bn", None),
    ("f_p|f_pf", "f_p", "f_pf"),
    ("f_bn|f_bnf", "f_bn", "f_bnf"),
    ("f_p|f_bnf", "f_p", "f_bnf"),
)


def ablation_cells(run: RunConfig, axis: str, grid=None):
    """Ordered ``(cell_id, RunConfig)`` pairs for one ablation axis."""
    if axis == "arrangement":
        return [(cid, run.replace(arrangement=arr)) for cid, arr in ARRANGEMENT_CELLS]
    if axis == "pooling":
        kinds = ("avg", "max", "gem")
        return [(f"{f}-{c}", run.replace(pool_fine=f, pool_coarse=c)) for f in kinds for c in kinds]
    if axis == "bnneck_routing":
        cells = []
        for cid, fine, coarse in ROUTING_CELLS:
            if coarse is None:
                cells.append((cid, run.replace(arrangement="FineOnly_f", fine_feature=fine)))
            else:
                cells.append((cid, run.replace(arrangement="f2c", fine_feature=fine, coarse_feature=coarse)))
        return cells
    if axis == "fusion":
        return [(f, run.replace(fusion=f)) for f in ("sum", "cat")]
    if axis == "margin_mc":
        values = DEFAULT_MC_GRID if grid is None else tuple(grid)
        return [(f"mc={v:g}", run.replace(margin_coarse=float(v))) for v in values]
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def run_cell(cell):
    """Train and score one ablation cell; rows use the visible-to-thermal direction."""
    cell_id, run = cell
    _, results, _ = run_experiment(run)
    rows = []
    for which in FEATURES:
        r = results[(which, "V->T")]
        rows.append({"cell_id": cell_id, "feature": which, "rank1": r.rank(1), "rank5": r.rank(5),
                     "rank10": r.rank(10), "mAP": float(r.map), "config": run.to_dict()})
    return rows


def run_ablation(run: RunConfig, axis: str, grid=None, jobs: int = 1):
    """Run every cell of ``axis``. Failed cells are reported, not fatal.

    Returns ``(rows, failures)`` with rows ordered by cell.
    """
    cells = ablation_cells(run, axis, grid)
    rows, failures = [], []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(cid, pool.submit(run_cell, (cid, cfg))) for cid, cfg in cells]
            for cid, fut in futures:
                try:
                    rows.extend(fut.result())
                except Exception as exc:  # noqa: BLE001 - one bad cell must not lose the rest
                    logger.error("cell %s failed: %s", cid, exc)
                    failures.append({"cell_id": cid, "error": f"{type(exc).__name__}: {exc}"})
    else:
        for cid, cfg in cells:
            try:
                rows.extend(run_cell((cid, cfg)))
            except Exception as exc:  # noqa: BLE001
                logger.error("cell %s failed: %s", cid, exc)
                failures.append({"cell_id": cid, "error": f"{type(exc).__name__}: {exc}"})
    return rows, failures


def format_table(rows) -> str:
    """Aligned text table with the fixed column set."""
    cells = [[str(r["cell_id"]), r["feature"]] + [f"{100 * r[k]:.2f}" for k in TABLE_COLUMNS[2:]] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(TABLE_COLUMNS)]
    fmt = lambda vals: "  ".join(v.ljust(w) if i < 2 else v.rjust(w) for i, (v, w) in enumerate(zip(vals, widths)))
    return "\n".join([fmt(TABLE_COLUMNS)] + [fmt(c) for c in cells])
