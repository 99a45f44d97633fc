"""Episodic evaluation, ablation grids and prototype trajectory export.

Episode ``i`` of a run always uses ``derive_stream(RngStream(seed), i)``,
and results are reduced in episode order, so a report depends only on the
configuration and the seed, never on the number of workers.
"""

import dataclasses
import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from minifsl.calibration import CalibrationConfig, calibrate_episode
from minifsl.episodes import EpisodeSpec, sample_episode
from minifsl.errors import EmptySet, EpisodeFailed, FslError, HistoryUnavailable
from minifsl.hct import HctConfig, TrainConfig, embed_feature_set, train
from minifsl.mlp import MlpModel
from minifsl.numerics import RngStream, derive_stream
from minifsl.protoinference import (
    InferenceConfig,
    Mode,
    Strategy,
    cipa_infer,
    run_strategy,
    uncentered_queries,
)
from minifsl.util import canonical_json, fingerprint

log = logging.getLogger(__name__)

Z95 = 1.96
DEFAULT_M_VALUES = (1, 2, 4, 8, 16, 32, 64, 128)


@dataclass
class EvalReport:
    strategy: str
    fingerprint: str
    n_episodes: int
    mean_accuracy: float
    ci95_halfwidth: float
    master_seed: int
    per_episode: Optional[List[float]] = None
    pseudo_label_accuracy: Optional[float] = None
    wall_time: float = 0.0

    def to_dict(self, include_timing=False):
        d = dataclasses.asdict(self)
        if not include_timing:
            del d["wall_time"]
        return d

    def to_json(self, include_timing=False):
        return canonical_json(self.to_dict(include_timing))


def accuracy(assignment, labels):
    """Fraction of rows whose argmax (lowest class id on ties) matches ``labels``."""
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        raise EmptySet("No queries to score")
    return float(np.mean(np.argmax(assignment, axis=1) == labels))


def mean_ci95(values):
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if n == 0:
        raise EmptySet("No episodes to aggregate")
    mean = float(values.mean())
    if n < 2:
        return mean, 0.0
    return mean, float(Z95 * values.std(ddof=1) / np.sqrt(n))


def run_fingerprint(episode_spec, calib_config, infer_config, n_episodes, seed, extra=None):
    return fingerprint(
        {
            "episode": episode_spec.to_json(),
            "calibration": calib_config.to_json(),
            "inference": infer_config.to_json(),
            "n_episodes": n_episodes,
            "seed": seed,
            "extra": extra,
        }
    )


def evaluate(
    feature_set,
    episode_spec,
    calib_config,
    infer_config,
    n_episodes=1000,
    seed=0,
    workers=1,
    classes=None,
    model=None,
    keep_per_episode=False,
    reporter=None,
    extra=None,
):
    """Mean accuracy with a 95% interval over ``n_episodes`` sampled episodes.

    With ``model`` given, ``feature_set`` holds raw inputs and is embedded first.
    """
    t0 = time.time()
    fp = run_fingerprint(episode_spec, calib_config, infer_config, n_episodes, seed, extra)
    if model is not None:
        feature_set = embed_feature_set(model, feature_set)
    calib_config = uncentered_queries(calib_config, infer_config.mode)
    infer_config = dataclasses.replace(infer_config, keep_history=False)
    master = RngStream(seed)

    def run(i):
        try:
            episode = sample_episode(feature_set, episode_spec, derive_stream(master, i), classes)
            result = run_strategy(episode, calib_config, infer_config)
            acc = accuracy(result.query, episode.query_labels)
            pl = np.nan
            if result.pool is not None and len(episode.unlabeled_labels) and (
                infer_config.mode == Mode.SEMI_SUPERVISED
            ):
                pl = accuracy(result.pool, episode.unlabeled_labels)
            return acc, pl
        except FslError as e:
            raise EpisodeFailed(i, e) from e

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(_reported(pool.map(run, range(n_episodes)), reporter))
    else:
        results = list(_reported(map(run, range(n_episodes)), reporter))

    accs = [r[0] for r in results]
    mean, ci = mean_ci95(accs)
    pls = [r[1] for r in results if not np.isnan(r[1])]
    report = EvalReport(
        strategy=infer_config.strategy.value,
        fingerprint=fp,
        n_episodes=n_episodes,
        mean_accuracy=mean,
        ci95_halfwidth=ci,
        master_seed=seed,
        per_episode=accs if keep_per_episode else None,
        pseudo_label_accuracy=float(np.mean(pls)) if pls else None,
        wall_time=time.time() - t0,
    )
    log.info(
        "%s: %.4f +- %.4f over %d episodes (%.1f s)",
        report.strategy,
        mean,
        ci,
        n_episodes,
        report.wall_time,
    )
    return report


def _reported(results, reporter):
    for i, r in enumerate(results):
        if reporter is not None:
            reporter.report(i, r[0])
        yield r


# ----------------------------------------------------------------------
# ablation grids


@dataclass(frozen=True)
class TrainVariant:
    name: str
    mm: bool = False
    hct: bool = False
    rot: bool = False

    @property
    def mixes(self):
        return self.mm or self.hct


TRAIN_VARIANTS = (
    TrainVariant("ce"),
    TrainVariant("ce+mm", mm=True),
    TrainVariant("ce+hct", hct=True),
    TrainVariant("ce+rot", rot=True),
    TrainVariant("ce+mm+rot", mm=True, rot=True),
    TrainVariant("ce+hct+rot", hct=True, rot=True),
)

_FULL = CalibrationConfig()

CIPA_ROWS = (
    ("raw", CalibrationConfig.off(), {"n_iter": 0}),
    ("center", CalibrationConfig(apply_power=False, apply_l2=False), {"n_iter": 0}),
    ("center+l2", CalibrationConfig(apply_power=False), {"n_iter": 0}),
    ("center+l2+pow", _FULL, {"n_iter": 0}),
    ("adapt-1", _FULL, {"sigma": 1.0, "n_iter": 1}),
    ("adapt-20", _FULL, {"sigma": 1.0, "n_iter": 20}),
    ("adapt-20-momentum", _FULL, {"sigma": 0.2, "n_iter": 20}),
)

# ProtoNet reads neither calibration nor adaptation settings
PROTONET_ROW = ("-", CalibrationConfig.off(), {})


@dataclass
class TrainSetup:
    """What is needed to fit one embedding per training variant."""

    base: object
    novel: object
    model_kwargs: dict = field(default_factory=dict)
    train_config: TrainConfig = field(default_factory=TrainConfig)
    hct_config: HctConfig = field(default_factory=HctConfig)
    seed: int = 0


@dataclass
class AblationGrid:
    train_variants: Tuple[TrainVariant, ...] = ()
    strategies: Tuple[Strategy, ...] = (Strategy.PROTONET, Strategy.SEMIPN, Strategy.CIPA)
    calib_rows: Tuple = (("default", _FULL, {}),)
    alphas: Tuple = (None,)
    m_values: Tuple = (None,)
    taus: Tuple = (None,)

    def training_cells(self):
        if not self.train_variants:
            return [(None, None)]
        cells = []
        for v in self.train_variants:
            for a in self.alphas if v.mixes else (None,):
                cells.append((v, a))
        return cells

    def rows_for(self, strategy):
        if strategy == Strategy.PROTONET:
            return (PROTONET_ROW,)
        return self.calib_rows

    def cells(self):
        for (variant, alpha), strategy in itertools.product(self.training_cells(), self.strategies):
            for row, m, tau in itertools.product(self.rows_for(strategy), self.m_values, self.taus):
                yield variant, alpha, strategy, row, m, tau


def train_variant_model(variant, alpha, setup):
    hct = None
    if variant.mixes:
        hct = setup.hct_config
        if alpha is not None:
            hct = dataclasses.replace(hct, alpha=alpha)
        hct = dataclasses.replace(hct, mm_mode=variant.mm)
    config = dataclasses.replace(setup.train_config, rot=variant.rot, hct=hct)
    kwargs = dict(setup.model_kwargs)
    kwargs["rotation_head"] = variant.rot
    model = MlpModel(
        setup.base.dim,
        setup.base.n_classes,
        image_shape=setup.base.image_shape,
        rng=derive_stream(RngStream(setup.seed), 0),
        **kwargs,
    )
    log.info("Training variant %s (alpha=%s)", variant.name, alpha)
    model, _ = train(model, setup.base, config, derive_stream(RngStream(setup.seed), 1))
    return model


ABLATION_COLUMNS = [
    "train",
    "alpha",
    "strategy",
    "calibration",
    "m_unlabeled",
    "tau",
    "n_episodes",
    "mean_accuracy",
    "ci95_halfwidth",
    "pseudo_label_accuracy",
    "fingerprint",
    "error",
]


def run_ablation(
    grid,
    feature_set,
    episode_spec,
    infer_config,
    n_episodes=1000,
    seed=0,
    workers=1,
    train_setup=None,
    out=None,
):
    """Evaluate every cell of ``grid``; returns (reports, table).

    Without training variants, ``feature_set`` already holds embeddings.
    A cell that fails is recorded with its error and the others proceed.
    """
    embedded = {}
    reports, rows = [], []
    for variant, alpha, strategy, (row_name, calib, overrides), m, tau in grid.cells():
        infer = dataclasses.replace(infer_config, strategy=strategy, **overrides)
        if tau is not None:
            infer = dataclasses.replace(infer, tau=tau)
        spec = episode_spec
        if m is not None:
            spec = dataclasses.replace(episode_spec, m_unlabeled=m)
            infer = dataclasses.replace(infer, mode=Mode.SEMI_SUPERVISED)
        entry = {
            "train": variant.name if variant else "",
            "alpha": alpha,
            "strategy": strategy.value,
            "calibration": row_name,
            "m_unlabeled": spec.m_unlabeled,
            "tau": infer.tau,
            "n_episodes": n_episodes,
        }
        try:
            fs = feature_set
            if variant is not None:
                key = (variant.name, alpha)
                if key not in embedded:
                    model = train_variant_model(variant, alpha, train_setup)
                    embedded[key] = embed_feature_set(model, train_setup.novel)
                fs = embedded[key]
            extra = {"train": entry["train"], "alpha": alpha}
            report = evaluate(fs, spec, calib, infer, n_episodes, seed, workers, extra=extra)
            reports.append(report)
            entry.update(
                mean_accuracy=report.mean_accuracy,
                ci95_halfwidth=report.ci95_halfwidth,
                pseudo_label_accuracy=report.pseudo_label_accuracy,
                fingerprint=report.fingerprint,
                error="",
            )
        except FslError as e:
            log.error("Ablation cell %s failed: %s", entry, e)
            entry["error"] = str(e)
        rows.append(entry)

    table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    if out is not None:
        table.to_csv(out, index=False, float_format="%.6f")
    return reports, table


def unlabeled_sweep(feature_set, episode_spec, infer_config, m_values=DEFAULT_M_VALUES,
                    strategies=(Strategy.SEMIPN, Strategy.CIPA), calib_config=None, **kwargs):
    """Semi-supervised accuracy as a function of unlabeled examples per class."""
    calib = calib_config or CalibrationConfig(center_query_set=False)
    grid = AblationGrid(
        strategies=tuple(strategies),
        calib_rows=(("semi", calib, {}),),
        m_values=tuple(m_values),
    )
    return run_ablation(grid, feature_set, episode_spec, infer_config, **kwargs)


# ----------------------------------------------------------------------
# trajectories


def trace_episode(feature_set, episode_spec, calib_config, infer_config, seed=0, episode_index=0):
    """Sample one episode and run CIPA on it with history kept."""
    episode = sample_episode(
        feature_set, episode_spec, derive_stream(RngStream(seed), episode_index)
    )
    calibrated = calibrate_episode(episode, uncentered_queries(calib_config, infer_config.mode))
    _, protos = cipa_infer(calibrated, dataclasses.replace(infer_config, keep_history=True))
    return episode, calibrated, protos


def export_trajectories(episode, prototypes_history, filename, calibrated=None):
    """Prototype path per class, then the episode points, as one CSV.

    Point coordinates come from ``calibrated`` when given so they share the
    prototypes' space; labels always come from ``episode``.
    """
    history = getattr(prototypes_history, "history", prototypes_history)
    if not history:
        raise HistoryUnavailable("Prototype history was not retained")
    points = calibrated if calibrated is not None else episode
    d = history[0].shape[1]
    coords = [f"coord_{j}" for j in range(d)]

    frames = []
    for t, centers in enumerate(history):
        df = pd.DataFrame(centers, columns=coords)
        df.insert(0, "class_id", np.arange(centers.shape[0]))
        df.insert(0, "iteration", t)
        df.insert(0, "kind", "prototype")
        frames.append(df)
    sets = (
        ("support", points.support_features, episode.support_labels),
        ("query", points.query_features, episode.query_labels),
        ("unlabeled", points.unlabeled_features, episode.unlabeled_labels),
    )
    for kind, x, y in sets:
        if len(y) == 0:
            continue
        df = pd.DataFrame(np.asarray(x).reshape(len(y), d), columns=coords)
        df.insert(0, "class_id", np.asarray(y))
        df.insert(0, "iteration", -1)
        df.insert(0, "kind", kind)
        frames.append(df)
    pd.concat(frames, ignore_index=True).to_csv(filename, index=False, float_format="%.17g")


def read_trajectories(filename):
    """Returns (history array of shape (T, N, d), point rows)."""
    df = pd.read_csv(filename, float_precision="round_trip")
    coords = [c for c in df.columns if c.startswith("coord_")]
    protos = df[df["kind"] == "prototype"].sort_values(["iteration", "class_id"])
    n_iter = protos["iteration"].nunique()
    n_way = protos["class_id"].nunique()
    history = protos[coords].to_numpy(dtype=np.float64).reshape(n_iter, n_way, len(coords))
    return history, df[df["kind"] != "prototype"].reset_index(drop=True)
