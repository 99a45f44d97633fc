import datetime
import logging
import os.path
import socket

from minifsl import config as cfg
from minifsl.calibration import CalibrationConfig
from minifsl.checkpoint import load_checkpoint, save_checkpoint, write_loss_curves
from minifsl.config import Config
from minifsl.errors import ConfigError
from minifsl.fslebin import save_feature_set
from minifsl.harness import (
    CIPA_ROWS,
    TRAIN_VARIANTS,
    AblationGrid,
    TrainSetup,
    evaluate,
    export_trajectories,
    run_ablation,
    trace_episode,
)
from minifsl.hct import HctConfig, embed_feature_set, train
from minifsl.mlp import MlpModel
from minifsl.numerics import RngStream, derive_stream
from minifsl.protoinference import InferenceConfig, Strategy
from minifsl.reporters import EvalLogReporter, StdoutLogReporter
import minifsl.util as util

log = logging.getLogger(__name__)

DEF_EPISODES = 1000
DEF_VAL_EPISODES = 50


def _header(inp, seed):
    print(
        f"""
                            Host: {socket.gethostname()}
                            Date: {datetime.datetime.now().ctime()}
                          Config: {inp.path}
                     Master seed: {seed}
                     Fingerprint: {util.fingerprint(inp.resolved())}
    """
    )
    util.print_environment()
    print("")


def _setup(options):
    inp = Config(options.config)
    inp.path = options.config
    seed = options.seed
    if seed is None:
        seed = int(inp.getWithDefault("seed", 0))
    inp.set("seed", seed)
    inp.usedKeys["seed"] = 1
    return inp, seed


def _novel(inp, fs):
    """The part of ``fs`` evaluation runs on: novel classes when a split is given."""
    split = cfg.split_spec(inp)
    if split is None:
        return fs.remapped()
    return split.select(fs, "novel")


def _episodes(options, inp):
    if options.episodes is not None:
        inp.set("evaluation.episodes", options.episodes)
    return int(inp.getWithDefault("evaluation.episodes", DEF_EPISODES))


def _workers(options, inp):
    if options.workers is not None:
        return options.workers
    return int(inp.getWithDefault("workers", 1))


def _maybe_model(inp):
    if "model.checkpoint" not in inp:
        return None
    model, header = load_checkpoint(inp.get("model.checkpoint"))
    print(f"Loaded model {inp.get('model.checkpoint')} ({model.n_layers} blocks, embed {model.embed_dim})")
    return model


# -------------------------------------------------------
def run_train(options):
    inp, seed = _setup(options)
    fs = cfg.dataset(inp, "dataset.train")
    split = cfg.split_spec(inp)
    if split is not None:
        base = split.select(fs, "base")
        val = split.select(fs, "val") if split.val_classes else None
    else:
        base, val = fs.remapped(), None

    train_config = cfg.train_config(inp)
    spec = cfg.episode_spec(inp)
    kwargs = cfg.model_kwargs(inp)
    if train_config.rot and base.image_shape is not None:
        kwargs["rotation_head"] = True
    model = MlpModel(
        base.dim,
        base.n_classes,
        image_shape=base.image_shape,
        rng=derive_stream(RngStream(seed), 0),
        **kwargs,
    )

    monitor = None
    if val is not None and val.n_classes >= spec.n_way:
        n_val = int(inp.getWithDefault("training.val_episodes", DEF_VAL_EPISODES))
        proto = InferenceConfig(strategy=Strategy.PROTONET)

        def monitor(m):
            return evaluate(val, spec, CalibrationConfig.off(), proto, n_val, seed, model=m).mean_accuracy

    out = options.out or inp.getWithDefault("model.checkpoint", "model.fslm")
    curves_file = os.path.splitext(out)[0] + "_curves.csv"
    hct = train_config.hct

    _header(inp, seed)
    print(
        f"Training on {len(base)} examples of {base.n_classes} base classes:\n"
        f"  dimension {base.dim}, blocks {model.hidden} -> {model.embed_dim},\n"
        f"  {train_config.epochs} epochs of batch {train_config.batch_size}, lr {train_config.lr},\n"
        f"  consistency term: {'off' if hct is None else f'alpha={hct.alpha} eta={hct.eta} mm_mode={hct.mm_mode}'},\n"
        f"  rotation loss: {'on' if train_config.rot else 'off'},\n"
        f"  checkpointing on {out}.\n"
    )
    inp.printWarnings()
    print("")

    reporter = StdoutLogReporter(train_config.epochs)
    model, curves = train(
        model, base, train_config, derive_stream(RngStream(seed), 1), reporter, monitor
    )
    save_checkpoint(model, out, util.fingerprint(inp.resolved()))
    write_loss_curves(curves, curves_file)
    print(f"Loss curves written to {curves_file}")
    print("Done!")
    return model


# -------------------------------------------------------
def run_embed(options):
    inp, seed = _setup(options)
    fs = cfg.dataset(inp)
    model = _maybe_model(inp)
    if model is None:
        raise ConfigError("embed needs model.checkpoint")
    out = options.out or inp.getWithDefault("dataset.embedded", "embedded.fsle")
    inp.printWarnings()
    emb = embed_feature_set(model, fs)
    save_feature_set(emb, out)
    print(f"Embedded {len(emb)} rows of dimension {fs.dim} -> {emb.dim} into {out}")
    print("Done!")
    return emb


# -------------------------------------------------------
def run_eval(options):
    inp, seed = _setup(options)
    fs = _novel(inp, cfg.dataset(inp))
    model = _maybe_model(inp)
    spec = cfg.episode_spec(inp)
    calib = cfg.calibration_config(inp)
    infer = cfg.inference_config(inp)
    n_episodes = _episodes(options, inp)
    workers = _workers(options, inp)

    _header(inp, seed)
    print(
        f"Evaluating {infer.strategy.value} ({infer.mode.value}) on {fs.n_classes} classes:\n"
        f"  {spec.n_way}-way {spec.k_shot}-shot, {spec.q_query} queries, {spec.m_unlabeled} unlabeled,\n"
        f"  {n_episodes} episodes on {workers} workers.\n"
    )
    inp.printWarnings()
    print("")

    report = evaluate(
        fs,
        spec,
        calib,
        infer,
        n_episodes,
        seed,
        workers=workers,
        model=model,
        reporter=EvalLogReporter(n_episodes),
        extra=inp.resolved(),
    )
    print(
        f"\nAccuracy {100 * report.mean_accuracy:.2f} +- {100 * report.ci95_halfwidth:.2f} %"
        f" over {report.n_episodes} episodes ({report.wall_time:.1f} s)"
    )
    if report.pseudo_label_accuracy is not None:
        print(f"Pseudo-label accuracy {100 * report.pseudo_label_accuracy:.2f} %")
    if options.out:
        with open(options.out, "w") as f:
            f.write(report.to_json())
        print(f"Report written to {options.out}")
    print("Done!")
    return report


# -------------------------------------------------------
def _pick(names, presets, what):
    by_name = {p[0] if isinstance(p, tuple) else p.name: p for p in presets}
    unknown = [n for n in names if n not in by_name]
    if unknown:
        raise ConfigError(f"Unknown {what} {unknown}; known: {sorted(by_name)}")
    return tuple(by_name[n] for n in names)


def ablation_grid(inp):
    variants = inp.getWithDefault("ablation.train_variants", None) or []
    strategies = inp.getWithDefault("ablation.strategies", ["protonet", "semipn", "cipa"])
    rows = inp.getWithDefault("ablation.calibration_rows", None)
    try:
        strategies = tuple(Strategy(s) for s in strategies)
    except ValueError as e:
        raise ConfigError(str(e))
    if rows is None:
        calib_rows = (("default", cfg.calibration_config(inp), {}),)
    else:
        calib_rows = _pick(rows, CIPA_ROWS, "calibration rows")
    return AblationGrid(
        train_variants=_pick(variants, TRAIN_VARIANTS, "training variants"),
        strategies=strategies,
        calib_rows=calib_rows,
        alphas=tuple(inp.getWithDefault("ablation.alphas", None) or [None]),
        m_values=tuple(inp.getWithDefault("ablation.m_values", None) or [None]),
        taus=tuple(inp.getWithDefault("ablation.taus", None) or [None]),
    )


def run_ablate(options):
    inp, seed = _setup(options)
    grid = ablation_grid(inp)
    fs = cfg.dataset(inp)
    setup = None
    if grid.train_variants:
        split = cfg.split_spec(inp)
        if split is None:
            raise ConfigError("Training variants need a split with base and novel classes")
        setup = TrainSetup(
            base=split.select(fs, "base"),
            novel=split.select(fs, "novel"),
            model_kwargs=cfg.model_kwargs(inp),
            train_config=cfg.train_config(inp),
            hct_config=cfg.hct_config(inp) or HctConfig(),
            seed=seed,
        )
        novel = setup.novel
    else:
        novel = _novel(inp, fs)
    spec = cfg.episode_spec(inp)
    infer = cfg.inference_config(inp)
    n_episodes = _episodes(options, inp)
    workers = _workers(options, inp)
    out = options.out or inp.getWithDefault("ablation.out", "ablation.csv")

    _header(inp, seed)
    n_cells = sum(1 for _ in grid.cells())
    print(f"Running {n_cells} ablation cells of {n_episodes} episodes each, writing {out}.\n")
    inp.printWarnings()
    print("")

    reports, table = run_ablation(
        grid, novel, spec, infer, n_episodes, seed, workers, train_setup=setup, out=out
    )
    print(table.drop(columns=["fingerprint"]).to_string(index=False))
    failed = int((table["error"] != "").sum())
    if failed:
        print(f"\n{failed} of {len(table)} cells failed, see the error column")
    print("Done!")
    return reports, table


# -------------------------------------------------------
def run_export_traj(options):
    inp, seed = _setup(options)
    fs = _novel(inp, cfg.dataset(inp))
    model = _maybe_model(inp)
    if model is not None:
        fs = embed_feature_set(model, fs)
    spec = cfg.episode_spec(inp)
    calib = cfg.calibration_config(inp)
    infer = cfg.inference_config(inp)
    index = int(inp.getWithDefault("trajectory.episode", 0))
    out = options.out or inp.getWithDefault("trajectory.out", "trajectory.csv")
    inp.printWarnings()

    episode, calibrated, protos = trace_episode(fs, spec, calib, infer, seed, index)
    export_trajectories(episode, protos, out, calibrated=calibrated)
    print(
        f"Episode {index}: {len(protos.history)} prototype snapshots of {protos.n_way} classes"
        f" written to {out}"
    )
    print("Done!")
    return episode, protos
