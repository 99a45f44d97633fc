import functools
import json
import logging

from minifsl.augment import AugmentPolicy
from minifsl.calibration import CalibrationConfig, NegativePolicy
from minifsl.episodes import (
    EpisodeSpec,
    SplitSpec,
    synth_gaussian_dataset,
    synth_image_dataset,
)
from minifsl.errors import ConfigError, FslError
from minifsl.fslebin import load_feature_set
from minifsl.hct import HctConfig, TrainConfig
from minifsl.numerics import RngStream
from minifsl.protoinference import Distance, InferenceConfig, Mode, Strategy

log = logging.getLogger(__name__)

# Keys that change how a run is executed but not what it computes
NOT_FINGERPRINTED = ("workers",)

_REQUIRED = object()


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = prefix + str(k).lower()
        if isinstance(v, dict) and v:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


class Config:
    """JSON run configuration with dotted keys, e.g. ``episode.n_way``.

    Every key read is remembered, so that keys given but never used can be
    reported at the end of setup.
    """

    def __init__(self, fn_or_dict):
        self.warnings = []
        self.usedKeys = {}
        if isinstance(fn_or_dict, dict):
            raw = fn_or_dict
        else:
            try:
                with open(fn_or_dict) as f:
                    raw = json.load(f)
            except OSError as e:
                raise ConfigError(f"Cannot read configuration {fn_or_dict}: {e}")
            except ValueError as e:
                raise ConfigError(f"Configuration {fn_or_dict} is not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise ConfigError("Configuration must be a JSON object")
        self.raw = raw
        self.data = _flatten(raw)

    def get(self, k):
        k = k.lower()
        self.usedKeys[k] = 1
        if k not in self.data:
            raise ConfigError(f"Missing configuration key {k}")
        return self.data[k]

    def getWithDefault(self, k, v):
        if k.lower() in self.data:
            return self.get(k)
        self.warnings.append(f"WARNING: Using default {k} = {v}")
        return v

    def __contains__(self, k):
        k = k.lower()
        self.usedKeys[k] = 1
        return k in self.data or any(key.startswith(k + ".") for key in self.data)

    def getboolean(self, k, default=_REQUIRED):
        """Boolean key; strings on/off and true/false are accepted in any case."""
        if default is not _REQUIRED and k.lower() not in self.data:
            return self.getWithDefault(k, default)
        v = self.get(k)
        if isinstance(v, bool):
            return v
        if str(v).lower() in ("on", "true"):
            return True
        elif str(v).lower() in ("off", "false"):
            return False
        raise ConfigError(f"Configuration key {k} not a boolean")

    def block(self, prefix):
        """All keys below ``prefix`` as a flat dict, marked as used."""
        prefix = prefix.lower() + "."
        out = {}
        for k, v in self.data.items():
            if k.startswith(prefix):
                self.usedKeys[k] = 1
                out[k[len(prefix) :]] = v
        return out

    def set(self, k, v):
        self.data[k.lower()] = v

    def unusedKeys(self):
        return set(self.data).difference(self.usedKeys)

    def resolved(self):
        """Resolved key/value pairs that determine the results of a run."""
        return {k: v for k, v in sorted(self.data.items()) if k not in NOT_FINGERPRINTED}

    def printWarnings(self):
        for m in self.warnings:
            log.warning(m)
        unused_keys = self.unusedKeys()
        if len(unused_keys):
            log.warning("These input keys were given but are unused in this run: ")
            for u in sorted(unused_keys):
                log.warning(" - " + u)


def _checked(builder):
    @functools.wraps(builder)
    def wrapper(inp, *args, **kwargs):
        try:
            return builder(inp, *args, **kwargs)
        except FslError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"{builder.__name__}: {e}")

    return wrapper


@_checked
def calibration_config(inp):
    return CalibrationConfig(
        beta=float(inp.getWithDefault("calibration.beta", 0.5)),
        apply_power=inp.getboolean("calibration.power", True),
        apply_center=inp.getboolean("calibration.center", True),
        apply_l2=inp.getboolean("calibration.l2", True),
        center_query_set=inp.getboolean("calibration.center_query", True),
        center_unlabeled_set=inp.getboolean("calibration.center_unlabeled", True),
        negative_policy=NegativePolicy(inp.getWithDefault("calibration.negative_policy", "reject")),
    )


@_checked
def inference_config(inp):
    return InferenceConfig(
        tau=float(inp.getWithDefault("inference.tau", 15.0)),
        sigma=float(inp.getWithDefault("inference.sigma", 0.2)),
        n_iter=int(inp.getWithDefault("inference.n_iter", 20)),
        distance=Distance(inp.getWithDefault("inference.distance", "cosine")),
        mode=Mode(inp.getWithDefault("inference.mode", "transductive")),
        strategy=Strategy(inp.getWithDefault("inference.strategy", "cipa")),
        keep_history=inp.getboolean("inference.history", True),
    )


@_checked
def episode_spec(inp):
    imbalance = inp.getWithDefault("episode.imbalance", None)
    fraction = inp.getWithDefault("episode.labeled_fraction", None)
    return EpisodeSpec(
        n_way=int(inp.getWithDefault("episode.n_way", 5)),
        k_shot=int(inp.getWithDefault("episode.k_shot", 1)),
        q_query=int(inp.getWithDefault("episode.q_query", 15)),
        m_unlabeled=int(inp.getWithDefault("episode.m_unlabeled", 0)),
        imbalance=None if imbalance is None else tuple(imbalance),
        labeled_fraction=None if fraction is None else float(fraction),
    )


@_checked
def split_spec(inp):
    """Class split, or None when the whole dataset is the novel set."""
    if "split" not in inp:
        return None
    if "split.counts" in inp:
        return SplitSpec.from_counts(*[int(c) for c in inp.get("split.counts")])
    return SplitSpec(
        frozenset(inp.getWithDefault("split.base", [])),
        frozenset(inp.getWithDefault("split.val", [])),
        frozenset(inp.getWithDefault("split.novel", [])),
    )


def _policy(inp, prefix):
    if prefix not in inp:
        return AugmentPolicy.identity()
    return AugmentPolicy.from_json(inp.block(prefix))


@_checked
def hct_config(inp):
    """Consistency-training settings, or None when the ``hct`` block is absent."""
    if "hct" not in inp:
        return None
    layers = inp.getWithDefault("hct.eligible_layers", None)
    return HctConfig(
        alpha=float(inp.getWithDefault("hct.alpha", 2.0)),
        eta=float(inp.getWithDefault("training.eta", 1.0)),
        eligible_layers=None if layers is None else tuple(int(l) for l in layers),
        schedule_fraction=float(inp.getWithDefault("hct.schedule_fraction", 1.0 / 3.0)),
        weak_aug=_policy(inp, "hct.weak_aug"),
        strong_aug=_policy(inp, "hct.strong_aug"),
        mm_mode=inp.getboolean("hct.mm_mode", False),
    )


@_checked
def train_config(inp):
    return TrainConfig(
        epochs=int(inp.getWithDefault("training.epochs", 30)),
        batch_size=int(inp.getWithDefault("training.batch_size", 64)),
        lr=float(inp.getWithDefault("training.lr", 1e-3)),
        beta1=float(inp.getWithDefault("training.beta1", 0.9)),
        beta2=float(inp.getWithDefault("training.beta2", 0.999)),
        eps=float(inp.getWithDefault("training.eps", 1e-8)),
        rot=inp.getboolean("training.rot", False),
        hct=hct_config(inp),
    )


@_checked
def model_kwargs(inp):
    return {
        "hidden": tuple(int(h) for h in inp.getWithDefault("model.hidden", [128, 128, 128])),
        "embed_dim": int(inp.getWithDefault("model.embed_dim", 64)),
        "rotation_head": inp.getboolean("model.rotation_head", False),
    }


@_checked
def synthetic_dataset(inp, prefix="dataset.synthetic"):
    kind = inp.getWithDefault(prefix + ".kind", "gaussian")
    rng = RngStream(int(inp.getWithDefault(prefix + ".seed", 0)))
    n_classes = int(inp.getWithDefault(prefix + ".n_classes", 20))
    per_class = int(inp.getWithDefault(prefix + ".per_class", 60))
    if kind == "gaussian":
        return synth_gaussian_dataset(
            rng,
            n_classes,
            per_class,
            int(inp.getWithDefault(prefix + ".dim", 16)),
            spread=float(inp.getWithDefault(prefix + ".spread", 1.0)),
            noise=float(inp.getWithDefault(prefix + ".noise", 0.3)),
            relu=inp.getboolean(prefix + ".relu", False),
            offset=float(inp.getWithDefault(prefix + ".offset", 0.0)),
        )
    if kind == "image":
        return synth_image_dataset(
            rng,
            n_classes,
            per_class,
            size=int(inp.getWithDefault(prefix + ".size", 8)),
            noise=float(inp.getWithDefault(prefix + ".noise", 0.1)),
        )
    raise ConfigError(f"Unknown synthetic dataset kind {kind!r}")


@_checked
def dataset(inp, key="dataset.features"):
    """The feature set named by ``key``, or the synthetic one if configured."""
    if key in inp:
        log.info("Reading feature set %s", inp.get(key))
        return load_feature_set(inp.get(key))
    if "dataset.synthetic" in inp:
        return synthetic_dataset(inp)
    raise ConfigError(f"Configuration needs {key} or dataset.synthetic")
