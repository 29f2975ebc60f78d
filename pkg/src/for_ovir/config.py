"""Run configuration: a line-oriented ``section.key = value`` file.

Defaults follow the published hyperparameter table (25 epochs, lr 1e-5 dropped
x0.1 at epoch 15, batch 64, weight decay 1e-4, dropout 0.1, 50 queries, 2
decoder layers, 50 clusters, pseudo threshold 5e-4, gamma 1/1, no-object
weight 0.1). Feature sizes are desk-scale.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .heads import SumClipConfig, parse_freeze
from .kmeans import ClusterConfig
from .matching_loss import LossConfig
from .numerics import ConfigError
from .training.synth import SynthSpec


@dataclass
class HeadSection:
    n_queries: int = 50
    decoder_layers: int = 2
    decoder_heads: int = 8
    attn_heads: int = 1
    ffn_hidden: int = 0
    dropout: float = 0.1
    bias: bool = True
    pos_embed: bool = False
    mean_token: bool = False
    freeze: str = "q,k,v,c"


@dataclass
class ClusterSection:
    n_clusters: int = 50
    max_iters: int = 100
    init: str = "kmeans++"
    seed: int = 0


@dataclass
class PseudoSection:
    threshold: float = 5e-4
    temperature: float = 1.0
    exclude_novel: bool = False


@dataclass
class LossSection:
    gamma_sup: float = 1.0
    gamma_pse: float = 1.0
    no_object_weight: float = 0.1
    temperature: float = 0.01
    pseudo_negatives: int = 64
    full_vocab: bool = False


@dataclass
class TrainSection:
    lr: float = 1e-5
    epochs: int = 25
    lr_drop_epoch: int = 15
    lr_drop_factor: float = 0.1
    batch_size: int = 64
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    labeled_fraction: float = 1.0
    fold_seed: int = 0
    min_negatives: int = 50
    precision: str = "float32"


@dataclass
class EvalSection:
    k: int = 50


SECTIONS = {
    "data": SynthSpec,
    "head": HeadSection,
    "cluster": ClusterSection,
    "pseudo": PseudoSection,
    "loss": LossSection,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    data: SynthSpec = field(default_factory=SynthSpec)
    head: HeadSection = field(default_factory=HeadSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    pseudo: PseudoSection = field(default_factory=PseudoSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # derived typed configs ------------------------------------------------

    def head_config(self) -> SumClipConfig:
        d, h = self.data, self.head
        return SumClipConfig(
            feature_dim=d.feature_dim, query_dim=d.query_dim, value_dim=d.value_dim, embed_dim=d.embed_dim,
            n_queries=h.n_queries, decoder_layers=h.decoder_layers, decoder_heads=h.decoder_heads,
            attn_heads=h.attn_heads, ffn_hidden=h.ffn_hidden, dropout=h.dropout, bias=h.bias,
            pos_embed=h.pos_embed, n_tokens=d.n_tokens)

    def cluster_config(self) -> ClusterConfig:
        c = self.cluster
        return ClusterConfig(c.n_clusters, c.max_iters, c.init, c.seed)

    def loss_config(self) -> LossConfig:
        return LossConfig(**dataclasses.asdict(self.loss))

    # validation / serialization -------------------------------------------

    def validate(self) -> "RunConfig":
        self.data.validate()
        self.head_config().validate()
        self.loss_config().validate()
        parse_freeze(self.head.freeze)
        self.cluster_config()
        t = self.train
        if self.cluster.n_clusters > self.data.n_tokens:
            raise ConfigError(f"cluster.n_clusters ({self.cluster.n_clusters}) exceeds data.n_tokens ({self.data.n_tokens})")
        if not 0 <= t.lr_drop_epoch <= t.epochs:
            raise ConfigError("train.lr_drop_epoch must lie in [0, train.epochs]")
        if t.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if not 0.0 < t.labeled_fraction <= 1.0:
            raise ConfigError("train.labeled_fraction must lie in (0, 1]")
        if t.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if t.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if t.precision not in ("float32", "float64"):
            raise ConfigError("train.precision must be float32 or float64")
        if not 0.0 < self.pseudo.threshold <= 1.0:
            raise ConfigError("pseudo.threshold must lie in (0, 1]")
        if self.pseudo.temperature <= 0:
            raise ConfigError("pseudo.temperature must be positive")
        if self.eval.k < 1:
            raise ConfigError("eval.k must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_text(self) -> str:
        lines = []
        for name, sec in self.to_dict().items():
            for key, value in sec.items():
                lines.append(f"{name}.{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **overrides) -> "RunConfig":
        """Copy with ``{"section.key": value}`` style overrides (use ``__`` for the dot in kwargs)."""
        return apply_overrides(self, {k.replace("__", "."): v for k, v in overrides.items()})


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    return repr(value)


def _coerce(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        if raw.startswith('"') and raw.endswith('"'):
            return json.loads(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def _field_types(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    sections = {name: dataclasses.asdict(getattr(cfg, name)) for name in SECTIONS}
    for dotted, value in overrides.items():
        if "." not in dotted:
            raise ConfigError(f"{dotted}: expected section.key")
        sec, key = dotted.split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(f"{dotted}: unknown section {sec!r}")
        types = _field_types(SECTIONS[sec])
        if key not in types:
            raise ConfigError(f"{dotted}: unknown key {key!r} in section {sec!r}")
        if isinstance(value, str):
            value = _coerce(value, types[key], dotted)
        sections[sec][key] = value
    return RunConfig(**{name: SECTIONS[name](**vals) for name, vals in sections.items()})


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        overrides[key] = value
    try:
        return apply_overrides(base or RunConfig(), overrides).validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, env: bool = True) -> RunConfig:
    text = Path(path).read_text() if path else ""
    cfg = parse_config(text)
    if env and os.environ.get("FOR_SEED"):
        cfg = apply_overrides(cfg, {"train.seed": os.environ["FOR_SEED"]}).validate()
    return cfg


def reference_profile() -> RunConfig:
    """The fixed desk-scale profile used by the acceptance suite."""
    path = Path(__file__).with_name("profiles") / "reference.cfg"
    return parse_config(path.read_text())


def config_from_dict(data: dict) -> RunConfig:
    """Inverse of ``RunConfig.to_dict``; unknown sections or keys are rejected."""
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    try:
        return RunConfig(**{name: SECTIONS[name](**data.get(name, {})) for name in SECTIONS})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
