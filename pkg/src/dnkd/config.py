"""Experiment configuration and its plain-text ``key = value`` file form.

Sections map onto the dataclasses below. Unknown sections or keys are
errors, and ``dump`` writes every resolved field so a run directory holds
the exact configuration that produced it.
"""

from configparser import ConfigParser, Error as ParserError
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .corpus import SyntheticTaskConfig
from .distill import LossWeights
from .errors import ConfigError, DnkdError, MissingInput


@dataclass
class ArchConfig:
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 128


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    threads: int = 1


@dataclass
class RetrievalConfig:
    k: int = 8
    self_exclude: bool = False


@dataclass
class ExperimentConfig:
    name: str = "default"
    seeds: tuple = (1, 2, 3)
    # "independent" draws a fresh student init; "baseline" copies the
    # baseline checkpoint of the same seed.
    student_init: str = "independent"
    task: SyntheticTaskConfig = field(default_factory=SyntheticTaskConfig)
    model: ArchConfig = field(default_factory=ArchConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def with_seed(self, seed):
        return replace(self, seeds=(int(seed),))

    def with_loss(self, **kw):
        return replace(self, loss=replace(self.loss, **kw))

    def with_retrieval(self, **kw):
        return replace(self, retrieval=replace(self.retrieval, **kw))


SECTIONS = {
    "task": SyntheticTaskConfig,
    "model": ArchConfig,
    "loss": LossWeights,
    "retrieval": RetrievalConfig,
    "train": TrainConfig,
}
# accepted spelling for the reserved word
ALIASES = {"lambda": "lam"}


def _coerce(text, like, key):
    try:
        if isinstance(like, bool):
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(x) for x in text.replace(",", " ").split())
        return text.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse(text):
    parser = ConfigParser(default_section="__none__", interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except ParserError as exc:
        raise ConfigError(f"config parse error: {exc}".replace("\n", " ")) from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "experiment":
            cfg = _apply(cfg, items, "experiment", skip=set(SECTIONS))
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        sub = _apply(getattr(cfg, section), items, section)
        cfg = replace(cfg, **{section: sub})
    if cfg.student_init not in ("independent", "baseline"):
        raise ConfigError(f"student_init must be independent or baseline, got {cfg.student_init!r}")
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    return cfg


def _apply(obj, items, section, skip=()):
    known = {f.name: f for f in fields(obj) if f.name not in skip}
    updates = {}
    for key, raw in items.items():
        name = ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        updates[name] = _coerce(raw, getattr(obj, name), f"{section}.{key}")
    try:
        return replace(obj, **updates)
    except DnkdError as exc:
        raise ConfigError(f"invalid [{section}]: {exc}") from None


def load(path):
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing config file: {path}")
    return parse(path.read_text())


def _fmt(value):
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "on" if value else "off"
    return repr(value) if isinstance(value, float) else str(value)


def dump(cfg):
    lines = ["[experiment]"]
    for f in fields(cfg):
        if f.name not in SECTIONS:
            lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    for section in SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        sub = getattr(cfg, section)
        for f in fields(sub):
            key = "lambda" if f.name == "lam" else f.name
            lines.append(f"{key} = {_fmt(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"
