"""Run configuration: INI files with ``[section]`` blocks, overridable as ``section.key=value``."""

from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, fields

from crerank.corpus import RECIPES, PreprocessConfig
from crerank.errors import ConfigError
from crerank.reranker import RerankerConfig
from crerank.stampgen import StampConfig
from crerank.training import TrainConfig


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 0  # 0 leaves the BLAS default
    out: str = "out"


@dataclass
class DataSection:
    recipe: str = "generic"
    path: str = ""
    min_item_support: int = -1  # -1 uses the recipe's value
    test_window_days: float = -1.0
    train_fraction: float = -1.0
    max_len: int = 0


@dataclass
class GeneratorSection:
    kind: str = "cf"  # cf | stamp | stmo
    d: int = 100
    alpha: float = 0.5
    table_width: int = 500
    attention_normalized: bool = False
    emb_std: float = 0.002
    weight_std: float = 0.05
    lr: float = 0.001
    batch: int = 512
    epochs: int = 5
    eval_every: int = 1000
    val_fraction: float = 0.05
    clip: float = 0.0


@dataclass
class RerankerSection:
    k: int = 100
    d: int = 100
    d_cre: int = 0  # 0 means d
    cre_enabled: bool = True
    cre_stride: int = 1
    attention_normalized: bool = False
    emb_std: float = 0.002
    weight_std: float = 0.05
    select_on: str = "composed"
    lr: float = 0.001
    batch: int = 512
    epochs: int = 5
    eval_every: int = 1000
    val_fraction: float = 0.05
    clip: float = 0.0


@dataclass
class EvalSection:
    N: int = 20
    ks: str = "1,5,10,20,50,100"


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "generator": GeneratorSection,
    "reranker": RerankerSection,
    "eval": EvalSection,
}


def _coerce(kind, raw: str, key: str):
    try:
        if kind in (bool, "bool"):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    reranker: RerankerSection = field(default_factory=RerankerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    explicit: set = field(default_factory=set, compare=False, repr=False)

    def set(self, dotted: str, raw: str) -> None:
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key {dotted!r}")
        obj = getattr(self, section)
        types = {f.name: f.type for f in fields(obj)}
        if key not in types:
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(obj, key, _coerce(types[key], str(raw), dotted))
        self.explicit.add(section)

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls()
        if path:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                with open(path, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from None
            for section in parser.sections():
                for key, value in parser.items(section):
                    cfg.set(f"{section}.{key}", value)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            cfg.set(key.strip(), value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        r, g = self.reranker, self.generator
        if r.k < 1:
            raise ConfigError("reranker.k must be >= 1")
        if min(r.d, g.d) < 1 or r.d_cre < 0 or r.cre_stride < 1:
            raise ConfigError("dimensions must be >= 1")
        if min(r.lr, g.lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if min(r.batch, g.batch) < 1 or min(r.epochs, g.epochs) < 0:
            raise ConfigError("batch must be >= 1 and epochs >= 0")
        if not 0.0 <= g.alpha <= 1.0:
            raise ConfigError("generator.alpha must lie in [0, 1]")
        if g.kind not in ("cf", "stamp", "stmo"):
            raise ConfigError(f"generator.kind must be cf, stamp or stmo, got {g.kind!r}")
        if r.select_on not in ("composed", "candidates"):
            raise ConfigError("reranker.select_on must be composed or candidates")
        if self.data.recipe not in RECIPES:
            raise ConfigError(f"data.recipe must be one of {sorted(RECIPES)}")
        if self.eval.N < 1:
            raise ConfigError("eval.N must be >= 1")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for name in SECTIONS:
            parser[name] = {k: str(v) for k, v in asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def section_dict(self, name: str) -> dict:
        return asdict(getattr(self, name))

    def section_hash(self, name: str) -> str:
        return config_hash(self.section_dict(name))

    def ks(self) -> list[int]:
        try:
            return [int(k) for k in self.eval.ks.split(",") if k.strip()]
        except ValueError:
            raise ConfigError(f"eval.ks must be comma-separated integers, got {self.eval.ks!r}") from None

    def preprocess_config(self) -> PreprocessConfig:
        base = RECIPES[self.data.recipe]
        d = self.data
        return PreprocessConfig(
            min_item_support=d.min_item_support if d.min_item_support >= 0 else base.min_item_support,
            test_window_days=d.test_window_days if d.test_window_days >= 0 else base.test_window_days,
            train_fraction=d.train_fraction if d.train_fraction >= 0 else base.train_fraction,
            max_len=d.max_len,
        )

    def _train(self, s) -> TrainConfig:
        return TrainConfig(lr=s.lr, batch=s.batch, epochs=s.epochs, eval_every=s.eval_every,
                           val_fraction=s.val_fraction, clip=s.clip, seed=self.run.seed)

    def stamp_config(self) -> StampConfig:
        g = self.generator
        return StampConfig(kind=g.kind, d=g.d, attention_normalized=g.attention_normalized,
                           emb_std=g.emb_std, weight_std=g.weight_std, train=self._train(g))

    def reranker_config(self) -> RerankerConfig:
        r = self.reranker
        return RerankerConfig(k=r.k, d=r.d, d_cre=r.d_cre, cre_enabled=r.cre_enabled,
                              cre_stride=r.cre_stride, attention_normalized=r.attention_normalized,
                              emb_std=r.emb_std, weight_std=r.weight_std, select_on=r.select_on,
                              train=self._train(r))


def config_hash(section: dict) -> str:
    return hashlib.sha256(json.dumps(section, sort_keys=True).encode()).hexdigest()
