"""Key-value run configuration.

Grammar: one ``key = value`` per line; ``#`` starts a comment; blank lines
are ignored. Recognised keys::

    manifest        dataset manifest path (relative to the config file)
    group           c2 | c4 | c8 | d2 | d4 | d8
    with_cars       0 | 1
    width_scale     rational, e.g. 1/4
    encoder_widths, bottleneck_width, decoder_widths
    seed            model init and shuffling seed
    learning_rate, batch_size, max_epochs, lr_decay, patience
    loss_mask_buildings, eval_mask_buildings   0 | 1

Precedence is command-line flags > file > defaults.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


MODEL_KEYS = ("group", "with_cars", "width_scale", "encoder_widths", "bottleneck_width", "decoder_widths", "kernel_size")
TRAIN_KEYS = tuple(
    f.name for f in fields(TrainConfig) if f.name not in ("seed",)
)
KNOWN_KEYS = set(MODEL_KEYS) | set(TRAIN_KEYS) | {"seed", "manifest"}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def dump_kv(d: dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def _bool(v: str) -> bool:
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    manifest: Path | None
    out_dir: Path | None = None

    @classmethod
    def resolve(cls, file_values: dict[str, str], overrides: dict[str, object], base: Path | None = None) -> "RunConfig":
        unknown = set(file_values) - KNOWN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        vals: dict[str, object] = dict(file_values)
        vals.update({k: v for k, v in overrides.items() if v is not None})
        try:
            seed = int(vals.get("seed", 0))
            mdict = {k: str(vals[k]) for k in MODEL_KEYS if k in vals}
            mdict["seed"] = str(seed)
            if "with_cars" in mdict:
                mdict["with_cars"] = str(int(_bool(mdict["with_cars"])))
            model = ModelConfig.from_dict(mdict)
            tkw = {}
            for f in fields(TrainConfig):
                if f.name in vals and f.name != "seed":
                    v = vals[f.name]
                    tkw[f.name] = _bool(v) if f.type in ("bool", bool) else type(f.default)(v)
            train = TrainConfig(seed=seed, **tkw)
        except (ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e
        manifest = vals.get("manifest")
        if manifest is not None:
            manifest = Path(str(manifest))
            if base is not None and overrides.get("manifest") is None and not manifest.is_absolute():
                manifest = base / manifest
        return cls(model, train, manifest)

    def to_dict(self) -> dict[str, str]:
        d = {"manifest": str(self.manifest) if self.manifest else ""}
        d.update({k: v for k, v in self.model.to_dict().items()})
        for f in fields(TrainConfig):
            d[f.name] = str(getattr(self.train, f.name))
        return d
