import hashlib
import itertools
import json
import os
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence


config_encoding = "utf-8"
CACHE_DIR_ENVVAR = "MOLFUSION_CACHE_DIR"

VIEWS = ("2d", "3d", "fp", "sm")
LEARNING_RATE_GRID = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)
DROPOUT_GRID = (0.0, 0.3, 0.5)
ENCODER_PREFIXES = ("encoder.gin", "encoder.schnet", "encoder.fp", "encoder.sm")

FEATURIZER_KEYS = ("featurize.fp_bits", "featurize.fp_radius", "featurize.vocab_size")
ARCHITECTURE_KEYS = (
    "model.dim", "featurize.fp_bits", "featurize.vocab_size",
    "encoder.gin.layers", "encoder.schnet.hidden", "encoder.schnet.layers",
    "encoder.schnet.rbf", "encoder.fp.variant", "encoder.fp.embed_dim", "encoder.fp.heads",
    "encoder.sm.dim", "encoder.sm.layers", "encoder.sm.heads", "encoder.sm.max_len",
)


class ConfigError(Exception):
    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("Invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


def get_cache_root() -> Path:
    for envvar, subdir in [
        (CACHE_DIR_ENVVAR, ""),
        ("XDG_CACHE_HOME", "molfusion"),
        ("HOME", ".cache/molfusion"),
    ]:
        basedir = os.getenv(envvar, None)
        if basedir is None:
            continue
        return Path(basedir, subdir) if subdir else Path(basedir)

    raise FileNotFoundError("Could not determine cache directory")


def setting(key: str, default, choices=None, positive: bool = False, kind=None):
    metadata = {"key": key, "choices": choices, "positive": positive, "kind": kind or type(default)}
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: type(default)(default), metadata=metadata)
    return field(default=default, metadata=metadata)


@dataclass
class RunConfig:
    dim: int = setting("model.dim", 300, positive=True)
    views: list = setting("model.views", list(VIEWS))

    fp_bits: int = setting("featurize.fp_bits", 1024, positive=True)
    fp_radius: int = setting("featurize.fp_radius", 2)
    vocab_size: int = setting("featurize.vocab_size", 512, positive=True)
    max_failure_rate: float = setting("featurize.max_failure_rate", 0.1)
    audit_samples: int = setting("featurize.audit_samples", 8)

    gin_layers: int = setting("encoder.gin.layers", 5, positive=True)
    gin_lr: float = setting("encoder.gin.lr", 1e-3, positive=True)
    gin_dropout: float = setting("encoder.gin.dropout", 0.0)

    schnet_hidden: int = setting("encoder.schnet.hidden", 128, positive=True)
    schnet_layers: int = setting("encoder.schnet.layers", 6, positive=True)
    schnet_rbf: int = setting("encoder.schnet.rbf", 50, positive=True)
    schnet_rbf_max: float = setting("encoder.schnet.rbf_max", 10.0, positive=True)
    schnet_gamma: float = setting("encoder.schnet.gamma", 10.0, positive=True)
    schnet_cutoff: Optional[float] = setting("encoder.schnet.cutoff", None, kind=float)
    schnet_lr: float = setting("encoder.schnet.lr", 1e-3, positive=True)
    schnet_dropout: float = setting("encoder.schnet.dropout", 0.0)

    fp_variant: str = setting("encoder.fp.variant", "attention", choices=("attention", "mlp"))
    fp_embed_dim: int = setting("encoder.fp.embed_dim", 64, positive=True)
    fp_heads: int = setting("encoder.fp.heads", 8, positive=True)
    fp_chunk: int = setting("encoder.fp.chunk", 16, positive=True)
    fp_lr: float = setting("encoder.fp.lr", 1e-3, positive=True)
    fp_dropout: float = setting("encoder.fp.dropout", 0.0)

    sm_dim: int = setting("encoder.sm.dim", 128, positive=True)
    sm_layers: int = setting("encoder.sm.layers", 2, positive=True)
    sm_heads: int = setting("encoder.sm.heads", 4, positive=True)
    sm_max_len: int = setting("encoder.sm.max_len", 128, positive=True)
    sm_frozen: bool = setting("encoder.sm.frozen", True)
    sm_lr: float = setting("encoder.sm.lr", 1e-3, positive=True)
    sm_dropout: float = setting("encoder.sm.dropout", 0.0)

    mlm_epochs: int = setting("mlm.epochs", 4)
    mlm_lr: float = setting("mlm.lr", 1e-4, positive=True)
    mlm_batch_size: int = setting("mlm.batch_size", 64, positive=True)
    mlm_mask_rate: float = setting("mlm.mask_rate", 0.15, positive=True)

    fusion_mode: str = setting("fusion.mode", "attention", choices=("attention", "max", "mean", "frozen"))
    fusion_lr: float = setting("fusion.lr", 1e-3, positive=True)

    tau: float = setting("objective.tau", 0.1, positive=True)
    critic_lr: float = setting("objective.lr", 1e-3, positive=True)

    batch_size: int = setting("train.batch_size", 256, positive=True)
    epochs: int = setting("train.epochs", 100)
    seed: int = setting("train.seed", 0)
    threads: int = setting("train.threads", 1, positive=True)
    weight_decay: float = setting("train.weight_decay", 0.0)

    task: str = setting("finetune.task", "classify", choices=("classify", "regress"))
    finetune_epochs: int = setting("finetune.epochs", 100)
    finetune_lr_scale: float = setting("finetune.lr_scale", 0.1, positive=True)
    head_lr: float = setting("finetune.head_lr", 1e-3, positive=True)
    finetune_seeds: list = setting("finetune.seeds", [0, 1, 2])
    labels: list = setting("finetune.labels", [])

    split_method: str = setting("split.method", "scaffold", choices=("scaffold", "random"))
    split_ratios: list = setting("split.ratios", [0.8, 0.1, 0.1])
    split_seed: int = setting("split.seed", 0)

    probe_seed: int = setting("case_study.seed", 0)
    chirality_label: str = setting("case_study.chirality_label", "chirality")

    pretrain_csv: str = setting("pretrain.csv", "")
    pretrain_conformer_dir: str = setting("pretrain.conformer_dir", "")
    finetune_csv: str = setting("finetune.csv", "")
    finetune_conformer_dir: str = setting("finetune.conformer_dir", "")
    vocab_path: str = setting("data.vocab", "vocab.json")
    checkpoint: str = setting("run.checkpoint", "")
    run_dir: str = setting("run.dir", "runs")

    def learning_rates(self) -> Dict[str, float]:
        return {
            "2d": self.gin_lr,
            "3d": self.schnet_lr,
            "fp": self.fp_lr,
            "sm": self.sm_lr,
            "fusion": self.fusion_lr,
            "critic": self.critic_lr,
        }

    def to_dict(self) -> Dict[str, object]:
        values = asdict(self)
        return {config_key(name): values[name] for name in dataclass_fieldnames(RunConfig)}

    def subset(self, keys) -> Dict[str, object]:
        everything = self.to_dict()
        return {key: everything[key] for key in keys}


def dataclass_fieldnames(dataclass: type) -> List[str]:
    return tuple(dataclass.__dataclass_fields__.keys())


def config_key(fieldname: str) -> str:
    return RunConfig.__dataclass_fields__[fieldname].metadata["key"]


def key_to_field() -> Dict[str, str]:
    return {f.metadata["key"]: f.name for f in fields(RunConfig)}


def stable_hash(content: Dict[str, object]) -> str:
    payload = json.dumps(content, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode(config_encoding)).hexdigest()


def config_hash(config: RunConfig) -> str:
    return stable_hash(config.to_dict())


def featurizer_hash(config: RunConfig, vocab: Optional[Dict[str, object]] = None) -> str:
    """Hash of every setting that changes cached views; ``vocab`` is the BPE vocabulary as a dict."""
    content = config.subset(FEATURIZER_KEYS)
    if vocab is not None:
        content["vocab"] = stable_hash(vocab)
    return stable_hash(content)


def architecture_hash(config: RunConfig) -> str:
    return stable_hash(config.subset(ARCHITECTURE_KEYS))


def grid_overrides(learning_rates: Sequence[float] = LEARNING_RATE_GRID,
                   dropouts: Sequence[float] = DROPOUT_GRID) -> List[Dict[str, object]]:
    """Settings of every (learning rate, dropout) pair; all encoders and the task head share them."""
    grid = []
    for lr, dropout in itertools.product(learning_rates, dropouts):
        overrides: Dict[str, object] = {"finetune.head_lr": lr}
        for prefix in ENCODER_PREFIXES:
            overrides[f"{prefix}.lr"] = lr
            overrides[f"{prefix}.dropout"] = dropout
        grid.append(overrides)
    return grid


def with_overrides(config: RunConfig, overrides: Dict[str, object]) -> RunConfig:
    return config_from_dict({**config.to_dict(), **overrides})


def check_value(key: str, value, metadata) -> List[str]:
    kind = metadata["kind"]
    problems = []
    if value is None:
        if kind is float and key == "encoder.schnet.cutoff":
            return problems
        return [f"{key}: must not be null"]
    if kind is bool:
        if not isinstance(value, bool):
            problems.append(f"{key}: expected true/false, got {value!r}")
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{key}: expected an integer, got {value!r}")
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{key}: expected a number, got {value!r}")
    elif not isinstance(value, kind):
        problems.append(f"{key}: expected {kind.__name__}, got {value!r}")
    if problems:
        return problems
    if metadata["choices"] is not None and value not in metadata["choices"]:
        problems.append(f"{key}: {value!r} is not one of {', '.join(metadata['choices'])}")
    if metadata["positive"] and value <= 0:
        problems.append(f"{key}: must be > 0, got {value!r}")
    return problems


def validate(config: RunConfig) -> List[str]:
    problems = []
    for f in fields(RunConfig):
        problems.extend(check_value(f.metadata["key"], getattr(config, f.name), f.metadata))
    if problems:
        return problems
    unknown_views = [view for view in config.views if view not in VIEWS]
    if unknown_views:
        problems.append(f"model.views: unknown views {unknown_views}, expected a subset of {list(VIEWS)}")
    if not config.views:
        problems.append("model.views: at least one view is required")
    if len(config.split_ratios) != 3 or abs(sum(config.split_ratios) - 1.0) > 1e-6 \
            or any(ratio < 0 for ratio in config.split_ratios):
        problems.append(f"split.ratios: expected three non-negative ratios summing to 1, got {config.split_ratios}")
    if config.fp_bits & (config.fp_bits - 1):
        problems.append(f"featurize.fp_bits: must be a power of two, got {config.fp_bits}")
    if config.fp_embed_dim % config.fp_heads:
        problems.append("encoder.fp.embed_dim: must be divisible by encoder.fp.heads")
    if config.sm_dim % config.sm_heads:
        problems.append("encoder.sm.dim: must be divisible by encoder.sm.heads")
    if not 0 <= config.max_failure_rate <= 1:
        problems.append("featurize.max_failure_rate: must be within [0, 1]")
    for key, value in [("encoder.gin.dropout", config.gin_dropout),
                       ("encoder.schnet.dropout", config.schnet_dropout),
                       ("encoder.fp.dropout", config.fp_dropout),
                       ("encoder.sm.dropout", config.sm_dropout)]:
        if not 0 <= value < 1:
            problems.append(f"{key}: must be within [0, 1)")
    for key, value in [("train.epochs", config.epochs), ("finetune.epochs", config.finetune_epochs),
                       ("mlm.epochs", config.mlm_epochs), ("featurize.fp_radius", config.fp_radius)]:
        if value < 0:
            problems.append(f"{key}: must be >= 0")
    if not config.finetune_seeds or not all(isinstance(seed, int) for seed in config.finetune_seeds):
        problems.append("finetune.seeds: expected a non-empty list of integers")
    return problems


class ConfigFile:
    def __init__(self, configfile: Optional[Path], dataclass: type = RunConfig):
        self.configfile = configfile
        self.dataclass = dataclass
        self.fieldnames = dataclass_fieldnames(dataclass)

    def read_config_dict(self):
        if self.configfile is None:
            return {}
        if self.configfile.exists() is False:
            raise ConfigError([f"config file {self.configfile} does not exist"])
        try:
            content = json.loads(self.configfile.read_text(encoding=config_encoding))
        except json.JSONDecodeError as error:
            raise ConfigError([f"{self.configfile}: not valid JSON ({error})"])
        if not isinstance(content, dict):
            raise ConfigError([f"{self.configfile}: expected a flat object of dotted keys"])
        return content

    def read_config(self, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
        config_dict = dict(self.read_config_dict())
        config_dict.update(overrides or {})
        return config_from_dict(config_dict)

    def write_config(self, dataobj: RunConfig, target: Optional[Path] = None):
        assert isinstance(dataobj, self.dataclass)
        target = self.configfile if target is None else target
        target.write_text(json.dumps(dataobj.to_dict(), indent=2, sort_keys=True),
                          encoding=config_encoding)


def config_from_dict(config_dict: Dict[str, object]) -> RunConfig:
    mapping = key_to_field()
    problems = [f"{key}: unknown setting" for key in config_dict if key not in mapping]
    field_values = {mapping[key]: value for key, value in config_dict.items() if key in mapping}
    config = RunConfig(**field_values)
    problems.extend(validate(config))
    if problems:
        raise ConfigError(problems)
    return config
