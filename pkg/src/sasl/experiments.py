"""Experiment configuration, stage runners and A/B comparison cells."""
from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional


from .data import DataSplit, SyntheticTask, generate_synthetic, load_idx, load_image_dir, normalize_split, \
    split_dataset
from .model import Model, NetworkSpec, build_plain_cnn, build_residual_cnn
from .pruner import PruneConfig, PruneReport, run_pipeline
from .trainer import HierarchyScheme, TrainConfig, TrainResult, sparsified_fraction, train_baseline, train_normal, train_sasl


class ConfigError(ValueError):
    pass


# The plain network tolerates a stronger penalty than the residual one.
DEFAULT_BASE_LAMBDA = {"plain": 1e-4, "residual": 3e-5}


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | image-dir | idx
    class_count: int = 8
    image_size: int = 24
    samples_per_class: int = 800
    test_per_class: int = 200
    noise: float = 1.5
    seed: int = 0
    path: Optional[str] = None  # image-dir root
    images: Optional[str] = None  # idx image file
    labels: Optional[str] = None  # idx label file
    test_fraction: float = 0.2

    def task(self) -> SyntheticTask:
        return SyntheticTask(self.class_count, self.image_size, self.samples_per_class, self.test_per_class,
                             self.noise, self.seed)


@dataclass
class ModelConfig:
    family: str = "plain"  # plain | residual
    plain: list = field(default_factory=lambda: [16, [16, True], 32, [32, True], 64, [64, True]])
    residual: list = field(default_factory=lambda: [[16, 2, 1, False], [32, 2, 2, True], [64, 2, 2, True]])
    hidden: list = field(default_factory=list)
    gamma_init: float = 1.0
    seed: int = 0


@dataclass
class SparsityConfig:
    scheme: str = "adaptive"  # adaptive | indiscriminate | none
    k: int = 5
    base_lambda: Optional[float] = None  # None: the model family's default
    aggressive: bool = False  # the slightly stronger variant scales base_lambda by aggressive_factor
    aggressive_factor: float = 1.5
    guider: str = "saliency"
    mass_matched: bool = True  # indiscriminate arms use the adaptive scheme's total penalty
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: bool = False
    seed: int = 0

    @property
    def lam(self) -> float:
        return self.base_lambda * (self.aggressive_factor if self.aggressive else 1.0)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                           weight_decay=self.weight_decay, augment=self.augment, seed=self.seed)

    def hierarchy(self) -> HierarchyScheme:
        if self.mass_matched:
            return HierarchyScheme.mass_matched(self.k, self.lam)
        return HierarchyScheme.staircase(self.k, self.lam)

    def indiscriminate_lambda(self) -> float:
        return self.lam * HierarchyScheme.mass_matched(1).multipliers[0] if self.mass_matched else self.lam


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.sparsity.base_lambda is None:
            if self.model.family not in DEFAULT_BASE_LAMBDA:
                raise ConfigError(f"unknown model family {self.model.family!r}")
            self.sparsity.base_lambda = DEFAULT_BASE_LAMBDA[self.model.family]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_dict(cls, d)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment under one run seed (data generation keeps its own seed)."""
        return replace(self, model=replace(self.model, seed=seed), sparsity=replace(self.sparsity, seed=seed),
                       prune=replace(self.prune, seed=seed))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        text = self.to_dict()
        if path.suffix in (".yaml", ".yml"):
            import yaml
            path.write_text(yaml.safe_dump(text, sort_keys=True))
        else:
            path.write_text(json.dumps(text, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        raw = path.read_text()
        if path.suffix in (".yaml", ".yml"):
            import yaml
            d = yaml.safe_load(raw) or {}
        else:
            d = json.loads(raw)
        return cls.from_dict(d)


def _from_dict(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = getattr(cls(), name) if _has_defaults(cls) else None
        kwargs[name] = _from_dict(type(default), value) if is_dataclass(default) else value
    return cls(**kwargs)


def _has_defaults(cls) -> bool:
    try:
        cls()
        return True
    except TypeError:
        return False


def set_path(cfg: ExperimentConfig, dotted: str, value) -> None:
    """Assign ``value`` to a dotted field path such as ``sparsity.base_lambda``."""
    obj = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not hasattr(obj, p):
            raise ConfigError(f"unknown config section {p!r}")
        obj = getattr(obj, p)
    if not hasattr(obj, parts[-1]):
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(obj, parts[-1], value)


# ---------------------------------------------------------------------------
# stages


def load_data(cfg: DataConfig) -> DataSplit:
    """Training-split standardized data for the configured source."""
    if cfg.source == "synthetic":
        split = generate_synthetic(cfg.task())
    elif cfg.source == "image-dir":
        if not cfg.path:
            raise ConfigError("image-dir source needs data.path")
        split = split_dataset(load_image_dir(cfg.path), cfg.test_fraction, cfg.seed)
    elif cfg.source == "idx":
        if not (cfg.images and cfg.labels):
            raise ConfigError("idx source needs data.images and data.labels")
        split = split_dataset(load_idx(cfg.images, cfg.labels), cfg.test_fraction, cfg.seed)
    else:
        raise ConfigError(f"unknown data source {cfg.source!r}")
    return normalize_split(split)


def build_spec(cfg: ModelConfig, input_shape, class_count: int) -> NetworkSpec:
    if cfg.family == "plain":
        return build_plain_cnn([c if isinstance(c, int) else tuple(c) for c in cfg.plain], input_shape,
                               class_count, cfg.hidden)
    if cfg.family == "residual":
        return build_residual_cnn([tuple(s) for s in cfg.residual], input_shape, class_count)
    raise ConfigError(f"unknown model family {cfg.family!r}")


def init_model(cfg: ExperimentConfig, data: DataSplit) -> Model:
    spec = build_spec(cfg.model, data.train.input_shape, data.train.class_count)
    return Model.init(spec, cfg.model.seed, cfg.model.gamma_init)


def sparsify(cfg: ExperimentConfig, model: Model, data: DataSplit, eval_each_epoch: bool = False) -> TrainResult:
    """Run the configured sparsity-learning scheme on ``model`` in place."""
    s = cfg.sparsity
    tc = s.train_config()
    ev = data.test if eval_each_epoch else None
    if s.scheme == "adaptive":
        return train_sasl(model, data.train, s.hierarchy(), tc, guider=s.guider, eval_data=ev)
    if s.scheme == "indiscriminate":
        return train_baseline(model, data.train, s.indiscriminate_lambda(), tc, eval_data=ev)
    if s.scheme == "none":
        return train_normal(model, data.train, tc, eval_data=ev)
    raise ConfigError(f"unknown sparsity scheme {s.scheme!r}")


# ---------------------------------------------------------------------------
# comparison cells


REGULARIZATION_ARMS = {
    "Tradition": {"scheme": "indiscriminate"},
    "Importance": {"scheme": "adaptive", "guider": "importance"},
    "Resource": {"scheme": "adaptive", "guider": "resource"},
    "Saliency": {"scheme": "adaptive", "guider": "saliency"},
}
CRITERION_ARMS = {"Energy": "energy", "Importance": "importance", "Resource": "resource", "Saliency": "saliency"}


@dataclass
class CellResult:
    arm: str
    seed: int
    base_accuracy: float  # unpruned model fed to the pipeline
    final_accuracy: float
    flops_reduction: float
    params_reduction: float
    sparsified_fraction: float
    estimation_samples: list = field(default_factory=list)


def prune_cell(cfg: ExperimentConfig, sparse: Model, data: DataSplit, arm: str,
               prune_overrides: Optional[dict] = None) -> tuple[CellResult, PruneReport]:
    pc = replace(cfg.prune, **(prune_overrides or {}))
    frac = sparsified_fraction(sparse)
    _, report = run_pipeline(sparse.copy(), data, pc, cfg.sparsity.train_config())
    return CellResult(arm, cfg.prune.seed, report.base_accuracy, report.final_accuracy, report.flops_reduction,
                      report.params_reduction, frac, [it.estimation_samples for it in report.iterations]), report


def sparsify_cell(cfg: ExperimentConfig, data: DataSplit, overrides: dict) -> Model:
    run = replace(cfg, sparsity=replace(cfg.sparsity, **overrides))
    model = init_model(run, data)
    sparsify(run, model, data)
    return model


def summarize(cells: list[CellResult], reference_accuracy: Optional[dict] = None) -> list[dict]:
    """One row per arm: means and standard deviations over seeds.

    ACC drop is measured against ``reference_accuracy[seed]`` (an unpruned,
    normally trained model) when given, else against each cell's own input.
    """
    rows = []
    for arm in dict.fromkeys(c.arm for c in cells):
        cs = [c for c in cells if c.arm == arm]
        ref = [reference_accuracy[c.seed] if reference_accuracy else c.base_accuracy for c in cs]
        drops = [100.0 * (r - c.final_accuracy) for r, c in zip(ref, cs)]
        acc = [100.0 * c.final_accuracy for c in cs]
        fl = [c.flops_reduction for c in cs]
        rows.append({
            "arm": arm,
            "seeds": len(cs),
            "flops_reduction_pct": statistics.fmean(fl),
            "flops_reduction_std": statistics.pstdev(fl),
            "accuracy_pct": statistics.fmean(acc),
            "accuracy_std": statistics.pstdev(acc),
            "accuracy_drop_pct": statistics.fmean(drops),
            "accuracy_drop_std": statistics.pstdev(drops),
            "sparsified_fraction": statistics.fmean(c.sparsified_fraction for c in cs),
        })
    return rows


def k_sweep_rows(base_lambda: float = 1e-4, ks=range(1, 9)) -> list[dict]:
    """Per class count: multipliers, r_k and the expected-mass identity check."""
    ref = HierarchyScheme.staircase(5, base_lambda).expected_mass()
    rows = []
    for k in ks:
        s = HierarchyScheme.mass_matched(k, base_lambda)
        mass = s.expected_mass()
        rows.append({
            "k": k,
            "r_k": s.r_k,
            "multipliers": " ".join(repr(m) for m in s.multipliers),
            "expected_mass": mass,
            "mass_error": abs(mass - ref),
            "mass_matches": abs(mass - ref) <= 1e-12,
        })
    return rows
