"""
Configurações tipadas do projeto (fantoma, modelo, treino, inferência, avaliação).

O arquivo de configuração é um JSON com campo ``version`` e uma seção por
dataclass. ``generate_config.py`` grava o template padrão.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
import typing
from typing import Optional, Tuple

from hetmt.errors import ConfigError, ModelConfigError

CONFIG_VERSION = 1

DEFAULT_CLASS_NAMES = ("background", "left_femur", "right_femur", "prostate", "rectum", "bladder")

# Variantes de modelo: tarefas ativas, cabeças de variância, dropout e tronco reduzido.
VARIANTS = {
    "M1_reg": {"tasks": ("reg",), "noise": "none", "dropout": False, "baseline": True},
    "M1_seg": {"tasks": ("seg",), "noise": "none", "dropout": False, "baseline": True},
    "M2a_reg": {"tasks": ("reg",), "noise": "none", "dropout": True, "baseline": True},
    "M2a_seg": {"tasks": ("seg",), "noise": "none", "dropout": True, "baseline": True},
    "M2b_reg": {"tasks": ("reg",), "noise": "hetero", "dropout": True, "baseline": True},
    "M2b_seg": {"tasks": ("seg",), "noise": "hetero", "dropout": True, "baseline": True},
    "M3_multitask_homo": {"tasks": ("reg", "seg"), "noise": "homo", "dropout": True, "baseline": False},
    "M4_multitask_hetero": {"tasks": ("reg", "seg"), "noise": "hetero", "dropout": True, "baseline": False},
}

# Aliases curtos aceitos na linha de comando.
VARIANT_ALIASES = {"M3": "M3_multitask_homo", "M4": "M4_multitask_hetero"}


def resolve_variant(name):
    name = VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigError(f"Variante desconhecida: {name} (opções: {', '.join(VARIANTS)})")
    return name


@dataclass
class OrganPrior:
    """Prior geométrico de um órgão elíptico, em frações do tamanho da imagem (linha, coluna)."""

    name: str
    label: int
    center_lo: Tuple[float, float]
    center_hi: Tuple[float, float]
    radius_lo: Tuple[float, float]
    radius_hi: Tuple[float, float]
    # Borda cortical (osso) dentro do rótulo.
    rim: bool = False


def default_organ_priors():
    return [
        OrganPrior("left_femur", 1, (0.50, 0.16), (0.58, 0.22), (0.09, 0.09), (0.12, 0.12), rim=True),
        OrganPrior("right_femur", 2, (0.50, 0.78), (0.58, 0.84), (0.09, 0.09), (0.12, 0.12), rim=True),
        OrganPrior("bladder", 5, (0.26, 0.46), (0.32, 0.54), (0.10, 0.12), (0.14, 0.17)),
        OrganPrior("prostate", 3, (0.53, 0.47), (0.57, 0.53), (0.06, 0.06), (0.08, 0.08)),
        OrganPrior("rectum", 4, (0.74, 0.47), (0.78, 0.53), (0.06, 0.07), (0.08, 0.10)),
    ]


@dataclass
class PhantomSpec:
    image_size: Tuple[int, ...] = (64, 64)
    spacing: Tuple[float, ...] = (1.0, 1.0)
    class_names: Tuple[str, ...] = DEFAULT_CLASS_NAMES
    # Médias por classe (pseudo-HU no CT); o MR não é monotônico no CT.
    ct_means: Tuple[float, ...] = (0.0, 600.0, 600.0, 40.0, -50.0, 10.0)
    mr_means: Tuple[float, ...] = (300.0, 700.0, 650.0, 450.0, 150.0, 900.0)
    rim_ct: float = 800.0
    rim_mr: float = 60.0
    rim_width: int = 2
    organs: list = field(default_factory=default_organ_priors)
    sigma_hi: float = 60.0
    sigma_lo: float = 10.0
    decay_length: float = 3.0
    texture_scale: float = 4.0
    texture_ct: float = 15.0
    texture_mr: float = 30.0
    max_retries: int = 50
    n_folds: int = 3
    test_fraction: float = 0.25
    seed: int = 0

    @property
    def num_classes(self):
        return len(self.class_names)

    def validate(self):
        if len(self.image_size) not in (2, 3) or min(self.image_size) < 1:
            raise ConfigError(f"image_size inválido: {self.image_size}")
        if len(self.spacing) != len(self.image_size) or min(self.spacing) <= 0:
            raise ConfigError(f"spacing deve ter um valor positivo por eixo: {self.spacing}")
        if not self.sigma_hi >= self.sigma_lo > 0:
            raise ConfigError(f"Exige-se sigma_hi >= sigma_lo > 0 (recebido {self.sigma_hi}, {self.sigma_lo})")
        if self.decay_length <= 0:
            raise ConfigError("decay_length deve ser positivo")
        if self.num_classes < 2:
            raise ConfigError("São necessárias ao menos duas classes")
        if len(self.ct_means) != self.num_classes or len(self.mr_means) != self.num_classes:
            raise ConfigError("Tabelas de intensidade não batem com o número de classes")
        if self.max_retries < 1 or self.n_folds < 1 or not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("max_retries, n_folds e test_fraction fora da faixa")
        for organ in self.organs:
            if not 1 <= organ.label < self.num_classes:
                raise ConfigError(f"Órgão '{organ.name}' com rótulo {organ.label} fora de [1, {self.num_classes - 1}]")
            for axis in range(2):
                lo = organ.center_lo[axis] - organ.radius_hi[axis]
                hi = organ.center_hi[axis] + organ.radius_hi[axis]
                if lo < 0.0 or hi > 1.0 or organ.radius_lo[axis] > organ.radius_hi[axis]:
                    raise ConfigError(f"Prior do órgão '{organ.name}' pode sair da imagem")
        return self


@dataclass
class ModelConfig:
    variant: str = "M4_multitask_hetero"
    trunk_features: Tuple[int, ...] = (16, 16, 32, 64, 128)
    dilations: Tuple[int, ...] = (1, 2, 4)
    repeats: int = 2
    kernel_size: int = 3
    branch_widths: Tuple[int, ...] = (32, 32, 32, 32)
    dropout_p: float = 0.5
    num_classes: int = 6
    in_channels: int = 1
    # None segue a variante; True/False força.
    dropout: Optional[bool] = None
    # "identity" só existe para testes de linearidade.
    activation: str = "relu"

    @property
    def spec(self):
        return VARIANTS[resolve_variant(self.variant)]

    @property
    def tasks(self):
        return self.spec["tasks"]

    @property
    def noise(self):
        return self.spec["noise"]

    @property
    def use_dropout(self):
        return self.spec["dropout"] if self.dropout is None else bool(self.dropout)

    @property
    def effective_trunk(self):
        """Larguras do tronco; as baselines usam metade de f_R."""
        if self.spec["baseline"]:
            return tuple(max(1, f // 2) for f in self.trunk_features)
        return tuple(self.trunk_features)

    def receptive_field(self):
        k = self.kernel_size
        rf = k
        for d in self.dilations:
            rf += 2 * self.repeats * (k - 1) * d
        return rf + (k - 1)

    def validate(self):
        try:
            self.variant = resolve_variant(self.variant)
        except ConfigError as e:
            raise ModelConfigError(str(e)) from e
        if len(self.trunk_features) != len(self.dilations) + 2:
            raise ModelConfigError("trunk_features deve ter len(dilations) + 2 entradas")
        if len(self.branch_widths) != 4:
            raise ModelConfigError("branch_widths deve listar as quatro camadas ocultas de cada ramo")
        if min(self.trunk_features) < 1 or min(self.branch_widths) < 1 or min(self.dilations) < 1:
            raise ModelConfigError("Larguras e dilatações devem ser positivas")
        if self.repeats < 1 or self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ModelConfigError("repeats >= 1 e kernel_size ímpar são obrigatórios")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ModelConfigError(f"dropout_p fora de [0, 1): {self.dropout_p}")
        if self.num_classes < 2:
            raise ModelConfigError("num_classes deve ser >= 2")
        if self.activation not in ("relu", "identity"):
            raise ModelConfigError(f"Ativação desconhecida: {self.activation}")
        return self


@dataclass
class TrainConfig:
    patch_size: int = 32
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iterations: int = 2000
    checkpoint_interval: int = 1000
    keep_checkpoints: int = 2
    log_every: int = 50
    mr_scale: float = 500.0
    ct_scale: float = 100.0
    seed: int = 0

    def validate(self):
        if self.patch_size < 1 or self.batch_size < 1:
            raise ConfigError("patch_size e batch_size devem ser positivos")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate não pode ser negativo")
        if self.max_iterations < 1 or self.checkpoint_interval < 1 or self.keep_checkpoints < 1:
            raise ConfigError("max_iterations, checkpoint_interval e keep_checkpoints devem ser >= 1")
        if self.mr_scale <= 0 or self.ct_scale <= 0:
            raise ConfigError("Escalas de intensidade devem ser positivas")
        return self


@dataclass
class InferenceConfig:
    T: int = 20
    n_checkpoints: int = 2
    stride: int = 16
    # None usa o patch_size do treino.
    patch_size: Optional[int] = None
    max_patch_batch: int = 64
    save_samples: bool = False
    seed: int = 0

    def validate(self):
        if self.T < 2:
            raise ConfigError("T deve ser >= 2")
        if self.n_checkpoints < 1 or self.T % self.n_checkpoints != 0:
            raise ConfigError(f"T={self.T} deve ser divisível por n_checkpoints={self.n_checkpoints}")
        if self.stride < 1 or self.max_patch_batch < 1:
            raise ConfigError("stride e max_patch_batch devem ser >= 1")
        return self


@dataclass
class EvalConfig:
    bins: int = 8
    bone_threshold_hu: float = 300.0
    variants: Tuple[str, ...] = ()
    plot: bool = False

    def validate(self):
        if self.bins < 2:
            raise ConfigError("bins deve ser >= 2")
        for v in self.variants:
            resolve_variant(v)
        return self


@dataclass
class PathsConfig:
    out: str = "runs/default"
    manifest: Optional[str] = None
    holdout_fold: Optional[int] = None

    def manifest_path(self):
        return Path(self.manifest) if self.manifest else Path(self.out) / "data" / "manifest.json"

    def validate(self):
        return self


SECTIONS = {
    "phantom": PhantomSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "inference": InferenceConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: Optional[int] = None
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"Versão de configuração não suportada: {self.version}")
        for name in SECTIONS:
            getattr(self, name).validate()
        if self.phantom.num_classes != self.model.num_classes:
            raise ConfigError("phantom.class_names e model.num_classes divergem")
        if self.train.keep_checkpoints < self.inference.n_checkpoints:
            raise ConfigError("train.keep_checkpoints deve ser >= inference.n_checkpoints")
        patch = self.inference.patch_size or self.train.patch_size
        if patch > min(self.phantom.image_size[-2:]) or self.train.patch_size > min(self.phantom.image_size[-2:]):
            raise ConfigError("patch_size maior que a fatia da imagem")
        return self

    def apply_seed(self, seed):
        """Propaga a seed global para as seções que sorteiam algo."""
        self.seed = seed
        self.phantom.seed = seed
        self.train.seed = seed
        self.inference.seed = seed
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        unknown = set(data) - set(SECTIONS) - {"version", "seed"}
        if unknown:
            raise ConfigError(f"Chaves desconhecidas na configuração: {sorted(unknown)}")
        cfg = cls(version=data.get("version", CONFIG_VERSION), seed=data.get("seed"))
        for name, section_cls in SECTIONS.items():
            if name in data:
                setattr(cfg, name, _section_from_dict(section_cls, data[name]))
        if cfg.seed is not None:
            cfg.apply_seed(cfg.seed)
        return cfg

    def set(self, dotted_key, value):
        """Override ``secao.chave=valor`` vindo da linha de comando."""
        if "." not in dotted_key:
            if dotted_key == "seed":
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ConfigError(f"seed deve ser inteiro (recebido {value!r})")
                return self.apply_seed(value)
            raise ConfigError(f"Override deve ter a forma secao.chave: {dotted_key}")
        section_name, key = dotted_key.split(".", 1)
        if section_name not in SECTIONS:
            raise ConfigError(f"Seção desconhecida: {section_name}")
        section = getattr(self, section_name)
        known = {f.name: f for f in dataclasses.fields(section)}
        if key not in known:
            raise ConfigError(f"Chave desconhecida: {dotted_key}")
        if key == "organs":
            try:
                value = _organs_from_list(value)
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(f"Órgão malformado em {dotted_key}: {e}") from e
        else:
            value = _coerce(known[key], value, dotted_key)
        setattr(section, key, value)
        return self


def _coerce(f, value, where):
    """Confere o valor contra a anotação do campo; tuplas aceitam listas JSON e float aceita int."""
    expected = f.type
    args = [a for a in typing.get_args(expected) if a is not type(None)]
    if typing.get_origin(expected) is typing.Union:
        if value is None:
            return None
        expected = args[0]
    origin = typing.get_origin(expected) or expected
    if origin is tuple and isinstance(value, (list, tuple)):
        return tuple(value)
    if origin is bool and isinstance(value, bool):
        return value
    if origin is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if origin is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if origin is str and isinstance(value, str):
        return value
    if origin not in (tuple, bool, int, float, str):
        return value
    raise ConfigError(f"{where}: esperado {getattr(origin, '__name__', origin)}, recebido {value!r}")


def _section_from_dict(section_cls, data):
    names = {f.name: f for f in dataclasses.fields(section_cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"Chaves desconhecidas em {section_cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key == "organs":
            try:
                value = _organs_from_list(value)
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(f"Órgão malformado em {section_cls.__name__}.organs: {e}") from e
        else:
            value = _coerce(names[key], value, f"{section_cls.__name__}.{key}")
        kwargs[key] = value
    return section_cls(**kwargs)


def _organs_from_list(items):
    return [
        OrganPrior(
            name=o["name"],
            label=int(o["label"]),
            center_lo=tuple(o["center_lo"]),
            center_hi=tuple(o["center_hi"]),
            radius_lo=tuple(o["radius_lo"]),
            radius_hi=tuple(o["radius_hi"]),
            rim=bool(o.get("rim", False)),
        )
        for o in items
    ]


def load_run_config(path):
    path = Path(path)
    logging.getLogger(__name__).info(f"Carregando configuração de: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"JSON inválido em {path}: {e}") from e
    return RunConfig.from_dict(data)


def save_run_config(cfg, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, ensure_ascii=False, sort_keys=True)
        f.write("\n")
    return path
