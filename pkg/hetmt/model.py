"""
Rede dual-task: tronco residual dilatado compartilhado com dropout e quatro
ramos totalmente convolucionais (média/log-variância para regressão e
logits/log-variância para segmentação).
"""

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from hetmt.config import ModelConfig
from hetmt.errors import CheckpointError, ModelConfigError, NumericError
from hetmt.synthdata import Volume

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
MODES = ("train", "mc_sample", "deterministic")
HEAD_CHANNELS = {"reg_mean": "one", "reg_logvar": "one", "seg_logits": "classes", "seg_logvar": "one"}

# Ganho da segunda convolução de cada bloco residual (sem normalização no tronco).
RESIDUAL_GAIN = 0.5


@dataclass
class DualTaskOutput:
    """Saídas voxel a voxel ([N, canais, H, W]); cabeças ausentes ficam como None."""

    reg_mean: Optional[torch.Tensor] = None
    reg_logvar: Optional[torch.Tensor] = None
    seg_logits: Optional[torch.Tensor] = None
    seg_logvar: Optional[torch.Tensor] = None

    def present(self):
        return {k: v for k, v in vars(self).items() if v is not None}


def _conv(in_channels, out_channels, kernel_size, dilation=1):
    return nn.Conv2d(
        in_channels,
        out_channels,
        kernel_size,
        padding=dilation * (kernel_size // 2),
        dilation=dilation,
    )


class ResidualBlock(nn.Module):
    """Par de convoluções dilatadas com atalho identidade (projeção 1x1 se a largura muda)."""

    def __init__(self, in_channels, out_channels, kernel_size, dilation, act):
        super().__init__()
        self.conv1 = _conv(in_channels, out_channels, kernel_size, dilation)
        self.conv2 = _conv(out_channels, out_channels, kernel_size, dilation)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else None
        self.act = act

    def forward(self, x):
        h = self.act(self.conv1(x))
        h = self.conv2(h)
        shortcut = x if self.skip is None else self.skip(x)
        return self.act(shortcut + h)


def _branch(in_channels, widths, out_channels, kernel_size, act_module):
    """Cinco camadas: duas kxk e três 1x1; a última é linear."""
    layers = []
    sizes = [in_channels, *widths]
    for i, (c_in, c_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        k = kernel_size if i < 2 else 1
        layers += [_conv(c_in, c_out, k), act_module()]
    layers.append(nn.Conv2d(sizes[-1], out_channels, 1))
    return nn.Sequential(*layers)


class DualTaskNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        act_module = nn.ReLU if config.activation == "relu" else nn.Identity
        self.act = act_module()
        k = config.kernel_size
        f = config.effective_trunk

        self.conv_in = _conv(config.in_channels, f[0], k)
        blocks = []
        c_in = f[0]
        for g, dilation in enumerate(config.dilations):
            for _ in range(config.repeats):
                blocks.append(ResidualBlock(c_in, f[g + 1], k, dilation, self.act))
                c_in = f[g + 1]
        self.blocks = nn.ModuleList(blocks)
        self.conv_out = _conv(c_in, f[-1], k)

        self.heads = nn.ModuleDict()
        for name in self.head_names:
            out_channels = config.num_classes if HEAD_CHANNELS[name] == "classes" else 1
            if config.spec["baseline"] and config.noise == "none":
                # Baselines: apenas uma camada 1x1 sobre o tronco.
                self.heads[name] = nn.Conv2d(f[-1], out_channels, 1)
            else:
                self.heads[name] = _branch(f[-1], config.branch_widths, out_channels, k, act_module)

        if config.noise == "homo":
            self.log_var_reg = nn.Parameter(torch.zeros(()))
            self.log_var_seg = nn.Parameter(torch.zeros(()))

    @property
    def head_names(self):
        names = []
        if "reg" in self.config.tasks:
            names.append("reg_mean")
            if self.config.noise == "hetero":
                names.append("reg_logvar")
        if "seg" in self.config.tasks:
            names.append("seg_logits")
            if self.config.noise == "hetero":
                names.append("seg_logvar")
        return names

    def dropout_mask(self, shape, generator, dtype):
        keep = 1.0 - self.config.dropout_p
        probs = torch.full(shape, keep, dtype=dtype)
        return torch.bernoulli(probs, generator=generator) / keep

    def forward(self, x, mode="deterministic", rng_seed=None, generator=None):
        if mode not in MODES:
            raise ValueError(f"Modo desconhecido: {mode}")
        if mode != "deterministic" and rng_seed is None and generator is None:
            raise ValueError(f"O modo '{mode}' exige rng_seed")
        if x.dim() != 4:
            raise ValueError(f"Entrada deve ser [N, C, H, W], recebido {tuple(x.shape)}")

        h = _checked("conv_in", self.act(self.conv_in(x)))
        for i, block in enumerate(self.blocks):
            h = _checked(f"blocks.{i}", block(h))
        h = _checked("conv_out", self.act(self.conv_out(h)))

        if mode != "deterministic" and self.config.use_dropout and self.config.dropout_p > 0:
            if generator is None:
                generator = torch.Generator().manual_seed(int(rng_seed))
            h = h * self.dropout_mask(h.shape, generator, h.dtype)

        out = DualTaskOutput()
        for name, head in self.heads.items():
            setattr(out, name, _checked(f"heads.{name}", head(h)))
        return out


def _checked(layer, tensor):
    if not torch.isfinite(tensor).all():
        raise NumericError(layer)
    return tensor


def _init_weights(model, init_seed):
    """Inicialização uniforme escalada pelo fan-in, determinística a partir da seed."""
    generator = torch.Generator().manual_seed(int(init_seed))
    relu = model.config.activation == "relu"
    outputs = {id(h if isinstance(h, nn.Conv2d) else h[-1]) for h in model.heads.values()}
    with torch.no_grad():
        for name, module in model.named_modules():
            if not isinstance(module, nn.Conv2d):
                continue
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            gain = 6.0 if relu and id(module) not in outputs else 3.0
            bound = math.sqrt(gain / fan_in)
            if name.endswith("conv2"):
                bound *= RESIDUAL_GAIN
            module.weight.copy_((torch.rand(module.weight.shape, generator=generator) * 2.0 - 1.0) * bound)
            module.bias.zero_()


def build(config, init_seed=0):
    """
    Constrói a rede e inicializa W de forma determinística.

    Args:
        config (ModelConfig): Hiperparâmetros da arquitetura.
        init_seed (int): Semente da inicialização.

    Returns:
        DualTaskNet: Módulo cujo ``state_dict()`` é o conjunto de parâmetros W.
    """
    try:
        model = DualTaskNet(config)
    except ModelConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ModelConfigError(f"Configuração inconsistente: {e}") from e
    _init_weights(model, init_seed)
    logger.info(
        f"Modelo {config.variant} construído: {count_parameters(model)} parâmetros, "
        f"cabeças {model.head_names}, dropout={'sim' if config.use_dropout else 'não'}"
    )
    return model


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def forward(model, patch, mode="deterministic", rng_seed=None):
    """Aplica a rede a um patch (array 2D, [N,H,W] ou [N,1,H,W])."""
    data = patch.data if isinstance(patch, Volume) else patch
    x = data if isinstance(data, torch.Tensor) else torch.as_tensor(np.asarray(data))
    dtype = next(model.parameters()).dtype
    x = x.to(dtype)
    while x.dim() < 4:
        x = x.unsqueeze(0)
    if min(x.shape[-2:]) < model.config.receptive_field():
        logger.warning(f"Patch {tuple(x.shape[-2:])} menor que o campo receptivo {model.config.receptive_field()}")
    return model(x, mode=mode, rng_seed=rng_seed)


def save_checkpoint(stem, model, iteration, init_seed, extra=None, scales=None):
    """
    Grava ``<stem>.pt`` (tensores + estado opcional do otimizador/RNG) e ``<stem>.json`` (metadados).
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    payload = {"params": model.state_dict()}
    if extra:
        payload.update(extra)
    torch.save(payload, stem.with_suffix(".pt"))
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": dataclasses.asdict(model.config),
        "iteration": int(iteration),
        "init_seed": int(init_seed),
    }
    if scales:
        meta.update(scales)
    with open(stem.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return stem


def load_checkpoint(stem):
    """
    Carrega um checkpoint e valida os shapes contra a configuração gravada.

    Returns:
        tuple: (modelo, metadados, payload bruto)
    """
    stem = Path(stem)
    if stem.suffix in (".pt", ".json"):
        stem = stem.with_suffix("")
    meta_path = stem.with_suffix(".json")
    if not meta_path.exists():
        raise FileNotFoundError(f"Metadados de checkpoint não encontrados: {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"Versão de checkpoint não suportada em {stem}: {meta.get('format_version')}")
    cfg_dict = dict(meta["config"])
    for key in ("trunk_features", "dilations", "branch_widths"):
        cfg_dict[key] = tuple(cfg_dict[key])
    config = ModelConfig(**cfg_dict)
    model = build(config, init_seed=meta.get("init_seed", 0))
    # O payload guarda também o estado do RNG do numpy (inteiros de 128 bits).
    payload = torch.load(stem.with_suffix(".pt"), map_location="cpu", weights_only=False)
    try:
        model.load_state_dict(payload["params"], strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint {stem} não bate com a configuração: {e}") from e
    model.eval()
    return model, meta, payload
