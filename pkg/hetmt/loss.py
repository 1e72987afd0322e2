"""
Losses de log-verossimilhança negativa com ruído heteroscedástico.

Todas as funções recebem ``s = log(sigma^2)``; o termo ``exp(-s)`` substitui a
divisão por sigma^2. Mapas seguem o layout do torch: [N, 1, H, W] para
regressão e log-variâncias, [N, C, H, W] para logits e [N, H, W] para rótulos.
"""

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from hetmt.errors import LossInputError

logger = logging.getLogger(__name__)

# Faixa de s dentro das losses; em convergência o clamp não deve estar ativo.
LOGVAR_CLAMP = (-10.0, 10.0)


@dataclass
class LossBreakdown:
    reg_data_term: torch.Tensor
    reg_log_term: torch.Tensor
    seg_data_term: torch.Tensor
    seg_log_term: torch.Tensor
    total: torch.Tensor

    @classmethod
    def from_terms(cls, reg_data_term=None, reg_log_term=None, seg_data_term=None, seg_log_term=None):
        terms = [reg_data_term, reg_log_term, seg_data_term, seg_log_term]
        like = next(t for t in terms if t is not None)
        terms = [t if t is not None else torch.zeros((), dtype=like.dtype) for t in terms]
        total = terms[0] + terms[1] + terms[2] + terms[3]
        return cls(*terms, total=total)

    def as_dict(self):
        return {
            "total": float(self.total.detach()),
            "reg_data_term": float(self.reg_data_term.detach()),
            "reg_log_term": float(self.reg_log_term.detach()),
            "seg_data_term": float(self.seg_data_term.detach()),
            "seg_log_term": float(self.seg_log_term.detach()),
        }


def _check_finite(**tensors):
    for name, t in tensors.items():
        if not torch.isfinite(t).all():
            raise LossInputError(f"Entrada '{name}' contém valores não finitos")


def _clamp_logvar(s):
    return torch.clamp(s, *LOGVAR_CLAMP)


def _regression_maps(y1, reg_mean, reg_logvar):
    if y1.shape != reg_mean.shape or reg_logvar.shape != reg_mean.shape:
        raise LossInputError(
            f"Shapes incompatíveis: y1 {tuple(y1.shape)}, média {tuple(reg_mean.shape)}, "
            f"log-variância {tuple(reg_logvar.shape)}"
        )
    _check_finite(y1=y1, reg_mean=reg_mean, reg_logvar=reg_logvar)
    s = _clamp_logvar(reg_logvar)
    return 0.5 * torch.exp(-s) * (y1 - reg_mean) ** 2, s


def regression_nll(y1, reg_mean, reg_logvar):
    """
    NLL gaussiana por voxel: ``0.5 * exp(-s) * (y1 - f1)^2 + s``.

    Returns:
        tuple: (mapa de loss, média escalar)
    """
    data_map, s = _regression_maps(y1, reg_mean, reg_logvar)
    loss_map = data_map + s
    return loss_map, loss_map.mean()


def scaled_softmax(seg_logits, seg_logvar):
    """Softmax dos logits divididos por ``2 * sigma^2`` (eixo de classes = 1)."""
    _check_finite(seg_logits=seg_logits, seg_logvar=seg_logvar)
    if seg_logvar.dim() == seg_logits.dim() - 1:
        seg_logvar = seg_logvar.unsqueeze(1)
    if seg_logvar.shape[1] != 1 or seg_logvar.shape[2:] != seg_logits.shape[2:]:
        raise LossInputError(
            f"Log-variância {tuple(seg_logvar.shape)} incompatível com logits {tuple(seg_logits.shape)}"
        )
    divisor = 2.0 * torch.exp(seg_logvar)
    return F.softmax(seg_logits / divisor, dim=1)


def _check_labels(seg_logits, y2):
    if y2.shape != seg_logits.shape[:1] + seg_logits.shape[2:]:
        raise LossInputError(f"Rótulos {tuple(y2.shape)} incompatíveis com logits {tuple(seg_logits.shape)}")
    n_classes = seg_logits.shape[1]
    if y2.numel() and (int(y2.min()) < 0 or int(y2.max()) >= n_classes):
        raise LossInputError(f"Rótulo fora de [0, {n_classes - 1}]: min={int(y2.min())}, max={int(y2.max())}")


def _segmentation_maps(seg_logits, seg_logvar, y2):
    _check_labels(seg_logits, y2)
    _check_finite(seg_logits=seg_logits, seg_logvar=seg_logvar)
    s = _clamp_logvar(seg_logvar.squeeze(1) if seg_logvar.dim() == seg_logits.dim() else seg_logvar)
    if s.shape != y2.shape:
        raise LossInputError(f"Log-variância {tuple(s.shape)} incompatível com rótulos {tuple(y2.shape)}")
    ce = F.cross_entropy(seg_logits, y2.long(), reduction="none")
    return 0.5 * torch.exp(-s) * ce, s


def classification_nll(seg_logits, seg_logvar, y2):
    """
    Aproximação da NLL do softmax escalado: ``0.5 * exp(-s2) * CE(f2, y2) + s2``.

    A entropia cruzada usa os logits SEM escala.

    Returns:
        tuple: (mapa de loss [N, H, W], média escalar)
    """
    data_map, s = _segmentation_maps(seg_logits, seg_logvar, y2)
    loss_map = data_map + s
    return loss_map, loss_map.mean()


def _regression_terms(y1, reg_mean, reg_logvar):
    data_map, s = _regression_maps(y1, reg_mean, reg_logvar)
    return data_map.mean(), s.mean()


def _segmentation_terms(seg_logits, seg_logvar, y2):
    data_map, s = _segmentation_maps(seg_logits, seg_logvar, y2)
    return data_map.mean(), s.mean()


def joint_hetero_loss(output, y1, y2):
    """
    Loss conjunta heteroscedástica: soma das NLLs de regressão e segmentação.

    Args:
        output (DualTaskOutput): Saída com as quatro cabeças.
        y1 (Tensor): CT de referência [N, 1, H, W].
        y2 (Tensor): Rótulos [N, H, W].

    Returns:
        LossBreakdown: Termos de dados e de log de cada tarefa e o total.
    """
    for name in ("reg_mean", "reg_logvar", "seg_logits", "seg_logvar"):
        if getattr(output, name) is None:
            raise LossInputError(f"Cabeça ausente para a loss heteroscedástica: {name}")
    reg_data, reg_log = _regression_terms(y1, output.reg_mean, output.reg_logvar)
    seg_data, seg_log = _segmentation_terms(output.seg_logits, output.seg_logvar, y2)
    return LossBreakdown.from_terms(reg_data, reg_log, seg_data, seg_log)


def joint_homo_loss(output, y1, y2, s1, s2):
    """Mesma forma da loss heteroscedástica, com s1 e s2 escalares constantes no espaço."""
    for name in ("reg_mean", "seg_logits"):
        if getattr(output, name) is None:
            raise LossInputError(f"Cabeça ausente para a loss homoscedástica: {name}")
    s1_map = s1.reshape(()).expand_as(output.reg_mean)
    s2_map = s2.reshape(()).expand(y2.shape)
    reg_data, reg_log = _regression_terms(y1, output.reg_mean, s1_map)
    seg_data, seg_log = _segmentation_terms(output.seg_logits, s2_map, y2)
    return LossBreakdown.from_terms(reg_data, reg_log, seg_data, seg_log)


def single_task_loss(output, y1, y2, variant_noise, tasks):
    """
    Losses das baselines de tarefa única (M1, M2a: MSE ou CE; M2b: NLL heteroscedástica).
    """
    terms = {}
    if "reg" in tasks:
        if variant_noise == "hetero":
            terms["reg_data_term"], terms["reg_log_term"] = _regression_terms(y1, output.reg_mean, output.reg_logvar)
        else:
            if y1.shape != output.reg_mean.shape:
                raise LossInputError(f"Shapes incompatíveis: {tuple(y1.shape)} vs {tuple(output.reg_mean.shape)}")
            terms["reg_data_term"] = F.mse_loss(output.reg_mean, y1)
    if "seg" in tasks:
        if variant_noise == "hetero":
            terms["seg_data_term"], terms["seg_log_term"] = _segmentation_terms(
                output.seg_logits, output.seg_logvar, y2
            )
        else:
            _check_labels(output.seg_logits, y2)
            terms["seg_data_term"] = F.cross_entropy(output.seg_logits, y2.long())
    return LossBreakdown.from_terms(**terms)
