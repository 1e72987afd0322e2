"""
Inferência Monte Carlo dropout sobre um ou mais checkpoints, agregação em
média e decomposição da incerteza (intrínseca, de parâmetros e total) e
reconstrução do volume inteiro por janela deslizante.
"""

import dataclasses
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from hetmt.errors import CheckpointError, ConfigError, InsufficientSamplesError, StitchPlanError
from hetmt.loss import scaled_softmax
from hetmt.model import load_checkpoint
from hetmt.synthdata import Volume, load_manifest, manifest_dir, read_volume, select_cases, write_volume

logger = logging.getLogger(__name__)


@dataclass
class StitchPlan:
    volume_shape: tuple
    patch_size: tuple
    stride: tuple
    origins: list
    coverage: np.ndarray


def _per_axis(value, ndim, name):
    values = (value,) * ndim if np.isscalar(value) else tuple(value)
    if len(values) != ndim:
        raise StitchPlanError(f"{name} deve ter {ndim} valores, recebido {values}")
    return tuple(int(v) for v in values)


def plan_stitch(volume_shape, patch_size, stride):
    """
    Grade regular de origens de patch; a última origem de cada eixo é ajustada
    para que o patch termine exatamente na borda.

    Args:
        volume_shape (tuple): Shape espacial do volume.
        patch_size (int | tuple): Tamanho do patch.
        stride (int | tuple): Passo entre origens.

    Returns:
        StitchPlan: Origens e contagem de cobertura por voxel.
    """
    volume_shape = tuple(int(s) for s in volume_shape)
    ndim = len(volume_shape)
    patch = _per_axis(patch_size, ndim, "patch_size")
    step = _per_axis(stride, ndim, "stride")
    axes = []
    for n, p, s in zip(volume_shape, patch, step):
        if not 1 <= p <= n:
            raise StitchPlanError(f"Patch {p} fora de [1, {n}]")
        if not 1 <= s <= p:
            raise StitchPlanError(f"Stride {s} fora de [1, {p}]")
        starts = list(range(0, n - p + 1, s))
        if starts[-1] != n - p:
            starts.append(n - p)
        axes.append(starts)
    origins = list(itertools.product(*axes))
    coverage = np.zeros(volume_shape, dtype=np.int32)
    for origin in origins:
        coverage[_window(origin, patch)] += 1
    return StitchPlan(volume_shape, patch, step, origins, coverage)


def _window(origin, patch):
    return tuple(slice(o, o + p) for o, p in zip(origin, patch))


def extract_patches(array, plan):
    """Recorta os patches do plano a partir de um array espacial."""
    return np.stack([array[_window(o, plan.patch_size)] for o in plan.origins])


def stitch(plan, patches):
    """
    Média uniforme dos patches sobrepostos.

    Args:
        plan (StitchPlan): Plano usado para recortar.
        patches (ndarray): [n_patches, *canais, *patch_size].

    Returns:
        ndarray: [*canais, *volume_shape]
    """
    patches = np.asarray(patches, dtype=np.float64)
    lead = patches.shape[1 : patches.ndim - len(plan.volume_shape)]
    acc = np.zeros(lead + plan.volume_shape, dtype=np.float64)
    for origin, patch in zip(plan.origins, patches):
        acc[(Ellipsis,) + _window(origin, plan.patch_size)] += patch
    return acc / plan.coverage


@dataclass
class SampleFields:
    """Campos de uma amostra estocástica: f1, exp(s1), probabilidades [C, ...] e exp(s2)."""

    reg_mean: Optional[np.ndarray] = None
    reg_var: Optional[np.ndarray] = None
    seg_prob: Optional[np.ndarray] = None
    seg_var: Optional[np.ndarray] = None


@dataclass
class StochasticPrediction:
    T: int
    checkpoint_ids: List[str]
    reg_mean: Optional[np.ndarray] = None
    reg_param_var: Optional[np.ndarray] = None
    reg_intrinsic_var: Optional[np.ndarray] = None
    reg_total_var: Optional[np.ndarray] = None
    seg_mean_prob: Optional[np.ndarray] = None
    seg_label: Optional[np.ndarray] = None
    seg_param_var: Optional[np.ndarray] = None
    seg_intrinsic: Optional[np.ndarray] = None
    reg_samples: Optional[np.ndarray] = None
    variant: str = ""
    extras: dict = field(default_factory=dict)


def derive_seed(seed, checkpoint_index, sample_index):
    state = np.random.SeedSequence([int(seed) % 2**32, checkpoint_index, sample_index]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def load_models(stems):
    """Carrega checkpoints e confere que todos compartilham a mesma configuração."""
    loaded = [load_checkpoint(s) for s in stems]
    if not loaded:
        raise CheckpointError("Nenhum checkpoint informado")
    for stem, (_, meta, _) in zip(stems, loaded):
        meta["stem"] = str(Path(stem).with_suffix(""))
    reference = loaded[0][1]
    for _, meta, _ in loaded[1:]:
        for key in ("config", "mr_scale", "ct_scale"):
            if meta.get(key) != reference.get(key):
                raise CheckpointError(f"Checkpoints com '{key}' divergente; não podem ser amostrados juntos")
    return [(model, meta) for model, meta, _ in loaded]


def mc_forward_samples(models, patch, T, seed, max_batch=64):
    """
    T passes estocásticos (dropout ativo), T/k por checkpoint.

    Args:
        models (list): Modelos (ou pares (modelo, metadados)) de k checkpoints.
        patch: Tensor [N, 1, H, W] (ou array 2D) já escalado.
        T (int): Número total de amostras.
        seed (int): Semente base; cada amostra usa derive_seed(seed, checkpoint, amostra).

    Returns:
        list[DualTaskOutput]: T saídas, agrupadas por checkpoint.
    """
    models = [m[0] if isinstance(m, tuple) else m for m in models]
    k = len(models)
    if T < 2:
        raise InsufficientSamplesError(f"T deve ser >= 2 (recebido {T})")
    if k == 0 or T % k != 0:
        raise ConfigError(f"T={T} não é divisível pelo número de checkpoints ({k})")
    configs = {json.dumps(dataclasses.asdict(m.config), sort_keys=True) for m in models}
    if len(configs) != 1:
        raise CheckpointError("Checkpoints com configurações diferentes")
    x = patch if isinstance(patch, torch.Tensor) else torch.as_tensor(np.asarray(patch))
    while x.dim() < 4:
        x = x.unsqueeze(0)
    dtype = next(models[0].parameters()).dtype
    x = x.to(dtype)

    samples = []
    with torch.no_grad():
        for ci, model in enumerate(models):
            model.eval()
            for si in range(T // k):
                generator = torch.Generator().manual_seed(derive_seed(seed, ci, si))
                chunks = [model(c, mode="mc_sample", generator=generator) for c in torch.split(x, max_batch)]
                samples.append(_concat_outputs(chunks))
    return samples


def _concat_outputs(chunks):
    first = chunks[0]
    merged = {}
    for name in vars(first):
        values = [getattr(c, name) for c in chunks]
        merged[name] = torch.cat(values) if values[0] is not None else None
    return type(first)(**merged)


def output_fields(output):
    """Converte uma saída da rede em SampleFields por patch (numpy, float64)."""
    fields = SampleFields()
    if output.reg_mean is not None:
        fields.reg_mean = output.reg_mean[:, 0].double().numpy()
        if output.reg_logvar is not None:
            fields.reg_var = torch.exp(output.reg_logvar[:, 0]).double().numpy()
        else:
            fields.reg_var = np.zeros_like(fields.reg_mean)
    if output.seg_logits is not None:
        if output.seg_logvar is not None:
            probs = scaled_softmax(output.seg_logits, output.seg_logvar)
            fields.seg_var = torch.exp(output.seg_logvar[:, 0]).double().numpy()
        else:
            probs = F.softmax(output.seg_logits, dim=1)
            fields.seg_var = np.zeros(probs[:, 0].shape)
        fields.seg_prob = probs.double().numpy()
    return fields


def _stack(samples, name):
    values = [getattr(s, name) for s in samples]
    if any(v is None for v in values):
        return None
    return np.stack([np.asarray(v, dtype=np.float64) for v in values])


def aggregate_regression(samples):
    """
    Média e variância populacional (divide por T) de f1; intrínseca = média de exp(s1).

    Returns:
        tuple: (reg_mean, reg_param_var, reg_intrinsic_var, reg_total_var)
    """
    if len(samples) < 2:
        raise InsufficientSamplesError(f"São necessárias ao menos 2 amostras (recebido {len(samples)})")
    means = _stack(samples, "reg_mean")
    variances = _stack(samples, "reg_var")
    if means is None:
        raise InsufficientSamplesError("Amostras sem saída de regressão")
    reg_mean = means.mean(axis=0)
    param_var = means.var(axis=0)
    intrinsic = variances.mean(axis=0) if variances is not None else np.zeros_like(reg_mean)
    return reg_mean, param_var, intrinsic, intrinsic + param_var


def aggregate_segmentation(samples):
    """
    Média das probabilidades (rótulo = argmax, empate vai para o menor índice),
    variância populacional por classe e média de exp(s2).

    Returns:
        tuple: (seg_mean_prob, seg_label, seg_param_var, seg_intrinsic)
    """
    if len(samples) < 2:
        raise InsufficientSamplesError(f"São necessárias ao menos 2 amostras (recebido {len(samples)})")
    probs = _stack(samples, "seg_prob")
    if probs is None:
        raise InsufficientSamplesError("Amostras sem saída de segmentação")
    variances = _stack(samples, "seg_var")
    mean_prob = probs.mean(axis=0)
    label = np.argmax(mean_prob, axis=0).astype(np.uint8)
    param_var = probs.var(axis=0)
    intrinsic = variances.mean(axis=0) if variances is not None else np.zeros(mean_prob.shape[1:])
    return mean_prob, label, param_var, intrinsic


def _stitch_sample(plan, patch_fields):
    out = SampleFields()
    for name in ("reg_mean", "reg_var", "seg_prob", "seg_var"):
        value = getattr(patch_fields, name)
        if value is not None:
            setattr(out, name, stitch(plan, value))
    return out


def _predict_slice(models, mr_slice, plan, T, seed, mr_scale, max_batch):
    patches = extract_patches(mr_slice.astype(np.float32) / np.float32(mr_scale), plan)
    outputs = mc_forward_samples(models, torch.from_numpy(patches[:, np.newaxis]), T, seed, max_batch=max_batch)
    # Cada amostra t é costurada no volume inteiro antes da agregação sobre t.
    return [_stitch_sample(plan, output_fields(o)) for o in outputs]


def sliding_window_predict(models, volume, plan, T, seed, max_batch=64, save_samples=False):
    """
    Predição estocástica do volume inteiro por janela deslizante.

    Volumes 3D são reconstruídos fatia a fatia com o mesmo plano 2D.

    Args:
        models (list): Pares (modelo, metadados) de ``load_models``.
        volume (Volume): Volume MR.
        plan (StitchPlan): Plano sobre o shape da fatia.
        T (int): Número de amostras.
        seed (int): Semente base.

    Returns:
        StochasticPrediction: Médias e incertezas em unidades de HU (variâncias em HU^2).
    """
    meta = models[0][1]
    mr_scale = float(meta.get("mr_scale", 1.0))
    ct_scale = float(meta.get("ct_scale", 1.0))
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    slices = data[np.newaxis] if data.ndim == 2 else data
    if tuple(slices.shape[1:]) != tuple(plan.volume_shape):
        raise StitchPlanError(f"Plano para {plan.volume_shape} não bate com a fatia {slices.shape[1:]}")

    per_slice = []
    for z, mr_slice in enumerate(slices):
        samples = _predict_slice(models, mr_slice, plan, T, seed, mr_scale, max_batch)
        pred = {}
        if samples[0].reg_mean is not None:
            mean, param, intrinsic, total = aggregate_regression(samples)
            pred.update(
                reg_mean=mean * ct_scale,
                reg_param_var=param * ct_scale**2,
                reg_intrinsic_var=intrinsic * ct_scale**2,
                reg_total_var=total * ct_scale**2,
            )
            if save_samples:
                pred["reg_samples"] = np.stack([s.reg_mean for s in samples]) * ct_scale
        if samples[0].seg_prob is not None:
            mean_prob, label, param, intrinsic = aggregate_segmentation(samples)
            pred.update(seg_mean_prob=mean_prob, seg_label=label, seg_param_var=param, seg_intrinsic=intrinsic)
        per_slice.append(pred)
        logger.debug(f"Fatia {z}: {len(plan.origins)} patches x {T} amostras")

    names = per_slice[0].keys()
    channel_first = {"seg_mean_prob", "seg_param_var", "reg_samples"}
    merged = {}
    for name in names:
        if data.ndim == 2:
            merged[name] = per_slice[0][name]
        else:
            axis = 1 if name in channel_first else 0
            merged[name] = np.stack([p[name] for p in per_slice], axis=axis)
    return StochasticPrediction(
        T=T,
        checkpoint_ids=[Path(m.get("stem", f"iter_{m['iteration']}")).name for _, m in models],
        variant=meta["config"]["variant"],
        **merged,
    )


PREDICTION_FIELDS = {
    "reg_mean": "intensity",
    "reg_param_var": "variance",
    "reg_intrinsic_var": "variance",
    "reg_total_var": "variance",
    "seg_mean_prob": "intensity",
    "seg_label": "label",
    "seg_param_var": "variance",
    "seg_intrinsic": "variance",
}
CHANNEL_FIELDS = ("seg_mean_prob", "seg_param_var")


def write_prediction(pred, out_dir, spacing):
    """Grava cada campo da predição como Volume e um ``index.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spacing = tuple(spacing)
    index = {"T": pred.T, "checkpoint_ids": list(pred.checkpoint_ids), "variant": pred.variant, "fields": {}}
    for name, kind in PREDICTION_FIELDS.items():
        value = getattr(pred, name)
        if value is None:
            continue
        vol_spacing = (1.0,) + spacing if name in CHANNEL_FIELDS else spacing
        write_volume(Volume(value, vol_spacing, kind), out_dir / name)
        index["fields"][name] = f"{name}.json"
    if pred.reg_samples is not None:
        for t, sample in enumerate(pred.reg_samples):
            write_volume(Volume(sample, spacing, "intensity"), out_dir / f"reg_sample_{t:02d}")
        index["reg_samples"] = [f"reg_sample_{t:02d}.json" for t in range(len(pred.reg_samples))]
    index["channel_axis"] = {name: 0 for name in CHANNEL_FIELDS if name in index["fields"]}
    with open(out_dir / "index.json", "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")
    return out_dir / "index.json"


def read_prediction(pred_dir):
    pred_dir = Path(pred_dir)
    index_path = pred_dir / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"Predição não encontrada: {index_path}")
    with open(index_path, "r", encoding="utf-8") as f:
        index = json.load(f)
    values = {name: read_volume(pred_dir / rel).data for name, rel in index["fields"].items()}
    return StochasticPrediction(
        T=index["T"], checkpoint_ids=index["checkpoint_ids"], variant=index.get("variant", ""), **values
    )


def predict_manifest(stems, manifest_path, out_dir, cfg, patch_size, split="test", holdout_fold=None):
    """
    Roda ``sliding_window_predict`` em todos os casos do split e grava as predições.

    Returns:
        list[Path]: Índices gravados, um por caso.
    """
    cfg.validate()
    models = load_models(stems)
    entries = select_cases(load_manifest(manifest_path), split=split, holdout_fold=holdout_fold)
    if not entries:
        raise ConfigError(f"Nenhum caso no split '{split}'")
    base = manifest_dir(manifest_path)
    written = []
    for entry in entries:
        mr = read_volume(base / entry["mr"])
        plan = plan_stitch(mr.shape[-2:], patch_size, cfg.stride)
        pred = sliding_window_predict(
            models, mr, plan, cfg.T, cfg.seed, max_batch=cfg.max_patch_batch, save_samples=cfg.save_samples
        )
        written.append(write_prediction(pred, Path(out_dir) / entry["id"], mr.spacing))
        logger.info(f"Caso {entry['id']}: {len(plan.origins)} patches, T={cfg.T}, checkpoints {pred.checkpoint_ids}")
    return written
