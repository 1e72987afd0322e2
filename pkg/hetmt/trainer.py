"""
Amostragem de patches, laço de treino com ADAM, checkpoints e seleção de variante (M1-M4).
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from hetmt.config import ModelConfig, TrainConfig
from hetmt.errors import CheckpointError, ConfigError, NonFiniteLossError
from hetmt.loss import joint_hetero_loss, joint_homo_loss, single_task_loss
from hetmt.model import build, load_checkpoint, save_checkpoint
from hetmt.synthdata import load_case, load_manifest, manifest_dir, select_cases

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["iteration", "total", "reg_data_term", "reg_log_term", "seg_data_term", "seg_log_term"]
CHECKPOINT_PREFIX = "ckpt_"


def _as_slices(array):
    return array[np.newaxis] if array.ndim == 2 else array


class PatchDataset:
    """Casos de treino em memória, já escalados para a rede, fatia a fatia ([D, H, W])."""

    def __init__(self, cases, cfg):
        if not cases:
            raise ConfigError("Manifesto sem casos de treino")
        self.case_ids = [c.case_id for c in cases]
        self.mr = [_as_slices(c.mr.data).astype(np.float32) / np.float32(cfg.mr_scale) for c in cases]
        self.ct = [_as_slices(c.ct.data).astype(np.float32) / np.float32(cfg.ct_scale) for c in cases]
        self.labels = [_as_slices(c.labels.data).astype(np.int64) for c in cases]
        smallest = min(min(v.shape[1:]) for v in self.mr)
        if cfg.patch_size > smallest:
            raise ConfigError(f"Patch {cfg.patch_size} maior que a menor fatia ({smallest})")

    def __len__(self):
        return len(self.case_ids)

    @classmethod
    def from_manifest(cls, manifest_path, cfg, split="train", holdout_fold=None, num_classes=None):
        entries = select_cases(load_manifest(manifest_path), split=split, holdout_fold=holdout_fold)
        base = manifest_dir(manifest_path)
        cases = [load_case(e, base, num_classes=num_classes) for e in entries]
        logger.info(f"{len(cases)} casos de '{split}' carregados de {manifest_path}")
        return cls(cases, cfg)


@dataclass
class PatchBatch:
    x: torch.Tensor
    y1: torch.Tensor
    y2: torch.Tensor
    case_index: np.ndarray
    origins: list


def sample_patch_batch(dataset, cfg, rng):
    """
    Sorteia ``batch_size`` patches co-localizados (caso, fatia e canto uniformes).

    Args:
        dataset (PatchDataset): Casos de treino.
        cfg (TrainConfig): Tamanho de patch e de batch.
        rng (numpy.random.Generator): Estado aleatório (consumido).

    Returns:
        PatchBatch: x [B,1,P,P], y1 [B,1,P,P], y2 [B,P,P].
    """
    p = cfg.patch_size
    xs, y1s, y2s, idx, origins = [], [], [], [], []
    for _ in range(cfg.batch_size):
        c = int(rng.integers(len(dataset)))
        depth, height, width = dataset.mr[c].shape
        if p > height or p > width:
            raise ConfigError(f"Patch {p} maior que a fatia {height}x{width} do caso {dataset.case_ids[c]}")
        z = int(rng.integers(depth))
        r0 = int(rng.integers(height - p + 1))
        c0 = int(rng.integers(width - p + 1))
        window = (z, slice(r0, r0 + p), slice(c0, c0 + p))
        xs.append(dataset.mr[c][window])
        y1s.append(dataset.ct[c][window])
        y2s.append(dataset.labels[c][window])
        idx.append(c)
        origins.append((z, r0, c0))
    return PatchBatch(
        x=torch.from_numpy(np.stack(xs)[:, np.newaxis]),
        y1=torch.from_numpy(np.stack(y1s)[:, np.newaxis]),
        y2=torch.from_numpy(np.stack(y2s)),
        case_index=np.asarray(idx),
        origins=origins,
    )


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    iteration: int = 0
    init_seed: int = 0
    history: list = field(default_factory=list)


def make_optimizer(params, cfg):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def init_train_state(train_cfg: TrainConfig, model_cfg: ModelConfig):
    train_cfg.validate()
    model = build(model_cfg, init_seed=train_cfg.seed)
    return TrainState(
        model=model,
        optimizer=make_optimizer(model.parameters(), train_cfg),
        rng=np.random.Generator(np.random.PCG64(train_cfg.seed)),
        init_seed=train_cfg.seed,
    )


def compute_loss(model, output, y1, y2):
    """Seleciona a loss pela variante do modelo."""
    cfg = model.config
    if cfg.noise == "homo":
        return joint_homo_loss(output, y1, y2, model.log_var_reg, model.log_var_seg)
    if len(cfg.tasks) == 2:
        return joint_hetero_loss(output, y1, y2)
    return single_task_loss(output, y1, y2, cfg.noise, cfg.tasks)


def train_step(state, batch, variant=None):
    """
    Um passo de SGD com ADAM (correção de viés padrão).

    Returns:
        tuple: (estado atualizado, LossBreakdown)
    """
    model = state.model
    if variant is not None and variant != model.config.variant:
        raise ConfigError(f"Variante {variant} difere da do modelo ({model.config.variant})")
    model.train()
    dropout_seed = int(state.rng.integers(2**63 - 1))
    output = model(batch.x, mode="train", rng_seed=dropout_seed)
    breakdown = compute_loss(model, output, batch.y1, batch.y2)
    if not torch.isfinite(breakdown.total):
        raise NonFiniteLossError(state.iteration + 1, breakdown.as_dict())

    state.optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    state.optimizer.step()
    state.iteration += 1
    state.history.append({"iteration": state.iteration, **breakdown.as_dict()})
    return state, breakdown


def checkpoint_stem(ckpt_dir, iteration):
    return Path(ckpt_dir) / f"{CHECKPOINT_PREFIX}{iteration:06d}"


def list_checkpoints(ckpt_dir):
    """Checkpoints de um diretório, ordenados por iteração."""
    stems = sorted(Path(ckpt_dir).glob(f"{CHECKPOINT_PREFIX}*.json"))
    return [s.with_suffix("") for s in stems if s.with_suffix(".pt").exists()]


def _save(state, ckpt_dir, train_cfg):
    stem = checkpoint_stem(ckpt_dir, state.iteration)
    extra = {"optimizer": state.optimizer.state_dict(), "rng_state": state.rng.bit_generator.state}
    scales = {"mr_scale": train_cfg.mr_scale, "ct_scale": train_cfg.ct_scale}
    save_checkpoint(stem, state.model, state.iteration, state.init_seed, extra=extra, scales=scales)
    logger.info(f"Checkpoint salvo: {stem}")
    return stem


def _prune(ckpt_dir, keep):
    stems = list_checkpoints(ckpt_dir)
    for stem in stems[:-keep]:
        stem.with_suffix(".pt").unlink()
        stem.with_suffix(".json").unlink()
        logger.info(f"Checkpoint removido (retenção={keep}): {stem}")


def write_history(history, path):
    frame = pd.DataFrame(history, columns=HISTORY_COLUMNS)
    frame.to_csv(path, index=False)
    return path


def resume_train_state(stem, train_cfg, history_path=None):
    """Retoma o estado (parâmetros, momentos do ADAM, RNG) de um checkpoint."""
    model, meta, payload = load_checkpoint(stem)
    if "optimizer" not in payload or "rng_state" not in payload:
        raise CheckpointError(f"Checkpoint {stem} não guarda estado de treino")
    model.train()
    optimizer = make_optimizer(model.parameters(), train_cfg)
    optimizer.load_state_dict(payload["optimizer"])
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = payload["rng_state"]
    state = TrainState(model, optimizer, rng, iteration=meta["iteration"], init_seed=meta["init_seed"])
    if history_path is not None and Path(history_path).exists():
        frame = pd.read_csv(history_path)
        frame = frame[frame["iteration"] <= state.iteration]
        state.history = frame.to_dict("records")
    logger.info(f"Treino retomado de {stem} na iteração {state.iteration}")
    return state


def train_loop(train_cfg, model_cfg, manifest_path, out_dir, holdout_fold=None, resume=None, progress=True):
    """
    Executa ``train_step`` até ``max_iterations``, gravando checkpoints no intervalo configurado.

    Args:
        train_cfg (TrainConfig): Configuração do treino.
        model_cfg (ModelConfig): Arquitetura/variante.
        manifest_path: Manifesto do dataset.
        out_dir: Diretório da variante (recebe checkpoints/, loss_history.csv, train_config.json).
        holdout_fold (int, opcional): Fold excluído do treino.
        resume: Checkpoint a retomar (stem ou "latest").

    Returns:
        list[Path]: Checkpoints retidos, do mais antigo ao mais recente.
    """
    train_cfg.validate()
    model_cfg.validate()
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    history_path = out_dir / "loss_history.csv"

    dataset = PatchDataset.from_manifest(
        manifest_path, train_cfg, split="train", holdout_fold=holdout_fold, num_classes=model_cfg.num_classes
    )
    with open(out_dir / "train_config.json", "w", encoding="utf-8") as f:
        echo = {"train": dataclasses.asdict(train_cfg), "model": dataclasses.asdict(model_cfg)}
        json.dump(echo, f, indent=2, sort_keys=True)
        f.write("\n")

    if resume == "latest":
        existing = list_checkpoints(ckpt_dir)
        resume = existing[-1] if existing else None
    if resume is not None:
        state = resume_train_state(resume, train_cfg, history_path)
    else:
        state = init_train_state(train_cfg, model_cfg)

    logger.info(
        f"Iniciando treino {model_cfg.variant}: iterações {state.iteration + 1}..{train_cfg.max_iterations}, "
        f"batch {train_cfg.batch_size}, patch {train_cfg.patch_size}"
    )
    steps = range(state.iteration, train_cfg.max_iterations)
    for _ in tqdm(steps, desc=f"treino {model_cfg.variant}", disable=not progress, leave=False):
        batch = sample_patch_batch(dataset, train_cfg, state.rng)
        state, breakdown = train_step(state, batch)
        if state.iteration % train_cfg.log_every == 0:
            terms = breakdown.as_dict()
            logger.info(
                f"it {state.iteration}: total={terms['total']:.4f} "
                f"reg=({terms['reg_data_term']:.4f}, {terms['reg_log_term']:.4f}) "
                f"seg=({terms['seg_data_term']:.4f}, {terms['seg_log_term']:.4f})"
            )
        if state.iteration % train_cfg.checkpoint_interval == 0 or state.iteration == train_cfg.max_iterations:
            _save(state, ckpt_dir, train_cfg)
            _prune(ckpt_dir, train_cfg.keep_checkpoints)
            write_history(state.history, history_path)

    write_history(state.history, history_path)
    kept = list_checkpoints(ckpt_dir)
    logger.info(f"Treino concluído. Checkpoints retidos: {[s.name for s in kept]}")
    return kept
