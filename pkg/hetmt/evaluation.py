"""
Métricas e calibração: MAE mascarado, DICE fuzzy, mapas de z-score,
teste de aderência chi^2 contra a normal padrão e relatórios por variante.

Quantis da normal vêm de ``scipy.stats.norm.ppf`` (aproximações racionais do
``ndtri`` da Cephes); o p-valor usa a gama incompleta regularizada superior
``scipy.special.gammaincc``.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.special import gammaincc
from scipy.stats import norm, spearmanr

from hetmt.errors import EvaluationError, InsufficientSamplesError
from hetmt.synthdata import Volume

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["variant", "region", "metric", "value", "case"]
HIST_COLUMNS = ["bin_lo", "bin_hi", "count"]
POOLED = "pooled"


def _array(x, dtype=np.float64):
    return np.asarray(x.data if isinstance(x, Volume) else x, dtype=dtype)


def _resolve_mask(mask, shape, labels=None):
    if isinstance(mask, (set, frozenset, list, tuple)):
        if labels is None:
            raise EvaluationError("Máscara por conjunto de rótulos exige o volume de rótulos")
        mask = np.isin(_array(labels, np.int64), sorted(mask))
    mask = _array(mask, bool)
    if mask.shape != tuple(shape):
        raise EvaluationError(f"Máscara {mask.shape} não bate com o volume {tuple(shape)}")
    if not mask.any():
        raise EvaluationError("Máscara vazia")
    return mask


def mae_masked(pred, ref, mask, labels=None):
    """
    Erro absoluto médio sobre os voxels da máscara.

    Args:
        pred, ref: Volumes (ou arrays) com o mesmo shape.
        mask: Volume/array booleano ou conjunto de rótulos (exige ``labels``).

    Returns:
        float
    """
    pred, ref = _array(pred), _array(ref)
    if pred.shape != ref.shape:
        raise EvaluationError(f"Shapes diferentes: {pred.shape} vs {ref.shape}")
    mask = _resolve_mask(mask, pred.shape, labels)
    return float(np.abs(pred[mask] - ref[mask]).mean())


def fuzzy_dice(prob, ref_labels, c):
    """DICE entre as probabilidades da classe ``c`` ([C, ...]) e o one-hot da referência; 1 se ambas vazias."""
    prob = _array(prob)
    labels = _array(ref_labels, np.int64)
    if not 0 <= c < prob.shape[0]:
        raise EvaluationError(f"Classe {c} fora de [0, {prob.shape[0] - 1}]")
    if prob.shape[1:] != labels.shape:
        raise EvaluationError(f"Probabilidades {prob.shape} não batem com rótulos {labels.shape}")
    p = prob[c]
    g = (labels == c).astype(np.float64)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (p * g).sum() / denom)


def zscore_map(reg_mean, reg_total_var, ref, mask=None):
    """
    z = (ref - média) / sqrt(variância total) dentro da máscara; NaN fora dela.

    Raises:
        EvaluationError: variância nula (ou negativa) em algum voxel da máscara.
    """
    mean, var, ref = _array(reg_mean), _array(reg_total_var), _array(ref)
    if not mean.shape == var.shape == ref.shape:
        raise EvaluationError(f"Shapes diferentes: {mean.shape}, {var.shape}, {ref.shape}")
    mask = np.ones(mean.shape, dtype=bool) if mask is None else _resolve_mask(mask, mean.shape)
    if np.any(var[mask] <= 0):
        raise EvaluationError(f"Variância nula em {int(np.sum(var[mask] <= 0))} voxels da máscara")
    z = np.full(mean.shape, np.nan)
    z[mask] = (ref[mask] - mean[mask]) / np.sqrt(var[mask])
    return z


@dataclass
class ZScoreStats:
    n: int
    mean: float
    std: float
    chi2: float
    dof: int
    p: float
    edges: List[float] = field(default_factory=list)
    counts: List[int] = field(default_factory=list)

    def as_dict(self):
        return asdict(self)


def normal_bin_edges(bins):
    """Bordas internas de ``bins`` faixas equiprováveis sob N(0, 1)."""
    return norm.ppf(np.arange(1, bins) / bins)


def bin_counts(z, bins):
    # Faixa k contém edges[k-1] <= z < edges[k].
    edges = normal_bin_edges(bins)
    return np.bincount(np.searchsorted(edges, z, side="right"), minlength=bins)


def zscore_stats_chi2(z, bins=8):
    """
    Média, desvio populacional e teste chi^2 de aderência à normal padrão.

    Args:
        z: z-scores (NaN são descartados).
        bins (int): Número K de faixas equiprováveis.

    Returns:
        ZScoreStats: chi2 com K-1 graus de liberdade e p = Q((K-1)/2, chi2/2).
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    z = z[np.isfinite(z)]
    if bins < 2:
        raise EvaluationError(f"bins deve ser >= 2 (recebido {bins})")
    if z.size < 5 * bins:
        raise InsufficientSamplesError(f"{z.size} z-scores para {bins} faixas (mínimo {5 * bins})")
    counts = bin_counts(z, bins)
    expected = z.size / bins
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    dof = bins - 1
    return ZScoreStats(
        n=int(z.size),
        mean=float(z.mean()),
        std=float(z.std()),
        chi2=chi2,
        dof=dof,
        p=float(gammaincc(dof / 2.0, chi2 / 2.0)),
        edges=[float(e) for e in normal_bin_edges(bins)],
        counts=[int(c) for c in counts],
    )


def oracle_zscores(bundle, mask=None):
    """z-scores do ruído do CT contra ``sigma_true`` para um preditor perfeito (média = CT sem ruído)."""
    if bundle.ct_clean is None:
        raise EvaluationError(f"Caso {bundle.case_id} sem ct_clean (só existe logo após a geração)")
    sigma = _array(bundle.sigma_true)
    return zscore_map(bundle.ct_clean, sigma**2, bundle.ct, mask=mask)


def uncertainty_correlation(reg_mean, reg_total_var, ref, mask=None):
    """Correlação de Spearman entre |erro| e o desvio total previsto."""
    mean, var, ref = _array(reg_mean), _array(reg_total_var), _array(ref)
    mask = np.ones(mean.shape, dtype=bool) if mask is None else _resolve_mask(mask, mean.shape)
    rho, _ = spearmanr(np.abs(ref[mask] - mean[mask]), np.sqrt(var[mask]))
    return float(rho)


def region_masks(labels, ref_ct, class_names, bone_threshold_hu=300.0):
    """Regiões do MAE: corpo inteiro, osso (CT >= limiar) e cada órgão."""
    labels = _array(labels, np.int64)
    regions = {"body": np.ones(labels.shape, dtype=bool), "bone": _array(ref_ct) >= bone_threshold_hu}
    for c, name in enumerate(class_names):
        if c > 0:
            regions[name] = labels == c
    return regions


@dataclass
class VariantEvaluation:
    variant: str
    T: int
    case_ids: List[str]
    rows: List[dict] = field(default_factory=list)
    calibration: Dict[str, Optional[dict]] = field(default_factory=dict)
    z_values: Optional[np.ndarray] = None


def _nan_to_none(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def evaluate_metrics(variant, predictions, cases, class_names, bone_threshold_hu=300.0):
    """
    MAE por região e DICE fuzzy por classe, por caso e agregados (voxel a voxel).

    Args:
        predictions (dict): case_id -> StochasticPrediction.
        cases (dict): case_id -> CaseBundle.

    Returns:
        list[dict]: Linhas (variant, region, metric, value, case).
    """
    rows = []
    pooled_err = {}
    pooled_dice = {}
    for case_id in sorted(predictions):
        pred, case = predictions[case_id], cases[case_id]
        if pred.reg_mean is not None:
            ct = _array(case.ct)
            for region, mask in region_masks(case.labels, ct, class_names, bone_threshold_hu).items():
                if not mask.any():
                    logger.warning(f"Região '{region}' vazia no caso {case_id}; MAE omitido")
                    continue
                value = mae_masked(pred.reg_mean, ct, mask)
                rows.append(dict(variant=variant, region=region, metric="mae", value=value, case=case_id))
                err = np.abs(_array(pred.reg_mean)[mask] - ct[mask])
                acc = pooled_err.setdefault(region, [0.0, 0])
                acc[0] += float(err.sum())
                acc[1] += int(err.size)
        if pred.seg_mean_prob is not None:
            prob = _array(pred.seg_mean_prob)
            labels = _array(case.labels, np.int64)
            for c, name in enumerate(class_names):
                value = fuzzy_dice(prob, labels, c)
                rows.append(dict(variant=variant, region=name, metric="dice", value=value, case=case_id))
                acc = pooled_dice.setdefault(name, [0.0, 0.0])
                acc[0] += float(2.0 * (prob[c] * (labels == c)).sum())
                acc[1] += float(prob[c].sum() + (labels == c).sum())
    for region, (total, count) in pooled_err.items():
        rows.append(dict(variant=variant, region=region, metric="mae", value=total / count, case=POOLED))
    for name, (num, denom) in pooled_dice.items():
        rows.append(dict(variant=variant, region=name, metric="dice", value=num / denom if denom else 1.0, case=POOLED))
    return rows


def _calibration_block(z, pred_mean, total_var, intrinsic, param, ref, bins):
    stats = zscore_stats_chi2(z, bins)
    block = stats.as_dict()
    block["zero_variance_voxels"] = int(np.sum(_array(total_var) <= 0))
    block["spearman_abs_error_std"] = _nan_to_none(uncertainty_correlation(pred_mean, total_var, ref))
    block["mean_intrinsic_var"] = float(np.mean(intrinsic))
    block["mean_param_var"] = float(np.mean(param))
    return block


def evaluate_calibration(predictions, cases, bins=8):
    """
    Estatísticas de z-score por caso e agregadas (concatenando todos os voxels).

    Returns:
        tuple: (dict case_id|"pooled" -> bloco ou None, z agregados)
    """
    calibration = {}
    z_all, parts = [], {"mean": [], "var": [], "intrinsic": [], "param": [], "ref": []}
    for case_id in sorted(predictions):
        pred = predictions[case_id]
        if pred.reg_mean is None:
            continue
        total = _array(pred.reg_total_var)
        if not np.any(total > 0):
            logger.warning(f"Variância total nula no caso {case_id}; calibração não se aplica")
            calibration[case_id] = None
            continue
        ref = _array(cases[case_id].ct)
        valid = total > 0
        if not valid.all():
            logger.warning(
                f"Variância total nula em {int(np.sum(~valid))} voxels do caso {case_id}; excluídos dos z-scores"
            )
        z = zscore_map(pred.reg_mean, total, ref, mask=valid)
        calibration[case_id] = _calibration_block(
            z, pred.reg_mean, total, pred.reg_intrinsic_var, pred.reg_param_var, ref, bins
        )
        z_all.append(z[np.isfinite(z)])
        for key, value in zip(parts, (pred.reg_mean, total, pred.reg_intrinsic_var, pred.reg_param_var, ref)):
            parts[key].append(_array(value).ravel())
    if not z_all:
        calibration[POOLED] = None
        return calibration, None
    z_pooled = np.concatenate(z_all)
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    calibration[POOLED] = _calibration_block(
        z_pooled, cat["mean"], cat["var"], cat["intrinsic"], cat["param"], cat["ref"], bins
    )
    return calibration, z_pooled


def evaluate_variant(variant, predictions, cases, class_names, cfg):
    """Métricas e calibração de uma variante sobre os casos de teste."""
    if not predictions:
        raise EvaluationError(f"Nenhuma predição para a variante {variant}")
    missing = sorted(set(predictions) - set(cases))
    if missing:
        raise EvaluationError(f"Casos sem referência: {missing}")
    rows = evaluate_metrics(variant, predictions, cases, class_names, cfg.bone_threshold_hu)
    calibration, z = evaluate_calibration(predictions, cases, cfg.bins)
    first = predictions[sorted(predictions)[0]]
    return VariantEvaluation(
        variant=variant, T=first.T, case_ids=sorted(predictions), rows=rows, calibration=calibration, z_values=z
    )


def histogram_frame(stats):
    edges = [-np.inf, *stats.edges, np.inf]
    return pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": stats.counts}, columns=HIST_COLUMNS)


def write_metrics_csv(rows, path):
    frame = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    frame.to_csv(path, index=False)
    return Path(path)


def write_json(data, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return Path(path)


def _plot_histogram(stats, variant, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    expected = stats.n / len(stats.counts)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(stats.counts)), stats.counts, color="steelblue", label="observado")
    ax.axhline(expected, color="black", linestyle="--", label="esperado N(0,1)")
    ax.set_xlabel("faixa equiprovável de z")
    ax.set_ylabel("voxels")
    ax.set_title(f"{variant}: z = {stats.mean:.2f} ± {stats.std:.2f}, p = {stats.p:.3g}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def make_report(evaluations, out_dir, bins=8, plot=False):
    """
    Grava ``report.json``, ``metrics.csv`` e ``zscore_hist_<variante>.csv`` (e PNG opcional).

    Args:
        evaluations (list[VariantEvaluation]): Ao menos uma variante.
        out_dir: Diretório do relatório.

    Returns:
        list[Path]: Arquivos gravados.
    """
    if not evaluations:
        raise EvaluationError("Relatório exige ao menos uma variante avaliada")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    rows = []
    report = {"bins": bins, "variants": {}}
    for ev in sorted(evaluations, key=lambda e: e.variant):
        rows.extend(ev.rows)
        report["variants"][ev.variant] = {
            "T": ev.T,
            "case_ids": ev.case_ids,
            "metrics": [{k: r[k] for k in ("region", "metric", "value", "case")} for r in ev.rows],
            "calibration": ev.calibration,
        }
        pooled = ev.calibration.get(POOLED)
        if pooled is not None:
            stats = ZScoreStats(**{k: pooled[k] for k in ZScoreStats.__dataclass_fields__})
            hist_path = out_dir / f"zscore_hist_{ev.variant}.csv"
            histogram_frame(stats).to_csv(hist_path, index=False)
            written.append(hist_path)
            if plot:
                written.append(_plot_histogram(stats, ev.variant, out_dir / f"zscore_hist_{ev.variant}.png"))
    written.append(write_metrics_csv(rows, out_dir / "metrics.csv"))
    written.append(write_json(report, out_dir / "report.json"))
    for path in written:
        logger.info(f"Relatório: {path}")
    return written
