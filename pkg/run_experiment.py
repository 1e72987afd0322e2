#!/usr/bin/env python3
"""
Reprodução em escala de desktop das comparações de calibração e acurácia entre variantes.

Para cada seed: gera 16 fantomas (12 treino / 4 teste), treina M4, M1_reg e
(na primeira seed) M3, roda a inferência com T=20 sobre os 2 últimos
checkpoints e confere:
  - calibração: z agregado do M4 com |média| < 0.2 e desvio em [0.75, 1.25];
    desvio do M3 mais longe de 1 que o do M4;
  - acurácia: MAE do corpo do M4 <= M1_reg e DICE fuzzy médio dos órgãos >= 0.85
    (maioria das seeds).

Uso: python run_experiment.py [runs/experiment] [iterações]
"""

import json
import logging
import sys
from pathlib import Path

import pandas as pd
from colorama import Fore, Style, init

from hetmt.cli import dispatch
from hetmt.config import DEFAULT_CLASS_NAMES

logger = logging.getLogger(__name__)

SEEDS = (0, 1, 2)
N_CASES = 16
ORGANS = DEFAULT_CLASS_NAMES[1:]


def _run(*argv):
    code = dispatch([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"Comando falhou ({code}): {' '.join(str(a) for a in argv)}")


def _pipeline(out, variant, seed, iterations):
    common = ["--out", out, "--seed", seed, "--variant", variant]
    _run(
        "train", *common, "--iterations", iterations, "--no-progress",
        "--set", f"train.checkpoint_interval={max(iterations // 2, 1)}",
    )
    _run("infer", *common, "--T", 20, "--checkpoints", 2)
    _run("eval", *common)
    _run("calibrate", *common)


def _pooled_z(out, variant):
    with open(Path(out) / variant / "calibration.json", "r", encoding="utf-8") as f:
        return json.load(f)["calibration"]["pooled"]


def _pooled_metric(out, variant, metric, regions):
    frame = pd.read_csv(Path(out) / variant / "metrics.csv")
    rows = frame[(frame["case"] == "pooled") & (frame["metric"] == metric) & (frame["region"].isin(regions))]
    return float(rows["value"].mean())


def run_seed(root, seed, iterations, with_homo):
    out = Path(root) / f"seed_{seed}"
    _run("genphantom", "--out", out, "--seed", seed, "--cases", N_CASES)
    variants = ["M4_multitask_hetero", "M1_reg"] + (["M3_multitask_homo"] if with_homo else [])
    for variant in variants:
        _pipeline(out, variant, seed, iterations)
    _run("report", "--out", out, "--seed", seed)
    result = {
        "m4_z": _pooled_z(out, "M4_multitask_hetero"),
        "m4_mae": _pooled_metric(out, "M4_multitask_hetero", "mae", ["body"]),
        "m1_mae": _pooled_metric(out, "M1_reg", "mae", ["body"]),
        "m4_dice": _pooled_metric(out, "M4_multitask_hetero", "dice", ORGANS),
    }
    if with_homo:
        result["m3_z"] = _pooled_z(out, "M3_multitask_homo")
    return result


def check(description, ok):
    status = f"{Fore.GREEN}✅" if ok else f"{Fore.RED}❌"
    print(f"{status} {description}{Style.RESET_ALL}")
    return ok


def run_experiment(root="runs/experiment", iterations=2000, seeds=SEEDS):
    """Executa todas as seeds e retorna (resultados, critérios de calibração e de acurácia)."""
    results = {seed: run_seed(root, seed, iterations, with_homo=(i == 0)) for i, seed in enumerate(seeds)}
    first = results[seeds[0]]
    m4, m3 = first["m4_z"], first["m3_z"]
    print("\n📋 Calibração (primeira seed):")
    print(f"   M4: z = {m4['mean']:.3f} ± {m4['std']:.3f}, p = {m4['p']:.3g}")
    print(f"   M3: z = {m3['mean']:.3f} ± {m3['std']:.3f}, p = {m3['p']:.3g}")
    calibration_ok = all(
        [
            check("M4 |média z| < 0.2", abs(m4["mean"]) < 0.2),
            check("M4 desvio z em [0.75, 1.25]", 0.75 <= m4["std"] <= 1.25),
            check("M3 desvio z mais longe de 1 que M4", abs(m3["std"] - 1.0) > abs(m4["std"] - 1.0)),
        ]
    )

    print("\n📋 Acurácia por seed:")
    passed = 0
    for seed, r in results.items():
        print(f"   seed {seed}: MAE corpo M4={r['m4_mae']:.1f} M1={r['m1_mae']:.1f}, DICE M4={r['m4_dice']:.3f}")
        passed += int(r["m4_mae"] <= r["m1_mae"] and r["m4_dice"] >= 0.85)
    accuracy_ok = check(f"M4 <= M1 em MAE e DICE >= 0.85 em {passed}/{len(results)} seeds", passed > len(results) / 2)
    return results, calibration_ok, accuracy_ok


if __name__ == "__main__":
    init()
    root = sys.argv[1] if len(sys.argv) > 1 else "runs/experiment"
    iterations = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
    print("🔬 Reproduzindo comparações de calibração e acurácia...")
    _, calibration_ok, accuracy_ok = run_experiment(root, iterations)
    sys.exit(0 if calibration_ok and accuracy_ok else 1)
