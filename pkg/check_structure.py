#!/usr/bin/env python3
"""
Script para verificar a estrutura de um diretório de execução do hetmt.

Uso: python check_structure.py [runs/default]
"""

import json
import sys
from pathlib import Path

from colorama import Fore, Style, init

from hetmt.config import VARIANTS
from hetmt.trainer import list_checkpoints


def check_file_exists(path, description):
    """Verifica se um arquivo existe e exibe status."""
    exists = Path(path).exists()
    status = f"{Fore.GREEN}✅" if exists else f"{Fore.RED}❌"
    print(f"{status} {description}: {path}{Style.RESET_ALL}")
    return exists


def check_directory_exists(path, description):
    """Verifica se um diretório existe e exibe status."""
    exists = Path(path).is_dir()
    status = "📁" if exists else f"{Fore.RED}❌"
    print(f"{status} {description}: {path}{Style.RESET_ALL}")
    return exists


def check_variant(run_dir, variant):
    """Checkpoints, histórico e predições de uma variante treinada."""
    vdir = Path(run_dir) / variant
    print(f"\n🤖 Variante {variant}:")
    check_file_exists(vdir / "train_config.json", "Configuração do treino")
    check_file_exists(vdir / "loss_history.csv", "Histórico da loss")
    stems = list_checkpoints(vdir / "checkpoints")
    print(f"   {len(stems)} checkpoint(s): {', '.join(s.name for s in stems) or '-'}")
    n_pred = 0
    if check_directory_exists(vdir / "predictions", "Predições"):
        n_pred = sum(1 for p in (vdir / "predictions").iterdir() if (p / "index.json").exists())
        print(f"   {n_pred} caso(s) com predição")
    check_file_exists(vdir / "metrics.csv", "Métricas")
    check_file_exists(vdir / "calibration.json", "Calibração")
    return bool(stems), n_pred


def check_run_manifest(run_dir):
    """Confere que todo arquivo listado em run_manifest.json existe."""
    path = Path(run_dir) / "run_manifest.json"
    if not check_file_exists(path, "Manifesto da execução"):
        return []
    with open(path, "r", encoding="utf-8") as f:
        files = json.load(f).get("files", {})
    missing = [name for name in sorted(files) if not (Path(run_dir) / name).exists()]
    for name in missing:
        print(f"{Fore.RED}❌ Listado mas ausente: {name}{Style.RESET_ALL}")
    print(f"   {len(files) - len(missing)}/{len(files)} arquivos presentes")
    return missing


def main(run_dir="runs/default"):
    run_dir = Path(run_dir)
    print("🔍 Verificando Estrutura da Execução")
    print("=" * 50)

    print("\n📂 Estrutura de Diretórios:")
    check_directory_exists(run_dir, "Diretório da execução")
    check_directory_exists(run_dir / "data", "Dataset de fantomas")
    check_directory_exists(run_dir / "logs", "Logs")

    print("\n📊 Dados:")
    data_ok = check_file_exists(run_dir / "data" / "manifest.json", "Manifesto do dataset")

    trained, predicted = [], []
    for variant in VARIANTS:
        if (run_dir / variant).is_dir():
            has_ckpt, n_pred = check_variant(run_dir, variant)
            if has_ckpt:
                trained.append(variant)
            if n_pred:
                predicted.append(variant)

    print("\n📋 Relatório:")
    report_ok = check_file_exists(run_dir / "report" / "report.json", "Relatório")
    missing = check_run_manifest(run_dir)

    print("\n" + "=" * 50)
    print("📋 RESUMO E PRÓXIMOS PASSOS:")
    print("=" * 50)

    if not data_ok:
        print("❌ Dataset não gerado.")
        print(f"   Execute: python -m hetmt genphantom --out {run_dir}")
    if not trained:
        print("❌ Nenhuma variante treinada.")
        print(f"   Execute: python -m hetmt train --out {run_dir} --variant M4")
    else:
        print(f"✅ {len(trained)} variante(s) treinada(s): {', '.join(trained)}")
    untested = [v for v in trained if v not in predicted]
    for variant in untested:
        print(f"   Execute: python -m hetmt infer --out {run_dir} --variant {variant}")
    if predicted and not report_ok:
        print(f"   Execute: python -m hetmt report --out {run_dir}")
    if missing:
        print(f"❌ {len(missing)} arquivo(s) do manifesto ausente(s).")
    return 0 if data_ok and not missing else 1


if __name__ == "__main__":
    init()
    sys.exit(main(*sys.argv[1:2]))
