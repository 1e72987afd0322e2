#!/usr/bin/env python3
"""
Script para gerar o arquivo de configuração padrão do hetmt (configs/default.json).
"""

import sys

from colorama import Fore, Style, init

from hetmt.config import RunConfig, save_run_config


def create_config_file(config_path="configs/default.json", variant=None):
    """Cria o arquivo de configuração com os valores padrão (opcionalmente para outra variante)."""
    cfg = RunConfig()
    if variant:
        cfg.set("model.variant", variant)
    cfg.validate()
    config_path = save_run_config(cfg, config_path)
    print(f"{Fore.GREEN}✅ Arquivo de configuração criado: {config_path}{Style.RESET_ALL}")

    manifest = cfg.paths.manifest_path()
    if manifest.exists():
        print("✅ Dataset de fantomas encontrado!")
        print(f"   - Manifesto: {manifest}")
        print("\n🚀 Agora você pode executar:")
        print(f"   python -m hetmt train --config {config_path}")
    else:
        print(f"{Fore.YELLOW}⚠️  Dataset não encontrado em {manifest}.{Style.RESET_ALL}")
        print(f"   Execute primeiro: python -m hetmt genphantom --config {config_path}")

    return config_path


if __name__ == "__main__":
    init()
    print("🔧 Gerando arquivo de configuração do hetmt...")
    args = sys.argv[1:]
    create_config_file(*args[:2])
