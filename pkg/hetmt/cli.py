"""
Ponto de entrada de linha de comando: genphantom, train, infer, eval, calibrate e report.

Exemplo (quickstart):
    python -m hetmt genphantom --out runs/demo --cases 12 --seed 0
    python -m hetmt train --out runs/demo --variant M4
    python -m hetmt infer --out runs/demo --variant M4 --T 20
    python -m hetmt eval --out runs/demo --variant M4
    python -m hetmt calibrate --out runs/demo --variant M4
"""

import argparse
import datetime
import json
import logging
import os
import sys
from pathlib import Path

import torch

from hetmt.config import RunConfig, load_run_config, resolve_variant
from hetmt.errors import CheckpointError, ConfigError, EvaluationError, HetmtError
from hetmt.evaluation import (
    POOLED,
    ZScoreStats,
    evaluate_calibration,
    evaluate_metrics,
    evaluate_variant,
    histogram_frame,
    make_report,
    write_json,
    write_metrics_csv,
)
from hetmt.inference import predict_manifest, read_prediction
from hetmt.synthdata import gen_dataset, load_case, load_manifest, manifest_dir, select_cases
from hetmt.trainer import list_checkpoints, train_loop

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
THREADS_ENV = "HETMT_THREADS"
RUN_MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse que sinaliza erro de uso com exceção (código 1) em vez de sys.exit(2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: erro: {message}")


def setup_logging(out_dir=None, verbose=False):
    """Console + arquivo ``<out>/logs/log_<timestamp>.log``."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_hetmt", False):
            root.removeHandler(handler)
            handler.close()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    formatter = logging.Formatter(LOG_FORMAT)

    console = logging.StreamHandler()
    console.setLevel(logging.DEBUG if verbose else logging.INFO)
    console.setFormatter(formatter)
    console._hetmt = True
    root.addHandler(console)

    if out_dir is not None:
        log_dir = Path(out_dir) / "logs"
        log_dir.mkdir(parents=True, exist_ok=True)
        current_time = datetime.datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
        file_handler = logging.FileHandler(log_dir / f"log_{current_time}.log", encoding="utf-8")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        file_handler._hetmt = True
        root.addHandler(file_handler)


def configure_torch():
    threads = os.environ.get(THREADS_ENV)
    if threads:
        try:
            n = int(threads)
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV} deve ser inteiro (recebido '{threads}')") from e
        if n < 1:
            raise ConfigError(f"{THREADS_ENV} deve ser >= 1")
        torch.set_num_threads(n)
        logger.info(f"torch limitado a {n} threads")
    torch.use_deterministic_algorithms(True, warn_only=True)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="Arquivo JSON de configuração (RunConfig)")
    common.add_argument("--out", help="Diretório da execução")
    common.add_argument("--seed", type=int, help="Seed global")
    common.add_argument("--set", action="append", default=[], metavar="SECAO.CHAVE=VALOR", help="Override genérico")
    common.add_argument("--verbose", action="store_true")

    parser = _Parser(prog="hetmt", description="Regressão MR->CT e segmentação com incerteza")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("genphantom", parents=[common], help="Gera o dataset de fantomas")
    p.add_argument("--cases", type=int, default=12)

    p = sub.add_parser("train", parents=[common], help="Treina uma variante")
    p.add_argument("--variant")
    p.add_argument("--iterations", type=int)
    p.add_argument("--holdout-fold", type=int)
    p.add_argument("--resume", help="Stem de checkpoint ou 'latest'")
    p.add_argument("--no-progress", action="store_true")

    p = sub.add_parser("infer", parents=[common], help="Inferência MC dropout nos casos de teste")
    p.add_argument("--variant")
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--stride", type=int)
    p.add_argument("--checkpoints", type=int, help="Número de checkpoints (os mais recentes)")
    p.add_argument("--holdout-fold", type=int)
    p.add_argument("--save-samples", action="store_true")

    for name, text in (("eval", "MAE e DICE fuzzy"), ("calibrate", "z-scores e teste chi^2")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--variant")
        p.add_argument("--bins", type=int)
        p.add_argument("--holdout-fold", type=int)

    p = sub.add_parser("report", parents=[common], help="Relatório comparativo entre variantes")
    p.add_argument("--variants", nargs="+")
    p.add_argument("--bins", type=int)
    p.add_argument("--holdout-fold", type=int)
    p.add_argument("--plot", action="store_true")
    return parser


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def build_config(args):
    """Arquivo de configuração, depois flags explícitas, depois ``--set``."""
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    if args.out:
        cfg.paths.out = args.out
    flags = {
        "variant": ("model", "variant"),
        "iterations": ("train", "max_iterations"),
        "T": ("inference", "T"),
        "stride": ("inference", "stride"),
        "checkpoints": ("inference", "n_checkpoints"),
        "bins": ("eval", "bins"),
        "holdout_fold": ("paths", "holdout_fold"),
    }
    for flag, (section, key) in flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(getattr(cfg, section), key, value)
    if getattr(args, "save_samples", False):
        cfg.inference.save_samples = True
    if getattr(args, "plot", False):
        cfg.eval.plot = True
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set espera SECAO.CHAVE=VALOR (recebido '{item}')")
        key, raw = item.split("=", 1)
        cfg.set(key.strip(), _parse_value(raw))
    cfg.model.variant = resolve_variant(cfg.model.variant)
    try:
        return cfg.validate()
    except HetmtError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Configuração inválida: {e}") from e


def record_outputs(out_dir, command, paths):
    """Acrescenta arquivos produzidos a ``<out>/run_manifest.json``."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / RUN_MANIFEST
    data = {"files": {}}
    if manifest_path.exists():
        with open(manifest_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    # checkpoints removidos pela retenção saem do manifesto
    data["files"] = {k: v for k, v in data["files"].items() if (out_dir / k).exists()}
    for path in paths:
        path = Path(path)
        try:
            rel = path.resolve().relative_to(out_dir.resolve())
        except ValueError:
            rel = path
        data["files"][rel.as_posix()] = command
    write_json(data, manifest_path)
    return manifest_path


def _variant_dir(cfg, variant=None):
    return Path(cfg.paths.out) / (variant or cfg.model.variant)


def _test_cases(cfg):
    manifest_path = cfg.paths.manifest_path()
    entries = select_cases(load_manifest(manifest_path), split="test", holdout_fold=cfg.paths.holdout_fold)
    if not entries:
        raise EvaluationError(f"Nenhum caso de teste em {manifest_path}")
    base = manifest_dir(manifest_path)
    return {e["id"]: load_case(e, base, num_classes=cfg.model.num_classes) for e in entries}


def _load_predictions(pred_root, case_ids):
    predictions = {}
    for case_id in case_ids:
        pred_dir = Path(pred_root) / case_id
        if not (pred_dir / "index.json").exists():
            raise EvaluationError(f"Predição ausente para o caso {case_id} em {pred_root}")
        predictions[case_id] = read_prediction(pred_dir)
    return predictions


def cmd_genphantom(cfg, args):
    if args.cases < 1:
        raise ConfigError(f"--cases deve ser >= 1 (recebido {args.cases})")
    manifest_path = cfg.paths.manifest_path()
    out = manifest_path.parent
    entries = gen_dataset(cfg.phantom, args.cases, out)
    files = [out / e[name] for e in entries for name in ("mr", "ct", "labels", "sigma_true")]
    files += [f.with_suffix(".bin") for f in files]
    return [manifest_path, *sorted(files)]


def cmd_train(cfg, args):
    out = _variant_dir(cfg)
    kept = train_loop(
        cfg.train,
        cfg.model,
        cfg.paths.manifest_path(),
        out,
        holdout_fold=cfg.paths.holdout_fold,
        resume=args.resume,
        progress=not args.no_progress,
    )
    files = [out / "loss_history.csv", out / "train_config.json"]
    return files + [s.with_suffix(ext) for s in kept for ext in (".pt", ".json")]


def cmd_infer(cfg, args):
    out = _variant_dir(cfg)
    stems = list_checkpoints(out / "checkpoints")
    n = cfg.inference.n_checkpoints
    if len(stems) < n:
        raise CheckpointError(f"{len(stems)} checkpoints em {out / 'checkpoints'}, são necessários {n}")
    patch = cfg.inference.patch_size or cfg.train.patch_size
    written = predict_manifest(
        stems[-n:],
        cfg.paths.manifest_path(),
        out / "predictions",
        cfg.inference,
        patch,
        split="test",
        holdout_fold=cfg.paths.holdout_fold,
    )
    return written


def cmd_eval(cfg, args):
    variant = cfg.model.variant
    cases = _test_cases(cfg)
    predictions = _load_predictions(_variant_dir(cfg) / "predictions", sorted(cases))
    rows = evaluate_metrics(variant, predictions, cases, cfg.phantom.class_names, cfg.eval.bone_threshold_hu)
    path = write_metrics_csv(rows, _variant_dir(cfg) / "metrics.csv")
    for row in rows:
        if row["case"] == POOLED:
            logger.info(f"{variant} {row['metric']} {row['region']}: {row['value']:.4f}")
    return [path]


def cmd_calibrate(cfg, args):
    variant = cfg.model.variant
    cases = _test_cases(cfg)
    predictions = _load_predictions(_variant_dir(cfg) / "predictions", sorted(cases))
    calibration, _ = evaluate_calibration(predictions, cases, cfg.eval.bins)
    out = _variant_dir(cfg)
    files = [write_json({"variant": variant, "bins": cfg.eval.bins, "calibration": calibration}, out / "calibration.json")]
    pooled = calibration.get(POOLED)
    if pooled is None:
        logger.warning(f"{variant} sem variância preditiva; calibração não se aplica")
        return files
    stats = ZScoreStats(**{k: pooled[k] for k in ZScoreStats.__dataclass_fields__})
    hist_path = out / "zscore_hist.csv"
    histogram_frame(stats).to_csv(hist_path, index=False)
    logger.info(
        f"{variant}: z = {stats.mean:.3f} ± {stats.std:.3f}, chi2 = {stats.chi2:.2f} "
        f"(dof {stats.dof}), p = {stats.p:.3g}"
    )
    return files + [hist_path]


def _discover_variants(cfg):
    out = Path(cfg.paths.out)
    return sorted(p.name for p in out.iterdir() if (p / "predictions").is_dir()) if out.is_dir() else []


def cmd_report(cfg, args):
    variants = args.variants or list(cfg.eval.variants) or _discover_variants(cfg)
    if not variants:
        raise EvaluationError(f"Nenhuma variante com predições em {cfg.paths.out}")
    cases = _test_cases(cfg)
    evaluations = []
    for name in variants:
        variant = resolve_variant(name)
        predictions = _load_predictions(_variant_dir(cfg, variant) / "predictions", sorted(cases))
        evaluations.append(evaluate_variant(variant, predictions, cases, cfg.phantom.class_names, cfg.eval))
    return make_report(evaluations, Path(cfg.paths.out) / "report", bins=cfg.eval.bins, plot=cfg.eval.plot)


COMMANDS = {
    "genphantom": cmd_genphantom,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "calibrate": cmd_calibrate,
    "report": cmd_report,
}


def dispatch(argv):
    """
    Executa um subcomando.

    Returns:
        int: 0 em sucesso, 1 em erro de uso, 2 em erro de execução.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    setup_logging(verbose=args.verbose)
    try:
        cfg = build_config(args)
        out_dir = Path(cfg.paths.out)
        setup_logging(out_dir, verbose=args.verbose)
        configure_torch()
        logger.info(f"Comando '{args.command}' em {out_dir} (variante {cfg.model.variant}, seed {cfg.train.seed})")
        produced = COMMANDS[args.command](cfg, args)
        record_outputs(out_dir, args.command, produced)
    except (HetmtError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    logger.info(f"Comando '{args.command}' concluído")
    return EXIT_OK


def main():
    return dispatch(sys.argv[1:])
