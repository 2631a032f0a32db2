"""Command-line surface: corpus generation, teacher training, distillation,
post-training quantization, evaluation, and report assembly.

Every subcommand takes an optional JSON config file; explicit flags override
config values, and the DQ_SEED environment variable is the lowest-precedence
seed source. The effective configuration is echoed into <out>/manifest.json.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import click
import numpy as np

from . import checkpoint as ckpt
from .data import Corpus, default_language_specs, gen_corpus
from .errors import DQError
from .losses import LossWeights
from .metrics import csv_header, evaluate
from .model import SeqModel, desk_student_config, desk_teacher_config
from .training import (STRATEGIES, TrainConfig, finalize_quantized,
                       run_training)

RESULTS_FILE = "results.csv"


def _load_config(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _pick(flag, config: dict, key: str, default):
    if flag is not None:
        return flag
    if key in config:
        return config[key]
    return default


def _pick_seed(flag, config: dict) -> int:
    if flag is not None:
        return flag
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("DQ_SEED")
    return int(env) if env else 0


def _write_manifest(out_dir: Path, command: str, effective: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    manifest = {"runs": []}
    if path.exists():
        manifest = json.loads(path.read_text())
    manifest["runs"].append({"command": command, "config": effective})
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _append_results(out_dir: Path, report, lang_names) -> None:
    path = out_dir / RESULTS_FILE
    lock = out_dir / (RESULTS_FILE + ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise click.ClickException(f"{path} is locked by another writer")
    try:
        new = not path.exists()
        with open(path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(csv_header(lang_names))
            w.writerow(report.csv_row(lang_names))
    finally:
        os.close(fd)
        os.unlink(lock)


def _write_metrics(out_dir: Path, rows, plans) -> None:
    cols = ["step", "lr", "l_pred", "l_hidn", "l_kd", "l_quan", "l_ce", "l_model"]
    with open(out_dir / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in rows:
            w.writerow([row["step"]] + [repr(row[c]) for c in cols[1:]])
    with open(out_dir / "plans.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "strategy", "f"])
        for step, strategy, f_str in plans:
            w.writerow([step, strategy, f_str])


def _train_config(config: dict, seed: int, strategy: str, **over) -> TrainConfig:
    def pick(key, default=None):
        val = over.get(key)
        if val is None:
            val = config.get(key, default)
        return val

    weights = LossWeights(
        alpha=pick("alpha", 0.5),
        gamma=pick("gamma", 1.0),
        temperature=pick("temp", 1.0),
        lam=tuple(config.get("lambda", ())),
    )
    kwargs = {}
    for key in ("peak_lr", "warmup_steps", "epochs", "batch_size", "bits",
                "freeze_encoder", "refresh_interval", "grad_clip"):
        val = pick(key)
        if val is not None:
            kwargs[key] = val
    return TrainConfig(strategy=strategy, seed=seed, weights=weights, **kwargs)


@click.group()
def main():
    """Joint distillation + quantization toolkit."""


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int)
@click.option("--train", "n_train", type=int)
@click.option("--dev", "n_dev", type=int)
@click.option("--test", "n_test", type=int)
def gen_data(config_path, out_dir, seed, n_train, n_dev, n_test):
    """Generate the synthetic multi-language corpus."""
    config = _load_config(config_path)
    seed = _pick_seed(seed, config)
    sizes = {
        "train": _pick(n_train, config, "train", 80),
        "dev": _pick(n_dev, config, "dev", 10),
        "test": _pick(n_test, config, "test", 40),
    }
    out = Path(out_dir)
    corpus = gen_corpus(default_language_specs(), sizes, seed)
    corpus.save(out)
    _write_manifest(out, "gen-data", {"seed": seed, "sizes": sizes})
    click.echo(f"wrote corpus ({sum(sizes.values())} pairs/language) to {out}")


@main.command("train-teacher")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int)
@click.option("--epochs", type=int)
@click.option("--peak-lr", "peak_lr", type=float)
@click.option("--warmup", "warmup_steps", type=int)
def train_teacher(config_path, data_dir, out_dir, seed, epochs, peak_lr,
                  warmup_steps):
    """Supervised training of the desk-scale teacher on the corpus."""
    config = _load_config(config_path)
    seed = _pick_seed(seed, config)
    corpus = Corpus.load(data_dir)
    tok = corpus.tokenizer()
    cfg = _train_config(config, seed, "none", epochs=epochs, peak_lr=peak_lr,
                        warmup_steps=warmup_steps)
    cfg.freeze_encoder = False
    model = SeqModel(desk_teacher_config(tok.vocab_size), role="teacher", seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, rows, plans = run_training(cfg, corpus, model)
    _write_metrics(out, rows, plans)
    size = ckpt.save_checkpoint(model, out / "teacher.dqwc", "f32",
                                meta={"strategy": "teacher", "seed": seed})
    report = evaluate(model, corpus, strategy="teacher", seed=seed,
                      model_bytes=size, reference_bytes=size)
    (out / "teacher_eval.json").write_text(report.to_json())
    _append_results(out, report, [s.name for s in corpus.specs])
    _write_manifest(out, "train-teacher", {"seed": seed, "epochs": cfg.epochs,
                                           "data": str(data_dir)})
    click.echo(f"teacher avg CER {report.avg_cer:.4f}, checkpoint {size} bytes")


@main.command("distill")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--teacher", "teacher_path", type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--strategy", type=click.Choice(STRATEGIES))
@click.option("--bits", type=int)
@click.option("--alpha", type=float)
@click.option("--gamma", type=float)
@click.option("--temp", type=float)
@click.option("--freeze-encoder/--no-freeze-encoder", "freeze_encoder", default=None)
@click.option("--refresh-interval", type=int)
@click.option("--seed", type=int)
@click.option("--epochs", type=int)
def distill(config_path, data_dir, teacher_path, out_dir, strategy, bits,
            alpha, gamma, temp, freeze_encoder, refresh_interval, seed, epochs):
    """Train a student; all strategies except `none` require --teacher."""
    config = _load_config(config_path)
    seed = _pick_seed(seed, config)
    strategy = _pick(strategy, config, "strategy", "none")
    corpus = Corpus.load(data_dir)
    tok = corpus.tokenizer()
    teacher = None
    teacher_bytes = 0
    if strategy != "none":
        teacher_path = _pick(teacher_path, config, "teacher", None)
        if teacher_path is None or not Path(teacher_path).exists():
            raise click.ClickException(
                f"strategy {strategy!r} needs a trained teacher (--teacher)")
        teacher, _meta = ckpt.load_checkpoint(teacher_path)
        teacher_bytes = Path(teacher_path).stat().st_size
    cfg = _train_config(config, seed, strategy, bits=bits, alpha=alpha,
                        gamma=gamma, temp=temp, freeze_encoder=freeze_encoder,
                        refresh_interval=refresh_interval, epochs=epochs)
    student = SeqModel(desk_student_config(tok.vocab_size), role="student",
                       seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    student, rows, plans = run_training(cfg, corpus, student, teacher=teacher)
    _write_metrics(out, rows, plans)
    meta = {"strategy": strategy, "seed": seed}
    if strategy == "dq":
        finalize_quantized(student, cfg.bits)
        size = ckpt.save_checkpoint(student, out / "student.dqwc", "q8",
                                    meta=meta, bits=cfg.bits)
        report_bits = cfg.bits
    else:
        size = ckpt.save_checkpoint(student, out / "student.dqwc", "f32", meta=meta)
        report_bits = 0
    report = evaluate(student, corpus, strategy=strategy, bits=report_bits,
                      seed=seed, model_bytes=size,
                      reference_bytes=teacher_bytes or size)
    (out / "eval.json").write_text(report.to_json())
    _append_results(out, report, [s.name for s in corpus.specs])
    _write_manifest(out, "distill", {
        "seed": seed, "strategy": strategy, "epochs": cfg.epochs,
        "bits": cfg.bits if strategy == "dq" else 0, "alpha": cfg.weights.alpha,
        "gamma": cfg.weights.gamma, "temp": cfg.weights.temperature,
        "freeze_encoder": cfg.freeze_encoder, "data": str(data_dir),
        "teacher": str(teacher_path) if teacher_path else None,
    })
    click.echo(f"{strategy} student avg CER {report.avg_cer:.4f}, "
               f"checkpoint {size} bytes")


@main.command("quantize")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--bits", type=int)
@click.option("--data", "data_dir", type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int)
def quantize_cmd(config_path, model_path, bits, data_dir, out_dir, seed):
    """Post-training quantization of an existing float checkpoint."""
    config = _load_config(config_path)
    seed = _pick_seed(seed, config)
    bits = _pick(bits, config, "bits", 8)
    model, meta = ckpt.load_checkpoint(model_path)
    finalize_quantized(model, bits)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    strategy = meta.get("strategy", "unknown") + "+ptq"
    size = ckpt.save_checkpoint(model, out / "quantized.dqwc", "q8",
                                meta={"strategy": strategy, "seed": seed},
                                bits=bits)
    _write_manifest(out, "quantize", {"model": str(model_path), "bits": bits,
                                      "seed": seed})
    if data_dir:
        corpus = Corpus.load(data_dir)
        report = evaluate(model, corpus, strategy=strategy, bits=bits,
                          seed=seed, model_bytes=size)
        (out / "eval.json").write_text(report.to_json())
        _append_results(out, report, [s.name for s in corpus.specs])
        click.echo(f"quantized avg CER {report.avg_cer:.4f}, {size} bytes")
    else:
        click.echo(f"quantized checkpoint {size} bytes")


@main.command("evaluate")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True)
@click.option("--reference-bytes", type=int, default=0)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int)
def evaluate_cmd(config_path, model_path, data_dir, split, reference_bytes,
                 out_dir, seed):
    """Greedy-decode a split and report per-language CER."""
    config = _load_config(config_path)
    seed = _pick_seed(seed, config)
    model, meta = ckpt.load_checkpoint(model_path)
    corpus = Corpus.load(data_dir)
    size = Path(model_path).stat().st_size
    report = evaluate(model, corpus, split=split,
                      strategy=meta.get("strategy", "unknown"),
                      bits=meta.get("bits", 0), seed=seed, model_bytes=size,
                      reference_bytes=reference_bytes)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(report.to_json())
    _append_results(out, report, [s.name for s in corpus.specs])
    _write_manifest(out, "evaluate", {"model": str(model_path), "split": split,
                                      "seed": seed})
    click.echo(report.to_json())


@main.command("report")
@click.option("--results", "results_paths", multiple=True,
              type=click.Path(exists=True),
              help="results.csv files or run directories; repeatable.")
@click.option("--reference-bytes", type=int, default=0,
              help="Teacher size for ratios; defaults to the teacher row.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def report_cmd(results_paths, reference_bytes, out_dir):
    """Join results rows into a strategy x (avg CER, size, ratio) summary."""
    rows = []
    for p in results_paths:
        path = Path(p)
        if path.is_dir():
            path = path / RESULTS_FILE
        with open(path, newline="") as f:
            rows.extend(csv.DictReader(f))
    if not rows:
        raise click.ClickException("no results rows found")
    if not reference_bytes:
        teacher_rows = [r for r in rows if r["strategy"] == "teacher"]
        if teacher_rows:
            reference_bytes = int(teacher_rows[0]["size_bytes"])
    groups = {}
    for r in rows:
        groups.setdefault((r["strategy"], r["bits"]), []).append(r)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for (strategy, bits), g in sorted(groups.items()):
        avg = float(np.mean([float(r["avg_cer"]) for r in g]))
        size = int(g[0]["size_bytes"])
        ratio = round(reference_bytes / size, 2) if reference_bytes else 0.0
        summary.append({"strategy": strategy, "bits": bits, "seeds": len(g),
                        "avg_cer": avg, "size_bytes": size, "compression": ratio})
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(summary[0].keys()))
        w.writeheader()
        w.writerows(summary)
    for row in summary:
        click.echo(f"{row['strategy']:>10} bits={row['bits']:>2} "
                   f"avg_cer={row['avg_cer']:.4f} size={row['size_bytes']} "
                   f"compres={row['compression']}x")


if __name__ == "__main__":
    main()
