"""
Командная строка: synth, pool, train, eval, inspect, localize, ablation.

Коды выхода: 0 - успех, 2 - ошибка ввода/использования, 3 - обучение прервано (коллапс разметки).
"""
import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional, Tuple

import typer
from pydantic import BaseModel
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

from app.adapter_core import adapt, load_adapter
from app.config import HIST_BINS, LOG_LEVEL
from app.diagnostics import delta_similarity, similarity_histogram
from app.empl import export_pseudo_labels, pseudo_label
from app.featstore import load_feature_set, load_geo_tags, pool_directory, save_feature_set
from app.feature_validator import FeatureValidationException
from app.models import AdapterParams, FeatureSet, SynthConfig, TrainConfig, ViewTag
from app.retrieval import evaluate, load_ground_truth, load_report, localize_all, report_summary, save_report
from app.synthbench import preset, write_benchmark
from app.trainer import (
    GradientBlowUpException,
    TrainingCollapseException,
    TrainState,
    load_checkpoint,
    run_ablation,
    run_training,
    save_checkpoint,
)

cli = typer.Typer(no_args_is_help=True, add_completion=False, help="Self-supervised adaptation of cross-view embeddings")
console = Console()
err_console = Console(stderr=True)
logger = logging.getLogger("app")

EXIT_INPUT = 2
EXIT_COLLAPSE = 3


@cli.callback()
def main(verbose: int = typer.Option(0, "--verbose", "-v", count=True, help="-v: DEBUG")):
    level = logging.DEBUG if verbose else getattr(logging, LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


@contextmanager
def _exit_codes():
    """Перевод доменных исключений в коды выхода"""
    try:
        yield
    except (TrainingCollapseException, GradientBlowUpException) as e:
        err_console.print(f"[red]Training aborted:[/red] {escape(str(e))}")
        raise typer.Exit(EXIT_COLLAPSE)
    except (FeatureValidationException, ValueError, OSError) as e:
        err_console.print(f"[red]Error:[/red] {escape(str(e))}")
        raise typer.Exit(EXIT_INPUT)


def _read_json_model(path: Optional[Path], model: type, overrides: Optional[List[str]] = None) -> BaseModel:
    """JSON-документ конфигурации плюс переопределения key=value из командной строки"""
    payload = {}
    if path is not None:
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
        if not isinstance(payload, dict):
            raise ValueError(f"{path}: configuration must be a JSON object")

    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"override must look like key=value, got {item!r}")
        try:
            payload[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            payload[key.strip()] = raw
    return model.model_validate(payload)


def _parse_ints(raw: str, what: str) -> List[int]:
    try:
        values = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"{what} must be a comma-separated list of integers, got {raw!r}")
    if not values:
        raise ValueError(f"{what} is empty")
    return values


def _view_tag(raw: str) -> ViewTag:
    try:
        return ViewTag[raw.upper()]
    except KeyError:
        raise ValueError(f"unknown view {raw!r}; expected query or reference")


def _load_adapter_arg(path: Path) -> AdapterParams:
    """--ckpt принимает каталог чекпоинта или сам файл adapter.cvad"""
    if path.is_dir():
        path = path / "adapter.cvad"
    adapter, _, iteration = load_adapter(path)
    logger.info("Loaded adapter %s (%s, d0=%d, d=%d, iteration %d)", path, adapter.arch.value, adapter.d0, adapter.d, iteration)
    return adapter


def _apply_ckpt(ckpt: Optional[Path], *sets: FeatureSet) -> Tuple[FeatureSet, ...]:
    if ckpt is None:
        return sets
    adapter = _load_adapter_arg(ckpt)
    return tuple(adapt(adapter, s) for s in sets)


@cli.command()
def synth(
    out: Path = typer.Option(..., "--out", help="Output directory"),
    config: Optional[Path] = typer.Option(None, "--config", help="SynthConfig JSON"),
    preset_name: Optional[str] = typer.Option(None, "--preset", help="Named preset, e.g. G1"),
):
    """Синтетический бенчмарк: CVFT запросы/референсы, разметка, геометки, манифест"""
    with _exit_codes():
        if config is not None:
            synth_config = _read_json_model(config, SynthConfig)
        elif preset_name is not None:
            synth_config = preset(preset_name)
        else:
            raise ValueError("either --config or --preset is required")

        written = write_benchmark(synth_config, out)
        for path in written:
            console.print(f"wrote {path}")


@cli.command()
def pool(
    maps: Path = typer.Option(..., "--maps", help="Directory of .cvfm feature maps"),
    out: Path = typer.Option(..., "--out"),
    p: float = typer.Option(3.0, "--p", help="GeM power"),
    view: str = typer.Option("query", "--view", help="query | reference"),
):
    """GeM + L2 по каждой карте признаков каталога, одна запись на файл"""
    with _exit_codes():
        feature_set = pool_directory(maps, p, _view_tag(view))
        save_feature_set(feature_set, out)
        console.print(f"pooled {len(feature_set)} maps (dim {feature_set.dim}) -> {out}")


@cli.command()
def train(
    queries: Path = typer.Option(..., "--queries"),
    refs: Path = typer.Option(..., "--refs"),
    out: Path = typer.Option(..., "--out", help="Checkpoint directory"),
    config: Optional[Path] = typer.Option(None, "--config", help="TrainConfig JSON"),
    gt: Optional[Path] = typer.Option(None, "--gt", help="Ground truth, only for label_source=ground_truth"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint directory to continue from"),
    checkpoint_every: int = typer.Option(0, "--checkpoint-every", min=0),
    overrides: Optional[List[str]] = typer.Option(None, "--set", help="Config override key=value, repeatable"),
    labels_out: Optional[Path] = typer.Option(None, "--labels-out", help="CSV of final pseudo-labels on all queries"),
):
    """Самообучение адаптера; пишет adapter.cvad, train_state.npz и train_log.csv"""
    with _exit_codes():
        train_config = _read_json_model(config, TrainConfig, overrides)
        X_Q0, X_R = load_feature_set(queries), load_feature_set(refs)
        ground_truth = load_ground_truth(gt, X_Q0.ids, X_R.ids) if gt else None
        state = load_checkpoint(resume, train_config, X_Q0.dim) if resume else None

        def on_iteration(current: TrainState) -> None:
            if checkpoint_every and current.iteration % checkpoint_every == 0:
                save_checkpoint(current, out)

        try:
            final = run_training(train_config, X_Q0, X_R, ground_truth, state, on_iteration)
        except (TrainingCollapseException, GradientBlowUpException) as e:
            if e.state is not None:
                save_checkpoint(e.state, out)
                logger.warning("Partial checkpoint after %d iterations saved to %s", e.state.iteration, out)
            raise
        save_checkpoint(final, out)
        if labels_out is not None:
            adapter = final.adapter()
            labels = pseudo_label(adapt(adapter, X_Q0), adapt(adapter, X_R), train_config.threshold)
            export_pseudo_labels(labels, X_Q0.ids, X_R.ids, labels_out)
            logger.info("%d of %d queries have a valid pseudo-label", labels.num_valid, labels.num_queries)

        table = Table(title=f"Training finished: {final.iteration} iterations")
        for column in ("L_EM q→r", "L_EM r→q", "L_re q", "L_re r", "valid rows"):
            table.add_column(column, justify="right")
        if final.log.entries:
            last = final.log.entries[-1]
            table.add_row(
                f"{last.l_em_qr:.5f}", f"{last.l_em_rq:.5f}", f"{last.l_re_q:.5f}", f"{last.l_re_r:.5f}", str(last.valid_rows)
            )
        console.print(table)


@cli.command("eval")
def eval_command(
    queries: Path = typer.Option(..., "--queries"),
    refs: Path = typer.Option(..., "--refs"),
    gt: Path = typer.Option(..., "--gt"),
    out: Path = typer.Option(..., "--out"),
    ckpt: Optional[Path] = typer.Option(None, "--ckpt", help="Adapter checkpoint; without it initial features are scored"),
    k: str = typer.Option("1,5,10", "--k"),
    reverse: bool = typer.Option(False, "--reverse", help="Reference-to-query retrieval"),
):
    """R@K и mAP для исходных или адаптированных признаков"""
    with _exit_codes():
        ks = _parse_ints(k, "--k")
        X_Q, X_R = load_feature_set(queries), load_feature_set(refs)
        ground_truth = load_ground_truth(gt, X_Q.ids, X_R.ids)
        Z_Q, Z_R = _apply_ckpt(ckpt, X_Q, X_R)
        if reverse:
            Z_Q, Z_R, ground_truth = Z_R, Z_Q, ground_truth.inverted()

        report = evaluate(Z_Q, Z_R, ground_truth, ks)
        save_report(report, out)

        table = Table(title=f"{'adapted' if ckpt else 'initial'} features, {report.num_queries} queries")
        summary = report_summary(report)
        for name in summary:
            table.add_column(name, justify="right")
        table.add_row(*(f"{100 * v:.2f}" for v in summary.values()))
        console.print(table)


@cli.command("inspect")
def inspect_command(
    report: Path = typer.Option(..., "--report"),
    out: Path = typer.Option(..., "--out"),
    mode: str = typer.Option("histogram", "--mode", help="histogram | delta"),
    bins: int = typer.Option(HIST_BINS, "--bins", min=1),
):
    """Гистограммы сходства верных/неверных top-1 пар или Δsim по запросам"""
    with _exit_codes():
        loaded = load_report(report)
        if mode == "histogram":
            frame = similarity_histogram(loaded, bins)
        elif mode == "delta":
            frame = delta_similarity(loaded)
        else:
            raise ValueError(f"unknown mode {mode!r}; expected histogram or delta")
        frame.to_csv(out, index=False)
        console.print(f"wrote {len(frame)} rows -> {out}")


@cli.command()
def localize(
    queries: Path = typer.Option(..., "--queries"),
    refs: Path = typer.Option(..., "--refs"),
    geo: Path = typer.Option(..., "--geo"),
    out: Path = typer.Option(..., "--out"),
    ckpt: Optional[Path] = typer.Option(None, "--ckpt"),
):
    """Каждому запросу - геометка референса с наибольшим сходством"""
    with _exit_codes():
        X_Q, X_R = load_feature_set(queries), load_feature_set(refs)
        tags = load_geo_tags(geo)
        Z_Q, Z_R = _apply_ckpt(ckpt, X_Q, X_R)
        frame = localize_all(Z_Q, Z_R, tags)
        frame.to_csv(out, index=False)
        console.print(f"localized {len(frame)} queries -> {out}")


@cli.command()
def ablation(
    out: Path = typer.Option(..., "--out"),
    preset_name: str = typer.Option("G1", "--preset"),
    seeds: str = typer.Option("1,2,3,4,5", "--seeds"),
    config: Optional[Path] = typer.Option(None, "--config", help="Base TrainConfig JSON"),
    overrides: Optional[List[str]] = typer.Option(None, "--set", help="Config override key=value, repeatable"),
):
    """Абляция модулей на синтетическом пресете"""
    with _exit_codes():
        train_config = _read_json_model(config, TrainConfig, overrides)
        frame = run_ablation(preset(preset_name), train_config, _parse_ints(seeds, "--seeds"))
        frame.to_csv(out, index=False)

        medians = frame.groupby("config", sort=False)[["r1", "r5", "r10", "mean_ap"]].median()
        table = Table(title=f"Ablation on {preset_name.upper()} (median over seeds)")
        table.add_column("config")
        for column in medians.columns:
            table.add_column(column, justify="right")
        for name, row in medians.iterrows():
            table.add_row(name, *(f"{100 * v:.2f}" for v in row))
        console.print(table)


if __name__ == "__main__":
    cli()
