"""Experiment service - config documents, runs, trace artefacts and sweeps."""

import configparser
import csv
import io
import json
import logging
import math
import re
import types
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from config import Config, get_config
from models import (
    TRACE_COLUMNS,
    ClusterConfig,
    ConfigurationError,
    DataSpec,
    ExperimentConfig,
    MdpHyper,
    ModelSpec,
    PolicyKind,
    PolicySpec,
    TraceRecord,
)
from services.cluster_service import ClusterService, DivergedRunError
from services.policies import FixedPolicy, MQGradPolicy, PolicyService
from services.tensor_model import TensorModelService

logger = logging.getLogger(__name__)

SECTIONS: dict[str, type] = {
    "experiment": ExperimentConfig,
    "cluster": ClusterConfig,
    "model": ModelSpec,
    "data": DataSpec,
    "policy": PolicySpec,
    "mdp": MdpHyper,
}
NESTED = ("cluster", "model", "data", "policy", "mdp")
TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}

TRACE_FILE = "trace.csv"
SUMMARY_FILE = "summary.json"
CONFIG_FILE = "config.ini"
QNET_FILE = "qnet.json"
COMPARISON_FILE = "comparison.csv"


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    trace: list[TraceRecord]
    summary: dict[str, Any]
    output_dir: Path

    @property
    def diverged(self) -> bool:
        return bool(self.summary["diverged"])


@dataclass
class SweepRow:
    label: str
    accuracy: list[Optional[float]]
    loss: list[Optional[float]]


@dataclass
class SweepTable:
    budgets: list[float]
    rows: list[SweepRow]

    def header(self) -> list[str]:
        return ["policy", "metric"] + [_budget_name(b) for b in self.budgets]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.header())
        for row in self.rows:
            writer.writerow([row.label, "accuracy"] + [_cell(v) for v in row.accuracy])
            writer.writerow([row.label, "loss"] + [_cell(v) for v in row.loss])
        return buffer.getvalue()


def _budget_name(budget: float) -> str:
    return f"{budget:g}ms"


def _cell(value: Optional[float]) -> str:
    return "N/A" if value is None else f"{value:.4f}"


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-") or "run"


class ExperimentService:
    """Reproduction harness: parse, run, summarise and compare experiments."""

    # Config documents

    @staticmethod
    def _coerce(raw: Any, annotation: Any, path: str) -> Any:
        """Convert a document string (or profile value) to the field's type."""
        origin = typing.get_origin(annotation)
        args = typing.get_args(annotation)
        if origin in (typing.Union, types.UnionType):
            inner = [a for a in args if a is not type(None)][0]
            if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none")):
                return None
            return ExperimentService._coerce(raw, inner, path)
        if not isinstance(raw, str):
            return raw
        text = raw.strip()
        try:
            if origin is tuple:
                item_type = args[0]
                parts = [p.strip() for p in text.split(",") if p.strip()]
                return tuple(ExperimentService._coerce(p, item_type, path) for p in parts)
            if annotation is bool:
                if text.lower() in TRUE_WORDS:
                    return True
                if text.lower() in FALSE_WORDS:
                    return False
                raise ValueError(text)
            if annotation is int:
                return int(text)
            if annotation is float:
                return float(text)
            if isinstance(annotation, type) and issubclass(annotation, Enum):
                return annotation(text.lower())
        except ValueError:
            raise ConfigurationError(
                f"cannot read {raw!r} as {getattr(annotation, '__name__', annotation)}", path
            ) from None
        return text

    @staticmethod
    def _section_values(
        name: str, document: dict[str, str], profile: type[Config]
    ) -> dict[str, Any]:
        cls = SECTIONS[name]
        hints = typing.get_type_hints(cls)
        allowed = {f.name for f in fields(cls) if name != "experiment" or f.name not in NESTED}
        values: dict[str, Any] = {}
        for key, value in profile.OVERRIDES.get(name, {}).items():
            values[key] = ExperimentService._coerce(value, hints[key], f"{name}.{key}")
        for key, raw in document.items():
            if key not in allowed:
                raise ConfigurationError("unknown key", f"{name}.{key}")
            values[key] = ExperimentService._coerce(raw, hints[key], f"{name}.{key}")
        return values

    @staticmethod
    def parse_config(text: str, profile: str | type[Config] | None = None) -> ExperimentConfig:
        """Parse an INI experiment document into a fully materialised config.

        Args:
            text: Document with sections experiment, cluster, model, data, policy, mdp
            profile: Profile name or class whose overrides sit under the document

        Raises:
            ConfigurationError: On unknown sections/keys, unreadable values or any
                violated invariant (the message names the field path)
        """
        profile_cls = profile if isinstance(profile, type) else get_config(profile)
        parser = configparser.ConfigParser(interpolation=None, strict=True)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config document: {exc}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigurationError("unknown section", section)

        values = {
            name: ExperimentService._section_values(
                name, dict(parser[name]) if parser.has_section(name) else {}, profile_cls
            )
            for name in SECTIONS
        }
        cluster_T, mdp_T = values["cluster"].get("T"), values["mdp"].get("T")
        if mdp_T is None and cluster_T is not None:
            values["mdp"]["T"] = cluster_T
        elif cluster_T is None and mdp_T is not None:
            values["cluster"]["T"] = mdp_T

        nested = {name: SECTIONS[name](**values[name]) for name in NESTED}
        return ExperimentConfig(**nested, **values["experiment"])

    @staticmethod
    def _format_value(value: Any) -> str:
        if value is None:
            return ""
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, Enum):
            return value.value
        if isinstance(value, float):
            return repr(value)
        if isinstance(value, tuple):
            return ", ".join(ExperimentService._format_value(v) for v in value)
        return str(value)

    @staticmethod
    def dump_config(cfg: ExperimentConfig) -> str:
        """Write every resolved value back as an INI document."""
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser["experiment"] = {
            f.name: ExperimentService._format_value(getattr(cfg, f.name))
            for f in fields(cfg)
            if f.name not in NESTED
        }
        for name in NESTED:
            section = getattr(cfg, name)
            parser[name] = {
                f.name: ExperimentService._format_value(getattr(section, f.name))
                for f in fields(section)
            }
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    @staticmethod
    def load_config(path: str | Path, profile: str | type[Config] | None = None) -> ExperimentConfig:
        return ExperimentService.parse_config(Path(path).read_text(encoding="utf-8"), profile)

    # Trace artefacts

    @staticmethod
    def trace_to_csv(trace: Sequence[TraceRecord]) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for record in trace:
            writer.writerow(record.to_row())
        return buffer.getvalue()

    @staticmethod
    def read_trace(path: str | Path) -> list[TraceRecord]:
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            header = tuple(reader.fieldnames or ())
            if header[:8] != TRACE_COLUMNS[:8]:
                raise ConfigurationError(f"{path} is not a trace file (header {header})")
            return [TraceRecord.from_row(row) for row in reader]

    @staticmethod
    def summarize(trace: Sequence[TraceRecord]) -> dict[str, Any]:
        """Summary numbers, computed from the trace alone."""
        if not trace:
            raise ConfigurationError("trace is empty")
        finite = [r for r in trace if not r.diverged]
        total_ms = trace[-1].sim_time_ms
        overhead_ms = math.fsum(r.overhead_ms for r in trace)
        probes = [
            {"iter": r.iter, "sim_time_ms": r.sim_time_ms, "accuracy": r.accuracy}
            for r in trace
            if r.accuracy is not None
        ]
        full_losses = [
            {"iter": r.iter, "sim_time_ms": r.sim_time_ms, "loss": r.full_loss}
            for r in trace
            if r.full_loss is not None
        ]
        bits_series: list[list[int]] = []
        for r in finite:
            if not bits_series or bits_series[-1][1] != r.bits:
                bits_series.append([r.iter, r.bits])
        return {
            "iterations": len(trace),
            "diverged": len(finite) != len(trace),
            "final_loss": finite[-1].loss if finite else None,
            "best_loss": min(r.loss for r in finite) if finite else None,
            "final_accuracy": probes[-1]["accuracy"] if probes else None,
            "accuracy_probes": probes,
            "full_loss_probes": full_losses,
            "total_sim_time_ms": total_ms,
            "total_bytes": sum(r.bytes for r in trace),
            "overhead_ms": overhead_ms,
            "overhead_fraction": overhead_ms / total_ms if total_ms > 0 else 0.0,
            "bits_series": bits_series,
            "mean_bits": math.fsum(r.bits for r in finite) / len(finite) if finite else None,
        }

    @staticmethod
    def summary_to_json(summary: dict[str, Any]) -> str:
        return json.dumps(summary, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def time_to_loss(
        trace: Sequence[TraceRecord], threshold: float, window: int = 1
    ) -> Optional[float]:
        """First simulated time at which the global loss is <= ``threshold``.

        With ``window`` > 1 the trailing mean of that many losses is compared.
        """
        recent: list[float] = []
        for record in trace:
            if record.diverged:
                return None
            recent.append(record.loss)
            if len(recent) > window:
                recent.pop(0)
            if len(recent) == window and math.fsum(recent) / window <= threshold:
                return record.sim_time_ms
        return None

    @staticmethod
    def tail_loss(trace: Sequence[TraceRecord], fraction: float = 0.05) -> Optional[float]:
        """Mean global loss over the last ``fraction`` of the finite iterations."""
        finite = [r.loss for r in trace if not r.diverged]
        if not finite:
            return None
        count = max(1, math.ceil(len(finite) * fraction))
        return math.fsum(finite[-count:]) / count

    @staticmethod
    def accuracy_at(trace: Sequence[TraceRecord], budget_ms: float) -> Optional[float]:
        """Latest accuracy probe within ``budget_ms``; None past the run's end."""
        if not trace or budget_ms > trace[-1].sim_time_ms:
            return None
        value = None
        for record in trace:
            if record.sim_time_ms > budget_ms:
                break
            if record.accuracy is not None:
                value = record.accuracy
        return value

    @staticmethod
    def loss_at(trace: Sequence[TraceRecord], budget_ms: float) -> Optional[float]:
        if not trace or budget_ms > trace[-1].sim_time_ms:
            return None
        value = None
        for record in trace:
            if record.sim_time_ms > budget_ms:
                break
            if not record.diverged:
                value = record.loss
        return value

    # Runs

    @staticmethod
    def derive_seed(seed: int, stream: int) -> int:
        """Independent integer seed for a named sub-stream of ``seed``."""
        return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])

    @staticmethod
    def calibrate(cfg: ExperimentConfig, data=None) -> tuple[float, ...]:
        """Adaptive cut points from a Fix(8) warm-up run of ``policy.calibration_iters``."""
        data = data or TensorModelService.dataset_for(cfg.data)
        warmup = replace(cfg.cluster, max_iters=cfg.policy.calibration_iters, passthrough=False)
        try:
            trace = ClusterService.run_training(warmup, cfg.model, data, FixedPolicy(8), cfg.seed)
        except DivergedRunError as exc:
            trace = exc.trace
        return PolicyService.calibrate_thresholds([r.grad_rms for r in trace])

    @staticmethod
    def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> ExperimentResult:
        """Run one experiment and write trace, summary, resolved config (and Q network).

        A diverged run is not an error: its partial trace is kept and the
        summary says ``diverged: true``.
        """
        out = Path(output_dir or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        data = TensorModelService.dataset_for(cfg.data)

        if cfg.policy.kind is PolicyKind.ADAPTIVE and not cfg.policy.thresholds:
            cfg = replace(cfg, policy=replace(cfg.policy, thresholds=ExperimentService.calibrate(cfg, data)))
        policy = PolicyService.from_spec(
            cfg.policy, cfg.mdp, ExperimentService.derive_seed(cfg.seed, 1)
        )
        logger.info("Running %s (seed=%d) into %s", cfg.label, cfg.seed, out)

        try:
            trace = ClusterService.run_training(
                cfg.cluster, cfg.model, data, policy, cfg.seed,
                eval_every=cfg.eval_every, full_loss_every=cfg.full_loss_every,
            )
        except DivergedRunError as exc:
            trace = exc.trace

        summary = ExperimentService.summarize(trace)
        (out / TRACE_FILE).write_text(ExperimentService.trace_to_csv(trace), encoding="utf-8")
        (out / SUMMARY_FILE).write_text(ExperimentService.summary_to_json(summary), encoding="utf-8")
        (out / CONFIG_FILE).write_text(ExperimentService.dump_config(cfg), encoding="utf-8")
        if isinstance(policy, MQGradPolicy):
            (out / QNET_FILE).write_text(
                json.dumps(policy.params.to_dict(), indent=2) + "\n", encoding="utf-8"
            )
        return ExperimentResult(config=cfg, trace=trace, summary=summary, output_dir=out)

    @staticmethod
    def _run_into(args: tuple[ExperimentConfig, Path]) -> ExperimentResult:
        cfg, out = args
        return ExperimentService.run_experiment(cfg, out)

    @staticmethod
    def run_sweep(
        configs: Sequence[ExperimentConfig],
        budgets: Sequence[float],
        output_dir: str | Path | None = None,
        jobs: int = 1,
    ) -> tuple[SweepTable, list[ExperimentResult]]:
        """Run every config and tabulate accuracy and loss at each simulated budget.

        Each run writes to its own directory; with ``output_dir`` they become
        ``<output_dir>/<index>-<label>``. Rows follow config order.
        """
        if not configs:
            raise ConfigurationError("sweep needs at least one config")
        budgets = sorted(float(b) for b in budgets)
        if output_dir is not None:
            targets = [Path(output_dir) / f"{i:02d}-{_slug(c.label)}" for i, c in enumerate(configs)]
        else:
            targets = [Path(c.output_dir) for c in configs]
        if len(set(targets)) != len(targets):
            raise ConfigurationError("sweep runs must write to distinct output directories")

        work = list(zip(configs, targets))
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(ExperimentService._run_into, work))
        else:
            results = [ExperimentService._run_into(item) for item in work]

        rows = [
            SweepRow(
                label=result.config.label,
                accuracy=[ExperimentService.accuracy_at(result.trace, b) for b in budgets],
                loss=[ExperimentService.loss_at(result.trace, b) for b in budgets],
            )
            for result in results
        ]
        table = SweepTable(budgets=budgets, rows=rows)
        if output_dir is not None:
            Path(output_dir).mkdir(parents=True, exist_ok=True)
            (Path(output_dir) / COMPARISON_FILE).write_text(table.to_csv(), encoding="utf-8")
        return table, results
