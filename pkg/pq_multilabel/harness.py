"""Experiment orchestration and Table-1 style reporting.

``reproduce`` trains one model per (condition, training head, seed), evaluates
every requested prediction head on every shift suite and renders the results as
one block per suite: conditions as rows, heads x {entropy, accuracy} as columns.
MC-Dropout reuses the vanilla-trained network of the same condition and seed.
"""

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import msgspec
import numpy as np

from .clustering import KMeansModel, fit_label_model, generate_labels, write_kmeans_csv
from .config import ExperimentConfig, TrainHyper, config_digest
from .data_io import (
    LabelFile,
    SampleSet,
    load_cifar10_binary,
    load_label_file,
    read_csv,
    save_checkpoint,
    synthetic_dataset,
    write_csv,
)
from .errors import ConfigurationError, PQError, ValidationError
from .model import (
    Classifier,
    duq_predict,
    entropy,
    mc_dropout_predict,
    predict,
    train,
    write_training_log,
)
from .pool import (
    Labeler,
    MultiLabelDataset,
    build_condition,
    disagreement_rate,
    replicate,
    simulate_annotators,
    write_pairs_csv,
    write_pool_manifest,
)
from .quality import QualityTable, score_corpus, write_scores_csv
from .shifts import ShiftSpec, build_suite

logger = logging.getLogger(__name__)

HEAD_TITLES = {"vanilla": "Vanilla", "mc_dropout": "MC Dropout", "duq": "DUQ"}
CONDITION_TITLES = {
    "clean": "Clean",
    "noisy_single": "Human Noise",
    "human_multi": "Human-based",
    "pq_multi": "Perceptual quality-based",
}
LABEL_FILE_CONDITIONS = ("noisy_single", "human_multi")


class ShiftResult(NamedTuple):
    seed: int
    shift: str
    parameter: str
    accuracy: float
    entropy: float


class Verdict(NamedTuple):
    criterion: int
    status: str
    detail: str


@dataclass
class ReportCell:
    condition: str
    head: str
    suite: str
    seeds: list[int] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    entropy: list[float] = field(default_factory=list)
    breakdown: list[ShiftResult] = field(default_factory=list)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None or not self.seeds

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy)) if self.accuracy else math.nan

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(self.entropy)) if self.entropy else math.nan

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.accuracy)) if self.accuracy else math.nan

    @property
    def std_entropy(self) -> float:
        return float(np.std(self.entropy)) if self.entropy else math.nan


@dataclass
class EvalReport:
    conditions: tuple[str, ...]
    heads: tuple[str, ...]
    suites: tuple[str, ...]
    seeds: tuple[int, ...]
    digest: str
    num_classes: int
    cells: dict[tuple[str, str, str], ReportCell] = field(default_factory=dict)
    disagreement: dict[str, float] = field(default_factory=dict)
    target_disagreement: float | None = None
    epochs: int = 0
    verdicts: list[Verdict] = field(default_factory=list)

    def cell(self, condition: str, head: str, suite: str) -> ReportCell | None:
        return self.cells.get((condition, head, suite))

    @property
    def meta(self) -> dict[str, Any]:
        return {
            "config_digest": self.digest,
            "seeds": " ".join(str(s) for s in self.seeds),
            "epochs": self.epochs,
        }


@dataclass
class PreparedExperiment:
    """Everything shared by all cells of a run.

    The quality table and the label model are only needed by ``pq_multi``; they
    are computed on first use and kept.
    """

    cfg: ExperimentConfig
    train_set: SampleSet
    test_set: SampleSet
    label_files: dict[str, LabelFile]
    suites: dict[str, list[tuple[ShiftSpec, SampleSet]]]
    quality: QualityTable | None = None
    label_model: KMeansModel | None = None
    cluster_features: np.ndarray | None = None
    _conditions: dict[str, MultiLabelDataset] = field(default_factory=dict)

    def quality_table(self) -> QualityTable:
        if self.quality is None:
            q = self.cfg.quality
            self.quality = score_corpus(self.train_set, q.ridge, q.n_jobs)
        return self.quality

    def fitted_label_model(self) -> tuple[KMeansModel, np.ndarray]:
        if self.label_model is None or self.cluster_features is None:
            c = self.cfg.clustering
            quality_features = None
            if c.feature_mode == "quality":
                quality_features = self.quality_table().features
            self.label_model, self.cluster_features = fit_label_model(
                self.train_set,
                c.feature_mode,
                c.seed,
                c.max_iter,
                c.tol,
                quality_features=quality_features,
            )
        return self.label_model, self.cluster_features

    @property
    def labeler(self) -> Labeler:
        model, features = self.fitted_label_model()

        def label(sample_id: int, m: int) -> list[int]:
            return generate_labels(features[sample_id], model, m)

        return label

    def condition(self, name: str) -> MultiLabelDataset:
        if name not in self._conditions:
            ranking, labeler = None, None
            if name == "pq_multi":
                ranking, labeler = self.quality_table().ranking, self.labeler
            self._conditions[name] = build_condition(
                name,
                self.train_set,
                self.label_files,
                self.cfg.pool,
                ranking=ranking,
                labeler=labeler,
            )
        return self._conditions[name]


def output_meta(cfg: ExperimentConfig, **extra: Any) -> dict[str, Any]:
    """Config digest and seed list, written at the top of every output CSV."""
    return {
        "config_digest": config_digest(cfg),
        "seeds": " ".join(str(s) for s in cfg.seeds),
        **extra,
    }


def load_datasets(cfg: ExperimentConfig) -> tuple[SampleSet, SampleSet]:
    data = cfg.data
    if bool(data.train_path) != bool(data.test_path):
        raise ConfigurationError(
            "set both data.train_path and data.test_path, or neither"
        )
    if data.train_path:
        return (
            load_cifar10_binary(data.train_path, data.train_count, data.num_classes),
            load_cifar10_binary(data.test_path, data.test_count, data.num_classes),
        )
    syn = data.synthetic
    logger.info(
        f"[+] Generating synthetic gratings: {syn.n_train} train, {syn.n_test} test"
    )
    c = data.num_classes
    return (
        synthetic_dataset(syn.seed, syn.n_train, c, syn.side, syn.noise_sigma),
        synthetic_dataset(syn.seed + 1, syn.n_test, c, syn.side, syn.noise_sigma),
    )


def load_label_sources(
    cfg: ExperimentConfig, train_set: SampleSet
) -> dict[str, LabelFile]:
    """Label files per condition; simulated annotators stand in for missing files."""
    labels = cfg.labels
    c = cfg.data.num_classes
    sources: dict[str, LabelFile] = {}
    if labels.noisy_single_file:
        sources["noisy_single"] = load_label_file(labels.noisy_single_file, c)
        logger.info(
            f"[+] noisy_single labels: CIFAR-10-N '{labels.human_label_set}' set"
        )
    if labels.human_multi_file:
        sources["human_multi"] = load_label_file(labels.human_multi_file, c)
    if labels.simulate_annotators > 0 and len(sources) < 2:
        simulated = simulate_annotators(
            train_set,
            labels.simulate_annotators,
            labels.annotator_noise,
            labels.annotator_seed,
        )
        if "noisy_single" not in sources:
            sources["noisy_single"] = LabelFile(
                {i: v[:1] for i, v in simulated.labels.items()},
                c,
                source="simulated",
                name=f"{simulated.name}[0]",
            )
        sources.setdefault("human_multi", simulated)
    for condition in cfg.conditions:
        if condition in LABEL_FILE_CONDITIONS and condition not in sources:
            raise ConfigurationError(
                f"condition {condition} requires labels.{condition}_file "
                "or labels.simulate_annotators > 0"
            )
    return sources


def prepare(
    cfg: ExperimentConfig,
    quality: QualityTable | None = None,
    progress: bool = False,
    with_suites: bool = True,
    conditions: Sequence[str] | None = None,
) -> PreparedExperiment:
    """Load data and label sources; score and cluster only for ``pq_multi``.

    ``conditions`` defaults to the configured ones.
    """
    train_set, test_set = load_datasets(cfg)
    label_files = load_label_sources(cfg, train_set)
    if quality is not None and len(quality.ids) != len(train_set):
        raise ValidationError(
            f"score table has {len(quality.ids)} rows, training set {len(train_set)}"
        )
    suites = {}
    if with_suites:
        suites = {
            kind: build_suite(test_set, kind, cfg.shifts, progress)
            for kind in cfg.suites
        }
    prepared = PreparedExperiment(
        cfg, train_set, test_set, label_files, suites, quality=quality
    )
    if "pq_multi" in (cfg.conditions if conditions is None else conditions):
        prepared.fitted_label_model()
        prepared.quality_table()
    return prepared


def head_probabilities(
    model: Classifier, head: str, images: np.ndarray, mc_samples: int, seed: int
) -> np.ndarray:
    if head == "vanilla":
        return predict(model, images)
    if head == "mc_dropout":
        return mc_dropout_predict(model, images, mc_samples, seed)
    if head == "duq":
        return duq_predict(model, images).probs
    raise ConfigurationError(f"unknown head {head!r}")


def evaluate_suite(
    model: Classifier,
    head: str,
    suite: Sequence[tuple[ShiftSpec, SampleSet]],
    mc_samples: int = 20,
    seed: int = 0,
) -> tuple[float, float, list[ShiftResult]]:
    """Suite accuracy and entropy as unweighted means over its shifts."""
    breakdown = []
    for spec, shifted in suite:
        probs = head_probabilities(model, head, shifted.images, mc_samples, seed)
        correct = probs.argmax(axis=1) == shifted.require_labels()
        breakdown.append(
            ShiftResult(
                seed,
                spec.name,
                spec.parameter,
                float(np.mean(correct)),
                float(np.mean(entropy(probs))),
            )
        )
    accuracy = float(np.mean([r.accuracy for r in breakdown]))
    mean_entropy = float(np.mean([r.entropy for r in breakdown]))
    return accuracy, mean_entropy, breakdown


def training_head(head: str) -> str:
    return "duq" if head == "duq" else "vanilla"


def train_cell(
    prepared: PreparedExperiment,
    condition: str,
    head: str,
    seed: int,
    hyper: TrainHyper,
    output_dir: Path | None,
) -> Classifier:
    cfg = prepared.cfg
    mld = prepared.condition(condition)
    model = train(
        replicate(mld),
        prepared.train_set,
        msgspec.structs.replace(cfg.classifier, seed=seed),
        msgspec.structs.replace(hyper, seed=seed),
        head=training_head(head),
        duq_cfg=cfg.duq,
    )
    if output_dir is not None:
        directory = output_dir / "conditions" / condition
        stem = directory / f"{training_head(head)}_seed{seed}"
        meta = {"config_digest": config_digest(cfg), "seeds": seed}
        write_training_log(f"{stem}_train_log.csv", model.history, meta)
        Path(f"{stem}.ckpt").write_bytes(save_checkpoint(model))
    return model


def run_condition(
    condition: str,
    head: str,
    cfg: ExperimentConfig,
    prepared: PreparedExperiment | None = None,
    models: dict[tuple[str, str, int], Classifier] | None = None,
    hyper: TrainHyper | None = None,
    output_dir: Path | None = None,
) -> dict[str, ReportCell]:
    """Train and evaluate one (condition, head) pair for every seed and suite."""
    prepared = prepared or prepare(cfg)
    models = {} if models is None else models
    hyper = hyper or cfg.hyper
    cells = {suite: ReportCell(condition, head, suite) for suite in cfg.suites}
    try:
        prepared.condition(condition)
        for seed in cfg.seeds:
            key = (condition, training_head(head), seed)
            if key not in models:
                models[key] = train_cell(
                    prepared, condition, head, seed, hyper, output_dir
                )
            for suite in cfg.suites:
                acc, ent, breakdown = evaluate_suite(
                    models[key], head, prepared.suites[suite], cfg.mc_samples, seed
                )
                cell = cells[suite]
                cell.seeds.append(seed)
                cell.accuracy.append(acc)
                cell.entropy.append(ent)
                cell.breakdown.extend(breakdown)
    except PQError as err:
        raise type(err)(f"{condition}/{head}: {err}") from err
    except Exception as err:
        raise PQError(f"{condition}/{head}: {err}") from err
    logger.info(
        f"[+] {condition}/{head}: "
        + ", ".join(
            f"{s} entropy {c.mean_entropy:.3f} acc {c.mean_accuracy:.3f}"
            for s, c in cells.items()
        )
    )
    return cells


def _gap_check(
    report: EvalReport,
    suite: str,
    better: str,
    worse: str,
    entropy_gap: float,
    acc_gap: float,
) -> tuple[bool, str] | None:
    hi = report.cell(better, "vanilla", suite)
    lo = report.cell(worse, "vanilla", suite)
    if hi is None or lo is None or hi.failed or lo.failed:
        return None
    d_ent = lo.mean_entropy - hi.mean_entropy
    d_acc = hi.mean_accuracy - lo.mean_accuracy
    ok = d_ent >= entropy_gap and d_acc >= acc_gap
    return ok, f"{suite}: entropy gap {d_ent:+.3f}, accuracy gap {d_acc:+.3f}"


def _verdict(
    criterion: int, checks: list[tuple[bool, str] | None], missing: str
) -> Verdict:
    if not checks or any(c is None for c in checks):
        return Verdict(criterion, "SKIPPED", missing)
    status = "PASS" if all(ok for ok, _ in checks) else "FAIL"
    return Verdict(criterion, status, "; ".join(detail for _, detail in checks))


def check_acceptance(report: EvalReport, cfg: ExperimentConfig) -> list[Verdict]:
    """Directional checks on vanilla-head means; head comparison is reported only."""
    acc = cfg.acceptance
    if not acc.enabled:
        return []
    verdicts = [
        _verdict(
            8,
            [
                _gap_check(
                    report,
                    s,
                    "clean",
                    "noisy_single",
                    acc.noise_entropy_gap,
                    acc.noise_accuracy_gap,
                )
                for s in report.suites
            ],
            "needs clean and noisy_single vanilla cells",
        ),
        _verdict(
            9,
            [
                _gap_check(
                    report,
                    s,
                    "pq_multi",
                    "noisy_single",
                    acc.framework_entropy_gap,
                    -acc.framework_accuracy_slack,
                )
                for s in report.suites
            ],
            "needs pq_multi and noisy_single vanilla cells",
        ),
    ]

    ordering = None
    cells = [
        report.cell(c, "vanilla", "rotation")
        for c in ("clean", "pq_multi", "noisy_single")
    ]
    if all(c is not None and not c.failed for c in cells):
        e_clean, e_pq, e_noisy = (c.mean_entropy for c in cells)
        ordering = (
            e_clean < e_pq < e_noisy,
            f"rotation: clean {e_clean:.3f} < pq_multi {e_pq:.3f} "
            f"< noisy_single {e_noisy:.3f}",
        )
    verdicts.append(
        _verdict(
            10,
            [ordering],
            "needs clean, pq_multi and noisy_single vanilla rotation cells",
        )
    )

    side_by_side = []
    for suite in report.suites:
        values = []
        for head in report.heads:
            cell = report.cell("noisy_single", head, suite)
            if cell is not None and not cell.failed:
                values.append(f"{HEAD_TITLES[head]} {cell.mean_entropy:.3f}")
        if values:
            side_by_side.append(f"{suite}: " + ", ".join(values))
    verdicts.append(
        Verdict(11, "REPORTED", "; ".join(side_by_side) or "no noisy_single cells")
    )
    return verdicts


def directional_failure(verdicts: Iterable[Verdict]) -> bool:
    return any(v.status == "FAIL" for v in verdicts if v.criterion in (8, 9, 10))


def _format_cell(mean: float, std: float, seeds: int) -> str:
    if seeds > 1:
        return f"{mean:.3f} ± {std:.3f}"
    return f"{mean:.3f}"


def render_markdown(report: EvalReport) -> str:
    lines = ["# Uncertainty under distribution shift", ""]
    lines.append(
        f"Config digest `{report.digest}`, seeds {list(report.seeds)}, "
        f"{report.epochs} epochs. Entropy in bits (lower is more confident), "
        "accuracy as a fraction."
    )
    for suite in report.suites:
        lines += ["", f"## {suite.capitalize()} suite", ""]
        header = ["Training labels"]
        for head in report.heads:
            title = HEAD_TITLES[head]
            header += [f"{title} entropy", f"{title} accuracy"]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for condition in report.conditions:
            row = [CONDITION_TITLES[condition]]
            for head in report.heads:
                cell = report.cell(condition, head, suite)
                if cell is None or cell.failed:
                    row += ["FAILED", "FAILED"]
                else:
                    n = len(cell.seeds)
                    row += [
                        _format_cell(cell.mean_entropy, cell.std_entropy, n),
                        _format_cell(cell.mean_accuracy, cell.std_accuracy, n),
                    ]
            lines.append("| " + " | ".join(row) + " |")

    lines += [
        "",
        "## Label disagreement",
        "",
        "| Training labels | Disagreement | Delta to target |",
        "|---|---|---|",
    ]
    for condition in report.conditions:
        if condition not in report.disagreement:
            continue
        rate = report.disagreement[condition]
        delta = ""
        if report.target_disagreement is not None:
            delta = f"{rate - report.target_disagreement:+.4f}"
        lines.append(f"| {CONDITION_TITLES[condition]} | {rate:.4f} | {delta} |")

    failures = [c for c in report.cells.values() if c.error]
    if failures:
        lines += ["", "## Failed cells", ""]
        lines += [f"- {c.condition}/{c.head}/{c.suite}: {c.error}" for c in failures]

    if report.verdicts:
        lines += ["", "## Acceptance", ""]
        lines += [
            f"- [{v.status}] criterion {v.criterion}: {v.detail}"
            for v in report.verdicts
        ]
    if "duq" in report.heads:
        lines += [
            "",
            "DUQ head: RBF kernels with centroid moving average, no gradient penalty.",
        ]
    return "\n".join(lines) + "\n"


REPORT_HEADER = ["suite", "condition", "head", "seed", "entropy", "accuracy", "status"]


def write_report_csv(path: str | Path, report: EvalReport) -> None:
    """Per-seed rows followed by ``mean`` and ``std`` rows for every cell."""
    rows: list[list[Any]] = []
    for suite in report.suites:
        for condition in report.conditions:
            for head in report.heads:
                cell = report.cell(condition, head, suite)
                if cell is None or cell.failed:
                    rows.append([suite, condition, head, "", "", "", "failed"])
                    continue
                for seed, ent, acc in zip(cell.seeds, cell.entropy, cell.accuracy):
                    rows.append([suite, condition, head, seed, ent, acc, "ok"])
                summary = (
                    ("mean", cell.mean_entropy, cell.mean_accuracy),
                    ("std", cell.std_entropy, cell.std_accuracy),
                )
                for label, ent, acc in summary:
                    rows.append([suite, condition, head, label, ent, acc, "ok"])
    write_csv(path, REPORT_HEADER, rows, report.meta)


def read_report_csv(path: str | Path) -> dict[tuple[str, str, str], ReportCell]:
    """Rebuild the per-seed values of every cell from a report CSV."""
    _, rows = read_csv(path)
    cells: dict[tuple[str, str, str], ReportCell] = {}
    for row in rows:
        key = (row["condition"], row["head"], row["suite"])
        cell = cells.setdefault(key, ReportCell(*key))
        if row["status"] == "failed":
            cell.error = "failed"
        elif row["seed"] not in ("mean", "std"):
            cell.seeds.append(int(row["seed"]))
            cell.entropy.append(float(row["entropy"]))
            cell.accuracy.append(float(row["accuracy"]))
    return cells


def write_breakdown_csv(path: str | Path, report: EvalReport) -> None:
    header = [
        "suite",
        "condition",
        "head",
        "seed",
        "shift",
        "parameter",
        "entropy",
        "accuracy",
    ]
    rows = (
        [
            cell.suite,
            cell.condition,
            cell.head,
            r.seed,
            r.shift,
            r.parameter,
            r.entropy,
            r.accuracy,
        ]
        for cell in report.cells.values()
        for r in cell.breakdown
    )
    write_csv(path, header, rows, report.meta)


def write_condition_outputs(
    prepared: PreparedExperiment, condition: str, output_dir: Path
) -> MultiLabelDataset:
    mld = prepared.condition(condition)
    directory = output_dir / "conditions" / condition
    meta = output_meta(prepared.cfg, condition=condition)
    write_pairs_csv(directory / "pairs.csv", mld, meta)
    # rank and score stay blank when the run never scored the corpus
    quality = prepared.quality
    write_pool_manifest(
        directory / "pool_manifest.csv",
        mld,
        None if quality is None else quality.ranking,
        None if quality is None else quality.scores,
        meta,
    )
    return mld


def output_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir or Path("runs") / config_digest(cfg))


def _run_cells(
    prepared: PreparedExperiment, report: EvalReport, hyper: TrainHyper, out: Path
) -> None:
    cfg = prepared.cfg
    models: dict[tuple[str, str, int], Classifier] = {}
    for condition in cfg.conditions:
        for head in cfg.heads:
            try:
                cells = run_condition(
                    condition, head, cfg, prepared, models, hyper, out
                )
            except PQError as err:
                logger.error(f"Cell failed: {err}")
                cells = {
                    s: ReportCell(condition, head, s, error=str(err))
                    for s in cfg.suites
                }
            for suite, cell in cells.items():
                report.cells[(condition, head, suite)] = cell


def reproduce(
    cfg: ExperimentConfig, prepared: PreparedExperiment | None = None
) -> tuple[EvalReport, str]:
    """Run every configured cell and write the report directory.

    Returns the report and its Markdown rendering.
    """
    out = output_path(cfg)
    out.mkdir(parents=True, exist_ok=True)
    prepared = prepared or prepare(cfg, progress=True)
    digest = config_digest(cfg)
    meta = output_meta(cfg)
    if prepared.quality is not None:
        write_scores_csv(out / "scores.csv", prepared.quality, meta)
    if prepared.label_model is not None:
        write_kmeans_csv(out / "kmeans.csv", prepared.label_model, meta)

    disagreement = {}
    for condition in cfg.conditions:
        try:
            disagreement[condition] = disagreement_rate(
                write_condition_outputs(prepared, condition, out)
            )
        except PQError as err:
            logger.error(f"Condition {condition} could not be built: {err}")
    target = None
    if "noisy_single" in prepared.label_files:
        target = disagreement.get("noisy_single")
        if target is None:
            target = disagreement_rate(prepared.condition("noisy_single"))

    hyper = cfg.hyper
    for attempt in range(2):
        report = EvalReport(
            cfg.conditions,
            cfg.heads,
            cfg.suites,
            cfg.seeds,
            digest,
            cfg.data.num_classes,
            disagreement=dict(disagreement),
            target_disagreement=target,
            epochs=hyper.epochs,
        )
        _run_cells(prepared, report, hyper, out)
        report.verdicts = check_acceptance(report, cfg)
        failed = directional_failure(report.verdicts)
        if attempt or not (cfg.acceptance.retry and failed):
            break
        hyper = msgspec.structs.replace(
            hyper, epochs=hyper.epochs * cfg.acceptance.epoch_factor
        )
        logger.warning(
            f"Acceptance check failed; rerunning once with {hyper.epochs} epochs"
        )

    markdown = render_markdown(report)
    (out / "report.md").write_text(markdown, encoding="utf-8", newline="\n")
    write_report_csv(out / "report.csv", report)
    write_breakdown_csv(out / "breakdown.csv", report)
    logger.info(f"[+] Report written to {out}")
    return report, markdown
