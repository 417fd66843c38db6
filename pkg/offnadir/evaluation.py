"""
Pixel F1, off-nadir angle bins, evaluation reports, the Monte Carlo sample
ablation and uncertainty / ACM map export.
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import math
import pathlib
from collections.abc import Callable, Iterable, Mapping, Sequence
from typing import NamedTuple, Optional, Union

import jinja2
import numpy as np

from . import functional as F
from . import netpbm
from .data import BenchmarkSettings, Manifest, Sample, normalize_metadata
from .tensor import FormatError, ShapeError, Tensor
from .training import Checkpoint, load_checkpoint
from .uncertainty import McConfig, PredictionResult, aggregate_samples, mc_predict

logger = logging.getLogger(__name__)

AnyPath = Union[str, pathlib.Path]
CheckpointLike = Union[Checkpoint, AnyPath]

_default_jinja_env = jinja2.Environment(
    loader=jinja2.PackageLoader("offnadir", "templates"),
    trim_blocks=True,
    lstrip_blocks=True,
)

REPORT_COLUMNS = ("type", "key", "angle", "f1", "n", "epistemic", "aleatoric")
ABLATION_COLUMNS = ("T", "overall_f1", "very_offnadir_f1")
PER_ANGLE_COLUMNS = ("angle", "f1", "n_images")
BASELINES = ("regular_dropout", "no_dropout")
MISSING = "-"
OVERLAY_TINT = np.array([0.0, 255.0, 0.0])


class MissingLabelsError(ValueError):
    """Corrected labels were requested but some samples have none."""


class AngleBin(str, enum.Enum):
    NADIR = "Nadir"
    OFF_NADIR = "OffNadir"
    VERY_OFF_NADIR = "VeryOffNadir"

    @property
    def label(self) -> str:
        return {"Nadir": "Nadir", "OffNadir": "Off-Nadir",
                "VeryOffNadir": "Very Off-Nadir"}[self.value]


def bin_angle(theta: float) -> AngleBin:
    """
    Nadir for ``|theta| <= 25``, Off-Nadir for ``25 < |theta| < 40`` and Very
    Off-Nadir for ``40 <= |theta| < 90``.
    """
    magnitude = abs(theta)
    if not magnitude < 90.0:
        raise ValueError(f"Off-nadir angle must satisfy |theta| < 90, got {theta}")
    if magnitude <= 25.0:
        return AngleBin.NADIR
    if magnitude < 40.0:
        return AngleBin.OFF_NADIR
    return AngleBin.VERY_OFF_NADIR


def _array(value) -> np.ndarray:
    return np.asarray(value.data if isinstance(value, Tensor) else value)


def f1_score(prob_map, gt, threshold: float = 0.5) -> float:
    """
    Pixel-wise F1 of ``prob_map > threshold`` against a binary ``gt``.

    Two empty masks score 1.
    """
    prob_map, gt = _array(prob_map), _array(gt)
    if prob_map.shape != gt.shape:
        raise ShapeError(f"f1_score: prediction {prob_map.shape} vs ground truth {gt.shape}")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("Ground truth must be binary")
    pred = prob_map > threshold
    truth = gt == 1
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def _mean(values: Sequence[Optional[float]]) -> float:
    values = [value for value in values if value is not None]
    return math.fsum(values) / len(values) if values else math.nan


@dataclasses.dataclass(frozen=True)
class ImageScore:
    sample_id: str
    angle: float
    f1: float
    epistemic: float = math.nan
    aleatoric: Optional[float] = None

    @property
    def bin(self) -> AngleBin:
        return bin_angle(self.angle)


class GroupScore(NamedTuple):
    f1: float
    n: int
    epistemic: float
    aleatoric: Optional[float]


def _group(scores: Sequence[ImageScore]) -> GroupScore:
    aleatoric = [score.aleatoric for score in scores]
    return GroupScore(
        _mean([score.f1 for score in scores]),
        len(scores),
        _mean([score.epistemic for score in scores]),
        None if all(value is None for value in aleatoric) else _mean(aleatoric),
    )


@dataclasses.dataclass
class EvalReport:
    """
    Per-image F1 scores and their aggregates.

    Attributes
    ----------
    images : list of ImageScore
        In manifest order.
    split : str
    mc_samples : int
    threshold : float
    ground_truth : {'corrected', 'reference'}
    dropout_active : bool
    seed : int
    """

    images: list[ImageScore]
    split: str = "test"
    mc_samples: int = 1
    threshold: float = 0.5
    ground_truth: str = "reference"
    dropout_active: bool = False
    seed: int = 0

    def per_angle(self) -> dict[float, GroupScore]:
        angles = sorted({score.angle for score in self.images})
        return {
            angle: _group([score for score in self.images if score.angle == angle])
            for angle in angles
        }

    def per_bin(self) -> dict[AngleBin, GroupScore]:
        return {
            angle_bin: _group([score for score in self.images if score.bin is angle_bin])
            for angle_bin in AngleBin
        }

    def overall(self) -> GroupScore:
        return _group(self.images)

    @property
    def overall_f1(self) -> float:
        return self.overall().f1

    @property
    def very_off_nadir_f1(self) -> float:
        return self.per_bin()[AngleBin.VERY_OFF_NADIR].f1

    def settings(self) -> list[tuple[str, str]]:
        return [
            ("split", self.split),
            ("mc_samples", str(self.mc_samples)),
            ("threshold", repr(float(self.threshold))),
            ("ground_truth", self.ground_truth),
            ("dropout_active", str(self.dropout_active).lower()),
            ("seed", str(self.seed)),
        ]


def _fmt(value: Optional[float]) -> str:
    return MISSING if value is None else repr(float(value))


def _group_row(kind: str, key: str, angle: str, group: GroupScore) -> tuple[str, ...]:
    return (kind, key, angle, _fmt(group.f1), str(group.n), _fmt(group.epistemic),
            _fmt(group.aleatoric))


def render_report(report: EvalReport) -> str:
    """The report as tab-separated text with ``#``-prefixed header lines."""
    rows = [
        ("image", score.sample_id, repr(float(score.angle)), repr(float(score.f1)), "1",
         _fmt(score.epistemic), _fmt(score.aleatoric))
        for score in report.images
    ]
    rows += [
        _group_row("angle", repr(float(angle)), repr(float(angle)), group)
        for angle, group in report.per_angle().items()
    ]
    rows += [
        _group_row("bin", angle_bin.value, MISSING, group)
        for angle_bin, group in report.per_bin().items()
    ]
    rows.append(_group_row("overall", "all", MISSING, report.overall()))
    template = _default_jinja_env.get_template("eval_report.jinja2")
    return template.render(settings=report.settings(), columns=REPORT_COLUMNS,
                           rows=rows)


def write_report(report: EvalReport, path: AnyPath) -> pathlib.Path:
    path = pathlib.Path(path)
    path.write_text(render_report(report), encoding="utf-8")
    return path


def _optional_float(text: str) -> Optional[float]:
    return None if text == MISSING else float(text)


def read_report(path: AnyPath) -> EvalReport:
    """
    Parse a report written by :func:`write_report`.

    Aggregate rows are recomputed from the image rows and checked against the
    file.
    """
    settings = {}
    images = []
    overall = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                fields = line[1:].strip().split("\t")
                if len(fields) == 2:
                    settings[fields[0]] = fields[1]
                continue
            fields = line.split("\t")
            if len(fields) != len(REPORT_COLUMNS):
                raise FormatError(f"{path}:{lineno}: expected {len(REPORT_COLUMNS)} columns")
            kind, key, angle, f1, _, epistemic, aleatoric = fields
            try:
                if kind == "image":
                    images.append(ImageScore(key, float(angle), float(f1),
                                             float(epistemic), _optional_float(aleatoric)))
                elif kind == "overall":
                    overall = float(f1)
            except ValueError as ex:
                raise FormatError(f"{path}:{lineno}: {ex}") from None
    try:
        report = EvalReport(
            images,
            split=settings["split"],
            mc_samples=int(settings["mc_samples"]),
            threshold=float(settings["threshold"]),
            ground_truth=settings["ground_truth"],
            dropout_active=settings["dropout_active"] == "true",
            seed=int(settings["seed"]),
        )
    except (KeyError, ValueError) as ex:
        raise FormatError(f"{path}: incomplete report settings ({ex})") from None
    recomputed = report.overall_f1
    if overall is None or not (
        (math.isnan(overall) and math.isnan(recomputed)) or abs(overall - recomputed) <= 1e-12
    ):
        raise FormatError(f"{path}: overall F1 {overall} disagrees with image rows")
    return report


def write_per_angle_csv(report: EvalReport, path: AnyPath) -> pathlib.Path:
    path = pathlib.Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PER_ANGLE_COLUMNS)
        for angle, group in report.per_angle().items():
            writer.writerow((repr(float(angle)), repr(group.f1), group.n))
    return path


def _as_checkpoint(checkpoint: CheckpointLike) -> Checkpoint:
    if isinstance(checkpoint, Checkpoint):
        return checkpoint
    return load_checkpoint(checkpoint)


def ground_truth_for(sample: Sample, use_corrected_labels: bool) -> np.ndarray:
    if use_corrected_labels and sample.corrected_mask is not None:
        return sample.corrected_mask
    return sample.mask


def check_corrected_labels(manifest: Manifest, split: str):
    """
    Raise :class:`MissingLabelsError` listing samples that should carry
    corrected labels but do not.
    """
    settings = BenchmarkSettings()
    rows = manifest.rows_for(split)
    missing = [row.sample_id for row in rows
               if settings.needs_corrected_labels(row.off_nadir)
               and row.corrected_mask_path is None]
    if missing:
        shown = ", ".join(missing[:10])
        more = f" and {len(missing) - 10} more" if len(missing) > 10 else ""
        raise MissingLabelsError(
            f"Corrected labels requested for split {split!r} but missing for: {shown}{more}"
        )


def evaluate_predictions(samples: Iterable[Sample],
                         predict_fn: Callable[[Sample], PredictionResult],
                         use_corrected_labels: bool = False, threshold: float = 0.5,
                         **settings) -> EvalReport:
    """
    Score ``predict_fn`` on ``samples``, in order.

    Extra keyword arguments become report settings (``split``,
    ``mc_samples``, ``dropout_active``, ``seed``).
    """
    scores = []
    for sample in samples:
        result = predict_fn(sample)
        gt = ground_truth_for(sample, use_corrected_labels)
        scores.append(ImageScore(
            sample.sample_id,
            float(sample.off_nadir),
            f1_score(result.mean_prob, gt, threshold),
            float(np.mean(result.epistemic_var)),
            None if result.mean_sigma is None else float(np.mean(result.mean_sigma)),
        ))
    if not scores:
        raise ValueError("Nothing to evaluate")
    return EvalReport(
        scores,
        threshold=threshold,
        ground_truth="corrected" if use_corrected_labels else "reference",
        **settings,
    )


def predictor(checkpoint: Checkpoint, mc: McConfig, dropout_active: bool,
              keep_samples: bool = False) -> Callable[[Sample], PredictionResult]:
    """A ``Sample -> PredictionResult`` function for a trained model."""
    model = checkpoint.model
    uses_metadata = model.config.injection_mode != "none"

    def predict(sample: Sample) -> PredictionResult:
        metadata = None
        if uses_metadata:
            metadata = normalize_metadata(sample.metadata, checkpoint.meta_stats)
        return mc_predict(model, sample.image, metadata, mc, dropout_active=dropout_active,
                          keep_samples=keep_samples)

    return predict


def _load_samples(manifest: Manifest, split: str, size: int) -> list[Sample]:
    rows = manifest.rows_for(split)
    if not rows:
        raise ValueError(f"Split {split!r} is empty")
    return [manifest.load(row, size=size) for row in rows]


def evaluate(checkpoint: CheckpointLike, manifest: Manifest, split: str, mc: McConfig,
             use_corrected_labels: bool, threshold: float = 0.5,
             dropout_active: Optional[bool] = None) -> EvalReport:
    """
    Evaluate a checkpoint on one split of a dataset.

    Dropout is sampled when the model has dropout layers (unless
    ``dropout_active`` says otherwise).  With ``use_corrected_labels``,
    samples carrying corrected labels are scored against them.

    Raises
    ------
    MissingLabelsError
        Corrected labels requested but missing.
    """
    checkpoint = _as_checkpoint(checkpoint)
    if use_corrected_labels:
        check_corrected_labels(manifest, split)
    if dropout_active is None:
        dropout_active = checkpoint.model_config.has_dropout
    samples = _load_samples(manifest, split, checkpoint.model_config.input_size)
    report = evaluate_predictions(
        samples,
        predictor(checkpoint, mc, dropout_active),
        use_corrected_labels=use_corrected_labels,
        threshold=threshold,
        split=split,
        mc_samples=mc.num_samples if dropout_active else 1,
        dropout_active=bool(dropout_active and checkpoint.model_config.has_dropout),
        seed=mc.seed,
    )
    logger.info("Evaluated %d %s images: overall F1 %.4f", len(samples), split,
                report.overall_f1)
    return report


class AblationRow(NamedTuple):
    label: str
    overall_f1: float
    very_off_nadir_f1: float


@dataclasses.dataclass
class AblationResult:
    """Rows of the MC-sample curve and baselines, plus the underlying reports."""

    rows: list[AblationRow]
    reports: dict[str, list[EvalReport]]

    def write_csv(self, path: AnyPath) -> pathlib.Path:
        path = pathlib.Path(path)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(ABLATION_COLUMNS)
            for row in self.rows:
                writer.writerow((row.label, repr(row.overall_f1), repr(row.very_off_nadir_f1)))
        return path


def read_ablation_csv(path: AnyPath) -> list[AblationRow]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != ABLATION_COLUMNS:
            raise FormatError(f"{path}: unexpected header {header}")
        return [AblationRow(label, float(overall), float(very)) for label, overall, very in reader]


def _seed_average(label: str, reports: Sequence[EvalReport]) -> AblationRow:
    return AblationRow(
        label,
        math.fsum(report.overall_f1 for report in reports) / len(reports),
        math.fsum(report.very_off_nadir_f1 for report in reports) / len(reports),
    )


def ablate_mc_samples(checkpoint: CheckpointLike, manifest: Manifest, t_list: Sequence[int],
                      no_dropout_checkpoint: Optional[CheckpointLike] = None,
                      baselines: Sequence[str] = BASELINES, split: str = "val",
                      seeds: Sequence[int] = (0,), use_corrected_labels: bool = False,
                      threshold: float = 0.5, threads: int = 1) -> AblationResult:
    """
    F1 as a function of the number of Monte Carlo samples ``T``.

    For every seed the model is sampled ``max(t_list)`` times per image; the
    row for ``T`` aggregates the first ``T`` samples, which is exactly a
    ``T``-sample prediction with the same seed.  Rows are averaged over
    ``seeds``.  Baselines: ``regular_dropout`` (same model, a single pass
    with dropout off) and ``no_dropout`` (a model trained without dropout).
    """
    checkpoint = _as_checkpoint(checkpoint)
    t_list = sorted(set(int(t) for t in t_list))
    if not t_list or t_list[0] < 1:
        raise ValueError(f"Sample counts must be positive integers, got {t_list}")
    if not seeds:
        raise ValueError("At least one evaluation seed is required")
    unknown = set(baselines) - set(BASELINES)
    if unknown:
        raise ValueError(f"Unknown baselines {sorted(unknown)}; expected {BASELINES}")
    if not checkpoint.model_config.has_dropout:
        raise ValueError(
            f"MC ablation needs a model trained with dropout, got uncertainty mode "
            f"{checkpoint.model_config.uncertainty_mode!r}"
        )
    if "no_dropout" in baselines and no_dropout_checkpoint is None:
        raise ValueError("The no_dropout baseline needs a checkpoint trained without dropout")
    if use_corrected_labels:
        check_corrected_labels(manifest, split)

    samples = _load_samples(manifest, split, checkpoint.model_config.input_size)
    t_max = t_list[-1]
    reports: dict[str, list[EvalReport]] = {str(t): [] for t in t_list}

    for seed in seeds:
        mc = McConfig(num_samples=t_max, seed=seed, threads=threads)
        predict = predictor(checkpoint, mc, dropout_active=True, keep_samples=True)
        full = [predict(sample) for sample in samples]
        for t in t_list:
            prefix = [aggregate_samples(result.samples[:t]) for result in full]
            by_id = dict(zip((sample.sample_id for sample in samples), prefix))
            reports[str(t)].append(evaluate_predictions(
                samples, lambda sample: by_id[sample.sample_id],
                use_corrected_labels=use_corrected_labels, threshold=threshold,
                split=split, mc_samples=t, dropout_active=True, seed=seed,
            ))
        logger.info("MC ablation seed %d: T=%s done", seed, t_list)

    rows = [_seed_average(str(t), reports[str(t)]) for t in t_list]
    single = McConfig(num_samples=1, seed=seeds[0], threads=threads)
    if "regular_dropout" in baselines:
        report = evaluate(checkpoint, manifest, split, single, use_corrected_labels,
                          threshold=threshold, dropout_active=False)
        reports["regular_dropout"] = [report]
        rows.append(_seed_average("regular_dropout", [report]))
    if "no_dropout" in baselines:
        baseline = _as_checkpoint(no_dropout_checkpoint)
        if baseline.model_config.has_dropout:
            logger.warning("The no_dropout baseline checkpoint has dropout layers; "
                           "evaluating it with dropout off")
        report = evaluate(baseline, manifest, split, single, use_corrected_labels,
                          threshold=threshold, dropout_active=False)
        reports["no_dropout"] = [report]
        rows.append(_seed_average("no_dropout", [report]))
    return AblationResult(rows, reports)


def ablation_table(reports: Mapping[str, EvalReport], title: str = "F1 by off-nadir category",
                   caption: str = "") -> str:
    """
    Compare several reports by angle bin.

    Columns are Nadir, Off-Nadir, Very Off-Nadir and Overall; the best value
    in each column is marked with ``*``.
    """
    if not reports:
        raise ValueError("No reports to tabulate")
    values = {
        name: [report.per_bin()[angle_bin].f1 for angle_bin in AngleBin] + [report.overall_f1]
        for name, report in reports.items()
    }
    columns = len(AngleBin) + 1
    best = []
    for column in range(columns):
        finite = [row[column] for row in values.values() if not math.isnan(row[column])]
        best.append(max(finite) if finite else math.nan)
    rows = [
        (name, *(
            f"{value:.4f}{'*' if value == best[column] else ''}"
            for column, value in enumerate(row)
        ))
        for name, row in values.items()
    ]
    header = ("method", *(angle_bin.label for angle_bin in AngleBin), "Overall")
    template = _default_jinja_env.get_template("ablation_table.jinja2")
    return template.render(title=title, caption=caption, columns=header, rows=rows)


def export_uncertainty_maps(result: PredictionResult, out_prefix: AnyPath) -> list[pathlib.Path]:
    """
    Write ``<prefix>_prob.pgm``, ``<prefix>_epistemic.pgm`` and (when the
    model predicts it) ``<prefix>_aleatoric.pgm``, each min-max normalized
    per image, plus ``<prefix>_maps.txt`` with the original ranges.
    """
    prefix = str(out_prefix)
    maps = result.maps()
    if "aleatoric" not in maps:
        logger.warning("No aleatoric head: %s_aleatoric.pgm not written", prefix)
    written = []
    ranges = []
    for name, values in maps.items():
        pixels, low, high = netpbm.quantize(values)
        path = pathlib.Path(f"{prefix}_{name}.pgm")
        netpbm.write_pgm(path, pixels)
        written.append(path)
        ranges.append((name, low, high))
    written.append(_write_sidecar(pathlib.Path(f"{prefix}_maps.txt"), ranges))
    logger.info("Wrote %d uncertainty maps to %s_*", len(maps), prefix)
    return written


def _write_sidecar(path: pathlib.Path, ranges: Sequence[tuple[str, float, float]]) -> pathlib.Path:
    lines = ["# map\tmin\tmax"]
    lines += [f"{name}\t{low!r}\t{high!r}" for name, low, high in ranges]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_sidecar(path: AnyPath) -> dict[str, tuple[float, float]]:
    ranges = {}
    for line in pathlib.Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        name, low, high = line.split("\t")
        ranges[name] = (float(low), float(high))
    return ranges


def acm_channel_mean(product) -> np.ndarray:
    """Channel mean of one ``[1, C, h, w]`` (or ``[C, h, w]``) ACM product."""
    values = _array(product).astype(np.float64)
    if values.ndim == 4:
        if values.shape[0] != 1:
            raise ShapeError(f"Expected a single-image ACM product, got {values.shape}")
        values = values[0]
    if values.ndim != 3:
        raise ShapeError(f"Expected [C, h, w] ACM product, got {values.shape}")
    return values.mean(axis=0)


def acm_overlay_mask(product, size: int, threshold: float = 0.5) -> np.ndarray:
    """
    Pixels of the full-resolution image where the normalized, bilinearly
    resized channel-mean map exceeds ``threshold``.
    """
    normalized = netpbm.normalize(acm_channel_mean(product))
    return F.resize_bilinear(normalized, size, size) > threshold


def _overlay(image: np.ndarray, region: np.ndarray) -> np.ndarray:
    rgb = np.clip(np.asarray(image, dtype=np.float64)[:3], 0.0, 1.0).transpose(1, 2, 0) * 255.0
    rgb[region] = 0.5 * rgb[region] + 0.5 * OVERLAY_TINT
    return np.round(rgb).astype(np.uint8)


def export_acm_maps(acm_products: Sequence, input_image, out_prefix: AnyPath,
                    threshold: float = 0.5) -> list[pathlib.Path]:
    """
    Write one map per decoder level, coarse to fine.

    Level ``k`` produces ``<prefix>_acm<k>.pgm`` (the channel mean of
    ``h * W(v)``, min-max normalized, at its native resolution) and
    ``<prefix>_acm<k>_overlay.ppm`` (the input image with pixels whose
    resized normalized value exceeds ``threshold`` tinted green).
    """
    if not acm_products:
        raise ValueError("No ACM products to export; was the model built with metaacm?")
    image = _array(input_image)
    if image.ndim == 4:
        image = image[0]
    size = image.shape[-1]
    prefix = str(out_prefix)
    written = []
    ranges = []
    for level, product in enumerate(acm_products, 1):
        channel_mean = acm_channel_mean(product)
        pixels, low, high = netpbm.quantize(channel_mean)
        path = pathlib.Path(f"{prefix}_acm{level}.pgm")
        netpbm.write_pgm(path, pixels)
        overlay = pathlib.Path(f"{prefix}_acm{level}_overlay.ppm")
        netpbm.write_ppm(overlay, _overlay(image, acm_overlay_mask(product, size, threshold)))
        written += [path, overlay]
        ranges.append((f"acm{level}", low, high))
    written.append(_write_sidecar(pathlib.Path(f"{prefix}_acm_maps.txt"), ranges))
    logger.info("Wrote %d ACM levels to %s_acm*", len(acm_products), prefix)
    return written
