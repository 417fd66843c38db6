"""
Procedural off-nadir building scenes, the dataset manifest and the
location-disjoint split.

Every scene is a set of box-shaped buildings on a textured background.  A
view at off-nadir angle ``theta`` displaces each roof along a fixed azimuth
by ``k * height * (tan(theta) - tan(reference))`` pixels from where the
reference view shows it, exposes the facade swept between the two roof
positions, and degrades the image with angle-dependent resolution loss,
blur, lighting and noise.  Masks are always the footprints
seen from the reference angle, as in a dataset annotated once per location.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import pathlib
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Union

import numpy as np
import scipy.ndimage

from . import functional as F
from .defaults import config, float_list
from .tensor import FormatError, Rng, read_ten, write_ten

logger = logging.getLogger(__name__)

AnyPath = Union[str, pathlib.Path]

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.6, 0.2, 0.2)
CHANNELS = 4
FACADE_SHADE = 0.6
MAX_BUILDINGS = 4
MAX_HEIGHT_M = 20.0
MANIFEST_NAME = "manifest.tsv"
MANIFEST_FIELDS = (
    "sample_id",
    "scene_id",
    "split",
    "off_nadir_deg",
    "gsd",
    "image_path",
    "mask_path",
    "corrected_mask_path",
)
NO_PATH = "-"


@dataclasses.dataclass(frozen=True)
class BenchmarkSettings:
    """Constants of the synthetic benchmark (``[benchmark]`` in ``conf.ini``)."""

    reference_angle: float = config.getfloat("benchmark", "reference_angle")
    gsd_reference: float = config.getfloat("benchmark", "gsd_reference")
    displacement_per_meter: float = config.getfloat("benchmark", "displacement_per_meter")
    view_azimuth: float = config.getfloat("benchmark", "view_azimuth")
    blur_base: float = config.getfloat("benchmark", "blur_base")
    blur_slope: float = config.getfloat("benchmark", "blur_slope")
    noise_base: float = config.getfloat("benchmark", "noise_base")
    noise_slope: float = config.getfloat("benchmark", "noise_slope")
    lighting_slope: float = config.getfloat("benchmark", "lighting_slope")
    corrected_label_angle: float = config.getfloat("benchmark", "corrected_label_angle")

    def obliquity(self, theta: float) -> float:
        """Distance of ``theta`` from the reference angle, in degrees."""
        return abs(theta - self.reference_angle)

    def blur_sigma(self, theta: float) -> float:
        return self.blur_base + self.blur_slope * self.obliquity(theta)

    def noise_sigma(self, theta: float) -> float:
        return self.noise_base + self.noise_slope * self.obliquity(theta)

    def intensity_scale(self, theta: float) -> float:
        return 1.0 - self.lighting_slope * self.obliquity(theta)

    def gsd_for_angle(self, theta: float) -> float:
        """Ground sample distance of a view; coarser as the view gets oblique."""
        _check_angle(theta)
        return self.gsd_reference / math.cos(math.radians(theta))

    @property
    def reference_view_gsd(self) -> float:
        """GSD of the reference view; images are resampled relative to it."""
        return self.gsd_for_angle(self.reference_angle)

    def parallax(self, theta: float) -> float:
        """Tangent distance ``tan(theta) - tan(reference)``; zero at the reference."""
        _check_angle(theta)
        return math.tan(math.radians(theta)) - math.tan(math.radians(self.reference_angle))

    def roof_displacement(self, height_m: float, theta: float) -> tuple[int, int]:
        """
        Integer ``(dy, dx)`` shift of a roof of height ``height_m`` at
        ``theta``, relative to where the reference view shows it.

        The magnitude is ``round(k * h * (tan(theta) - tan(reference)))``.
        It is signed, so views on the other side of the reference displace
        the roof the opposite way, and the reference view has no parallax.
        """
        distance = int(np.round(self.displacement_per_meter * height_m * self.parallax(theta)))
        azimuth = math.radians(self.view_azimuth)
        return (int(np.round(-distance * math.sin(azimuth))),
                int(np.round(distance * math.cos(azimuth))))

    def needs_corrected_labels(self, theta: float) -> bool:
        return abs(theta) > self.corrected_label_angle


def default_angles() -> list[float]:
    return float_list("benchmark", "angles")


def _check_angle(theta: float):
    if not -90.0 < theta < 90.0:
        raise ValueError(f"Off-nadir angle must be within (-90, 90), got {theta}")


@dataclasses.dataclass(frozen=True)
class Building:
    """Axis-aligned box: ground footprint in pixels, height in meters."""

    top: int
    left: int
    rows: int
    cols: int
    height_m: float
    albedo: tuple[float, ...]

    def __post_init__(self):
        if self.height_m < 0:
            raise ValueError(f"Building height must be >= 0, got {self.height_m}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("Building footprint must be at least one pixel")


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    world_seed: int
    size: int
    buildings: tuple[Building, ...]
    background_seed: int


@dataclasses.dataclass
class Sample:
    """
    One view of a scene.

    Attributes
    ----------
    image : np.ndarray
        ``[4, H, W]`` float32 in [0, 1] (R, G, B, NIR).
    mask : np.ndarray
        ``[H, W]`` reference-angle footprint in {0, 1}.
    corrected_mask : np.ndarray or None
        View-consistent footprint, when available.
    """

    sample_id: str
    scene_id: int
    split: str
    off_nadir: float
    gsd: float
    image: np.ndarray
    mask: np.ndarray
    corrected_mask: Optional[np.ndarray] = None

    @property
    def metadata(self) -> np.ndarray:
        return np.array([self.off_nadir, self.gsd], dtype=np.float64)


@dataclasses.dataclass(frozen=True)
class MetaStats:
    """Mean and standard deviation of (off_nadir_deg, gsd) over training data."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def from_values(cls, values: np.ndarray) -> MetaStats:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or not len(values):
            raise ValueError(f"Expected [N, fields] metadata values, got {values.shape}")
        std = values.std(axis=0)
        if np.any(std <= 0):
            raise ValueError(f"Metadata has zero spread: std={std.tolist()}")
        return cls(tuple(values.mean(axis=0).tolist()), tuple(std.tolist()))

    @classmethod
    def from_manifest(cls, manifest: Manifest, split: str = "train") -> MetaStats:
        rows = manifest.rows_for(split)
        if not rows:
            raise ValueError(f"Manifest has no {split!r} samples")
        return cls.from_values([(row.off_nadir, row.gsd) for row in rows])

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, values: dict) -> MetaStats:
        return cls(tuple(values["mean"]), tuple(values["std"]))


def normalize_metadata(meta, stats: MetaStats) -> np.ndarray:
    """z-score ``meta`` per field with the training statistics."""
    meta = np.asarray(meta, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(std == 0):
        raise ValueError(f"Cannot normalize with zero standard deviation: {stats.std}")
    if meta.shape[-1] != len(std):
        raise ValueError(f"Metadata has {meta.shape[-1]} fields, statistics have {len(std)}")
    return ((meta - np.asarray(stats.mean)) / std).astype(np.float32)


def denormalize_metadata(values, stats: MetaStats) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values * np.asarray(stats.std) + np.asarray(stats.mean)


def make_scene(scene_id: int, master_seed: int, size: int) -> SceneSpec:
    """Random buildings, seeded by ``(master_seed, scene_id)``."""
    if size < 8:
        raise ValueError(f"Scene size must be >= 8, got {size}")
    rng = Rng(master_seed, (scene_id,))
    count = int(rng.integers(MAX_BUILDINGS, 1)[0]) + 1
    low, high = max(2, size // 8), max(3, size // 4)
    margin = max(1, size // 16)
    buildings = []
    for _ in range(count):
        rows, cols = (int(v) + low for v in rng.integers(high - low + 1, 2))
        top = margin + int(rng.integers(max(1, size - 2 * margin - rows), 1)[0])
        left = margin + int(rng.integers(max(1, size - 2 * margin - cols), 1)[0])
        height_m = float(rng.uniform((1,))[0]) * MAX_HEIGHT_M
        albedo = tuple(float(v) for v in 0.55 + 0.4 * rng.uniform((CHANNELS,)))
        buildings.append(Building(top, left, rows, cols, height_m, albedo))
    background_seed = int(rng.integers(2**31 - 1, 1)[0])
    return SceneSpec(scene_id, master_seed, size, tuple(buildings), background_seed)


def _rectangle(size: int, top: int, left: int, rows: int, cols: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    mask[max(top, 0):max(top + rows, 0), max(left, 0):max(left + cols, 0)] = True
    return mask


def building_footprint(building: Building, theta: float, size: int,
                       settings: BenchmarkSettings) -> tuple[np.ndarray, np.ndarray]:
    """
    Visible parts of a building at ``theta``.

    Returns
    -------
    roof : np.ndarray
        The displaced roof.
    visible : np.ndarray
        Roof plus facade: the footprint swept from the reference roof to the
        displaced one.
    """
    dy, dx = settings.roof_displacement(building.height_m, theta)
    steps = max(abs(dy), abs(dx))
    visible = np.zeros((size, size), dtype=bool)
    for step in range(steps + 1):
        oy = int(np.round(step * dy / steps)) if steps else 0
        ox = int(np.round(step * dx / steps)) if steps else 0
        visible |= _rectangle(size, building.top + oy, building.left + ox,
                              building.rows, building.cols)
    roof = _rectangle(size, building.top + dy, building.left + dx,
                      building.rows, building.cols)
    return roof, visible


def scene_footprint(scene: SceneSpec, theta: float, settings: BenchmarkSettings) -> np.ndarray:
    """Union of every building's visible roof and facade at ``theta``."""
    mask = np.zeros((scene.size, scene.size), dtype=bool)
    for building in scene.buildings:
        mask |= building_footprint(building, theta, scene.size, settings)[1]
    return mask


def reference_mask(scene: SceneSpec, settings: BenchmarkSettings) -> np.ndarray:
    return scene_footprint(scene, settings.reference_angle, settings)


def _background(scene: SceneSpec) -> np.ndarray:
    rng = Rng(scene.background_seed)
    base = 0.2 + 0.2 * rng.uniform((CHANNELS, 1, 1))
    # vegetation-like texture: NIR bright, visible dark
    base[-1] += 0.15
    texture = scipy.ndimage.gaussian_filter(
        rng.normal((CHANNELS, scene.size, scene.size)), sigma=(0, 2.0, 2.0)
    )
    texture /= max(float(texture.std()), 1e-12)
    return np.clip(base + 0.05 * texture, 0.0, 1.0)


def render_clean(scene: SceneSpec, theta: float,
                 settings: BenchmarkSettings) -> tuple[np.ndarray, np.ndarray]:
    """
    Noise-free render at native resolution.

    Returns
    -------
    image : np.ndarray
        ``[4, H, W]`` float64.
    visible : np.ndarray
        The view-consistent footprint (roofs and facades).
    """
    image = _background(scene)
    parts = [building_footprint(b, theta, scene.size, settings) for b in scene.buildings]
    for building, (roof, visible) in zip(scene.buildings, parts):
        facade = visible & ~roof
        image[:, facade] = FACADE_SHADE * np.asarray(building.albedo)[:, None]
    for building, (roof, _) in zip(scene.buildings, parts):
        image[:, roof] = np.asarray(building.albedo)[:, None]
    footprint = np.zeros((scene.size, scene.size), dtype=bool)
    for _, visible in parts:
        footprint |= visible
    return image, footprint


def box_average_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Area-weighted downsampling weights, shape ``[out_size, in_size]``."""
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for i in range(out_size):
        start, end = i * scale, (i + 1) * scale
        for j in range(int(math.floor(start)), min(int(math.ceil(end)), in_size)):
            matrix[i, j] = (min(end, j + 1) - max(start, j)) / scale
    return matrix


def gsd_resample_matrix(size: int, gsd: float, gsd_reference: float) -> Optional[np.ndarray]:
    """
    Box-downsample by ``gsd / gsd_reference`` then bilinearly upsample back,
    as one ``[size, size]`` operator; ``None`` at or below the reference GSD.
    """
    factor = gsd / gsd_reference
    low = max(1, int(round(size / factor)))
    if factor <= 1.0 or low >= size:
        return None
    return F.interpolation_matrix(low, size) @ box_average_matrix(size, low)


def degrade(clean: np.ndarray, theta: float, gsd: float, rng: Rng,
            settings: BenchmarkSettings) -> np.ndarray:
    """Resolution loss, blur, lighting and noise; clipped into [0, 1]."""
    image = clean
    resample = gsd_resample_matrix(image.shape[-1], gsd, settings.reference_view_gsd)
    if resample is not None:
        image = resample @ image @ resample.T
    sigma = settings.blur_sigma(theta)
    image = scipy.ndimage.gaussian_filter(image, sigma=(0, sigma, sigma), mode="reflect")
    image = image * settings.intensity_scale(theta)
    image = image + settings.noise_sigma(theta) * rng.normal(image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def render_view(scene: SceneSpec, theta: float, gsd: float, rng: Rng,
                settings: Optional[BenchmarkSettings] = None
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Render one view of ``scene``.

    Parameters
    ----------
    scene : SceneSpec
    theta : float
        Off-nadir angle in degrees, within (-90, 90).
    gsd : float
        Ground sample distance of the view (m/px).
    rng : Rng
        Pixel-noise stream.
    settings : BenchmarkSettings, optional

    Returns
    -------
    image : np.ndarray
        ``[4, H, W]`` float32 in [0, 1].
    mask : np.ndarray
        Reference-angle footprint, float32 in {0, 1}.
    corrected_mask : np.ndarray
        Footprint consistent with this view, float32 in {0, 1}.
    """
    settings = settings or BenchmarkSettings()
    _check_angle(theta)
    clean, visible = render_clean(scene, theta, settings)
    image = degrade(clean, theta, gsd, rng, settings)
    mask = reference_mask(scene, settings)
    return image, mask.astype(np.float32), visible.astype(np.float32)


def label_disagreement(mask: np.ndarray, corrected_mask: np.ndarray) -> float:
    """Fraction of pixels where the two labels differ."""
    return float(np.mean(np.asarray(mask) != np.asarray(corrected_mask)))


@dataclasses.dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    scene_id: int
    split: str
    off_nadir: float
    gsd: float
    image_path: str
    mask_path: str
    corrected_mask_path: Optional[str] = None

    def to_line(self) -> str:
        return "\t".join((
            self.sample_id,
            str(self.scene_id),
            self.split,
            repr(float(self.off_nadir)),
            repr(float(self.gsd)),
            self.image_path,
            self.mask_path,
            self.corrected_mask_path or NO_PATH,
        ))

    @classmethod
    def from_line(cls, line: str, lineno: int = 0) -> ManifestRow:
        fields = line.split("\t")
        if len(fields) != len(MANIFEST_FIELDS):
            raise FormatError(
                f"Manifest line {lineno}: expected {len(MANIFEST_FIELDS)} fields, "
                f"got {len(fields)}"
            )
        sample_id, scene_id, split, angle, gsd, image, mask, corrected = fields
        if split not in SPLITS:
            raise FormatError(f"Manifest line {lineno}: unknown split {split!r}")
        try:
            return cls(sample_id, int(scene_id), split, float(angle), float(gsd),
                       image, mask, None if corrected == NO_PATH else corrected)
        except ValueError as ex:
            raise FormatError(f"Manifest line {lineno}: {ex}") from None


@dataclasses.dataclass
class Manifest:
    """
    Index of a generated dataset.

    Paths in rows are relative to ``root``, the directory holding
    ``manifest.tsv``.
    """

    root: pathlib.Path
    rows: list[ManifestRow] = dataclasses.field(default_factory=list)

    def __iter__(self) -> Iterator[ManifestRow]:
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def rows_for(self, split: str) -> list[ManifestRow]:
        if split not in SPLITS:
            raise ValueError(f"Unknown split {split!r}; expected one of {SPLITS}")
        return [row for row in self.rows if row.split == split]

    def scene_ids(self, split: Optional[str] = None) -> set[int]:
        rows = self.rows if split is None else self.rows_for(split)
        return {row.scene_id for row in rows}

    def path(self, relative: str) -> pathlib.Path:
        return self.root / relative

    def write(self, path: Optional[AnyPath] = None) -> pathlib.Path:
        path = pathlib.Path(path) if path is not None else self.root / MANIFEST_NAME
        lines = ["# " + "\t".join(MANIFEST_FIELDS)]
        lines.extend(row.to_line() for row in self.rows)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: AnyPath) -> Manifest:
        """Read ``manifest.tsv`` (or the directory containing it)."""
        path = pathlib.Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        rows = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                rows.append(ManifestRow.from_line(line, lineno))
        return cls(path.parent, rows)

    def load(self, row: ManifestRow, size: Optional[int] = None) -> Sample:
        return load_sample(self, row, size=size)


def largest_remainder_counts(total: int, ratios: Sequence[float]) -> list[int]:
    """
    Integer partition sizes proportional to ``ratios``; every partition gets
    at least one item.
    """
    if total < len(ratios):
        raise ValueError(
            f"Cannot split {total} scenes into {len(ratios)} non-empty partitions"
        )
    quotas = [total * ratio for ratio in ratios]
    counts = [int(math.floor(quota)) for quota in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    for i, count in enumerate(counts):
        if count == 0:
            donor = max(range(len(counts)), key=lambda j: (counts[j], -j))
            counts[donor] -= 1
            counts[i] = 1
    return counts


def assign_splits(scene_ids: Sequence[int], ratios: Sequence[float] = DEFAULT_RATIOS,
                  seed: int = 0) -> dict[int, str]:
    """Shuffle scenes with ``seed`` and assign train / val / test by ratio."""
    if len(ratios) != len(SPLITS):
        raise ValueError(f"Expected {len(SPLITS)} ratios, got {len(ratios)}")
    if any(ratio < 0 for ratio in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"Split ratios must be non-negative and sum to 1, got {ratios}")
    scenes = sorted(set(scene_ids))
    counts = largest_remainder_counts(len(scenes), ratios)
    order = Rng(seed, (len(scenes),)).permutation(len(scenes))
    assignment = {}
    start = 0
    for split, count in zip(SPLITS, counts):
        for index in order[start:start + count]:
            assignment[scenes[int(index)]] = split
        start += count
    return assignment


def split_dataset(manifest: Manifest, ratios: Sequence[float] = DEFAULT_RATIOS,
                  seed: int = 0) -> Manifest:
    """
    Location-disjoint split: scenes (not samples) are partitioned and every
    sample inherits its scene's split.
    """
    assignment = assign_splits([row.scene_id for row in manifest], ratios, seed)
    rows = [dataclasses.replace(row, split=assignment[row.scene_id]) for row in manifest]
    return Manifest(manifest.root, rows)


def sample_id_for(scene_id: int, theta: float) -> str:
    return f"scene{scene_id:05d}_{theta:+06.1f}"


def _angle_key(theta: float) -> int:
    return int(round(theta * 100)) + 100000


def generate_dataset(n_scenes: int, angles: Sequence[float], out_dir: AnyPath,
                     master_seed: int, size: int = config.getint("desk", "input_size"),
                     settings: Optional[BenchmarkSettings] = None,
                     ratios: Sequence[float] = DEFAULT_RATIOS,
                     threads: int = 1) -> Manifest:
    """
    Render ``n_scenes`` scenes at every angle and write them under ``out_dir``.

    Images, masks and corrected masks are ``.ten`` files in ``images/``,
    ``masks/`` and ``corrected/``; ``manifest.tsv`` indexes them.  Corrected
    masks are written for test scenes at angles beyond the corrected-label
    threshold.  Each (scene, angle) pair uses its own noise stream, so the
    output is identical for any number of threads.

    Returns
    -------
    Manifest
    """
    settings = settings or BenchmarkSettings()
    angles = [float(angle) for angle in angles]
    if n_scenes < 1:
        raise ValueError(f"n_scenes must be >= 1, got {n_scenes}")
    if not angles:
        raise ValueError("At least one angle is required")
    for angle in angles:
        _check_angle(angle)
    if not any(abs(angle - settings.reference_angle) < 1e-9 for angle in angles):
        raise ValueError(f"Angles must include the reference angle {settings.reference_angle}")
    if len(set(angles)) != len(angles):
        raise ValueError(f"Duplicate angles: {angles}")

    out_dir = pathlib.Path(out_dir)
    for subdir in ("images", "masks", "corrected"):
        (out_dir / subdir).mkdir(parents=True, exist_ok=True)

    scenes = [make_scene(scene_id, master_seed, size) for scene_id in range(n_scenes)]
    if n_scenes >= len(SPLITS):
        splits = assign_splits(range(n_scenes), ratios, master_seed)
    else:
        logger.warning(
            "%d scene(s) cannot be split three ways; all are assigned to 'test'", n_scenes
        )
        splits = {scene_id: "test" for scene_id in range(n_scenes)}

    def render(job):
        scene, theta = job
        sample_id = sample_id_for(scene.scene_id, theta)
        gsd = settings.gsd_for_angle(theta)
        rng = Rng(master_seed, (scene.scene_id, _angle_key(theta)))
        image, mask, corrected = render_view(scene, theta, gsd, rng, settings)
        image_path = f"images/{sample_id}.ten"
        mask_path = f"masks/{sample_id}.ten"
        write_ten(out_dir / image_path, image)
        write_ten(out_dir / mask_path, mask)
        split = splits[scene.scene_id]
        corrected_path = None
        if split == "test" and settings.needs_corrected_labels(theta):
            corrected_path = f"corrected/{sample_id}.ten"
            write_ten(out_dir / corrected_path, corrected)
        return ManifestRow(sample_id, scene.scene_id, split, theta, gsd,
                           image_path, mask_path, corrected_path)

    jobs = [(scene, theta) for scene in scenes for theta in angles]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            rows = list(executor.map(render, jobs))
    else:
        rows = [render(job) for job in jobs]

    manifest = Manifest(out_dir, rows)
    manifest.write()
    logger.info(
        "Wrote %d samples from %d scenes to %s (train/val/test scenes: %s)",
        len(rows), n_scenes, out_dir,
        "/".join(str(len(manifest.scene_ids(split))) for split in SPLITS),
    )
    return manifest


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[-2:] == (size, size):
        return image
    return F.resize_bilinear(image, size, size)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of a ``[H, W]`` label."""
    if mask.shape == (size, size):
        return mask
    rows = np.minimum((np.arange(size) + 0.5) * mask.shape[0] / size, mask.shape[0] - 1)
    cols = np.minimum((np.arange(size) + 0.5) * mask.shape[1] / size, mask.shape[1] - 1)
    return mask[rows.astype(int)[:, None], cols.astype(int)[None, :]]


def load_sample(manifest: Manifest, row: ManifestRow, size: Optional[int] = None) -> Sample:
    """Read a sample's arrays, resizing them to ``size`` if given."""
    image = read_ten(manifest.path(row.image_path)).astype(np.float32)
    mask = read_ten(manifest.path(row.mask_path)).astype(np.float32)
    corrected = None
    if row.corrected_mask_path is not None:
        corrected = read_ten(manifest.path(row.corrected_mask_path)).astype(np.float32)
    if image.ndim != 3 or mask.shape != image.shape[1:]:
        raise FormatError(
            f"{row.sample_id}: image {image.shape} and mask {mask.shape} disagree"
        )
    if size is not None:
        image = resize_image(image, size)
        mask = resize_mask(mask, size)
        corrected = None if corrected is None else resize_mask(corrected, size)
    return Sample(row.sample_id, row.scene_id, row.split, row.off_nadir, row.gsd,
                  image, mask, corrected)
