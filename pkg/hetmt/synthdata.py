"""
Gerador determinístico de fantomas pareados pseudo-MR/pseudo-CT.

Cada caso traz um mapa de rótulos dos órgãos e o campo de ruído verdadeiro
``sigma_true`` do canal CT, que serve de oráculo para a calibração.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from hetmt.config import PhantomSpec
from hetmt.errors import PhantomGenerationError, VolumeFormatError

logger = logging.getLogger(__name__)

KINDS = ("intensity", "label", "variance")
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
VOLUME_FILES = ("mr", "ct", "labels", "sigma_true")


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, ...]
    kind: str = "intensity"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise VolumeFormatError(f"kind desconhecido: {self.kind}")
        if self.kind == "label":
            self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        else:
            self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.data.ndim:
            raise VolumeFormatError(f"spacing {self.spacing} não bate com shape {self.data.shape}")
        if min(self.spacing) <= 0:
            raise VolumeFormatError(f"spacing deve ser estritamente positivo: {self.spacing}")
        if self.kind == "variance" and np.any(self.data < 0):
            raise VolumeFormatError("Volume de variância com valores negativos")

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def dtype_name(self):
        return "u8" if self.kind == "label" else "f32"

    def check_labels(self, num_classes):
        if self.kind == "label" and self.data.size and int(self.data.max()) >= num_classes:
            raise VolumeFormatError(f"Rótulo {int(self.data.max())} fora de [0, {num_classes - 1}]")
        return self

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.spacing == other.spacing
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass
class CaseBundle:
    case_id: str
    mr: Volume
    ct: Volume
    labels: Volume
    sigma_true: Volume
    # CT sem ruído; só existe em memória (oráculo de calibração).
    ct_clean: Optional[Volume] = field(default=None, compare=False)

    def volumes(self):
        return {"mr": self.mr, "ct": self.ct, "labels": self.labels, "sigma_true": self.sigma_true}


def _stem(path):
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def write_volume(volume, path):
    """
    Grava um volume como payload little-endian ``<nome>.bin`` + sidecar ``<nome>.json``.

    Args:
        volume (Volume): Volume válido.
        path: Caminho base (com ou sem extensão).

    Returns:
        Path: Caminho do sidecar JSON.
    """
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": list(volume.shape),
        "dtype": volume.dtype_name,
        "spacing": list(volume.spacing),
        "order": "row-major",
        "kind": volume.kind,
    }
    payload = volume.data.astype(DTYPES[volume.dtype_name], copy=False).tobytes(order="C")
    with open(stem.with_suffix(".bin"), "wb") as f:
        f.write(payload)
    with open(stem.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    return stem.with_suffix(".json")


def read_volume(path, num_classes=None):
    """
    Lê um volume gravado por ``write_volume``.

    Args:
        path: Caminho base, ``.json`` ou ``.bin``.
        num_classes (int, opcional): Se informado, valida a faixa dos rótulos.

    Returns:
        Volume: Volume lido, idêntico bit a bit ao gravado.
    """
    stem = _stem(path)
    with open(stem.with_suffix(".json"), "r", encoding="utf-8") as f:
        header = json.load(f)
    dtype_name = header.get("dtype")
    if dtype_name not in DTYPES:
        raise VolumeFormatError(f"dtype desconhecido em {stem}: {dtype_name}")
    if header.get("order", "row-major") != "row-major":
        raise VolumeFormatError(f"Ordem não suportada em {stem}: {header.get('order')}")
    kind = header.get("kind", "intensity")
    if (kind == "label") != (dtype_name == "u8"):
        raise VolumeFormatError(f"kind '{kind}' incompatível com dtype '{dtype_name}' em {stem}")
    shape = tuple(int(s) for s in header["shape"])
    dtype = DTYPES[dtype_name]
    raw = stem.with_suffix(".bin").read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"Payload de {stem} tem {len(raw) // dtype.itemsize} voxels, cabeçalho declara {int(np.prod(shape))}"
        )
    data = np.frombuffer(raw, dtype=dtype).reshape(shape)
    volume = Volume(data=data.astype(dtype.newbyteorder("="), copy=True), spacing=tuple(header["spacing"]), kind=kind)
    if num_classes is not None:
        volume.check_labels(num_classes)
    return volume


def _ellipse_mask(shape, center, radii):
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def _draw_geometry(spec, organ, rng):
    """Sorteia centro e semi-eixos (em voxels) de um órgão."""
    shape = spec.image_size
    in_plane = shape[-2:]
    center, radii = [], []
    for axis in range(2):
        c = rng.uniform(organ.center_lo[axis], organ.center_hi[axis]) * (in_plane[axis] - 1)
        r = rng.uniform(organ.radius_lo[axis], organ.radius_hi[axis]) * in_plane[axis]
        center.append(c)
        radii.append(max(r, 1.0))
    if len(shape) == 3:
        depth_c = rng.uniform(0.4, 0.6) * (shape[0] - 1)
        depth_r = max(rng.uniform(organ.radius_lo[0], organ.radius_hi[0]) * shape[0] * 2.0, 1.0)
        center.insert(0, depth_c)
        radii.insert(0, depth_r)
    return center, radii


def _place_organs(spec, rng):
    labels = np.zeros(spec.image_size, dtype=np.uint8)
    rims = np.zeros(spec.image_size, dtype=bool)
    for organ in spec.organs:
        for attempt in range(1, spec.max_retries + 1):
            center, radii = _draw_geometry(spec, organ, rng)
            mask = _ellipse_mask(spec.image_size, center, radii)
            # Um voxel de folga entre órgãos.
            grown = _ellipse_mask(spec.image_size, center, [r + 1.0 for r in radii])
            if mask.any() and not np.any(grown & (labels != 0)):
                labels[mask] = organ.label
                if organ.rim and spec.rim_width > 0:
                    inner = [max(r - spec.rim_width, 0.5) for r in radii]
                    rims |= mask & ~_ellipse_mask(spec.image_size, center, inner)
                logger.debug(f"Órgão {organ.name} posicionado na tentativa {attempt}")
                break
        else:
            raise PhantomGenerationError(organ.name, spec.max_retries)
    return labels, rims


def boundary_distance(labels):
    """Distância euclidiana exata (em voxels) até o voxel de fronteira mais próximo."""
    boundary = np.zeros(labels.shape, dtype=bool)
    for axis in range(labels.ndim):
        diff = np.diff(labels.astype(np.int16), axis=axis) != 0
        lo = [slice(None)] * labels.ndim
        hi = [slice(None)] * labels.ndim
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        boundary[tuple(lo)] |= diff
        boundary[tuple(hi)] |= diff
    if not boundary.any():
        return np.full(labels.shape, np.inf)
    return distance_transform_edt(~boundary)


def noise_field(spec, distance):
    return spec.sigma_lo + (spec.sigma_hi - spec.sigma_lo) * np.exp(-distance / spec.decay_length)


def gen_phantom_case(spec, case_seed, case_id=None):
    """
    Gera um caso do fantoma a partir de (spec, case_seed).

    Args:
        spec (PhantomSpec): Especificação validada.
        case_seed (int): Semente do caso.
        case_id (str, opcional): Identificador; padrão ``case_<seed>``.

    Returns:
        CaseBundle: mr, ct, labels, sigma_true (+ ct_clean em memória).
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(int(case_seed) % 2**64))
    labels, rims = _place_organs(spec, rng)

    ct_means = np.asarray(spec.ct_means, dtype=np.float64)
    mr_means = np.asarray(spec.mr_means, dtype=np.float64)
    ct_base = ct_means[labels]
    mr_base = mr_means[labels]
    ct_base[rims] = spec.rim_ct
    mr_base[rims] = spec.rim_mr

    # Textura suave compartilhada: o MR carrega a informação da textura do CT.
    white = rng.standard_normal(spec.image_size)
    texture = gaussian_filter(white, sigma=spec.texture_scale, mode="reflect")
    texture /= max(float(texture.std()), 1e-12)

    sigma = noise_field(spec, boundary_distance(labels))
    ct_clean = ct_base + spec.texture_ct * texture
    ct = ct_clean + sigma * rng.standard_normal(spec.image_size)
    mr = mr_base + spec.texture_mr * texture

    spacing = tuple(spec.spacing)
    return CaseBundle(
        case_id=case_id or f"case_{case_seed}",
        mr=Volume(mr, spacing, "intensity"),
        ct=Volume(ct, spacing, "intensity"),
        labels=Volume(labels, spacing, "label"),
        sigma_true=Volume(sigma, spacing, "variance"),
        ct_clean=Volume(ct_clean, spacing, "intensity"),
    )


def gen_dataset(spec, n_cases, out_dir):
    """
    Gera ``n_cases`` casos com sementes ``spec.seed + índice`` e grava o manifesto.

    Returns:
        list[dict]: Entradas do manifesto (id, mr, ct, labels, sigma_true, split, fold).
    """
    if n_cases < 1:
        raise ValueError(f"n_cases deve ser >= 1 (recebido {n_cases})")
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_test = int(np.ceil(n_cases * spec.test_fraction)) if spec.test_fraction > 0 else 0
    n_test = min(n_test, n_cases - 1)

    manifest = []
    for index in range(n_cases):
        case_id = f"case_{index:03d}"
        bundle = gen_phantom_case(spec, spec.seed + index, case_id=case_id)
        entry = {"id": case_id}
        for name, volume in bundle.volumes().items():
            write_volume(volume, out_dir / f"{case_id}_{name}")
            entry[name] = f"{case_id}_{name}.json"
        entry["split"] = "test" if index >= n_cases - n_test else "train"
        entry["fold"] = index % spec.n_folds
        manifest.append(entry)
        logger.info(f"Caso {case_id} gerado (seed={spec.seed + index}, split={entry['split']})")

    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Manifesto salvo em {manifest_path} com {len(manifest)} casos")
    return manifest


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifesto não encontrado: {path}")
    with open(path, "r", encoding="utf-8") as f:
        entries = json.load(f)
    for entry in entries:
        missing = {"id", *VOLUME_FILES, "split"} - set(entry)
        if missing:
            raise VolumeFormatError(f"Entrada {entry.get('id')} do manifesto sem campos {sorted(missing)}")
    return entries


def select_cases(entries, split="train", holdout_fold=None):
    """Filtra o manifesto pelo flag de split ou, se informado, pelo fold de validação cruzada."""
    if holdout_fold is None:
        return [e for e in entries if e["split"] == split]
    if split == "test":
        return [e for e in entries if e.get("fold") == holdout_fold]
    return [e for e in entries if e.get("fold") != holdout_fold]


def load_case(entry, base_dir, num_classes=None):
    base_dir = Path(base_dir)
    vols = {name: read_volume(base_dir / entry[name]) for name in VOLUME_FILES}
    if num_classes is not None:
        vols["labels"].check_labels(num_classes)
    return CaseBundle(case_id=entry["id"], **vols)


def manifest_dir(manifest_path):
    return Path(os.path.dirname(os.path.abspath(manifest_path)))
