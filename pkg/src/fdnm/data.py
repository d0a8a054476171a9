"""Synthetic two-modality identity data, PNM image IO and the PK sampler."""
from __future__ import annotations

import csv
import os
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .modules import IR, VIS

MODALITY_NAMES = {VIS: "VIS", IR: "IR"}
MODALITY_CODES = {v: k for k, v in MODALITY_NAMES.items()}
# one camera per modality in the synthetic set
CAMERA_OF = {VIS: 1, IR: 2}


def rng_for(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    """Independent stream keyed by (seed, purpose, counters...)."""
    key = [int(seed), zlib.crc32(purpose.encode("utf-8"))] + [int(c) for c in counters]
    return np.random.default_rng(np.random.SeedSequence(key))


# -- image IO -------------------------------------------------------------------
class PNMError(ValueError):
    pass


def _read_token(blob: bytes, pos: int) -> tuple[bytes, int]:
    n = len(blob)
    while pos < n:
        ch = blob[pos:pos + 1]
        if ch == b"#":
            while pos < n and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PNMError(f"unexpected end of header at byte {pos}")
    return blob[start:pos], pos


def decode_pnm(blob: bytes) -> np.ndarray:
    """Parse a binary P5/P6 image (maxval 255) into ``C x H x W`` floats in [0, 1]."""
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"unsupported magic {magic!r} at byte 0 (need P5 or P6)")
    pos = 2
    fields = []
    for _ in range(3):
        tok_start = pos
        tok, pos = _read_token(blob, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise PNMError(f"bad header number {tok!r} near byte {tok_start}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PNMError(f"non-positive size {width}x{height} in header")
    if maxval != 255:
        raise PNMError(f"maxval {maxval} not supported (need 255)")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise PNMError(f"missing whitespace after maxval at byte {pos}")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    if len(blob) - pos < need:
        raise PNMError(
            f"payload truncated at byte {len(blob)}: expected {need} bytes from byte {pos}"
        )
    data = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    img = data.reshape(height, width, channels).transpose(2, 0, 1)
    return img.astype(np.float64) / 255.0


def load_image(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        return decode_pnm(blob)
    except PNMError as exc:
        raise PNMError(f"{path}: {exc}") from None


def to_bytes(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.min(initial=0.0) < -1e-9 or img.max(initial=0.0) > 1 + 1e-9:
        raise ValueError(
            f"pixel values must lie in [0, 1], got [{img.min():.4g}, {img.max():.4g}]"
        )
    # round half up
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected 1 x H x W or 3 x H x W image, got {img.shape}")
    c, h, w = img.shape
    magic = b"P6" if c == 3 else b"P5"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + to_bytes(img).transpose(1, 2, 0).tobytes()


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img))


# -- dataset -------------------------------------------------------------------
@dataclass
class SynthSpec:
    num_identities: int = 20
    images_per_identity: int = 16   # per modality, training split
    test_images: int = 4            # per modality, held-out split
    height: int = 32
    width: int = 16
    noise: float = 0.08
    jitter: int = 2
    gain: float = 0.2
    ir_brightness: float = 0.6
    ir_blur: int = 1
    seed: int = 0

    def __post_init__(self):
        if min(self.num_identities, self.images_per_identity, self.height, self.width) < 1:
            raise ValueError("synthetic sizes must be positive")
        if self.test_images < 0 or self.noise < 0:
            raise ValueError("test_images and noise must be non-negative")


@dataclass
class Dataset:
    images: np.ndarray       # N x 3 x H x W in [0, 1]
    identities: np.ndarray   # N
    modalities: np.ndarray   # N, VIS or IR
    cameras: np.ndarray      # N

    def __len__(self) -> int:
        return int(self.identities.size)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.identities[idx], self.modalities[idx],
                       self.cameras[idx])

    @property
    def num_classes(self) -> int:
        return int(self.identities.max()) + 1 if len(self) else 0


@dataclass
class SynthData:
    train: Dataset
    test: Dataset
    templates: np.ndarray  # noise-free VIS rendering per identity


@dataclass
class _Signature:
    background: np.ndarray
    skin: np.ndarray
    head_r: int
    torso: np.ndarray
    torso_top: int
    torso_bottom: int
    torso_half: int
    stripe_dir: int
    stripe_period: int
    stripe_phase: int
    stripe_depth: float
    legs: np.ndarray
    leg_gap: int
    bag: np.ndarray | None
    bag_side: int
    bag_row: int


def _signature(seed: int, identity: int, h: int, w: int) -> _Signature:
    rng = rng_for(seed, "identity", identity)
    torso_top = int(round(h * rng.uniform(0.24, 0.32)))
    torso_bottom = int(round(h * rng.uniform(0.52, 0.64)))
    return _Signature(
        background=rng.uniform(0.05, 0.3) + rng.uniform(-0.04, 0.04, size=3),
        skin=rng.uniform(0.45, 0.95, size=3),
        head_r=int(rng.integers(2, 4)),
        torso=rng.uniform(0.05, 1.0, size=3),
        torso_top=torso_top,
        torso_bottom=torso_bottom,
        torso_half=int(rng.integers(max(2, w // 5), max(3, w // 2 - 1))),
        stripe_dir=int(rng.integers(0, 4)),
        stripe_period=int(rng.integers(2, 7)),
        stripe_phase=int(rng.integers(0, 7)),
        stripe_depth=float(rng.uniform(0.15, 0.45)),
        legs=rng.uniform(0.05, 1.0, size=3),
        leg_gap=int(rng.integers(0, 4)),
        bag=rng.uniform(0.1, 1.0, size=3) if rng.random() < 0.5 else None,
        bag_side=int(rng.integers(0, 2)),
        bag_row=int(rng.integers(torso_top, max(torso_top + 1, torso_bottom - 3))),
    )


def _render(sig: _Signature, h: int, w: int, dy: int = 0, dx: int = 0) -> np.ndarray:
    img = np.empty((3, h, w))
    img[:] = np.clip(sig.background, 0, 1)[:, None, None]
    yy, xx = np.mgrid[0:h, 0:w]
    cx = (w - 1) / 2.0 + dx
    cy = sig.head_r + 1 + dy
    head = (yy - cy) ** 2 + (xx - cx) ** 2 <= sig.head_r ** 2 + 0.5
    img[:, head] = sig.skin[:, None]

    top, bottom = sig.torso_top + dy, sig.torso_bottom + dy
    torso = (yy >= top) & (yy < bottom) & (np.abs(xx - cx) <= sig.torso_half)
    coord = [yy - top, xx - int(round(cx)), yy + xx, yy - xx][sig.stripe_dir]
    stripes = ((coord + sig.stripe_phase) % sig.stripe_period) < sig.stripe_period / 2
    shade = np.where(stripes, 1.0, 1.0 - sig.stripe_depth)
    for ch in range(3):
        plane = img[ch]
        plane[torso] = (sig.torso[ch] * shade)[torso]

    legs = (yy >= bottom) & (np.abs(xx - cx) <= max(sig.torso_half - 1, 1)) & (
        np.abs(xx - cx) >= sig.leg_gap / 2.0
    )
    img[:, legs] = sig.legs[:, None]

    if sig.bag is not None:
        bx = cx + (sig.torso_half + 1.5) * (1 if sig.bag_side else -1)
        bag = (yy >= sig.bag_row + dy) & (yy < sig.bag_row + dy + 4) & (np.abs(xx - bx) <= 1.0)
        img[:, bag] = sig.bag[:, None]
    return img


def _blur(img: np.ndarray, radius: int) -> np.ndarray:
    if radius < 1:
        return img
    # binomial kernel approximates a Gaussian of the given radius
    k = np.array([1.0])
    for _ in range(2 * radius):
        k = np.convolve(k, [0.5, 0.5])
    padded = np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    h, w = img.shape[1:]
    tmp = sum(k[i] * padded[:, i:i + h, :] for i in range(k.size))
    return sum(k[i] * tmp[:, :, i:i + w] for i in range(k.size))


def ir_transform(img: np.ndarray, brightness: float = 0.6, blur: int = 1) -> np.ndarray:
    """Fixed VIS -> IR mapping: luma collapse, brightness scale, blur."""
    luma = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    out = np.repeat((luma * brightness)[None], 3, axis=0)
    return _blur(out, blur)


def _sample_image(sig, spec: SynthSpec, modality: int, rng: np.random.Generator) -> np.ndarray:
    dy, dx = (int(v) for v in rng.integers(-spec.jitter, spec.jitter + 1, size=2))
    img = _render(sig, spec.height, spec.width, dy, dx)
    img = img * rng.uniform(1.0 - spec.gain, 1.0 + spec.gain)
    if modality == IR:
        img = ir_transform(img, spec.ir_brightness, spec.ir_blur)
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _build(spec: SynthSpec, sigs, per_modality: int, split: str) -> Dataset:
    images, ids, mods = [], [], []
    for identity, sig in enumerate(sigs):
        for modality in (VIS, IR):
            for k in range(per_modality):
                rng = rng_for(spec.seed, f"{split}-image", identity, modality, k)
                images.append(_sample_image(sig, spec, modality, rng))
                ids.append(identity)
                mods.append(modality)
    mods_arr = np.array(mods, dtype=np.int64)
    return Dataset(
        np.array(images).reshape(-1, 3, spec.height, spec.width),
        np.array(ids, dtype=np.int64),
        mods_arr,
        np.array([CAMERA_OF[m] for m in mods], dtype=np.int64),
    )


def generate(spec: SynthSpec) -> SynthData:
    """Render the training and held-out splits for ``spec``.

    Both splits share identities (closed-set); the held-out images use
    independent jitter and noise draws.
    """
    sigs = [_signature(spec.seed, i, spec.height, spec.width) for i in range(spec.num_identities)]
    templates = np.array([_render(s, spec.height, spec.width) for s in sigs])
    flat = templates.reshape(len(sigs), -1)
    if len(sigs) > 1:
        d2 = ((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1)
        d2[np.diag_indices(len(sigs))] = np.inf
        if d2.min() <= 0:
            i, j = np.unravel_index(np.argmin(d2), d2.shape)
            raise RuntimeError(f"identities {i} and {j} render identically; change the seed")
    train = _build(spec, sigs, spec.images_per_identity, "train")
    test = _build(spec, sigs, spec.test_images, "test")
    return SynthData(train, test, templates)


def write_dataset(data: SynthData, out_dir: str | os.PathLike) -> Path:
    """Write PNM files and ``manifest.tsv`` (path, identity, modality, camera)."""
    out = Path(out_dir)
    rows = []
    for split, ds in (("train", data.train), ("test", data.test)):
        (out / split).mkdir(parents=True, exist_ok=True)
        counters: dict[tuple[int, int], int] = {}
        for img, ident, mod, cam in zip(ds.images, ds.identities, ds.modalities, ds.cameras):
            k = counters.get((ident, mod), 0)
            counters[(ident, mod)] = k + 1
            rel = f"{split}/{ident:04d}_{MODALITY_NAMES[mod].lower()}_{k:03d}.ppm"
            save_image(img, out / rel)
            rows.append((rel, int(ident), MODALITY_NAMES[mod], int(cam)))
    with open(out / "manifest.tsv", "w", newline="\n") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(("path", "identity", "modality", "camera"))
        writer.writerows(rows)
    return out / "manifest.tsv"


def read_dataset(root: str | os.PathLike, split: str | None = None) -> Dataset:
    """Load a dataset written by :func:`write_dataset`.

    ``split`` filters by the leading path component (``train`` / ``test``).
    """
    root = Path(root)
    images, ids, mods, cams = [], [], [], []
    with open(root / "manifest.tsv", newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            if split is not None and Path(row["path"]).parts[0] != split:
                continue
            img = load_image(root / row["path"])
            if img.shape[0] == 1:
                img = np.repeat(img, 3, axis=0)
            images.append(img)
            ids.append(int(row["identity"]))
            mods.append(MODALITY_CODES[row["modality"]])
            cams.append(int(row["camera"]))
    if not images:
        raise ValueError(f"no images for split {split!r} under {root}")
    return Dataset(np.array(images), np.array(ids, dtype=np.int64),
                   np.array(mods, dtype=np.int64), np.array(cams, dtype=np.int64))


# -- sampling and augmentation --------------------------------------------------------
@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    modalities: np.ndarray
    indices: np.ndarray


class PKSampler:
    """P identities x K images per modality, without replacement per epoch.

    Each identity's VIS and IR pools are shuffled and cut into K-sized
    chunks; batches then draw P distinct identities, favouring those with
    the most chunks left. Leftover chunks that cannot fill a batch of P
    distinct identities are dropped.
    """

    def __init__(self, dataset: Dataset, p: int = 6, k: int = 4, seed: int = 0):
        self.dataset = dataset
        self.p, self.k, self.seed = p, k, seed
        self.pools: dict[int, dict[int, np.ndarray]] = {}
        for ident in np.unique(dataset.identities):
            pools = {m: np.flatnonzero((dataset.identities == ident) & (dataset.modalities == m))
                     for m in (VIS, IR)}
            if min(len(v) for v in pools.values()) >= k:
                self.pools[int(ident)] = pools
        if len(self.pools) < p:
            raise ValueError(
                f"PK sampling needs {p} identities with >= {k} images per modality, "
                f"dataset has {len(self.pools)}"
            )

    def epoch(self, epoch: int) -> list[np.ndarray]:
        rng = rng_for(self.seed, "pk", epoch)
        chunks: dict[int, list[np.ndarray]] = {}
        for ident, pools in self.pools.items():
            vis = rng.permutation(pools[VIS])
            ir = rng.permutation(pools[IR])
            n = min(len(vis), len(ir)) // self.k
            chunks[ident] = [
                np.concatenate([vis[c * self.k:(c + 1) * self.k], ir[c * self.k:(c + 1) * self.k]])
                for c in range(n)
            ]
        batches = []
        while True:
            live = [i for i, c in chunks.items() if c]
            if len(live) < self.p:
                break
            tiebreak = rng.random(len(live))
            order = sorted(range(len(live)), key=lambda j: (-len(chunks[live[j]]), tiebreak[j]))
            chosen = [live[j] for j in order[:self.p]]
            picked = [chunks[i].pop() for i in chosen]
            vis = np.concatenate([c[:self.k] for c in picked])
            ir = np.concatenate([c[self.k:] for c in picked])
            batches.append(np.concatenate([vis, ir]))
        return batches

    def batch(self, epoch: int, step: int, flip: bool = True) -> Batch:
        idx = self.epoch(epoch)[step]
        return make_batch(self.dataset, idx, rng_for(self.seed, "augment", epoch, step) if flip else None)


def make_batch(dataset: Dataset, idx: np.ndarray, rng: np.random.Generator | None) -> Batch:
    images = dataset.images[idx].copy()
    if rng is not None:
        flips = rng.random(len(idx)) < 0.5
        images[flips] = images[flips][..., ::-1]
    return Batch(images, dataset.identities[idx], dataset.modalities[idx], np.asarray(idx))


def pk_sample(dataset: Dataset, p: int = 6, k: int = 4, seed: int = 0,
              epoch: int = 0, step: int = 0) -> Batch:
    return PKSampler(dataset, p, k, seed).batch(epoch, step)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def augment(img: np.ndarray, rng: np.random.Generator | None = None, force: bool | None = None) -> np.ndarray:
    """Random horizontal flip with probability 0.5; ``force`` overrides the draw."""
    flip = force if force is not None else bool(rng.random() < 0.5)
    return hflip(img) if flip else img.copy()
