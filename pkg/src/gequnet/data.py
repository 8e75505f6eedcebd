"""Radio-map datasets: manifest loading, input encoding, splits, toy generator.

Manifest grammar (UTF-8, one statement per line, ``#`` starts a comment)::

    setting = DPM_noCars            # DPM_noCars | IRT_noCars | DPM_cars
    size = 256
    buildings = png/buildings/{map}.png
    target = gain/{map}_{tx}.png
    cars = png/cars/{map}.png       # optional
    map <id> : <x>,<y> <x>,<y> ...  # transmitters in pixel coords (x = column)
    split <train|val|test> : <id> <id> ...

``{map}`` and ``{tx}`` (0-based index into the map's transmitter list) are
substituted into the path templates, which are relative to the manifest's
directory. Building images are thresholded at gray 128; target gray ``v``
maps to ``v / 255``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .groups import GroupElement, GroupSpec, act_on_image

SETTINGS = ("DPM_noCars", "IRT_noCars", "DPM_cars")
DEFAULT_SPLIT = (500, 100, 100)
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# images

try:
    from PIL import Image
except ImportError:  # pragma: no cover - exercised only without Pillow
    Image = None


def write_gray(path: str | Path, arr: np.ndarray) -> None:
    """Write an 8-bit grayscale image; PNG via Pillow, else binary PGM."""
    path = Path(path)
    arr = np.asarray(arr, dtype=np.uint8)
    if Image is not None and path.suffix.lower() == ".png":
        # fixed compression level keeps reruns byte-identical
        Image.fromarray(arr, mode="L").save(path, format="PNG", compress_level=6)
        return
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def _read_pgm(data: bytes) -> np.ndarray:
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m or int(m.group(3)) != 255:
        raise DatasetError("not an 8-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    body = data[m.end() : m.end() + w * h]
    if len(body) != w * h:
        raise DatasetError("truncated PGM")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def read_gray(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as e:
        raise DatasetError(f"missing file: {path}") from e
    try:
        if data.startswith(b"P5"):
            return _read_pgm(data)
        if Image is None:
            raise DatasetError("Pillow unavailable and file is not PGM")
        import io

        with Image.open(io.BytesIO(data)) as im:
            if im.mode not in ("L", "P", "1", "I;16", "RGB", "RGBA", "LA"):
                raise DatasetError(f"unsupported image mode {im.mode}")
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    except DatasetError as e:
        raise DatasetError(f"corrupt image {path}: {e}") from e
    except Exception as e:  # Pillow raises a zoo of types on bad data
        raise DatasetError(f"corrupt image {path}: {e}") from e


# ---------------------------------------------------------------------------
# samples and normalization


@dataclass
class Sample:
    building_grid: np.ndarray  # (H, W) uint8 in {0, 1}
    tx: tuple[int, int]  # (row, col)
    target: np.ndarray  # (H, W) float32 in [0, 1]
    car_grid: np.ndarray | None = None
    map_id: str = ""

    def __post_init__(self):
        H, W = self.building_grid.shape
        if self.target.shape != (H, W):
            raise DatasetError(f"target {self.target.shape} vs layout {(H, W)}")
        if self.car_grid is not None and self.car_grid.shape != (H, W):
            raise DatasetError("car grid size mismatch")
        r, c = self.tx
        if not (0 <= r < H and 0 <= c < W):
            raise DatasetError(f"transmitter {self.tx} outside {H}x{W} grid")

    def transformed(self, spec: GroupSpec, g: GroupElement) -> "Sample":
        """Apply an exact grid symmetry to every map and move the transmitter with it."""
        H = self.building_grid.shape[0]
        onehot = np.zeros((H, H), dtype=np.uint8)
        onehot[self.tx] = 1
        r, c = np.argwhere(act_on_image(spec, g, onehot))[0]
        return Sample(
            act_on_image(spec, g, self.building_grid),
            (int(r), int(c)),
            act_on_image(spec, g, self.target),
            None if self.car_grid is None else act_on_image(spec, g, self.car_grid),
            self.map_id,
        )


@dataclass(frozen=True)
class Normalizer:
    dynamic_range_db: float = 80.0
    min_pathloss_db: float = 0.0

    def normalize(self, pathloss_db):
        return 1.0 - (np.asarray(pathloss_db, dtype=np.float64) - self.min_pathloss_db) / self.dynamic_range_db

    def denormalize(self, value):
        return self.min_pathloss_db + (1.0 - np.asarray(value, dtype=np.float64)) * self.dynamic_range_db


def encode_input(sample: Sample, with_cars: bool) -> np.ndarray:
    """Stack ``[buildings, one-hot transmitter, (cars)]`` as a float32 ``(C, H, W)`` array."""
    if with_cars and sample.car_grid is None:
        raise DatasetError(f"map {sample.map_id!r} has no car grid but with_cars is set")
    H, W = sample.building_grid.shape
    chans = [sample.building_grid.astype(np.float32), np.zeros((H, W), dtype=np.float32)]
    chans[1][sample.tx] = 1.0
    if with_cars:
        chans.append(sample.car_grid.astype(np.float32))
    return np.stack(chans)


def batch_arrays(samples: list[Sample], with_cars: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.stack([encode_input(s, with_cars) for s in samples])
    y = np.stack([s.target for s in samples])[:, None].astype(np.float32)
    b = np.stack([s.building_grid for s in samples])[:, None].astype(bool)
    return x, y, b


# ---------------------------------------------------------------------------
# manifest


@dataclass
class DatasetManifest:
    root: Path
    setting: str = "DPM_noCars"
    size: int = 256
    buildings: str = "buildings/{map}.png"
    target: str = "gain/{map}_{tx}.png"
    cars: str | None = None
    transmitters: dict[str, list[tuple[int, int]]] = field(default_factory=dict)  # (x, y)
    splits: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise DatasetError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        seen: dict[str, str] = {}
        for name, ids in self.splits.items():
            for m in ids:
                if m in seen:
                    raise DatasetError(f"map {m!r} appears in splits {seen[m]!r} and {name!r}")
                seen[m] = name

    @property
    def map_ids(self) -> list[str]:
        return list(self.transmitters)

    @classmethod
    def parse(cls, text: str, root: str | Path) -> "DatasetManifest":
        kv: dict[str, str] = {}
        txs: dict[str, list[tuple[int, int]]] = {}
        splits: dict[str, list[str]] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith(("map ", "split ")):
                head, _, rest = line.partition(":")
                word, _, name = head.strip().partition(" ")
                name = name.strip()
                if not name or not _:
                    raise DatasetError(f"manifest line {lineno}: malformed {word!r} statement")
                if word == "map":
                    pts = []
                    for tok in rest.split():
                        x, y = tok.split(",")
                        pts.append((int(x), int(y)))
                    txs[name] = pts
                else:
                    splits[name] = rest.split()
            elif "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                kv[k] = v
            else:
                raise DatasetError(f"manifest line {lineno}: cannot parse {raw!r}")
        for name, ids in splits.items():
            missing = [m for m in ids if m not in txs]
            if missing:
                raise DatasetError(f"split {name!r} references unknown maps {missing[:3]}")
        return cls(
            root=Path(root),
            setting=kv.get("setting", "DPM_noCars"),
            size=int(kv.get("size", 256)),
            buildings=kv.get("buildings", "buildings/{map}.png"),
            target=kv.get("target", "gain/{map}_{tx}.png"),
            cars=kv.get("cars"),
            transmitters=txs,
            splits=splits,
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError as e:
            raise DatasetError(f"missing manifest: {path}") from e
        return cls.parse(text, path.parent)

    def dumps(self) -> str:
        lines = [
            "# gequnet dataset manifest",
            f"setting = {self.setting}",
            f"size = {self.size}",
            f"buildings = {self.buildings}",
            f"target = {self.target}",
        ]
        if self.cars:
            lines.append(f"cars = {self.cars}")
        for m, pts in self.transmitters.items():
            lines.append(f"map {m} : " + " ".join(f"{x},{y}" for x, y in pts))
        for name in SPLITS:
            if name in self.splits:
                lines.append(f"split {name} : " + " ".join(self.splits[name]))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def subset(self, map_ids: list[str]) -> "DatasetManifest":
        return replace(
            self,
            transmitters={m: self.transmitters[m] for m in map_ids},
            splits={"all": list(map_ids)},
        )


def _read_grid(path: Path, size: int, binary: bool) -> np.ndarray:
    img = read_gray(path)
    if img.shape != (size, size):
        raise DatasetError(f"size mismatch in {path}: {img.shape}, expected {(size, size)}")
    return (img >= 128).astype(np.uint8) if binary else img


def load_dataset(manifest: DatasetManifest, split: str | None = None) -> list[Sample]:
    """Read all samples of ``split`` (every map when ``None``) in manifest order."""
    if split is None:
        ids = manifest.map_ids
    else:
        if split not in manifest.splits:
            raise DatasetError(f"manifest has no split {split!r}")
        ids = manifest.splits[split]
    if manifest.setting == "DPM_cars" and not manifest.cars:
        raise DatasetError("DPM_cars setting requires a 'cars' template")
    out = []
    for m in ids:
        bpath = manifest.root / manifest.buildings.format(map=m)
        bgrid = _read_grid(bpath, manifest.size, True)
        cgrid = None
        if manifest.cars:
            cgrid = _read_grid(manifest.root / manifest.cars.format(map=m), manifest.size, True)
        for t, (x, y) in enumerate(manifest.transmitters[m]):
            tpath = manifest.root / manifest.target.format(map=m, tx=t)
            gray = _read_grid(tpath, manifest.size, False)
            target = (gray.astype(np.float32) / 255.0).astype(np.float32)
            out.append(Sample(bgrid, (y, x), target, cgrid, m))
    return out


def split_by_map(
    manifest: DatasetManifest, counts: tuple[int, int, int] = DEFAULT_SPLIT, seed: int | None = None
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Partition maps into train/val/test; all transmitters of a map stay together.

    Maps are taken in manifest order, or shuffled with ``seed`` when given.
    """
    ids = manifest.map_ids
    if sum(counts) > len(ids):
        raise DatasetError(f"need {sum(counts)} maps for split {counts}, manifest has {len(ids)}")
    if seed is not None:
        ids = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    a, b, c = counts
    parts = (ids[:a], ids[a : a + b], ids[a + b : a + b + c])
    return tuple(manifest.subset(p) for p in parts)  # type: ignore[return-value]


def with_splits(manifest: DatasetManifest, counts: tuple[int, int, int]) -> DatasetManifest:
    tr, va, te = split_by_map(manifest, counts)
    return replace(manifest, splits={"train": tr.map_ids, "val": va.map_ids, "test": te.map_ids})


def scaled_split_counts(n_maps: int) -> tuple[int, int, int]:
    """500/100/100 proportions applied to ``n_maps``."""
    val = max(1, round(n_maps / 7))
    return n_maps - 2 * val, val, val


# ---------------------------------------------------------------------------
# synthetic toy dataset


@dataclass(frozen=True)
class ToyPropagation:
    """Log-distance pathloss plus a fixed loss per wall crossed."""

    pl0_db: float = 20.0
    exponent: float = 2.5
    wall_loss_db: float = 10.0
    dynamic_range_db: float = 80.0


def count_walls(buildings: np.ndarray, tx: tuple[int, int]) -> np.ndarray:
    """Occupancy changes met when marching from ``tx`` to every pixel.

    Each ray is sampled at ``max(|dr|, |dc|) + 1`` evenly spaced points rounded
    to the grid (a DDA line); every building/free transition counts as one wall.
    """
    H, W = buildings.shape
    rr, cc = np.mgrid[0:H, 0:W]
    dr, dc = rr - tx[0], cc - tx[1]
    steps = np.maximum(np.abs(dr), np.abs(dc))
    safe = np.maximum(steps, 1)
    walls = np.zeros((H, W), dtype=np.int32)
    prev = np.full((H, W), buildings[tx], dtype=buildings.dtype)
    for s in range(1, int(steps.max()) + 1):
        active = steps >= s
        r = np.rint(tx[0] + dr * (s / safe)).astype(np.intp)
        c = np.rint(tx[1] + dc * (s / safe)).astype(np.intp)
        cur = buildings[np.clip(r, 0, H - 1), np.clip(c, 0, W - 1)]
        walls += (active & (cur != prev)).astype(np.int32)
        prev = np.where(active, cur, prev)
    return walls


def toy_target(buildings: np.ndarray, tx: tuple[int, int], model: ToyPropagation = ToyPropagation()) -> np.ndarray:
    H, W = buildings.shape
    rr, cc = np.mgrid[0:H, 0:W]
    d = np.hypot(rr - tx[0], cc - tx[1])
    pl = model.pl0_db + 10.0 * model.exponent * np.log10(np.maximum(d, 1.0))
    pl = pl + model.wall_loss_db * count_walls(buildings, tx)
    t = np.clip(1.0 - pl / model.dynamic_range_db, 0.0, 1.0)
    t[buildings.astype(bool)] = 0.0
    return t


def random_layout(rng: np.random.Generator, size: int, n_buildings: tuple[int, int] = (3, 8)) -> np.ndarray:
    grid = np.zeros((size, size), dtype=np.uint8)
    for _ in range(int(rng.integers(n_buildings[0], n_buildings[1] + 1))):
        h, w = rng.integers(size // 16 + 1, size // 4 + 1, size=2)
        r, c = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        grid[r : r + h, c : c + w] = 1
    return grid


def synth_toy_dataset(
    n_maps: int,
    size: int,
    txs_per_map: int,
    seed: int,
    model: ToyPropagation = ToyPropagation(),
) -> list[tuple[np.ndarray, list[tuple[int, int]], list[np.ndarray]]]:
    """Return ``[(buildings, [tx (row, col)], [target])]`` per map, deterministic in ``seed``."""
    if size < 32:
        raise ValueError(f"toy maps must be at least 32 pixels wide, got {size}")
    if n_maps < 1 or txs_per_map < 1:
        raise ValueError("need at least one map and one transmitter per map")
    rng = np.random.default_rng(seed)
    maps = []
    for _ in range(n_maps):
        grid = random_layout(rng, size)
        free = np.argwhere(grid == 0)
        picks = rng.choice(len(free), size=txs_per_map, replace=False)
        txs = [tuple(int(v) for v in free[i]) for i in picks]
        maps.append((grid, txs, [toy_target(grid, tx, model) for tx in txs]))
    return maps


def write_toy_dataset(
    out: str | Path,
    n_maps: int,
    size: int,
    txs_per_map: int,
    seed: int,
    counts: tuple[int, int, int] | None = None,
    ext: str = "png",
) -> DatasetManifest:
    """Generate a toy set and store it in the manifest layout read by :func:`load_dataset`."""
    out = Path(out)
    (out / "buildings").mkdir(parents=True, exist_ok=True)
    (out / "gain").mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(n_maps - 1)))
    txs = {}
    for i, (grid, tx_list, targets) in enumerate(synth_toy_dataset(n_maps, size, txs_per_map, seed)):
        mid = f"{i:0{width}d}"
        write_gray(out / "buildings" / f"{mid}.{ext}", grid * 255)
        for t, target in enumerate(targets):
            write_gray(out / "gain" / f"{mid}_{t}.{ext}", np.rint(target * 255))
        txs[mid] = [(c, r) for r, c in tx_list]
    manifest = DatasetManifest(
        root=out,
        setting="DPM_noCars",
        size=size,
        buildings=f"buildings/{{map}}.{ext}",
        target=f"gain/{{map}}_{{tx}}.{ext}",
        transmitters=txs,
    )
    manifest = with_splits(manifest, counts or scaled_split_counts(n_maps))
    manifest.save(out / "manifest.txt")
    return manifest
