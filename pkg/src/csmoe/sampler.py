"""Descriptor-driven spatial sampling of a geolocated image archive.

Stage one associates each archive entry's bounding-box center with a
climate class and a thematic land-cover class via point lookups into two
north-up class rasters; entries covered by both rasters survive. Stage two
partitions the survivors into joint (climate, thematic) strata and, inside
every stratum larger than the target count, runs a genetic algorithm over
binary selection masks whose fitness rewards spatially dispersed picks:
the entropy of the pairwise great-circle distance distribution plus the
log of the mean pairwise distance. Tournament(2) selection, uniform
crossover, bit-flip mutation, elitism of one, and random prune/augment
repair to the 90-110% size band are the operators.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ParameterError

EARTH_RADIUS_KM = 6371.0  # mean sphere radius; half circumference 20015.09 km

#: operators recorded in every report, for reproducibility
GA_OPERATORS = "tournament(2) + uniform crossover + bit-flip mutation + elitism(1)"


# ---------------------------------------------------------------------------
# Rasters and archive entries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassRaster:
    """North-up grid of u16 class codes; row 0 touches lat_max."""

    lat_max: float
    lon_min: float
    dlat: float
    dlon: float
    grid: np.ndarray  # [rows, cols] uint16
    nodata: int

    def __post_init__(self):
        if self.dlat <= 0 or self.dlon <= 0:
            raise ParameterError(f"raster cell sizes must be positive, got ({self.dlat}, {self.dlon})")


def lookup(raster: ClassRaster, lon: float, lat: float):
    """Class code at a point, or None when outside the extent or nodata."""
    row = math.floor((raster.lat_max - lat) / raster.dlat)
    col = math.floor((lon - raster.lon_min) / raster.dlon)
    rows, cols = raster.grid.shape
    if not (0 <= row < rows and 0 <= col < cols):
        return None
    code = int(raster.grid[row, col])
    return None if code == raster.nodata else code


@dataclass(frozen=True)
class ArchiveEntry:
    id: str
    lon_min: float
    lat_min: float
    lon_max: float
    lat_max: float

    @property
    def center(self):
        return (0.5 * (self.lon_min + self.lon_max), 0.5 * (self.lat_min + self.lat_max))


@dataclass(frozen=True)
class DescribedEntry:
    entry: ArchiveEntry
    climate: int
    thematic: int


def generate_descriptors(archive, climate: ClassRaster, thematic: ClassRaster):
    """Evaluate both rasters at each entry's bbox center; keep entries
    covered by both, preserving archive order."""
    described = []
    for entry in archive:
        lon, lat = entry.center
        u = lookup(climate, lon, lat)
        v = lookup(thematic, lon, lat)
        if u is not None and v is not None:
            described.append(DescribedEntry(entry=entry, climate=u, thematic=v))
    return described


def stratify(described):
    """Partition by joint (climate, thematic) descriptor, keys sorted."""
    strata = {}
    for d in described:
        strata.setdefault((d.climate, d.thematic), []).append(d)
    return dict(sorted(strata.items()))


# ---------------------------------------------------------------------------
# Great-circle distances
# ---------------------------------------------------------------------------


def haversine(p, q) -> float:
    """Great-circle distance in km between two (lon, lat) points."""
    lon1, lat1 = np.radians(p[0]), np.radians(p[1])
    lon2, lat2 = np.radians(q[0]), np.radians(q[1])
    s = (
        np.sin(0.5 * (lat2 - lat1)) ** 2
        + np.cos(lat1) * np.cos(lat2) * np.sin(0.5 * (lon2 - lon1)) ** 2
    )
    return float(2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(s, 0.0, 1.0))))


def pairwise_haversine(lons: np.ndarray, lats: np.ndarray) -> np.ndarray:
    """Symmetric [n, n] matrix of great-circle distances in km."""
    lam = np.radians(np.asarray(lons, dtype=np.float64))
    phi = np.radians(np.asarray(lats, dtype=np.float64))
    s = (
        np.sin(0.5 * (phi[:, None] - phi[None, :])) ** 2
        + np.cos(phi)[:, None] * np.cos(phi)[None, :] * np.sin(0.5 * (lam[:, None] - lam[None, :])) ** 2
    )
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(s, 0.0, 1.0)))
    np.fill_diagonal(d, 0.0)
    return d


# ---------------------------------------------------------------------------
# Genetic algorithm
# ---------------------------------------------------------------------------


@dataclass
class GaConfig:
    target_size: int = 100  # samples to keep per stratum
    generations: int = 2500
    population_size: int = 10
    crossover_rate: float = 0.5  # per-gene swap probability
    stagnation_limit: int = 250  # 0 disables early stopping
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.crossover_rate <= 1.0:
            raise ParameterError(f"crossover rate {self.crossover_rate} outside (0, 1]")
        if self.population_size < 2:
            raise ParameterError(f"population size must be >= 2, got {self.population_size}")
        if self.target_size < 1 or self.generations < 1:
            raise ParameterError("target size and generations must be >= 1")


def mutation_rate(target_size: int, stratum_size: int) -> float:
    """Per-bit flip probability: target / (stratum size * 25)."""
    return target_size / (stratum_size * 25.0)


@dataclass
class Chromosome:
    bits: np.ndarray  # bool mask over the stratum's entries
    fitness: float = float("-inf")

    @property
    def size(self) -> int:
        return int(self.bits.sum())


def selection_fitness(distances: np.ndarray, selected: np.ndarray) -> float:
    """Entropy of the normalized pairwise-distance distribution plus the log
    of the mean pairwise distance; -inf for degenerate selections."""
    idx = np.flatnonzero(selected) if selected.dtype == bool else np.asarray(selected)
    if idx.size < 2:
        return float("-inf")
    sub = distances[np.ix_(idx, idx)]
    iu = np.triu_indices(idx.size, k=1)
    d = sub[iu]
    total = d.sum()
    if total <= 0.0:
        return float("-inf")
    p = d / total
    nz = p > 0
    entropy = float(-(p[nz] * np.log(p[nz])).sum())
    return entropy + float(np.log(d.mean()))


def repair(bits: np.ndarray, target_size: int, rng: np.random.Generator):
    """Randomly prune above 110% of the target (down to its floor) or augment
    below 90% (up to its ceil); inside the band the mask is untouched."""
    upper = math.floor(1.1 * target_size)
    lower = math.ceil(0.9 * target_size)
    size = int(bits.sum())
    if size > upper:
        on = np.flatnonzero(bits)
        drop = rng.choice(on, size=size - upper, replace=False)
        bits[drop] = False
    elif size < lower:
        off = np.flatnonzero(~bits)
        need = min(lower - size, off.size)
        if need > 0:
            add = rng.choice(off, size=need, replace=False)
            bits[add] = True
    return bits


def _tournament(population, rng: np.random.Generator) -> Chromosome:
    i, j = rng.integers(0, len(population), size=2)
    return population[i] if population[i].fitness >= population[j].fitness else population[j]


def _uniform_crossover(a: np.ndarray, b: np.ndarray, rate: float, rng: np.random.Generator):
    swap = rng.random(a.size) < rate
    c1, c2 = a.copy(), b.copy()
    c1[swap], c2[swap] = b[swap], a[swap]
    return c1, c2


def _mutate(bits: np.ndarray, rate: float, rng: np.random.Generator):
    flips = rng.random(bits.size) < rate
    bits[flips] = ~bits[flips]
    return bits


def evolve_stratum(stratum, cfg: GaConfig, rng: np.random.Generator = None,
                   distances: np.ndarray = None):
    """Select a spatially dispersed subset of one stratum.

    Strata no larger than the target are fully retained. Returns
    (selected entries, best fitness, best-fitness-per-generation trace).
    """
    n = len(stratum)
    if n <= cfg.target_size:
        return list(stratum), float("nan"), []
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if distances is None:
        lons = np.array([d.entry.center[0] for d in stratum])
        lats = np.array([d.entry.center[1] for d in stratum])
        distances = pairwise_haversine(lons, lats)
    rate = mutation_rate(cfg.target_size, n)

    def fresh() -> Chromosome:
        bits = np.zeros(n, dtype=bool)
        bits[rng.choice(n, size=cfg.target_size, replace=False)] = True
        return Chromosome(bits, selection_fitness(distances, bits))

    population = [fresh() for _ in range(cfg.population_size)]
    best = max(population, key=lambda c: c.fitness)
    best = Chromosome(best.bits.copy(), best.fitness)
    trace = []
    stagnant = 0
    for _ in range(cfg.generations):
        elite = max(population, key=lambda c: c.fitness)
        offspring = [Chromosome(elite.bits.copy(), elite.fitness)]
        while len(offspring) < cfg.population_size:
            p1 = _tournament(population, rng)
            p2 = _tournament(population, rng)
            for child_bits in _uniform_crossover(p1.bits, p2.bits, cfg.crossover_rate, rng):
                if len(offspring) == cfg.population_size:
                    break
                child_bits = _mutate(child_bits, rate, rng)
                child_bits = repair(child_bits, cfg.target_size, rng)
                offspring.append(Chromosome(child_bits, selection_fitness(distances, child_bits)))
        population = offspring
        gen_best = max(population, key=lambda c: c.fitness)
        if gen_best.fitness > best.fitness:
            best = Chromosome(gen_best.bits.copy(), gen_best.fitness)
            stagnant = 0
        else:
            stagnant += 1
        trace.append(best.fitness)
        if cfg.stagnation_limit and stagnant >= cfg.stagnation_limit:
            break
    selected = [stratum[i] for i in np.flatnonzero(best.bits)]
    return selected, best.fitness, trace


# ---------------------------------------------------------------------------
# Whole-archive sampling
# ---------------------------------------------------------------------------


@dataclass
class SamplingReport:
    operators: str
    target_size: int
    generations: int
    population_size: int
    crossover_rate: float
    seed: int
    strata: list = field(default_factory=list)  # one dict per stratum
    total_selected: int = 0
    total_described: int = 0

    def to_dict(self) -> dict:
        return {
            "operators": self.operators,
            "target_size": self.target_size,
            "generations": self.generations,
            "population_size": self.population_size,
            "crossover_rate": self.crossover_rate,
            "seed": self.seed,
            "total_described": self.total_described,
            "total_selected": self.total_selected,
            "strata": self.strata,
        }


def _mean_pairwise(entries) -> float:
    if len(entries) < 2:
        return 0.0
    lons = np.array([d.entry.center[0] for d in entries])
    lats = np.array([d.entry.center[1] for d in entries])
    d = pairwise_haversine(lons, lats)
    iu = np.triu_indices(len(entries), k=1)
    return float(d[iu].mean())


def _stratum_rng(seed: int, key, salt: int = 0) -> np.random.Generator:
    u, v = key
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(u, v, salt)))


def _evolve_one(key, entries, cfg: GaConfig, baseline: bool):
    selected, fitness, _ = evolve_stratum(entries, cfg, rng=_stratum_rng(cfg.seed, key))
    info = {
        "climate": key[0],
        "thematic": key[1],
        "stratum_size": len(entries),
        "selected": len(selected),
        "fitness": fitness,
        "mean_pairwise_km": _mean_pairwise(selected),
        "mutation_rate": (
            mutation_rate(cfg.target_size, len(entries)) if len(entries) > cfg.target_size else 0.0
        ),
    }
    if baseline:
        rng = _stratum_rng(cfg.seed, key, salt=1)
        if len(entries) > len(selected):
            pick = rng.choice(len(entries), size=len(selected), replace=False)
            random_subset = [entries[i] for i in np.sort(pick)]
        else:
            random_subset = list(entries)
        info["baseline_mean_pairwise_km"] = _mean_pairwise(random_subset)
    return key, selected, info


def sample_archive(archive, climate: ClassRaster, thematic: ClassRaster, cfg: GaConfig,
                   baseline: bool = False, threads: int = 1):
    """Descriptor generation, stratification, per-stratum evolution, union.

    Returns (selection, SamplingReport) where the selection is a list of
    (DescribedEntry, stratum fitness) in stratum order. Per-stratum RNG
    streams derive from (seed, climate, thematic), so results do not depend
    on execution order or thread count.
    """
    described = generate_descriptors(archive, climate, thematic)
    strata = stratify(described)
    report = SamplingReport(
        operators=GA_OPERATORS,
        target_size=cfg.target_size,
        generations=cfg.generations,
        population_size=cfg.population_size,
        crossover_rate=cfg.crossover_rate,
        seed=cfg.seed,
        total_described=len(described),
    )
    items = list(strata.items())
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda kv: _evolve_one(kv[0], kv[1], cfg, baseline), items))
    else:
        results = [_evolve_one(key, entries, cfg, baseline) for key, entries in items]
    selection = []
    for key, selected, info in results:
        report.strata.append(info)
        for d in selected:
            selection.append((d, info["fitness"]))
    report.total_selected = len(selection)
    return selection, report


# ---------------------------------------------------------------------------
# File formats: archive CSV and GRID1 rasters
# ---------------------------------------------------------------------------

ARCHIVE_HEADER = ["id", "lon_min", "lat_min", "lon_max", "lat_max"]


def load_archive(path):
    """CSV with header id,lon_min,lat_min,lon_max,lat_max."""
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ARCHIVE_HEADER:
            raise DataError(f"{path}: expected header {','.join(ARCHIVE_HEADER)}")
        for i, row in enumerate(reader):
            try:
                entries.append(ArchiveEntry(
                    id=row["id"],
                    lon_min=float(row["lon_min"]), lat_min=float(row["lat_min"]),
                    lon_max=float(row["lon_max"]), lat_max=float(row["lat_max"]),
                ))
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: bad row {i + 2}: {exc}") from exc
    return entries


def write_selection(path, selection):
    """CSV id,u,v,stratum_fitness for the selected entries."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "u", "v", "stratum_fitness"])
        for d, fitness in selection:
            writer.writerow([d.entry.id, d.climate, d.thematic, repr(float(fitness))])


_GRID_KEYS = {"lat_max", "lon_min", "dlat", "dlon", "rows", "cols", "nodata"}


def load_grid(path) -> ClassRaster:
    """GRID1: one JSON header line, then rows*cols little-endian u16 codes."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable GRID1 header: {exc}") from exc
        missing = _GRID_KEYS - set(header)
        if missing:
            raise FormatError(f"{path}: GRID1 header missing keys {sorted(missing)}")
        rows, cols = int(header["rows"]), int(header["cols"])
        payload = fh.read(2 * rows * cols)
        if len(payload) < 2 * rows * cols:
            raise FormatError(f"{path}: truncated GRID1 payload")
        grid = np.frombuffer(payload, dtype="<u2").reshape(rows, cols).copy()
    return ClassRaster(
        lat_max=float(header["lat_max"]), lon_min=float(header["lon_min"]),
        dlat=float(header["dlat"]), dlon=float(header["dlon"]),
        grid=grid, nodata=int(header["nodata"]),
    )


def save_grid(path, raster: ClassRaster):
    rows, cols = raster.grid.shape
    header = {
        "lat_max": raster.lat_max, "lon_min": raster.lon_min,
        "dlat": raster.dlat, "dlon": raster.dlon,
        "rows": rows, "cols": cols, "nodata": raster.nodata,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(raster.grid, dtype="<u2").tobytes())
