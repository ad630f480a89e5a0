"""Deterministic synthetic stand-in for a full-scope plant simulator.

Generates per-second plant parameter vectors under a chosen operating
condition with an injected fault signature:

    value(i, t) = baseline(i) * (1 + response(i, t) + noise(i, t))

Baselines scale affinely with the condition's power fraction
(baseline = nominal * (0.2 + 0.8 * power_fraction)). Noise is independent
Gaussian per (tick, index), drawn from a counter-based generator keyed on
(seed, fault, condition, tick, index), so runs are reproducible and distinct
runs can be generated concurrently.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, replace

import numpy as np

from . import imagegray
from .errors import ConfigError, DataError
from .taxonomy import LabelPath, TaxonomyTree

__all__ = [
    "OperatingCondition",
    "Effect",
    "FaultSignature",
    "PlantProfile",
    "Snapshot",
    "ManifestRow",
    "CorpusManifest",
    "default_profile",
    "default_conditions",
    "default_signatures",
    "simulate_run",
    "build_corpus",
    "image_relpath",
]

RESPONSE_KINDS = ("step", "ramp", "exponential", "oscillation")

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64(x: int) -> int:
    """splitmix64 finalizer on python ints (used for scalar key folding)."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix64_np(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays (wrapping mults)."""
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def _fold(state: int, value: int) -> int:
    return _mix64(state + _GAMMA + (value & _MASK64))


def _string_key(text: str) -> int:
    state = 0xCBF29CE484222325  # FNV-1a 64-bit
    for byte in text.encode("utf-8"):
        state = ((state ^ byte) * 0x100000001B3) & _MASK64
    return state


def _to_unit(h: np.ndarray) -> np.ndarray:
    # (0, 1]: 53 high bits, shifted into the unit interval, never exactly 0
    return ((h >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)


def counter_normals(base_key: int, ticks: np.ndarray, count: int) -> np.ndarray:
    """Standard normals of shape (len(ticks), count), a pure function of the key.

    Element (t, i) depends only on (base_key, ticks[t], i); generation order
    and chunking do not affect the values.
    """
    t_col = np.asarray(ticks, dtype=np.uint64).reshape(-1, 1)
    idx_row = np.arange(count, dtype=np.uint64).reshape(1, -1)
    counter = (t_col << np.uint64(32)) | idx_row
    key = _mix64_np(counter ^ np.uint64(base_key))
    u1 = _to_unit(_mix64_np(key + np.uint64(_GAMMA)))
    u2 = _to_unit(_mix64_np(key + np.uint64((2 * _GAMMA) & _MASK64)))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def counter_uniform(base_key: int, count: int) -> np.ndarray:
    """Uniform (0, 1] vector keyed on (base_key, index)."""
    idx = np.arange(count, dtype=np.uint64)
    return _to_unit(_mix64_np(idx ^ np.uint64(base_key)))


@dataclass(frozen=True)
class OperatingCondition:
    name: str
    power_fraction: float

    def __post_init__(self):
        if not 0.0 < self.power_fraction <= 1.0:
            raise ConfigError(
                f"power_fraction must be in (0, 1], got {self.power_fraction}"
            )


@dataclass(frozen=True)
class Effect:
    """One affected parameter index with its response shape."""

    index: int
    kind: str  # step | ramp | exponential | oscillation
    magnitude: float
    time_scale: float = 60.0

    def __post_init__(self):
        if self.kind not in RESPONSE_KINDS:
            raise ConfigError(f"unknown response kind {self.kind!r}")
        if not np.isfinite(self.magnitude):
            raise ConfigError("effect magnitude must be finite")
        if self.time_scale <= 0:
            raise ConfigError("effect time_scale must be positive")


@dataclass(frozen=True)
class FaultSignature:
    fault_idx: int
    effects: tuple[Effect, ...]
    onset_tick: int = 0

    def __post_init__(self):
        if self.onset_tick < 0:
            raise ConfigError("onset_tick must be >= 0")


@dataclass(frozen=True, eq=False)
class PlantProfile:
    """Static plant description: how many parameters, their nominal values at
    100 % power, and the relative noise level."""

    parameter_count: int
    nominal: np.ndarray  # shape (parameter_count,), values at 100 % power
    noise_sigma: float

    def __post_init__(self):
        if self.parameter_count < 1:
            raise ConfigError("parameter_count must be >= 1")
        if self.nominal.shape != (self.parameter_count,):
            raise ConfigError("nominal vector length must equal parameter_count")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def baseline(self, condition: OperatingCondition) -> np.ndarray:
        return self.nominal * (0.2 + 0.8 * condition.power_fraction)


@dataclass(frozen=True, eq=False)
class Snapshot:
    """One instant of the plant: tick in seconds and all parameter values."""

    tick: int
    values: np.ndarray


def default_profile(
    parameter_count: int = 256,
    noise_sigma: float = 0.01,
    nominal_seed: int = 7,
    nominal: np.ndarray | None = None,
) -> PlantProfile:
    """Desk-scale profile; nominal values are drawn once from [20, 100)."""
    if nominal is None:
        u = counter_uniform(_fold(0x6E6F6D, nominal_seed), parameter_count)
        nominal = 20.0 + 80.0 * u
    return PlantProfile(
        parameter_count=parameter_count,
        nominal=np.asarray(nominal, dtype=np.float64),
        noise_sigma=noise_sigma,
    )


def default_conditions() -> list[OperatingCondition]:
    return [
        OperatingCondition("startup-10", 0.10),
        OperatingCondition("steady-50", 0.50),
        OperatingCondition("steady-100", 1.00),
    ]


def default_signatures(
    tree: TaxonomyTree,
    parameter_count: int,
    indices_per_fault: int = 4,
    magnitude: float = 0.5,
    onset_tick: int = 0,
    time_scale: float = 60.0,
) -> list[FaultSignature]:
    """One signature per fault on disjoint index blocks.

    Fault f perturbs indices [f*k, (f+1)*k) with response kinds cycling
    step, ramp, exponential, oscillation; the leading step keeps every fault
    separable from tick 0 on.
    """
    n_faults = len(tree.faults)
    if parameter_count < n_faults * indices_per_fault:
        raise ConfigError(
            f"parameter_count {parameter_count} too small for "
            f"{n_faults} x {indices_per_fault} disjoint fault indices"
        )
    signatures = []
    for f in range(n_faults):
        effects = tuple(
            Effect(
                index=f * indices_per_fault + j,
                kind=RESPONSE_KINDS[j % len(RESPONSE_KINDS)],
                magnitude=magnitude,
                time_scale=time_scale,
            )
            for j in range(indices_per_fault)
        )
        signatures.append(FaultSignature(fault_idx=f, effects=effects, onset_tick=onset_tick))
    return signatures


def _response_matrix(
    signature: FaultSignature, duration_s: int, parameter_count: int
) -> np.ndarray:
    resp = np.zeros((duration_s, parameter_count), dtype=np.float64)
    ticks = np.arange(duration_s, dtype=np.float64)
    active = ticks >= signature.onset_tick
    tau = np.where(active, ticks - signature.onset_tick, 0.0)
    for eff in signature.effects:
        if not 0 <= eff.index < parameter_count:
            raise ConfigError(
                f"signature index {eff.index} out of range for "
                f"{parameter_count} parameters"
            )
        m, ts = eff.magnitude, eff.time_scale
        if eff.kind == "step":
            shape = np.full_like(tau, m)
        elif eff.kind == "ramp":
            shape = m * np.minimum(1.0, tau / ts)
        elif eff.kind == "exponential":
            shape = m * (1.0 - np.exp(-tau / ts))
        else:  # oscillation
            shape = m * np.sin(2.0 * np.pi * tau / ts)
        resp[:, eff.index] += np.where(active, shape, 0.0)
    return resp


def simulate_run(
    profile: PlantProfile,
    signature: FaultSignature,
    condition: OperatingCondition,
    seed: int,
    duration_s: int,
) -> list[Snapshot]:
    """Simulate one (fault, condition) run: exactly duration_s snapshots at
    ticks 0..duration_s-1, fully deterministic given the arguments."""
    if duration_s < 1:
        raise ConfigError("duration_s must be >= 1")
    baseline = profile.baseline(condition)
    resp = _response_matrix(signature, duration_s, profile.parameter_count)
    if profile.noise_sigma > 0:
        key = _fold(_fold(_fold(0x706C616E74, seed), signature.fault_idx),
                    _string_key(condition.name))
        resp = resp + profile.noise_sigma * counter_normals(
            key, np.arange(duration_s), profile.parameter_count
        )
    values = baseline[None, :] * (1.0 + resp)
    if not np.all(np.isfinite(values)):
        raise DataError("simulation produced non-finite values")
    return [Snapshot(tick=t, values=values[t]) for t in range(duration_s)]


@dataclass(frozen=True)
class ManifestRow:
    image_path: str
    loop: str
    system: str
    fault: str
    condition: str
    tick: int
    seed: int


MANIFEST_HEADER = ["image_path", "loop", "system", "fault", "condition", "tick", "seed"]


@dataclass
class CorpusManifest:
    rows: list[ManifestRow]

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in self.rows:
            writer.writerow(
                [r.image_path, r.loop, r.system, r.fault, r.condition, r.tick, r.seed]
            )
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def read_csv(cls, path) -> "CorpusManifest":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_HEADER:
                raise DataError(f"bad manifest header: {header}")
            rows = []
            for line in reader:
                if len(line) != len(MANIFEST_HEADER):
                    raise DataError(f"bad manifest row: {line}")
                rows.append(
                    ManifestRow(
                        image_path=line[0],
                        loop=line[1],
                        system=line[2],
                        fault=line[3],
                        condition=line[4],
                        tick=int(line[5]),
                        seed=int(line[6]),
                    )
                )
        return cls(rows=rows)

    def label_path(self, tree: TaxonomyTree, row: ManifestRow) -> LabelPath:
        return tree.path_from_names(row.loop, row.system, row.fault)


def image_relpath(fault_idx: int, condition: str, tick: int) -> str:
    return f"images/fault{fault_idx:02d}_{condition}_t{tick:04d}.pgm"


def build_corpus(
    profile: PlantProfile,
    tree: TaxonomyTree,
    signatures: list[FaultSignature],
    conditions: list[OperatingCondition],
    seed: int,
    duration_s: int,
    out_dir=None,
    write_images: bool = True,
) -> CorpusManifest:
    """Simulate every (fault, condition) run and emit the corpus manifest.

    Produces |faults| * |conditions| * duration_s rows. With write_images the
    encoded PGM files are written under out_dir; otherwise only the manifest
    (with the paths the images would occupy) is produced.
    """
    by_fault = {s.fault_idx: s for s in signatures}
    for f in range(len(tree.faults)):
        if f not in by_fault:
            raise ConfigError(f"missing signature for fault {f} ({tree.fault_names[f]!r})")
    if write_images and out_dir is None:
        raise ConfigError("out_dir is required when writing images")
    if write_images:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    rows: list[ManifestRow] = []
    for f in range(len(tree.faults)):
        path = tree.path_for_fault(f)
        loop_name = tree.loops[path.loop_idx]
        system_name = tree.system_names[path.system_idx]
        fault_name = tree.fault_names[f]
        for cond in conditions:
            snapshots = None
            if write_images:
                snapshots = simulate_run(profile, by_fault[f], cond, seed, duration_s)
            for t in range(duration_s):
                rel = image_relpath(f, cond.name, t)
                rows.append(
                    ManifestRow(
                        image_path=rel,
                        loop=loop_name,
                        system=system_name,
                        fault=fault_name,
                        condition=cond.name,
                        tick=t,
                        seed=seed,
                    )
                )
                if write_images:
                    img = imagegray.encode(snapshots[t])
                    imagegray.write_pgm(img, os.path.join(out_dir, rel))
    return CorpusManifest(rows=rows)


# --- config document round trip ---------------------------------------------


def profile_to_doc(profile: PlantProfile) -> dict:
    return {
        "parameter_count": profile.parameter_count,
        "noise_sigma": profile.noise_sigma,
        "nominal": [float(v) for v in profile.nominal],
    }


def profile_from_doc(doc: dict) -> PlantProfile:
    try:
        count = int(doc["parameter_count"])
        sigma = float(doc.get("noise_sigma", 0.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed profile document: {exc}") from exc
    if "nominal" in doc and doc["nominal"] is not None:
        nominal = np.asarray(doc["nominal"], dtype=np.float64)
        return PlantProfile(parameter_count=count, nominal=nominal, noise_sigma=sigma)
    return default_profile(count, sigma, nominal_seed=int(doc.get("nominal_seed", 7)))


def conditions_from_doc(docs: list) -> list[OperatingCondition]:
    try:
        return [OperatingCondition(str(d["name"]), float(d["power_fraction"])) for d in docs]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed conditions document: {exc}") from exc


def conditions_to_doc(conditions: list[OperatingCondition]) -> list:
    return [{"name": c.name, "power_fraction": c.power_fraction} for c in conditions]


def signatures_from_doc(doc, tree: TaxonomyTree, profile: PlantProfile) -> list[FaultSignature]:
    """Signatures config: either {"auto": {...default_signatures kwargs}} or
    {"per_fault": [{fault, onset_tick, effects: [{index, kind, magnitude,
    time_scale}]}]}."""
    if "auto" in doc:
        kwargs = dict(doc["auto"])
        return default_signatures(tree, profile.parameter_count, **kwargs)
    try:
        signatures = []
        for item in doc["per_fault"]:
            effects = tuple(
                Effect(
                    index=int(e["index"]),
                    kind=str(e["kind"]),
                    magnitude=float(e["magnitude"]),
                    time_scale=float(e.get("time_scale", 60.0)),
                )
                for e in item["effects"]
            )
            signatures.append(
                FaultSignature(
                    fault_idx=int(item["fault"]),
                    effects=effects,
                    onset_tick=int(item.get("onset_tick", 0)),
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed signatures document: {exc}") from exc
    return signatures


def signatures_to_doc(signatures: list[FaultSignature]) -> dict:
    return {
        "per_fault": [
            {
                "fault": s.fault_idx,
                "onset_tick": s.onset_tick,
                "effects": [
                    {
                        "index": e.index,
                        "kind": e.kind,
                        "magnitude": e.magnitude,
                        "time_scale": e.time_scale,
                    }
                    for e in s.effects
                ],
            }
            for s in signatures
        ]
    }


def with_onset(signatures: list[FaultSignature], onset_tick: int) -> list[FaultSignature]:
    """Delayed-onset variant of a signature set (default onset is tick 0)."""
    return [replace(s, onset_tick=onset_tick) for s in signatures]
