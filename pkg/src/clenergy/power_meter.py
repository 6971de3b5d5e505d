"""Power sampling and energy integration.

Sources report instantaneous power per hardware component. A
:class:`MeterSession` polls every source once per tick and the collected
samples are integrated with a left Riemann sum into an :class:`EnergyLedger`.

Two clocks drive a session:

* ``"wall"``: a background thread polls on the monotonic clock. Used with
  live hardware sources.
* ``"work"``: time only moves when the workload calls
  :meth:`MeterSession.advance`. Ticks land exactly on the nominal grid, so
  replayed or synthetic sources give bit-identical ledgers.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import threading
import time
from abc import ABC, abstractmethod
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import (
    InvalidArgumentError,
    InvalidSampleError,
    PlatformUnavailableError,
    SourceError,
    SourceExhausted,
)

logger = logging.getLogger(__name__)

MEMORY_WATTS_PER_GB = 0.375
DEFAULT_INTERVAL_S = 15.0
MIN_INTERVAL_S = 0.1
JOULES_PER_KWH = 3.6e6
# a tick whose real spacing is off by more than this fraction is weighted by the real spacing
LATE_TOLERANCE = 0.10

RAPL_ROOT_ENV = "CLENERGY_RAPL_ROOT"
DEFAULT_RAPL_ROOT = "/sys/class/powercap"


class Component(str, Enum):
    CPU = "cpu"
    GPU = "gpu"
    RAM = "ram"


COMPONENTS = tuple(Component)


@dataclass(frozen=True)
class PowerSample:
    timestamp_s: float
    component: Component
    watts: float


def memory_watts(resident_gb: float) -> float:
    """Power drawn by ``resident_gb`` of memory at 0.375 W/GB."""
    if resident_gb < 0 or math.isnan(resident_gb):
        raise InvalidArgumentError(f"resident memory must be >= 0 GB, got {resident_gb}")
    return MEMORY_WATTS_PER_GB * resident_gb


def _check_interval(interval_s: float) -> None:
    if not interval_s > 0 or math.isinf(interval_s):
        raise InvalidArgumentError(f"interval must be positive and finite, got {interval_s}")


def _weighted_joules(
    samples: Sequence[PowerSample], durations: Sequence[float]
) -> dict[Component, float]:
    parts: dict[Component, list[float]] = {c: [] for c in COMPONENTS}
    for s, dt in zip(samples, durations):
        if not s.watts >= 0:
            raise InvalidSampleError(f"negative or NaN power {s.watts} W at t={s.timestamp_s}")
        parts[s.component].append(s.watts * dt)
    return {c: math.fsum(v) for c, v in parts.items()}


def integrate(samples: Sequence[PowerSample], interval_s: float) -> dict[Component, float]:
    """Left Riemann sum of power samples, in joules per component.

    Every sample is held for ``interval_s`` seconds. Components without
    samples integrate to zero.
    """
    _check_interval(interval_s)
    return _weighted_joules(samples, [interval_s] * len(samples))


def _check_wall_interval(interval_s: float) -> None:
    if interval_s < MIN_INTERVAL_S:
        raise InvalidArgumentError(f"wall-clock sampling interval must be >= {MIN_INTERVAL_S} s")


@dataclass(frozen=True)
class EnergyLedger:
    run_id: str
    interval_s: float
    joules_by_component: dict[Component, float]
    sample_count_by_component: dict[Component, int]
    wall_time_s: float
    degraded: tuple[str, ...] = ()

    def total(self) -> float:
        return math.fsum(self.joules_by_component.values())

    def kwh(self, component: Component | None = None) -> float:
        if component is None:
            return self.total() / JOULES_PER_KWH
        return self.joules_by_component[component] / JOULES_PER_KWH

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "interval_s": self.interval_s,
            "wall_time_s": self.wall_time_s,
            "joules": {c.value: self.joules_by_component.get(c, 0.0) for c in COMPONENTS},
            "samples": {c.value: self.sample_count_by_component.get(c, 0) for c in COMPONENTS},
            "degraded": list(self.degraded),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> EnergyLedger:
        return cls(
            run_id=d["run_id"],
            interval_s=float(d["interval_s"]),
            joules_by_component={Component(k): float(v) for k, v in d["joules"].items()},
            sample_count_by_component={Component(k): int(v) for k, v in d["samples"].items()},
            wall_time_s=float(d["wall_time_s"]),
            degraded=tuple(d.get("degraded", ())),
        )


# --------------------------------------------------------------------------- sources


class PowerSource(ABC):
    """Something that can be polled for instantaneous power.

    ``poll`` returns zero or more ``(component, watts)`` readings. Sources
    keep their own state and share nothing with each other.
    """

    name: str = "source"
    live: bool = False

    def start(self, now_s: float) -> None:
        """Called once when the session starts, before the first poll."""

    @abstractmethod
    def poll(self, now_s: float) -> list[tuple[Component, float]]: ...


class Synthetic(PowerSource):
    def __init__(self, component: Component | str, watts: float | Callable[[float], float]) -> None:
        self.component = Component(component)
        self.watts = watts
        self.name = f"synthetic:{self.component.value}"

    def poll(self, now_s: float) -> list[tuple[Component, float]]:
        w = self.watts(now_s) if callable(self.watts) else self.watts
        return [(self.component, float(w))]


def _read_trace_rows(path: str | os.PathLike) -> list[tuple[float, Component, float]]:
    rows: list[tuple[float, Component, float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t_s", "component", "value"]:
            raise InvalidSampleError(f"{path}: expected header 't_s,component,value', got {header}")
        last_t = -math.inf
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise InvalidSampleError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                t = float(row[0])
                comp = Component(row[1].strip().lower())
                value = float(row[2])
            except ValueError as exc:
                raise InvalidSampleError(f"{path}:{lineno}: {exc}") from None
            if t < last_t:
                raise InvalidSampleError(f"{path}:{lineno}: rows not sorted by t_s")
            if not value >= 0:
                raise InvalidSampleError(f"{path}:{lineno}: negative value {value}")
            last_t = t
            rows.append((t, comp, value))
    return rows


def _as_watts(component: Component, value: float) -> float:
    return memory_watts(value) if component is Component.RAM else value


def load_trace(path: str | os.PathLike) -> list[PowerSample]:
    """Read a trace CSV as power samples; ram rows (GB) become watts."""
    return [PowerSample(t, c, _as_watts(c, v)) for t, c, v in _read_trace_rows(path)]


class TraceReplay(PowerSource):
    """Replays a recorded trace one timestamp per poll.

    Rows sharing a ``t_s`` value are returned together. With ``loop=True``
    the trace restarts after its last row instead of raising
    :class:`SourceExhausted`.
    """

    def __init__(self, path: str | os.PathLike, loop: bool = False) -> None:
        self.path = Path(path)
        self.loop = loop
        self.name = f"trace:{self.path.name}"
        ticks: list[list[tuple[Component, float]]] = []
        last_t = None
        for t, comp, value in _read_trace_rows(self.path):
            if t != last_t:
                ticks.append([])
                last_t = t
            ticks[-1].append((comp, _as_watts(comp, value)))
        if not ticks:
            raise InvalidSampleError(f"{path}: trace has no rows")
        self._ticks = ticks
        self._pos = 0

    def __len__(self) -> int:
        return len(self._ticks)

    def start(self, now_s: float) -> None:
        self._pos = 0

    def poll(self, now_s: float) -> list[tuple[Component, float]]:
        if self._pos >= len(self._ticks):
            if not self.loop:
                raise SourceExhausted(self.name)
            self._pos = 0
        tick = self._ticks[self._pos]
        self._pos += 1
        return list(tick)


class MemoryEstimator(PowerSource):
    """Resident memory converted to power at 0.375 W/GB.

    Without an explicit ``resident_gb`` the current process RSS is measured
    with psutil.
    """

    def __init__(self, resident_gb: float | Callable[[float], float] | None = None) -> None:
        self.resident_gb = resident_gb
        self.name = "memory"
        self.live = resident_gb is None
        self._proc = None
        if resident_gb is None:
            import psutil

            self._proc = psutil.Process()

    def poll(self, now_s: float) -> list[tuple[Component, float]]:
        if self._proc is not None:
            gb = self._proc.memory_info().rss / 1024**3
        elif callable(self.resident_gb):
            gb = self.resident_gb(now_s)
        else:
            gb = self.resident_gb
        return [(Component.RAM, memory_watts(gb))]


def counter_delta(prev: int, cur: int, max_range: int) -> int:
    """Increment of a cumulative counter that wraps to zero at ``max_range``."""
    if cur >= prev:
        return cur - prev
    return max_range - prev + cur


def _rapl_root() -> Path:
    return Path(os.environ.get(RAPL_ROOT_ENV, DEFAULT_RAPL_ROOT))


class CpuCounter(PowerSource):
    """CPU package power from RAPL-style cumulative microjoule counters.

    Package domains are the top-level ``intel-rapl:N`` directories under the
    powercap root (``$CLENERGY_RAPL_ROOT`` overrides it). Sub-domains are
    skipped since they are already included in their package.
    """

    live = True

    def __init__(self, root: str | os.PathLike | None = None) -> None:
        self.root = Path(root) if root is not None else _rapl_root()
        self.name = "rapl"
        self._domains: list[tuple[Path, int]] = []
        if self.root.is_dir():
            for d in sorted(self.root.glob("intel-rapl:*")):
                if d.name.count(":") != 1:
                    continue
                energy = d / "energy_uj"
                try:
                    energy.read_text()
                    max_range = int((d / "max_energy_range_uj").read_text().strip())
                except (OSError, ValueError):
                    continue
                self._domains.append((energy, max_range))
        if not self._domains:
            raise PlatformUnavailableError(f"no readable RAPL package counters under {self.root}")
        self._prev: list[int] = []
        self._prev_t = 0.0

    def _read(self) -> list[int]:
        try:
            return [int(p.read_text().strip()) for p, _ in self._domains]
        except (OSError, ValueError) as exc:
            raise SourceError(f"RAPL read failed: {exc}") from exc

    def start(self, now_s: float) -> None:
        self._prev = self._read()
        self._prev_t = now_s

    def poll(self, now_s: float) -> list[tuple[Component, float]]:
        cur = self._read()
        dt = now_s - self._prev_t
        uj = sum(counter_delta(p, c, m) for p, c, (_, m) in zip(self._prev, cur, self._domains))
        self._prev, self._prev_t = cur, now_s
        if dt <= 0:
            return []
        return [(Component.CPU, uj * 1e-6 / dt)]


class GpuPoller(PowerSource):
    """GPU board power via NVML (``pynvml``), summed over the given devices."""

    live = True

    def __init__(self, indices: Iterable[int] = (0,)) -> None:
        try:
            import pynvml
        except ImportError:
            raise PlatformUnavailableError("pynvml is not installed") from None
        try:
            pynvml.nvmlInit()
            self._handles = [pynvml.nvmlDeviceGetHandleByIndex(i) for i in indices]
        except pynvml.NVMLError as exc:
            raise PlatformUnavailableError(f"NVML unavailable: {exc}") from None
        self._nvml = pynvml
        self.name = "nvml"

    def poll(self, now_s: float) -> list[tuple[Component, float]]:
        try:
            mw = sum(self._nvml.nvmlDeviceGetPowerUsage(h) for h in self._handles)
        except self._nvml.NVMLError as exc:
            raise SourceError(f"NVML query failed: {exc}") from exc
        return [(Component.GPU, mw / 1000.0)]


# --------------------------------------------------------------------------- sessions


@dataclass
class _Tick:
    t: float
    first_sample: int


@dataclass
class MeterSession:
    """Collects samples from a set of sources at a fixed interval.

    Only the sampler writes samples; the ledger returned by :meth:`stop` is
    immutable.
    """

    sources: Sequence[PowerSource]
    interval_s: float = DEFAULT_INTERVAL_S
    run_id: str = "run"
    clock: str = "work"
    samples: list[PowerSample] = field(default_factory=list, init=False)

    def __post_init__(self) -> None:
        if not self.sources:
            raise InvalidArgumentError("at least one power source is required")
        _check_interval(self.interval_s)
        if self.clock not in ("work", "wall"):
            raise InvalidArgumentError(f"unknown clock {self.clock!r}")
        if self.clock == "wall":
            _check_wall_interval(self.interval_s)
        self.degraded: list[str] = []
        self._done: set[int] = set()
        self._ticks: list[_Tick] = []
        self._now = 0.0
        self._t0 = 0.0
        self._end = 0.0
        self._started = False
        self._ledger: EnergyLedger | None = None
        self._stop_event = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def exhausted(self) -> bool:
        return len(self._done) == len(self.sources)

    @property
    def tick_count(self) -> int:
        return len(self._ticks)

    def tick(self, now_s: float) -> None:
        self._ticks.append(_Tick(now_s, len(self.samples)))
        for idx, src in enumerate(self.sources):
            if idx in self._done:
                continue
            try:
                readings = src.poll(now_s)
            except SourceExhausted:
                self._done.add(idx)
                continue
            except Exception as exc:  # noqa: BLE001 - any backend failure degrades the source
                logger.warning("power source %s failed at t=%.3f: %s", src.name, now_s, exc)
                self.degraded.append(src.name)
                self._done.add(idx)
                continue
            for comp, watts in readings:
                if not watts >= 0:
                    raise InvalidSampleError(f"{src.name} reported {watts} W")
                self.samples.append(PowerSample(now_s, comp, watts))

    def start(self) -> MeterSession:
        if self._started:
            raise InvalidArgumentError("session already started")
        self._started = True
        for src in self.sources:
            src.start(0.0)
        if self.clock == "wall":
            self._t0 = time.monotonic()
            self._thread = threading.Thread(target=self._run_wall, name="power-meter", daemon=True)
            self._thread.start()
        else:
            self.tick(0.0)
        return self

    def _run_wall(self) -> None:
        n = 0
        while True:
            self.tick(time.monotonic() - self._t0)
            n += 1
            if self.exhausted:
                return
            deadline = self._t0 + n * self.interval_s
            if self._stop_event.wait(max(0.0, deadline - time.monotonic())):
                return

    def advance(self, seconds: float) -> None:
        """Move the work clock forward, ticking at every interval boundary crossed."""
        if self.clock != "work":
            return
        if seconds < 0:
            raise InvalidArgumentError("cannot advance the clock backwards")
        self._now += seconds
        n = len(self._ticks)
        while n * self.interval_s <= self._now and not self.exhausted:
            self.tick(n * self.interval_s)
            n += 1

    def _trim_exhausted(self) -> None:
        # a poll that only discovered exhaustion holds no energy
        while self.exhausted and self._ticks and self._ticks[-1].first_sample == len(self.samples):
            self._ticks.pop()

    def stop(self) -> EnergyLedger:
        if self._ledger is not None:
            return self._ledger
        self._trim_exhausted()
        if self.clock == "wall":
            self._stop_event.set()
            if self._thread is not None:
                self._thread.join()
            self._end = time.monotonic() - self._t0
            wall = self._end
        else:
            self._end = len(self._ticks) * self.interval_s
            wall = self._end
        self._ledger = self._build_ledger(wall)
        return self._ledger

    def _durations(self) -> list[float]:
        dt = self.interval_s
        per_tick = []
        for i, tk in enumerate(self._ticks):
            if i + 1 < len(self._ticks):
                actual = self._ticks[i + 1].t - tk.t
                per_tick.append(actual if abs(actual - dt) > LATE_TOLERANCE * dt else dt)
            else:
                per_tick.append(dt)
        out = []
        bounds = [tk.first_sample for tk in self._ticks] + [len(self.samples)]
        for i, d in enumerate(per_tick):
            out.extend([d] * (bounds[i + 1] - bounds[i]))
        return out

    def _build_ledger(self, wall_time_s: float) -> EnergyLedger:
        joules = _weighted_joules(self.samples, self._durations())
        counts = {c: 0 for c in COMPONENTS}
        for s in self.samples:
            counts[s.component] += 1
        return EnergyLedger(
            run_id=self.run_id,
            interval_s=self.interval_s,
            joules_by_component=joules,
            sample_count_by_component=counts,
            wall_time_s=wall_time_s,
            degraded=tuple(self.degraded),
        )

    def __enter__(self) -> MeterSession:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def record_session(
    sources: Sequence[PowerSource],
    interval_s: float = DEFAULT_INTERVAL_S,
    stop: threading.Event | int | Callable[[], bool] | None = None,
    *,
    clock: str = "wall",
    run_id: str = "run",
) -> EnergyLedger:
    """Poll ``sources`` every ``interval_s`` until stopped and return the ledger.

    ``stop`` is an event, a callable returning True when done, or an integer
    number of polls. ``None`` runs until every source is exhausted, which
    only terminates for finite sources such as a non-looping trace.
    On the ``"work"`` clock polls happen back to back at nominal times.
    """
    if stop is None and any(not isinstance(s, TraceReplay) or s.loop for s in sources):
        raise InvalidArgumentError("an unbounded session needs a stop signal")
    if clock not in ("work", "wall"):
        raise InvalidArgumentError(f"unknown clock {clock!r}")
    if clock == "wall":
        _check_wall_interval(interval_s)
    if isinstance(stop, int) and stop < 0:
        raise InvalidArgumentError("poll count must be >= 0")
    session = MeterSession(sources, interval_s=interval_s, run_id=run_id, clock="work")
    session._started = True
    for src in sources:
        src.start(0.0)

    def should_stop(n: int) -> bool:
        if session.exhausted:
            return True
        if stop is None:
            return False
        if isinstance(stop, int):
            return n >= stop
        if isinstance(stop, threading.Event):
            return stop.is_set()
        return bool(stop())

    n = 0
    t0 = time.monotonic()
    while not should_stop(n):
        if clock == "wall":
            deadline = t0 + n * interval_s
            delay = deadline - time.monotonic()
            if delay > 0:
                if isinstance(stop, threading.Event):
                    if stop.wait(delay):
                        break
                else:
                    time.sleep(delay)
            session.tick(time.monotonic() - t0)
        else:
            session.tick(n * interval_s)
        n += 1
    session._trim_exhausted()
    wall = time.monotonic() - t0 if clock == "wall" else len(session._ticks) * interval_s
    return session._build_ledger(wall)
