"""Stage compute-latency tables and link condition estimates.

Profiles are immutable after construction.  Compute lookups interpolate
piecewise-linearly between measured points and extrapolate linearly from the
nearest two points outside the table; both choices keep lookups deterministic
and order-preserving.
"""

from __future__ import annotations

import bisect
import csv
import enum
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, ProfileError


class Phase(enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(frozen=True)
class StageProfile:
    """Measured (or synthesized) compute latency per (phase, batched tokens).

    ``entries`` maps ``(Phase, batched_tokens)`` to seconds.  Each phase that
    appears needs at least two points, and latency must be non-decreasing in
    batched tokens within a phase.
    """

    stage_id: int
    layers: int
    entries: dict[tuple[Phase, int], float]

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ConfigError(f"stage {self.stage_id}: layers must be >= 1")
        if not self.entries:
            raise ConfigError(f"stage {self.stage_id}: empty profile")
        for phase in self.phases():
            pts = self.points(phase)
            if len(pts) < 2:
                raise ConfigError(
                    f"stage {self.stage_id}: phase {phase.value} needs >= 2 points"
                )
            prev = 0.0
            for tokens, seconds in pts:
                if tokens < 1:
                    raise ConfigError(
                        f"stage {self.stage_id}: batched_tokens must be >= 1"
                    )
                if seconds <= 0:
                    raise ConfigError(
                        f"stage {self.stage_id}: compute seconds must be > 0"
                    )
                if seconds < prev:
                    raise ConfigError(
                        f"stage {self.stage_id}: phase {phase.value} not monotone "
                        f"at {tokens} tokens"
                    )
                prev = seconds

    def phases(self) -> list[Phase]:
        return sorted({p for p, _ in self.entries}, key=lambda p: p.value)

    def points(self, phase: Phase) -> list[tuple[int, float]]:
        return sorted(
            (tokens, secs) for (p, tokens), secs in self.entries.items() if p == phase
        )


@dataclass(frozen=True)
class LinkProfile:
    """Directed link estimate: one-way latency plus available bandwidth."""

    src: str
    dst: str
    latency_s: float
    bandwidth_bps: float

    def __post_init__(self) -> None:
        if self.latency_s < 0:
            raise ConfigError(f"link {self.src}->{self.dst}: negative latency")
        if self.bandwidth_bps <= 0:
            raise ConfigError(f"link {self.src}->{self.dst}: bandwidth must be > 0")

    @property
    def name(self) -> str:
        return f"{self.src}->{self.dst}"


def compute_time(profile: StageProfile, phase: Phase, batched_tokens: int) -> float:
    """Interpolated compute seconds for a micro-batch of ``batched_tokens``.

    Outside the table the nearest two points extrapolate linearly; the result
    is clamped to stay positive.
    """
    if batched_tokens < 1:
        raise ConfigError("batched_tokens must be >= 1")
    pts = profile.points(phase)
    if not pts:
        raise ProfileError(
            f"stage {profile.stage_id} has no entries for phase {phase.value}"
        )
    xs = [t for t, _ in pts]
    ys = [s for _, s in pts]
    i = bisect.bisect_left(xs, batched_tokens)
    if i < len(xs) and xs[i] == batched_tokens:
        return ys[i]
    if i == 0:
        x0, y0, x1, y1 = xs[0], ys[0], xs[1], ys[1]
    elif i == len(xs):
        x0, y0, x1, y1 = xs[-2], ys[-2], xs[-1], ys[-1]
    else:
        x0, y0, x1, y1 = xs[i - 1], ys[i - 1], xs[i], ys[i]
    slope = (y1 - y0) / (x1 - x0)
    value = y0 + slope * (batched_tokens - x0)
    return max(value, 1e-12)


def transfer_time(link: LinkProfile, nbytes: int) -> float:
    """Seconds to move ``nbytes`` over the link: latency + bytes/bandwidth."""
    if nbytes < 0:
        raise ConfigError("byte count must be >= 0")
    return link.latency_s + nbytes / link.bandwidth_bps


SYNTH_TOKEN_POINTS = (1, 64, 256, 1024)


def synth_profile(
    layers: int,
    per_layer_token_cost: float,
    overhead: float,
    stage_id: int = 0,
) -> StageProfile:
    """Fabricate a linear profile: layers * cost * tokens + overhead.

    Both phases get identical tables at the standard token points; useful for
    tests and for clusters without measured profiles.
    """
    if layers < 1:
        raise ConfigError("layers must be >= 1")
    if per_layer_token_cost <= 0 or overhead <= 0:
        raise ConfigError("costs must be > 0")
    entries: dict[tuple[Phase, int], float] = {}
    for phase in (Phase.PREFILL, Phase.DECODE):
        for tokens in SYNTH_TOKEN_POINTS:
            entries[(phase, tokens)] = layers * per_layer_token_cost * tokens + overhead
    return StageProfile(stage_id=stage_id, layers=layers, entries=entries)


def flat_profile(seconds: float, stage_id: int = 0, layers: int = 1) -> StageProfile:
    """Constant-latency profile (same compute time at any token count)."""
    if seconds <= 0:
        raise ConfigError("seconds must be > 0")
    entries = {
        (phase, tokens): seconds
        for phase in (Phase.PREFILL, Phase.DECODE)
        for tokens in (1, 1_000_000)
    }
    return StageProfile(stage_id=stage_id, layers=layers, entries=entries)


def load_stage_profiles(path: str | Path) -> dict[int, StageProfile]:
    """Read the profile CSV ``stage_id,phase,batched_tokens,seconds``."""
    path = Path(path)
    raw: dict[int, dict[tuple[Phase, int], float]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != [
            "stage_id",
            "phase",
            "batched_tokens",
            "seconds",
        ]:
            raise ProfileError(f"{path}: bad or missing header")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                stage_id = int(row[0])
                phase = Phase(row[1].strip().lower())
                tokens = int(row[2])
                seconds = float(row[3])
            except (ValueError, IndexError) as exc:
                raise ProfileError(f"{path}: line {lineno}: {exc}") from None
            raw.setdefault(stage_id, {})[(phase, tokens)] = seconds
    profiles = {}
    for stage_id, entries in sorted(raw.items()):
        profiles[stage_id] = StageProfile(stage_id=stage_id, layers=1, entries=entries)
    return profiles


def save_stage_profiles(profiles: dict[int, StageProfile], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage_id", "phase", "batched_tokens", "seconds"])
        for stage_id in sorted(profiles):
            p = profiles[stage_id]
            for phase in p.phases():
                for tokens, secs in p.points(phase):
                    writer.writerow([stage_id, phase.value, tokens, repr(secs)])


def load_link_profiles(path: str | Path) -> list[LinkProfile]:
    """Read the link CSV ``from,to,latency_s,bandwidth_bps``."""
    path = Path(path)
    links: list[LinkProfile] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != [
            "from",
            "to",
            "latency_s",
            "bandwidth_bps",
        ]:
            raise ProfileError(f"{path}: bad or missing header")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                links.append(
                    LinkProfile(
                        src=row[0].strip(),
                        dst=row[1].strip(),
                        latency_s=float(row[2]),
                        bandwidth_bps=float(row[3]),
                    )
                )
            except (ValueError, IndexError, ConfigError) as exc:
                raise ProfileError(f"{path}: line {lineno}: {exc}") from None
    return links


def save_link_profiles(links: list[LinkProfile], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from", "to", "latency_s", "bandwidth_bps"])
        for l in links:
            writer.writerow([l.src, l.dst, repr(l.latency_s), repr(l.bandwidth_bps)])
