from __future__ import annotations

import hashlib
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional

import numpy as np
import pandas as pd

from .errors import ProfileError
from .network import Network

logger = logging.getLogger(__name__)

PROFILE_COLUMNS = ("time_h", "key", "value")
DAY_HOURS = 24.0
Q_SUFFIX = ".q"


@dataclass(frozen=True, eq=False)
class ScenarioProfile:
    """Daily multiplier series per profile key, linearly interpolated in time (hours)."""

    series: Dict[str, pd.Series] = field(repr=False)

    @property
    def keys(self) -> tuple:
        return tuple(sorted(self.series))

    def value(self, key: str, t_h: float) -> float:
        try:
            s = self.series[key]
        except KeyError:
            raise ProfileError(f"profile key {key!r} not present") from None
        return float(np.interp(t_h, s.index.to_numpy(), s.to_numpy()))

    def q_key(self, key: str) -> str:
        qk = key + Q_SUFFIX
        return qk if qk in self.series else key

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for key in self.keys:
            s = self.series[key]
            for t, v in zip(s.index.to_numpy(), s.to_numpy()):
                h.update(f"{key},{float(t)!r},{float(v)!r}\n".encode())
        return h.hexdigest()

    def require(self, net: Network) -> None:
        missing = sorted(
            {ld.profile_key for ld in net.loads if ld.profile_key not in self.series}
            | {w.profile_key for w in net.wind_parks if w.profile_key not in self.series}
        )
        if missing:
            raise ProfileError("profile keys referenced by the case are missing: " + ", ".join(missing))

    @classmethod
    def constant(cls, keys: Iterable[str], value: float = 1.0) -> "ScenarioProfile":
        return cls({k: pd.Series([value, value], index=[0.0, DAY_HOURS]) for k in keys})

    @classmethod
    def for_network(cls, net: Network, value: float = 1.0) -> "ScenarioProfile":
        keys = {ld.profile_key for ld in net.loads} | {w.profile_key for w in net.wind_parks}
        return cls.constant(keys, value)


def load_profiles(text: str, net: Optional[Network] = None) -> ScenarioProfile:
    """Parse a ``time_h,key,value`` CSV into a validated profile."""
    try:
        df = pd.read_csv(io.StringIO(text), skipinitialspace=True, comment="#")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ProfileError(f"unreadable profile CSV: {e}") from e
    if tuple(df.columns) != PROFILE_COLUMNS:
        raise ProfileError(f"profile header must be {','.join(PROFILE_COLUMNS)}, got {','.join(map(str, df.columns))}")
    if df.empty:
        raise ProfileError("profile file has no rows")
    try:
        df["time_h"] = pd.to_numeric(df["time_h"])
        df["value"] = pd.to_numeric(df["value"])
    except (ValueError, TypeError) as e:
        raise ProfileError(f"non-numeric profile entry: {e}") from e
    df["key"] = df["key"].astype(str).str.strip()

    if not np.all(np.isfinite(df["value"].to_numpy())) or not np.all(np.isfinite(df["time_h"].to_numpy())):
        raise ProfileError("profile values and times must be finite")

    series: Dict[str, pd.Series] = {}
    for key, group in df.groupby("key", sort=True):
        times = group["time_h"].to_numpy()
        values = group["value"].to_numpy()
        if np.any(np.diff(times) <= 0):
            raise ProfileError(f"profile {key!r}: time is not strictly increasing")
        if np.any(values < 0):
            raise ProfileError(f"profile {key!r}: negative multiplier")
        if times[0] > 0 or times[-1] < DAY_HOURS:
            raise ProfileError(f"profile {key!r}: does not cover 0-24 h")
        series[str(key)] = pd.Series(values.astype(float), index=times.astype(float))

    profile = ScenarioProfile(series)
    if net is not None:
        profile.require(net)
    logger.debug("loaded %d profile series", len(series))
    return profile


def load_profile_file(path: Path, net: Optional[Network] = None) -> ScenarioProfile:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ProfileError(f"{path}: {e.strerror or e}") from e
    return load_profiles(text, net)
