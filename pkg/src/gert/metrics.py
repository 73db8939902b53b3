"""Channel statistics of a path set: path gain, mean excess delay, RMS delay
spread, Rician K-factor and link state."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_PG_THRESHOLD_DB = -130.0


class LinkState(str, enum.Enum):
    CONNECTED = "connected"
    OUTAGE = "outage"


@dataclass(frozen=True)
class LinkMetrics:
    state: LinkState
    path_gain_db: float | None = None
    mean_excess_delay_ns: float | None = None
    delay_spread_ns: float | None = None
    k_factor_db: float | None = None  # math.inf for a single path

    @property
    def connected(self) -> bool:
        return self.state is LinkState.CONNECTED


OUTAGE = LinkMetrics(LinkState.OUTAGE)


def metrics_from_arrays(amplitudes, delays_s, pg_threshold_db=DEFAULT_PG_THRESHOLD_DB,
                        combine="incoherent") -> LinkMetrics:
    a = np.asarray(amplitudes, dtype=np.complex128)
    tau = np.asarray(delays_s, dtype=np.float64)
    if a.size == 0:
        return OUTAGE
    p = np.abs(a) ** 2
    if combine == "incoherent":
        total = p.sum()
    elif combine == "coherent":
        total = abs(a.sum()) ** 2
    else:
        raise ValueError("combine must be 'incoherent' or 'coherent'")
    if total <= 0.0:
        return OUTAGE
    pg = 10.0 * math.log10(total)
    if pg < pg_threshold_db:
        return OUTAGE
    psum = p.sum()
    if psum <= 0.0:
        return OUTAGE
    excess = (tau - tau.min()) * 1e9
    med = float(np.dot(p, excess) / psum)
    ds = float(math.sqrt(max(0.0, np.dot(p, (excess - med) ** 2) / psum)))
    if a.size == 1:
        k = math.inf
    else:
        pmax = p.max()
        rest = psum - pmax
        k = math.inf if rest <= 0.0 else 10.0 * math.log10(pmax / rest)
    return LinkMetrics(LinkState.CONNECTED, pg, med, ds, k)


def compute_metrics(ps, pg_threshold_db=DEFAULT_PG_THRESHOLD_DB, combine="incoherent") -> LinkMetrics:
    """Reduce a path set (anything with ``amplitudes()``/``delays()``) to link metrics."""
    return metrics_from_arrays(ps.amplitudes(), ps.delays(), pg_threshold_db, combine)


def batch_metrics(rx_index, amplitudes, delays_s, n_rx, pg_threshold_db=DEFAULT_PG_THRESHOLD_DB,
                  combine="incoherent"):
    """Vectorized metrics for flat paths grouped by receiver.

    Returns a dict of (n_rx,) arrays: pg_db, med_ns, ds_ns, k_db (inf for one
    path) and connected (bool); entries of outage receivers are nan.
    """
    rx_index = np.asarray(rx_index, dtype=np.int64)
    a = np.asarray(amplitudes, dtype=np.complex128)
    p = np.abs(a) ** 2
    tau = np.asarray(delays_s, dtype=np.float64)
    count = np.bincount(rx_index, minlength=n_rx)
    psum = np.bincount(rx_index, weights=p, minlength=n_rx)
    if combine == "incoherent":
        total = psum
    elif combine == "coherent":
        re = np.bincount(rx_index, weights=a.real, minlength=n_rx)
        im = np.bincount(rx_index, weights=a.imag, minlength=n_rx)
        total = re * re + im * im
    else:
        raise ValueError("combine must be 'incoherent' or 'coherent'")
    with np.errstate(divide="ignore", invalid="ignore"):
        pg = 10.0 * np.log10(total)
    connected = (count > 0) & (total > 0) & (pg >= pg_threshold_db) & (psum > 0)
    tmin = np.full(n_rx, np.inf)
    np.minimum.at(tmin, rx_index, tau)
    excess = (tau - tmin[rx_index]) * 1e9
    with np.errstate(divide="ignore", invalid="ignore"):
        med = np.bincount(rx_index, weights=p * excess, minlength=n_rx) / psum
        var = np.bincount(rx_index, weights=p * (excess - med[rx_index]) ** 2, minlength=n_rx) / psum
        pmax = np.zeros(n_rx)
        np.maximum.at(pmax, rx_index, p)
        rest = psum - pmax
        k = np.where((count == 1) | (rest <= 0), np.inf, 10.0 * np.log10(pmax / rest))
    ds = np.sqrt(np.maximum(var, 0.0))
    nan = np.nan
    return {"pg_db": np.where(connected, pg, nan), "med_ns": np.where(connected, med, nan),
            "ds_ns": np.where(connected, ds, nan), "k_db": np.where(connected, k, nan),
            "connected": connected}
