"""Finite-state Markov channel models for a dual mmWave / sub-6 GHz link.

The mmWave link is modeled on two timescales:

* a long-term link-state chain over {LoS, NLoS, outage} (blockage / shadowing),
* a small-scale capacity chain quantizing the capacity within each link state.

The combined process over (link state, capacity level) pairs has the kernel

    P[(i, c_m) -> (j, c_k)] = p_ii * q^i_mk        if j == i
                              p_ij * P^(j)(c_k)    if j != i

i.e. within a link state the small-scale chain runs; on a link-state change the
capacity level is redrawn from its stationary law for the new link state.

The sub-6 GHz link is a simple two-state (bad/good) channel.

All model objects are immutable after construction and safe to share across
threads; samplers take a caller-owned numpy Generator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

ROW_SUM_TOL = 1e-12
STATIONARY_FIXED_POINT_TOL = 1e-9


class ModelError(ValueError):
    """Raised when a channel model violates its invariants."""


class LinkState(Enum):
    LOS = "l"
    NLOS = "n"
    OUTAGE = "o"


LINK_ORDER = (LinkState.LOS, LinkState.NLOS, LinkState.OUTAGE)


@dataclass(frozen=True)
class CapacityLevel:
    """One quantized capacity level of a link state.

    capacity is normalized (unitless, max 1); the outage state has exactly one
    level with capacity 0.
    """

    link: LinkState
    index: int  # 1-based within the link state
    capacity: float
    label: str = ""

    def __post_init__(self):
        if self.index < 1:
            raise ModelError(f"level index must be >= 1, got {self.index}")
        if not 0.0 <= self.capacity <= 1.0:
            raise ModelError(f"capacity must be in [0, 1], got {self.capacity}")
        if self.link is LinkState.OUTAGE and self.capacity != 0.0:
            raise ModelError("outage capacity must be exactly 0")
        if not self.label:
            object.__setattr__(self, "label", f"c_{self.link.value}{self.index}")


@dataclass(frozen=True)
class ChannelState:
    link: LinkState
    level: CapacityLevel

    def __post_init__(self):
        if self.level.link is not self.link:
            raise ModelError(
                f"level {self.level.label} belongs to {self.level.link}, not {self.link}"
            )


def _check_row_stochastic(matrix: np.ndarray, name: str) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ModelError(f"{name} must be square, got shape {matrix.shape}")
    if (matrix < -ROW_SUM_TOL).any():
        raise ModelError(f"{name} has negative entries")
    row_sums = matrix.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > ROW_SUM_TOL:
        raise ModelError(f"{name} rows must sum to 1 within {ROW_SUM_TOL}")
    return matrix


def _check_distribution(vec: np.ndarray, name: str) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    if (vec < -ROW_SUM_TOL).any():
        raise ModelError(f"{name} has negative entries")
    if abs(vec.sum() - 1.0) > ROW_SUM_TOL:
        raise ModelError(f"{name} must sum to 1 within {ROW_SUM_TOL}")
    return vec


class TwoLayerModel:
    """Two-layer mmWave channel: link-state chain over small-scale capacity chains.

    Parameters
    ----------
    link_kernel : (3, 3) row-stochastic matrix over LINK_ORDER = (l, n, o).
    levels : dict LinkState -> list[CapacityLevel] (outage: single zero level).
    small_scale : dict LinkState -> row-stochastic kernel over that link's levels.
    level_dist : dict LinkState -> stationary distribution over that link's levels.
        Must be a fixed point of the matching small_scale kernel within 1e-9.
    """

    def __init__(self, link_kernel, levels, small_scale, level_dist):
        self.link_kernel = _check_row_stochastic(link_kernel, "link_kernel")
        if self.link_kernel.shape != (3, 3):
            raise ModelError("link_kernel must be 3x3 over (l, n, o)")
        self.levels = {link: tuple(levels[link]) for link in LINK_ORDER}
        self.small_scale = {}
        self.level_dist = {}
        for link in LINK_ORDER:
            lv = self.levels[link]
            if not lv:
                raise ModelError(f"link {link.value} has no capacity levels")
            for level in lv:
                if level.link is not link:
                    raise ModelError(f"level {level.label} listed under wrong link")
            kern = _check_row_stochastic(small_scale[link], f"small_scale[{link.value}]")
            dist = _check_distribution(level_dist[link], f"level_dist[{link.value}]")
            if kern.shape[0] != len(lv) or dist.shape[0] != len(lv):
                raise ModelError(f"small-scale shapes for {link.value} do not match levels")
            if np.abs(dist @ kern - dist).max() > STATIONARY_FIXED_POINT_TOL:
                raise ModelError(
                    f"level_dist[{link.value}] is not a fixed point of its small-scale kernel"
                )
            self.small_scale[link] = kern
            self.level_dist[link] = dist
        if len(self.levels[LinkState.OUTAGE]) != 1:
            raise ModelError("outage must have exactly one capacity level")
        # flat state enumeration: LoS levels, then NLoS, then outage
        self.states: tuple[ChannelState, ...] = tuple(
            ChannelState(link, level) for link in LINK_ORDER for level in self.levels[link]
        )
        self._state_index = {s: i for i, s in enumerate(self.states)}
        self._combined = None

    @property
    def n_states(self) -> int:
        return len(self.states)

    def state_index(self, state: ChannelState) -> int:
        return self._state_index[state]

    def combined_kernel(self) -> np.ndarray:
        if self._combined is None:
            self._combined = build_combined_kernel(self)
        return self._combined


def build_combined_kernel(model: TwoLayerModel) -> np.ndarray:
    """Row-stochastic kernel over all (link, level) channel states.

    Entry ((i, c_m) -> (j, c_k)) is p_ii * q^i_mk when j == i and
    p_ij * P^(j)(c_k) when j != i. Marginalizing over destination levels
    recovers the link kernel exactly.
    """
    n = model.n_states
    kernel = np.zeros((n, n))
    offsets = {}
    pos = 0
    for link in LINK_ORDER:
        offsets[link] = pos
        pos += len(model.levels[link])
    link_idx = {link: k for k, link in enumerate(LINK_ORDER)}
    for i_link in LINK_ORDER:
        oi = offsets[i_link]
        q = model.small_scale[i_link]
        for m in range(len(model.levels[i_link])):
            row = oi + m
            for j_link in LINK_ORDER:
                p_ij = model.link_kernel[link_idx[i_link], link_idx[j_link]]
                oj = offsets[j_link]
                if j_link is i_link:
                    kernel[row, oj : oj + q.shape[0]] = p_ij * q[m]
                else:
                    kernel[row, oj : oj + len(model.levels[j_link])] = (
                        p_ij * model.level_dist[j_link]
                    )
    return _check_row_stochastic(kernel, "combined kernel")


def stationary_distribution(kernel, tol: float = 1e-10, max_iter: int = 200_000) -> np.ndarray:
    """Stationary distribution of a row-stochastic kernel by power iteration.

    Returns pi with pi @ K = pi, sum(pi) = 1, residual below tol. Raises
    ModelError when the iteration cap is hit (reducible or periodic chain).
    """
    kernel = _check_row_stochastic(kernel, "kernel")
    n = kernel.shape[0]
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ kernel
        nxt /= nxt.sum()
        if np.abs(nxt - pi).max() < tol:
            # one more application tightens the residual
            pi = nxt @ kernel
            pi /= pi.sum()
            if np.abs(pi @ kernel - pi).max() < tol:
                return pi
        pi = nxt
    raise ModelError(f"power iteration did not converge in {max_iter} iterations")


def slot_kernel(target: np.ndarray, tau: float, t_base: float = 1.0) -> np.ndarray:
    """Rescale a per-t_base kernel to a per-slot kernel of length tau.

    K_slot = I + (tau / t_base) * (K - I). Leaves the stationary distribution
    unchanged while stretching sojourn times by t_base / tau, so a kernel whose
    natural timescale is seconds can drive a sub-millisecond slotted system.
    """
    target = _check_row_stochastic(target, "target kernel")
    if tau <= 0 or t_base <= 0:
        raise ModelError("tau and t_base must be positive")
    if tau > t_base:
        raise ModelError("tau must not exceed t_base")
    eye = np.eye(target.shape[0])
    return _check_row_stochastic(eye + (tau / t_base) * (target - eye), "slot kernel")


def sample_next(state: ChannelState, model: TwoLayerModel, rng: np.random.Generator) -> ChannelState:
    """One step of the combined channel chain. Deterministic given the rng state."""
    row = model.combined_kernel()[model.state_index(state)]
    j = int(rng.choice(len(row), p=row))
    return model.states[j]


def capacity_from_gain(
    bandwidth_hz: float, tx_power_w: float, noise_psd: float, gain: float, clamp: bool = True
) -> float:
    """Shannon-style capacity W * ln(P * G / (N0 * W)) in bits/s (natural log).

    With clamp=True (default) the result is floored at 0 (physical capacity is
    nonnegative; zero gain gives 0). With clamp=False the raw value is returned
    and a log argument <= 0 raises ValueError: the caller owns the clamp.
    """
    if bandwidth_hz <= 0 or tx_power_w <= 0 or noise_psd <= 0:
        raise ValueError("bandwidth, power and noise PSD must be positive")
    if gain < 0:
        raise ValueError("gain must be nonnegative")
    arg = tx_power_w * gain / (noise_psd * bandwidth_hz)
    if arg <= 0.0:
        if clamp:
            return 0.0
        raise ValueError(f"log argument {arg} <= 0; enable clamp or fix inputs")
    value = bandwidth_hz * np.log(arg)
    if clamp:
        return float(max(value, 0.0))
    return float(value)


@dataclass(frozen=True)
class GainModel:
    """Gaussian small-scale gain per (link, level); outage gain is identically 0.

    means/variances map a capacity-level label (e.g. "c_n1") to the Gaussian
    parameters of the squared channel gain magnitude.
    """

    means: dict
    variances: dict

    def __post_init__(self):
        for label, var in self.variances.items():
            if var < 0:
                raise ModelError(f"variance for {label} must be >= 0")


def sample_gain(
    gain_model: GainModel, link: LinkState, level: CapacityLevel, rng: np.random.Generator
) -> float:
    """Draw a gain for (link, level): Gaussian clamped at 0; outage returns exactly 0."""
    if link is LinkState.OUTAGE:
        return 0.0
    mean = gain_model.means[level.label]
    var = gain_model.variances[level.label]
    if var == 0.0:
        return float(mean)
    return float(max(rng.normal(mean, np.sqrt(var)), 0.0))


@dataclass(frozen=True)
class Sub6Model:
    """Two-state (bad/good) sub-6 GHz channel, given by its marginal law.

    An optional 2x2 kernel may be attached for users with temporal data; the
    bundled experiments only need the marginal plus the mmWave coupling.
    """

    states: tuple = ("bad", "good")
    probs: tuple = (0.2, 0.8)
    kernel: np.ndarray | None = None

    def __post_init__(self):
        _check_distribution(np.asarray(self.probs), "sub-6 probabilities")
        if len(self.states) != len(self.probs):
            raise ModelError("sub-6 states and probabilities must have equal length")
        if self.kernel is not None:
            _check_row_stochastic(self.kernel, "sub-6 kernel")


@dataclass(frozen=True)
class ChannelProcess:
    """A flat channel chain as consumed by the MDP builder and simulator.

    One state per row of `kernel`; per-state labels identify the mmWave
    capacity level, the large-scale link state, and the sub-6 state ("any"
    when the sub-6 channel carries no state). `capacities` are normalized
    mmWave capacities for trace export.
    """

    mm_labels: tuple
    link_labels: tuple
    sub6_labels: tuple
    capacities: tuple
    kernel: np.ndarray

    def __post_init__(self):
        _check_row_stochastic(self.kernel, "channel kernel")
        n = self.kernel.shape[0]
        for name, seq in (
            ("mm_labels", self.mm_labels),
            ("link_labels", self.link_labels),
            ("sub6_labels", self.sub6_labels),
            ("capacities", self.capacities),
        ):
            if len(seq) != n:
                raise ModelError(f"{name} length must match kernel size {n}")

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    def stationary(self) -> np.ndarray:
        return stationary_distribution(self.kernel)


def process_from_two_layer(
    model: TwoLayerModel,
    sub6_label: str = "any",
    tau: float | None = None,
    t_base: float = 1.0,
) -> ChannelProcess:
    """ChannelProcess over (link, level) states; optionally rescaled to slot length tau."""
    kernel = model.combined_kernel()
    if tau is not None:
        kernel = slot_kernel(kernel, tau, t_base)
    return ChannelProcess(
        mm_labels=tuple(s.level.label for s in model.states),
        link_labels=tuple(s.link.value for s in model.states),
        sub6_labels=tuple(sub6_label for _ in model.states),
        capacities=tuple(s.level.capacity for s in model.states),
        kernel=kernel,
    )


def process_joint_redraw(
    levels,
    sub6: Sub6Model,
    cmm_given_sub6,
    tau: float,
    coherence_s: float,
) -> ChannelProcess:
    """Joint (C_mm, st_sub6) chain with exact product-form stationary law.

    The stationary law is pi(c, u) = P(u) * P(c | u) built from the sub-6
    marginal and the conditional capacity table. Temporal structure is the lazy
    redraw chain K = I + (tau / coherence_s) * (1·pi - I): each slot the pair
    either persists or is redrawn from pi. coherence_s = tau gives the fully
    i.i.d.-per-slot reading; larger values stretch sojourn times without
    touching the marginals.
    """
    levels = tuple(levels)
    cond = {u: _check_distribution(np.asarray(cmm_given_sub6[u]), f"P(C_mm|{u})") for u in sub6.states}
    joint = []
    mm_labels, link_labels, sub6_labels, caps = [], [], [], []
    for ui, u in enumerate(sub6.states):
        for li, level in enumerate(levels):
            joint.append(sub6.probs[ui] * cond[u][li])
            mm_labels.append(level.label)
            link_labels.append(level.link.value)
            sub6_labels.append(u)
            caps.append(level.capacity)
    pi = _check_distribution(np.asarray(joint), "joint (C_mm, sub-6) law")
    redraw = np.tile(pi, (len(pi), 1))
    kernel = slot_kernel(redraw, tau, coherence_s)
    return ChannelProcess(
        mm_labels=tuple(mm_labels),
        link_labels=tuple(link_labels),
        sub6_labels=tuple(sub6_labels),
        capacities=tuple(caps),
        kernel=kernel,
    )


def export_trace(
    path,
    process: ChannelProcess,
    n_slots: int,
    seed: int,
    start: int | None = None,
) -> None:
    """Simulate the channel chain and write a CSV trace.

    Columns: slot, link_state, capacity_level, capacity.
    """
    rng = np.random.default_rng(seed)
    cum = np.cumsum(process.kernel, axis=1)
    state = int(np.argmax(process.stationary())) if start is None else start
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "link_state", "capacity_level", "capacity"])
        for t in range(n_slots):
            writer.writerow(
                [
                    t,
                    process.link_labels[state],
                    process.mm_labels[state],
                    process.capacities[state],
                ]
            )
            state = int(np.searchsorted(cum[state], rng.random(), side="right"))
