"""Rule-based extraction of five cardiac key frames from the normalised descriptor.

All indices are 0-based and all interval arithmetic is cyclic. Starting from the frame of
maximum contraction (MS, global minimum of ``alpha``) the rules are applied in order:

* ES: first negative-to-positive zero crossing at or after MS.
* PF: first discrete local maximum (strict rise, weak fall) after ES.
* ED: last positive-to-negative zero crossing in ``(PF, MS]``.
* MD: midpoint of the arc from PF forward to ED, rounded half up.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import PhaseRuleError

logger = logging.getLogger(__name__)

PHASE_NAMES = ("ed", "ms", "es", "pf", "md")
NEG_TO_POS = "neg_to_pos"
POS_TO_NEG = "pos_to_neg"
ZERO_TOLERANCE = 1e-12


@dataclass
class PhaseSet:
    """
    Five key-frame indices on a cycle of ``T`` frames.

    The constructor checks the index range only; :meth:`is_cyclically_ordered` checks that
    walking forward from MS visits ES, PF, MD and ED in that order.

    Attributes
    ----------
    ed, ms, es, pf, md : int
        Frame indices in ``[0, T)``.
    T : int
        Sequence length.
    ties : dict
        Tie-break notes, e.g. ``{"ms": [3, 17]}`` when several frames share the minimum.
    """

    ed: int
    ms: int
    es: int
    pf: int
    md: int
    T: int
    ties: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be positive, got {self.T}")
        for name in PHASE_NAMES:
            value = int(getattr(self, name))
            if not 0 <= value < self.T:
                raise ValueError(f"{name.upper()} index {value} outside [0, {self.T})")
            setattr(self, name, value)

    def as_dict(self):
        """Phase name to index."""
        return {name: getattr(self, name) for name in PHASE_NAMES}

    def shift(self, k, T=None):
        """Indices moved by ``k`` frames modulo ``T`` (default: own length)."""
        T = self.T if T is None else T
        return PhaseSet(**{name: (getattr(self, name) + k) % T for name in PHASE_NAMES}, T=T, ties=dict(self.ties))

    def is_cyclically_ordered(self):
        """True if the forward walk from MS meets ES, PF, MD, ED in this order."""
        offset = {name: (getattr(self, name) - self.ms) % self.T for name in PHASE_NAMES}
        ed = offset["ed"] or self.T
        return 0 < offset["es"] <= offset["pf"] <= offset["md"] <= ed <= self.T

    def to_json_dict(self):
        out = {"T": int(self.T)}
        out.update(self.as_dict())
        out["ties"] = self.ties
        out["indexing"] = "0-based"
        return out

    @classmethod
    def from_json_dict(cls, values):
        """Parse a phases dict; ``"indexing": "1-based"`` labels are converted to 0-based."""
        indexing = values.get("indexing", "0-based")
        if indexing not in ("0-based", "1-based"):
            raise ValueError(f"Unknown indexing {indexing!r}")
        base = 1 if indexing == "1-based" else 0
        try:
            return cls(
                **{name: int(values[name]) - base for name in PHASE_NAMES},
                T=int(values["T"]),
                ties=dict(values.get("ties", {})),
            )
        except KeyError as e:
            raise ValueError(f"phases record is missing {e}") from e


def _effective_signs(alpha):
    """Sign per frame with near-zero values taking the sign of the next nonzero frame."""
    alpha = np.asarray(alpha, dtype=np.float64)
    scale = float(np.max(np.abs(alpha))) if alpha.size else 0.0
    signs = np.where(np.abs(alpha) <= ZERO_TOLERANCE * scale, 0, np.sign(alpha)).astype(int)
    nonzero = np.flatnonzero(signs)
    if nonzero.size == 0:
        return None
    T = len(signs)
    effective = signs.copy()
    # walk backwards twice around the cycle so every zero sees the next nonzero value
    following = signs[nonzero[0]]
    for t in range(2 * T - 1, -1, -1):
        i = t % T
        if signs[i] != 0:
            following = signs[i]
        else:
            effective[i] = following
    return effective


def zero_crossings(alpha):
    """
    Cyclic sign changes of a sequence.

    A crossing is reported at index ``t + 1`` (mod T) when the signs of frames ``t`` and
    ``t + 1 mod T`` differ. Values within ``1e-12 * max|alpha|`` of zero belong to the sign
    run that follows them, so each crossing yields one index.

    Returns
    -------
    list of (int, str)
        ``(index, "neg_to_pos" | "pos_to_neg")`` in increasing index order.

    Examples
    --------
    >>> zero_crossings([-1.0, 1.0, -1.0, 1.0])
    [(0, 'pos_to_neg'), (1, 'neg_to_pos'), (2, 'pos_to_neg'), (3, 'neg_to_pos')]
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or len(alpha) < 3:
        raise ValueError(f"zero_crossings needs a 1D sequence of at least 3 frames, got shape {alpha.shape}")
    signs = _effective_signs(alpha)
    if signs is None:
        return []
    T = len(signs)
    crossings = []
    for t in range(T):
        before, after = signs[t], signs[(t + 1) % T]
        if before != after:
            crossings.append(((t + 1) % T, NEG_TO_POS if after > 0 else POS_TO_NEG))
    return sorted(crossings)


def _is_local_max(alpha, t):
    T = len(alpha)
    return alpha[t] > alpha[(t - 1) % T] and alpha[t] >= alpha[(t + 1) % T]


def _alpha_of(desc):
    alpha = getattr(desc, "alpha_norm", desc)
    if alpha is None:
        raise ValueError("descriptor has no normalised alpha; run smooth_normalize first")
    return np.asarray(alpha, dtype=np.float64)


def extract_phases(desc):
    """
    Derive ED, MS, ES, PF and MD from a normalised motion descriptor.

    Parameters
    ----------
    desc : MotionDescriptor or array_like
        Descriptor with ``alpha_norm`` filled, or the normalised curve itself.

    Returns
    -------
    PhaseSet

    Raises
    ------
    PhaseRuleError
        Naming the rule (ES, PF or ED) that found no qualifying frame and its interval.

    Examples
    --------
    >>> t = np.arange(32)
    >>> ps = extract_phases(-np.sin(2 * np.pi * t / 32))
    >>> (ps.ms, ps.es, ps.pf, ps.ed, ps.md)
    (8, 16, 24, 0, 28)
    """
    alpha = _alpha_of(desc)
    T = len(alpha)
    if T < 3:
        raise ValueError(f"extract_phases needs T >= 3, got {T}")

    ms = int(np.argmin(alpha))
    ties = {}
    minima = np.flatnonzero(alpha == alpha[ms])
    if minima.size > 1:
        ties["ms"] = [int(i) for i in minima]
        logger.warning(f"MS tie between frames {ties['ms']}; using frame {ms}")

    def offset(i):
        return (i - ms) % T

    crossings = zero_crossings(alpha)
    rising = sorted((offset(i) for i, d in crossings if d == NEG_TO_POS))
    if not rising:
        raise PhaseRuleError("ES", (ms, ms), "no negative-to-positive crossing")
    d_es = rising[0]
    es = (ms + d_es) % T

    d_pf = next((d for d in range(d_es + 1, T) if _is_local_max(alpha, (ms + d) % T)), None)
    if d_pf is None:
        raise PhaseRuleError("PF", (es, ms), "no local maximum after ES")
    pf = (ms + d_pf) % T

    # ED offsets lie in (d_pf, T], offset 0 (ED == MS) counting as T
    falling = [offset(i) or T for i, d in crossings if d == POS_TO_NEG]
    falling = [d for d in falling if d_pf < d <= T]
    if not falling:
        raise PhaseRuleError("ED", (pf, ms), "no positive-to-negative crossing")
    d_ed = max(falling)
    ed = (ms + d_ed) % T

    arc = (ed - pf) % T
    md = (pf + int(np.floor(arc / 2.0 + 0.5))) % T

    ps = PhaseSet(ed=ed, ms=ms, es=es, pf=pf, md=md, T=T, ties=ties)
    if not ps.is_cyclically_ordered():
        raise PhaseRuleError("order", (ms, ms), f"phases {ps.as_dict()} are not cyclically ordered")
    logger.info(f"Phases (T={T}): ED {ed}, MS {ms}, ES {es}, PF {pf}, MD {md}")
    return ps


def phases_to_original(ps, report):
    """
    Map phases found on a temporally repeated sequence back to the original frames.

    Every index is reduced modulo ``report.original_T``.

    Raises
    ------
    ValueError
        If the report records no repetition.
    """
    if not report.repeated_to > 0:
        raise ValueError("phases_to_original needs a report of a repeated sequence")
    T = report.original_T
    return PhaseSet(**{name: getattr(ps, name) % T for name in PHASE_NAMES}, T=T, ties=dict(ps.ties))
