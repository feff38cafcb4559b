"""
qsim.py

Dense state-vector simulation of hidden-subspace money states.

States are immutable complex128 vectors over 2^n basis states. Projections use
postselection semantics: they report the branch probability and the renormalized
conditional state, and hand back an explicit zero-state sentinel when the branch is empty.
Sampling only happens when a caller passes an rng.
"""
import enum
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from gf2 import MAX_DIM, CapacityError, DimensionError, Subspace, orthogonal_complement

logger = logging.getLogger(__name__)

TOL = 1e-9
ZERO_PROB = 1e-12


@dataclass(frozen=True, eq=False)
class QuantumState:
    n: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if not 1 <= self.n <= MAX_DIM:
            raise CapacityError(f"qubit count must lie in [1, {MAX_DIM}], got {self.n}")
        amps = np.array(self.amplitudes, dtype=np.complex128)
        if amps.shape != (1 << self.n,):
            raise DimensionError(f"expected {1 << self.n} amplitudes, got shape {amps.shape}")
        norm = float(np.vdot(amps, amps).real)
        if norm != 0.0 and abs(norm - 1.0) > TOL:
            raise ValueError(f"state is not normalized (norm^2 = {norm})")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def zero(cls, n: int) -> "QuantumState":
        """The sentinel returned for an empty postselection branch."""
        return cls(n, np.zeros(1 << n, dtype=np.complex128))

    @classmethod
    def basis(cls, n: int, index: int) -> "QuantumState":
        amps = np.zeros(1 << n, dtype=np.complex128)
        amps[index] = 1.0
        return cls(n, amps)

    @classmethod
    def from_vector(cls, n: int, vector) -> "QuantumState":
        """Normalize an arbitrary non-zero vector into a state."""
        vec = np.asarray(vector, dtype=np.complex128)
        norm = math.sqrt(float(np.vdot(vec, vec).real))
        if norm < math.sqrt(ZERO_PROB):
            return cls.zero(n)
        return cls(n, vec / norm)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "QuantumState":
        size = 1 << n
        return cls.from_vector(n, rng.normal(size=size) + 1j * rng.normal(size=size))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.amplitudes)

    def inner(self, other: "QuantumState") -> complex:
        """<self|other>"""
        _check_same(self, other)
        return complex(np.vdot(self.amplitudes, other.amplitudes))


@dataclass(frozen=True)
class MeasurementOutcome:
    accepted: bool
    probability: float
    post_state: QuantumState
    stage: Optional[str] = None


def _check_same(a: QuantumState, b: QuantumState):
    if a.n != b.n:
        raise DimensionError(f"qubit count mismatch: {a.n} vs {b.n}")


def _check_dims(A: Subspace, psi: QuantumState):
    if A.ambient_dim != psi.n:
        raise DimensionError(f"subspace lives in F2^{A.ambient_dim}, state has {psi.n} qubits")


def build_subspace_state(A: Subspace) -> QuantumState:
    """|A> = |A|^(-1/2) * sum over x in A of |x>"""
    amps = np.zeros(1 << A.ambient_dim, dtype=np.complex128)
    amps[A.member_indices] = 1.0 / math.sqrt(len(A))
    return QuantumState(A.ambient_dim, amps)


def apply_membership_oracle(A: Subspace, psi: QuantumState) -> QuantumState:
    """U_A: flips the sign of every amplitude indexed by a member of A."""
    _check_dims(A, psi)
    amps = psi.amplitudes.copy()
    amps[A.member_indices] *= -1
    return QuantumState(psi.n, amps)


def _mask(A: Subspace, vec: np.ndarray) -> np.ndarray:
    out = np.zeros_like(vec)
    idx = A.member_indices
    out[idx] = vec[idx]
    return out


def project_onto_subspace(A: Subspace, psi: QuantumState) -> MeasurementOutcome:
    """P_A with postselection on the accepting branch."""
    _check_dims(A, psi)
    branch = _mask(A, psi.amplitudes)
    prob = float(np.vdot(branch, branch).real)
    if prob < ZERO_PROB:
        return MeasurementOutcome(False, prob, QuantumState.zero(psi.n))
    return MeasurementOutcome(True, min(prob, 1.0), QuantumState(psi.n, branch / math.sqrt(prob)))


def _fwht(vec: np.ndarray) -> np.ndarray:
    out = np.array(vec, dtype=np.complex128, copy=True)
    size = out.shape[0]
    h = 1
    while h < size:
        view = out.reshape(-1, 2, h)
        lo = view[:, 0, :].copy()
        hi = view[:, 1, :].copy()
        view[:, 0, :] = lo + hi
        view[:, 1, :] = lo - hi
        h *= 2
    return out / math.sqrt(size)


def hadamard_all(psi: QuantumState) -> QuantumState:
    """H applied to every qubit (Walsh-Hadamard transform)."""
    return QuantumState(psi.n, _fwht(psi.amplitudes))


def verify_state(A: Subspace, psi: QuantumState,
                 rng: Optional[np.random.Generator] = None) -> MeasurementOutcome:
    """
    V_A = H P_{A-perp} H P_A.

    The acceptance probability is the squared norm of V_A applied to psi, computed by
    running the four steps literally. V_A projects onto |A>, so the accepted branch is
    reported as the phase-aligned |A> itself.

    With an rng the outcome is sampled; a rejection returns the renormalized reject branch.
    Without one the accept branch is postselected whenever it is non-empty, which only the
    lab helpers and analytic experiments rely on; protocol checks always sample.
    """
    _check_dims(A, psi)
    stage = _fwht(_mask(A, psi.amplitudes))
    stage = _fwht(_mask(orthogonal_complement(A), stage))
    prob = min(float(np.vdot(stage, stage).real), 1.0)

    if rng is None:
        accepted = prob >= ZERO_PROB
    else:
        accepted = bool(rng.random() < prob)

    ideal = build_subspace_state(A)
    overlap = np.vdot(ideal.amplitudes, psi.amplitudes)
    if accepted:
        phase = overlap / abs(overlap) if overlap != 0 else 1.0
        if phase == 1.0:
            return MeasurementOutcome(True, prob, ideal)
        return MeasurementOutcome(True, prob, QuantumState(psi.n, ideal.amplitudes * phase))

    residual = psi.amplitudes - overlap * ideal.amplitudes
    return MeasurementOutcome(False, prob, QuantumState.from_vector(psi.n, residual))


def trace_distance(psi: QuantumState, phi: QuantumState) -> float:
    """Trace distance between two pure states: sqrt(1 - |<psi|phi>|^2)."""
    _check_same(psi, phi)
    if np.array_equal(psi.amplitudes, phi.amplitudes):
        return 0.0
    gap = 1.0 - abs(np.vdot(psi.amplitudes, phi.amplitudes)) ** 2
    if gap < ZERO_PROB:
        return 0.0
    return math.sqrt(min(gap, 1.0))


def rotate_toward(psi: QuantumState, phi: QuantumState, theta: float) -> QuantumState:
    """cos(theta)|psi> + sin(theta)|phi> for orthogonal psi, phi."""
    _check_same(psi, phi)
    if abs(psi.inner(phi)) > TOL:
        raise ValueError("rotation target must be orthogonal to the state")
    return QuantumState.from_vector(
        psi.n, math.cos(theta) * psi.amplitudes + math.sin(theta) * phi.amplitudes)


class CloneStrategy(enum.Enum):
    MEASURE_COMPUTATIONAL = "measure_computational"
    MEASURE_HADAMARD = "measure_hadamard"
    IDENTITY_COPY_OF_CLASSICAL_OUTCOME = "identity_copy_of_classical_outcome"


def measure_computational(psi: QuantumState, rng: np.random.Generator) -> int:
    probs = np.abs(psi.amplitudes) ** 2
    return int(rng.choice(probs.shape[0], p=probs / probs.sum()))


def clone_attempt_lab(psi: QuantumState, strategy: CloneStrategy,
                      rng: np.random.Generator) -> Tuple[QuantumState, QuantumState]:
    """
    Baseline counterfeiting strategies (lab use only).

    Each strategy measures the state once and prepares two copies of what it saw.
    """
    strategy = CloneStrategy(strategy)
    if strategy is CloneStrategy.IDENTITY_COPY_OF_CLASSICAL_OUTCOME:
        probs = np.abs(psi.amplitudes) ** 2
        if probs.max() > 1.0 - ZERO_PROB:
            return psi, psi
        strategy = CloneStrategy.MEASURE_COMPUTATIONAL

    if strategy is CloneStrategy.MEASURE_COMPUTATIONAL:
        x = measure_computational(psi, rng)
        copy = QuantumState.basis(psi.n, x)
        return copy, copy

    y = measure_computational(hadamard_all(psi), rng)
    copy = hadamard_all(QuantumState.basis(psi.n, y))
    return copy, copy


def state_records(psi: QuantumState) -> list:
    """(index, re, im) for every amplitude above 1e-12 in magnitude."""
    idx = np.flatnonzero(np.abs(psi.amplitudes) > ZERO_PROB)
    return [{"index": int(i), "re": float(psi.amplitudes[i].real), "im": float(psi.amplitudes[i].imag)}
            for i in idx]


def load_state(records, n: int) -> QuantumState:
    amps = np.zeros(1 << n, dtype=np.complex128)
    for rec in records:
        amps[int(rec["index"])] = complex(float(rec["re"]), float(rec["im"]))
    return QuantumState(n, amps)


def dump_state(psi: QuantumState, path: Optional[str] = None) -> str:
    """
    Debug dump of a state as JSON-lines.

    Args:
        psi (QuantumState): state to dump.
        path (str): optional output file.

    Returns:
        str: the JSON-lines text.
    """
    frame = pd.DataFrame(state_records(psi), columns=["index", "re", "im"])
    text = frame.to_json(orient="records", lines=True, double_precision=15) if len(frame) else ""
    if text and not text.endswith("\n"):
        text += "\n"
    if path:
        with open(path, "w") as f:
            f.write(text)
        logger.debug(f"[Dump] Wrote {len(frame)} amplitudes to {path}")
    return text
