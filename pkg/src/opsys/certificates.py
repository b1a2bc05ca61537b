"""Certificates: a claimed bound, the value actually computed, and provenance."""
import hashlib
from dataclasses import dataclass, field


@dataclass
class Certificate:
    claim_id: str
    claimed_bound: float
    computed_value: float
    tolerance: float
    inputs_digest: str = ""
    seed: object = None
    # left empty by default so rebuilt artifacts are byte-identical
    timestamp: object = None
    details: dict = field(default_factory=dict)
    passed: bool = field(init=False)

    def __post_init__(self):
        self.claimed_bound = float(self.claimed_bound)
        self.computed_value = float(self.computed_value)
        self.tolerance = float(self.tolerance)
        self.passed = bool(self.computed_value <= self.claimed_bound + self.tolerance)

    @property
    def slack(self):
        return self.claimed_bound - self.computed_value

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        return (f"[{flag}] {self.claim_id}: value {self.computed_value:.6g} "
                f"<= bound {self.claimed_bound:.6g} (+{self.tolerance:.1g})")


def digest(*objects):
    """sha256 over the canonical serialization of ``objects``."""
    from . import io

    h = hashlib.sha256()
    for obj in objects:
        h.update(io.canonical_bytes(obj))
    return h.hexdigest()


def certify(claim_id, bound, value, tol, inputs=(), seed=None, **details):
    return Certificate(claim_id, bound, value, tol, inputs_digest=digest(*inputs) if inputs else "",
                       seed=seed, details=details)


def all_passed(certs):
    return all(c.passed for c in certs)
