"""Persistence plans: which objects to flush, in which code regions, how often."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .simcache import FlushKind

NEVER = None
EVERY_VISIT = 1


@dataclass(frozen=True)
class PersistencePlan:
    """Flush schedule consumed by :func:`nvcrash.workloads.run_kernel`.

    ``frequencies`` maps region id to ``None`` (never persist) or a positive
    integer ``x``.  For a LOOP region, critical objects are flushed after every
    ``x``-th inner iteration and after the last one; for a STRAIGHT region any
    integer means "flush at the end of every visit".
    """

    critical_objects: tuple = ()
    frequencies: tuple = ()  # sorted (region_id, freq) pairs, keeps the plan hashable
    kind: FlushKind = FlushKind.FLUSH_OPT
    predicted_Y_prime: Optional[float] = None
    predicted_loss: Optional[float] = None
    feasible: Optional[bool] = None
    correlations: tuple = ()  # (name, rho, p_value, selected)
    region_kinds: tuple = ()  # (region_id, "LOOP" | "STRAIGHT")
    notes: tuple = ()

    def __post_init__(self):
        freqs = self.frequencies
        if isinstance(freqs, dict):
            freqs = freqs.items()
        freqs = tuple(sorted((int(r), None if f is None else int(f)) for r, f in freqs))
        for rid, f in freqs:
            if f is not None and f < 1:
                raise ValueError(f"region {rid}: frequency must be >= 1 or NEVER")
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "critical_objects", tuple(self.critical_objects))
        rk = self.region_kinds
        if isinstance(rk, dict):
            rk = rk.items()
        object.__setattr__(self, "region_kinds", tuple(sorted(rk)))

    def frequency(self, region_id: int) -> Optional[int]:
        return dict(self.frequencies).get(region_id)

    @property
    def is_empty(self) -> bool:
        return not self.critical_objects or all(f is None for _, f in self.frequencies)

    def with_objects(self, objects) -> "PersistencePlan":
        return replace(self, critical_objects=tuple(objects))

    def to_dict(self) -> dict:
        kinds = dict(self.region_kinds)
        regions = []
        for rid, f in self.frequencies:
            kind = kinds.get(rid, "LOOP")
            if f is None:
                freq = "NEVER"
            elif kind == "STRAIGHT":
                freq = "EVERY_VISIT"
            else:
                freq = f
            regions.append({"region_id": rid, "kind": kind, "frequency": freq})
        return {
            "critical_objects": list(self.critical_objects),
            "regions": regions,
            "flush_kind": self.kind.name,
            "predicted_Y_prime": self.predicted_Y_prime,
            "predicted_loss": self.predicted_loss,
            "feasible": self.feasible,
            "objects": {
                name: {"rho": rho, "p": p, "selected": sel}
                for name, rho, p, sel in self.correlations
            },
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PersistencePlan":
        freqs, kinds = {}, {}
        for r in d.get("regions", []):
            rid = int(r["region_id"])
            f = r["frequency"]
            kinds[rid] = r.get("kind", "LOOP")
            if f in (None, "NEVER"):
                freqs[rid] = None
            elif f == "EVERY_VISIT":
                freqs[rid] = EVERY_VISIT
            else:
                freqs[rid] = int(f)
        corr = tuple(
            (name, v.get("rho"), v.get("p"), bool(v.get("selected", name in d.get("critical_objects", []))))
            for name, v in d.get("objects", {}).items()
        )
        return cls(
            critical_objects=tuple(d.get("critical_objects", [])),
            frequencies=freqs,
            kind=FlushKind[d.get("flush_kind", "FLUSH_OPT")],
            predicted_Y_prime=d.get("predicted_Y_prime"),
            predicted_loss=d.get("predicted_loss"),
            feasible=d.get("feasible"),
            correlations=corr,
            region_kinds=kinds,
            notes=tuple(d.get("notes", [])),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PersistencePlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
