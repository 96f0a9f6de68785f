"""Checkpoint selection: shortest rise time among candidates close to the best steady PSNR."""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class Candidate:
    name: str
    steady_psnr: float
    rise_time: int | None
    checkpoint: str = ""


@dataclass(frozen=True)
class SelectionResult:
    candidates: tuple[Candidate, ...]
    selected: Candidate
    rationale: str

    def to_dict(self) -> dict:
        return {"candidates": [asdict(c) for c in self.candidates], "selected": asdict(self.selected),
                "rationale": self.rationale}

    @classmethod
    def from_dict(cls, d) -> "SelectionResult":
        return cls(tuple(Candidate(**c) for c in d["candidates"]), Candidate(**d["selected"]), d["rationale"])


def select_checkpoint(candidates, margin: float = 0.25) -> SelectionResult:
    """Among candidates with steady PSNR >= max - ``margin``, pick the shortest rise time.

    Ties keep the earlier candidate. If no eligible candidate reaches the baseline,
    the eligible one with the highest steady PSNR is chosen.
    """
    cands = tuple(candidates)
    if not cands:
        raise ValueError("no checkpoint candidates to select from")
    if len(cands) == 1:
        return SelectionResult(cands, cands[0], "only candidate")
    best = max(c.steady_psnr for c in cands)
    floor = best - margin
    eligible = [c for c in cands if c.steady_psnr >= floor]
    timed = [c for c in eligible if c.rise_time is not None]
    if timed:
        pick = min(timed, key=lambda c: c.rise_time)
        why = (f"shortest rise time ({pick.rise_time}) among {len(eligible)} candidates with steady PSNR "
               f">= {floor:.2f} dB (max {best:.2f} dB - {margin:g} dB)")
    else:
        pick = max(eligible, key=lambda c: (c.steady_psnr, -cands.index(c)))
        why = (f"no eligible candidate reached the baseline; highest steady PSNR ({pick.steady_psnr:.2f} dB) "
               f"among {len(eligible)} candidates with steady PSNR >= {floor:.2f} dB")
    return SelectionResult(cands, pick, why)
