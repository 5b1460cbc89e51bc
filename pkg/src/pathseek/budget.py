"""Encoder-call and tick accounting with a simulated-time cost model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass(frozen=True)
class CostModel:
    """Unit costs in arbitrary time units; only their ratios matter."""

    tile: float = 1.0
    encode: float = 10.0
    tick: float = 1.0


@dataclass
class BudgetReport:
    encoder_calls: list[int] = field(default_factory=list)
    ticks: int = 0
    regions_touched: int = 0
    costs: CostModel = field(default_factory=CostModel)

    @property
    def total_encoder_calls(self) -> int:
        return sum(self.encoder_calls)

    @property
    def simulated_time(self) -> float:
        c = self.costs
        return c.tile * self.regions_touched + c.encode * self.total_encoder_calls + c.tick * self.ticks

    def __add__(self, other: BudgetReport) -> BudgetReport:
        n = max(len(self.encoder_calls), len(other.encoder_calls))
        pad = lambda v: list(v) + [0] * (n - len(v))  # noqa: E731
        return BudgetReport(
            encoder_calls=[a + b for a, b in zip(pad(self.encoder_calls), pad(other.encoder_calls))],
            ticks=self.ticks + other.ticks,
            regions_touched=self.regions_touched + other.regions_touched,
            costs=self.costs,
        )

    def to_dict(self) -> dict:
        return {
            "encoder_calls": list(self.encoder_calls),
            "total_encoder_calls": self.total_encoder_calls,
            "ticks": self.ticks,
            "regions_touched": self.regions_touched,
            "simulated_time": self.simulated_time,
            "costs": asdict(self.costs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> BudgetReport:
        return cls(
            encoder_calls=list(d["encoder_calls"]),
            ticks=int(d["ticks"]),
            regions_touched=int(d["regions_touched"]),
            costs=CostModel(**d.get("costs", {})),
        )


def total(reports) -> BudgetReport:
    reports = list(reports)
    out = BudgetReport(costs=reports[0].costs if reports else CostModel())
    for r in reports:
        out = out + r
    return out
