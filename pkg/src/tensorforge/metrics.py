"""Loss time series at a fixed iteration cadence plus a key-value run summary."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

CADENCE = 10
HEADER = "iteration,epoch,loss"


@dataclass
class MetricsLog:
    rows: list[tuple[int, int, float]] = field(default_factory=list)
    summary: dict[str, object] = field(default_factory=dict)
    cadence: int = CADENCE

    def record(self, iteration: int, epoch: int, loss: float) -> bool:
        """Keep the row only when ``iteration`` is a multiple of the cadence."""
        if iteration < 1:
            raise ValueError(f"iterations count from 1, got {iteration}")
        if iteration % self.cadence:
            return False
        self.rows.append((iteration, epoch, float(loss)))
        return True

    def to_csv(self) -> str:
        lines = [HEADER] + [f"{i},{e},{l!r}" for i, e, l in self.rows]
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.summary.items())

    def write(self, csv_path) -> tuple[Path, Path]:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(self.to_csv())
        summary_path = summary_path_for(csv_path)
        summary_path.write_text(self.summary_text())
        return csv_path, summary_path


def summary_path_for(csv_path) -> Path:
    return Path(csv_path).with_suffix(".summary")


def read_csv(path) -> list[tuple[int, int, float]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != HEADER:
        raise ValueError(f"{path}: missing header {HEADER!r}")
    out = []
    for ln in lines[1:]:
        i, e, l = ln.split(",")
        out.append((int(i), int(e), float(l)))
    return out
