from datetime import datetime, timezone
from pathlib import Path

import pandas as pd

from hsps import __version__
from hsps.utils import setup_logging

logger = setup_logging()

FLOAT_FORMAT = "%.10g"


class Report:
    """Output directory of one CLI run: CSV files with provenance headers and a `summary.txt` of tables."""

    def __init__(
        self,
        out_dir: str | Path,
        scenario_name: str,
        scenario_hash: str,
        seed: int | None = None,
        deterministic: bool = False,
    ):
        self.out_dir = Path(out_dir)
        self.scenario_name = scenario_name
        self.scenario_hash = scenario_hash
        self.seed = seed
        self.deterministic = deterministic
        self.tables: list[tuple[str, pd.DataFrame]] = []
        self.written: list[Path] = []

    def header(self, metadata: dict | None = None) -> list[str]:
        lines = [
            f"# tool: hsps {__version__}",
            f"# scenario: {self.scenario_name}",
            f"# scenario_hash: {self.scenario_hash}",
            f"# seed: {self.seed if self.seed is not None else '-'}",
        ]
        if not self.deterministic:
            lines.append(f"# created: {datetime.now(timezone.utc).isoformat(timespec='seconds')}")
        lines += [f"# {key}: {value}" for key, value in (metadata or {}).items()]
        return lines

    def path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / name

    def write_csv(self, name: str, frame: pd.DataFrame, metadata: dict | None = None) -> Path:
        path = self.path(name)
        with open(path, "w") as f:
            f.write("\n".join(self.header(metadata)) + "\n")
            frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self.written.append(path)
        logger.info(f"Wrote {path}")
        return path

    def add_table(self, title: str, frame: pd.DataFrame):
        self.tables.append((title, frame))

    def render(self) -> str:
        blocks = ["\n".join(self.header())]
        for title, frame in self.tables:
            blocks.append(f"{title}\n{'-' * len(title)}\n{frame.to_string(index=False)}")
        return "\n\n".join(blocks) + "\n"

    def write_summary(self) -> Path:
        path = self.path("summary.txt")
        path.write_text(self.render())
        self.written.append(path)
        logger.info(f"Wrote {path}")
        return path


def read_csv(path: str | Path) -> pd.DataFrame:
    """Reads a CSV written by `Report.write_csv`, skipping the provenance header."""
    return pd.read_csv(path, comment="#")
