import logging
from pathlib import Path

DATA_DIR = Path(__file__).parent / "data"


def setup_logging(level=logging.INFO):
    logging.basicConfig(level=level, format="[%(levelname)s] %(message)s")
    logger = logging.getLogger(__name__)
    return logger


def data_path(*parts: str) -> Path:
    return DATA_DIR.joinpath(*parts)


def comment_lines(path: Path) -> list[str]:
    """Non-empty lines with `#` comments stripped."""
    lines = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return lines


def header_fields(path: Path) -> dict[str, str]:
    """`# key: value` lines from the comment header of a data file."""
    fields = {}
    for raw in Path(path).read_text().splitlines():
        raw = raw.strip()
        if raw.startswith("#") and ":" in raw:
            key, value = raw[1:].split(":", 1)
            fields[key.strip()] = value.strip()
    return fields
