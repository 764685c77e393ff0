import os
import tempfile
from pathlib import Path


def atomic_write(target: str | Path, data: bytes) -> None:
    """Write `data` to `target` so readers see either the old or new file."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(
        dir=target.parent, prefix=f".{target.name}."
    )
    try:
        with os.fdopen(handle, "wb") as f:
            f.write(data)
        os.replace(temp_name, target)
    except BaseException:
        Path(temp_name).unlink(missing_ok=True)
        raise
