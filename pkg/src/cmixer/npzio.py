"""Reading and writing NPZ containers with byte-identical output.

``numpy.savez`` stamps the current time into the zip directory, which
breaks checksum-level reproducibility of checkpoints and derived
datasets. The writer here emits the same container format (a ZIP of
version-1.0 NPY members, stored uncompressed) with a fixed timestamp,
so two runs with the same inputs produce the same bytes.
"""

from __future__ import annotations

import io
import os
import zipfile

import numpy as np
from numpy.lib import format as npy_format

from .errors import FormatError

_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` to ``path`` as an uncompressed, reproducible NPZ."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            npy_format.write_array(
                buf, np.ascontiguousarray(arr), version=(1, 0), allow_pickle=False
            )
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_STORED
            zf.writestr(info, buf.getvalue())


def read_arrays(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Load every array from an NPZ archive into memory."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            return {name: npz[name] for name in npz.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, OSError) as exc:
        raise FormatError(f"{path}: not a readable NPZ archive ({exc})") from exc
