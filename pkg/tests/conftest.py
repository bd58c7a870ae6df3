import json
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))


def write_dataset(root: Path, entries, sizes=None, name="manifest.json"):
    """Write blank PNGs plus a manifest; ``entries`` are (relpath, (W, H), heads, detections)."""
    root.mkdir(parents=True, exist_ok=True)
    manifest = []
    for rel, (w, h), heads, dets in entries:
        p = root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.zeros((h, w, 3), dtype=np.uint8)).save(p)
        e = {"image": rel, "heads": heads}
        if dets is not None:
            e["detections"] = dets
        manifest.append(e)
    path = root / name
    path.write_text(json.dumps(manifest))
    return path


@pytest.fixture
def make_dataset(tmp_path):
    def _make(entries, **kw):
        return write_dataset(tmp_path / "data", entries, **kw)
    return _make
