import os
import sys
from pathlib import Path

import pytest
import torch

from bytestack.config import HierarchyConfig, StageConfig

torch.set_num_threads(1)

REPO = Path(__file__).resolve().parents[1]
DATA = REPO / "data" / "moby_dick"


def stage(kind="transformer", p=2, d=8, **kw):
    kw.setdefault("heads", 2)
    kw.setdefault("state_size", 4)
    return StageConfig(kind=kind, patch_size=p, width=d, **kw)


def hier(*stages, **kw):
    return HierarchyConfig(stages=tuple(stages), **kw)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(0)
