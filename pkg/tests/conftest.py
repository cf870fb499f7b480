"""
Общие фикстуры тестов конвейера.
"""

import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from config import SynthConfig  # noqa: E402
from models import AffinityGraph, ChildCluster, PatchNode  # noqa: E402
from services.graph_service import GraphService  # noqa: E402


# -------------------------------------------------------------------------------------------------
# Фабрики
# -------------------------------------------------------------------------------------------------

def _nodes(n: int, tracks: Sequence[Sequence[int]] = ()) -> List[PatchNode]:
    """Узлы 0..n-1; узел вне треков получает собственный трек."""
    position: Dict[int, tuple] = {}
    for index, track in enumerate(tracks):
        for frame, node in enumerate(track):
            position[node] = (f"t{index}", frame)
    return [
        PatchNode(
            node_id=i,
            video_id=f"v{i}",
            track_id=position.get(i, (f"solo{i}", 0))[0],
            frame_index=position.get(i, (f"solo{i}", 0))[1],
        )
        for i in range(n)
    ]


def _graph(
    n: int,
    clusters: Sequence[Sequence[int]] = (),
    tracks: Sequence[Sequence[int]] = (),
    parent_of: Optional[Dict[int, int]] = None
) -> AffinityGraph:
    """Граф из явных дочерних кластеров и треков (по умолчанию один родитель 0)."""
    parents = parent_of if parent_of is not None else {i: 0 for i in range(n)}
    children = [
        ChildCluster(
            cluster_id=index,
            parent_id=parents[members[0]],
            members=tuple(sorted(members)),
        )
        for index, members in enumerate(clusters)
    ]
    return GraphService.build_graph(
        _nodes(n, tracks), parents, children, [list(track) for track in tracks], dim=0
    )


# -------------------------------------------------------------------------------------------------
# Фикстуры
# -------------------------------------------------------------------------------------------------

@pytest.fixture
def rng():
    """Генератор с фиксированным зерном."""
    return np.random.default_rng(20240601)


@pytest.fixture
def make_nodes():
    """Фабрика узлов с треками."""
    return _nodes


@pytest.fixture
def make_graph():
    """Фабрика графов из дочерних кластеров и треков."""
    return _graph


@pytest.fixture
def small_synth_config():
    """Маленький синтетический мир для быстрых тестов."""
    return SynthConfig(
        n_categories=4,
        instances_per_category=5,
        views_per_instance=2,
        d_in=16,
        instance_noise=0.3,
        view_distortion=0.5,
        seed=3,
    )


@pytest.fixture
def isolated_run(tmp_path, monkeypatch):
    """Рабочий каталог и каталог логов во временной папке."""
    monkeypatch.setenv("TIVG_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.chdir(tmp_path)
    return tmp_path
