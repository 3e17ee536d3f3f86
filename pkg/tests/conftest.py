import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from causatrace.engine import Engine, correlate  # noqa: E402
from causatrace.ranker import Ranker  # noqa: E402
from causatrace.simulator import generate  # noqa: E402


def correlate_run(topo, dist=None, **ranker_kw):
    """Simulate ``topo`` and correlate its logs; returns (result, cags, engine)."""
    res = generate(topo, dist)
    eng = Engine()
    cags = list(correlate(Ranker(res.logs, eng, entry=topo.entry_spec(), **ranker_kw), eng))
    return res, cags, eng
