"""Training experiments behind the long-running acceptance criteria.

Each run trains one model on an in-memory synthetic split and evaluates it on
full-size test images. Results are cached as JSON keyed by the run settings
and a hash of the package sources; training is deterministic, so a cache hit
is the same number a rerun would produce. Delete ``.acceptance_cache`` (or set
``DDU_NO_CACHE=1``) to force retraining.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import ddunet
from ddunet.data import DatasetSpec, as_split, generate_split
from ddunet.model import ModelConfig, build
from ddunet.partition import make_layout
from ddunet.runtime import Runtime, make_plan
from ddunet.train import TrainConfig, evaluate, fit

CACHE = Path(__file__).resolve().parent / ".acceptance_cache"
REDUCED = {"train": 1000, "val": 250, "test": 250}
DATA_SEED = 42
LINE = 2


@dataclass(frozen=True)
class Run:
    k: int
    depth: int
    comm_maps: int
    comm: bool
    seed: int
    eval_k: tuple[int, ...] = ()
    loss: str = "dice"

    @property
    def label(self) -> str:
        return f"DDU-Net({self.depth},{self.comm_maps},{'Y' if self.comm else 'N'}) k={self.k} seed={self.seed}"


def source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(ddunet.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _split(k: int, name: str):
    spec = DatasetSpec(k, seed=DATA_SEED, **REDUCED)
    return as_split(*generate_split(spec, name))


def _evaluate(model, k: int) -> dict:
    test = _split(k, "test")
    lay = make_layout(*test.images.shape[-2:], 1, k)
    with Runtime(model, make_plan(lay)) as rt:
        loss, cm = evaluate(rt, test, lay)
    return {"ious": cm.ious(), "miou": cm.mean_iou(), "loss": loss}


def train_and_evaluate(run: Run) -> dict:
    key = hashlib.sha256(json.dumps([asdict(run), REDUCED, DATA_SEED, source_hash()]).encode()).hexdigest()[:20]
    path = CACHE / f"{key}.json"
    if path.exists() and not os.environ.get("DDU_NO_CACHE"):
        return json.loads(path.read_text())
    t0 = time.time()
    train, val = _split(run.k, "train"), _split(run.k, "val")
    lay = make_layout(*train.images.shape[-2:], 1, run.k)
    model = build(ModelConfig.synthetic(run.depth, run.comm_maps, run.comm), seed=run.seed)
    record = fit(model, make_plan(lay), train, val, lay, TrainConfig(seed=run.seed, loss=run.loss))
    result = {"run": asdict(run), "epochs": len(record.rows), "best_epoch": record.best_epoch,
              "rows": record.rows, "test": {str(run.k): _evaluate(model, run.k)}}
    for k in run.eval_k:
        result["test"][str(k)] = _evaluate(model, k)
    result["seconds"] = time.time() - t0
    CACHE.mkdir(exist_ok=True)
    path.write_text(json.dumps(result, indent=1))
    return result


def line_iou(result: dict, k: int | None = None) -> float:
    k = result["run"]["k"] if k is None else k
    return result["test"][str(k)]["ious"][LINE]
