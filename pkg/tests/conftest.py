import copy
import dataclasses
import time
from functools import lru_cache

import numpy as np
import pytest
import torch

from msproto.backbone import BackboneConfig
from msproto.data import ToyDatasetSpec, generate_toy_dataset
from msproto.grouping import count_active_prototypes
from msproto.metrics import evaluate_miou
from msproto.model import MultiScaleProtoNet, PrototypeConfig
from msproto.training import dataset_profile, run_stage1, run_stage2

SPARSITY_SEEDS = (0, 1, 2)


@lru_cache(maxsize=None)
def toy_splits(n_train=200, n_eval=50, seed=0):
    spec = ToyDatasetSpec(num_classes=3, image_size=64, seed=seed)
    return (generate_toy_dataset(spec, n_train),
            generate_toy_dataset(dataclasses.replace(spec, seed=seed + 1), n_eval))


def small_model(num_classes=3, seed=0, dtype=torch.float32, per_scale=3, groups=3):
    return MultiScaleProtoNet(BackboneConfig(), num_classes,
                              PrototypeConfig(per_scale=per_scale, groups_per_class=groups),
                              seed=seed, dtype=dtype)


def model_miou(model, samples):
    return evaluate_miou(model.predict, samples, model.num_classes)[0]


@dataclasses.dataclass
class PipelineRun:
    seed: int
    stage1: MultiScaleProtoNet
    stage1_miou: float
    head_before: torch.Tensor
    head_after: torch.Tensor
    stage2: dict  # lambda_ent -> model
    stage2_miou: dict
    support: dict  # lambda_ent -> {alpha: (count, mean support)}
    simplex_ok: dict  # lambda_ent -> bool over every stage-2 step
    steps_seen: dict
    protos_before: torch.Tensor
    protos_after: dict
    seconds: float  # stage 1, both stage-2 runs and evaluation


def simplex_rows_ok(gm, tol=1e-5):
    w = gm.weights.detach().double()
    dead = ~gm.column_alive[:, None, :].expand_as(w)
    return bool((w >= 0).all() and ((w.sum(-1) - 1).abs() <= tol).all() and (w[dead] == 0).all())


@lru_cache(maxsize=None)
def run_pipeline(seed: int) -> PipelineRun:
    start = time.perf_counter()
    train, ev = toy_splits()
    plan = dataset_profile("toy", seed=seed)
    model = small_model(seed=seed)
    head_before = model.head_proto.weight.detach().clone()
    run_stage1(plan, model, train)
    head_after = model.head_proto.weight.detach().clone()
    s1_miou = model_miou(model, ev)
    stage2, miou2, support, simplex_ok, steps_seen, after = {}, {}, {}, {}, {}, {}
    protos_before = model.bank.vectors.detach().clone()
    for lam in (0.0, plan.lambda_ent):
        m = copy.deepcopy(model)
        flags = []

        def hook(step, it, mdl, flags=flags):
            flags.append(simplex_rows_ok(mdl.groups))

        run_stage2(dataclasses.replace(plan, lambda_ent=lam), m, train, hook=hook)
        stage2[lam] = m
        miou2[lam] = model_miou(m, ev)
        support[lam] = {a: count_active_prototypes(m.raw_groups, a) for a in (0.0, 0.05, 0.1)}
        simplex_ok[lam] = all(flags)
        steps_seen[lam] = len(flags)
        after[lam] = m.bank.vectors.detach().clone()
    return PipelineRun(seed, model, s1_miou, head_before, head_after, stage2, miou2, support,
                       simplex_ok, steps_seen, protos_before, after, time.perf_counter() - start)


@pytest.fixture(scope="session")
def toy_data():
    return toy_splits()


@pytest.fixture(scope="session")
def pipeline():
    return run_pipeline


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report -----------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
