"""Run configuration shared by the driver, optimizer and CLI."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass


@dataclass
class RunConfig:
    # multi-neuron constraints
    mnc_enabled: bool = True
    mnc_max_pairs_per_layer: int = 50
    mnc_max_facets_per_pair: int = 12
    # dual optimization
    opt_iters_root: int = 20
    opt_iters_branch: int = 10
    opt_lr_alpha: float = 0.1
    opt_lr_beta: float = 0.05
    opt_lr_gamma: float = 0.05
    # branching
    branch_heuristic: str = "acs"  # or "babsr"
    branch_cab: bool = True
    # falsification
    attack_enabled: bool = True
    attack_steps: int = 50
    attack_restarts: int = 5
    # branch and bound
    bab_batch_size: int = 1
    timeout: float = 360.0
    max_subproblems: int = 100_000
    row_order: str = "hardest_first"  # or "easiest_first"
    intermediate_method: str = "backsub"  # or "interval"
    fully_split_exact: bool = True
    fully_split_iters: int = 500
    # run control
    seed: int = 0
    threads: int = 0  # 0: use MNBAB_THREADS or 1

    def __post_init__(self):
        if self.branch_heuristic not in ("acs", "babsr"):
            raise ValueError(f"unknown branching heuristic {self.branch_heuristic!r}")
        if self.row_order not in ("hardest_first", "easiest_first"):
            raise ValueError(f"unknown row order {self.row_order!r}")
        if self.intermediate_method not in ("backsub", "interval"):
            raise ValueError(f"unknown intermediate method {self.intermediate_method!r}")
        if self.threads == 0:
            self.threads = int(os.environ.get("MNBAB_THREADS", "1"))
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)
