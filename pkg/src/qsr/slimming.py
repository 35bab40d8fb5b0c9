"""Training-time slimming state machine.

Warm-up runs for a fixed fraction of training (default 20%), ending with the
first slim. Each evolution state then trains the remaining blocks until the
validation PSNR recovers the pre-slim level (within a tolerance) or an
iteration cap fires, whichever comes first; the cap is 80% of the total
iterations divided by the final block count. Once the target depth is
reached the schedule finalizes and goes inert.

The schedule only reads metrics; the trainer owns the network and calls
on_slim after actually skipping a block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

CONTINUE = "continue"
SLIM = "slim"
FINALIZE = "finalize"

WARMUP_FRACTION = 0.2
CAP_FRACTION = 0.8
RECOVERY_EPSILON_DB = 0.01


@dataclass
class MetricHistory:
    """Validation PSNR samples in training order."""

    entries: list = field(default_factory=list)  # (iteration, psnr_db)

    def add(self, iteration, psnr_db):
        if math.isnan(psnr_db):
            raise ValueError("MetricHistory: NaN PSNR rejected")
        if self.entries and iteration < self.entries[-1][0]:
            raise ValueError(
                f"MetricHistory: iteration {iteration} not monotone "
                f"(last {self.entries[-1][0]})"
            )
        self.entries.append((iteration, float(psnr_db)))

    def latest_after(self, iteration):
        """Most recent PSNR, but only if measured after the given iteration
        (entries are monotone, so checking the tail suffices)."""
        if self.entries and self.entries[-1][0] > iteration:
            return self.entries[-1][1]
        return None

    def latest(self):
        return self.entries[-1][1] if self.entries else None


class SlimmingSchedule:
    def __init__(self, total_iters, initial_blocks, target_blocks,
                 warmup_fraction=WARMUP_FRACTION, cap_fraction=CAP_FRACTION,
                 epsilon_db=RECOVERY_EPSILON_DB):
        if total_iters <= 0 or target_blocks <= 0 or initial_blocks < target_blocks:
            raise ValueError(
                f"SlimmingSchedule: bad config total={total_iters}, "
                f"initial={initial_blocks}, target={target_blocks}"
            )
        self.total_iters = total_iters
        self.initial_blocks = initial_blocks
        self.target_blocks = target_blocks
        self.warmup_iters = int(round(warmup_fraction * total_iters))
        self.per_state_cap = int(round(cap_fraction * total_iters / target_blocks))
        self.epsilon_db = epsilon_db
        self.blocks_remaining = initial_blocks
        self.pre_slim_metric = None
        self.state_start_iter = 0
        self.evolve_index = 0
        if initial_blocks == target_blocks:
            self.state = "final"
        else:
            self.state = "warmup"

    # -- queries -------------------------------------------------------------

    def tick(self, iteration, history: MetricHistory):
        """One of CONTINUE / SLIM / FINALIZE for this iteration."""
        if self.state == "final":
            return CONTINUE
        if self.state == "final_pending":
            self.state = "final"
            return FINALIZE
        if self.state == "warmup":
            return SLIM if iteration >= self.warmup_iters else CONTINUE
        # evolve: recovery (latest evaluation inside this state) or cap
        if iteration - self.state_start_iter >= self.per_state_cap:
            return SLIM
        latest = history.latest_after(self.state_start_iter)
        if latest is None:
            return CONTINUE  # no evaluation yet in this state: not recovered
        if self.pre_slim_metric is None:
            return CONTINUE
        return SLIM if latest >= self.pre_slim_metric - self.epsilon_db else CONTINUE

    # -- transitions (driven by the trainer) ---------------------------------

    def record_pre_slim(self, psnr_db):
        if math.isnan(psnr_db):
            raise ValueError("record_pre_slim: NaN PSNR rejected")
        self.pre_slim_metric = float(psnr_db)

    def on_slim(self, iteration):
        """A block was just skipped at this iteration."""
        if self.state not in ("warmup", "evolve"):
            raise ValueError(f"on_slim: schedule is {self.state}")
        self.blocks_remaining -= 1
        if self.blocks_remaining < self.target_blocks:
            raise ValueError("on_slim: slimmed below the target block count")
        self.state_start_iter = iteration
        if self.blocks_remaining == self.target_blocks:
            self.state = "final_pending"
        else:
            self.state = "evolve"
            self.evolve_index += 1

    # -- checkpointing --------------------------------------------------------

    def to_dict(self):
        return {
            "total_iters": self.total_iters,
            "initial_blocks": self.initial_blocks,
            "target_blocks": self.target_blocks,
            "warmup_iters": self.warmup_iters,
            "per_state_cap": self.per_state_cap,
            "epsilon_db": self.epsilon_db,
            "blocks_remaining": self.blocks_remaining,
            "pre_slim_metric": self.pre_slim_metric,
            "state_start_iter": self.state_start_iter,
            "evolve_index": self.evolve_index,
            "state": self.state,
        }

    @classmethod
    def from_dict(cls, d):
        sched = cls(d["total_iters"], d["initial_blocks"], d["target_blocks"])
        sched.warmup_iters = d["warmup_iters"]
        sched.per_state_cap = d["per_state_cap"]
        sched.epsilon_db = d["epsilon_db"]
        sched.blocks_remaining = d["blocks_remaining"]
        sched.pre_slim_metric = d["pre_slim_metric"]
        sched.state_start_iter = d["state_start_iter"]
        sched.evolve_index = d["evolve_index"]
        sched.state = d["state"]
        return sched
