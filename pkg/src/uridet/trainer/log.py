"""Append-only per-iteration training log, persisted as JSON lines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class TrainLog:
    seed: int
    config_hash: str
    records: list = field(default_factory=list)
    aborted_at: int | None = None

    def append(self, iteration: int, losses: dict, lr: float, wall_time: float):
        self.records.append(
            {
                "iteration": int(iteration),
                "losses": {k: float(v) for k, v in losses.items()},
                "lr": float(lr),
                "wall_time": float(wall_time),
            }
        )

    def loss_sequence(self, key="total"):
        return [r["losses"][key] for r in self.records]

    def save(self, path):
        with open(path, "w") as f:
            header = {
                "seed": self.seed,
                "config_hash": self.config_hash,
                "aborted_at": self.aborted_at,
            }
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            lines = [json.loads(line) for line in f if line.strip()]
        log = cls(
            seed=lines[0]["seed"],
            config_hash=lines[0]["config_hash"],
            aborted_at=lines[0].get("aborted_at"),
        )
        log.records = lines[1:]
        return log
