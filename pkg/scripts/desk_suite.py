"""Run the reduced-budget toy suite into results/ in priority order.

Each stage is a resumable sweep: re-running skips finished cells.  Usage:
    python scripts/desk_suite.py [stage ...]
"""
import sys
from pathlib import Path

import yaml

from tensor_memory.sweep import SweepSpec, ablation_configs, run_cells, write_pivots

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs" / "desk"
RESULTS = ROOT / "results"

# ablation cells whose grid makes a full-budget run unaffordable on one core
HEAVY_STEPS = {"grid=6": 300, "grid=8": 150}


def log(msg):
    print(msg, flush=True)


def sweep(name, out):
    rows = run_cells(SweepSpec.load(CONFIGS / f"{name}.yaml").expand(), RESULTS / out, log=log)
    write_pivots(rows, RESULTS / out)


def ablate(names):
    base = yaml.safe_load((CONFIGS / "ablation_base.yaml").read_text())
    configs = []
    for name in names:
        doc = yaml.safe_load(yaml.safe_dump(base))
        if name in HEAVY_STEPS:
            doc["train"]["total_steps"] = HEAVY_STEPS[name]
        configs += ablation_configs(doc, names=[name])
    rows = run_cells(configs, RESULTS / "ablation", log=log)
    write_pivots(rows, RESULTS / "ablation")


STAGES = {
    "no_harm": lambda: sweep("no_harm", "no_harm"),
    "binding_w20": lambda: sweep("binding_w20", "binding"),
    "map": lambda: sweep("map_t32", "map"),
    "ablate_gated": lambda: ablate(["default", "write=hard", "heads=separate"]),
    "occlusion": lambda: sweep("occlusion", "occlusion"),
    "binding_w100": lambda: sweep("binding_w100", "binding"),
    "occlusion_l8": lambda: sweep("occlusion_l8", "occlusion"),
    "ablate_rest": lambda: ablate(["phys=off", "chunk=2", "chunk=4", "grid=6", "grid=8"]),
}

if __name__ == "__main__":
    for stage in sys.argv[1:] or list(STAGES):
        log(f"=== {stage}")
        STAGES[stage]()
