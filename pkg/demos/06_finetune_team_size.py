"""Size-invariant transfer: train with three agents, then load the same
parameters unchanged against a five-agent team (the mixer aggregates over
however many nodes are alive; only the fixed-size state and observation
slots matter) and fine-tune briefly.
"""

import tempfile
from pathlib import Path

from graphmix.config import EnvConfig, IOConfig, ModelConfig, RunConfig, TrainConfig
from graphmix.trainer import finetune, run_training


def grid_cfg(n_agents, total_steps, stop=-1.0):
    return RunConfig(
        env=EnvConfig(name="coopgrid", n_agents=n_agents),
        model=ModelConfig(max_agents=6),  # id one-hot sized for the largest team
        train=TrainConfig(total_steps=total_steps, eval_period=10_000,
                          eval_episodes=32, stop_at_success=stop),
        io=IOConfig())


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    print("training the source team (M=3) ...")
    base = run_training(grid_cfg(3, 200_000, stop=0.9), seed=0, out_dir=tmp / "m3")
    print(f"  source run: {base['env_steps']} steps, "
          f"success {base['final_eval'].success_rate:.3f}")

    print("loading the checkpoint against M=5 and fine-tuning ...")
    summary = finetune(tmp / "m3" / "latest.ckpt", grid_cfg(5, 0, stop=1.0),
                       steps=20_000, seed=1, out_dir=tmp / "ft",
                       source_config=grid_cfg(3, 0))
    print(f"  direct transfer: success {summary['before'].success_rate:.3f}")
    print(f"  after fine-tune: success {summary['after'].success_rate:.3f}")
