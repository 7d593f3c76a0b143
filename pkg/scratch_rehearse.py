"""Scratch: rehearse criteria 8 and 10 with the tightened far-distance task."""
import json
import pathlib
import shutil
import time

from span.model import ModelConfig
from span.synth import SyntheticTaskSpec, write_dataset
from span.train import OptimConfig, RunConfig, train_model

root = pathlib.Path("/tmp/spanr2")
shutil.rmtree(root, ignore_errors=True)
root.mkdir()

data = root / "cls2000"
t0 = time.perf_counter()
write_dataset(SyntheticTaskSpec(task="classification", num_train=1400,
                                num_val=300, num_test=300, seed=7), data)
print(f"gen {time.perf_counter()-t0:.0f}s", flush=True)

DIMS = (16, 32, 64)
LR = 3e-4
mk = lambda **kw: ModelConfig(input_dim=8, stage_dims=DIMS, num_heads=4,
                              w_side=4, num_classes=2, **kw)

# criterion 8: full protocol
t0 = time.perf_counter()
run = RunConfig(data_dir=str(data), out_dir=str(root / "full"),
                model=mk(), optim=OptimConfig(lr=LR, epochs=3), seed=0)
_, res = train_model(run, log=lambda *_: None)
print(f"C8 FULL: {json.dumps(res['metrics'])} ({time.perf_counter()-t0:.0f}s "
      f"best {res['best_epoch']})", flush=True)

t0 = time.perf_counter()
run = RunConfig(data_dir=str(data), out_dir=str(root / "base"),
                model=mk(num_ctx=0, no_sac=True, no_car=True),
                optim=OptimConfig(lr=LR, epochs=3), seed=0)
_, res = train_model(run, log=lambda *_: None)
print(f"C8 BASE: {json.dumps(res['metrics'])} ({time.perf_counter()-t0:.0f}s)",
      flush=True)

# criterion 10: reduced protocol
variants = {"full": mk()}
for name in ("no_sac", "no_car", "no_shift", "no_ctx", "no_rpb"):
    variants[name] = mk().with_ablation(name)
for name, model in variants.items():
    t0 = time.perf_counter()
    run = RunConfig(data_dir=str(data), out_dir=str(root / f"abl_{name}"),
                    model=model, optim=OptimConfig(lr=LR, epochs=3),
                    seed=0, max_train=500)
    _, res = train_model(run, log=lambda *_: None)
    print(f"C10[{name}]: acc {res['metrics']['accuracy']:.4f} "
          f"({time.perf_counter()-t0:.0f}s best {res['best_epoch']})", flush=True)
