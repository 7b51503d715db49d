"""Train a small model on the arithmetic task and watch it generate.

Trains a causal baseline and a compression-mask model on a small corpus,
then decodes one held-out question with each and prints the traces'
context-size curves. Runs in a few minutes on a laptop.
"""
import numpy as np

from gistkv.corpus import gen_task, task_vocab
from gistkv.engine import CompressPolicy, VanillaPolicy, generate, grade
from gistkv.masks import MaskMode
from gistkv.metrics import dep_discrete, peak
from gistkv.model import ModelConfig
from gistkv.training import TrainConfig, train

tv = task_vocab(1)
rng = np.random.default_rng(0)
samples = [gen_task(1000 + i, int(rng.integers(2, 4))) for i in range(1200)]
question = gen_task(999_999, 3)

model_cfg = ModelConfig(
    n_layers=2, d_model=32, n_heads=4, d_ff=64,
    vocab_size=tv.size, max_positions=256, dtype="float32",
)


def train_cfg(mode, epochs):
    return TrainConfig(
        epochs=epochs, batch_size=16, learn_rate=2e-3, warmup_ratio=0.05,
        max_length=256, seed=0, mask_mode=mode, cache_size=1,
    )


print("training causal baseline ...")
params_v, rep_v = train(samples, tv, model_cfg, train_cfg(MaskMode.VANILLA, 30))
print(f"  final loss {rep_v.losses[-1]:.3f}")

print("training compression model ...")
params_c, rep_c = train(samples, tv, model_cfg, train_cfg(MaskMode.THOUGHT_CACHE, 30))
print(f"  final loss {rep_c.losses[-1]:.3f}")

print(f"\nquestion: {question.question}  (truth {question.truth})")
for name, params, policy in (
    ("vanilla", params_v, VanillaPolicy()),
    ("compressed", params_c, CompressPolicy(cache_size=1, trigger="delimiter")),
):
    out, trace = generate(params, model_cfg, tv, question.question, policy, max_new=200)
    print(
        f"{name:>10}: correct={grade(out, question.truth, tv)} "
        f"generated={len(out)} dep={dep_discrete(trace)} peak={peak(trace)}"
    )
    curve = (trace.live_before + 1).tolist()
    print(f"{'':>12}context curve: {curve[:12]} ... {curve[-6:]}")
