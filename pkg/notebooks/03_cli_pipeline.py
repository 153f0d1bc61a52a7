# %% [markdown]
# # End-to-end command-line pipeline
# Generates data, trains a deliberately tiny model, samples rollouts, scores
# them and renders an overlay. Each step shells out to the ``niva`` command.

# %%
import pathlib
import subprocess
import tempfile

work = pathlib.Path(tempfile.mkdtemp(prefix="niva-demo-"))


def niva(*args):
    cmd = ["niva", *map(str, args)]
    print("$", " ".join(cmd))
    subprocess.run(cmd, check=True)


# %%
niva("gen", "--kind", "straight-road", "--n", 6, "--seed", 0, "--out", work / "train.jsonl")
niva("gen", "--kind", "straight-road", "--n", 2, "--seed", 1, "--out", work / "test.jsonl")
niva("train", "--data", work / "train.jsonl", "--out", work / "model.ckpt",
     "--set", "model.model_dim=16", "--set", "model.style_dim=4", "--set", "model.num_heads=2",
     "--set", "train.epochs=20", "--set", "train.batch_size=6", "--set", "train.warmup_steps=2")

# %%
niva("sample", "--ckpt", work / "model.ckpt", "--data", work / "test.jsonl", "--rollouts", 4,
     "--out", work / "rollouts.jsonl")
niva("eval", "--rollouts", work / "rollouts.jsonl", "--truth", work / "test.jsonl", "--out", work / "metrics.csv")
print((work / "metrics.csv").read_text())
niva("plot", "--rollouts", work / "rollouts.jsonl", "--out", work / "overlay.svg")
