# %% [markdown]
# # Training a small latent denoiser
#
# A scaled-down version of the full pipeline: synthesize a paired dataset on
# disk, train a narrow U-Net over IdentityFrame latents, then score noisy and
# denoised test files.  It runs in a few minutes on one core; the full-size
# settings live in the default config used by the `codecdenoise` CLI.

# %%
import json
import tempfile
from pathlib import Path

from codecdenoise.audio_io import synth_tone_mix, write_wav
from codecdenoise.codec import CodecSpec, build_codec
from codecdenoise.degrade import DatasetConfig, build_dataset
from codecdenoise.denoiser import UNetConfig
from codecdenoise.losses import CurriculumSchedule
from codecdenoise.metrics import evaluate
from codecdenoise.trainer import TrainConfig, load_pairs, train

work = Path(tempfile.mkdtemp(prefix="codecdenoise_demo_"))
print("working in", work)

# %% [markdown]
# ## Data
#
# Forty one-second tone mixes become the clean corpus.  Each is cut into
# half-second chunks and degraded with white noise only, so a small model has
# something it can learn quickly.  Splits are assigned per source file.

# %%
tones = work / "tones"
tones.mkdir()
for i in range(40):
    write_wav(tones / f"tone_{i:03d}.wav", synth_tone_mix(i, 1.0))

cfg = DatasetConfig(clean_dirs=[str(tones)], kinds=("WhiteNoise",), variants_per_chunk=1, chunk_len=22050)
entries = build_dataset(cfg, work / "data")
by_split = {s: [e for e in entries if e.split == s] for s in ("train", "val", "test")}
print({s: len(v) for s, v in by_split.items()})
print(json.dumps(entries[0].to_json(), indent=1)[:400])

# %% [markdown]
# ## Training
#
# The U-Net is two levels deep and 16 channels wide at most.  The SI-SDR term
# joins the loss after two epochs, visible in the `w_sisdr` column.

# %%
codec = build_codec(CodecSpec("IdentityFrame", hop=64))
unet = UNetConfig(in_channels=codec.c_lat, base_channels=8, levels=2, max_channels=16, norm_groups=2)
tcfg = TrainConfig(epochs=6, batch_size=8, lr=1e-3, schedule=CurriculumSchedule(2))
result = train(
    load_pairs(by_split["train"], work / "data"),
    load_pairs(by_split["val"], work / "data"),
    codec,
    unet,
    tcfg,
    out_dir=work / "run",
)
for row in (json.loads(line) for line in (work / "run/train_log.jsonl").read_text().splitlines()):
    print(f"epoch {row['epoch']}  train {row['train_total']:.4f}  val {row['val_total']:.4f}  w_sisdr {row['w_sisdr']}")

# %% [markdown]
# ## Evaluation
#
# The report compares the noisy inputs and the model outputs against the
# clean references with arithmetic means over the selected test files.

# %%
report = evaluate(by_split["test"], work / "data", result.model, n=1000, seed=0)
print(report.table())
