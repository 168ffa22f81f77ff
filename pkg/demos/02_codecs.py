# %% [markdown]
# # Codecs and residual vector quantization
#
# The denoiser never sees waveforms.  A frozen codec turns audio into a
# (channels, frames) latent, the U-Net cleans the latent, and the codec
# decodes it back.  Two codecs ship with the package.

# %%
import sys

import numpy as np

from codecdenoise.audio_io import synth_tone_mix
from codecdenoise.codec import (
    CodecSpec,
    RvqSpec,
    ToyCodecTrainConfig,
    build_codec,
    pretrain_toy_codec,
    roundtrip_si_sdr,
    rvq_quantize_frames,
    train_rvq,
)

wave = synth_tone_mix(seed=0, duration_s=1.0)

# %% [markdown]
# ## IdentityFrame
#
# Cuts the waveform into hop-sized blocks and stacks them as channels.  It is
# exactly invertible, which makes it the reference codec for tests.

# %%
ident = build_codec(CodecSpec("IdentityFrame", hop=256))
lat = ident.encode(wave)
print("latent shape", lat.values.shape, "for", len(wave), "samples")
print("bitwise lossless:", ident.decode(lat).samples.tobytes() == wave.samples.tobytes())

# %% [markdown]
# ## ToyConv
#
# A small strided-conv autoencoder (hop 64, 32 latent channels) trained on
# clean tones with L1 plus mel loss, then frozen.  The default 1000 steps take
# about a minute and reach roughly 30 dB round trip; pass a smaller step count
# on the command line for a quicker, rougher codec.

# %%
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
corpus = [synth_tone_mix(i, 2.0) for i in range(100)]
toy, report = pretrain_toy_codec(corpus, ToyCodecTrainConfig(steps=steps))
held_out = [synth_tone_mix(10_000 + i, 2.0) for i in range(5)]
print(f"{steps} steps: reconstruction L1 {report.l1_before:.4f} -> {report.l1_after:.4f}")
print(f"held-out round-trip SI-SDR {roundtrip_si_sdr(toy, held_out):.2f} dB")
print("frozen:", not any(p.requires_grad for p in toy.params.values()))

# %% [markdown]
# ## Residual vector quantization
#
# Each stage quantizes what the previous stages left over.  Every codebook
# holds the zero vector, so a stage can never make the residual worse.

# %%
frames = toy.encode_array(np.stack([w.samples for w in held_out]))
frames = frames.transpose(0, 2, 1).reshape(-1, frames.shape[1])
books = train_rvq(frames, RvqSpec(stages=6, codebook_size=64))
_, quant, norms = rvq_quantize_frames(frames, books)
print("mean residual norm per stage:", np.round(norms.mean(axis=0), 4))
_, _, exact = rvq_quantize_frames(books[0][1:4], books)
print("codebook vectors quantize to a zero residual:", bool(np.all(exact[:, -1] == 0)))
