"""
Wider-than-trained images and attention locality
================================================

An AR model trained on 8x8 token grids can still emit an 8x12 grid: each
new token is predicted from the class token plus the most recent 63
tokens. The patch tokenizer decodes any grid, giving a 32x48 image.

We also average the attention maps over a batch and report how far back,
in raster positions, each head looks on average.
"""

import numpy as np

from elmlab.analysis import attention_average, locality_index
from elmlab.data import CorpusSpec, generate_corpus, stack, write_image
from elmlab.model import LmTrainer, Transformer, preset
from elmlab.sampling import SamplerConfig, extend_generate, tokens_to_image
from elmlab.tokenizer import TokenizerConfig, tokenize_dataset, train_tokenizer
from elmlab.vocab import VocabSpec

corpus = generate_corpus(CorpusSpec(samples_per_class=100))
images, _ = stack(corpus)
tok = train_tokenizer(images, TokenizerConfig(steps=500))
ds = tokenize_dataset(corpus, tok)
spec = VocabSpec(8, 2, 4)

model = Transformer(preset("s", vocab=spec, mode="ar"), np.random.default_rng(0), dtype=np.float32)
LmTrainer(model, lr=3e-4).fit(ds.subcodes(spec), ds.labels, 300, 32)

wide = extend_generate(model, [0, 3], 8, 12, SamplerConfig(seed=1))
pictures = tokens_to_image(wide, tok, spec)
print("extended grids", wide.shape[1:3], "-> images", pictures.shape[1:3])
for i, pixels in enumerate(pictures):
    write_image(f"wide_{i}.pgm", pixels)

summary = attention_average(model, ds.subcodes(spec)[:100], ds.labels[:100])
for layer in range(summary.maps.shape[0]):
    print(f"layer {layer}: mean attention distance per head",
          np.round([locality_index(summary, head=h)[layer] for h in summary.heads], 2).tolist())
