"""Regenerates the frozen fixtures used by the C++ tests.

tiny_gpt2/        random 2-layer GPT-2 in HuggingFace layout (config.json,
                  model.safetensors); tokenizer comes from data/gpt2.
tiny_gpt2_golden.json
                  last-position logits and d(logit[a] - logit[b])/d(mask)
                  computed by transformers, with head masks applied to the
                  per-head slices entering attn.c_proj.
bpe_golden.json   GPT2Tokenizer ids for a set of strings.

Run from the repository root:  python3 tests/fixtures/make_fixtures.py
"""
import json
import os

import torch
from transformers import GPT2Config, GPT2LMHeadModel, GPT2Tokenizer

ROOT = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
FIX = os.path.join(ROOT, "tests", "fixtures")
DATA = os.path.join(ROOT, "data", "gpt2")

with open(os.path.join(DATA, "encoder.json")) as f:
    _vocab = json.load(f)
with open(os.path.join(DATA, "vocab.bpe"), encoding="utf-8") as f:
    _merges = [tuple(ln.rstrip("\n").split(" ")) for ln in f if ln.strip() and not ln.startswith("#version")]
tok = GPT2Tokenizer(vocab=_vocab, merges=_merges)

BPE_CASES = [
    "Hello world",
    "The capital city of Germany is Berlin.",
    " leading space",
    "double  space and   triple",
    "trailing space ",
    "it's they're we'll I'd you've she'S",
    "numbers 12345 and 3.14159 and 1,000,000",
    "23 + 18 = ",
    "gaot => goat\nbrid =>",
    "thanks => merci\nhello =>",
    "naïve café résumé",
    "emoji \U0001F600 and CJK 中文",
    "tabs\tand\nnewlines\n\n",
    "punctuation!?;:--()[]{}",
    "Supercalifragilisticexpialidocious",
    "    ",
    "a",
    "",
]


def bpe_golden():
    cases = [{"text": s, "ids": tok.encode(s)} for s in BPE_CASES]
    with open(os.path.join(FIX, "bpe_golden.json"), "w") as f:
        json.dump({"schema_version": 1, "cases": cases}, f, indent=1, ensure_ascii=False)


def tiny_model():
    torch.manual_seed(1234)
    cfg = GPT2Config(
        vocab_size=50257,
        n_positions=64,
        n_embd=16,
        n_layer=2,
        n_head=4,
        activation_function="gelu_new",
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
        tie_word_embeddings=True,
    )
    model = GPT2LMHeadModel(cfg).eval()
    # Default init has zero biases and unit LayerNorms; perturb them so the
    # loader is checked on every tensor.
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias") or ".ln_" in name:
                p.add_(0.05 * torch.randn_like(p))
        model.transformer.wte.weight.mul_(10.0)
    out_dir = os.path.join(FIX, "tiny_gpt2")
    os.makedirs(out_dir, exist_ok=True)
    model.save_pretrained(out_dir, safe_serialization=True)
    return model, cfg


def masked_logits(model, cfg, ids, mask):
    hd = cfg.n_embd // cfg.n_head
    hooks = []
    for l, block in enumerate(model.transformer.h):
        def pre(mod, args, l=l):
            (x,) = args
            scale = torch.repeat_interleave(mask[l], hd)
            return (x * scale,)
        hooks.append(block.attn.c_proj.register_forward_pre_hook(pre))
    try:
        out = model(torch.tensor([ids])).logits[0, -1]
    finally:
        for h in hooks:
            h.remove()
    return out


def golden(model, cfg):
    gen = torch.Generator().manual_seed(99)
    prompts = [
        "The capital city of Germany is Berlin. The capital of Nigeria is",
        "Hello world",
        "gaot => goat\nbrid =>",
        "23 + 18 =",
        "A banana is yellow inside. The inside of an apple is",
    ]
    cases = []
    for i, text in enumerate(prompts):
        ids = tok.encode(text)
        if i == 0:
            mask_vals = torch.ones(cfg.n_layer, cfg.n_head, dtype=torch.float64)
        else:
            mask_vals = torch.rand(cfg.n_layer, cfg.n_head, generator=gen, dtype=torch.float64)
            if i == 2:
                mask_vals[0, 1] = 0.0
        mask = mask_vals.clone().float().requires_grad_(True)
        logits = masked_logits(model, cfg, ids, mask)
        a, b = int(torch.argmax(logits)), int(ids[-1])
        loss = logits[a] - logits[b]
        loss.backward()
        probe = sorted(set([a, b] + torch.randint(0, cfg.vocab_size, (30,), generator=gen).tolist()))
        cases.append({
            "text": text,
            "ids": ids,
            "mask": mask_vals.flatten().tolist(),
            "probe_ids": probe,
            "probe_logits": [float(logits[j]) for j in probe],
            "logsumexp": float(torch.logsumexp(logits.double(), 0)),
            "argmax": a,
            "loss_ids": [a, b],
            "mask_grad": mask.grad.flatten().tolist(),
        })
    with open(os.path.join(FIX, "tiny_gpt2_golden.json"), "w") as f:
        json.dump({"schema_version": 1, "loss": "logit[a] - logit[b]", "cases": cases}, f, indent=1)


if __name__ == "__main__":
    bpe_golden()
    model, cfg = tiny_model()
    golden(model, cfg)
    print("fixtures written to", FIX)
