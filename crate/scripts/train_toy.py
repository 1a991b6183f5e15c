# SPDX-License-Identifier: MIT OR Apache-2.0
"""Train the bundled toy model and regenerate fixtures/toy/.

The model mirrors the Rust engine exactly: row-vector weights (x @ W),
pre-LayerNorm blocks with biases, learned absolute positions, tanh GELU,
an untied bias-free unembedding and a final LayerNorm. Tokens are bytes
plus BOS/EOS/PAD (256/257/258).

Outputs:
  model.ltc              LTC checkpoint (f32)
  facts.jsonl            evaluation dataset (text mode)
  facts_ids.jsonl        the same dataset pre-tokenized (ids mode)
  corpus.jsonl           training documents, one {"text": ...} per line
  reference.json         float64 log-probabilities for a few prompts

Usage: python3 scripts/train_toy.py [--out fixtures/toy] [--steps 600]
"""

import argparse
import json
import math
import os
import random
import struct

import torch
import torch.nn.functional as F

BOS, EOS, PAD, VOCAB = 256, 257, 258, 259
CONFIG = {
    "num_layers": 2,
    "hidden_dim": 64,
    "num_heads": 4,
    "mlp_hidden_dim": 256,
    "vocab_size": VOCAB,
    "max_context": 64,
    "activation": "gelu",
    "use_bias": True,
    "norm_kind": "pre_layernorm",
    "layer_norm_eps": 1e-5,
}
MATRICES = ["wq", "wk", "wv", "wo", "u_in", "u_out"]

FACT_TEMPLATES = [
    "The capital of {c} is {a}.",
    "{c}'s capital city is {a}.",
    "In {c}, the capital is {a}.",
]
PROMPT = "The capital of {c} is "
PARAPHRASES = ["{c}'s capital city is ", "In {c}, the capital is "]
FILLER = [
    "The people of {c} like the sea.",
    "It is a long way to {c}.",
    "The weather in {c} is cold and wet.",
    "Many of the roads of {c} are old.",
]


def make_names(rng, n, syllables):
    onsets = "b c d f g h k l m n p r s t v z".split()
    vowels = "a e i o u".split()
    codas = ["", "", "n", "r", "l", "s", "th"]
    names = set()
    while len(names) < n:
        k = rng.choice(syllables)
        name = "".join(rng.choice(onsets) + rng.choice(vowels) + rng.choice(codas) for _ in range(k))
        names.add(name.capitalize())
    return sorted(names)


def build_data(seed, n_facts):
    rng = random.Random(seed)
    names = make_names(rng, 2 * n_facts, [2, 3])
    rng.shuffle(names)
    countries, capitals = names[:n_facts], names[n_facts:]
    docs = []
    facts = []
    for i, (c, a) in enumerate(zip(countries, capitals)):
        count = max(1, round(24 / (i + 1) ** 0.8))
        for j in range(count):
            docs.append(FACT_TEMPLATES[(i + j) % len(FACT_TEMPLATES)].format(c=c, a=a))
        facts.append((c, a))
    for c in countries:
        docs.append(rng.choice(FILLER).format(c=c))
    rng.shuffle(docs)
    lowered = [d.lower() for d in docs]
    records = []
    for i, (c, a) in enumerate(facts):
        freq = sum(1 for d in lowered if c.lower() in d and a.lower() in d)
        records.append(
            {
                "id": f"fact{i:03d}",
                "prompt": PROMPT.format(c=c),
                "answer": a,
                "paraphrases": [p.format(c=c) for p in PARAPHRASES],
                "frequency": freq,
                "subject": c,
                "answer_text": a,
            }
        )
    return docs, records


class Block(torch.nn.Module):
    def __init__(self, d, mlp, heads):
        super().__init__()
        self.heads = heads
        self.ln1 = torch.nn.LayerNorm(d, eps=CONFIG["layer_norm_eps"])
        self.ln2 = torch.nn.LayerNorm(d, eps=CONFIG["layer_norm_eps"])
        shapes = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "u_in": (d, mlp), "u_out": (mlp, d)}
        self.w = torch.nn.ParameterDict(
            {k: torch.nn.Parameter(torch.randn(*s) / math.sqrt(s[0])) for k, s in shapes.items()}
        )
        self.b = torch.nn.ParameterDict({k: torch.nn.Parameter(torch.zeros(s[1])) for k, s in shapes.items()})

    def proj(self, name, x):
        return x @ self.w[name] + self.b[name]

    def forward(self, h):
        t, d = h.shape[-2], h.shape[-1]
        hd = d // self.heads
        x = self.ln1(h)
        q, k, v = (self.proj(n, x).unflatten(-1, (self.heads, hd)).transpose(-2, -3) for n in ("wq", "wk", "wv"))
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        mask = torch.ones(t, t, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
        z = (scores.softmax(-1) @ v).transpose(-2, -3).flatten(-2)
        u = h + self.proj("wo", z)
        hidden = F.gelu(self.proj("u_in", self.ln2(u)), approximate="tanh")
        return u + self.proj("u_out", hidden)


class Toy(torch.nn.Module):
    def __init__(self):
        super().__init__()
        d, v, t = CONFIG["hidden_dim"], VOCAB, CONFIG["max_context"]
        self.embedding = torch.nn.Parameter(torch.randn(v, d) * 0.1)
        self.position = torch.nn.Parameter(torch.randn(t, d) * 0.02)
        self.blocks = torch.nn.ModuleList(
            Block(d, CONFIG["mlp_hidden_dim"], CONFIG["num_heads"]) for _ in range(CONFIG["num_layers"])
        )
        self.final_ln = torch.nn.LayerNorm(d, eps=CONFIG["layer_norm_eps"])
        self.unembedding = torch.nn.Parameter(torch.randn(d, v) / math.sqrt(d))

    def forward(self, ids):
        h = self.embedding[ids] + self.position[: ids.shape[-1]]
        for blk in self.blocks:
            h = blk(h)
        return (self.final_ln(h) @ self.unembedding).log_softmax(-1)

    def named_tensors(self):
        out = {"embedding.weight": self.embedding, "position.weight": self.position}
        for l, blk in enumerate(self.blocks):
            for m in MATRICES:
                out[f"layers.{l}.{m}.weight"] = blk.w[m]
                out[f"layers.{l}.{m}.bias"] = blk.b[m]
            for ln in ("ln1", "ln2"):
                out[f"layers.{l}.{ln}.weight"] = getattr(blk, ln).weight
                out[f"layers.{l}.{ln}.bias"] = getattr(blk, ln).bias
        out["final_ln.weight"] = self.final_ln.weight
        out["final_ln.bias"] = self.final_ln.bias
        out["unembedding.weight"] = self.unembedding
        return out


def encode(text, bos=True):
    return ([BOS] if bos else []) + list(text.encode("utf-8"))


def write_ltc(path, model, metadata):
    header = {"config": CONFIG, "fidelity": "full", "metadata": metadata}
    payload = bytearray()
    for name, t in model.named_tensors().items():
        data = t.detach().to(torch.float32).contiguous().flatten().tolist()
        header[name] = {"dtype": "f32", "shape": list(t.shape), "offset": len(payload), "length": 4 * len(data)}
        payload += struct.pack(f"<{len(data)}f", *data)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"LTCV0001" + struct.pack("<Q", len(head)) + head + payload)
    os.replace(tmp, path)


def train(docs, steps, seed):
    torch.manual_seed(seed)
    model = Toy()
    t = CONFIG["max_context"]
    seqs = []
    for d in docs:
        ids = encode(d) + [EOS]
        assert len(ids) <= t, d
        seqs.append(ids + [PAD] * (t - len(ids)))
    data = torch.tensor(seqs)
    opt = torch.optim.AdamW(model.parameters(), lr=3e-3, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=3e-3, total_steps=steps, pct_start=0.05)
    gen = torch.Generator().manual_seed(seed)
    for step in range(steps):
        batch = data[torch.randint(len(data), (32,), generator=gen)]
        logp = model(batch[:, :-1])
        target = batch[:, 1:]
        loss = F.nll_loss(logp.flatten(0, 1), target.flatten(), ignore_index=PAD)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 500 == 0 or step == steps - 1:
            print(f"step {step:5d} loss {loss.item():.4f}", flush=True)
    return model


def greedy(model, prompt, n):
    ids = encode(prompt)
    out = []
    with torch.no_grad():
        for _ in range(n):
            nxt = int(model(torch.tensor(ids))[-1].argmax())
            out.append(nxt)
            ids.append(nxt)
    return bytes(i for i in out if i < 256).decode("utf-8", "replace")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="fixtures/toy")
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--facts", type=int, default=150)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    torch.set_num_threads(1)
    os.makedirs(args.out, exist_ok=True)

    docs, records = build_data(args.seed, args.facts)
    model = train(docs, args.steps, args.seed)
    model.eval()

    write_ltc(os.path.join(args.out, "model.ltc"), model, {"source": "scripts/train_toy.py", "seed": args.seed})
    with open(os.path.join(args.out, "corpus.jsonl"), "w") as f:
        for d in docs:
            f.write(json.dumps({"text": d}) + "\n")
    with open(os.path.join(args.out, "facts.jsonl"), "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    with open(os.path.join(args.out, "facts_ids.jsonl"), "w") as f:
        for r in records:
            ids = {
                "id": r["id"],
                "prompt_ids": encode(r["prompt"]),
                "answer_ids": encode(r["answer"], bos=False),
                "paraphrases_ids": [encode(p) for p in r["paraphrases"]],
                "frequency": r["frequency"],
                "subject": r["subject"],
                "answer_text": r["answer_text"],
            }
            f.write(json.dumps(ids) + "\n")

    # float64 reference computed from the exported f32 values
    ref = Toy().double()
    with torch.no_grad():
        for name, t in ref.named_tensors().items():
            t.copy_(model.named_tensors()[name].detach().float().double())
    prompts = [records[0]["prompt"], records[-1]["prompt"], "In " + records[5]["subject"] + ", the"]
    cases = []
    with torch.no_grad():
        for p in prompts:
            ids = encode(p)
            cases.append({"tokens": ids, "log_probs": ref(torch.tensor(ids)).tolist()})
    with open(os.path.join(args.out, "reference.json"), "w") as f:
        json.dump({"cases": cases}, f)

    correct = sum(r["answer"].lower() in greedy(model, r["prompt"], 10).lower() for r in records)
    print(f"baseline generation accuracy: {correct}/{len(records)}")


if __name__ == "__main__":
    main()
